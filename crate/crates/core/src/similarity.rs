//! Embedding vectors and cosine similarity.
//!
//! [`SimilarityMatrix`] rows are images and columns are texts, so entry
//! `(i, j)` is the similarity between image `i` and text `j` of a batch; the
//! diagonal holds each sample's own pairing.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// A finite, nonempty embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("vector must have positive dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector must have positive dimension");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimMismatch { expected, found });
    }
    Ok(())
}

pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(Vector(v.0.iter().map(|x| x / norm).collect()))
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(u: &Vector, v: &Vector) -> Result<f64> {
    check_dim(u.dim(), v.dim())?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0))
}

/// Image-by-text cosine similarities of one batch plus its ID/OOD partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    entries: Array2<f64>,
    id_indices: Vec<usize>,
    ood_indices: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(entries: Array2<f64>, id_indices: Vec<usize>, ood_indices: Vec<usize>) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(Error::DimMismatch { expected: n, found: entries.ncols() });
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        for ((row, col), &value) in entries.indexed_iter() {
            if !value.is_finite() {
                return Err(Error::NonFinite("similarity matrix"));
            }
            if !(-1.0..=1.0).contains(&value) {
                return Err(Error::SimilarityOutOfRange { row, col, value });
            }
        }
        check_partition(n, &id_indices, &ood_indices)?;
        Ok(Self { entries, id_indices, ood_indices })
    }

    /// Convenience constructor: `ood_flags[i]` marks sample `i` as OOD.
    pub fn with_flags(entries: Array2<f64>, ood_flags: &[bool]) -> Result<Self> {
        let (id, ood) = partition_from_flags(ood_flags);
        Self::new(entries, id, ood)
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[[row, col]]
    }

    pub fn id_indices(&self) -> &[usize] {
        &self.id_indices
    }

    pub fn ood_indices(&self) -> &[usize] {
        &self.ood_indices
    }

    pub fn diagonal(&self) -> Array1<f64> {
        self.entries.diag().to_owned()
    }
}

pub fn partition_from_flags(ood_flags: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let id = (0..ood_flags.len()).filter(|&i| !ood_flags[i]).collect();
    let ood = (0..ood_flags.len()).filter(|&i| ood_flags[i]).collect();
    (id, ood)
}

fn check_partition(n: usize, id: &[usize], ood: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in id.iter().chain(ood) {
        if i >= n || seen[i] {
            return Err(Error::InvalidPartition { n });
        }
        seen[i] = true;
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(Error::InvalidPartition { n })
    }
}

/// Builds the `N x N` cosine similarity matrix of a batch.
pub fn similarity_matrix(
    image_embs: &[Vector],
    text_embs: &[Vector],
    id_indices: Vec<usize>,
    ood_indices: Vec<usize>,
) -> Result<SimilarityMatrix> {
    if image_embs.len() != text_embs.len() {
        return Err(Error::LengthMismatch { left: image_embs.len(), right: text_embs.len() });
    }
    if image_embs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = image_embs[0].dim();
    for v in image_embs.iter().chain(text_embs) {
        check_dim(dim, v.dim())?;
    }
    let images = stack(image_embs);
    let texts = stack(text_embs);
    let (entries, _) = cosine_matrix(images.view(), texts.view())?;
    SimilarityMatrix::new(entries, id_indices, ood_indices)
}

pub(crate) fn stack(vectors: &[Vector]) -> Array2<f64> {
    let dim = vectors.first().map_or(0, Vector::dim);
    Array2::from_shape_fn((vectors.len(), dim), |(i, j)| vectors[i].0[j])
}

/// Row norms and unit rows produced by [`cosine_matrix`], reused by its backward pass.
#[derive(Debug, Clone)]
pub struct CosineCache {
    pub image_unit: Array2<f64>,
    pub text_unit: Array2<f64>,
    pub image_norms: Array1<f64>,
    pub text_norms: Array1<f64>,
}

/// Cosine similarity between every row of `images` and every row of `texts`.
pub fn cosine_matrix(
    images: ArrayView2<'_, f64>,
    texts: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, CosineCache)> {
    check_dim(images.ncols(), texts.ncols())?;
    let (image_unit, image_norms) = unit_rows(images)?;
    let (text_unit, text_norms) = unit_rows(texts)?;
    let mut s = par::matmul(image_unit.view(), text_unit.t());
    s.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok((s, CosineCache { image_unit, text_unit, image_norms, text_norms }))
}

fn unit_rows(m: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateEmbedding);
    }
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::NonFinite("embedding"));
    }
    let unit = &m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Back-propagates `d_sim = dL/dS` through [`cosine_matrix`] to the raw rows.
pub fn cosine_matrix_backward(
    d_sim: ArrayView2<'_, f64>,
    sim: ArrayView2<'_, f64>,
    cache: &CosineCache,
) -> (Array2<f64>, Array2<f64>) {
    // dS_ij/du_i = (v̂_j - S_ij û_i) / |u_i|, symmetric for v_j.
    let weighted = &d_sim * &sim;
    let row_w = weighted.sum_axis(Axis(1));
    let col_w = weighted.sum_axis(Axis(0));

    let mut d_img = par::matmul(d_sim, cache.text_unit.view());
    d_img -= &(&cache.image_unit * &row_w.view().insert_axis(Axis(1)));
    d_img /= &cache.image_norms.view().insert_axis(Axis(1));

    let mut d_txt = par::matmul(d_sim.t(), cache.image_unit.view());
    d_txt -= &(&cache.text_unit * &col_w.view().insert_axis(Axis(1)));
    d_txt /= &cache.text_norms.view().insert_axis(Axis(1));
    (d_img, d_txt)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
        v(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn normalize_three_four_five() {
        let n = l2_normalize(&v(&[3.0, 4.0])).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-12);
        assert_eq!(l2_normalize(&v(&[1.0, 0.0])).unwrap(), v(&[1.0, 0.0]));
    }

    #[test]
    fn normalize_random_512_against_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_vector(&mut rng, 512);
        let mut ss = 0.0;
        for &e in x.as_slice() {
            ss += e * e;
        }
        let norm = ss.sqrt();
        let n = l2_normalize(&x).unwrap();
        for (a, b) in n.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b / norm).abs() < 1e-12);
        }
        assert!((n.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let err = l2_normalize(&Vector::zeros(3)).unwrap_err();
        assert!(err.to_string().contains("degenerate embedding"));
        assert!(matches!(
            cosine_similarity(&Vector::zeros(2), &v(&[1.0, 0.0])),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
        assert!(Vector::new(vec![]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let oracle = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        let got = cosine_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - oracle).abs() < 1e-15);
    }

    #[test]
    fn cosine_dim_mismatch() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])),
            Err(Error::DimMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn cosine_clamped_for_parallel_vectors() {
        let a = v(&[0.1, 0.2, 0.3, 0.7, 1e-3]);
        let b = v(&[0.3, 0.6, 0.9, 2.1, 3e-3]);
        let c = cosine_similarity(&a, &b).unwrap();
        assert!(c <= 1.0 && c > 1.0 - 1e-12);
    }

    #[test]
    fn matrix_of_identical_pairs_is_all_ones() {
        let e = v(&[0.6, 0.8]);
        let s = similarity_matrix(&[e.clone(), e.clone()], &[e.clone(), e], vec![0, 1], vec![]).unwrap();
        for &x in s.entries() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_of_basis_vectors_is_identity() {
        let e1 = v(&[1.0, 0.0]);
        let e2 = v(&[0.0, 1.0]);
        let s = similarity_matrix(&[e1.clone(), e2.clone()], &[e1, e2], vec![0], vec![1]).unwrap();
        assert_eq!(s.entries(), &ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn matrix_matches_elementwise_cosine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let imgs: Vec<_> = (0..4).map(|_| random_vector(&mut rng, 8)).collect();
        let txts: Vec<_> = (0..4).map(|_| random_vector(&mut rng, 8)).collect();
        let s = similarity_matrix(&imgs, &txts, vec![0, 2, 3], vec![1]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (imgs[i].as_slice(), txts[j].as_slice());
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..8 {
                    dot += a[k] * b[k];
                    na += a[k] * a[k];
                    nb += b[k] * b[k];
                }
                assert!((s.get(i, j) - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_errors() {
        let e = v(&[1.0, 0.0]);
        let f = v(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            similarity_matrix(std::slice::from_ref(&e), &[e.clone(), e.clone()], vec![0], vec![]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            similarity_matrix(std::slice::from_ref(&e), &[f], vec![0], vec![]),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            similarity_matrix(&[e.clone(), e.clone()], &[e.clone(), e], vec![0], vec![0]),
            Err(Error::InvalidPartition { .. })
        ));
    }

    #[test]
    fn out_of_range_entries_rejected() {
        let m = ndarray::arr2(&[[1.5]]);
        assert!(matches!(
            SimilarityMatrix::new(m, vec![0], vec![]),
            Err(Error::SimilarityOutOfRange { .. })
        ));
    }

    #[test]
    fn normalized_inputs_give_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs: Vec<_> = (0..5).map(|_| l2_normalize(&random_vector(&mut rng, 6)).unwrap()).collect();
        let txts: Vec<_> = (0..5).map(|_| l2_normalize(&random_vector(&mut rng, 6)).unwrap()).collect();
        let s = similarity_matrix(&imgs, &txts, (0..5).collect(), vec![]).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((s.get(i, j) - imgs[i].dot(&txts[j]).unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let imgs = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let txts = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let weights = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let f = |a: &Array2<f64>, b: &Array2<f64>| {
            let (s, _) = cosine_matrix(a.view(), b.view()).unwrap();
            (&s * &weights).sum()
        };
        let (s, cache) = cosine_matrix(imgs.view(), txts.view()).unwrap();
        let (gi, gt) = cosine_matrix_backward(weights.view(), s.view(), &cache);
        let h = 1e-6;
        for idx in 0..12 {
            let (r, c) = (idx / 4, idx % 4);
            let mut p = imgs.clone();
            p[[r, c]] += h;
            let mut m = imgs.clone();
            m[[r, c]] -= h;
            let fd = (f(&p, &txts) - f(&m, &txts)) / (2.0 * h);
            assert!((fd - gi[[r, c]]).abs() < 1e-7);
            let mut p = txts.clone();
            p[[r, c]] += h;
            let mut m = txts.clone();
            m[[r, c]] -= h;
            let fd = (f(&imgs, &p) - f(&imgs, &m)) / (2.0 * h);
            assert!((fd - gt[[r, c]]).abs() < 1e-7);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0f64..10.0, dim)
                .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        }

        proptest! {
            #[test]
            fn scale_invariant_and_symmetric(
                u in nonzero_vec(6),
                w in nonzero_vec(6),
                alpha in 1e-3f64..1e3,
            ) {
                let u = Vector::new(u).unwrap();
                let w = Vector::new(w).unwrap();
                let scaled = Vector::new(u.as_slice().iter().map(|x| x * alpha).collect()).unwrap();
                let base = cosine_similarity(&u, &w).unwrap();
                prop_assert!((cosine_similarity(&scaled, &w).unwrap() - base).abs() < 1e-9);
                prop_assert_eq!(cosine_similarity(&w, &u).unwrap(), base);
                prop_assert!((-1.0..=1.0).contains(&base));
            }

            #[test]
            fn normalized_has_unit_norm(u in nonzero_vec(9)) {
                let n = l2_normalize(&Vector::new(u).unwrap()).unwrap();
                prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
