//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch onto rayon's global
//! pool; without it they run the same closures sequentially. Work is always
//! split into the same fixed chunks and results are gathered in index order,
//! so both builds produce bit-identical floating-point output.

use ndarray::{s, Array2, ArrayView2, Axis};

/// Rows per work item for blocked matrix products.
pub const ROW_CHUNK: usize = 16;

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps `f` over a slice, returning results in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// `a · b`, computed in row blocks of `a`.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let rows = a.nrows();
    if rows <= ROW_CHUNK {
        return a.dot(&b);
    }
    let n_chunks = rows.div_ceil(ROW_CHUNK);
    let blocks = map_indexed(n_chunks, |c| {
        let lo = c * ROW_CHUNK;
        let hi = (lo + ROW_CHUNK).min(rows);
        a.slice(s![lo..hi, ..]).dot(&b)
    });
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("row blocks share column count")
}

/// Whether this build dispatches onto a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
