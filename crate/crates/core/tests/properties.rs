#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmood::detect::{self, Decision};
use mmood::harness::{self, OptimizerConfig, StepSchedule};
use mmood::losses;
use mmood::model::{self, EncoderKind, ModelSpec, Objective, WoodModel};
use mmood::scenarios::{self, DatasetManifest, OodBudget, PairedDataset, PairedSample, Payload, Scenario};
use mmood::similarity::{self, SimilarityMatrix, Vector};

fn batch_strategy(max_n: usize) -> impl Strategy<Value = (Array2<f64>, Vec<bool>)> {
    (1..=max_n).prop_flat_map(|n| {
        (prop::collection::vec(-1.0f64..=1.0, n * n), prop::collection::vec(any::<bool>(), n))
            .prop_map(move |(v, f)| (Array2::from_shape_vec((n, n), v).unwrap(), f))
    })
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn spec(d: usize) -> ModelSpec {
    ModelSpec {
        image_input_dim: 5,
        text_input_dim: 4,
        embedding_dim: d,
        encoder: EncoderKind::TwoLayer,
        encoder_hidden: 6,
        trainable_encoders: true,
        head_hidden: vec![8, 4],
    }
}

fn feature_sample(id: usize, category: usize, values: Vec<f64>) -> PairedSample {
    PairedSample::aligned(
        format!("p{id}"),
        Payload::Features(values.clone()),
        Payload::Text(format!("caption {id} of category {category}")),
        format!("c{category}"),
    )
}

fn dataset(sizes: &[usize]) -> PairedDataset {
    let mut samples = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            let id = samples.len();
            samples.push(feature_sample(id, c, vec![id as f64, c as f64, 1.0]));
        }
    }
    PairedDataset::new(samples, DatasetManifest { source: "prop".into(), seed: None, params: BTreeMap::new() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_entries_in_cosine_range(
        imgs in prop::collection::vec(nonzero_vec(4), 1..6),
        seed in any::<u64>(),
    ) {
        let n = imgs.len();
        let texts: Vec<Vector> = imgs.iter().enumerate()
            .map(|(i, v)| Vector::new(v.iter().map(|x| x * (1.0 + (seed % 7) as f64) - i as f64 * 0.3).collect()).unwrap())
            .collect();
        let imgs: Vec<Vector> = imgs.into_iter().map(|v| Vector::new(v).unwrap()).collect();
        let s = match similarity::similarity_matrix(&imgs, &texts, (0..n).collect(), vec![]) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        prop_assert!(s.entries().iter().all(|v| (-1.0..=1.0).contains(v)));
        let normalized: Vec<Vector> = imgs.iter().map(|v| similarity::l2_normalize(v).unwrap()).collect();
        let tn: Vec<Vector> = texts.iter().map(|v| similarity::l2_normalize(v).unwrap()).collect();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((s.get(i, j) - normalized[i].dot(&tn[j]).unwrap().clamp(-1.0, 1.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pair_score_invariant_to_rescaling(u in nonzero_vec(6), v in nonzero_vec(6), a in 1e-2f64..1e2, b in 1e-2f64..1e2) {
        let (u, v) = (Vector::new(u).unwrap(), Vector::new(v).unwrap());
        let su = Vector::new(u.as_slice().iter().map(|x| x * a).collect()).unwrap();
        let sv = Vector::new(v.as_slice().iter().map(|x| x * b).collect()).unwrap();
        let base = model::pair_score_cl(&u, &v).unwrap();
        prop_assert!((model::pair_score_cl(&su, &sv).unwrap() - base).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn hinge_zero_iff_margins_hold((s, flags) in batch_strategy(7), m in 0.0f64..0.5) {
        let n = s.nrows();
        let sm = SimilarityMatrix::with_flags(s.clone(), &flags).unwrap();
        let id_ok = (0..n).filter(|&r| !flags[r]).all(|r| (0..n).filter(|&c| c != r).all(|c| s[[r, r]] >= s[[r, c]] + m));
        let ood_ok = (0..n).filter(|&r| flags[r]).all(|r| (0..n).all(|c| s[[r, c]] <= m));
        let id = losses::hinge_id_loss(&sm, m).unwrap();
        let ood = losses::hinge_ood_loss(&sm, m).unwrap();
        prop_assert!(id >= 0.0 && ood >= 0.0);
        // `>=` on the sum form and on the margin form can disagree by one
        // rounding step exactly at the boundary.
        let id_boundary = (0..n).any(|r| !flags[r] && (0..n).any(|c| c != r && ((m - s[[r, r]] + s[[r, c]]).abs() < 1e-12)));
        if !id_boundary {
            prop_assert_eq!(id == 0.0, id_ok);
        }
        prop_assert_eq!(ood == 0.0, ood_ok);
    }

    #[test]
    fn hinge_monotone_in_margin((s, flags) in batch_strategy(7), a in 0.0f64..0.5, b in 0.0f64..0.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let sm = SimilarityMatrix::with_flags(s, &flags).unwrap();
        prop_assert!(losses::hinge_id_loss(&sm, lo).unwrap() <= losses::hinge_id_loss(&sm, hi).unwrap());
        prop_assert!(losses::hinge_ood_loss(&sm, lo).unwrap() >= losses::hinge_ood_loss(&sm, hi).unwrap());
    }

    #[test]
    fn zero_margin_is_unmargined_hinge((s, flags) in batch_strategy(6)) {
        let n = s.nrows();
        let sm = SimilarityMatrix::with_flags(s.clone(), &flags).unwrap();
        let mut id = 0.0;
        let mut ood = 0.0;
        for r in 0..n {
            for c in 0..n {
                if flags[r] {
                    ood += s[[r, c]].max(0.0);
                } else if c != r {
                    id += (s[[r, c]] - s[[r, r]]).max(0.0);
                }
            }
        }
        prop_assert!((losses::hinge_id_loss(&sm, 0.0).unwrap() - id / n as f64).abs() < 1e-12);
        prop_assert!((losses::hinge_ood_loss(&sm, 0.0).unwrap() - ood / n as f64).abs() < 1e-12);
    }

    #[test]
    fn classifier_loss_decomposes(
        n in 1usize..8,
        d in 1usize..5,
        seed in any::<u64>(),
        w in 0.0f64..2.0,
    ) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pred = Array1::from_shape_fn(n, |_| r.random_range(0.0..1.0));
        let targets = Array1::from_shape_fn(n, |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
        let gi = Array2::from_shape_fn((n, d), |_| r.random_range(0.0..1.0));
        let gt = Array2::from_shape_fn((n, d), |_| r.random_range(0.0..1.0));
        let g = losses::classifier_loss_grad(pred.view(), targets.view(), gi.view(), gt.view(), w).unwrap();
        let bce: f64 = pred.iter().zip(&targets).map(|(&p, &y)| losses::bce(y, p)).sum::<f64>() / n as f64;
        let l1_img = gi.sum() / n as f64;
        let l1_txt = gt.sum() / n as f64;
        prop_assert!((g.bce - bce).abs() < 1e-12);
        prop_assert!((g.gate_l1 - w * (l1_img + l1_txt)).abs() < 1e-12);
        prop_assert!((g.value - (bce + w * l1_img + w * l1_txt)).abs() < 1e-12);
    }

    #[test]
    fn model_loss_breakdown_invariants(seed in any::<u64>(), n in 1usize..10, lambda in 0.0f64..1.0, m in 0.0f64..0.4) {
        let objective = Objective { margin: m, lambda, ..Objective::default() };
        let model = WoodModel::new(spec(6), objective, seed).unwrap();
        let inputs = harness::probe_batch(&model.spec, n, seed ^ 0x5a5a);
        let out = model.forward(&inputs).unwrap();
        let b = model.loss(&inputs).unwrap();
        prop_assert!((b.l_cl - (b.l_id + b.l_ood) / n as f64).abs() <= 1e-9);
        prop_assert!((b.total - (b.l_cl + lambda * b.l_bc)).abs() <= 1e-9);
        for v in [b.l_id, b.l_ood, b.l_cl, b.l_bce, b.l_gate_l1, b.l_bc, b.total] {
            prop_assert!(v >= 0.0);
        }
        prop_assert!(out.gate_img.iter().chain(out.gate_txt.iter()).all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(out.p_bc.iter().all(|&p| p > 0.0 && p < 1.0));
        prop_assert!(b.l_gate_l1 > 0.0);
    }

    #[test]
    fn gates_and_fusion_shapes(seed in any::<u64>(), e in nonzero_vec(6), t in nonzero_vec(6)) {
        let model = WoodModel::new(spec(6), Objective::default(), seed).unwrap();
        let (gi, ai) = model::gate_features(&Vector::new(e).unwrap(), &model.gate_img).unwrap();
        let (gt, at) = model::gate_features(&Vector::new(t).unwrap(), &model.gate_txt).unwrap();
        prop_assert!(ai.as_slice().iter().chain(at.as_slice()).all(|&a| a > 0.0 && a < 1.0));
        let fused = model::fuse(&gi, &gt).unwrap();
        prop_assert_eq!(fused.dim(), 12);
        prop_assert_eq!(&fused.as_slice()[..6], gi.as_slice());
    }

    #[test]
    fn unified_score_monotone_and_composes(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 1e-3f64..=1.0, delta in 0.0f64..=1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(lo < hi);
        prop_assert!(detect::unified_score(hi, c).unwrap() < detect::unified_score(lo, c).unwrap());
        prop_assert!(detect::unified_score(c, hi).unwrap() < detect::unified_score(c, lo).unwrap());
        let p = detect::unified_score(a, b).unwrap();
        prop_assert!((p - (1.0 - a * b)).abs() <= 1e-12);
        if detect::decide(p, delta) == Decision::Id {
            prop_assert!(a >= delta && b >= delta);
        }
    }

    #[test]
    fn auroc_invariant_under_increasing_transform(
        levels in prop::collection::vec(0u32..50, 2..120),
        flags in prop::collection::vec(any::<bool>(), 120),
    ) {
        let n = levels.len();
        let mut truths = flags[..n].to_vec();
        truths[0] = true;
        truths[n - 1] = false;
        let scores: Vec<f64> = levels.iter().map(|&l| l as f64 / 50.0).collect();
        let warped: Vec<f64> = scores.iter().map(|x| x.powi(3) + 2.0 * x - 7.0).collect();
        let base = detect::auroc(&scores, &truths).unwrap();
        prop_assert_eq!(base, detect::auroc(&warped, &truths).unwrap());
        prop_assert!((0.0..=1.0).contains(&base));
        let flipped: Vec<f64> = scores.iter().map(|x| -x).collect();
        prop_assert!((detect::auroc(&flipped, &truths).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn calibration_then_decide_flags_at_most_the_tail(
        scores in prop::collection::vec(0.0f64..1.0, 20..300),
        target in 0.5f64..0.99,
    ) {
        let cal = detect::calibrate_threshold(&scores, target).unwrap();
        let flagged = scores.iter().filter(|&&s| detect::decide_id_score(s, cal.delta) == Decision::Ood).count();
        let n = scores.len() as f64;
        prop_assert!(flagged as f64 <= (1.0 - target) * n + 1e-9);
        let tied = scores.iter().filter(|&&s| s == cal.delta).count() > 1;
        prop_assert!(tied || flagged as f64 > (1.0 - target) * (n - 1.0) - 1.0);
    }

    #[test]
    fn confusion_counts_and_f1(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let decisions: Vec<Decision> = pairs.iter().map(|&(d, _)| if d { Decision::Ood } else { Decision::Id }).collect();
        let truths: Vec<bool> = pairs.iter().map(|&(_, t)| t).collect();
        let m = detect::confusion_metrics(&decisions, &truths).unwrap();
        prop_assert_eq!(m.counts.total(), pairs.len());
        let (p, r) = (m.precision, m.recall);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        prop_assert!((m.f1 - f1).abs() < 1e-9);
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn scenario1_crosses_categories(sizes in prop::collection::vec(1usize..30, 2..6), frac in 0.05f64..1.0, seed in any::<u64>()) {
        let ds = dataset(&sizes);
        let count = ((ds.len() as f64 * frac) as usize).max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match scenarios::make_scenario1(&ds, count, &mut rng) {
            Ok(out) => {
                prop_assert_eq!(out.len(), count);
                for p in &out {
                    prop_assert!(p.image_origin != p.text_origin);
                    prop_assert!(p.category != p.text_category);
                    prop_assert!(p.ood_flag && p.scenario == Scenario::S1);
                }
                let again = scenarios::make_scenario1(&ds, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(out, again);
            }
            // Only legitimate when the balanced draw leaves one category with
            // more than half of the pairs.
            Err(_) => {
                let mut picked = vec![0usize; sizes.len()];
                let mut left = count;
                while left > 0 {
                    for (p, &cap) in picked.iter_mut().zip(&sizes) {
                        if left > 0 && *p < cap {
                            *p += 1;
                            left -= 1;
                        }
                    }
                }
                prop_assert!(2 * picked.iter().max().unwrap() > count);
            }
        }
    }

    #[test]
    fn scenario3_keeps_text_and_scenario2_relabels(n in 5usize..40, seed in any::<u64>()) {
        let ds = dataset(&[n, n]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s3 = scenarios::make_scenario3(&ds, n, 0.3, &mut rng).unwrap();
        for p in &s3 {
            let src = ds.samples.iter().find(|s| format!("s3:{}", s.origin_id) == p.origin_id).unwrap();
            prop_assert_eq!(&p.text, &src.text);
            prop_assert_ne!(&p.image, &src.image);
            prop_assert!(p.ood_flag && p.scenario == Scenario::S3);
        }
        let s2 = scenarios::make_scenario2(&ds, n, &mut rng).unwrap();
        prop_assert!(s2.iter().all(|p| p.ood_flag && p.scenario == Scenario::S2 && p.is_consistent()));
    }

    #[test]
    fn batches_fill_n_and_tag_ood(
        id in 40usize..300,
        batch in 8usize..64,
        frac in 0.0f64..0.1,
        total_budget in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let ds = dataset(&[id / 2, id - id / 2]);
        let ood = dataset(&[10, 10]);
        let mut pools = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pools.insert(Scenario::S1, scenarios::make_scenario1(&ood, 10, &mut rng).unwrap());
        pools.insert(Scenario::S3, scenarios::make_scenario3(&ood, 10, 0.3, &mut rng).unwrap());
        let budget = if total_budget { OodBudget::Total } else { OodBudget::PerScenario };
        let Ok(batches) = scenarios::assemble_training_batches(&ds.samples, &pools, batch, frac, budget, &mut rng) else {
            return Ok(());
        };
        for b in &batches {
            prop_assert_eq!(b.id_indices.len() + b.ood_indices.len(), batch);
            prop_assert_eq!(b.len(), batch);
            for &k in &b.ood_indices {
                prop_assert!(b.samples[k].ood_flag && b.samples[k].scenario != Scenario::Id);
            }
            for &i in &b.id_indices {
                prop_assert!(!b.samples[i].ood_flag && b.samples[i].scenario == Scenario::Id);
            }
        }
        if frac > 0.0 && !batches.is_empty() {
            let seen: std::collections::BTreeSet<Scenario> = batches.iter()
                .flat_map(|b| b.ood_indices.iter().map(|&k| b.samples[k].scenario))
                .collect();
            prop_assert_eq!(seen.len(), 2);
        }
    }

    #[test]
    fn test_split_is_balanced(a in 1usize..30, b in 1usize..30, c in 1usize..30, d in 1usize..30) {
        let make = |n: usize, off: usize| -> Vec<PairedSample> {
            (0..n).map(|i| feature_sample(off + i, i % 2, vec![i as f64])).collect()
        };
        let split = scenarios::make_test_split(&make(a, 0), &make(b, 1000), &make(c, 2000), &make(d, 3000));
        // Distinct pools here share no ids, so only a size-driven truncation applies.
        let split = split.unwrap();
        let per = a.min(b).min(c).min(d);
        prop_assert_eq!(split.len(), 4 * per);
    }

    #[test]
    fn schedule_never_increases(lr in 1e-6f64..1e-1, epochs in 1usize..30, decay in 0.1f64..1.0) {
        let s = StepSchedule::from_config(&OptimizerConfig { learning_rate: lr, decay, ..Default::default() }, epochs);
        let lrs: Vec<f64> = (0..epochs + 5).map(|e| s.lr(e)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[0], lr);
    }
}
