mod oracles;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samic_core::backbone::FeaturePyramid;
use samic_core::conv4d::{Conv4d, Conv4dKind};
use samic_core::correlation::build_hypercorrelation;
use samic_core::episode::{subsample_count, subsample_training_set, ClassIndex, EpisodeSampler};
use samic_core::folds::make_folds;
use samic_core::metrics::{boundary_f, iou, j_and_f, Mask};
use samic_core::Tensor;

use oracles::{dense_reference, pivot_reference};

fn conv_case() -> impl Strategy<Value = ([usize; 5], usize, [usize; 4], [usize; 4], bool, u64)> {
    (
        (1usize..=2, 1usize..=4, 1usize..=4, 1usize..=4, 1usize..=4),
        1usize..=2,
        proptest::array::uniform4(prop_oneof![Just(1usize), Just(3usize)]),
        proptest::array::uniform4(1usize..=2),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|((c, a, b, d, e), o, k, s, dense, seed)| ([c, a, b, d, e], o, k, s, dense, seed))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv4d_matches_nested_loops((dims, o, k, s, dense, seed) in conv_case()) {
        let kind = if dense { Conv4dKind::Dense } else { Conv4dKind::CenterPivot };
        let conv = Conv4d::new(kind, dims[0], o, k, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, dims.iter().product());
        let p = uniform(&mut rng, conv.param_len());
        let (out, _) = conv.forward(&Tensor::from_vec(&dims, x.clone()).unwrap(), &p).unwrap();
        let expected = if dense {
            let (w, b) = p.split_at(p.len() - o);
            dense_reference(&x, dims, w, b, o, k, s)
        } else {
            pivot_reference(&x, dims, &p, o, k, s)
        };
        prop_assert_eq!(out.len(), expected.len());
        for (a, b) in out.data().iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn hypercorrelation_is_bounded_and_scale_invariant(seed in any::<u64>(), pos in 0usize..6, lambda in 0.01f64..100.0, which in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = Tensor::from_vec(&[4, 2, 3], uniform(&mut rng, 24)).unwrap();
        let tgt = Tensor::from_vec(&[4, 2, 3], uniform(&mut rng, 24)).unwrap();
        let base = build_hypercorrelation(&FeaturePyramid { layers: vec![ctx.clone()] }, &FeaturePyramid { layers: vec![tgt.clone()] }).unwrap();
        prop_assert!(base.levels[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (mut c2, mut t2) = (ctx.clone(), tgt.clone());
        let scaled = if which { &mut c2 } else { &mut t2 };
        for ch in 0..4 {
            scaled.data_mut()[ch * 6 + pos] *= lambda;
        }
        let moved = build_hypercorrelation(&FeaturePyramid { layers: vec![c2] }, &FeaturePyramid { layers: vec![t2] }).unwrap();
        prop_assert!(base.levels[0].max_abs_diff(&moved.levels[0]) < 1e-5);
    }
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
}

/// Places `m` at offset `(dx, dy)` in an empty `h × w` canvas.
fn embed(m: &Mask, h: usize, w: usize, dx: usize, dy: usize) -> Mask {
    let mut d = vec![false; h * w];
    for y in 0..m.height {
        for x in 0..m.width {
            d[(y + dy) * w + x + dx] = m.get(x, y);
        }
    }
    Mask::new(h, w, d).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_symmetric_and_translation_invariant(a in mask_strategy(8, 9), b in mask_strategy(8, 9), dx in 0usize..6, dy in 0usize..6) {
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        let (a0, b0) = (embed(&a, 14, 15, 0, 0), embed(&b, 14, 15, 0, 0));
        let (a1, b1) = (embed(&a, 14, 15, dx, dy), embed(&b, 14, 15, dx, dy));
        prop_assert_eq!(iou(&a0, &b0).unwrap(), iou(&a1, &b1).unwrap());
    }

    #[test]
    fn boundary_f_symmetric(a in mask_strategy(10, 10), b in mask_strategy(10, 10), tol in 0.0f64..4.0) {
        prop_assert_eq!(boundary_f(&a, &b, tol).unwrap(), boundary_f(&b, &a, tol).unwrap());
    }

    #[test]
    fn identical_sequences_score_one(frames in proptest::collection::vec(mask_strategy(6, 7), 1..5)) {
        let s = j_and_f(&frames, &frames, None).unwrap();
        prop_assert_eq!(s.j_and_f, 1.0);
    }

    #[test]
    fn folds_partition_the_classes(n in 1usize..40, k in 1usize..12) {
        prop_assume!(k <= n);
        let classes: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let folds = make_folds(&classes, k).unwrap();
        prop_assert_eq!(&folds, &make_folds(&classes, k).unwrap());
        let mut seen: Vec<String> = folds.iter().flat_map(|f| f.test_classes.clone()).collect();
        prop_assert_eq!(seen.len(), n);
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), n);
        for f in &folds {
            prop_assert!(f.train_classes().iter().all(|c| !f.test_classes.contains(c)));
        }
    }

    #[test]
    fn subsampling_is_per_class_and_deterministic(sizes in proptest::collection::vec(0usize..30, 1..8), frac in 0.01f64..=1.0, seed in any::<u64>()) {
        let index: ClassIndex = sizes.iter().enumerate().map(|(c, n)| (format!("k{c}"), (0..*n).map(|i| format!("k{c}-{i}")).collect())).collect();
        let a = subsample_training_set(&index, frac, seed).unwrap();
        prop_assert_eq!(&a, &subsample_training_set(&index, frac, seed).unwrap());
        for (class, ids) in &index {
            match a.selected.get(class) {
                Some(sel) => {
                    prop_assert_eq!(sel.len(), subsample_count(ids.len(), frac));
                    prop_assert!(sel.iter().all(|s| ids.contains(s)));
                }
                None => prop_assert!(ids.is_empty() && a.skipped.contains(class)),
            }
        }
    }
}

#[test]
fn boundary_f_hand_case() {
    // A 10×10 square and the same square shifted right by one pixel: every
    // boundary pixel has a partner within 2 px.
    let square = |x0: usize| {
        let mut d = vec![false; 400];
        for y in 5..15 {
            for x in x0..x0 + 10 {
                d[y * 20 + x] = true;
            }
        }
        Mask::new(20, 20, d).unwrap()
    };
    assert!((boundary_f(&square(5), &square(6), 2.0).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn iou_hand_case() {
    // Two 2×4 rectangles overlapping in a 2×2 block: 4 / (8 + 8 − 4) = 1/3.
    let rect = |x0: usize| {
        let mut d = vec![false; 36];
        for y in 0..2 {
            for x in x0..x0 + 4 {
                d[y * 6 + x] = true;
            }
        }
        Mask::new(6, 6, d).unwrap()
    };
    assert!((iou(&rect(0), &rect(2)).unwrap() - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn episodes_are_uniform_over_classes_and_items() {
    let index: ClassIndex = [("a", 2), ("b", 3), ("c", 5)]
        .iter()
        .map(|(c, n)| (c.to_string(), (0..*n).map(|i| format!("{c}{i}")).collect()))
        .collect();
    let sampler = EpisodeSampler::new(&index).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let mut class_counts = std::collections::BTreeMap::<String, usize>::new();
    let mut target_counts = std::collections::BTreeMap::<String, usize>::new();
    for _ in 0..n {
        let e = sampler.sample(&mut rng);
        assert_ne!(e.context, e.target);
        assert!(e.context.starts_with(&e.class) && e.target.starts_with(&e.class));
        *class_counts.entry(e.class).or_default() += 1;
        *target_counts.entry(e.target).or_default() += 1;
    }
    for (class, count) in &class_counts {
        let f = *count as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.05 / 3.0, "class {class}: {f}");
        let size = index[class].len() as f64;
        for id in &index[class] {
            let g = target_counts[id] as f64 / *count as f64;
            assert!((g - 1.0 / size).abs() <= 0.05 / size * 2.0, "{id}: {g}");
        }
    }
}
