//! Property tests over randomly drawn inputs.

mod common;

use common::{random_softmax, uniform_vec};
use medcl_core::grid::LabelMap;
use medcl_core::losses::{category_loss, cosine, scribble_loss};
use medcl_core::phantom::{generate, PhantomSpec, UNLABELED};
use medcl_core::rng::rng_from;
use medcl_core::segnet::{init, Checkpoint, ModelSpec};
use medcl_core::sinkhorn::{sinkhorn, PrototypeMatrix, ScoreMatrix};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_rows_are_distributions(d in 1usize..=8, n in 1usize..=8, eps in 0.05f64..1.0, seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let scores = ScoreMatrix::from_vec(d, n, uniform_vec(&mut rng, d * n, -1.0, 1.0)).unwrap();
        let q = sinkhorn(&scores, eps, 50).unwrap();
        prop_assert!(q.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        for s in q.row_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-9, "row sum {}", s);
        }
    }

    #[test]
    fn normalized_prototypes_have_unit_columns(d in 2usize..=8, k in 2usize..=12, seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let data: Vec<f64> = (0..d * k).map(|_| rng.random_range(0.1..5.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut a = PrototypeMatrix::from_vec(d, k, data).unwrap();
        a.normalize_columns();
        for c in 0..k {
            prop_assert!((a.column_norm(c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn phantoms_are_labelled_consistently(m in 2usize..=5, seed in any::<u64>()) {
        let spec = PhantomSpec { height: 32, width: 32, num_classes: m, ..PhantomSpec::default() };
        let s = generate(&spec, seed).unwrap();
        prop_assert_eq!(&s, &generate(&spec, seed).unwrap());
        prop_assert!(s.labels.data().iter().all(|&l| (l as usize) <= m));
        prop_assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (scribble, label) in s.scribbles.data().iter().zip(s.labels.data()) {
            prop_assert!(*scribble == UNLABELED || scribble == label);
        }
        let mut present: Vec<u8> = s.labels.data().iter().copied().filter(|&l| l > 0).collect();
        present.sort_unstable();
        present.dedup();
        prop_assert_eq!(s.present_classes, present);
    }

    #[test]
    fn supervision_losses_are_bounded_below(m in 1usize..=4, seed in any::<u64>()) {
        let probs = random_softmax(m, 5, 6, seed);
        let mut rng = rng_from(seed ^ 1);
        let scribbles = LabelMap::from_fn(5, 6, |_, _| if rng.random_bool(0.4) { rng.random_range(0..=m as u8) } else { UNLABELED });
        let s = scribble_loss(&probs, &scribbles);
        prop_assert!(s.value >= -1.0 - 1e-12);
        let present: Vec<u8> = (1..=m as u8).filter(|_| rng.random_bool(0.5)).collect();
        // Mass 1 + ulp when every class is allowed.
        prop_assert!(category_loss(&probs, &present) >= -1e-12);
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(len in 1usize..=16, seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let a = uniform_vec(&mut rng, len, -2.0, 2.0);
        let b = uniform_vec(&mut rng, len, -2.0, 2.0);
        let c = cosine(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        prop_assert_eq!(c, cosine(&b, &a));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(m in 2usize..=4, seed in any::<u64>()) {
        let spec = ModelSpec { input_size: 16, base_width: 2, depth: 2, num_classes: m, seed };
        let params = init(&spec).unwrap();
        let bytes = Checkpoint::from_params(&params).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap().params().unwrap();
        prop_assert_eq!(back, params);
    }
}
