use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlora::adapters::{AdapterKind, InitVariant, LinearAdapter, MaskSchedule};
use tlora::checkpoint::Checkpoint;
use tlora::diffusion::TimestepSampler;
use tlora::linalg::{self, Matrix};

fn schedule() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=64, 1usize..=1000).prop_flat_map(|(r, horizon)| (Just(r), 1..=r, Just(horizon)))
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(n, m)| {
        proptest::collection::vec(-3.0f64..3.0, n * m).prop_map(move |d| Matrix::from_vec(n, m, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_is_bounded_and_non_increasing((r, r_min, horizon) in schedule()) {
        let s = MaskSchedule::new(r, r_min, horizon).unwrap();
        let mut prev = r;
        for t in 0..=horizon {
            let k = s.rank_at(t).unwrap();
            prop_assert!(k >= r_min && k <= r);
            prop_assert!(k <= prev);
            prev = k;
        }
        prop_assert_eq!(s.rank_at(0).unwrap(), r);
        prop_assert_eq!(s.rank_at(horizon).unwrap(), r_min);
        prop_assert!(s.rank_at(horizon + 1).is_err());
    }

    #[test]
    fn mask_is_a_prefix((r, r_min, horizon) in schedule(), frac in 0.0f64..=1.0) {
        let s = MaskSchedule::new(r, r_min, horizon).unwrap();
        let t = (frac * horizon as f64) as usize;
        let k = s.rank_at(t).unwrap();
        let m = s.mask(t).unwrap();
        for i in 0..r {
            for j in 0..r {
                let expected = if i == j && i < k { 1.0 } else { 0.0 };
                prop_assert_eq!(m.get(i, j), expected);
            }
        }
    }

    #[test]
    fn svd_reconstructs_and_sorts(w in matrix(12, 12)) {
        let f = linalg::svd(&w).unwrap();
        let err = f.reconstruct().sub(&w).frobenius_norm();
        prop_assert!(err <= 1e-10 * w.frobenius_norm().max(1.0), "error {}", err);
        prop_assert!(f.s.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(f.s.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn effective_rank_within_length(mut s in proptest::collection::vec(0.0f64..10.0, 1..40), fraction in 0.01f64..=1.0) {
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(s.iter().sum::<f64>() > 0.0);
        let k = linalg::effective_rank(&s, fraction).unwrap();
        prop_assert!(k >= 1 && k <= s.len());
        let head: f64 = s[..k].iter().sum();
        prop_assert!(head >= fraction * s.iter().sum::<f64>() * (1.0 - 1e-12));
    }

    #[test]
    fn effective_rank_grows_with_fraction(mut s in proptest::collection::vec(0.0f64..10.0, 1..40), f1 in 0.01f64..=1.0, f2 in 0.01f64..=1.0) {
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(s.iter().sum::<f64>() > 0.0);
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(linalg::effective_rank(&s, lo).unwrap() <= linalg::effective_rank(&s, hi).unwrap());
        let positive = s.iter().filter(|&&v| v > 0.0).count();
        prop_assert_eq!(linalg::effective_rank(&s, 1.0).unwrap(), positive);
    }

    #[test]
    fn effective_rank_ignores_input_order(s in proptest::collection::vec(0.01f64..10.0, 1..40), seed in any::<u64>()) {
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut shuffled = s;
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        shuffled.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert_eq!(
            linalg::effective_rank(&sorted, 0.95).unwrap(),
            linalg::effective_rank(&shuffled, 0.95).unwrap()
        );
    }

    #[test]
    fn checkpoint_bytes_round_trip(tensors in proptest::collection::btree_map("[a-z.]{1,12}", matrix(5, 5), 0..5), note in ".{0,20}") {
        let ckpt = Checkpoint { tensors: tensors.into_iter().collect::<BTreeMap<_, _>>(), metadata: serde_json::json!({ "note": note }) };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn interval_sampler_stays_in_range(lo in 0usize..1000, width in 0usize..1000, seed in any::<u64>()) {
        let hi = (lo + width).min(1000);
        let sampler = TimestepSampler::Interval { lo, hi };
        prop_assume!(sampler.validate(1000).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let t = sampler.sample(&mut rng, 1000);
            prop_assert!(t >= lo.max(1) && t <= hi);
        }
    }

    #[test]
    fn adapters_start_at_the_base_weight(n in 2usize..20, m in 2usize..20, rf in 0.0f64..1.0, seed in any::<u64>(), v in 0usize..6, t in 0usize..=1000) {
        let r = 1 + (rf * (n.min(m) - 1) as f64) as usize;
        let w = linalg::random_gaussian(n, m, 1.0, seed).unwrap();
        for kind in AdapterKind::ALL {
            let schedule = kind.is_masked().then(|| MaskSchedule::new(r, (r / 2).max(1), 1000).unwrap());
            let ad = LinearAdapter::build(w.clone(), kind, r, schedule, Some(InitVariant::all()[v]), seed).unwrap();
            let diff = ad.effective_weight(t).unwrap().sub(&w).frobenius_norm();
            prop_assert!(diff <= 1e-9 * w.frobenius_norm(), "{} {}", kind.as_str(), diff);
        }
    }
}
