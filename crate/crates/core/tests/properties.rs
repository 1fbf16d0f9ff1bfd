mod common;

use bootifol_core::config::EnvId;
use bootifol_core::env;
use bootifol_core::interact::{learned_reward, ReplayBuffer, Transition};
use bootifol_core::losses::{cmc_loss, seq_contrast_loss, similarity_h, triplet_loss};
use bootifol_core::nets::EncoderBundle;
use bootifol_core::rng_from_seed;
use bootifol_core::tensor::{Graph, Tensor};
use bootifol_core::vision::{lab_to_srgb, srgb_to_lab, Frame};
use common::{micro_net, uniform};
use proptest::prelude::*;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn nonzero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec_of(len).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_scale_invariant_and_bounded(a in nonzero(5), b in nonzero(5), c in 0.1f64..10.0, tau in 0.05f64..2.0) {
        let h = similarity_h(&a, &b, tau).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        prop_assert!((similarity_h(&scaled, &b, tau).unwrap() - h).abs() <= 1e-9 * h);
        prop_assert!(h >= (-1.0 / tau).exp() * (1.0 - 1e-12) && h <= (1.0 / tau).exp() * (1.0 + 1e-12));
    }

    #[test]
    fn seq_contrast_is_nonnegative_and_bounded(z in nonzero(4), zp in nonzero(4), zn in prop::collection::vec(nonzero(4), 1..6), tau in 0.05f64..1.0) {
        let refs: Vec<&[f64]> = zn.iter().map(|v| v.as_slice()).collect();
        let l = seq_contrast_loss(&z, &zp, &refs, tau).unwrap();
        prop_assert!(l > 0.0);
        prop_assert!(l <= ((1 + zn.len()) as f64).ln() + 2.0 / tau + 1e-9);
    }

    #[test]
    fn cmc_is_nonnegative_bounded_and_order_free(rows in prop::collection::vec((nonzero(3), nonzero(3)), 2..6), tau in 0.05f64..1.0) {
        let l: Vec<&[f64]> = rows.iter().map(|r| r.0.as_slice()).collect();
        let ab: Vec<&[f64]> = rows.iter().map(|r| r.1.as_slice()).collect();
        let v = cmc_loss(&l, &ab, tau).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!(v <= (rows.len() as f64).ln() + 2.0 / tau + 1e-9);
        let (mut lr, mut abr) = (l.clone(), ab.clone());
        lr.reverse();
        abr.reverse();
        prop_assert!((cmc_loss(&lr, &abr, tau).unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn triplet_vanishes_only_at_a_satisfied_margin(s in vec_of(3), sn in vec_of(3), rho in 0.1f64..3.0) {
        let d2: f64 = s.iter().zip(&sn).map(|(a, b)| (a - b) * (a - b)).sum();
        let l = triplet_loss(&s, &s, &sn, rho).unwrap();
        prop_assert_eq!(l == 0.0, d2 >= rho);
        let shifted: Vec<f64> = s.iter().map(|x| x + 0.1).collect();
        prop_assert!(triplet_loss(&s, &shifted, &sn, rho).unwrap() > 0.0);
    }

    #[test]
    fn lab_round_trip_and_grays(r: u8, g: u8, b: u8) {
        let back = lab_to_srgb(srgb_to_lab([r, g, b]));
        for (x, y) in [r, g, b].iter().zip(back) {
            prop_assert!(x.abs_diff(y) <= 1);
        }
        let gray = srgb_to_lab([r; 3]);
        prop_assert_eq!((gray[1], gray[2]), (0.0, 0.0));
        prop_assert_eq!(srgb_to_lab([r, g, b]), srgb_to_lab([r, g, b]));
    }

    #[test]
    fn positions_stay_in_the_unit_square(seed: u64, actions in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..60), push: bool) {
        let id = if push { EnvId::PointPush } else { EnvId::PointReach };
        let mut s = env::reset(id, seed);
        for (x, y) in actions {
            s = env::step(&s, [x, y]).0;
            for p in [Some(s.agent), s.object].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            }
        }
    }

    #[test]
    fn reset_is_seeded_and_separated(seed: u64) {
        let s = env::reset(EnvId::PointReach, seed);
        prop_assert_eq!(&s, &env::reset(EnvId::PointReach, seed));
        let d = ((s.agent[0] - s.goal[0]).powi(2) + (s.agent[1] - s.goal[1]).powi(2)).sqrt();
        prop_assert!(d >= env::MIN_SEPARATION);
    }

    #[test]
    fn replay_never_exceeds_capacity(cap in 1usize..8, pushes in 0usize..30) {
        let mut r = ReplayBuffer::new(cap);
        let f = Frame::filled(2, 2, [0; 3]);
        for i in 0..pushes {
            r.push(Transition::new(&[&f, &f], [0.0, 0.0], -(i as f32)).unwrap());
            prop_assert!(r.len() <= cap);
        }
        let oldest = pushes.saturating_sub(cap);
        let first = r.iter().next().map(|t| t.reward);
        if pushes > 0 {
            prop_assert_eq!(first, Some(-(oldest as f32)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batch_norm_eval_ignores_batch_composition(seed: u64, rows in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let x: Tensor<f64> = uniform(&mut rng, &[rows, 3, 2, 2], -2.0, 2.0);
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::<f64>::inference();
            let v = g.constant(t);
            let gm = g.constant(Tensor::new(&[3], vec![0.5, 1.5, -1.0]).unwrap());
            let bt = g.constant(Tensor::new(&[3], vec![0.1, 0.0, 0.3]).unwrap());
            let y = g.batch_norm_eval(v, gm, bt, &[0.2, -0.1, 0.0], &[1.0, 0.5, 2.0], 1e-5).unwrap();
            g.data(y).to_vec()
        };
        let all = eval(x.clone());
        for r in 0..rows {
            let one = Tensor::new(&[1, 3, 2, 2], x.data()[r * 12..(r + 1) * 12].to_vec()).unwrap();
            prop_assert_eq!(&eval(one)[..], &all[r * 12..(r + 1) * 12]);
        }
    }

    #[test]
    fn backward_is_bitwise_repeatable(seed: u64) {
        let mut rng = rng_from_seed(seed);
        let (a, b): (Tensor<f32>, Tensor<f32>) = (uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0), uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0));
        let run = || {
            let mut g = Graph::<f32>::new();
            let (x, w) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let y = g.conv2d(x, w, 2, 1).unwrap();
            let y = g.tanh(y);
            let l = g.mean(y);
            g.backward(l).unwrap();
            (g.item(l), g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn incremental_sequence_encoding_matches_full_prefix(seed: u64, len in 1usize..8) {
        let mut rng = rng_from_seed(seed);
        let bundle = EncoderBundle::<f32>::new(&micro_net(), &mut rng).unwrap();
        let states: Vec<Vec<f32>> = (0..len).map(|_| uniform::<f32>(&mut rng, &[4], -1.0, 1.0).into_data()).collect();
        let mut carry = bundle.empty_carry();
        for t in 0..len {
            let z = bundle.extend_sequence(&mut carry, &states[t]).unwrap();
            let (full, _) = bundle.encode_sequence(&states[..=t]).unwrap();
            for (a, b) in z.iter().zip(&full) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn learned_reward_is_nonpositive_and_zero_on_identical(seed: u64, len in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let bundle = EncoderBundle::<f32>::new(&micro_net(), &mut rng).unwrap();
        let (mut a, mut e, mut same) = (bundle.empty_carry(), bundle.empty_carry(), bundle.empty_carry());
        for _ in 0..len {
            let sa = uniform::<f32>(&mut rng, &[4], -1.0, 1.0).into_data();
            let se = uniform::<f32>(&mut rng, &[4], -1.0, 1.0).into_data();
            prop_assert!(learned_reward(&bundle, &mut a, &sa, &mut e, &se).unwrap() <= 0.0);
            let mut twin = same.clone();
            prop_assert_eq!(learned_reward(&bundle, &mut same, &sa, &mut twin, &sa).unwrap(), 0.0);
        }
    }
}
