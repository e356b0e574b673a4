use proptest::prelude::*;

use transnormer::attention::{lightning_forward, reference_forward, AttentionInputs, BlockConfig, TileSchedule};
use transnormer::blocks::{srmsnorm, Activation, SgluParams};
use transnormer::inference::{Algorithm, RecurrentState};
use transnormer::numerics::io::Archive;
use transnormer::numerics::{SeededRng, Tensor};
use transnormer::parallel_sim::{split, unsplit, CollectiveLedger, ShardPlan, ShardedSglu, SplitAxis};
use transnormer::positional::{rotate, DecaySchedule};

fn qkv(seed: u64, n: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = SeededRng::new(seed);
    (rng.normal(&[n, d], 0.0, 1.0), rng.normal(&[n, d], 0.0, 1.0), rng.normal(&[n, d], 0.0, 1.0))
}

fn schedule() -> impl Strategy<Value = TileSchedule> {
    prop_oneof![Just(TileSchedule::Tiled), Just(TileSchedule::Carried)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lightning_equals_reference(
        seed in any::<u64>(), n in 1usize..48, d in 1usize..7,
        br in 1usize..20, bc in 1usize..20, lambda in 0.05f64..=1.0, sched in schedule(),
    ) {
        let (q, k, v) = qkv(seed, n, d);
        let inputs = AttentionInputs::new(&q, &k, &v, lambda).unwrap();
        let want = reference_forward(&inputs).unwrap();
        let cfg = BlockConfig::new(br, bc).with_schedule(sched);
        let got = lightning_forward(&inputs, &cfg).unwrap();
        prop_assert!(got.rel_error(&want).unwrap() < 1e-10);
    }

    #[test]
    fn outputs_are_causal(seed in any::<u64>(), n in 2usize..32, d in 1usize..5, at in 0usize..32, b in 1usize..9) {
        let at = at % n;
        let (q, k, v) = qkv(seed, n, d);
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for t in [&mut q2, &mut k2, &mut v2] {
            t.row_mut(at).iter_mut().for_each(|x| *x += 1.0);
        }
        let cfg = BlockConfig::square(b);
        let y1 = lightning_forward(&AttentionInputs::new(&q, &k, &v, 0.8).unwrap(), &cfg).unwrap();
        let y2 = lightning_forward(&AttentionInputs::new(&q2, &k2, &v2, 0.8).unwrap(), &cfg).unwrap();
        for s in 0..at {
            prop_assert_eq!(y1.row(s), y2.row(s));
        }
    }

    #[test]
    fn decay_schedule_shape(heads in 1usize..17, layers in 1usize..33) {
        let s = DecaySchedule::new(heads, layers, true).unwrap();
        for h in 1..=heads {
            prop_assert_eq!(s.decay_rate(h, layers).unwrap(), 1.0);
            for l in 1..layers {
                let (a, b) = (s.decay_rate(h, l).unwrap(), s.decay_rate(h, l + 1).unwrap());
                prop_assert!(a <= b && a > 0.0);
                if h < heads {
                    prop_assert!(s.decay_rate(h + 1, l).unwrap() < a);
                }
            }
        }
    }

    #[test]
    fn rotation_keeps_norms_and_relative_scores(
        seed in any::<u64>(), half in 1usize..5, s in 0usize..50, t in 0usize..50, shift in 0usize..50,
    ) {
        let d = 2 * half;
        let mut rng = SeededRng::new(seed);
        let theta: Vec<f64> = (0..half).map(|_| rng.next_f64() * 3.0).collect();
        let q: Tensor = rng.normal(&[1, d], 0.0, 1.0);
        let k: Tensor = rng.normal(&[1, d], 0.0, 1.0);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let rq = rotate(&q, &theta, s).unwrap();
        prop_assert!((dot(&rq, &rq) - dot(&q, &q)).abs() < 1e-9);
        let a = dot(&rq, &rotate(&k, &theta, t).unwrap());
        let b = dot(&rotate(&q, &theta, s + shift).unwrap(), &rotate(&k, &theta, t + shift).unwrap());
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn robust_recurrence_matches_parallel_form(seed in any::<u64>(), n in 1usize..40, d in 1usize..6, lambda in 0.1f64..=1.0) {
        let (q, k, v) = qkv(seed, n, d);
        let want = reference_forward(&AttentionInputs::new(&q, &k, &v, lambda).unwrap()).unwrap();
        let mut state = RecurrentState::<f64>::new(d, lambda, Algorithm::Robust).unwrap();
        for t in 0..n {
            let o = state.step(q.row(t), k.row(t), v.row(t)).unwrap();
            for (a, b) in o.iter().zip(want.row(t)) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn srmsnorm_rows_have_norm_sqrt_d(seed in any::<u64>(), n in 1usize..8, d in 1usize..20) {
        let x: Tensor = SeededRng::new(seed).normal(&[n, d], 0.0, 3.0);
        let y = srmsnorm(&x, 1e-12);
        for r in 0..n {
            let norm = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - (d as f64).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn split_round_trip(seed in any::<u64>(), world in 1usize..5, rows in 1usize..5, cols in 1usize..5) {
        let t: Tensor = SeededRng::new(seed).normal(&[rows * world, cols * world], 0.0, 1.0);
        for axis in [SplitAxis::Columns, SplitAxis::Rows] {
            let parts = split(&t, axis, world).unwrap();
            prop_assert_eq!(unsplit(&parts, axis).unwrap(), t.clone());
        }
    }

    #[test]
    fn sharded_sglu_equals_unsharded(seed in any::<u64>(), world_pow in 0u32..3, n in 1usize..10) {
        let world = 1usize << world_pow;
        let mut rng = SeededRng::new(seed);
        let p = SgluParams::init(8, 16, Activation::None, &mut rng, 0.5, 0.5).unwrap();
        let x: Tensor = rng.normal(&[n, 8], 0.0, 1.0);
        let sharded = ShardedSglu::new(&p, ShardPlan::new(world).unwrap()).unwrap();
        let y = sharded.forward(&x, &mut CollectiveLedger::new()).unwrap();
        prop_assert!(y.rel_error(&p.forward(&x).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn archive_round_trip(seed in any::<u64>(), count in 0usize..5, r in 1usize..6, c in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let mut archive = Archive::new("{\"format\":\"test\"}");
        let tensors: Vec<Tensor> = (0..count).map(|_| rng.normal(&[r, c], 0.0, 1.0)).collect();
        for (i, t) in tensors.iter().enumerate() {
            archive.insert(format!("t{i}"), t);
        }
        let back = Archive::from_bytes(&archive.to_bytes()).unwrap();
        prop_assert_eq!(back.manifest(), archive.manifest());
        for (i, t) in tensors.iter().enumerate() {
            prop_assert_eq!(&back.tensor::<f64>(&format!("t{i}")).unwrap(), t);
        }
    }
}
