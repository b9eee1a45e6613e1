//! Algebraic properties of the ranking and flat losses.

use gscl::autodiff::Tape;
use gscl::generate::generate_gnp;
use gscl::graph::partition_anchors;
use gscl::loss::{
    gscl_loss, gscl_loss_value, infonce_in, infonce_out, score_call_count_expected, ScoreCallCounter,
};
use gscl::{Graph64, HopPartition, LossConfig, LossVariant, Matrix64, PositiveGrouping};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    z: Matrix64,
    parts: Vec<HopPartition>,
}

fn case(n: usize, p: f64, k: usize, dim: usize, seed: u64) -> Case {
    let g: Graph64 = generate_gnp(n, p, 1, 0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let anchors: Vec<usize> = (0..n).collect();
    Case {
        z: Matrix64::from_vec(n, dim, data).unwrap(),
        parts: partition_anchors(&g, &anchors, k, Some(8), seed).unwrap(),
    }
}

fn cfg(variant: LossVariant, k: usize, gate: f64, grouping: PositiveGrouping) -> LossConfig {
    LossConfig {
        k,
        variant,
        alpha: gate,
        beta: gate,
        tau_base: 0.4,
        tau_spacing: 0.05,
        positive_grouping: grouping,
        ..LossConfig::default()
    }
}

fn variant() -> impl Strategy<Value = LossVariant> {
    prop_oneof![Just(LossVariant::Pairwise), Just(LossVariant::Listwise)]
}

fn grouping() -> impl Strategy<Value = PositiveGrouping> {
    prop_oneof![Just(PositiveGrouping::Inside), Just(PositiveGrouping::Outside)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hop_order_does_not_matter(
        n in 4usize..30, p in 0.05f64..0.4, k in 1usize..4, seed in any::<u64>(),
        v in variant(), gr in grouping(), gate in 0.2f64..1.0,
    ) {
        let Case { z, parts } = case(n, p, k, 5, seed);
        let c = cfg(v, k, gate, gr);
        let Ok(base) = gscl_loss_value(&z, &parts, &c) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled: Vec<HopPartition> = parts
            .iter()
            .map(|q| {
                let mut q = q.clone();
                for h in &mut q.hop_sets {
                    h.shuffle(&mut rng);
                }
                q.beyond_sample.shuffle(&mut rng);
                q
            })
            .collect();
        prop_assert_eq!(gscl_loss_value(&z, &shuffled, &c).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn positive_row_scaling_does_not_matter(
        n in 4usize..30, p in 0.05f64..0.4, k in 1usize..4, seed in any::<u64>(),
        v in variant(), gr in grouping(),
    ) {
        let Case { z, parts } = case(n, p, k, 5, seed);
        let c = cfg(v, k, 0.8, gr);
        let Ok(base) = gscl_loss_value(&z, &parts, &c) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scaled = z.clone();
        for r in 0..n {
            let s: f64 = rng.random_range(0.05..20.0);
            scaled.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        prop_assert!((gscl_loss_value(&scaled, &parts, &c).unwrap() - base).abs() < 1e-6);
    }

    #[test]
    fn loss_is_bounded_below_by_the_gate(
        n in 4usize..30, p in 0.05f64..0.4, k in 1usize..4, seed in any::<u64>(),
        v in variant(), gate in 0.05f64..1.0,
    ) {
        let Case { z, parts } = case(n, p, k, 5, seed);
        let c = cfg(v, k, gate, PositiveGrouping::Inside);
        if let Ok(l) = gscl_loss_value(&z, &parts, &c) {
            prop_assert!(l.is_finite());
            prop_assert!(l >= -gate.ln() - 1e-12);
        }
    }

    #[test]
    fn pulling_a_first_hop_member_closer_never_hurts(
        n in 4usize..25, p in 0.1f64..0.4, k in 1usize..4, seed in any::<u64>(),
        v in variant(), t in 0.01f64..2.0,
    ) {
        let Case { z, parts } = case(n, p, k, 5, seed);
        let part = parts.into_iter().find(|q| !q.hop_sets[0].is_empty() && !q.hop(k + 1).is_empty());
        let Some(part) = part else { return Ok(()) };
        // alpha = beta = 1 keeps the gate inactive for every term.
        let c = cfg(v, k, 1.0, PositiveGrouping::Inside);
        let parts = vec![part.clone()];
        let before = gscl_loss_value(&z, &parts, &c).unwrap();
        let a = z.row(part.anchor).to_vec();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u = part.hop_sets[0][0];
        let mut moved = z.clone();
        for (x, ai) in moved.row_mut(u).iter_mut().zip(&a) {
            *x += t * ai / norm;
        }
        let after = gscl_loss_value(&moved, &parts, &c).unwrap();
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
    }

    #[test]
    fn counter_matches_closed_form(
        n in 2usize..30, p in 0.0f64..0.4, k in 1usize..4, seed in any::<u64>(),
        v in prop_oneof![
            Just(LossVariant::Pairwise), Just(LossVariant::Listwise),
            Just(LossVariant::InfonceInFlat), Just(LossVariant::InfonceOutFlat),
        ],
        memo in any::<bool>(), gr in grouping(),
    ) {
        let Case { z, parts } = case(n, p, k, 3, seed);
        let c = LossConfig {
            count_score_calls: true,
            memoize_similarities: memo,
            ..cfg(v, k, 0.9, gr)
        };
        let counter = ScoreCallCounter::new();
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        if gscl_loss(&mut tape, zv, &parts, &c, Some(&counter)).is_ok() {
            prop_assert_eq!(counter.get(), score_call_count_expected(&parts, &c));
        }
    }

    #[test]
    fn inside_grouping_never_exceeds_outside(
        dim in 1usize..6, np in 1usize..6, nn in 0usize..6, tau in 0.1f64..1.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vec = || -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                if v.iter().any(|x| x.abs() > 1e-3) {
                    return v;
                }
            }
        };
        let q = vec();
        let pos: Vec<Vec<f64>> = (0..np).map(|_| vec()).collect();
        let neg: Vec<Vec<f64>> = (0..nn).map(|_| vec()).collect();
        let pr: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
        let nr: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
        let i = infonce_in(&q, &pr, &nr, tau).unwrap();
        let o = infonce_out(&q, &pr, &nr, tau).unwrap();
        prop_assert!(i <= o + 1e-12, "{i} > {o}");
    }
}

#[test]
fn flat_variants_ignore_the_gate() {
    let Case { z, parts } = case(20, 0.2, 2, 4, 3);
    for v in [LossVariant::InfonceInFlat, LossVariant::InfonceOutFlat] {
        let a = gscl_loss_value(&z, &parts, &cfg(v, 2, 0.01, PositiveGrouping::Inside)).unwrap();
        let b = gscl_loss_value(&z, &parts, &cfg(v, 2, 1.0, PositiveGrouping::Inside)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn all_empty_is_no_signal() {
    let g: Graph64 = generate_gnp(5, 0.0, 1, 0, 0).unwrap();
    let parts = partition_anchors(&g, &[0, 1, 2, 3, 4], 2, None, 0).unwrap();
    let z = Matrix64::filled(5, 2, 1.0);
    let err = gscl_loss_value(&z, &parts, &cfg(LossVariant::Listwise, 2, 0.5, PositiveGrouping::Inside));
    assert!(matches!(err, Err(gscl::Error::NoRankingSignal)));
}
