//! Encoder, optimizer, file formats, samplers and evaluation metrics.

use gscl::encoder::{
    encode, init_params, normalize_adjacency, read_embeddings, write_embeddings, Activation, EncoderParams,
};
use gscl::eval::{linear_probe, nmi, per_hop_similarity, sim_at_k, Split};
use gscl::generate::{cycle, generate_gnp};
use gscl::graph::partition_anchors;
use gscl::optim::{AdamConfig, AdamState};
use gscl::sampling::{pagerank, sample_hop, SamplerStrategy};
use gscl::{Graph32, Graph64, Matrix32, Matrix64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix64::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_adjacency_is_symmetric_and_contractive(n in 1usize..40, p in 0.0f64..0.5, seed in any::<u64>()) {
        let g: Graph64 = generate_gnp(n, p, 1, 0, seed).unwrap();
        let a = normalize_adjacency(&g).to_dense();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a[(i, j)], a[(j, i)]);
            }
        }
        let mut x = Matrix64::filled(n, 1, 1.0);
        x[(0, 0)] = 2.0;
        let mut rho = 0.0;
        for _ in 0..200 {
            let y = a.matmul(&x).unwrap();
            let norm = y.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            rho = norm / x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            x = y.scale(1.0 / norm);
        }
        prop_assert!(rho <= 1.0 + 1e-9, "spectral radius {rho}");
    }

    #[test]
    fn encoder_is_permutation_equivariant(n in 2usize..50, p in 0.0f64..0.3, seed in any::<u64>()) {
        let g: Graph64 = generate_gnp(n, p, 4, 0, seed).unwrap();
        let perm = permutation(n, seed);
        let pg = g.permuted(&perm).unwrap();
        let params = init_params::<f64>(&[4, 6, 3], (3, 3), Activation::Prelu, seed).unwrap();
        let h = encode(&g, &params).unwrap();
        let ph = encode(&pg, &params).unwrap();
        for v in 0..n {
            for (a, b) in h.row(v).iter().zip(ph.row(perm[v])) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_on_nonnegative_inputs_stays_nonnegative(n in 1usize..30, p in 0.0f64..0.4, seed in any::<u64>()) {
        let g: Graph64 = generate_gnp(n, p, 3, 0, seed).unwrap();
        let feats = g.features().map(f64::abs);
        let g = g.with_features(feats).unwrap();
        let mut params = init_params::<f64>(&[3, 5, 4], (4, 4), Activation::Relu, seed).unwrap();
        for w in &mut params.layer_weights {
            *w = w.map(f64::abs);
        }
        prop_assert!(encode(&g, &params).unwrap().as_slice().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn checkpoint_and_embedding_round_trips(d0 in 1usize..8, d1 in 1usize..8, d2 in 1usize..8, rows in 0usize..20, seed in any::<u64>()) {
        let params = init_params::<f32>(&[d0, d1, d2], (d1, d0), Activation::Rrelu, seed).unwrap();
        let mut buf = Vec::new();
        params.write_checkpoint(&mut buf).unwrap();
        let back = EncoderParams::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, params);

        let h: Matrix32 = random_matrix(rows, d2, seed).cast();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &h).unwrap();
        let back: Matrix32 = read_embeddings(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), h.shape());
        prop_assert_eq!(back.as_slice(), h.as_slice());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters(vals in prop::collection::vec(-5.0f64..5.0, 1..10), wd in 0.0f64..0.01) {
        let n = vals.len();
        let mut p = Matrix64::from_vec(1, n, vals.clone()).unwrap();
        let mut st = AdamState::new([(1, n)]);
        let cfg = AdamConfig::with_lr(0.0, wd);
        for i in 0..5 {
            let g = Matrix64::filled(1, n, i as f64 - 2.0);
            st.step(&cfg, &mut [&mut p], &[g]).unwrap();
        }
        prop_assert_eq!(p.as_slice(), &vals[..]);
    }

    #[test]
    fn similarity_metrics_ignore_row_scale(n in 8usize..40, seed in any::<u64>()) {
        let g: Graph64 = generate_gnp(n, 0.2, 1, 3, seed).unwrap();
        let h = random_matrix(n, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scaled = h.clone();
        for r in 0..n {
            let s: f64 = rng.random_range(0.1..10.0);
            scaled.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let labels = g.labels().unwrap();
        prop_assert!((sim_at_k(&h, labels, 5).unwrap() - sim_at_k(&scaled, labels, 5).unwrap()).abs() < 1e-12);
        let anchors: Vec<usize> = (0..n).collect();
        let parts = partition_anchors(&g, &anchors, 2, None, seed).unwrap();
        let a = per_hop_similarity(&h, &parts).unwrap();
        let b = per_hop_similarity(&scaled, &parts).unwrap();
        prop_assert_eq!(&a.counts, &b.counts);
        for (x, y) in a.means.iter().zip(&b.means) {
            prop_assert!((x - y).abs() < 1e-9 || (x.is_nan() && y.is_nan()));
        }
    }

    #[test]
    fn nmi_is_symmetric_and_relabel_invariant(
        a in prop::collection::vec(0usize..4, 2..60), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..3)).collect();
        let x = nmi(&a, &b).unwrap();
        prop_assert!((x - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&x));
        let relabel = permutation(4, seed);
        let a2: Vec<usize> = a.iter().map(|&l| relabel[l]).collect();
        prop_assert!((x - nmi(&a2, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn samples_are_distinct_subsets_and_reproducible(
        n in 3usize..60, p in 0.05f64..0.4, size in 1usize..10, seed in any::<u64>(), pr in any::<bool>(),
    ) {
        let g: Graph64 = generate_gnp(n, p, 1, 0, seed).unwrap();
        let parts = partition_anchors(&g, &[0], 2, None, seed).unwrap();
        let scores = pagerank(&g, 0.85, 1e-10, 500).unwrap().scores;
        let strategy = if pr { SamplerStrategy::Pagerank } else { SamplerStrategy::Uniform };
        for h in 1..=2 {
            let draw = |s: u64| sample_hop(&parts[0], h, size, strategy, Some(&scores), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let a = draw(seed);
            prop_assert_eq!(&a, &draw(seed));
            prop_assert_eq!(a.len(), size.min(parts[0].hop(h).len()));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(a.iter().all(|v| parts[0].hop(h).contains(v)));
        }
    }

    #[test]
    fn pagerank_is_a_distribution_and_equivariant(n in 1usize..50, p in 0.0f64..0.3, seed in any::<u64>()) {
        let g: Graph64 = generate_gnp(n, p, 1, 0, seed).unwrap();
        let perm = permutation(n, seed);
        let a = pagerank(&g, 0.85, 1e-12, 1000).unwrap().scores;
        let b = pagerank(&g.permuted(&perm).unwrap(), 0.85, 1e-12, 1000).unwrap().scores;
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for v in 0..n {
            prop_assert!((a[v] - b[perm[v]]).abs() < 1e-9);
        }
    }
}

#[test]
fn glorot_entries_average_to_zero() {
    let params = init_params::<f64>(&[400, 250], (1, 1), Activation::Relu, 11).unwrap();
    let w = &params.layer_weights[0];
    let n = w.as_slice().len() as f64;
    let bound = (6.0f64 / 650.0).sqrt();
    let mean = w.as_slice().iter().sum::<f64>() / n;
    let sigma = bound / 3f64.sqrt() / n.sqrt();
    assert!(mean.abs() < 3.0 * sigma, "mean {mean}, 3 sigma {}", 3.0 * sigma);
    assert!(w.as_slice().iter().all(|x| x.abs() <= bound));
}

#[test]
fn isotropic_embeddings_have_no_hop_structure() {
    let g: Graph64 = generate_gnp(300, 0.02, 1, 0, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 64;
    let normal = rand_distr::StandardNormal;
    let h = Matrix64::from_vec(300, dim, (0..300 * dim).map(|_| rng.sample::<f64, _>(normal)).collect()).unwrap();
    let anchors: Vec<usize> = (0..300).collect();
    let parts = partition_anchors(&g, &anchors, 2, Some(50), 1).unwrap();
    let s = per_hop_similarity(&h, &parts).unwrap();
    for (m, &c) in s.means.iter().zip(&s.counts) {
        // Cosines of isotropic vectors have variance 1/dim and are pairwise
        // uncorrelated, except that (a, u) and (u, a) can both be counted.
        let sigma = (2.0 / dim as f64).sqrt() / (c as f64).sqrt();
        assert!(m.abs() < 3.0 * sigma, "mean {m}, 3 sigma {}", 3.0 * sigma);
    }
}

#[test]
fn probe_is_deterministic_under_a_seed() {
    let g: Graph32 = generate_gnp(80, 0.1, 6, 3, 2).unwrap();
    let split = Split::standard(80, 5).unwrap();
    let a = linear_probe(g.features(), g.labels().unwrap(), &split, 3).unwrap();
    let b = linear_probe(g.features(), g.labels().unwrap(), &split, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn cycle_pagerank_is_uniform() {
    for n in [3, 10, 101] {
        let g: Graph64 = cycle(n).unwrap();
        let s = pagerank(&g, 0.85, 1e-12, 1000).unwrap().scores;
        assert!(s.iter().all(|x| (x - 1.0 / n as f64).abs() < 1e-9));
    }
}
