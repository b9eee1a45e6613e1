//! Self-checks behind `gscl verify`: gradients against finite differences,
//! score-call counts against their closed forms, and losses and metrics
//! against brute-force references.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, Tape};
use crate::encoder::{forward_on_tape, init_params, normalize_adjacency, Activation, ParamVars};
use crate::error::Result;
use crate::generate::{complete_tree, generate_gnp};
use crate::graph::{partition_anchors, Graph, HopPartition};
use crate::loss::{gscl_loss, gscl_loss_value, score_call_count_expected, LossConfig, LossVariant, ScoreCallCounter};
use crate::matrix::Matrix;
use crate::metrics::{homophily_metric, label_consistency};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Quick,
    Full,
}

impl std::str::FromStr for Level {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Self::Quick),
            "full" => Ok(Self::Full),
            other => Err(crate::error::Error::InvalidArgument(format!("unknown verify level {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub level: Level,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: impl Into<String>, r: Result<(bool, String)>) -> Check {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;

/// Max relative gradient error of a gated loss through a 2-layer encoder
/// and the projection head, on a 12-node random graph, in `f64`.
pub fn gradient_error(variant: LossVariant, seed: u64) -> Result<f64> {
    let g: Graph<f64> = generate_gnp(12, 0.25, 5, 0, seed)?;
    let cfg = LossConfig {
        k: 2,
        variant,
        alpha: 0.999,
        beta: 0.999,
        tau_base: 0.5,
        tau_spacing: 0.05,
        ..LossConfig::default()
    };
    let anchors: Vec<usize> = (0..12).collect();
    let parts = partition_anchors(&g, &anchors, 2, None, seed)?;
    let params = init_params::<f64>(&[5, 6, 4], (4, 3), Activation::Prelu, seed)?;
    let adj = Arc::new(normalize_adjacency(&g));
    let nl = params.layer_weights.len();
    let tensors: Vec<Matrix<f64>> = params.tensors().into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    finite_diff_check(
        |tape: &mut Tape<f64>, leaves| {
            let x = tape.constant(g.features().clone());
            let vars = ParamVars::from_slice(leaves, nl)?;
            let (_, z) = forward_on_tape(tape, &adj, x, &vars, Activation::Prelu)?;
            gscl_loss(tape, z, &parts, &cfg, None)
        },
        &tensors,
        1e-6,
        200,
        &mut rng,
    )
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Exponential-space reference for the inside-grouped ranking losses.
pub fn naive_ranking_loss(z: &Matrix<f64>, parts: &[HopPartition], cfg: &LossConfig) -> Option<f64> {
    let k = cfg.k;
    let (mut total, mut anchors) = (0.0, 0);
    for p in parts {
        let s = |h: usize| -> f64 {
            p.hop(h)
                .iter()
                .map(|&u| (cos(z.row(p.anchor), z.row(u)) / cfg.tau(h)).exp())
                .sum()
        };
        let (mut sum, mut k_eff) = (0.0, 0);
        for j in 1..=k {
            if p.hop(j).is_empty() {
                continue;
            }
            let mut any = false;
            if cfg.variant == LossVariant::Pairwise {
                for m in 1..=k - j + 1 {
                    if !p.hop(j + m).is_empty() {
                        sum += (s(j) / (s(j) + s(j + m))).min(cfg.alpha).ln();
                        any = true;
                    }
                }
            } else {
                let den: f64 = (j..=k + 1).map(s).sum();
                sum += (s(j) / den).min(cfg.beta).ln();
                any = true;
            }
            k_eff += usize::from(any);
        }
        if k_eff > 0 {
            anchors += 1;
            total -= sum / k_eff as f64;
        }
    }
    (anchors > 0).then(|| total / anchors as f64)
}

/// Largest loss deviation from the reference over a few random graphs.
pub fn loss_oracle_error(variant: LossVariant, k: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=30);
    let g: Graph<f64> = generate_gnp(n, rng.random_range(0.05..0.3), 3, 0, seed)?;
    let data = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = Matrix::from_vec(n, 6, data)?;
    let cfg = LossConfig {
        k,
        variant,
        alpha: rng.random_range(0.2..0.9),
        beta: rng.random_range(0.2..0.9),
        tau_base: 0.3,
        tau_spacing: 0.05,
        ..LossConfig::default()
    };
    let anchors: Vec<usize> = (0..n).collect();
    let parts = partition_anchors(&g, &anchors, k, Some(5), seed)?;
    let Some(want) = naive_ranking_loss(&z, &parts, &cfg) else {
        return Ok(0.0);
    };
    Ok((gscl_loss_value(&z, &parts, &cfg)? - want).abs())
}

/// Counter minus closed form for one unmemoized evaluation.
pub fn count_mismatch(g: &Graph<f64>, variant: LossVariant, k: usize, anchors: &[usize]) -> Result<(u64, u64)> {
    let cfg = LossConfig {
        k,
        variant,
        memoize_similarities: false,
        count_score_calls: true,
        ..LossConfig::default()
    };
    let parts = partition_anchors(g, anchors, k, None, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
    let n = g.num_nodes();
    let data = (0..n * 4).map(|_| rng.random_range(0.1..1.0)).collect();
    let z = Matrix::from_vec(n, 4, data)?;
    let counter = ScoreCallCounter::new();
    let mut tape = Tape::new();
    let zv = tape.leaf(z);
    gscl_loss(&mut tape, zv, &parts, &cfg, Some(&counter))?;
    Ok((counter.get(), score_call_count_expected(&parts, &cfg)))
}

/// Floyd-Warshall reference for `LC(n)`.
fn apsp_lc(g: &Graph<f64>, n_hop: usize) -> Option<f64> {
    let n = g.num_nodes();
    let inf = usize::MAX / 2;
    let mut d = vec![vec![inf; n]; n];
    for (u, row) in d.iter_mut().enumerate() {
        row[u] = 0;
        for &v in g.neighbors(u) {
            row[v] = 1;
        }
    }
    for m in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][m] + d[m][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    let labels = g.labels()?;
    let (mut sum, mut cnt) = (0.0, 0usize);
    for i in 0..n {
        let members: Vec<usize> = (0..n).filter(|&j| d[i][j] == n_hop).collect();
        if !members.is_empty() {
            let same = members.iter().filter(|&&j| labels[j] == labels[i]).count();
            sum += same as f64 / members.len() as f64;
            cnt += 1;
        }
    }
    (cnt > 0).then(|| sum / cnt as f64)
}

pub fn run(level: Level) -> Report {
    let seeds: Vec<u64> = match level {
        Level::Quick => vec![0],
        Level::Full => vec![0, 1, 2],
    };
    let graphs = match level {
        Level::Quick => 3,
        Level::Full => 10,
    };
    let mut checks = Vec::new();

    for variant in [LossVariant::Pairwise, LossVariant::Listwise] {
        let r = seeds.iter().try_fold(0.0f64, |m, &s| Ok(m.max(gradient_error(variant, s)?)));
        checks.push(check(
            format!("gradient/{variant:?}"),
            r.map(|e| (e < GRAD_TOLERANCE, format!("max rel err {e:.3e}"))),
        ));
    }

    for variant in [LossVariant::Pairwise, LossVariant::Listwise] {
        let r = (1..=3).try_fold(0.0f64, |m, k| {
            seeds.iter().try_fold(m, |m, &s| Ok(m.max(loss_oracle_error(variant, k, s * 31 + k as u64)?)))
        });
        checks.push(check(
            format!("loss-oracle/{variant:?}"),
            r.map(|e| (e < LOSS_TOLERANCE, format!("max abs err {e:.3e}"))),
        ));
    }

    for variant in [LossVariant::Pairwise, LossVariant::Listwise] {
        let r = (|| {
            let tree: Graph<f64> = complete_tree(3, 3)?;
            let all: Vec<usize> = (0..tree.num_nodes()).collect();
            let mut ok = true;
            let mut detail = String::new();
            for s in 0..graphs as u64 {
                let g: Graph<f64> = generate_gnp(25, 0.1, 2, 0, s)?;
                let anchors: Vec<usize> = (0..25).collect();
                let (got, want) = count_mismatch(&g, variant, 2, &anchors)?;
                ok &= got == want;
            }
            let (got, want) = count_mismatch(&tree, variant, 2, &all)?;
            ok &= got == want;
            let (root, _) = count_mismatch(&tree, variant, 2, &[0])?;
            let closed = match variant {
                LossVariant::Pairwise => 2 * (3 + 9 + 27),
                _ => 3 + 2 * 9 + 2 * 27,
            };
            ok &= root == closed;
            detail.push_str(&format!("tree total {got}/{want}, root {root}/{closed}"));
            Ok((ok, detail))
        })();
        checks.push(check(format!("score-calls/{variant:?}"), r));
    }

    let r = (|| {
        let mut ok = true;
        for s in 0..graphs as u64 {
            let g: Graph<f64> = generate_gnp(40, 0.06, 1, 3, s)?;
            for n in 1..=3 {
                let got = label_consistency(&g, n).ok();
                ok &= got.map(f64::to_bits) == apsp_lc(&g, n).map(f64::to_bits);
            }
            if let Ok(hm) = homophily_metric(&g) {
                ok &= hm.to_bits() == label_consistency(&g, 1)?.to_bits();
            }
        }
        Ok((ok, format!("{graphs} graphs, bit-equal")))
    })();
    checks.push(check("metrics-oracle", r));

    Report { level, checks }
}
