//! Cosine critic, InfoNCE variants and the gated ranking losses over
//! multi-hop neighborhoods.
//!
//! Scores against a hop-`h` node use temperature
//! `tau_h = tau_base + (h - 1) * tau_spacing`, where hop `k + 1` is the
//! far-field sample. All ratios are handled in log space:
//! `log min(r, alpha) = min(log r, log alpha)`, and sums of exponentials are
//! max-shifted log-sum-exps.
//!
//! A ranking group is skipped when its numerator hop is empty, and for the
//! pairwise loss also when the compared hop is empty. Each anchor's groups
//! are scaled by `1 / k_eff`, where `k_eff` counts the outer indices `j`
//! with at least one surviving group (equal to `k` without empty hops). The
//! loss is the mean over anchors with at least one group.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::HopPartition;
use crate::matrix::Matrix;
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Pairwise,
    Listwise,
    /// `P` = hops `1..=k` pooled inside one log, `N` = far field.
    InfonceInFlat,
    /// Same sets, one term per positive summed outside the log.
    InfonceOutFlat,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Self::Pairwise),
            "listwise" => Ok(Self::Listwise),
            "infonce_in_flat" => Ok(Self::InfonceInFlat),
            "infonce_out_flat" => Ok(Self::InfonceOutFlat),
            other => Err(Error::InvalidArgument(format!("unknown loss variant {other:?}"))),
        }
    }
}

/// How the numerator hop of a ranking group is treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveGrouping {
    /// Members summed inside the log.
    #[default]
    Inside,
    /// One gated term per member, each against the group's negatives,
    /// averaged over the members.
    Outside,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub k: usize,
    pub tau_base: f64,
    pub tau_spacing: f64,
    pub alpha: f64,
    pub beta: f64,
    pub variant: LossVariant,
    #[serde(default)]
    pub positive_grouping: PositiveGrouping,
    #[serde(default)]
    pub count_score_calls: bool,
    #[serde(default = "default_true")]
    pub memoize_similarities: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: 2,
            tau_base: 0.5,
            tau_spacing: 0.0,
            alpha: 0.9,
            beta: 0.5,
            variant: LossVariant::Listwise,
            positive_grouping: PositiveGrouping::Inside,
            count_score_calls: false,
            memoize_similarities: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.tau_base > 0.0) || !(self.tau_spacing >= 0.0) {
            return bad(format!(
                "tau_base {} must be > 0 and tau_spacing {} >= 0",
                self.tau_base, self.tau_spacing
            ));
        }
        for (name, g) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("{name} {g} not in (0,1]"));
            }
        }
        Ok(())
    }

    /// Temperature for hop `h` (1-based; `k + 1` is the far field).
    pub fn tau(&self, h: usize) -> f64 {
        self.tau_base + (h as f64 - 1.0) * self.tau_spacing
    }

    fn gate(&self) -> Option<f64> {
        match self.variant {
            LossVariant::Pairwise => Some(self.alpha),
            LossVariant::Listwise => Some(self.beta),
            _ => None,
        }
    }
}

/// Tally of critic evaluations `theta(., .)`.
#[derive(Debug, Default)]
pub struct ScoreCallCounter(AtomicU64);

impl ScoreCallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok(dot / (na * nb))
}

fn logits<T: Scalar>(q: &[T], xs: &[&[T]], tau: T) -> Result<Vec<T>> {
    xs.iter().map(|x| Ok(cosine_sim(q, x)? / tau)).collect()
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")))
    }
}

/// Single-positive InfoNCE.
pub fn infonce<T: Scalar>(q: &[T], p: &[T], negatives: &[&[T]], tau: T) -> Result<T> {
    infonce_in(q, &[p], negatives, tau)
}

/// One InfoNCE term per positive, summed outside the log.
pub fn infonce_out<T: Scalar>(q: &[T], positives: &[&[T]], negatives: &[&[T]], tau: T) -> Result<T> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::InvalidArgument("positive set is empty".into()));
    }
    let neg = logits(q, negatives, tau)?;
    let mut total = T::zero();
    for &lp in &logits(q, positives, tau)? {
        let mut all = neg.clone();
        all.push(lp);
        total += log_sum_exp(&all) - lp;
    }
    Ok(total)
}

/// Positives pooled inside the log.
pub fn infonce_in<T: Scalar>(q: &[T], positives: &[&[T]], negatives: &[&[T]], tau: T) -> Result<T> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::InvalidArgument("positive set is empty".into()));
    }
    let pos = logits(q, positives, tau)?;
    let mut all = logits(q, negatives, tau)?;
    all.extend_from_slice(&pos);
    Ok(log_sum_exp(&all) - log_sum_exp(&pos))
}

/// Operand of a log-ratio term: a single scaled logit, or the
/// log-sum-exp of one hop segment.
#[derive(Clone, Copy, Debug)]
enum Atom {
    Logit(usize),
    Seg(usize),
}

/// `weight * min(lse(num) - lse(den), log gate)`.
struct Term {
    num: Vec<Atom>,
    den: Vec<Atom>,
    weight: f64,
}

/// Cosine pairs to score, grouped in per-hop segments, plus the terms that
/// combine them.
struct Plan {
    pairs: Vec<(usize, usize)>,
    inv_tau: Vec<f64>,
    /// Boundaries of the nonempty hop segments over `pairs`.
    seg_offsets: Vec<usize>,
    terms: Vec<Term>,
}

#[derive(Clone)]
struct HopSeg {
    logits: std::ops::Range<usize>,
    seg: Option<usize>,
}

impl Plan {
    /// Scores `p.anchor` against every member of each listed hop. Members
    /// are visited in id order so the loss depends only on the hop sets.
    fn block(&mut self, p: &HopPartition, hops: &[usize], cfg: &LossConfig) -> Vec<HopSeg> {
        hops.iter()
            .map(|&h| {
                let start = self.pairs.len();
                let inv = 1.0 / cfg.tau(h);
                let mut members = p.hop(h).to_vec();
                members.sort_unstable();
                for u in members {
                    self.pairs.push((p.anchor, u));
                    self.inv_tau.push(inv);
                }
                let end = self.pairs.len();
                let seg = (end > start).then(|| {
                    self.seg_offsets.push(end);
                    self.seg_offsets.len() - 2
                });
                HopSeg { logits: start..end, seg }
            })
            .collect()
    }
}

fn nonempty(p: &HopPartition, h: usize) -> bool {
    !p.hop(h).is_empty()
}

/// Surviving pairwise groups `(j, m)` of one anchor and its `k_eff`.
fn pairwise_groups(p: &HopPartition, k: usize) -> (Vec<(usize, usize)>, usize) {
    let mut groups = Vec::new();
    let mut k_eff = 0;
    for j in (1..=k).filter(|&j| nonempty(p, j)) {
        let before = groups.len();
        groups.extend((1..=k - j + 1).filter(|&m| nonempty(p, j + m)).map(|m| (j, m)));
        if groups.len() > before {
            k_eff += 1;
        }
    }
    (groups, k_eff)
}

fn listwise_groups(p: &HopPartition, k: usize) -> Vec<usize> {
    (1..=k).filter(|&j| nonempty(p, j)).collect()
}

/// `(j, compared hops)` per surviving ranking group, and `k_eff`.
fn ranking_groups(p: &HopPartition, cfg: &LossConfig) -> (Vec<(usize, Vec<usize>)>, usize) {
    let k = cfg.k;
    if cfg.variant == LossVariant::Pairwise {
        let (g, k_eff) = pairwise_groups(p, k);
        (g.into_iter().map(|(j, m)| (j, vec![j + m])).collect(), k_eff)
    } else {
        let g = listwise_groups(p, k);
        let n = g.len();
        (g.into_iter().map(|j| (j, (j + 1..=k + 1).collect())).collect(), n)
    }
}

fn is_ranking(v: LossVariant) -> bool {
    matches!(v, LossVariant::Pairwise | LossVariant::Listwise)
}

fn contributes(p: &HopPartition, cfg: &LossConfig) -> bool {
    if is_ranking(cfg.variant) {
        ranking_groups(p, cfg).1 > 0
    } else {
        (1..=cfg.k).any(|h| nonempty(p, h))
    }
}

fn check_partitions(partitions: &[HopPartition], k: usize) -> Result<()> {
    match partitions.iter().find(|p| p.k() != k) {
        Some(p) => Err(Error::InvalidArgument(format!(
            "partition of anchor {} has k={}, loss expects k={k}",
            p.anchor,
            p.k()
        ))),
        None => Ok(()),
    }
}

fn ranking_terms(plan: &mut Plan, p: &HopPartition, cfg: &LossConfig) -> Vec<Term> {
    let (groups, k_eff) = ranking_groups(p, cfg);
    let w = 1.0 / k_eff as f64;
    let all_hops: Vec<usize> = (1..=cfg.k + 1).collect();
    let shared = cfg.memoize_similarities.then(|| plan.block(p, &all_hops, cfg));
    let mut terms = Vec::new();
    for (j, others) in groups {
        let mut hops = vec![j];
        hops.extend(&others);
        let segs: Vec<HopSeg> = match &shared {
            Some(s) => hops.iter().map(|&h| s[h - 1].clone()).collect(),
            None => plan.block(p, &hops, cfg),
        };
        let neg: Vec<Atom> = segs[1..].iter().filter_map(|s| s.seg.map(Atom::Seg)).collect();
        match cfg.positive_grouping {
            PositiveGrouping::Inside => {
                let num = Atom::Seg(segs[0].seg.expect("numerator hop is nonempty"));
                let mut den = vec![num];
                den.extend(&neg);
                terms.push(Term { num: vec![num], den, weight: w });
            }
            PositiveGrouping::Outside => {
                let members = segs[0].logits.clone();
                let wm = w / members.len() as f64;
                for i in members {
                    let mut den = vec![Atom::Logit(i)];
                    den.extend(&neg);
                    terms.push(Term { num: vec![Atom::Logit(i)], den, weight: wm });
                }
            }
        }
    }
    terms
}

fn flat_terms(plan: &mut Plan, p: &HopPartition, cfg: &LossConfig) -> Vec<Term> {
    let k = cfg.k;
    let all_hops: Vec<usize> = (1..=k + 1).collect();
    let segs = plan.block(p, &all_hops, cfg);
    let neg = segs[k].seg.map(Atom::Seg);
    if cfg.variant == LossVariant::InfonceInFlat {
        let num: Vec<Atom> = segs[..k].iter().filter_map(|s| s.seg.map(Atom::Seg)).collect();
        let mut den = num.clone();
        den.extend(neg);
        vec![Term { num, den, weight: 1.0 }]
    } else {
        segs[..k]
            .iter()
            .flat_map(|s| s.logits.clone())
            .map(|i| {
                let mut den = vec![Atom::Logit(i)];
                den.extend(neg);
                Term { num: vec![Atom::Logit(i)], den, weight: 1.0 }
            })
            .collect()
    }
}

fn build_plan(partitions: &[HopPartition], cfg: &LossConfig) -> Result<Plan> {
    cfg.validate()?;
    check_partitions(partitions, cfg.k)?;
    let mut plan = Plan {
        pairs: Vec::new(),
        inv_tau: Vec::new(),
        seg_offsets: vec![0],
        terms: Vec::new(),
    };
    let mut anchors = 0usize;
    for p in partitions.iter().filter(|p| contributes(p, cfg)) {
        anchors += 1;
        let terms = if is_ranking(cfg.variant) {
            ranking_terms(&mut plan, p, cfg)
        } else {
            flat_terms(&mut plan, p, cfg)
        };
        plan.terms.extend(terms);
    }
    if anchors == 0 {
        return Err(Error::NoRankingSignal);
    }
    let scale = 1.0 / anchors as f64;
    for t in &mut plan.terms {
        t.weight *= scale;
    }
    Ok(plan)
}

/// Records the configured loss on `tape` for projected embeddings `z`,
/// averaged over the anchors of `partitions` that carry any signal.
///
/// `counter`, when given, is bumped by the number of cosine scores computed.
pub fn gscl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    partitions: &[HopPartition],
    cfg: &LossConfig,
    counter: Option<&ScoreCallCounter>,
) -> Result<Var> {
    let plan = build_plan(partitions, cfg)?;
    if let Some(c) = counter {
        c.add(plan.pairs.len() as u64);
    }
    let n_logits = plan.pairs.len();
    let cos = tape.pair_cosine(z, plan.pairs)?;
    let logits = tape.scale(cos, plan.inv_tau.iter().map(|&x| T::lit(x)).collect())?;
    let atoms = if plan.seg_offsets.len() > 1 {
        let segs = tape.segment_log_sum_exp(logits, plan.seg_offsets)?;
        tape.concat(vec![logits, segs])
    } else {
        logits
    };
    let flat = |a: &Atom| match *a {
        Atom::Logit(i) => i,
        Atom::Seg(s) => n_logits + s,
    };
    let gather_groups = |tape: &mut Tape<T>, pick: &dyn Fn(&Term) -> &[Atom]| -> Result<Var> {
        let mut idx = Vec::new();
        let mut offsets = vec![0];
        for t in &plan.terms {
            idx.extend(pick(t).iter().map(flat));
            offsets.push(idx.len());
        }
        let g = tape.gather(atoms, idx)?;
        tape.segment_log_sum_exp(g, offsets)
    };
    let num = gather_groups(tape, &|t| &t.num)?;
    let den = gather_groups(tape, &|t| &t.den)?;
    let mut ratio = tape.sub(num, den)?;
    if let Some(g) = cfg.gate() {
        ratio = tape.min_const(ratio, T::lit(g.ln()));
    }
    let weights = plan.terms.iter().map(|t| T::lit(-t.weight)).collect();
    tape.weighted_sum(ratio, weights)
}

/// Value of the configured loss for fixed embeddings.
pub fn gscl_loss_value<T: Scalar>(z: &Matrix<T>, partitions: &[HopPartition], cfg: &LossConfig) -> Result<T> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let loss = gscl_loss(&mut tape, zv, partitions, cfg, None)?;
    Ok(tape.scalar(loss))
}

pub fn gscl_pairwise_loss<T: Scalar>(z: &Matrix<T>, partitions: &[HopPartition], cfg: &LossConfig) -> Result<T> {
    if cfg.variant != LossVariant::Pairwise {
        return Err(Error::InvalidArgument("config variant is not pairwise".into()));
    }
    gscl_loss_value(z, partitions, cfg)
}

pub fn gscl_listwise_loss<T: Scalar>(z: &Matrix<T>, partitions: &[HopPartition], cfg: &LossConfig) -> Result<T> {
    if cfg.variant != LossVariant::Listwise {
        return Err(Error::InvalidArgument("config variant is not listwise".into()));
    }
    gscl_loss_value(z, partitions, cfg)
}

/// Number of critic evaluations one loss evaluation performs.
///
/// Without memoization, a pairwise group `(j, m)` scores `|H_j| + |H_{j+m}|`
/// pairs and a listwise group `j` scores `sum_{j' >= j} |H_j'|`; with it,
/// each anchor scores each of its hop members once. Anchors and groups the
/// loss skips are not counted. Flat variants always score each member once.
pub fn score_call_count_expected(partitions: &[HopPartition], cfg: &LossConfig) -> u64 {
    let k = cfg.k;
    let mut total = 0u64;
    for p in partitions.iter().filter(|p| p.k() == k && contributes(p, cfg)) {
        let size = |h: usize| p.hop(h).len() as u64;
        let all: u64 = (1..=k + 1).map(size).sum();
        total += if !is_ranking(cfg.variant) || cfg.memoize_similarities {
            all
        } else {
            ranking_groups(p, cfg)
                .0
                .iter()
                .map(|(j, others)| size(*j) + others.iter().map(|&h| size(h)).sum::<u64>())
                .sum()
        };
    }
    total
}
