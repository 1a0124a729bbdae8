//! Sum and variance estimation for multi-stage cluster samples.
//!
//! The two-stage closed forms and the multi-stage recurrences operate on
//! known cluster populations. Per-key estimation over a provenance tree
//! additionally estimates the unknown per-key populations from the observed
//! counts and folds the estimation uncertainty into the variance via the
//! product rule `Var(N*T) = N^2 Var(T) + T^2 Var(N) + Var(N) Var(T)`.
//!
//! Population models differ by level. Levels sampled one-pass (item loading
//! and `sample` ops) are Bernoulli, so an observed per-key count `c` gives
//! the unbiased estimate `c / p` with variance `c (1 - p) / p^2`. The
//! partition level is fixed-count SRS without replacement, so the scale-up
//! uses the realized rate `n / N` and the count variance is hypergeometric;
//! for a key observed in every chosen partition it is zero, which keeps
//! full-coverage keys from absorbing spurious population uncertainty.

use std::collections::HashMap;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::provenance::{ProvNode, ProvenanceTree};

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator `n - 1`); zero when `n < 2`.
pub(crate) fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Confidence level plus the Student's t critical-value lookup.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceSpec {
    level: f64,
}

impl ConfidenceSpec {
    pub fn new(level: f64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence level must be in (0, 1), got {level}"
            )));
        }
        Ok(ConfidenceSpec { level })
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// Two-sided critical value `t_{df, 1 - alpha/2}`.
    pub fn t_critical(&self, df: u64) -> f64 {
        assert!(df >= 1, "t quantile needs df >= 1");
        let p = 1.0 - (1.0 - self.level) / 2.0;
        if df > 10_000_000 {
            // Indistinguishable from the normal quantile at f64 precision.
            Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
        } else {
            StudentsT::new(0.0, 1.0, df as f64).unwrap().inverse_cdf(p)
        }
    }
}

/// A cluster population inferred from its observed per-key count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PopulationEstimate {
    pub value: f64,
    pub variance: f64,
    pub exact: bool,
}

/// Unbiased population estimate `n / p` for a Bernoulli-sampled level; exact
/// with zero variance when `p = 1`.
pub fn estimate_population(sample_count: u64, rate: f64) -> PopulationEstimate {
    assert!(rate > 0.0 && rate <= 1.0, "rate must be in (0, 1]");
    let n = sample_count as f64;
    if rate >= 1.0 {
        PopulationEstimate {
            value: n,
            variance: 0.0,
            exact: true,
        }
    } else {
        PopulationEstimate {
            value: n / rate,
            variance: n * (1.0 - rate) / (rate * rate),
            exact: false,
        }
    }
}

/// Variance of a product of two independent estimates.
pub fn product_variance(ex: f64, vx: f64, ey: f64, vy: f64) -> f64 {
    debug_assert!(vx >= 0.0 && vy >= 0.0);
    ex * ex * vy + ey * ey * vx + vx * vy
}

/// A variance estimate plus the flag marking that some required sample
/// variance had fewer than two observations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceEstimate {
    pub value: f64,
    pub degenerate: bool,
}

/// One first-stage cluster of a two-stage design: known population `M_i` and
/// the `m_i` sampled values.
#[derive(Clone, Copy, Debug)]
pub struct TwoStageCluster<'a> {
    pub population: u64,
    pub values: &'a [f64],
}

fn check_two_stage(total_clusters: u64, clusters: &[TwoStageCluster]) -> Result<()> {
    if clusters.is_empty() {
        return Err(Error::Precondition("two-stage sample needs n >= 1".into()));
    }
    if clusters.len() as u64 > total_clusters {
        return Err(Error::Precondition(format!(
            "chosen clusters {} exceed population {total_clusters}",
            clusters.len()
        )));
    }
    for (i, c) in clusters.iter().enumerate() {
        if c.values.is_empty() {
            return Err(Error::Precondition(format!("cluster {i} has m_i = 0")));
        }
        if c.values.len() as u64 > c.population {
            return Err(Error::Precondition(format!(
                "cluster {i}: m_i = {} exceeds M_i = {}",
                c.values.len(),
                c.population
            )));
        }
    }
    Ok(())
}

/// Two-stage estimated sum `(N/n) * sum_i (M_i/m_i) * sum_j v_ij`.
pub fn two_stage_sum(total_clusters: u64, clusters: &[TwoStageCluster]) -> Result<f64> {
    check_two_stage(total_clusters, clusters)?;
    let n = clusters.len() as f64;
    let inner: f64 = clusters
        .iter()
        .map(|c| c.population as f64 / c.values.len() as f64 * c.values.iter().sum::<f64>())
        .sum();
    Ok(total_clusters as f64 / n * inner)
}

/// Two-stage variance with both finite-population corrections; inter- and
/// intra-cluster sample variances use the `count - 1` denominator.
pub fn two_stage_variance(
    total_clusters: u64,
    clusters: &[TwoStageCluster],
) -> Result<VarianceEstimate> {
    check_two_stage(total_clusters, clusters)?;
    let big_n = total_clusters as f64;
    let n = clusters.len() as f64;
    let mut degenerate = clusters.len() < 2;

    let estimated_totals: Vec<f64> = clusters
        .iter()
        .map(|c| c.population as f64 / c.values.len() as f64 * c.values.iter().sum::<f64>())
        .collect();
    let s_u2 = sample_variance(&estimated_totals);

    let mut intra = 0.0;
    for c in clusters {
        let m = c.values.len() as f64;
        let big_m = c.population as f64;
        if c.values.len() < 2 {
            degenerate = true;
        }
        intra += big_m * (big_m - m) * sample_variance(c.values) / m;
    }

    Ok(VarianceEstimate {
        value: big_n * (big_n - n) * s_u2 / n + big_n / n * intra,
        degenerate,
    })
}

/// A multi-stage sample with known cluster populations: leaves are sampled
/// values, internal nodes carry the total sub-cluster count of the cluster
/// they represent.
#[derive(Clone, Debug)]
pub enum StatNode {
    Leaf(f64),
    Internal {
        population: u64,
        children: Vec<StatNode>,
    },
}

/// Estimated sum by the multi-stage recurrence. An internal node with no
/// children contributes a cluster total of 0 while still counting toward its
/// parent's chosen-cluster count.
pub fn multistage_sum(node: &StatNode) -> f64 {
    match node {
        StatNode::Leaf(v) => *v,
        StatNode::Internal {
            population,
            children,
        } => {
            if children.is_empty() {
                return 0.0;
            }
            let n = children.len() as f64;
            *population as f64 / n * children.iter().map(multistage_sum).sum::<f64>()
        }
    }
}

/// Estimated variance by the multi-stage recurrence: intra-cluster at the
/// last internal level, inter-cluster plus propagated child variance above.
pub fn multistage_variance(node: &StatNode) -> VarianceEstimate {
    match node {
        StatNode::Leaf(_) => VarianceEstimate {
            value: 0.0,
            degenerate: false,
        },
        StatNode::Internal {
            population,
            children,
        } => {
            if children.is_empty() {
                return VarianceEstimate {
                    value: 0.0,
                    degenerate: true,
                };
            }
            let big_n = *population as f64;
            let n = children.len() as f64;
            let mut degenerate = children.len() < 2;
            let child_sums: Vec<f64> = children.iter().map(multistage_sum).collect();
            let s2 = sample_variance(&child_sums);
            let fpc = big_n * (big_n - n) * s2 / n;

            let all_leaves = children.iter().all(|c| matches!(c, StatNode::Leaf(_)));
            if all_leaves {
                // k = d - 1: pure intra-cluster term.
                return VarianceEstimate {
                    value: fpc,
                    degenerate,
                };
            }
            let mut child_var = 0.0;
            for c in children {
                debug_assert!(
                    matches!(c, StatNode::Internal { .. }),
                    "levels must not mix leaves and internal nodes"
                );
                let v = multistage_variance(c);
                degenerate |= v.degenerate;
                child_var += v.value;
            }
            VarianceEstimate {
                value: fpc + big_n / n * child_var,
                degenerate,
            }
        }
    }
}

/// Two-stage variance where both cluster populations are estimated from the
/// observed counts; the estimation uncertainty enters through the product
/// rule at both levels.
pub fn nb_augmented_two_stage_variance(
    p1: f64,
    p2: f64,
    clusters: &[&[f64]],
) -> Result<VarianceEstimate> {
    if !(p1 > 0.0 && p1 <= 1.0 && p2 > 0.0 && p2 <= 1.0) {
        return Err(Error::Precondition("rates must be in (0, 1]".into()));
    }
    if clusters.is_empty() {
        return Err(Error::Precondition("need at least one observed cluster".into()));
    }
    let n = clusters.len();
    let mut degenerate = n < 2;

    let mut estimated_totals = Vec::with_capacity(n);
    let mut intra_sum = 0.0;
    for values in clusters {
        if values.is_empty() {
            return Err(Error::Precondition("observed cluster has no values".into()));
        }
        let m = values.len();
        if m < 2 && p2 < 1.0 {
            degenerate = true;
        }
        let tau_bar_i = mean(values);
        let var_tau_bar_i = (1.0 - p2) * sample_variance(values) / m as f64;
        let pop = estimate_population(m as u64, p2);
        estimated_totals.push(pop.value * tau_bar_i);
        intra_sum += product_variance(pop.value, pop.variance, tau_bar_i, var_tau_bar_i);
    }

    let tau_bar = mean(&estimated_totals);
    let var_tau_bar = (1.0 - p1) * sample_variance(&estimated_totals) / n as f64;
    let pop = estimate_population(n as u64, p1);
    let inter = product_variance(pop.value, pop.variance, tau_bar, var_tau_bar);
    Ok(VarianceEstimate {
        value: inter + intra_sum / p1,
        degenerate,
    })
}

/// A confidence interval half-width and bounds. `epsilon` is infinite when
/// the variance is positive but fewer than two level-1 clusters back it.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceInterval {
    pub epsilon: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn confidence_interval(
    tau_hat: f64,
    v_hat: f64,
    n_level1: u64,
    spec: &ConfidenceSpec,
) -> ConfidenceInterval {
    debug_assert!(v_hat >= 0.0);
    if v_hat == 0.0 {
        return ConfidenceInterval {
            epsilon: 0.0,
            lo: tau_hat,
            hi: tau_hat,
        };
    }
    if n_level1 < 2 {
        return ConfidenceInterval {
            epsilon: f64::INFINITY,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        };
    }
    let epsilon = spec.t_critical(n_level1 - 1) * v_hat.sqrt();
    ConfidenceInterval {
        epsilon,
        lo: tau_hat - epsilon,
        hi: tau_hat + epsilon,
    }
}

/// Final per-key estimate. `epsilon` is infinite when unbounded;
/// `relative_bound` is NaN when the estimate is zero.
#[derive(Clone, Debug)]
pub struct KeyEstimate {
    pub key: String,
    pub tau_hat: f64,
    pub v_hat: f64,
    pub epsilon: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub relative_bound: f64,
    pub n_level1: u64,
    pub degenerate: bool,
}

impl KeyEstimate {
    pub fn from_stats(
        key: String,
        tau_hat: f64,
        v_hat: f64,
        n_level1: u64,
        degenerate: bool,
        spec: &ConfidenceSpec,
    ) -> Self {
        let ci = confidence_interval(tau_hat, v_hat, n_level1, spec);
        let relative_bound = if tau_hat == 0.0 {
            f64::NAN
        } else {
            ci.epsilon / tau_hat.abs()
        };
        KeyEstimate {
            key,
            tau_hat,
            v_hat,
            epsilon: ci.epsilon,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            relative_bound,
            n_level1,
            degenerate,
        }
    }
}

/// Sum and variance pair carried through the per-key traversal.
#[derive(Clone, Copy, Debug, Default)]
struct StatPair {
    tau: f64,
    var: f64,
}

/// Per-key statistics of one tree node: the value sum estimate plus the leaf
/// count estimate (the per-key population, used by mean aggregation).
#[derive(Clone, Copy, Debug)]
pub struct NodeStat {
    value: StatPair,
    count: StatPair,
    degenerate: bool,
}

impl NodeStat {
    fn leaf(value: f64) -> Self {
        NodeStat {
            value: StatPair { tau: value, var: 0.0 },
            count: StatPair { tau: 1.0, var: 0.0 },
            degenerate: false,
        }
    }
}

/// Population model of one tree level.
enum LevelModel {
    /// One-pass Bernoulli selection at the given rate.
    Bernoulli { rate: f64 },
    /// Fixed-count SRS without replacement of `chosen` out of `total`.
    FixedCount { total: u64, chosen: u64 },
}

fn combine(children: &[NodeStat], model: &LevelModel) -> NodeStat {
    debug_assert!(!children.is_empty());
    let c = children.len() as f64;
    let (rate, pop_variance) = match model {
        LevelModel::Bernoulli { rate } => (*rate, c * (1.0 - rate) / (rate * rate)),
        LevelModel::FixedCount { total, chosen } => {
            let total = *total as f64;
            let chosen = *chosen as f64;
            let rate = chosen / total;
            // Hypergeometric count variance, zero when every chosen
            // partition carries the key or nothing was dropped.
            let theta = c / chosen;
            let var = if total > 1.0 {
                (total / chosen).powi(2)
                    * chosen
                    * theta
                    * (1.0 - theta)
                    * (total - chosen)
                    / (total - 1.0)
            } else {
                0.0
            };
            (rate, var)
        }
    };
    let n_hat = c / rate;
    let fpc = (1.0 - rate).max(0.0);

    let side = |taus: &[f64], child_var_sum: f64| -> StatPair {
        let tau_sum: f64 = taus.iter().sum();
        let tau_bar = tau_sum / c;
        let var_tau_bar = fpc * sample_variance(taus) / c;
        StatPair {
            // Equals n_hat * tau_bar; dividing the plain sum keeps the
            // full-rate path bit-identical to exact aggregation.
            tau: tau_sum / rate,
            var: product_variance(n_hat, pop_variance, tau_bar, var_tau_bar)
                + child_var_sum / rate,
        }
    };

    let value_taus: Vec<f64> = children.iter().map(|s| s.value.tau).collect();
    let count_taus: Vec<f64> = children.iter().map(|s| s.count.tau).collect();
    let value_var_sum: f64 = children.iter().map(|s| s.value.var).sum();
    let count_var_sum: f64 = children.iter().map(|s| s.count.var).sum();

    let degenerate =
        (rate < 1.0 && children.len() < 2) || children.iter().any(|s| s.degenerate);

    NodeStat {
        value: side(&value_taus, value_var_sum),
        count: side(&count_taus, count_var_sum),
        degenerate,
    }
}

/// Per-key root statistics of a finalized tree: estimated value sum,
/// estimated leaf population, and the degrees-of-freedom basis.
#[derive(Clone, Debug)]
pub struct KeyRootStat {
    pub sum_tau: f64,
    pub sum_var: f64,
    pub count_tau: f64,
    pub count_var: f64,
    pub n_level1: u64,
    pub degenerate: bool,
}

fn node_stats(node: &ProvNode, level: usize, rates: &[f64]) -> HashMap<String, NodeStat> {
    match node {
        ProvNode::Leaf { key, value } => {
            debug_assert_eq!(level, rates.len(), "leaf off the maximal level");
            let mut m = HashMap::with_capacity(1);
            m.insert(key.clone(), NodeStat::leaf(*value));
            m
        }
        ProvNode::Internal { children } => {
            let mut grouped: HashMap<String, Vec<NodeStat>> = HashMap::new();
            for child in children {
                for (k, stat) in node_stats(child, level + 1, rates) {
                    grouped.entry(k).or_default().push(stat);
                }
            }
            let model = LevelModel::Bernoulli { rate: rates[level] };
            grouped
                .into_iter()
                .map(|(k, stats)| (k, combine(&stats, &model)))
                .collect()
        }
    }
}

/// Bottom-up per-key traversal: each partition's subtree is reduced in
/// parallel, then the partition statistics merge sequentially at the root.
/// Only clusters containing the key participate at every level.
pub fn compute_tree_stats(tree: &ProvenanceTree) -> Vec<(String, KeyRootStat)> {
    let rates = &tree.level_rates.0;
    let per_partition: Vec<HashMap<String, NodeStat>> = tree
        .partitions
        .par_iter()
        .map(|p| {
            let mut grouped: HashMap<String, Vec<NodeStat>> = HashMap::new();
            for g in &p.groups {
                for (k, stat) in node_stats(g, 2, rates) {
                    grouped.entry(k).or_default().push(stat);
                }
            }
            // The partition node sits at level 1 and combines its level-2
            // children at the item rate.
            let model = LevelModel::Bernoulli { rate: rates[1] };
            grouped
                .into_iter()
                .map(|(k, stats)| (k, combine(&stats, &model)))
                .collect()
        })
        .collect();

    let mut by_key: HashMap<String, Vec<NodeStat>> = HashMap::new();
    for map in per_partition {
        for (k, stat) in map {
            by_key.entry(k).or_default().push(stat);
        }
    }

    let model = LevelModel::FixedCount {
        total: tree.origin_partition_count,
        chosen: tree.chosen_partition_count(),
    };
    let mut out: Vec<(String, KeyRootStat)> = by_key
        .into_iter()
        .map(|(key, stats)| {
            let root = combine(&stats, &model);
            (
                key,
                KeyRootStat {
                    sum_tau: root.value.tau,
                    sum_var: root.value.var,
                    count_tau: root.count.tau,
                    count_var: root.count.var,
                    n_level1: stats.len() as u64,
                    degenerate: root.degenerate,
                },
            )
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Per-key sum estimates with confidence intervals for a finalized tree.
pub fn compute_tree(
    tree: &ProvenanceTree,
    spec: &ConfidenceSpec,
) -> std::collections::BTreeMap<String, KeyEstimate> {
    compute_tree_stats(tree)
        .into_iter()
        .map(|(key, stat)| {
            let est = KeyEstimate::from_stats(
                key.clone(),
                stat.sum_tau,
                stat.sum_var,
                stat.n_level1,
                stat.degenerate,
                spec,
            );
            (key, est)
        })
        .collect()
}
