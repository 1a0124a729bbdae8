//! Pilot-based selection of load-time sampling rates.
//!
//! Phase one executes the chain fully on a small wave of pilot partitions
//! and gathers per-key counts and inter/intra-cluster variances. Phase two
//! re-runs the job at the lowest rate pair whose predicted relative-bound
//! CDF still satisfies every user target, lowering the partition rate first
//! (it saves the most work) and the item rate second.
//!
//! Prediction mirrors the estimator's variance model, including the
//! population-estimation terms, so the bounds the final run reports track
//! the bounds the search reasoned about. A configurable safety margin keeps
//! the returned rates strictly inside the feasible region.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dataset::{self, PartitionedDataset, SamplingConfig, Value};
use crate::error::{Error, Result};
use crate::estimator::{product_variance, sample_variance, ConfidenceSpec};
use crate::pipeline::{self, AggregationResult, TransformChain};
use crate::rng::{self, STAGE_PILOT};

/// Targets on the relative-error-bound CDF across keys: at each percentile
/// the bound must not exceed the given maximum.
#[derive(Clone, Debug)]
pub struct ErrorTargets(Vec<(f64, f64)>);

impl ErrorTargets {
    /// Percentiles must lie in (0, 100] and increase strictly. Non-positive
    /// bounds are infeasible by construction: no sampling rate can satisfy
    /// them, so they fail the same way an unreachable target does.
    pub fn new(targets: Vec<(f64, f64)>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidConfig("no error-bound targets given".into()));
        }
        let mut prev = 0.0;
        for &(percentile, bound) in &targets {
            if !(percentile > 0.0 && percentile <= 100.0) {
                return Err(Error::InvalidConfig(format!(
                    "target percentile {percentile} outside (0, 100]"
                )));
            }
            if percentile <= prev {
                return Err(Error::InvalidConfig(
                    "target percentiles must increase strictly".into(),
                ));
            }
            prev = percentile;
            if bound <= 0.0 {
                return Err(Error::InfeasibleTargets {
                    percentile,
                    predicted: 0.0,
                    target: bound,
                });
            }
        }
        Ok(ErrorTargets(targets))
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.0
    }
}

/// Search configuration; defaults follow the 10% pilot wave and 0.1% step.
#[derive(Clone, Copy, Debug)]
pub struct RateSearchConfig {
    pub pilot_fraction: f64,
    pub step: f64,
    pub min_rate: f64,
    /// Fraction of headroom the search keeps against each target, so the
    /// realized bounds of the final run stay inside them.
    pub safety_margin: f64,
}

impl Default for RateSearchConfig {
    fn default() -> Self {
        RateSearchConfig {
            pilot_fraction: 0.10,
            step: 0.001,
            min_rate: 0.001,
            safety_margin: 0.05,
        }
    }
}

impl RateSearchConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= self.pilot_fraction && self.pilot_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < step <= pilot_fraction <= 1, got step {} fraction {}",
                self.step, self.pilot_fraction
            )));
        }
        if !(self.min_rate >= self.step && self.min_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "min_rate {} must lie in [step, 1]",
                self.min_rate
            )));
        }
        if !(0.0..1.0).contains(&self.safety_margin) {
            return Err(Error::InvalidConfig(format!(
                "safety margin {} must lie in [0, 1)",
                self.safety_margin
            )));
        }
        Ok(())
    }
}

/// Per-key statistics gathered by the pilot wave.
#[derive(Clone, Debug)]
pub struct KeyPilot {
    /// Key items observed across the pilot partitions.
    pub item_count: f64,
    pub value_sum: f64,
    /// Pooled within-partition variance of the key's values.
    pub intra_variance: f64,
    /// Variance of the key's per-partition totals across pilot partitions.
    pub inter_variance: f64,
    /// Set when fewer than two pilot partitions carried the key; prediction
    /// then falls back to the global average.
    pub inter_degenerate: bool,
    pub pilot_cluster_count: u64,
}

/// Average statistics over pilot keys, used for keys without their own.
#[derive(Clone, Copy, Debug)]
pub struct GlobalPilot {
    pub item_count: f64,
    pub value_sum: f64,
    pub intra_variance: f64,
    pub inter_variance: f64,
}

#[derive(Clone, Debug)]
pub struct PilotStats {
    pub per_key: BTreeMap<String, KeyPilot>,
    pub pilot_partitions: u64,
    pub total_partitions: u64,
    /// Realized pilot fraction: pilot partitions over all partitions.
    pub realized_fraction: f64,
    pub global: GlobalPilot,
}

/// Executes the chain fully on a pilot wave of partitions and gathers
/// per-key counts and variances. Needs a dataset loaded at rates (1, 1) with
/// at least two partitions.
pub fn run_pilot(
    dataset: &PartitionedDataset,
    chain: &TransformChain,
    cfg: &RateSearchConfig,
) -> Result<PilotStats> {
    cfg.validate()?;
    if dataset.load_config.partition_rate < 1.0 || dataset.load_config.item_rate < 1.0 {
        return Err(Error::Pilot(
            "pilot statistics need a dataset loaded at rates (1, 1)".into(),
        ));
    }
    let total = dataset.partitions.len();
    if total < 2 {
        return Err(Error::Pilot(format!(
            "inter-cluster variance needs at least 2 partitions, have {total}"
        )));
    }
    let want = ((total as f64 * cfg.pilot_fraction).round() as usize).clamp(2, total);
    let mut rng = rng::stream(dataset.load_config.seed, 0, STAGE_PILOT);
    let rate = want as f64 / total as f64;
    let chosen = dataset::sample_partition_indices(total, rate, &mut rng);

    struct PartKey {
        count: u64,
        sum: f64,
        sum_sq: f64,
    }
    let per_partition: Vec<BTreeMap<String, PartKey>> = chosen
        .par_iter()
        .map(|&i| {
            let p = &dataset.partitions[i];
            let values: Vec<Value> = p.records.iter().map(|r| r.payload.clone()).collect();
            let finals = pipeline::apply_ops_values(
                values,
                &chain.ops,
                dataset.load_config.seed,
                p.original_index,
            )?;
            let mut acc: BTreeMap<String, PartKey> = BTreeMap::new();
            for v in &finals {
                let (k, x) = v.as_pair().ok_or_else(|| Error::StageType {
                    stage: "pilot".into(),
                    detail: format!("final records must be pairs, found {}", v.kind()),
                })?;
                let e = acc.entry(k.to_string()).or_insert(PartKey {
                    count: 0,
                    sum: 0.0,
                    sum_sq: 0.0,
                });
                e.count += 1;
                e.sum += x;
                e.sum_sq += x * x;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    struct KeyAcc {
        totals: Vec<f64>,
        count: u64,
        sum: f64,
        ss_within: f64,
        df_within: u64,
    }
    let mut keys: BTreeMap<String, KeyAcc> = BTreeMap::new();
    for part in &per_partition {
        for (k, pk) in part {
            let e = keys.entry(k.clone()).or_insert(KeyAcc {
                totals: Vec::new(),
                count: 0,
                sum: 0.0,
                ss_within: 0.0,
                df_within: 0,
            });
            e.totals.push(pk.sum);
            e.count += pk.count;
            e.sum += pk.sum;
            e.ss_within += pk.sum_sq - pk.sum * pk.sum / pk.count as f64;
            e.df_within += pk.count - 1;
        }
    }
    if keys.is_empty() {
        return Err(Error::Pilot("pilot wave produced no output keys".into()));
    }

    let total_items: u64 = keys.values().map(|k| k.count).sum();
    if let Some((top_key, top)) = keys.iter().max_by_key(|(_, v)| v.count) {
        if top.count as f64 > 0.5 * total_items as f64 {
            log::warn!(
                "pilot key distribution is highly skewed: `{top_key}` holds {}/{total_items} \
                 items; rate prediction assumes evenly distributed keys",
                top.count
            );
        }
    }

    let per_key: BTreeMap<String, KeyPilot> = keys
        .into_iter()
        .map(|(k, acc)| {
            let inter_degenerate = acc.totals.len() < 2;
            (
                k,
                KeyPilot {
                    item_count: acc.count as f64,
                    value_sum: acc.sum,
                    intra_variance: if acc.df_within > 0 {
                        (acc.ss_within / acc.df_within as f64).max(0.0)
                    } else {
                        0.0
                    },
                    inter_variance: sample_variance(&acc.totals),
                    inter_degenerate,
                    pilot_cluster_count: acc.totals.len() as u64,
                },
            )
        })
        .collect();

    let k = per_key.len() as f64;
    let global = GlobalPilot {
        item_count: per_key.values().map(|p| p.item_count).sum::<f64>() / k,
        value_sum: per_key.values().map(|p| p.value_sum).sum::<f64>() / k,
        intra_variance: per_key.values().map(|p| p.intra_variance).sum::<f64>() / k,
        inter_variance: per_key
            .values()
            .filter(|p| !p.inter_degenerate)
            .map(|p| p.inter_variance)
            .sum::<f64>()
            / per_key
                .values()
                .filter(|p| !p.inter_degenerate)
                .count()
                .max(1) as f64,
    };

    Ok(PilotStats {
        per_key,
        pilot_partitions: per_partition.len() as u64,
        total_partitions: dataset.origin_partition_count,
        realized_fraction: per_partition.len() as f64 / dataset.origin_partition_count as f64,
        global,
    })
}

/// Predicted relative bounds per key at rates `(p1, p2)`, sorted ascending.
#[derive(Clone, Debug)]
pub struct PredictedCdf {
    bounds: Vec<f64>,
}

impl PredictedCdf {
    /// Empirical-CDF value at a percentile: the bound at the 1-based index
    /// `ceil(P/100 * #keys)`, ties resolved toward the larger bound.
    pub fn value_at(&self, percentile: f64) -> f64 {
        let k = self.bounds.len();
        debug_assert!(k > 0);
        let idx = ((percentile / 100.0) * k as f64).ceil() as usize;
        self.bounds[idx.clamp(1, k) - 1]
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }
}

fn predict_key_bound(
    key: &KeyPilot,
    stats: &PilotStats,
    n_partitions: f64,
    chosen: f64,
    p2: f64,
    t_crit: f64,
) -> f64 {
    let f = stats.realized_fraction;
    let m_hat = key.item_count / f;
    let tau_hat = key.value_sum / f;
    let mean_v = key.value_sum / key.item_count;
    let s_i2 = key.intra_variance;
    // Pilot totals are per-partition quantities already; no fraction scaling.
    let s_u2 = if key.inter_degenerate {
        stats.global.inter_variance
    } else {
        key.inter_variance
    };

    // Per-partition model: the key's items spread evenly across all N
    // partitions; each chosen partition contributes the scaled sum of its
    // Bernoulli item sample.
    let m_c = m_hat / n_partitions;
    let var_cluster = if p2 >= 1.0 || m_c <= 0.0 {
        0.0
    } else {
        let m_sampled = m_c * p2;
        let var_m_hat = m_sampled * (1.0 - p2) / (p2 * p2);
        let var_v_bar = (1.0 - p2) * s_i2 / m_sampled;
        product_variance(m_c, var_m_hat, mean_v, var_v_bar)
    };
    // Estimated per-partition totals spread wider than the true totals by
    // the per-partition sampling noise.
    let s_t2 = s_u2 + var_cluster;
    let inter = n_partitions * (n_partitions - chosen) * s_t2 / chosen;
    let intra = n_partitions * var_cluster;
    let v_hat = inter + intra;

    let epsilon = t_crit * v_hat.sqrt();
    if tau_hat == 0.0 {
        if epsilon == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        epsilon / tau_hat.abs()
    }
}

/// Predicts the per-key relative-bound CDF at rates `(p1, p2)` from pilot
/// statistics, plugging the pilot counts and variances into the two-stage
/// variance at the scaled sample sizes.
pub fn predict_error_cdf(
    stats: &PilotStats,
    p1: f64,
    p2: f64,
    spec: &ConfidenceSpec,
) -> PredictedCdf {
    assert!(p1 > 0.0 && p1 <= 1.0 && p2 > 0.0 && p2 <= 1.0);
    let n_partitions = stats.total_partitions as f64;
    let chosen = (n_partitions * p1).round().max(1.0);
    let mut bounds: Vec<f64> = if chosen < 2.0 {
        vec![f64::INFINITY; stats.per_key.len()]
    } else {
        let t_crit = spec.t_critical(chosen as u64 - 1);
        stats
            .per_key
            .values()
            .map(|key| predict_key_bound(key, stats, n_partitions, chosen, p2, t_crit))
            .collect()
    };
    bounds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    PredictedCdf { bounds }
}

fn satisfies(cdf: &PredictedCdf, targets: &ErrorTargets, margin: f64) -> bool {
    targets
        .entries()
        .iter()
        .all(|&(p, bound)| cdf.value_at(p) <= bound * (1.0 - margin))
}

fn first_violation(cdf: &PredictedCdf, targets: &ErrorTargets) -> Option<(f64, f64, f64)> {
    targets
        .entries()
        .iter()
        .find(|&&(p, bound)| cdf.value_at(p) > bound)
        .map(|&(p, bound)| (p, cdf.value_at(p), bound))
}

/// Greedy rate search: starting from (1, 1), lowers the partition rate while
/// every target holds, restores the last feasible value, then lowers the
/// item rate the same way.
pub fn search_rates(
    stats: &PilotStats,
    targets: &ErrorTargets,
    cfg: &RateSearchConfig,
    spec: &ConfidenceSpec,
) -> Result<(f64, f64, PredictedCdf)> {
    cfg.validate()?;
    let full = predict_error_cdf(stats, 1.0, 1.0, spec);
    if let Some((percentile, predicted, target)) = first_violation(&full, targets) {
        return Err(Error::InfeasibleTargets {
            percentile,
            predicted,
            target,
        });
    }

    let rate_at = |steps: u64| -> f64 { 1.0 - steps as f64 * cfg.step };
    let max_steps = ((1.0 - cfg.min_rate) / cfg.step + 0.5).floor() as u64;

    let mut p1_steps = 0u64;
    while p1_steps < max_steps {
        let candidate = rate_at(p1_steps + 1);
        let cdf = predict_error_cdf(stats, candidate, 1.0, spec);
        if satisfies(&cdf, targets, cfg.safety_margin) {
            p1_steps += 1;
        } else {
            break;
        }
    }
    let p1 = rate_at(p1_steps);

    let mut p2_steps = 0u64;
    while p2_steps < max_steps {
        let candidate = rate_at(p2_steps + 1);
        let cdf = predict_error_cdf(stats, p1, candidate, spec);
        if satisfies(&cdf, targets, cfg.safety_margin) {
            p2_steps += 1;
        } else {
            break;
        }
    }
    let p2 = rate_at(p2_steps);

    Ok((p1, p2, predict_error_cdf(stats, p1, p2, spec)))
}

/// Where run_with_targets loads its data from; phase two re-loads at the
/// searched rates.
#[derive(Clone, Debug)]
pub enum DataSource {
    Text { path: PathBuf, partitions: usize },
    InMemory(Vec<Vec<Value>>),
}

impl DataSource {
    pub fn load(&self, cfg: SamplingConfig) -> Result<PartitionedDataset> {
        match self {
            DataSource::Text { path, partitions } => dataset::load_text(path, *partitions, cfg),
            DataSource::InMemory(parts) => {
                PartitionedDataset::from_value_partitions(parts.clone(), cfg)
            }
        }
    }
}

/// Outcome of a tuned run: the phase-2 result plus the searched rates and
/// pilot cost.
#[derive(Clone, Debug)]
pub struct TunedRun {
    pub result: AggregationResult,
    pub partition_rate: f64,
    pub item_rate: f64,
    pub predicted_cdf: PredictedCdf,
    pub pilot_partitions: u64,
    pub pilot_elapsed: Duration,
}

/// Two-phase tuned execution: pilot wave and rate search on a full load,
/// then a fresh full run at the found rates. Pilot results are not merged
/// into the final answer.
pub fn run_with_targets(
    source: &DataSource,
    base: SamplingConfig,
    chain: &TransformChain,
    targets: &ErrorTargets,
    cfg: &RateSearchConfig,
) -> Result<TunedRun> {
    let spec = ConfidenceSpec::new(base.confidence)?;
    let full_cfg = SamplingConfig::new(1.0, 1.0, base.seed, base.confidence)?;

    let pilot_start = Instant::now();
    let full = source.load(full_cfg)?;
    let stats = run_pilot(&full, chain, cfg)?;
    let (p1, p2, predicted) = search_rates(&stats, targets, cfg, &spec)?;
    let pilot_elapsed = pilot_start.elapsed();

    let run_cfg = SamplingConfig::new(p1, p2, base.seed, base.confidence)?;
    let ds = source.load(run_cfg)?;
    let result = pipeline::execute(&ds, chain)?;
    Ok(TunedRun {
        result,
        partition_rate: p1,
        item_rate: p2,
        predicted_cdf: predicted,
        pilot_partitions: stats.pilot_partitions,
        pilot_elapsed,
    })
}
