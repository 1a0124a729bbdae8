//! Adaptive stratified reservoir sampling with power allocation (q = 0).
//!
//! Each partition runs one reservoir with no cross-partition coordination.
//! The reservoir budget is divided among the keys seen so far proportionally
//! to each key's coefficient of variation, re-balanced every
//! `realloc_every` admissions, and every key keeps an allocation of at least
//! one slot, so a key seen once is never lost. Within a stable allocation a
//! key's stored items are a uniform random subset of its stream prefix.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{Partition, PartitionedDataset, Record, Value};
use crate::error::{Error, Result};
use crate::estimator::{sample_variance, ConfidenceSpec, KeyEstimate};
use crate::pipeline::{apply_ops_values, FinalStage, TransformOp};
use crate::rng::{self, STAGE_RESERVOIR};

/// Default re-allocation cadence, in admissions.
pub const DEFAULT_REALLOC_EVERY: u64 = 256;

/// Single-pass per-key stream statistics (Welford update).
#[derive(Clone, Debug, Default)]
pub struct KeyStratumStats {
    count: u64,
    mean: f64,
    m2: f64,
    /// Full stratum population, when known from an external source.
    pub population: Option<u64>,
}

impl KeyStratumStats {
    pub fn update(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    /// Items processed so far (`|S_i(t)|`).
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Running sample standard deviation; zero below two observations.
    pub fn std_dev(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }

    /// Coefficient of variation sigma/|mean|; zero when the mean is zero or
    /// fewer than two items were seen.
    pub fn cv(&self) -> f64 {
        if self.count < 2 || self.mean == 0.0 {
            0.0
        } else {
            self.std_dev() / self.mean.abs()
        }
    }
}

/// Largest-remainder apportionment of `total` slots by weight, with a floor
/// of one slot per entry. When `total < entries` every entry still receives
/// its floor slot and the sum exceeds `total`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let k = weights.len();
    if k == 0 {
        return Vec::new();
    }
    if total <= k {
        return vec![1; k];
    }
    let sum: f64 = weights.iter().sum();
    let weights: Vec<f64> = if sum <= 0.0 {
        vec![1.0; k]
    } else {
        weights.to_vec()
    };
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut by_remainder: Vec<(usize, f64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q - q.floor()))
        .collect();
    by_remainder.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in by_remainder.into_iter().take(total - assigned) {
        alloc[i] += 1;
    }
    // Floor rule: raise zero allocations to one, taking from the largest.
    loop {
        let Some(zero) = alloc.iter().position(|&a| a == 0) else {
            break;
        };
        let Some(donor) = alloc
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 1)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
        else {
            break;
        };
        alloc[donor] -= 1;
        alloc[zero] = 1;
    }
    alloc
}

/// Power allocation with q = 0: reservoir share proportional to each key's
/// coefficient of variation, largest-remainder rounded, floor of one slot.
/// All-zero coefficients fall back to an equal split.
pub fn allocate(
    stats: &BTreeMap<String, KeyStratumStats>,
    total: usize,
) -> BTreeMap<String, usize> {
    let keys: Vec<&String> = stats.keys().collect();
    let weights: Vec<f64> = keys.iter().map(|k| stats[*k].cv()).collect();
    let alloc = apportion(&weights, total);
    keys.into_iter()
        .cloned()
        .zip(alloc)
        .collect()
}

#[derive(Clone, Debug)]
struct Stratum {
    stats: KeyStratumStats,
    items: Vec<f64>,
    allocation: usize,
}

/// Per-partition ASRS state: per-key reservoirs plus running stream stats.
#[derive(Clone, Debug)]
pub struct ReservoirState {
    total_size: usize,
    strata: BTreeMap<String, Stratum>,
    admissions: u64,
    realloc_every: u64,
}

impl ReservoirState {
    pub fn new(total_size: usize) -> Self {
        Self::with_realloc_every(total_size, DEFAULT_REALLOC_EVERY)
    }

    pub fn with_realloc_every(total_size: usize, realloc_every: u64) -> Self {
        assert!(total_size >= 1, "reservoir needs at least one slot");
        assert!(realloc_every >= 1);
        ReservoirState {
            total_size,
            strata: BTreeMap::new(),
            admissions: 0,
            realloc_every,
        }
    }

    pub fn total_size(&self) -> usize {
        self.total_size
    }

    pub fn keys_seen(&self) -> usize {
        self.strata.len()
    }

    pub fn stored_total(&self) -> usize {
        self.strata.values().map(|s| s.items.len()).sum()
    }

    pub fn allocation_total(&self) -> usize {
        self.strata.values().map(|s| s.allocation).sum()
    }

    pub fn stats(&self) -> BTreeMap<String, KeyStratumStats> {
        self.strata
            .iter()
            .map(|(k, s)| (k.clone(), s.stats.clone()))
            .collect()
    }

    pub fn stratum_items(&self, key: &str) -> Option<&[f64]> {
        self.strata.get(key).map(|s| s.items.as_slice())
    }

    /// Per-key `(stored items, true stream count)` view for estimation.
    pub fn strata_view(&self) -> impl Iterator<Item = (&str, &[f64], u64)> {
        self.strata
            .iter()
            .map(|(k, s)| (k.as_str(), s.items.as_slice(), s.stats.count()))
    }

    /// Admits one keyed item. New keys open a stratum sized at the average
    /// of the existing allocations, shrinking every allocation
    /// proportionally to keep the budget; existing keys run standard
    /// reservoir replacement within their stratum. Items are evicted only
    /// when the reservoir as a whole is over capacity, so a reservoir at
    /// least as large as the stream stores every item.
    pub fn admit(&mut self, key: &str, value: f64, rng: &mut impl Rng) {
        self.admissions += 1;
        if let Some(st) = self.strata.get_mut(key) {
            st.stats.update(value);
            let stored: usize = st.items.len();
            if stored < st.allocation {
                st.items.push(value);
            } else {
                let spare = self.stored_total() < self.total_size;
                let st = self.strata.get_mut(key).expect("stratum exists");
                if spare {
                    st.items.push(value);
                } else {
                    let seen = st.stats.count();
                    let j = rng.gen_range(0..seen) as usize;
                    if j < st.items.len() {
                        st.items[j] = value;
                    }
                }
            }
        } else {
            // Newcomer asks for the average existing allocation; everyone,
            // newcomer included, is then scaled back onto the budget.
            let init = if self.strata.is_empty() {
                self.total_size
            } else {
                let mut weights: Vec<f64> =
                    self.strata.values().map(|s| s.allocation as f64).collect();
                let ask = (self.allocation_total() as f64 / self.strata.len() as f64)
                    .round()
                    .max(1.0);
                weights.push(ask);
                let alloc = apportion(&weights, self.total_size);
                for (st, a) in self.strata.values_mut().zip(&alloc) {
                    st.allocation = *a;
                }
                *alloc.last().expect("newcomer allocation")
            };
            let mut stats = KeyStratumStats::default();
            stats.update(value);
            self.strata.insert(
                key.to_string(),
                Stratum {
                    stats,
                    items: vec![value],
                    allocation: init,
                },
            );
        }
        self.evict_overflow(rng);
        if self.admissions % self.realloc_every == 0 {
            self.reallocate(rng);
        }
    }

    /// Re-runs power allocation over the current stats. Over-allocated
    /// strata shed items lazily, as capacity pressure demands.
    pub fn reallocate(&mut self, rng: &mut impl Rng) {
        let stats = self.stats();
        let alloc = allocate(&stats, self.total_size);
        for (key, a) in alloc {
            if let Some(st) = self.strata.get_mut(&key) {
                st.allocation = a;
            }
        }
        self.evict_overflow(rng);
    }

    /// While over capacity, evicts uniformly at random from the stratum
    /// exceeding its allocation the most. Strata never drop below one item.
    fn evict_overflow(&mut self, rng: &mut impl Rng) {
        while self.stored_total() > self.total_size {
            let victim_key = self
                .strata
                .iter()
                .filter(|(_, s)| s.items.len() > s.allocation.max(1))
                .max_by(|a, b| {
                    let over_a = a.1.items.len() - a.1.allocation;
                    let over_b = b.1.items.len() - b.1.allocation;
                    over_a.cmp(&over_b).then(b.0.cmp(a.0))
                })
                .map(|(k, _)| k.clone());
            let Some(key) = victim_key else {
                break;
            };
            let st = self.strata.get_mut(&key).expect("victim exists");
            let idx = rng.gen_range(0..st.items.len());
            st.items.swap_remove(idx);
        }
    }
}

/// A partition's reservoir after the transform ran.
#[derive(Clone, Debug)]
pub struct PartitionReservoir {
    pub original_index: u64,
    pub state: ReservoirState,
}

/// Runs the upstream ops per partition and feeds the keyed outputs through a
/// per-partition reservoir of `reservoir_total / #partitions` slots. Returns
/// the sampled dataset (reservoir contents) plus the per-partition states.
pub fn asrs_transform(
    dataset: &PartitionedDataset,
    ops: &[TransformOp],
    reservoir_total: usize,
) -> Result<(PartitionedDataset, Vec<PartitionReservoir>)> {
    if dataset.load_config.item_rate < 1.0 {
        return Err(Error::Precondition(
            "stratified sampling needs item rate 1.0 so per-key stream counts stay exact".into(),
        ));
    }
    if ops.iter().any(|op| matches!(op, TransformOp::Sample(_))) {
        return Err(Error::Precondition(
            "stratified sampling rejects chains containing sample ops".into(),
        ));
    }
    let parts = dataset.partitions.len();
    let share = reservoir_total / parts.max(1);
    if share < 1 {
        return Err(Error::Precondition(format!(
            "reservoir size {reservoir_total} leaves no slots for {parts} partitions"
        )));
    }
    let seed = dataset.load_config.seed;

    let reservoirs: Vec<PartitionReservoir> = dataset
        .partitions
        .par_iter()
        .map(|p| {
            let values: Vec<Value> = p.records.iter().map(|r| r.payload.clone()).collect();
            let finals = apply_ops_values(values, ops, seed, p.original_index)?;
            let mut state = ReservoirState::new(share);
            let mut rng = rng::stream(seed, p.original_index, STAGE_RESERVOIR);
            for (i, v) in finals.iter().enumerate() {
                match v.as_pair() {
                    Some((k, x)) => state.admit(k, x, &mut rng),
                    None => {
                        return Err(Error::StageType {
                            stage: "asrs".into(),
                            detail: format!(
                                "record {i} is {} where a (key, value) pair is required",
                                v.kind()
                            ),
                        })
                    }
                }
            }
            Ok(PartitionReservoir {
                original_index: p.original_index,
                state,
            })
        })
        .collect::<Result<_>>()?;

    let partitions: Vec<Partition> = reservoirs
        .iter()
        .map(|r| {
            let mut records = Vec::with_capacity(r.state.stored_total());
            let mut stream_count = 0u64;
            for (key, items, seen) in r.state.strata_view() {
                stream_count += seen;
                for &v in items {
                    records.push(Record::pair(key, v));
                }
            }
            Partition {
                original_index: r.original_index,
                records,
                original_item_count: stream_count,
            }
        })
        .collect();

    let sampled = PartitionedDataset {
        partitions,
        origin_partition_count: dataset.origin_partition_count,
        load_config: dataset.load_config,
    };
    Ok((sampled, reservoirs))
}

/// Two-stage estimation over per-partition reservoirs: partitions are the
/// first stage with known `N` and `n`; within a partition the stored items
/// of a key approximate a simple random sample of its stream, whose true
/// size the reservoir observed exactly. A key in a single partition is
/// degenerate, as in the tree estimator.
pub fn stratified_estimate(
    reservoirs: &[PartitionReservoir],
    origin_partition_count: u64,
    spec: &ConfidenceSpec,
    final_stage: FinalStage,
) -> BTreeMap<String, KeyEstimate> {
    let n_chosen = reservoirs.len() as f64;
    let big_n = origin_partition_count as f64;

    struct PartEntry {
        estimated_total: f64,
        stream_count: f64,
        intra: f64,
        degenerate: bool,
    }
    let mut by_key: BTreeMap<String, Vec<PartEntry>> = BTreeMap::new();
    for r in reservoirs {
        for (key, items, seen) in r.state.strata_view() {
            if items.is_empty() {
                continue;
            }
            let m = items.len() as f64;
            let big_m = seen as f64;
            let total = big_m / m * items.iter().sum::<f64>();
            let intra = big_m * (big_m - m) * sample_variance(items) / m;
            by_key.entry(key.to_string()).or_default().push(PartEntry {
                estimated_total: total,
                stream_count: big_m,
                intra,
                degenerate: items.len() < 2 && (seen as usize) > items.len(),
            });
        }
    }

    by_key
        .into_iter()
        .map(|(key, entries)| {
            let c = entries.len() as f64;
            // Scale the participating-partition count by the known N/n.
            let n_hat = c * big_n / n_chosen;
            let totals: Vec<f64> = entries.iter().map(|e| e.estimated_total).collect();
            let tau_hat = n_hat / c * totals.iter().sum::<f64>();
            let inter = n_hat * (n_hat - c) * sample_variance(&totals) / c;
            let intra: f64 = entries.iter().map(|e| e.intra).sum();
            let v_hat = inter + n_hat / c * intra;
            let degenerate = (entries.len() < 2 && n_chosen < big_n)
                || entries.iter().any(|e| e.degenerate);
            let n_level1 = entries.len() as u64;

            let est = match final_stage {
                FinalStage::Sum => {
                    KeyEstimate::from_stats(key.clone(), tau_hat, v_hat, n_level1, degenerate, spec)
                }
                FinalStage::Mean => {
                    let count_hat =
                        n_hat / c * entries.iter().map(|e| e.stream_count).sum::<f64>();
                    KeyEstimate::from_stats(
                        key.clone(),
                        tau_hat / count_hat,
                        v_hat / (count_hat * count_hat),
                        n_level1,
                        degenerate,
                        spec,
                    )
                }
            };
            (key, est)
        })
        .collect()
}
