//! Transform chains and their execution over a partitioned dataset.
//!
//! Execution runs per partition in parallel: each transform is applied to the
//! partition's frontier and fed to the provenance builder, then per-partition
//! statistics reduce in parallel and merge sequentially at the root. With
//! rates (1, 1) and no sample op the result degenerates to the exact
//! aggregates with zero variance.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::{PartitionedDataset, Value};
use crate::error::{Error, Result};
use crate::estimator::{self, ConfidenceSpec, KeyEstimate};
use crate::provenance::{self, TransformKind};
use crate::rng::{self, STAGE_OP_BASE};

pub type MapFn = Arc<dyn Fn(&Value) -> Value + Send + Sync>;
pub type FlatMapFn = Arc<dyn Fn(&Value) -> Vec<Value> + Send + Sync>;
pub type ValueFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type PredicateFn = Arc<dyn Fn(&Value) -> bool + Send + Sync>;

/// One transform of a chain. Functions must be pure: they run once per
/// record on parallel workers and determinism depends on it.
#[derive(Clone)]
pub enum TransformOp {
    Map(MapFn),
    FlatMap(FlatMapFn),
    MapValues(ValueFn),
    Filter(PredicateFn),
    Sample(f64),
}

impl TransformOp {
    pub fn map(f: impl Fn(&Value) -> Value + Send + Sync + 'static) -> Self {
        TransformOp::Map(Arc::new(f))
    }

    pub fn flat_map(f: impl Fn(&Value) -> Vec<Value> + Send + Sync + 'static) -> Self {
        TransformOp::FlatMap(Arc::new(f))
    }

    pub fn map_values(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TransformOp::MapValues(Arc::new(f))
    }

    pub fn filter(f: impl Fn(&Value) -> bool + Send + Sync + 'static) -> Self {
        TransformOp::Filter(Arc::new(f))
    }

    /// Sample rates must be strictly inside (0, 1).
    pub fn sample(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sample rate must be in (0, 1), got {rate}"
            )));
        }
        Ok(TransformOp::Sample(rate))
    }

    pub fn kind(&self) -> TransformKind {
        match self {
            TransformOp::Map(_) => TransformKind::Map,
            TransformOp::FlatMap(_) => TransformKind::FlatMap,
            TransformOp::MapValues(_) => TransformKind::MapValues,
            TransformOp::Filter(_) => TransformKind::Filter,
            TransformOp::Sample(rate) => TransformKind::Sample(*rate),
        }
    }
}

impl fmt::Debug for TransformOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().name())
    }
}

/// Keyed aggregation closing a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalStage {
    Sum,
    Mean,
}

/// An ordered transform chain ending in a keyed aggregation. The last op's
/// output records must be `(key, value)` pairs.
#[derive(Clone, Debug)]
pub struct TransformChain {
    pub ops: Vec<TransformOp>,
    pub final_stage: FinalStage,
}

impl TransformChain {
    pub fn new(ops: Vec<TransformOp>, final_stage: FinalStage) -> Self {
        TransformChain { ops, final_stage }
    }

    fn has_sample(&self) -> bool {
        self.ops.iter().any(|op| matches!(op, TransformOp::Sample(_)))
    }
}

fn op_label(op: &TransformOp, index: usize) -> String {
    format!("{}#{index}", op.kind().name())
}

/// Applies one op to the frontier, returning one output group per input
/// record in input order.
fn apply_op_grouped(
    op: &TransformOp,
    index: usize,
    inputs: &[Value],
    rng: &mut impl rand::Rng,
) -> Result<Vec<Vec<Value>>> {
    match op {
        TransformOp::Map(f) => Ok(inputs.iter().map(|v| vec![f(v)]).collect()),
        TransformOp::FlatMap(f) => Ok(inputs.iter().map(|v| f(v)).collect()),
        TransformOp::MapValues(f) => inputs
            .iter()
            .map(|v| match v {
                Value::Pair(k, x) => Ok(vec![Value::Pair(k.clone(), f(*x))]),
                other => Err(Error::StageType {
                    stage: op_label(op, index),
                    detail: format!(
                        "mapValues requires (key, value) records, found {}",
                        other.kind()
                    ),
                }),
            })
            .collect(),
        TransformOp::Filter(pred) => Ok(inputs
            .iter()
            .map(|v| if pred(v) { vec![v.clone()] } else { vec![] })
            .collect()),
        TransformOp::Sample(rate) => Ok(inputs
            .iter()
            .map(|v| {
                if rng.gen_bool(*rate) {
                    vec![v.clone()]
                } else {
                    vec![]
                }
            })
            .collect()),
    }
}

/// Applies a chain's ops to plain values without provenance tracking.
pub(crate) fn apply_ops_values(
    mut values: Vec<Value>,
    ops: &[TransformOp],
    seed: u64,
    partition: u64,
) -> Result<Vec<Value>> {
    for (i, op) in ops.iter().enumerate() {
        let mut rng = rng::stream(seed, partition, STAGE_OP_BASE + i as u64);
        let groups = apply_op_grouped(op, i, &values, &mut rng)?;
        values = groups.into_iter().flatten().collect();
    }
    Ok(values)
}

/// Run-level metadata attached to every aggregation result.
#[derive(Clone, Debug)]
pub struct RunMetadata {
    pub partition_rate: f64,
    pub item_rate: f64,
    pub realized_partition_rate: f64,
    pub seed: u64,
    pub confidence: f64,
    pub depth: usize,
    pub level_rates: Vec<f64>,
    pub level_counts: Vec<u64>,
    pub provenance_shape: String,
    pub origin_partition_count: u64,
    pub chosen_partition_count: u64,
}

/// Per-key estimates plus run metadata.
#[derive(Clone, Debug)]
pub struct AggregationResult {
    pub per_key: BTreeMap<String, KeyEstimate>,
    pub keys_present: u64,
    pub metadata: RunMetadata,
}

/// Executes the chain with provenance tracking and per-key error bounds.
pub fn execute(dataset: &PartitionedDataset, chain: &TransformChain) -> Result<AggregationResult> {
    let cfg = dataset.load_config;
    let spec = ConfidenceSpec::new(cfg.confidence)?;
    let realized_p1 = dataset.realized_partition_rate();

    let inputs: Vec<(u64, Vec<Value>)> = dataset
        .partitions
        .iter()
        .map(|p| {
            (
                p.original_index,
                p.records.iter().map(|r| r.payload.clone()).collect(),
            )
        })
        .collect();
    let builders = provenance::init_tree(inputs, realized_p1, cfg.item_rate)?;

    let built = builders
        .into_par_iter()
        .map(|mut b| {
            for (i, op) in chain.ops.iter().enumerate() {
                let inputs = b.frontier_values();
                let mut rng = rng::stream(cfg.seed, b.original_index(), STAGE_OP_BASE + i as u64);
                let groups = apply_op_grouped(op, i, &inputs, &mut rng)?;
                b.on_transform(op.kind(), groups)?;
            }
            if b.frontier_len() == 0 {
                log::warn!(
                    "partition {} retained no records after the chain; it is kept empty",
                    b.original_index()
                );
            }
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;

    let tree = provenance::finalize_tree(built, dataset.origin_partition_count).map_err(|e| {
        match e {
            Error::StageType { detail, .. } => Error::StageType {
                stage: chain
                    .ops
                    .last()
                    .map(|op| op_label(op, chain.ops.len() - 1))
                    .unwrap_or_else(|| "load".into()),
                detail,
            },
            other => other,
        }
    })?;

    let stats = estimator::compute_tree_stats(&tree);
    let mut per_key = BTreeMap::new();
    for (key, stat) in stats {
        let est = match chain.final_stage {
            FinalStage::Sum => KeyEstimate::from_stats(
                key.clone(),
                stat.sum_tau,
                stat.sum_var,
                stat.n_level1,
                stat.degenerate,
                &spec,
            ),
            FinalStage::Mean => {
                // Estimated mean is the estimated sum over the estimated
                // per-key population, with plug-in variance.
                let pop = stat.count_tau;
                KeyEstimate::from_stats(
                    key.clone(),
                    stat.sum_tau / pop,
                    stat.sum_var / (pop * pop),
                    stat.n_level1,
                    stat.degenerate,
                    &spec,
                )
            }
        };
        per_key.insert(key, est);
    }

    let keys_present = per_key.len() as u64;
    let metadata = RunMetadata {
        partition_rate: cfg.partition_rate,
        item_rate: cfg.item_rate,
        realized_partition_rate: realized_p1,
        seed: cfg.seed,
        confidence: cfg.confidence,
        depth: tree.depth(),
        level_rates: tree.level_rates.0.clone(),
        level_counts: tree.level_counts(),
        provenance_shape: tree.render_shape(),
        origin_partition_count: dataset.origin_partition_count,
        chosen_partition_count: tree.chosen_partition_count(),
    };
    Ok(AggregationResult {
        per_key,
        keys_present,
        metadata,
    })
}

/// Ground-truth path: exact per-key aggregates, no provenance overhead.
/// Requires a dataset loaded at rates (1, 1) and a chain without sample ops.
pub fn execute_exact(
    dataset: &PartitionedDataset,
    chain: &TransformChain,
) -> Result<BTreeMap<String, f64>> {
    let cfg = dataset.load_config;
    if cfg.partition_rate < 1.0 || cfg.item_rate < 1.0 {
        return Err(Error::Precondition(
            "exact execution needs a dataset loaded at rates (1, 1)".into(),
        ));
    }
    if chain.has_sample() {
        return Err(Error::Precondition(
            "exact execution rejects chains containing sample ops".into(),
        ));
    }

    let per_partition: Vec<BTreeMap<String, (f64, u64)>> = dataset
        .partitions
        .par_iter()
        .map(|p| {
            let values: Vec<Value> = p.records.iter().map(|r| r.payload.clone()).collect();
            let finals = apply_ops_values(values, &chain.ops, cfg.seed, p.original_index)?;
            let mut acc: BTreeMap<String, (f64, u64)> = BTreeMap::new();
            for (i, v) in finals.iter().enumerate() {
                match v.as_pair() {
                    Some((k, x)) => {
                        let e = acc.entry(k.to_string()).or_insert((0.0, 0));
                        e.0 += x;
                        e.1 += 1;
                    }
                    None => {
                        let stage = chain
                            .ops
                            .last()
                            .map(|op| op_label(op, chain.ops.len() - 1))
                            .unwrap_or_else(|| "load".into());
                        return Err(Error::StageType {
                            stage,
                            detail: format!(
                                "record {i} is {} where a (key, value) pair is required",
                                v.kind()
                            ),
                        });
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut merged: BTreeMap<String, (f64, u64)> = BTreeMap::new();
    for part in per_partition {
        for (k, (s, c)) in part {
            let e = merged.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += c;
        }
    }
    Ok(merged
        .into_iter()
        .map(|(k, (sum, count))| {
            let v = match chain.final_stage {
                FinalStage::Sum => sum,
                FinalStage::Mean => sum / count as f64,
            };
            (k, v)
        })
        .collect())
}

fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

fn text_of(v: &Value) -> String {
    match v {
        Value::Text(s) => s.clone(),
        Value::Pair(k, x) => format!("{k},{x}"),
    }
}

/// Built-in chains exposed through the CLI.
///
/// - `wordcount`: flatMap(tokenize) -> map(word -> (word, 1)) -> sum
/// - `cooccur`: map(normalize comma-separated tags) -> flatMap(unordered tag
///   pairs `a|b`) -> map(pair -> (pair, 1)) -> sum
/// - `group-sum`: map(parse `src,dst,count` -> (`src|dst`, count)) -> sum
/// - `synth`: map(parse `key,value`) -> sum or mean
///
/// Count pipelines aggregate with sum only; `synth` honors the requested
/// final stage.
pub fn builtin_pipeline(name: &str, final_stage: FinalStage) -> Result<TransformChain> {
    let require_sum = |chain: TransformChain| -> Result<TransformChain> {
        if final_stage == FinalStage::Mean {
            return Err(Error::InvalidConfig(format!(
                "pipeline `{name}` aggregates with sum"
            )));
        }
        Ok(chain)
    };
    match name {
        "wordcount" => require_sum(TransformChain::new(
            vec![
                TransformOp::flat_map(|v| {
                    tokenize(&text_of(v)).into_iter().map(Value::Text).collect()
                }),
                TransformOp::map(|v| Value::Pair(text_of(v), 1.0)),
            ],
            FinalStage::Sum,
        )),
        "cooccur" => require_sum(TransformChain::new(
            vec![
                TransformOp::map(|v| {
                    let mut tags: Vec<String> = text_of(v)
                        .split(',')
                        .map(|t| t.trim().to_string())
                        .filter(|t| !t.is_empty())
                        .collect();
                    tags.sort();
                    tags.dedup();
                    Value::Text(tags.join(";"))
                }),
                TransformOp::flat_map(|v| {
                    let tags: Vec<&str> = match v {
                        Value::Text(s) if !s.is_empty() => s.split(';').collect(),
                        _ => Vec::new(),
                    };
                    let mut out = Vec::new();
                    for i in 0..tags.len() {
                        for j in (i + 1)..tags.len() {
                            out.push(Value::Text(format!("{}|{}", tags[i], tags[j])));
                        }
                    }
                    out
                }),
                TransformOp::map(|v| Value::Pair(text_of(v), 1.0)),
            ],
            FinalStage::Sum,
        )),
        "group-sum" => require_sum(TransformChain::new(
            vec![TransformOp::map(|v| {
                let line = text_of(v);
                let mut parts = line.splitn(3, ',');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(src), Some(dst), Some(count)) => Value::Pair(
                        format!("{}|{}", src.trim(), dst.trim()),
                        count.trim().parse::<f64>().unwrap_or(0.0),
                    ),
                    _ => Value::Pair(line.trim().to_string(), 0.0),
                }
            })],
            FinalStage::Sum,
        )),
        "synth" => Ok(TransformChain::new(
            vec![TransformOp::map(|v| {
                let line = text_of(v);
                match line.split_once(',') {
                    Some((k, x)) => {
                        Value::Pair(k.trim().to_string(), x.trim().parse::<f64>().unwrap_or(0.0))
                    }
                    None => Value::Pair(line.trim().to_string(), 0.0),
                }
            })],
            final_stage,
        )),
        other => Err(Error::InvalidConfig(format!("unknown pipeline `{other}`"))),
    }
}
