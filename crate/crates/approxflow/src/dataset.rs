//! Partitioned input loading with partition- and item-level sampling.
//!
//! Partition sampling is fixed-count simple random sampling without
//! replacement (`n = max(1, round(N * rate))`), so at least one partition
//! always survives and `n` is a fixed design quantity. Item sampling is
//! one-pass Bernoulli, so `m_i` is the realized count. `N` and every `M_i`
//! are the true unsampled counts, recorded exactly at load.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, STAGE_ITEMS, STAGE_PARTITIONS};

/// A record payload at some stage of a chain: a raw text line or token, or a
/// keyed numeric pair. The final aggregation stage requires pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Text(String),
    Pair(String, f64),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Text(_) => "text",
            Value::Pair(_, _) => "pair",
        }
    }

    pub fn as_pair(&self) -> Option<(&str, f64)> {
        match self {
            Value::Pair(k, v) => Some((k, *v)),
            Value::Text(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub payload: Value,
}

impl Record {
    pub fn text(s: impl Into<String>) -> Self {
        Record {
            payload: Value::Text(s.into()),
        }
    }

    pub fn pair(key: impl Into<String>, value: f64) -> Self {
        Record {
            payload: Value::Pair(key.into(), value),
        }
    }
}

/// Load-time sampling rates, RNG seed and confidence level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub partition_rate: f64,
    pub item_rate: f64,
    pub seed: u64,
    pub confidence: f64,
}

impl SamplingConfig {
    pub fn new(partition_rate: f64, item_rate: f64, seed: u64, confidence: f64) -> Result<Self> {
        if !(partition_rate > 0.0 && partition_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "partition rate must be in (0, 1], got {partition_rate}"
            )));
        }
        if !(item_rate > 0.0 && item_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "item rate must be in (0, 1], got {item_rate}"
            )));
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence must be in (0, 1), got {confidence}"
            )));
        }
        Ok(SamplingConfig {
            partition_rate,
            item_rate,
            seed,
            confidence,
        })
    }

    /// Rates (1, 1) with the given seed; used by exact runs.
    pub fn exact(seed: u64) -> Self {
        SamplingConfig {
            partition_rate: 1.0,
            item_rate: 1.0,
            seed,
            confidence: 0.95,
        }
    }
}

/// One loaded partition: the sampled records plus its origin bookkeeping.
#[derive(Clone, Debug)]
pub struct Partition {
    pub original_index: u64,
    pub records: Vec<Record>,
    /// True item count of the partition before item sampling (`M_i`).
    pub original_item_count: u64,
}

/// Immutable partitioned dataset, the unit of parallelism and of first-stage
/// cluster sampling.
#[derive(Clone, Debug)]
pub struct PartitionedDataset {
    pub partitions: Vec<Partition>,
    /// Partition count before partition sampling (`N`).
    pub origin_partition_count: u64,
    pub load_config: SamplingConfig,
}

impl PartitionedDataset {
    /// Number of chosen partitions (`n`).
    pub fn chosen_partition_count(&self) -> u64 {
        self.partitions.len() as u64
    }

    /// Realized partition sampling rate `n / N`; this is the exact inclusion
    /// probability of each partition under fixed-count selection.
    pub fn realized_partition_rate(&self) -> f64 {
        self.chosen_partition_count() as f64 / self.origin_partition_count as f64
    }

    /// Builds a dataset from in-memory partition contents, applying the
    /// configured partition and item sampling.
    pub fn from_value_partitions(parts: Vec<Vec<Value>>, cfg: SamplingConfig) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("no partitions".into()));
        }
        let total = parts.len();
        let mut rng = rng::stream(cfg.seed, 0, STAGE_PARTITIONS);
        let chosen = sample_partition_indices(total, cfg.partition_rate, &mut rng);

        let partitions: Vec<Partition> = chosen
            .into_par_iter()
            .map(|idx| {
                let values = &parts[idx];
                let mut item_rng = rng::stream(cfg.seed, idx as u64, STAGE_ITEMS);
                let (kept, _) = sample_items(values.iter().cloned(), cfg.item_rate, &mut item_rng);
                Partition {
                    original_index: idx as u64,
                    records: kept.into_iter().map(|payload| Record { payload }).collect(),
                    original_item_count: values.len() as u64,
                }
            })
            .collect();

        Ok(PartitionedDataset {
            partitions,
            origin_partition_count: total as u64,
            load_config: cfg,
        })
    }
}

/// Fixed-count SRS without replacement: `max(1, round(total * rate))` distinct
/// indices, sorted ascending.
pub fn sample_partition_indices(total: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    assert!(total >= 1, "total must be >= 1");
    assert!(rate > 0.0 && rate <= 1.0, "rate must be in (0, 1]");
    let n = ((total as f64 * rate).round() as usize).clamp(1, total);
    // Partial Fisher-Yates over the index range.
    let mut indices: Vec<usize> = (0..total).collect();
    for i in 0..n {
        let j = rng.gen_range(i..total);
        indices.swap(i, j);
    }
    indices.truncate(n);
    indices.sort_unstable();
    indices
}

/// One-pass Bernoulli selection preserving relative order. Returns the kept
/// items and the kept count.
pub fn sample_items<T>(
    items: impl IntoIterator<Item = T>,
    rate: f64,
    rng: &mut impl Rng,
) -> (Vec<T>, usize) {
    assert!(rate > 0.0 && rate <= 1.0, "rate must be in (0, 1]");
    if rate >= 1.0 {
        let kept: Vec<T> = items.into_iter().collect();
        let n = kept.len();
        return (kept, n);
    }
    let kept: Vec<T> = items
        .into_iter()
        .filter(|_| rng.gen_bool(rate))
        .collect();
    let n = kept.len();
    (kept, n)
}

/// Loads newline-delimited UTF-8 text from a file or directory into
/// `requested_partitions` partitions, then applies the configured sampling.
///
/// A directory maps one file per partition, merging files round-robin when
/// there are more files than partitions; when there are fewer files than
/// requested partitions the concatenated lines are split by near-equal line
/// ranges, as for a single file. The partition count is capped at the line
/// count so no partition starts empty.
pub fn load_text(
    path: impl AsRef<Path>,
    requested_partitions: usize,
    cfg: SamplingConfig,
) -> Result<PartitionedDataset> {
    let path = path.as_ref();
    if requested_partitions < 1 {
        return Err(Error::Precondition(
            "requested_partitions must be >= 1".into(),
        ));
    }
    let meta = std::fs::metadata(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;

    let parts: Vec<Vec<Value>> = if meta.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            // Sidecar convention: underscore- and dot-prefixed files are
            // metadata, not data.
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| !n.starts_with('_') && !n.starts_with('.'))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyInput(format!(
                "directory {} contains no files",
                path.display()
            )));
        }
        if files.len() >= requested_partitions {
            // Round-robin merge: partition i owns files i, i + P, i + 2P, ...
            let mut parts: Vec<Vec<Value>> = vec![Vec::new(); requested_partitions];
            for (i, file) in files.iter().enumerate() {
                let lines = read_lines(file)?;
                parts[i % requested_partitions].extend(lines.into_iter().map(Value::Text));
            }
            parts
        } else {
            let mut all = Vec::new();
            for file in &files {
                all.extend(read_lines(file)?);
            }
            split_lines(all, requested_partitions)
        }
    } else {
        split_lines(read_lines(path)?, requested_partitions)
    };

    let parts: Vec<Vec<Value>> = parts.into_iter().filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no lines", path.display())));
    }
    PartitionedDataset::from_value_partitions(parts, cfg)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(lines)
}

/// Splits lines into near-equal contiguous ranges. The partition count is
/// capped at the line count.
fn split_lines(lines: Vec<String>, requested: usize) -> Vec<Vec<Value>> {
    let total = lines.len();
    if total == 0 {
        return Vec::new();
    }
    let parts = requested.min(total);
    let mut out = Vec::with_capacity(parts);
    let mut iter = lines.into_iter();
    for i in 0..parts {
        let start = i * total / parts;
        let end = (i + 1) * total / parts;
        out.push(
            iter.by_ref()
                .take(end - start)
                .map(Value::Text)
                .collect::<Vec<_>>(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, lines: usize, prefix: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        for i in 0..lines {
            writeln!(f, "{prefix}{i}").unwrap();
        }
        p
    }

    #[test]
    fn load_full_rates_splits_evenly() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_file(dir.path(), "in.txt", 4, "l");
        let cfg = SamplingConfig::new(1.0, 1.0, 1, 0.95).unwrap();
        let ds = load_text(&file, 2, cfg).unwrap();
        assert_eq!(ds.origin_partition_count, 2);
        assert_eq!(ds.partitions.len(), 2);
        for p in &ds.partitions {
            assert_eq!(p.original_item_count, 2);
            assert_eq!(p.records.len(), 2);
        }
    }

    #[test]
    fn partition_sampling_is_fixed_count() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_file(dir.path(), "in.txt", 100, "l");
        let cfg = SamplingConfig::new(0.5, 1.0, 42, 0.95).unwrap();
        let ds = load_text(&file, 10, cfg).unwrap();
        assert_eq!(ds.origin_partition_count, 10);
        assert_eq!(ds.partitions.len(), 5);
        for p in &ds.partitions {
            assert_eq!(p.original_item_count, 10);
            assert_eq!(p.records.len(), 10);
        }
    }

    #[test]
    fn item_sampling_concentrates_around_rate() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_file(dir.path(), "in.txt", 100, "l");
        // Mean of total kept over seeds should sit within 3 sigma of the
        // binomial mean 50, sigma shrunk by sqrt(#seeds).
        let seeds = 200;
        let mut sum = 0usize;
        for seed in 0..seeds {
            let cfg = SamplingConfig::new(1.0, 0.5, seed, 0.95).unwrap();
            let ds = load_text(&file, 10, cfg).unwrap();
            assert_eq!(ds.partitions.len(), 10);
            sum += ds.partitions.iter().map(|p| p.records.len()).sum::<usize>();
        }
        let mean = sum as f64 / seeds as f64;
        let sigma = (100.0_f64 * 0.25).sqrt() / (seeds as f64).sqrt();
        assert!((mean - 50.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn sample_partition_indices_examples() {
        let mut rng = rng::stream(1, 0, STAGE_PARTITIONS);
        assert_eq!(sample_partition_indices(10, 1.0, &mut rng), (0..10).collect::<Vec<_>>());
        let five = sample_partition_indices(10, 0.5, &mut rng);
        assert_eq!(five.len(), 5);
        assert!(five.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_partition_indices(3, 0.01, &mut rng).len(), 1);
    }

    #[test]
    fn sample_items_examples() {
        let mut rng = rng::stream(2, 0, STAGE_ITEMS);
        let items: Vec<u32> = (0..10).collect();
        let (kept, n) = sample_items(items.clone(), 1.0, &mut rng);
        assert_eq!(kept, items);
        assert_eq!(n, 10);

        let (empty, n) = sample_items(Vec::<u32>::new(), 0.5, &mut rng);
        assert!(empty.is_empty());
        assert_eq!(n, 0);

        // Binomial concentration of the mean over seeds.
        let seeds = 50;
        let mut total = 0usize;
        for seed in 0..seeds {
            let mut rng = rng::stream(seed, 0, STAGE_ITEMS);
            let (kept, _) = sample_items(0..10_000u32, 0.3, &mut rng);
            assert!(kept.windows(2).all(|w| w[0] < w[1]), "order preserved");
            total += kept.len();
        }
        let mean = total as f64 / seeds as f64;
        let sigma = (10_000.0_f64 * 0.3 * 0.7).sqrt() / (seeds as f64).sqrt();
        assert!((mean - 3000.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let file = write_file(dir.path(), "in.txt", 60, "l");
        let cfg = SamplingConfig::new(0.6, 0.7, 9, 0.9).unwrap();
        let a = load_text(&file, 6, cfg).unwrap();
        let b = load_text(&file, 6, cfg).unwrap();
        assert_eq!(a.partitions.len(), b.partitions.len());
        for (pa, pb) in a.partitions.iter().zip(&b.partitions) {
            assert_eq!(pa.original_index, pb.original_index);
            assert_eq!(pa.records, pb.records);
        }
    }

    #[test]
    fn directory_merges_round_robin() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_file(dir.path(), &format!("f{i}.txt"), 2, &format!("f{i}-"));
        }
        let cfg = SamplingConfig::new(1.0, 1.0, 0, 0.95).unwrap();
        let ds = load_text(dir.path(), 2, cfg).unwrap();
        assert_eq!(ds.partitions.len(), 2);
        // Partition 0 owns f0 and f2, partition 1 owns f1 and f3.
        assert_eq!(
            ds.partitions[0].records[0].payload,
            Value::Text("f0-0".into())
        );
        assert_eq!(
            ds.partitions[0].records[2].payload,
            Value::Text("f2-0".into())
        );
        assert_eq!(
            ds.partitions[1].records[2].payload,
            Value::Text("f3-0".into())
        );
    }

    #[test]
    fn missing_and_empty_inputs_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SamplingConfig::new(1.0, 1.0, 0, 0.95).unwrap();
        assert!(matches!(
            load_text(dir.path().join("absent.txt"), 2, cfg),
            Err(Error::Io { .. })
        ));
        let empty = write_file(dir.path(), "empty.txt", 0, "x");
        assert!(matches!(
            load_text(&empty, 2, cfg),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn config_bounds_are_enforced() {
        assert!(SamplingConfig::new(0.0, 1.0, 0, 0.95).is_err());
        assert!(SamplingConfig::new(1.0, 1.1, 0, 0.95).is_err());
        assert!(SamplingConfig::new(1.0, 1.0, 0, 1.0).is_err());
    }
}
