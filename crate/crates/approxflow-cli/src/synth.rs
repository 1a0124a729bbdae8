//! Deterministic synthetic data generation.
//!
//! Emits `key,value` text files (one per partition) plus a manifest
//! recording the generator parameters and the exact per-key ground truth,
//! so downstream checks know the true sums without a second pass.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// RNG stage index for the generator (disjoint from engine stages).
const STAGE_SYNTH: u64 = 1 << 42;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KeyDist {
    Uniform,
    Zipf(f64),
}

impl KeyDist {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("uniform") {
            return Ok(KeyDist::Uniform);
        }
        let body = s
            .strip_prefix("zipf:")
            .or_else(|| s.strip_prefix("zipf(").and_then(|r| r.strip_suffix(')')));
        if let Some(exp) = body {
            let exponent: f64 = exp
                .parse()
                .map_err(|_| CliError::Usage(format!("bad zipf exponent `{exp}`")))?;
            if exponent <= 0.0 {
                return Err(CliError::Usage("zipf exponent must be positive".into()));
            }
            return Ok(KeyDist::Zipf(exponent));
        }
        Err(CliError::Usage(format!(
            "unknown key distribution `{s}` (expected uniform or zipf:S)"
        )))
    }

    fn describe(&self) -> String {
        match self {
            KeyDist::Uniform => "uniform".into(),
            KeyDist::Zipf(s) => format!("zipf:{s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueDist {
    Uniform(f64, f64),
    Normal(f64, f64),
    Constant(f64),
}

impl ValueDist {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("uniform") {
            return Ok(ValueDist::Uniform(0.0, 1.0));
        }
        if let Some(rest) = s.strip_prefix("uniform:") {
            let (lo, hi) = rest
                .split_once(',')
                .ok_or_else(|| CliError::Usage("expected uniform:lo,hi".into()))?;
            let lo: f64 = lo.trim().parse().map_err(|_| CliError::Usage("bad lo".into()))?;
            let hi: f64 = hi.trim().parse().map_err(|_| CliError::Usage("bad hi".into()))?;
            if !(hi > lo) {
                return Err(CliError::Usage("uniform needs hi > lo".into()));
            }
            return Ok(ValueDist::Uniform(lo, hi));
        }
        if let Some(rest) = s.strip_prefix("normal:") {
            let (mu, sigma) = rest
                .split_once(',')
                .ok_or_else(|| CliError::Usage("expected normal:mu,sigma".into()))?;
            let mu: f64 = mu.trim().parse().map_err(|_| CliError::Usage("bad mu".into()))?;
            let sigma: f64 = sigma
                .trim()
                .parse()
                .map_err(|_| CliError::Usage("bad sigma".into()))?;
            if sigma < 0.0 {
                return Err(CliError::Usage("sigma must be non-negative".into()));
            }
            return Ok(ValueDist::Normal(mu, sigma));
        }
        if let Some(c) = s.strip_prefix("constant:") {
            let c: f64 = c
                .trim()
                .parse()
                .map_err(|_| CliError::Usage("bad constant".into()))?;
            return Ok(ValueDist::Constant(c));
        }
        Err(CliError::Usage(format!(
            "unknown value distribution `{s}` (expected uniform[:lo,hi], normal:mu,sigma or constant:c)"
        )))
    }

    fn describe(&self) -> String {
        match self {
            ValueDist::Uniform(lo, hi) => format!("uniform:{lo},{hi}"),
            ValueDist::Normal(mu, sigma) => format!("normal:{mu},{sigma}"),
            ValueDist::Constant(c) => format!("constant:{c}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthParams {
    pub keys: usize,
    pub partitions: usize,
    pub items_per_partition: usize,
    pub key_dist: KeyDist,
    pub value_dist: ValueDist,
    pub seed: u64,
}

/// Generator parameters plus exact ground truth, written alongside the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub keys: usize,
    pub partitions: usize,
    pub items_per_partition: usize,
    pub distribution: String,
    pub value_dist: String,
    pub seed: u64,
    pub true_counts: BTreeMap<String, u64>,
    pub true_sums: BTreeMap<String, f64>,
}

/// Normalized key-pick weights by rank; monotone non-increasing.
pub fn key_weights(dist: KeyDist, keys: usize) -> Vec<f64> {
    let raw: Vec<f64> = match dist {
        KeyDist::Uniform => vec![1.0; keys],
        KeyDist::Zipf(s) => (1..=keys).map(|r| (r as f64).powf(-s)).collect(),
    };
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn key_name(rank: usize, keys: usize) -> String {
    let width = (keys.max(2) - 1).to_string().len();
    format!("key{rank:0width$}")
}

/// Generates the partition line sets and the manifest, deterministically in
/// the seed.
pub fn generate(params: &SynthParams) -> Result<(Vec<Vec<String>>, Manifest), CliError> {
    if params.keys < 1 || params.partitions < 1 || params.items_per_partition < 1 {
        return Err(CliError::Usage(
            "keys, partitions and items-per-partition must all be >= 1".into(),
        ));
    }
    let weights = key_weights(params.key_dist, params.keys);
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();

    let mut true_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut true_sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut parts = Vec::with_capacity(params.partitions);
    for p in 0..params.partitions {
        let mut rng = approxflow::rng::stream(params.seed, p as u64, STAGE_SYNTH);
        let mut lines = Vec::with_capacity(params.items_per_partition);
        for _ in 0..params.items_per_partition {
            let u: f64 = rng.gen();
            let rank = cumulative.partition_point(|&c| c < u).min(params.keys - 1);
            let key = key_name(rank, params.keys);
            let value = match params.value_dist {
                ValueDist::Uniform(lo, hi) => rng.gen_range(lo..hi),
                ValueDist::Normal(mu, sigma) => {
                    if sigma == 0.0 {
                        mu
                    } else {
                        Normal::new(mu, sigma).unwrap().sample(&mut rng)
                    }
                }
                ValueDist::Constant(c) => c,
            };
            *true_counts.entry(key.clone()).or_insert(0) += 1;
            *true_sums.entry(key.clone()).or_insert(0.0) += value;
            lines.push(format!("{key},{value}"));
        }
        parts.push(lines);
    }

    let manifest = Manifest {
        keys: params.keys,
        partitions: params.partitions,
        items_per_partition: params.items_per_partition,
        distribution: params.key_dist.describe(),
        value_dist: params.value_dist.describe(),
        seed: params.seed,
        true_counts,
        true_sums,
    };
    Ok((parts, manifest))
}

/// Writes one `part-NNNNN.txt` per partition plus `_manifest.json`. The
/// underscore prefix marks the manifest as a sidecar the loader skips.
pub fn write_to_dir(params: &SynthParams, dir: &Path) -> Result<Manifest, CliError> {
    let (parts, manifest) = generate(params)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (i, lines) in parts.iter().enumerate() {
        let path = dir.join(format!("part-{i:05}.txt"));
        let mut f = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        for line in lines {
            writeln!(f, "{line}").map_err(|e| CliError::io(&path, e))?;
        }
    }
    let manifest_path = dir.join("_manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, json).map_err(|e| CliError::io(&manifest_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_produce_identical_lines() {
        let params = SynthParams {
            keys: 1,
            partitions: 2,
            items_per_partition: 3,
            key_dist: KeyDist::Uniform,
            value_dist: ValueDist::Constant(1.0),
            seed: 0,
        };
        let (parts, manifest) = generate(&params).unwrap();
        assert_eq!(parts.len(), 2);
        for p in &parts {
            assert_eq!(p.len(), 3);
            for line in p {
                assert_eq!(line, "key0,1");
            }
        }
        assert_eq!(manifest.true_counts["key0"], 6);
        assert_eq!(manifest.true_sums["key0"], 6.0);
    }

    #[test]
    fn zipf_weights_are_monotone_nonincreasing() {
        let w = key_weights(KeyDist::Zipf(1.1), 100);
        assert_eq!(w.len(), 100);
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SynthParams {
            keys: 10,
            partitions: 3,
            items_per_partition: 50,
            key_dist: KeyDist::Zipf(1.2),
            value_dist: ValueDist::Uniform(0.0, 1.0),
            seed: 9,
        };
        let (a, ma) = generate(&params).unwrap();
        let (b, mb) = generate(&params).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.true_sums, mb.true_sums);
    }

    #[test]
    fn dist_parsing() {
        assert_eq!(KeyDist::parse("uniform").unwrap(), KeyDist::Uniform);
        assert_eq!(KeyDist::parse("zipf:1.1").unwrap(), KeyDist::Zipf(1.1));
        assert_eq!(KeyDist::parse("zipf(2)").unwrap(), KeyDist::Zipf(2.0));
        assert!(KeyDist::parse("zipf:-1").is_err());
        assert!(KeyDist::parse("pareto").is_err());

        assert_eq!(
            ValueDist::parse("uniform").unwrap(),
            ValueDist::Uniform(0.0, 1.0)
        );
        assert_eq!(
            ValueDist::parse("normal:2,0.5").unwrap(),
            ValueDist::Normal(2.0, 0.5)
        );
        assert_eq!(
            ValueDist::parse("constant:3").unwrap(),
            ValueDist::Constant(3.0)
        );
        assert!(ValueDist::parse("uniform:2,1").is_err());
    }
}
