//! Stratified-path statistics: confidence-interval coverage of the
//! reservoir estimator against a known ground truth.

use approxflow::asrs::{asrs_transform, stratified_estimate};
use approxflow::{ConfidenceSpec, FinalStage, PartitionedDataset, SamplingConfig, Value};
use rand::Rng;
use rayon::prelude::*;

#[test]
fn reservoir_estimates_cover_the_truth() {
    // Ten partitions of 1000 Uniform(0, 1) values for one key; each
    // partition keeps a reservoir of 100. Coverage of the 95% interval over
    // many independent reservoirs should sit near nominal.
    let base: Vec<Vec<Value>> = (0..10)
        .map(|p| {
            let mut rng = approxflow::rng::stream(0x57A7, p, 0);
            (0..1000)
                .map(|_| Value::Pair("k".into(), rng.gen::<f64>()))
                .collect()
        })
        .collect();
    let true_sum: f64 = base
        .iter()
        .flatten()
        .map(|v| v.as_pair().unwrap().1)
        .sum();
    let spec = ConfidenceSpec::new(0.95).unwrap();

    let seeds = 600u64;
    let covered: usize = (0..seeds)
        .into_par_iter()
        .filter(|&seed| {
            let cfg = SamplingConfig::new(1.0, 1.0, seed, 0.95).unwrap();
            let ds = PartitionedDataset::from_value_partitions(base.clone(), cfg).unwrap();
            let (_, reservoirs) = asrs_transform(&ds, &[], 1000).unwrap();
            let est = stratified_estimate(
                &reservoirs,
                ds.origin_partition_count,
                &spec,
                FinalStage::Sum,
            );
            let k = &est["k"];
            assert_eq!(k.n_level1, 10);
            k.ci_lo <= true_sum && true_sum <= k.ci_hi
        })
        .count();

    let coverage = covered as f64 / seeds as f64;
    assert!(
        (0.91..=0.98).contains(&coverage),
        "stratified coverage {coverage} outside [0.91, 0.98]"
    );
}

#[test]
fn full_reservoir_with_full_partitions_is_exact() {
    let base: Vec<Vec<Value>> = (0..4)
        .map(|p| {
            (0..50)
                .map(|i| Value::Pair(format!("k{}", i % 3), (p * 50 + i) as f64))
                .collect()
        })
        .collect();
    let truth: std::collections::BTreeMap<String, f64> =
        base.iter().flatten().fold(Default::default(), |mut acc, v| {
            let (k, x) = v.as_pair().unwrap();
            *acc.entry(k.to_string()).or_insert(0.0) += x;
            acc
        });
    let ds =
        PartitionedDataset::from_value_partitions(base, SamplingConfig::exact(3)).unwrap();
    let (_, reservoirs) = asrs_transform(&ds, &[], 10_000).unwrap();
    let spec = ConfidenceSpec::new(0.95).unwrap();
    let est = stratified_estimate(&reservoirs, 4, &spec, FinalStage::Sum);
    for (key, truth) in truth {
        let e = &est[&key];
        assert_eq!(e.tau_hat, truth, "{key}");
        assert_eq!(e.epsilon, 0.0, "{key}");
    }
}
