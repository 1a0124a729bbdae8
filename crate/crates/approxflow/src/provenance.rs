//! Data provenance tree construction.
//!
//! Sampling inside a transform chain induces a multi-stage cluster sample of
//! the final output. The tree records that clustering: the root is level 0,
//! chosen partitions are level 1, loaded items are level 2, and each flatMap
//! executed while the current frontier is effectively sampled (rate < 1)
//! closes the frontier level and opens a new one below it. Map, mapValues,
//! filter and flatMap-at-rate-1 replace the frontier in place; sample thins
//! the frontier and multiplies into the frontier level's rate.

use crate::dataset::Value;
use crate::error::{Error, Result};

/// Per-level sampling rates, `rate_1` (partitions) through `rate_d` (leaves).
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRates(pub Vec<f64>);

impl LevelRates {
    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

/// Operator shape as seen by the tree builder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformKind {
    Map,
    FlatMap,
    MapValues,
    Filter,
    Sample(f64),
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Map => "map",
            TransformKind::FlatMap => "flatMap",
            TransformKind::MapValues => "mapValues",
            TransformKind::Filter => "filter",
            TransformKind::Sample(_) => "sample",
        }
    }
}

/// Finalized tree node. Leaves sit only at the maximal level `d` and carry
/// the output key/value; internal nodes carry only their children.
#[derive(Clone, Debug)]
pub enum ProvNode {
    Internal { children: Vec<ProvNode> },
    Leaf { key: String, value: f64 },
}

/// The subtree rooted at one partition node (sans the partition node itself:
/// `groups` are its level-2 children).
#[derive(Clone, Debug)]
pub struct PartitionSubtree {
    pub original_index: u64,
    pub groups: Vec<ProvNode>,
}

/// Finalized provenance tree: sequential top (root and partition level) plus
/// the per-partition subtrees.
#[derive(Clone, Debug)]
pub struct ProvenanceTree {
    pub origin_partition_count: u64,
    pub partitions: Vec<PartitionSubtree>,
    pub level_rates: LevelRates,
}

impl ProvenanceTree {
    pub fn depth(&self) -> usize {
        self.level_rates.depth()
    }

    pub fn chosen_partition_count(&self) -> u64 {
        self.partitions.len() as u64
    }

    /// Node count per level, root included.
    pub fn level_counts(&self) -> Vec<u64> {
        let d = self.depth();
        let mut counts = vec![0u64; d + 1];
        counts[0] = 1;
        counts[1] = self.partitions.len() as u64;
        for p in &self.partitions {
            for g in &p.groups {
                count_nodes(g, 2, &mut counts);
            }
        }
        counts
    }

    /// Textual tree-shape rendering used by the debug dump.
    pub fn render_shape(&self) -> String {
        use std::fmt::Write;
        let counts = self.level_counts();
        let d = self.depth();
        let mut out = String::new();
        writeln!(out, "provenance tree: d={d}").unwrap();
        writeln!(out, "  level 0: 1 node (root)").unwrap();
        for (level, &count) in counts.iter().enumerate().skip(1) {
            let rate = self.level_rates.0[level - 1];
            let label = if level == 1 {
                " (partitions)"
            } else if level == d {
                " (leaves)"
            } else {
                ""
            };
            writeln!(out, "  level {level}: {count} nodes{label}, rate {rate:.4}").unwrap();
        }
        out
    }
}

fn count_nodes(node: &ProvNode, level: usize, counts: &mut [u64]) {
    counts[level] += 1;
    if let ProvNode::Internal { children } = node {
        for c in children {
            count_nodes(c, level + 1, counts);
        }
    }
}

/// Tree node under construction; leaves still carry stage values.
#[derive(Clone, Debug)]
enum BuildNode {
    Internal(Vec<BuildNode>),
    Leaf(Value),
}

/// Builds the subtree of one partition as each transform executes.
///
/// `rates` evolves identically across all builders of a run: it starts as
/// `[partition_rate, item_rate]`, sample ops multiply into the last entry,
/// and a level-adding flatMap pushes a fresh 1.0.
#[derive(Clone, Debug)]
pub struct SubtreeBuilder {
    original_index: u64,
    groups: Vec<BuildNode>,
    rates: Vec<f64>,
}

/// Creates per-partition builders for the chosen partitions, with item leaves
/// at level 2. Fails when no partition was selected.
pub fn init_tree(
    partitions: Vec<(u64, Vec<Value>)>,
    partition_rate: f64,
    item_rate: f64,
) -> Result<Vec<SubtreeBuilder>> {
    if partitions.is_empty() {
        return Err(Error::Precondition(
            "provenance tree needs at least one selected partition".into(),
        ));
    }
    Ok(partitions
        .into_iter()
        .map(|(original_index, items)| SubtreeBuilder {
            original_index,
            groups: items.into_iter().map(BuildNode::Leaf).collect(),
            rates: vec![partition_rate, item_rate],
        })
        .collect())
}

impl SubtreeBuilder {
    pub fn original_index(&self) -> u64 {
        self.original_index
    }

    /// Number of sampling stages so far.
    pub fn depth(&self) -> usize {
        self.rates.len()
    }

    pub fn level_rates(&self) -> &[f64] {
        &self.rates
    }

    /// Current frontier values in stable left-to-right order.
    pub fn frontier_values(&self) -> Vec<Value> {
        let mut out = Vec::new();
        fn collect(nodes: &[BuildNode], out: &mut Vec<Value>) {
            for n in nodes {
                match n {
                    BuildNode::Leaf(v) => out.push(v.clone()),
                    BuildNode::Internal(kids) => collect(kids, out),
                }
            }
        }
        collect(&self.groups, &mut out);
        out
    }

    pub fn frontier_len(&self) -> usize {
        fn count(nodes: &[BuildNode]) -> usize {
            nodes
                .iter()
                .map(|n| match n {
                    BuildNode::Leaf(_) => 1,
                    BuildNode::Internal(kids) => count(kids),
                })
                .sum()
        }
        count(&self.groups)
    }

    /// Applies one transform's outputs to the tree. `outputs[i]` holds the
    /// records produced by frontier element `i` in frontier order.
    pub fn on_transform(&mut self, kind: TransformKind, outputs: Vec<Vec<Value>>) -> Result<()> {
        let frontier = self.frontier_len();
        if outputs.len() != frontier {
            return Err(Error::InconsistentGrouping {
                stage: kind.name().into(),
                detail: format!("{} output groups for {} frontier records", outputs.len(), frontier),
            });
        }
        let arity_ok = match kind {
            TransformKind::Map | TransformKind::MapValues => outputs.iter().all(|g| g.len() == 1),
            TransformKind::Filter | TransformKind::Sample(_) => {
                outputs.iter().all(|g| g.len() <= 1)
            }
            TransformKind::FlatMap => true,
        };
        if !arity_ok {
            return Err(Error::InconsistentGrouping {
                stage: kind.name().into(),
                detail: "output group size does not match operator arity".into(),
            });
        }

        match kind {
            TransformKind::Sample(rate) => {
                self.rewrite(outputs, false);
                let last = self.rates.last_mut().expect("rates non-empty");
                *last *= rate;
            }
            TransformKind::FlatMap => {
                let frontier_rate = *self.rates.last().expect("rates non-empty");
                if frontier_rate < 1.0 {
                    // Sampling precedes this flatMap: its input records are
                    // sampled clusters of the output, so a new level opens.
                    self.rewrite(outputs, true);
                    self.rates.push(1.0);
                } else {
                    self.rewrite(outputs, false);
                }
            }
            TransformKind::Map | TransformKind::MapValues | TransformKind::Filter => {
                self.rewrite(outputs, false);
            }
        }
        Ok(())
    }

    /// Replaces each frontier leaf with its outputs, either flattened in
    /// place or pushed one level down. Internal nodes left childless are
    /// pruned; they can never carry a key.
    fn rewrite(&mut self, outputs: Vec<Vec<Value>>, add_level: bool) {
        let mut groups = std::mem::take(&mut self.groups);
        let mut iter = outputs.into_iter();
        rewrite_nodes(&mut groups, &mut iter, add_level);
        self.groups = groups;
    }

    /// Converts the builder into a finalized partition subtree. Every leaf
    /// must be a `(key, value)` pair by now.
    pub fn finalize(self) -> Result<(PartitionSubtree, Vec<f64>)> {
        fn convert(node: BuildNode) -> Result<ProvNode> {
            match node {
                BuildNode::Leaf(Value::Pair(key, value)) => Ok(ProvNode::Leaf { key, value }),
                BuildNode::Leaf(other) => Err(Error::StageType {
                    stage: "aggregate".into(),
                    detail: format!(
                        "final records must be (key, value) pairs, found {}",
                        other.kind()
                    ),
                }),
                BuildNode::Internal(kids) => Ok(ProvNode::Internal {
                    children: kids.into_iter().map(convert).collect::<Result<_>>()?,
                }),
            }
        }
        let groups = self
            .groups
            .into_iter()
            .map(convert)
            .collect::<Result<Vec<_>>>()?;
        Ok((
            PartitionSubtree {
                original_index: self.original_index,
                groups,
            },
            self.rates,
        ))
    }
}

fn rewrite_nodes(
    nodes: &mut Vec<BuildNode>,
    outputs: &mut impl Iterator<Item = Vec<Value>>,
    add_level: bool,
) {
    let old = std::mem::take(nodes);
    for node in old {
        match node {
            BuildNode::Leaf(_) => {
                let outs = outputs.next().unwrap_or_default();
                if add_level {
                    if !outs.is_empty() {
                        nodes.push(BuildNode::Internal(
                            outs.into_iter().map(BuildNode::Leaf).collect(),
                        ));
                    }
                } else {
                    nodes.extend(outs.into_iter().map(BuildNode::Leaf));
                }
            }
            BuildNode::Internal(mut kids) => {
                rewrite_nodes(&mut kids, outputs, add_level);
                if !kids.is_empty() {
                    nodes.push(BuildNode::Internal(kids));
                }
            }
        }
    }
}

/// Assembles the finalized tree from per-partition builders.
pub fn finalize_tree(
    builders: Vec<SubtreeBuilder>,
    origin_partition_count: u64,
) -> Result<ProvenanceTree> {
    let mut partitions = Vec::with_capacity(builders.len());
    let mut rates: Option<Vec<f64>> = None;
    for b in builders {
        let (part, r) = b.finalize()?;
        match &rates {
            None => rates = Some(r),
            Some(existing) => debug_assert_eq!(existing, &r, "level rates diverged"),
        }
        partitions.push(part);
    }
    let rates = rates.ok_or_else(|| Error::Precondition("no partitions to finalize".into()))?;
    Ok(ProvenanceTree {
        origin_partition_count,
        partitions,
        level_rates: LevelRates(rates),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(n: usize) -> Vec<Value> {
        (0..n).map(|i| Value::Text(format!("t{i}"))).collect()
    }

    fn one_to_one(builder: &SubtreeBuilder) -> Vec<Vec<Value>> {
        builder.frontier_values().into_iter().map(|v| vec![v]).collect()
    }

    fn explode(builder: &SubtreeBuilder, per_input: usize) -> Vec<Vec<Value>> {
        builder
            .frontier_values()
            .into_iter()
            .map(|v| vec![v; per_input])
            .collect()
    }

    #[test]
    fn init_records_the_two_load_levels() {
        let builders = init_tree(vec![(0, texts(3)), (1, texts(2))], 0.5, 0.6).unwrap();
        assert_eq!(builders.len(), 2);
        assert_eq!(builders[0].depth(), 2);
        assert_eq!(builders[0].level_rates(), &[0.5, 0.6]);
    }

    #[test]
    fn init_requires_a_partition() {
        assert!(init_tree(vec![], 0.5, 0.5).is_err());
    }

    #[test]
    fn flatmap_after_sampled_load_adds_level() {
        let mut b = init_tree(vec![(0, texts(2))], 1.0, 0.6).unwrap().remove(0);
        let outs = explode(&b, 2);
        b.on_transform(TransformKind::FlatMap, outs).unwrap();
        assert_eq!(b.depth(), 3);
        assert_eq!(b.level_rates(), &[1.0, 0.6, 1.0]);
        assert_eq!(b.frontier_len(), 4);
    }

    #[test]
    fn flatmap_at_full_rate_replaces_in_place() {
        let mut b = init_tree(vec![(0, texts(2))], 0.5, 1.0).unwrap().remove(0);
        b.on_transform(TransformKind::Map, one_to_one(&b)).unwrap();
        let outs = explode(&b, 3);
        b.on_transform(TransformKind::FlatMap, outs).unwrap();
        assert_eq!(b.depth(), 2, "no sampling precedes the flatMap");
        assert_eq!(b.frontier_len(), 6);
    }

    #[test]
    fn sample_then_flatmap_adds_level() {
        let mut b = init_tree(vec![(0, texts(4))], 1.0, 1.0).unwrap().remove(0);
        // Sample keeps the first two records.
        let outs: Vec<Vec<Value>> = b
            .frontier_values()
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i < 2 { vec![v] } else { vec![] })
            .collect();
        b.on_transform(TransformKind::Sample(0.5), outs).unwrap();
        assert_eq!(b.level_rates(), &[1.0, 0.5]);
        assert_eq!(b.frontier_len(), 2);
        let outs = explode(&b, 2);
        b.on_transform(TransformKind::FlatMap, outs).unwrap();
        assert_eq!(b.depth(), 3);
        assert_eq!(b.level_rates(), &[1.0, 0.5, 1.0]);
    }

    #[test]
    fn chain_depth_examples() {
        // [map] at rates (0.5, 1.0) stays two-stage.
        let mut b = init_tree(vec![(0, texts(2))], 0.5, 1.0).unwrap().remove(0);
        b.on_transform(TransformKind::Map, one_to_one(&b)).unwrap();
        assert_eq!(b.depth(), 2);

        // [flatMap] at rates (0.5, 0.5) becomes three-stage.
        let mut b = init_tree(vec![(0, texts(2))], 0.5, 0.5).unwrap().remove(0);
        let outs = explode(&b, 2);
        b.on_transform(TransformKind::FlatMap, outs).unwrap();
        assert_eq!(b.depth(), 3);

        // [flatMap, sample(0.8), flatMap] at rates (1, 0.9) becomes four-stage.
        let mut b = init_tree(vec![(0, texts(2))], 1.0, 0.9).unwrap().remove(0);
        let outs = explode(&b, 2);
        b.on_transform(TransformKind::FlatMap, outs).unwrap();
        assert_eq!(b.depth(), 3);
        let outs = one_to_one(&b);
        b.on_transform(TransformKind::Sample(0.8), outs).unwrap();
        assert_eq!(b.level_rates(), &[1.0, 0.9, 0.8]);
        let outs = explode(&b, 2);
        b.on_transform(TransformKind::FlatMap, outs).unwrap();
        assert_eq!(b.depth(), 4);
        assert_eq!(b.level_rates(), &[1.0, 0.9, 0.8, 1.0]);
    }

    #[test]
    fn consecutive_samples_compose_multiplicatively() {
        let mut b = init_tree(vec![(0, texts(8))], 1.0, 1.0).unwrap().remove(0);
        let keep_half = |b: &SubtreeBuilder| -> Vec<Vec<Value>> {
            b.frontier_values()
                .into_iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { vec![v] } else { vec![] })
                .collect()
        };
        b.on_transform(TransformKind::Sample(0.5), keep_half(&b)).unwrap();
        b.on_transform(TransformKind::Sample(0.5), keep_half(&b)).unwrap();
        assert!((b.level_rates()[1] - 0.25).abs() < 1e-12);
        assert_eq!(b.frontier_len(), 2);
    }

    #[test]
    fn grouping_mismatch_is_rejected() {
        let mut b = init_tree(vec![(0, texts(3))], 1.0, 1.0).unwrap().remove(0);
        let err = b.on_transform(TransformKind::Map, vec![vec![Value::Text("x".into())]]);
        assert!(matches!(err, Err(Error::InconsistentGrouping { .. })));
        let bad_arity: Vec<Vec<Value>> = b
            .frontier_values()
            .into_iter()
            .map(|v| vec![v.clone(), v])
            .collect();
        let err = b.on_transform(TransformKind::Map, bad_arity);
        assert!(matches!(err, Err(Error::InconsistentGrouping { .. })));
    }

    #[test]
    fn finalize_requires_pairs() {
        let b = init_tree(vec![(0, texts(1))], 1.0, 1.0).unwrap().remove(0);
        assert!(matches!(b.finalize(), Err(Error::StageType { .. })));

        let mut b = init_tree(vec![(0, texts(2))], 1.0, 1.0)
            .unwrap()
            .remove(0);
        let outs: Vec<Vec<Value>> = b
            .frontier_values()
            .iter()
            .map(|_| vec![Value::Pair("k".into(), 1.0)])
            .collect();
        b.on_transform(TransformKind::Map, outs).unwrap();
        let (part, rates) = b.finalize().unwrap();
        assert_eq!(part.groups.len(), 2);
        assert_eq!(rates, vec![1.0, 1.0]);
    }

    #[test]
    fn shape_rendering_is_stable() {
        let mut b = init_tree(vec![(0, texts(2))], 1.0, 0.5).unwrap().remove(0);
        let outs: Vec<Vec<Value>> = b
            .frontier_values()
            .iter()
            .map(|_| vec![Value::Pair("a".into(), 1.0), Value::Pair("b".into(), 1.0)])
            .collect();
        b.on_transform(TransformKind::FlatMap, outs).unwrap();
        let tree = finalize_tree(vec![b], 4).unwrap();
        assert_eq!(tree.depth(), 3);
        assert_eq!(tree.level_counts(), vec![1, 1, 2, 4]);
        let shape = tree.render_shape();
        assert!(shape.contains("level 3: 4 nodes (leaves), rate 1.0000"));
        assert_eq!(shape, tree.render_shape());
    }
}
