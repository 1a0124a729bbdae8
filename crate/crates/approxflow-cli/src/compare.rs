//! Approximate-vs-exact comparison reports.

use std::collections::BTreeMap;

use serde_json::json;

use crate::report::{percentile, ReportRow};

/// Compares a run report against ground truth. Reports per-key actual
/// relative errors `|1 - est/v|`, the fraction of exact keys present, the
/// percentile profiles of estimated bounds versus actual errors, and the
/// fraction of shared keys whose confidence interval contains the truth.
pub fn compare(approx: &[ReportRow], exact: &BTreeMap<String, f64>) -> serde_json::Value {
    let keys_exact = exact.len();
    let keys_approx = approx.len();
    let shared: Vec<(&ReportRow, f64)> = approx
        .iter()
        .filter_map(|r| exact.get(&r.key).map(|&v| (r, v)))
        .collect();
    let present_exact_keys = shared.len();
    let key_loss_fraction = if keys_exact == 0 {
        0.0
    } else {
        1.0 - present_exact_keys as f64 / keys_exact as f64
    };

    let mut rows = Vec::with_capacity(shared.len());
    let mut actual_errors = Vec::new();
    let mut estimated_bounds = Vec::new();
    let mut contained = 0usize;
    for (r, truth) in &shared {
        let actual = if *truth == 0.0 {
            None
        } else {
            Some((1.0 - r.estimate / truth).abs())
        };
        if let Some(a) = actual {
            actual_errors.push(a);
        }
        if !r.relative_bound.is_nan() {
            estimated_bounds.push(r.relative_bound);
        }
        let within = r.ci_lo <= *truth && *truth <= r.ci_hi;
        if within {
            contained += 1;
        }
        rows.push(json!({
            "key": r.key,
            "estimate": r.estimate,
            "exact": truth,
            "actual_relative_error": actual,
            "estimated_relative_bound": r.relative_bound.is_finite().then_some(r.relative_bound),
            "within_ci": within,
        }));
    }
    actual_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    estimated_bounds.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let profile = |v: &[f64]| {
        let f = |p: f64| percentile(v, p).filter(|x| x.is_finite());
        json!({"p10": f(10.0), "p50": f(50.0), "p90": f(90.0), "p100": f(100.0)})
    };

    json!({
        "keys_exact": keys_exact,
        "keys_approx": keys_approx,
        "keys_shared": present_exact_keys,
        "key_loss_fraction": key_loss_fraction,
        "ci_containment_fraction": if present_exact_keys == 0 {
            serde_json::Value::Null
        } else {
            json!(contained as f64 / present_exact_keys as f64)
        },
        "estimated_bound_percentiles": profile(&estimated_bounds),
        "actual_error_percentiles": profile(&actual_errors),
        "rows": rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(key: &str, estimate: f64, lo: f64, hi: f64, bound: f64) -> ReportRow {
        ReportRow {
            key: key.into(),
            estimate,
            variance: 0.0,
            ci_lo: lo,
            ci_hi: hi,
            epsilon: hi - estimate,
            relative_bound: bound,
            n_level1: 2,
            degenerate: false,
        }
    }

    #[test]
    fn exact_match_has_zero_errors_and_no_loss() {
        let approx = vec![row("a", 2.0, 2.0, 2.0, 0.0), row("b", 1.0, 1.0, 1.0, 0.0)];
        let mut exact = BTreeMap::new();
        exact.insert("a".to_string(), 2.0);
        exact.insert("b".to_string(), 1.0);
        let cmp = compare(&approx, &exact);
        assert_eq!(cmp["key_loss_fraction"], 0.0);
        assert_eq!(cmp["ci_containment_fraction"], 1.0);
        assert_eq!(cmp["actual_error_percentiles"]["p100"], 0.0);
    }

    #[test]
    fn missing_key_counts_as_lost() {
        let approx = vec![row("a", 2.0, 1.5, 2.5, 0.25)];
        let mut exact = BTreeMap::new();
        exact.insert("a".to_string(), 2.0);
        exact.insert("gone".to_string(), 5.0);
        let cmp = compare(&approx, &exact);
        assert_eq!(cmp["keys_shared"], 1);
        assert!((cmp["key_loss_fraction"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    }
}
