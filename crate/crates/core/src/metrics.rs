//! Inequality and demographic disparity of dividend allocations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DemographicColumn, ObservationTable};
use crate::dividends::DividendAllocation;

/// 2016 income Gini of the United States, used as a reference line.
pub const US_GINI: f64 = 39.1;
/// 2016 income Gini of Finland, the lowest in the OECD.
pub const FINLAND_GINI: f64 = 25.9;
/// Ratio below which a pair of group medians is flagged.
pub const EIGHTY_PERCENT_RULE: f64 = 0.8;
/// Age at which contributors move from the "under 40" band to "40+".
pub const AGE_BAND_THRESHOLD: f64 = 40.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no values to measure")]
    Empty,
    #[error("value {0} is negative or non-finite")]
    InvalidValue(f64),
    #[error("all values are zero; an allocation should fall back to uniform shares instead")]
    AllZero,
    #[error("attribute `{0}` is not among the table's demographic columns")]
    MissingAttribute(String),
    #[error("contributor `{contributor}` has conflicting `{attribute}` values {first:?} and {second:?}")]
    ConflictingGroup {
        contributor: String,
        attribute: String,
        first: String,
        second: String,
    },
    #[error("contributor `{0}` does not appear in the table")]
    UnknownContributor(String),
    #[error("disparity needs at least two groups, found {0}")]
    TooFewGroups(usize),
    #[error("group medians must be finite and non-negative")]
    InvalidMedians,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GiniResult {
    pub value: f64,
    pub n: usize,
}

/// Gini index on a 0-100 scale with the `n - 1` denominator, so a single
/// holder of everything scores exactly 100.
///
/// Uses the sorted form `sum_i (2i - n - 1) x_(i) / ((n - 1) sum x)`, which
/// equals the pairwise mean absolute difference over twice the mean. Terms
/// are paired from both ends so every addend is non-negative and equal
/// values give exactly zero.
pub fn gini(values: &[f64]) -> Result<GiniResult, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(MetricsError::InvalidValue(bad));
    }
    let n = values.len();
    if values.iter().all(|&v| v == 0.0) {
        return Err(MetricsError::AllZero);
    }
    if n == 1 {
        return Ok(GiniResult { value: 0.0, n });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    let weighted: f64 = (0..n / 2)
        .map(|i| (n - 1 - 2 * i) as f64 * (sorted[n - 1 - i] - sorted[i]))
        .sum();
    let value = (100.0 * weighted / ((n - 1) as f64 * total)).clamp(0.0, 100.0);
    Ok(GiniResult { value, n })
}

/// Median with the midpoint convention for even counts.
pub fn median_of_sorted(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    median_of_sorted(&sorted)
}

/// Group label of a raw demographic value; `age` is banded.
pub fn group_label(attribute: &str, column: &DemographicColumn, row: usize) -> String {
    match column {
        DemographicColumn::Numeric(v) if attribute.eq_ignore_ascii_case("age") => {
            if v[row] < AGE_BAND_THRESHOLD {
                "under 40".to_string()
            } else {
                "40+".to_string()
            }
        }
        DemographicColumn::Numeric(v) => v[row].to_string(),
        DemographicColumn::Categorical(v) => v[row].clone(),
    }
}

/// Median payout per demographic group (amounts when a pool is set).
pub fn group_medians(
    allocation: &DividendAllocation,
    table: &ObservationTable,
    attribute: &str,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let column = table
        .demographics()
        .get(attribute)
        .ok_or_else(|| MetricsError::MissingAttribute(attribute.to_string()))?;

    let mut group_of: BTreeMap<&str, String> = BTreeMap::new();
    for (row, contributor) in table.contributor_ids().iter().enumerate() {
        let label = group_label(attribute, column, row);
        match group_of.get(contributor.as_str()) {
            Some(existing) if *existing != label => {
                return Err(MetricsError::ConflictingGroup {
                    contributor: contributor.clone(),
                    attribute: attribute.to_string(),
                    first: existing.clone(),
                    second: label,
                });
            }
            Some(_) => {}
            None => {
                group_of.insert(contributor, label);
            }
        }
    }

    let mut payouts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for contributor in allocation.fractions.keys() {
        let group = group_of
            .get(contributor.as_str())
            .ok_or_else(|| MetricsError::UnknownContributor(contributor.clone()))?;
        let pay = allocation.payout_of(contributor).unwrap_or(0.0);
        payouts.entry(group.clone()).or_default().push(pay);
    }
    Ok(payouts
        .into_iter()
        .map(|(g, v)| {
            let m = median(&v).unwrap_or(0.0);
            (g, m)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub group_a: String,
    pub group_b: String,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub attribute: String,
    pub group_medians: BTreeMap<String, f64>,
    pub pairwise_ratios: Vec<PairRatio>,
    pub threshold: f64,
    pub us_gini_baseline: f64,
    pub finland_gini_baseline: f64,
}

impl DisparityReport {
    pub fn flags(&self) -> impl Iterator<Item = &PairRatio> {
        self.pairwise_ratios.iter().filter(|p| p.flagged)
    }

    pub fn ratio(&self, a: &str, b: &str) -> Option<f64> {
        self.pairwise_ratios
            .iter()
            .find(|p| (p.group_a == a && p.group_b == b) || (p.group_a == b && p.group_b == a))
            .map(|p| p.ratio)
    }
}

/// Smaller median over larger; two zero medians count as parity.
pub fn median_ratio(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi == 0.0 {
        1.0
    } else {
        lo / hi
    }
}

pub fn disparity_report(
    attribute: &str,
    medians: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<DisparityReport, MetricsError> {
    if medians.len() < 2 {
        return Err(MetricsError::TooFewGroups(medians.len()));
    }
    if medians.values().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(MetricsError::InvalidMedians);
    }
    let groups: Vec<(&String, &f64)> = medians.iter().collect();
    let mut pairwise_ratios = Vec::new();
    for (i, (ga, ma)) in groups.iter().enumerate() {
        for (gb, mb) in &groups[i + 1..] {
            let ratio = median_ratio(**ma, **mb);
            pairwise_ratios.push(PairRatio {
                group_a: (*ga).clone(),
                group_b: (*gb).clone(),
                ratio,
                flagged: ratio < threshold,
            });
        }
    }
    Ok(DisparityReport {
        attribute: attribute.to_string(),
        group_medians: medians.clone(),
        pairwise_ratios,
        threshold,
        us_gini_baseline: US_GINI,
        finland_gini_baseline: FINLAND_GINI,
    })
}

/// Mean of every pairwise ratio across the reports of each transform.
pub fn mean_ratio_summary(
    reports: &BTreeMap<String, Vec<DisparityReport>>,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    reports
        .iter()
        .map(|(transform, rs)| {
            let ratios: Vec<f64> = rs
                .iter()
                .flat_map(|r| r.pairwise_ratios.iter().map(|p| p.ratio))
                .collect();
            if ratios.is_empty() {
                return Err(MetricsError::Empty);
            }
            Ok((transform.clone(), ratios.iter().sum::<f64>() / ratios.len() as f64))
        })
        .collect()
}

/// `attribute,groupA,groupB,ratio,flagged` rows for a set of reports.
pub fn write_disparity_csv<W: std::io::Write>(reports: &[DisparityReport], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["attribute", "groupA", "groupB", "ratio", "flagged"])?;
    for r in reports {
        for p in &r.pairwise_ratios {
            w.write_record([
                r.attribute.as_str(),
                &p.group_a,
                &p.group_b,
                &p.ratio.to_string(),
                &p.flagged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ObservationTable;
    use crate::dividends::Mode;
    use proptest::prelude::*;

    fn pairwise_gini(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mut s = 0.0;
        for a in v {
            for b in v {
                s += (a - b).abs();
            }
        }
        100.0 * s / (2.0 * n * (n - 1.0) * mean)
    }

    #[test]
    fn gini_anchor_values() {
        assert_eq!(gini(&[1.0, 1.0, 1.0, 1.0]).unwrap().value, 0.0);
        assert_eq!(gini(&[1.0, 0.0, 0.0, 0.0]).unwrap().value, 100.0);
        assert_eq!(gini(&[3.0, 1.0]).unwrap().value, 50.0);
        assert_eq!(gini(&[5.0]).unwrap(), GiniResult { value: 0.0, n: 1 });
    }

    #[test]
    fn gini_errors() {
        assert_eq!(gini(&[]), Err(MetricsError::Empty));
        assert_eq!(gini(&[0.0, 0.0]), Err(MetricsError::AllZero));
        assert_eq!(gini(&[1.0, -1.0]), Err(MetricsError::InvalidValue(-1.0)));
        assert!(gini(&[1.0, f64::NAN]).is_err());
        assert!(MetricsError::AllZero.to_string().contains("fall back"));
    }

    #[test]
    fn median_convention() {
        assert_eq!(median(&[1.0, 3.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&[]), None);
    }

    fn table_with(attribute: &str, column: DemographicColumn, contributors: &[&str]) -> ObservationTable {
        let n = contributors.len();
        let mut demographics = BTreeMap::new();
        demographics.insert(attribute.to_string(), column);
        let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        ObservationTable::from_parts(
            (0..n).map(|i| i as f64).collect(),
            1,
            labels,
            contributors.iter().map(|c| c.to_string()).collect(),
            demographics,
            (0..n).collect(),
        )
        .unwrap()
    }

    fn allocation(pairs: &[(&str, f64)]) -> DividendAllocation {
        DividendAllocation {
            fractions: pairs.iter().map(|(c, f)| (c.to_string(), *f)).collect(),
            mode: Mode::PerObservation,
            transform: None,
            pool: None,
            amounts: None,
            fallback: false,
        }
    }

    #[test]
    fn ages_are_banded_at_forty() {
        let t = table_with(
            "age",
            DemographicColumn::Numeric(vec![25.0, 39.0, 40.0, 71.0]),
            &["a", "b", "c", "d"],
        );
        let col = &t.demographics()["age"];
        let bands: Vec<String> = (0..4).map(|r| group_label("age", col, r)).collect();
        assert_eq!(bands, ["under 40", "under 40", "40+", "40+"]);

        let alloc = allocation(&[("a", 0.1), ("b", 0.3), ("c", 0.2), ("d", 0.4)]);
        let m = group_medians(&alloc, &t, "age").unwrap();
        assert!((m["under 40"] - 0.2).abs() < 1e-15);
        assert!((m["40+"] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn medians_by_category() {
        let t = table_with(
            "sex",
            DemographicColumn::Categorical(["M", "M", "F", "F", "M"].map(String::from).to_vec()),
            &["a", "b", "c", "d", "e"],
        );
        let alloc = allocation(&[("a", 2.0), ("b", 2.5), ("c", 0.5), ("d", 1.5), ("e", 9.0)]);
        let m = group_medians(&alloc, &t, "sex").unwrap();
        assert_eq!(m["M"], 2.5);
        assert_eq!(m["F"], 1.0);
    }

    #[test]
    fn group_median_errors() {
        let t = table_with(
            "sex",
            DemographicColumn::Categorical(["M", "F"].map(String::from).to_vec()),
            &["a", "a"],
        );
        let alloc = allocation(&[("a", 1.0)]);
        assert!(matches!(
            group_medians(&alloc, &t, "sex"),
            Err(MetricsError::ConflictingGroup { .. })
        ));
        assert_eq!(
            group_medians(&alloc, &t, "race"),
            Err(MetricsError::MissingAttribute("race".into()))
        );
    }

    fn medians(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(g, m)| (g.to_string(), *m)).collect()
    }

    #[test]
    fn disparity_examples() {
        let r = disparity_report("x", &medians(&[("A", 1.0), ("B", 1.0)]), 0.8).unwrap();
        assert_eq!(r.ratio("A", "B"), Some(1.0));
        assert_eq!(r.flags().count(), 0);

        let r = disparity_report("sex", &medians(&[("M", 2.5), ("F", 1.0)]), 0.8).unwrap();
        assert!((r.ratio("M", "F").unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(r.flags().count(), 1);

        let r = disparity_report("age", &medians(&[("X", 1.5), ("Y", 1.0)]), 0.8).unwrap();
        assert!((r.ratio("X", "Y").unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.flags().count(), 1);
        assert_eq!(r.us_gini_baseline, 39.1);
        assert_eq!(r.finland_gini_baseline, 25.9);
    }

    #[test]
    fn zero_medians() {
        let r = disparity_report("x", &medians(&[("A", 0.0), ("B", 0.0), ("C", 2.0)]), 0.8).unwrap();
        assert_eq!(r.ratio("A", "B"), Some(1.0));
        assert_eq!(r.ratio("A", "C"), Some(0.0));
        assert_eq!(r.flags().count(), 2);
        assert_eq!(
            disparity_report("x", &medians(&[("A", 1.0)]), 0.8),
            Err(MetricsError::TooFewGroups(1))
        );
        // All-zero medians are parity under the both-zero pair rule.
        let r = disparity_report("x", &medians(&[("A", 0.0), ("B", 0.0)]), 0.8).unwrap();
        assert_eq!(r.flags().count(), 0);
        assert_eq!(
            disparity_report("x", &medians(&[("A", -1.0), ("B", 1.0)]), 0.8),
            Err(MetricsError::InvalidMedians)
        );
    }

    #[test]
    fn mean_ratio_examples() {
        let report = |ratios: &[f64]| DisparityReport {
            attribute: "a".into(),
            group_medians: BTreeMap::new(),
            pairwise_ratios: ratios
                .iter()
                .map(|&ratio| PairRatio {
                    group_a: "x".into(),
                    group_b: "y".into(),
                    ratio,
                    flagged: ratio < 0.8,
                })
                .collect(),
            threshold: 0.8,
            us_gini_baseline: US_GINI,
            finland_gini_baseline: FINLAND_GINI,
        };
        let mut grouped = BTreeMap::new();
        grouped.insert("absolute_value".to_string(), vec![report(&[0.4, 0.8])]);
        grouped.insert("shift".to_string(), vec![report(&[1.0]), report(&[1.0, 1.0])]);
        grouped.insert("clipping".to_string(), vec![report(&[0.2]), report(&[0.28])]);
        let s = mean_ratio_summary(&grouped).unwrap();
        assert!((s["absolute_value"] - 0.6).abs() < 1e-15);
        assert_eq!(s["shift"], 1.0);
        assert!((s["clipping"] - 0.24).abs() < 1e-15);
        assert_eq!(mean_ratio_summary(&BTreeMap::new()), Err(MetricsError::Empty));
    }

    #[test]
    fn disparity_csv_layout() {
        let r = disparity_report("sex", &medians(&[("M", 2.5), ("F", 1.0)]), 0.8).unwrap();
        let mut buf = Vec::new();
        write_disparity_csv(&[r], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "attribute,groupA,groupB,ratio,flagged\nsex,F,M,0.4,true\n"
        );
    }

    proptest! {
        #[test]
        fn gini_matches_pairwise_sum(v in proptest::collection::vec(0.0f64..10.0, 2..80)) {
            prop_assume!(v.iter().any(|x| *x > 0.0));
            let fast = gini(&v).unwrap().value;
            prop_assert!((fast - pairwise_gini(&v)).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&fast));
        }

        #[test]
        fn gini_is_scale_free(v in proptest::collection::vec(0.01f64..10.0, 2..50), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((gini(&v).unwrap().value - gini(&scaled).unwrap().value).abs() < 1e-9);
        }

        #[test]
        fn ratio_is_symmetric(a in 0.0f64..5.0, b in 0.0f64..5.0) {
            prop_assert_eq!(median_ratio(a, b), median_ratio(b, a));
            prop_assert!(median_ratio(a, b) <= 1.0);
        }

        #[test]
        fn median_ignores_order(mut v in proptest::collection::vec(-5.0f64..5.0, 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let before = median(&v);
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, median(&v));
        }
    }
}
