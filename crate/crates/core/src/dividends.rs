//! Turning signed valuations into non-negative dividend shares.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ContributorIndex;
use crate::influence::ValuationVector;

#[derive(Debug, Error, PartialEq)]
pub enum DividendError {
    #[error("no values to transform")]
    Empty,
    #[error("non-finite value {value} at position {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("valuation has {valuation} entries but the contributor index covers {index} rows")]
    LengthMismatch { valuation: usize, index: usize },
    #[error("invalid transform: {0}")]
    Transform(String),
    #[error("funding pool must be a non-negative finite amount, got {0}")]
    NegativePool(f64),
    #[error("{0} is not a valuation-based mode")]
    FixedMode(Mode),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Shift,
    AbsoluteValue,
    Clipping,
    /// Weight `weight` at or above the `quantile` of the values, 1 below.
    Binning {
        quantile: f64,
        weight: f64,
    },
}

impl TransformSpec {
    pub const MEDIAN_BINNING: TransformSpec = TransformSpec::Binning {
        quantile: 0.5,
        weight: 2.0,
    };

    pub fn name(&self) -> &'static str {
        match self {
            TransformSpec::Shift => "shift",
            TransformSpec::AbsoluteValue => "absolute_value",
            TransformSpec::Clipping => "clipping",
            TransformSpec::Binning { .. } => "binning",
        }
    }

    pub fn validate(&self) -> Result<(), DividendError> {
        if let TransformSpec::Binning { quantile, weight } = *self {
            if !(quantile > 0.0 && quantile < 1.0) {
                return Err(DividendError::Transform(format!(
                    "binning quantile must lie in (0, 1), got {quantile}"
                )));
            }
            if !(weight > 1.0 && weight.is_finite()) {
                return Err(DividendError::Transform(format!(
                    "binning weight must exceed 1, got {weight}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PerObservation,
    SummedInfluence,
    FixedPerObservation,
    FixedPerContributor,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PerObservation => "per_observation",
            Mode::SummedInfluence => "summed_influence",
            Mode::FixedPerObservation => "fixed_per_observation",
            Mode::FixedPerContributor => "fixed_per_contributor",
        }
    }

    pub fn is_fixed(self) -> bool {
        matches!(self, Mode::FixedPerObservation | Mode::FixedPerContributor)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_observation" => Ok(Mode::PerObservation),
            "summed_influence" => Ok(Mode::SummedInfluence),
            "fixed_per_observation" => Ok(Mode::FixedPerObservation),
            "fixed_per_contributor" => Ok(Mode::FixedPerContributor),
            other => Err(format!("unknown allocation mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DividendAllocation {
    pub fractions: BTreeMap<String, f64>,
    pub mode: Mode,
    pub transform: Option<TransformSpec>,
    pub pool: Option<f64>,
    pub amounts: Option<BTreeMap<String, f64>>,
    /// Set when every transformed weight was zero and the shares fell back
    /// to uniform per contributor.
    pub fallback: bool,
}

impl DividendAllocation {
    pub fn n_contributors(&self) -> usize {
        self.fractions.len()
    }

    /// Amounts when a pool is set, otherwise the raw fractions.
    pub fn payouts(&self) -> Vec<f64> {
        match &self.amounts {
            Some(a) => a.values().copied().collect(),
            None => self.fractions.values().copied().collect(),
        }
    }

    pub fn payout_of(&self, contributor: &str) -> Option<f64> {
        match &self.amounts {
            Some(a) => a.get(contributor).copied(),
            None => self.fractions.get(contributor).copied(),
        }
    }
}

fn check_finite(values: &[f64]) -> Result<(), DividendError> {
    if values.is_empty() {
        return Err(DividendError::Empty);
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(DividendError::NonFinite { index, value });
    }
    Ok(())
}

fn min_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Linear-interpolation quantile of sorted values; `q = 0.5` is the usual
/// median (midpoint of the two central values for even counts).
pub fn quantile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Maps signed valuations to non-negative, unnormalized weights.
pub fn transform_values(values: &[f64], spec: &TransformSpec) -> Result<Vec<f64>, DividendError> {
    check_finite(values)?;
    spec.validate()?;
    let out = match *spec {
        TransformSpec::Shift => {
            let m = min_of(values);
            values.iter().map(|v| v - m).collect()
        }
        TransformSpec::AbsoluteValue => {
            let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
            let m = min_of(&abs);
            abs.iter().map(|v| v - m).collect()
        }
        TransformSpec::Clipping => values.iter().map(|v| v.max(0.0)).collect(),
        TransformSpec::Binning { quantile, weight } => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let threshold = quantile_of_sorted(&sorted, quantile);
            values
                .iter()
                .map(|&v| if v >= threshold { weight } else { 1.0 })
                .collect()
        }
    };
    Ok(out)
}

fn uniform(index: &ContributorIndex) -> BTreeMap<String, f64> {
    let share = 1.0 / index.n_contributors() as f64;
    index.groups().keys().map(|c| (c.clone(), share)).collect()
}

/// Allocates shares from valuations. Fixed modes ignore the deltas apart
/// from the length check.
pub fn allocate(
    valuation: &ValuationVector,
    index: &ContributorIndex,
    mode: Mode,
    spec: &TransformSpec,
) -> Result<DividendAllocation, DividendError> {
    allocate_deltas(&valuation.deltas, index, mode, spec)
}

pub fn allocate_deltas(
    deltas: &[f64],
    index: &ContributorIndex,
    mode: Mode,
    spec: &TransformSpec,
) -> Result<DividendAllocation, DividendError> {
    if deltas.len() != index.n_rows() {
        return Err(DividendError::LengthMismatch {
            valuation: deltas.len(),
            index: index.n_rows(),
        });
    }
    check_finite(deltas)?;
    if mode.is_fixed() {
        return fixed_allocation(index, mode);
    }

    let (fractions, fallback) = match mode {
        Mode::PerObservation => {
            let weights = transform_values(deltas, spec)?;
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                let fractions = index
                    .groups()
                    .iter()
                    .map(|(c, rows)| (c.clone(), rows.iter().map(|&r| weights[r] / total).sum()))
                    .collect();
                (fractions, false)
            } else {
                (uniform(index), true)
            }
        }
        Mode::SummedInfluence => {
            let sums: Vec<f64> = index
                .groups()
                .values()
                .map(|rows| rows.iter().map(|&r| deltas[r]).sum())
                .collect();
            let weights = transform_values(&sums, spec)?;
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                let fractions = index
                    .groups()
                    .keys()
                    .zip(&weights)
                    .map(|(c, w)| (c.clone(), w / total))
                    .collect();
                (fractions, false)
            } else {
                (uniform(index), true)
            }
        }
        Mode::FixedPerObservation | Mode::FixedPerContributor => unreachable!(),
    };

    Ok(DividendAllocation {
        fractions,
        mode,
        transform: Some(*spec),
        pool: None,
        amounts: None,
        fallback,
    })
}

/// Equal value per observation, or per contributor.
pub fn fixed_allocation(index: &ContributorIndex, mode: Mode) -> Result<DividendAllocation, DividendError> {
    let fractions = match mode {
        Mode::FixedPerObservation => {
            let n = index.n_rows() as f64;
            index
                .groups()
                .iter()
                .map(|(c, rows)| (c.clone(), rows.len() as f64 / n))
                .collect()
        }
        Mode::FixedPerContributor => uniform(index),
        other => return Err(DividendError::FixedMode(other)),
    };
    Ok(DividendAllocation {
        fractions,
        mode,
        transform: None,
        pool: None,
        amounts: None,
        fallback: false,
    })
}

/// Scales fractions to currency amounts out of `pool`.
pub fn to_currency(allocation: &DividendAllocation, pool: f64) -> Result<DividendAllocation, DividendError> {
    if !(pool >= 0.0 && pool.is_finite()) {
        return Err(DividendError::NegativePool(pool));
    }
    let amounts = allocation
        .fractions
        .iter()
        .map(|(c, f)| (c.clone(), f * pool))
        .collect();
    Ok(DividendAllocation {
        pool: Some(pool),
        amounts: Some(amounts),
        ..allocation.clone()
    })
}

/// `contributor_id,fraction,amount` rows; `amount` is empty without a pool.
pub fn write_allocation_csv<W: std::io::Write>(allocation: &DividendAllocation, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["contributor_id", "fraction", "amount"])?;
    for (c, f) in &allocation.fractions {
        let amount = allocation
            .amounts
            .as_ref()
            .and_then(|a| a.get(c))
            .map(|a| a.to_string())
            .unwrap_or_default();
        w.write_record([c.as_str(), &f.to_string(), &amount])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredAllocationRow {
    pub contributor_id: String,
    pub fraction: f64,
    pub amount: Option<f64>,
}

pub fn read_allocation_csv<R: std::io::Read>(input: R) -> Result<Vec<StoredAllocationRow>, csv::Error> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64, csv::Error> {
            s.parse::<f64>().map_err(|e| {
                csv::Error::from(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("bad number {s:?}: {e}"),
                ))
            })
        };
        let amount = match rec.get(2) {
            Some("") | None => None,
            Some(a) => Some(parse(a)?),
        };
        rows.push(StoredAllocationRow {
            contributor_id: rec.get(0).unwrap_or_default().to_string(),
            fraction: parse(rec.get(1).unwrap_or_default())?,
            amount,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_to_one(n: usize) -> ContributorIndex {
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:04}")).collect();
        ContributorIndex::from_ids(&ids)
    }

    const ALL: [TransformSpec; 4] = [
        TransformSpec::Shift,
        TransformSpec::AbsoluteValue,
        TransformSpec::Clipping,
        TransformSpec::MEDIAN_BINNING,
    ];

    #[test]
    fn transform_definitions() {
        let v = [-2.0, 0.0, 2.0];
        assert_eq!(
            transform_values(&v, &TransformSpec::Shift).unwrap(),
            vec![0.0, 2.0, 4.0]
        );
        assert_eq!(
            transform_values(&v, &TransformSpec::AbsoluteValue).unwrap(),
            vec![2.0, 0.0, 2.0]
        );
        assert_eq!(
            transform_values(&v, &TransformSpec::Clipping).unwrap(),
            vec![0.0, 0.0, 2.0]
        );
        assert_eq!(
            transform_values(&[1.0, 2.0, 3.0, 4.0], &TransformSpec::MEDIAN_BINNING).unwrap(),
            vec![1.0, 1.0, 2.0, 2.0]
        );
    }

    #[test]
    fn binning_ties_at_the_median_go_up() {
        let w = transform_values(&[1.0, 2.0, 2.0, 2.0, 5.0], &TransformSpec::MEDIAN_BINNING).unwrap();
        assert_eq!(w, vec![1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn transform_errors() {
        assert_eq!(transform_values(&[], &TransformSpec::Shift), Err(DividendError::Empty));
        assert!(matches!(
            transform_values(&[1.0, f64::NAN], &TransformSpec::Clipping),
            Err(DividendError::NonFinite { index: 1, .. })
        ));
        let bad = TransformSpec::Binning {
            quantile: 0.5,
            weight: 0.5,
        };
        assert!(transform_values(&[1.0], &bad).is_err());
    }

    #[test]
    fn one_to_one_shift_allocation() {
        let a = allocate_deltas(
            &[-2.0, 0.0, 2.0],
            &one_to_one(3),
            Mode::PerObservation,
            &TransformSpec::Shift,
        )
        .unwrap();
        let f: Vec<f64> = a.fractions.values().copied().collect();
        assert_eq!(f, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert!(!a.fallback);
    }

    #[test]
    fn one_to_many_shift_allocation() {
        let idx = ContributorIndex::from_ids(&["a", "a", "b"]);
        let a = allocate_deltas(&[1.0, 1.0, 2.0], &idx, Mode::PerObservation, &TransformSpec::Shift).unwrap();
        assert_eq!(a.fractions["a"], 0.0);
        assert_eq!(a.fractions["b"], 1.0);
    }

    #[test]
    fn summed_influence_aggregates_before_transforming() {
        let idx = ContributorIndex::from_ids(&["a", "a", "b", "c"]);
        // Sums: a = 0, b = 1, c = -1; shifted: 1, 2, 0.
        let a = allocate_deltas(
            &[3.0, -3.0, 1.0, -1.0],
            &idx,
            Mode::SummedInfluence,
            &TransformSpec::Shift,
        )
        .unwrap();
        assert_eq!(a.fractions["a"], 1.0 / 3.0);
        assert_eq!(a.fractions["b"], 2.0 / 3.0);
        assert_eq!(a.fractions["c"], 0.0);
    }

    #[test]
    fn degenerate_weights_fall_back_to_uniform() {
        let idx = ContributorIndex::from_ids(&["a", "a", "b"]);
        let a = allocate_deltas(&[0.5, 0.5, 0.5], &idx, Mode::PerObservation, &TransformSpec::Shift).unwrap();
        assert!(a.fallback);
        assert_eq!(a.fractions["a"], 0.5);
        let a = allocate_deltas(
            &[-1.0, -2.0, -0.1],
            &idx,
            Mode::SummedInfluence,
            &TransformSpec::Clipping,
        )
        .unwrap();
        assert!(a.fallback);
        assert_eq!(a.fractions["b"], 0.5);
    }

    #[test]
    fn allocation_errors() {
        let idx = one_to_one(3);
        assert_eq!(
            allocate_deltas(&[1.0, 2.0], &idx, Mode::PerObservation, &TransformSpec::Shift),
            Err(DividendError::LengthMismatch { valuation: 2, index: 3 })
        );
        assert!(allocate_deltas(
            &[1.0, f64::INFINITY, 0.0],
            &idx,
            Mode::PerObservation,
            &TransformSpec::Shift
        )
        .is_err());
        assert!(fixed_allocation(&idx, Mode::SummedInfluence).is_err());
    }

    #[test]
    fn fixed_allocations() {
        let idx = ContributorIndex::from_ids(&["a", "a", "b"]);
        let per_obs = fixed_allocation(&idx, Mode::FixedPerObservation).unwrap();
        assert_eq!(per_obs.fractions["a"], 2.0 / 3.0);
        assert_eq!(per_obs.fractions["b"], 1.0 / 3.0);
        let per_c = fixed_allocation(&idx, Mode::FixedPerContributor).unwrap();
        assert_eq!(per_c.fractions["a"], 0.5);
        assert_eq!(per_c.fractions["b"], 0.5);

        let idx = one_to_one(5);
        for mode in [Mode::FixedPerObservation, Mode::FixedPerContributor] {
            let a = fixed_allocation(&idx, mode).unwrap();
            assert!(a.fractions.values().all(|&f| f == 0.2));
        }
    }

    #[test]
    fn currency_conversion() {
        let mut fractions = BTreeMap::new();
        fractions.insert("a".to_string(), 0.75);
        fractions.insert("b".to_string(), 0.25);
        let alloc = DividendAllocation {
            fractions,
            mode: Mode::PerObservation,
            transform: Some(TransformSpec::Shift),
            pool: None,
            amounts: None,
            fallback: false,
        };
        let paid = to_currency(&alloc, 100.0).unwrap();
        assert_eq!(paid.amounts.as_ref().unwrap()["a"], 75.0);
        assert_eq!(paid.amounts.as_ref().unwrap()["b"], 25.0);
        let zero = to_currency(&alloc, 0.0).unwrap();
        assert!(zero.amounts.unwrap().values().all(|&a| a == 0.0));
        assert_eq!(to_currency(&alloc, -1.0), Err(DividendError::NegativePool(-1.0)));
    }

    #[test]
    fn uniform_pool_pays_one_dollar_each() {
        let idx = one_to_one(36_000);
        let a = fixed_allocation(&idx, Mode::FixedPerContributor).unwrap();
        let paid = to_currency(&a, 36_000.0).unwrap();
        assert!(paid.amounts.unwrap().values().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn csv_round_trip() {
        let idx = ContributorIndex::from_ids(&["a", "b", "b"]);
        let a = allocate_deltas(&[0.3, -0.1, 0.2], &idx, Mode::PerObservation, &TransformSpec::Shift).unwrap();
        let a = to_currency(&a, 10.0).unwrap();
        let mut buf = Vec::new();
        write_allocation_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("contributor_id,fraction,amount\n"));
        let rows = read_allocation_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].fraction, a.fractions["a"]);
        assert_eq!(rows[1].amount, Some(a.amounts.as_ref().unwrap()["b"]));
    }

    fn deltas_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, 2..40)
    }

    fn sorted_order(v: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
        order
    }

    proptest! {
        #[test]
        fn fractions_are_a_distribution(deltas in deltas_strategy(), groups in 1usize..6) {
            let ids: Vec<String> = (0..deltas.len()).map(|i| format!("g{}", i % groups)).collect();
            let idx = ContributorIndex::from_ids(&ids);
            for mode in [Mode::PerObservation, Mode::SummedInfluence, Mode::FixedPerObservation, Mode::FixedPerContributor] {
                for spec in ALL {
                    let a = allocate_deltas(&deltas, &idx, mode, &spec).unwrap();
                    let total: f64 = a.fractions.values().sum();
                    prop_assert!((total - 1.0).abs() <= 1e-9);
                    prop_assert!(a.fractions.values().all(|&f| f >= 0.0));
                }
            }
        }

        #[test]
        fn shift_preserves_rank_order(deltas in deltas_strategy()) {
            let idx = one_to_one(deltas.len());
            let a = allocate_deltas(&deltas, &idx, Mode::PerObservation, &TransformSpec::Shift).unwrap();
            let f: Vec<f64> = a.fractions.values().copied().collect();
            prop_assert_eq!(sorted_order(&f), sorted_order(&deltas));
        }

        #[test]
        fn shift_ignores_translation(deltas in deltas_strategy(), c in -5.0f64..5.0) {
            let idx = one_to_one(deltas.len());
            let moved: Vec<f64> = deltas.iter().map(|d| d + c).collect();
            let a = allocate_deltas(&deltas, &idx, Mode::PerObservation, &TransformSpec::Shift).unwrap();
            let b = allocate_deltas(&moved, &idx, Mode::PerObservation, &TransformSpec::Shift).unwrap();
            for (x, y) in a.fractions.values().zip(b.fractions.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn clipping_zeroes_hurtful_contributors(deltas in deltas_strategy()) {
            let idx = one_to_one(deltas.len());
            let a = allocate_deltas(&deltas, &idx, Mode::PerObservation, &TransformSpec::Clipping).unwrap();
            if !a.fallback {
                for (d, f) in deltas.iter().zip(a.fractions.values()) {
                    if *d <= 0.0 {
                        prop_assert_eq!(*f, 0.0);
                    }
                }
            }
        }
    }
}
