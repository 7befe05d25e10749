//! Replacement of NaN/Inf samples by the mean of neighbouring finite samples.
//!
//! Each invalid sample takes the mean of six finite samples from the same
//! lead: the three nearest on the left and the three nearest on the right,
//! skipping over other invalid samples. When one side has fewer than three
//! finite samples (record boundary), the shortfall is taken from the other
//! side so the mean is always over six values.

use ndarray::{Array2, ArrayViewMut1, Axis};

use crate::error::{MerlError, Result};
use crate::scalar::Scalar;

const NEIGHBOURS: usize = 6;
const PER_SIDE: usize = NEIGHBOURS / 2;
/// Minimum finite samples a lead needs to be considered recoverable.
pub const MIN_FINITE_PER_LEAD: usize = NEIGHBOURS;

/// Repairs every lead of `signal`. `record_id` is only used for error reporting.
pub fn repair_invalid<F: Scalar>(signal: &Array2<F>, record_id: &str) -> Result<Array2<F>> {
    let mut out = signal.clone();
    for (lead, row) in out.axis_iter_mut(Axis(0)).enumerate() {
        repair_lead(row, record_id, lead)?;
    }
    Ok(out)
}

/// In-place repair of a single lead.
pub fn repair_lead<F: Scalar>(mut lead: ArrayViewMut1<F>, record_id: &str, lead_idx: usize) -> Result<()> {
    let finite: Vec<usize> = (0..lead.len()).filter(|&i| lead[i].is_finite()).collect();
    if finite.len() == lead.len() {
        return Ok(());
    }
    if finite.len() < MIN_FINITE_PER_LEAD {
        return Err(MerlError::UnrecoverableLead {
            record_id: record_id.to_string(),
            lead: lead_idx,
        });
    }
    let original = lead.to_owned();
    for i in 0..lead.len() {
        if original[i].is_finite() {
            continue;
        }
        // `finite` is sorted: everything before `split` lies left of i.
        let split = finite.partition_point(|&j| j < i);
        let left_avail = split;
        let right_avail = finite.len() - split;
        let mut take_left = left_avail.min(PER_SIDE);
        let mut take_right = right_avail.min(PER_SIDE);
        let short = NEIGHBOURS - take_left - take_right;
        if short > 0 {
            if left_avail > take_left {
                take_left += short.min(left_avail - take_left);
            } else {
                take_right += short.min(right_avail - take_right);
            }
        }
        let sum: F = finite[split - take_left..split + take_right]
            .iter()
            .map(|&j| original[j])
            .sum();
        lead[i] = sum / F::of_usize(NEIGHBOURS);
    }
    Ok(())
}

pub fn count_non_finite<F: Scalar>(signal: &Array2<F>) -> usize {
    signal.iter().filter(|v| !v.is_finite()).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    /// Independent reading of the neighbour rule: walk outward one index at a
    /// time, collecting finite values per side, then rebalance.
    fn scan_oracle(lead: &[f64]) -> Vec<f64> {
        let mut out = lead.to_vec();
        for i in 0..lead.len() {
            if lead[i].is_finite() {
                continue;
            }
            let left: Vec<f64> = (0..i).rev().map(|j| lead[j]).filter(|v| v.is_finite()).collect();
            let right: Vec<f64> = (i + 1..lead.len()).map(|j| lead[j]).filter(|v| v.is_finite()).collect();
            let mut nl = left.len().min(3);
            let mut nr = right.len().min(3);
            while nl + nr < 6 {
                if nl < left.len() {
                    nl += 1;
                } else {
                    nr += 1;
                }
            }
            let total: f64 = left[..nl].iter().chain(&right[..nr]).sum();
            out[i] = total / 6.0;
        }
        out
    }

    fn repair_vec(values: &[f64]) -> Vec<f64> {
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap();
        repair_invalid(&m, "t").unwrap().row(0).to_vec()
    }

    #[test]
    fn single_interior_gap() {
        let out = repair_vec(&[1., 2., 3., f64::NAN, 5., 6., 7.]);
        assert_eq!(out, vec![1., 2., 3., 4., 5., 6., 7.]);
    }

    #[test]
    fn clean_lead_is_bit_identical() {
        let m = array![[0.1f32, -2.5, 3.25, 1e-30, 7.0, 8.0, 9.0, 10.0]];
        let out = repair_invalid(&m, "t").unwrap();
        for (a, b) in m.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn leading_boundary_takes_all_from_right() {
        let lead = [f64::NAN, 2., 3., 4., 5., 6., 7., 8.];
        let out = repair_vec(&lead);
        assert_eq!(out[0], 4.5);
        assert_eq!(out, scan_oracle(&lead));
    }

    #[test]
    fn runs_and_infinities() {
        let lead = [1., 2., f64::INFINITY, f64::NAN, f64::NEG_INFINITY, 6., 7., 8., 9., 10., f64::NAN];
        let out = repair_vec(&lead);
        assert!(out.iter().all(|v| v.is_finite()));
        assert_eq!(out, scan_oracle(&lead));
        // index 2: left {2,1}, right {6,7,8} plus one more from the right {9}.
        assert!((out[2] - (1. + 2. + 6. + 7. + 8. + 9.) / 6.).abs() < 1e-12);
    }

    #[test]
    fn too_few_finite_is_an_error() {
        let m = array![[1.0f64, 2., 3., 4., 5., 6.], [1., 2., 3., f64::NAN, 5., f64::NAN]];
        match repair_invalid(&m, "rec-9") {
            Err(MerlError::UnrecoverableLead { record_id, lead }) => {
                assert_eq!(record_id, "rec-9");
                assert_eq!(lead, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn lead_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![
                8 => -100.0f64..100.0,
                1 => Just(f64::NAN),
                1 => Just(f64::INFINITY),
            ],
            7..60,
        )
        .prop_filter("needs 6 finite", |v| v.iter().filter(|x| x.is_finite()).count() >= 6)
    }

    proptest! {
        #[test]
        fn matches_scan_oracle(lead in lead_strategy()) {
            let got = repair_vec(&lead);
            let want = scan_oracle(&lead);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-9);
            }
        }

        #[test]
        fn idempotent(lead in lead_strategy()) {
            let once = repair_vec(&lead);
            let twice = repair_vec(&once);
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn count_non_finite_counts() {
        let v = Array1::from(vec![1.0f32, f32::NAN, f32::INFINITY]).insert_axis(ndarray::Axis(0));
        assert_eq!(count_non_finite(&v.to_owned()), 2);
    }
}
