//! Closed-form information bounds for a uniform `B`-bit watermark payload.
//!
//! All entropies are in bits. The bounds relate the mutual information a
//! watermark channel preserves to block error, per-bit accuracy and the soft
//! (Brier-type) accuracy used during training.

use serde::Serialize;

use crate::{Error, Result};

/// One evaluated bound, with the applicability flag made explicit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub bound_name: &'static str,
    pub b_bits: u32,
    pub input_quantity: f64,
    pub bound_value: f64,
    pub vacuous: bool,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_bits(b_bits: u32) -> Result<()> {
    if b_bits == 0 {
        return Err(Error::invalid("message length B must be at least 1"));
    }
    Ok(())
}

/// Binary entropy `H2(p)` in bits, with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    check_prob("p", p)?;
    Ok(h2(p))
}

pub(crate) fn h2(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    term(p) + term(1.0 - p)
}

/// Lower bound on block error `P_e >= 1 - (I + 1) / B`, clamped at zero.
pub fn fano_block_error_lower_bound(mi_bits: f64, b_bits: u32) -> Result<f64> {
    check_bits(b_bits)?;
    if !(mi_bits >= 0.0) {
        return Err(Error::invalid(format!(
            "mutual information must be non-negative, got {mi_bits}"
        )));
    }
    Ok((1.0 - (mi_bits + 1.0) / f64::from(b_bits)).max(0.0))
}

/// `I >= B (1 - H2(1 - acc))`. Below `acc = 0.5` the value is still the
/// formula's, but the bound is weak there (see [`acc_to_mi_report`]).
pub fn acc_to_mi_lower_bound(acc_bar: f64, b_bits: u32) -> Result<f64> {
    check_prob("average bit accuracy", acc_bar)?;
    check_bits(b_bits)?;
    Ok(f64::from(b_bits) * (1.0 - h2(1.0 - acc_bar)))
}

/// Capacity implied by enforcing bit accuracy `tau`, for `tau` in `[1/2, 1]`.
pub fn tau_capacity_bound(tau: f64, b_bits: u32) -> Result<f64> {
    check_prob("tau", tau)?;
    if tau < 0.5 {
        return Err(Error::invalid(format!(
            "tau capacity bound is defined for tau in [0.5, 1], got {tau}"
        )));
    }
    acc_to_mi_lower_bound(tau, b_bits)
}

/// Hard-accuracy floor `4 s - 3` implied by soft accuracy `s`, with the
/// vacuity flag set when the floor drops below one half.
pub fn calibration_hard_from_soft(soft_acc: f64) -> Result<(f64, bool)> {
    check_prob("soft accuracy", soft_acc)?;
    let floor = 4.0 * soft_acc - 3.0;
    Ok((floor, floor < 0.5))
}

/// `I >= B (1 - H2(4 (1 - tau)))`, valid for `tau >= 7/8`.
pub fn soft_mi_lower_bound(tau: f64, b_bits: u32) -> Result<f64> {
    check_prob("tau", tau)?;
    check_bits(b_bits)?;
    if tau < 7.0 / 8.0 {
        return Err(Error::invalid(format!(
            "soft MI bound vacuous below 7/8 (tau = {tau})"
        )));
    }
    Ok(f64::from(b_bits) * (1.0 - h2(4.0 * (1.0 - tau))))
}

/// Block error `1 - acc^B` when bit errors are independent.
pub fn iid_block_error(acc_per_bit: f64, b_bits: u32) -> Result<f64> {
    check_prob("per-bit accuracy", acc_per_bit)?;
    Ok(1.0 - acc_per_bit.powi(b_bits as i32))
}

pub fn binary_entropy_report(p: f64) -> Result<BoundReport> {
    Ok(BoundReport {
        bound_name: "binary_entropy",
        b_bits: 1,
        input_quantity: p,
        bound_value: binary_entropy(p)?,
        vacuous: false,
    })
}

pub fn fano_report(mi_bits: f64, b_bits: u32) -> Result<BoundReport> {
    let v = fano_block_error_lower_bound(mi_bits, b_bits)?;
    Ok(BoundReport {
        bound_name: "fano_block_error",
        b_bits,
        input_quantity: mi_bits,
        bound_value: v,
        // The inequality says nothing once it clamps to zero.
        vacuous: 1.0 - (mi_bits + 1.0) / f64::from(b_bits) <= 0.0,
    })
}

pub fn acc_to_mi_report(acc_bar: f64, b_bits: u32) -> Result<BoundReport> {
    Ok(BoundReport {
        bound_name: "acc_to_mi",
        b_bits,
        input_quantity: acc_bar,
        bound_value: acc_to_mi_lower_bound(acc_bar, b_bits)?,
        vacuous: acc_bar < 0.5,
    })
}

pub fn tau_capacity_report(tau: f64, b_bits: u32) -> Result<BoundReport> {
    Ok(BoundReport {
        bound_name: "tau_capacity",
        b_bits,
        input_quantity: tau,
        bound_value: tau_capacity_bound(tau, b_bits)?,
        vacuous: false,
    })
}

pub fn calibration_report(soft_acc: f64) -> Result<BoundReport> {
    let (v, vacuous) = calibration_hard_from_soft(soft_acc)?;
    Ok(BoundReport {
        bound_name: "calibration_hard_from_soft",
        b_bits: 1,
        input_quantity: soft_acc,
        bound_value: v,
        vacuous,
    })
}

/// Soft-accuracy MI bound; below 7/8 the row is reported as vacuous with a
/// zero value instead of failing.
pub fn soft_mi_report(tau: f64, b_bits: u32) -> Result<BoundReport> {
    check_prob("tau", tau)?;
    check_bits(b_bits)?;
    let (v, vacuous) = match soft_mi_lower_bound(tau, b_bits) {
        Ok(v) => (v, false),
        Err(_) => (0.0, true),
    };
    Ok(BoundReport {
        bound_name: "soft_mi",
        b_bits,
        input_quantity: tau,
        bound_value: v,
        vacuous,
    })
}

pub fn iid_block_error_report(acc: f64, b_bits: u32) -> Result<BoundReport> {
    Ok(BoundReport {
        bound_name: "iid_block_error",
        b_bits,
        input_quantity: acc,
        bound_value: iid_block_error(acc, b_bits)?,
        vacuous: false,
    })
}

/// The worked example at average accuracy 0.9 and a 64-bit payload:
/// `H2(0.1)`, the accuracy-to-MI bound, the Fano bound fed by it, and the
/// independent-error block error.
pub fn remark_quartet() -> Result<Vec<BoundReport>> {
    let (acc, b) = (0.9, 64);
    let mi = acc_to_mi_lower_bound(acc, b)?;
    let fano_row = fano_report(mi, b)?;
    Ok(vec![
        binary_entropy_report(1.0 - acc)?,
        acc_to_mi_report(acc, b)?,
        fano_row,
        iid_block_error_report(acc, b)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.1).unwrap() - 0.469).abs() < 0.001);
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn fano_examples() {
        assert_eq!(fano_block_error_lower_bound(34.0, 64).unwrap(), 1.0 - 35.0 / 64.0);
        assert!((fano_block_error_lower_bound(34.0, 64).unwrap() - 0.453).abs() < 0.001);
        assert_eq!(fano_block_error_lower_bound(7.0, 8).unwrap(), 0.0);
        assert_eq!(fano_block_error_lower_bound(0.0, 8).unwrap(), 0.875);
        assert!(fano_block_error_lower_bound(-1.0, 8).is_err());
        assert!(fano_block_error_lower_bound(1.0, 0).is_err());
    }

    #[test]
    fn acc_to_mi_examples() {
        let v = acc_to_mi_lower_bound(0.9, 64).unwrap();
        assert!((v - 33.98).abs() < 0.05, "{v}");
        assert_eq!(acc_to_mi_lower_bound(1.0, 17).unwrap(), 17.0);
        assert_eq!(acc_to_mi_lower_bound(0.5, 17).unwrap(), 0.0);
        assert!(acc_to_mi_lower_bound(1.1, 17).is_err());
    }

    #[test]
    fn tau_capacity_examples() {
        assert_eq!(tau_capacity_bound(1.0, 48).unwrap(), 48.0);
        assert_eq!(tau_capacity_bound(0.5, 48).unwrap(), 0.0);
        assert_eq!(
            tau_capacity_bound(0.9, 64).unwrap(),
            acc_to_mi_lower_bound(0.9, 64).unwrap()
        );
        assert!(tau_capacity_bound(0.49, 48).is_err());
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibration_hard_from_soft(1.0).unwrap(), (1.0, false));
        assert_eq!(calibration_hard_from_soft(7.0 / 8.0).unwrap(), (0.5, false));
        let (v, vac) = calibration_hard_from_soft(0.8).unwrap();
        assert!((v - 0.2).abs() < 1e-12 && vac);
    }

    #[test]
    fn soft_mi_examples() {
        assert_eq!(soft_mi_lower_bound(1.0, 32).unwrap(), 32.0);
        assert_eq!(soft_mi_lower_bound(7.0 / 8.0, 32).unwrap(), 0.0);
        let err = soft_mi_lower_bound(0.8, 32).unwrap_err().to_string();
        assert!(err.contains("vacuous below 7/8"));
        assert!(soft_mi_report(0.8, 32).unwrap().vacuous);
    }

    #[test]
    fn iid_examples() {
        assert!((iid_block_error(0.9, 64).unwrap() - 0.99882).abs() < 0.0005);
        assert_eq!(iid_block_error(1.0, 12).unwrap(), 0.0);
        assert_eq!(iid_block_error(0.5, 1).unwrap(), 0.5);
    }

    #[test]
    fn remark_rows() {
        let rows = remark_quartet().unwrap();
        assert!((rows[0].bound_value - 0.469).abs() < 0.001);
        assert!((rows[1].bound_value - 34.0).abs() < 0.05);
        assert!((rows[2].bound_value - 0.453).abs() < 0.002);
        assert!((rows[3].bound_value - 0.9988).abs() < 0.0005);
    }
}
