//! Vector kernels shared by the model, the losses and the uncertainty scores.

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate.
pub const NORM_TOLERANCE: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    normalize_in("normalize", v).map(|(u, _)| u)
}

/// Like [`normalize`] but also returns the original norm and names the caller
/// in the error.
pub(crate) fn normalize_in(context: &'static str, v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = l2_norm(v);
    if !(norm > NORM_TOLERANCE) {
        return Err(Error::DegenerateNorm { context, norm });
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Temperature softmax, `exp(z_i / tau) / sum_j exp(z_j / tau)`, evaluated
/// with max-subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::param("softmax over an empty logit vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::param("softmax over non-finite logits"));
    }
    Ok(softmax_unchecked(logits, tau))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `ln softmax_temp(logits, tau)` through log-sum-exp.
pub fn log_softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::param("log-softmax over an empty logit vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = max
        + logits
            .iter()
            .map(|z| (z / tau - max).exp())
            .sum::<f64>()
            .ln();
    Ok(logits.iter().map(|z| z / tau - lse).collect())
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);

        let unit = [0.6, 0.8];
        let again = normalize(&unit).unwrap();
        assert!((again[0] - 0.6).abs() < 1e-15 && (again[1] - 0.8).abs() < 1e-15);

        assert!(matches!(
            normalize(&[0.0, 0.0]),
            Err(Error::DegenerateNorm { .. })
        ));
        assert!(normalize(&[1e-13, 0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        // e / (e + 1) and 1 / (e + 1)
        let p = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);

        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_temp(&[1000.0, 0.0, -1000.0], 0.1).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let p = softmax_temp(&z, 0.7).unwrap();
        let lp = log_softmax_temp(&z, 0.7).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-50.0f64..50.0, 1..12), tau in 0.05f64..5.0) {
            let p = softmax_temp(&z, tau).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn softmax_is_permutation_equivariant(z in prop::collection::vec(-20.0f64..20.0, 2..10), shift in 1usize..9) {
            let n = z.len();
            let rotated: Vec<f64> = (0..n).map(|i| z[(i + shift) % n]).collect();
            let p = softmax_temp(&z, 1.0).unwrap();
            let q = softmax_temp(&rotated, 1.0).unwrap();
            for i in 0..n {
                prop_assert!((q[i] - p[(i + shift) % n]).abs() <= 1e-15);
            }
        }

        #[test]
        fn temperature_keeps_argmax(z in prop::collection::vec(-20.0f64..20.0, 2..10), tau in 0.05f64..5.0) {
            let a = argmax(&softmax_temp(&z, tau).unwrap());
            let b = argmax(&softmax_temp(&z, 1.0).unwrap());
            prop_assert_eq!(z[a], z[b]);
        }

        #[test]
        fn normalize_gives_unit_norm(v in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let u = normalize(&v).unwrap();
            prop_assert!((l2_norm(&u) - 1.0).abs() < 1e-12);
        }
    }
}
