use super::ParamVector;

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
///
/// Used as an independent oracle for [`super::Tape::backward`]; it only
/// evaluates `f` and never touches the tape.
pub fn finite_difference_gradient<F>(mut f: F, theta: &ParamVector, step: f64) -> ParamVector
where
    F: FnMut(&ParamVector) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut grad = theta.zeros_like();
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = theta.values()[i];
        probe.values_mut()[i] = orig + step;
        let up = f(&probe);
        probe.values_mut()[i] = orig - step;
        let down = f(&probe);
        probe.values_mut()[i] = orig;
        grad.values_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let theta = ParamVector::from_parts(
            vec![super::super::Segment { name: "t".into(), offset: 0, len: 1 }],
            vec![1.0],
        )
        .unwrap();
        let g = finite_difference_gradient(|p| p.values()[0].powi(3), &theta, 1e-4);
        assert!((g.values()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = ParamVector::zeros([("a", 4)]).unwrap();
        let g = finite_difference_gradient(|_| 2.5, &theta, 1e-3);
        assert!(g.values().iter().all(|&v| v == 0.0));
    }
}
