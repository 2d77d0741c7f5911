use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Mish,
    Gelu,
    Identity,
}

/// Nonlinearity applied to the final layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Standard normal CDF.
#[inline]
fn phi_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).gauss_erf())
}

/// Standard normal density.
#[inline]
fn phi_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (T::lit(-0.5) * x * x).exp()
}

impl Activation {
    #[inline]
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Mish => x * mish_tanh_softplus(x).0,
            Activation::Gelu => x * phi_cdf(x),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        self.eval_with_derivative(x).1
    }

    /// Value and derivative sharing one transcendental evaluation.
    #[inline]
    pub fn eval_with_derivative<T: Scalar>(self, x: T) -> (T, T) {
        match self {
            Activation::Mish => {
                let (t, s) = mish_tanh_softplus(x);
                (x * t, t + x * (T::one() - t * t) * s)
            }
            Activation::Gelu => {
                let cdf = phi_cdf(x);
                (x * cdf, cdf + x * phi_pdf(x))
            }
            Activation::Identity => (x, T::one()),
        }
    }
}

/// `(tanh(softplus(x)), sigmoid(x))` from a single exponential:
/// with `n = e^x (e^x + 2)`, `tanh(ln(1 + e^x)) = n / (n + 2)`.
#[inline]
fn mish_tanh_softplus<T: Scalar>(x: T) -> (T, T) {
    if x > T::lit(20.0) {
        return (T::one(), sigmoid(x));
    }
    let e = x.exp();
    let n = e * (e + T::lit(2.0));
    (n / (n + T::lit(2.0)), e / (T::one() + e))
}

impl OutputActivation {
    #[inline]
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            OutputActivation::Identity => x,
            OutputActivation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activated output `y`.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            OutputActivation::Identity => T::one(),
            OutputActivation::Tanh => T::one() - y * y,
        }
    }
}

/// Evaluates a hidden activation at a single point.
pub fn activation_eval<T: Scalar>(kind: Activation, x: T) -> T {
    kind.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_a_fixed_point() {
        assert_eq!(Activation::Mish.eval(0.0f64), 0.0);
        assert_eq!(Activation::Gelu.eval(0.0f64), 0.0);
        assert_eq!(Activation::Identity.eval(0.0f64), 0.0);
    }

    #[test]
    fn mish_at_one_matches_closed_form() {
        // 1 * tanh(ln(1 + e)), evaluated with mpmath at 30 digits.
        let expected = 0.865_098_388_267_310_3_f64;
        assert!((Activation::Mish.eval(1.0f64) - expected).abs() < 1e-15);
    }

    #[test]
    fn gelu_at_one_matches_closed_form() {
        // 1 * Phi(1) = 0.5 * (1 + erf(1/sqrt 2)).
        let expected = 0.841_344_746_068_542_9_f64;
        assert!((Activation::Gelu.eval(1.0f64) - expected).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for kind in [Activation::Mish, Activation::Gelu, Activation::Identity] {
            for i in -40..=40 {
                let x = i as f64 * 0.2;
                let fd = (kind.eval(x + h) - kind.eval(x - h)) / (2.0 * h);
                assert!(
                    (fd - kind.derivative(x)).abs() < 1e-8,
                    "{kind:?} at {x}: {fd} vs {}",
                    kind.derivative(x)
                );
            }
        }
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!(Activation::Mish.eval(-1000.0f64).is_finite());
    }
}
