//! Scalar nonlinearities shared by the graph ops and the value-level wrappers.

/// Standard normal CDF.
pub(crate) fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub(crate) fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (std::f64::consts::TAU).sqrt()
}

/// Exact GELU, `x * Phi(x)` with the error-function CDF.
pub(crate) fn gelu(x: f64) -> f64 {
    x * phi(x)
}

/// Derivative of the exact GELU.
pub(crate) fn dgelu(x: f64) -> f64 {
    phi(x) + x * phi_pdf(x)
}

/// Tanh-approximated GELU, kept for reference against the exact form.
pub fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.044715;
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + C * x * x * x)).tanh())
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
