//! Scalar activation functions shared by the graph and by plain numeric code.

/// Default negative slope for leaky ReLU layers.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `x` for `x ≥ 0`, `slope·x` otherwise. The kink belongs to the positive branch.
#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-500.0, 500.0)).exp())
}

/// `ln(1 + eˣ)`, returning `x` itself above 30.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(leaky_relu(-1.0, 0.01), -0.01);
        assert_eq!(leaky_relu(2.0, 0.01), 2.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn extreme_arguments_stay_finite() {
        assert_eq!(sigmoid(1e6), 1.0);
        assert!(sigmoid(-1e6) > 0.0 || sigmoid(-1e6) == 0.0);
        assert!(sigmoid(-1e6).is_finite());
        assert_eq!(softplus(1e6), 1e6);
        assert!(softplus(-1e6) >= 0.0);
        assert!((softplus(30.0) - 30.0).abs() < 1e-12);
    }
}
