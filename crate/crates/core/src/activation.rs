//! Sigmoid and tanh with derivatives up to order three, and
//! `h = sigma' * sigma` with its first derivative.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Sigmoid,
    Tanh,
}

impl std::str::FromStr for ActivationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            other => Err(format!("unknown activation '{other}'")),
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
        })
    }
}

/// Logistic function without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ActivationKind {
    /// Derivative of order `order` (0..=3) at `x`.
    ///
    /// # Panics
    /// If `order > 3`.
    pub fn value(self, order: u8, x: f64) -> f64 {
        match self {
            Self::Sigmoid => {
                let s = sigmoid(x);
                // sigma(x) sigma(-x) keeps precision in the upper tail
                let d1 = s * sigmoid(-x);
                match order {
                    0 => s,
                    1 => d1,
                    2 => d1 * (1.0 - 2.0 * s),
                    3 => d1 * (1.0 - 6.0 * d1),
                    _ => panic!("activation derivative order {order} > 3"),
                }
            }
            Self::Tanh => {
                let t = x.tanh();
                let d1 = 1.0 - t * t;
                match order {
                    0 => t,
                    1 => d1,
                    2 => -2.0 * t * d1,
                    3 => -2.0 * d1 * (1.0 - 3.0 * t * t),
                    _ => panic!("activation derivative order {order} > 3"),
                }
            }
        }
    }

    /// `(sigma(x), sigma'(x))` with one transcendental evaluation.
    pub fn value_and_slope(self, x: f64) -> (f64, f64) {
        match self {
            Self::Sigmoid => {
                let e = (-x.abs()).exp();
                let big = 1.0 / (1.0 + e);
                let small = e / (1.0 + e);
                let s = if x >= 0.0 { big } else { small };
                (s, big * small)
            }
            Self::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
        }
    }

    /// `h(x) = sigma'(x) sigma(x)` for `order = 0`, `h'(x)` for `order = 1`.
    ///
    /// # Panics
    /// If `order > 1`.
    pub fn h(self, order: u8, x: f64) -> f64 {
        let s = self.value(0, x);
        let d1 = self.value(1, x);
        match order {
            0 => d1 * s,
            1 => self.value(2, x) * s + d1 * d1,
            _ => panic!("h derivative order {order} > 1"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActivationKind::*;

    #[test]
    fn reference_values() {
        assert_eq!(Sigmoid.value(0, 0.0), 0.5);
        assert_eq!(Sigmoid.value(1, 0.0), 0.25);
        assert_eq!(Tanh.value(0, 0.0), 0.0);
        assert_eq!(Sigmoid.h(0, 0.0), 0.125);
        // 1/(1+e^-2) to 40 digits: 0.8807970779778824440597291413023967952061
        assert!((Sigmoid.value(0, 2.0) - 0.880_797_077_977_882_4).abs() < 1e-13);
    }

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let e = 1e-3 * (1.0 + x.abs());
        (-f(x + 2.0 * e) + 8.0 * f(x + e) - 8.0 * f(x - e) + f(x - 2.0 * e)) / (12.0 * e)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for act in [Sigmoid, Tanh] {
            for &x in &[-5.0, -1.3, 0.0, 0.7, 3.0, 9.0] {
                for order in 1..=3u8 {
                    let num = fd(|y| act.value(order - 1, y), x);
                    let ana = act.value(order, x);
                    assert!((num - ana).abs() <= 1e-7 * (1.0 + ana.abs()), "{act} {order} {x}");
                }
                let num = fd(|y| act.h(0, y), x);
                let ana = act.h(1, x);
                assert!((num - ana).abs() <= 1e-6 * ana.abs().max(1e-6), "{act} h' at {x}");
            }
        }
    }

    #[test]
    fn value_and_slope_agree_with_value() {
        for act in [Sigmoid, Tanh] {
            for &x in &[-40.0, -3.0, -0.1, 0.0, 0.4, 7.0, 40.0] {
                let (s, ds) = act.value_and_slope(x);
                assert!((s - act.value(0, x)).abs() <= 1e-16);
                assert!((ds - act.value(1, x)).abs() <= 1e-15 * act.value(1, x).max(1e-300));
            }
        }
    }

    #[test]
    fn h_saturates() {
        assert!(Sigmoid.h(0, 50.0) < 1e-20);
        assert!(Sigmoid.h(0, -50.0) < 1e-20);
        assert!(Sigmoid.value(0, -800.0).is_finite());
        assert!(Sigmoid.value(3, 800.0).is_finite());
    }

    #[test]
    fn parses_names() {
        assert_eq!("tanh".parse::<ActivationKind>().unwrap(), Tanh);
        assert!("relu".parse::<ActivationKind>().is_err());
    }
}
