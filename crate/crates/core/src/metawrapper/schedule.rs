use serde::{Deserialize, Serialize};

/// Outer learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSpec {
    Constant { gamma: f64 },
    /// `gamma0 * rho^epoch`
    Exponential { gamma0: f64, rho: f64 },
    /// `gamma0 / sqrt(i)`
    InvSqrt { gamma0: f64 },
}

impl Default for LrSpec {
    fn default() -> Self {
        LrSpec::Exponential { gamma0: 0.12, rho: 0.98 }
    }
}

/// Learning rate at global step `i` (from 1) during `epoch` (from 0).
pub fn lr_schedule(i: usize, epoch: usize, spec: &LrSpec) -> f64 {
    debug_assert!(i >= 1);
    match *spec {
        LrSpec::Constant { gamma } => gamma,
        LrSpec::Exponential { gamma0, rho } => gamma0 * rho.powi(epoch as i32),
        LrSpec::InvSqrt { gamma0 } => gamma0 / (i as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(lr_schedule(4, 0, &LrSpec::InvSqrt { gamma0: 1.0 }), 0.5);
        let g = lr_schedule(1, 2, &LrSpec::Exponential { gamma0: 0.1, rho: 0.9 });
        assert!((g - 0.081).abs() < 1e-15);
        for i in [1, 10, 1000] {
            assert_eq!(lr_schedule(i, i, &LrSpec::Constant { gamma: 0.01 }), 0.01);
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(toml::from_str::<LrSpec>("kind = \"cosine\"\ngamma = 1.0").is_err());
        let s: LrSpec = toml::from_str("kind = \"inv_sqrt\"\ngamma0 = 2.0").unwrap();
        assert_eq!(s, LrSpec::InvSqrt { gamma0: 2.0 });
    }
}
