use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detector cutoffs. Cosine thresholds live in `(0, 1]`; `1.0` only fires on
/// exact duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub tau_fp: f64,
    pub tau_gp: f64,
    pub tau_fp_gp: f64,
    pub tau_ah_abs: f64,
    pub tau_ah_rel: f64,
    pub tau_reg: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_fp: 0.80,
            tau_gp: 0.85,
            tau_fp_gp: 0.85,
            tau_ah_abs: 0.30,
            tau_ah_rel: -1.0,
            tau_reg: 0.80,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_fp", self.tau_fp),
            ("tau_gp", self.tau_gp),
            ("tau_fp_gp", self.tau_fp_gp),
            ("tau_reg", self.tau_reg),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!(
                    "{name} = {v} is not a cosine threshold in (0, 1]"
                )));
            }
        }
        if !(self.tau_ah_abs >= 0.0) {
            return Err(Error::invalid(format!(
                "tau_ah_abs = {} must be >= 0",
                self.tau_ah_abs
            )));
        }
        if self.tau_ah_rel.is_nan() {
            return Err(Error::invalid("tau_ah_rel is NaN"));
        }
        Ok(())
    }

    /// Thresholds under which the training filter flags nothing.
    pub fn vacuous() -> Self {
        Self {
            tau_fp: 1.0,
            tau_gp: 1.0,
            tau_fp_gp: 1.0,
            tau_ah_abs: 0.0,
            tau_ah_rel: -1e9,
            tau_reg: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let t = Thresholds::default();
        t.validate().unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Thresholds>(&s).unwrap(), t);
        let partial: Thresholds = serde_json::from_str(r#"{"tau_fp": 0.5}"#).unwrap();
        assert_eq!(partial.tau_gp, 0.85);
        Thresholds::vacuous().validate().unwrap();
        assert!(Thresholds {
            tau_fp: 0.0,
            ..t.clone()
        }
        .validate()
        .is_err());
        assert!(Thresholds {
            tau_reg: 1.5,
            ..t.clone()
        }
        .validate()
        .is_err());
        assert!(Thresholds {
            tau_ah_rel: f64::NAN,
            ..t
        }
        .validate()
        .is_err());
    }
}
