use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clip threshold applied to the FSL_OC server gradient when none is given.
pub const DEFAULT_CLIP_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "FSL_MC")]
    FslMc,
    #[serde(rename = "FSL_OC")]
    FslOc,
    #[serde(rename = "FSL_AN")]
    FslAn,
    #[serde(rename = "CSE_FSL")]
    CseFsl,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::FslMc,
        StrategyKind::FslOc,
        StrategyKind::FslAn,
        StrategyKind::CseFsl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FslMc => "FSL_MC",
            StrategyKind::FslOc => "FSL_OC",
            StrategyKind::FslAn => "FSL_AN",
            StrategyKind::CseFsl => "CSE_FSL",
        }
    }

    /// Clients train against a local auxiliary loss.
    pub fn uses_aux(self) -> bool {
        matches!(self, StrategyKind::FslAn | StrategyKind::CseFsl)
    }

    /// The server keeps one shared model instead of one per client.
    pub fn single_server_model(self) -> bool {
        matches!(self, StrategyKind::FslOc | StrategyKind::CseFsl)
    }

    /// The server returns smashed-data gradients to clients.
    pub fn sends_grad_down(self) -> bool {
        !self.uses_aux()
    }

    pub fn server_copies(self, n_clients: usize) -> usize {
        if self.single_server_model() {
            1
        } else {
            n_clients
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::usage(format!("unknown strategy `{s}`")))
    }
}

fn one() -> usize {
    1
}

/// A strategy with its knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Batches per smashed-data upload; always 1 except for CSE_FSL.
    #[serde(default = "one")]
    pub h: usize,
    /// FSL_OC only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_threshold: Option<f64>,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            h: 1,
            clip_threshold: None,
        }
    }

    pub fn cse_fsl(h: usize) -> Self {
        Self {
            h,
            ..Self::new(StrategyKind::CseFsl)
        }
    }

    pub fn fsl_oc(clip_threshold: f64) -> Self {
        Self {
            clip_threshold: Some(clip_threshold),
            ..Self::new(StrategyKind::FslOc)
        }
    }

    /// The threshold FSL_OC actually uses.
    pub fn effective_clip(&self) -> Option<f64> {
        (self.kind == StrategyKind::FslOc)
            .then(|| self.clip_threshold.unwrap_or(DEFAULT_CLIP_THRESHOLD))
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::config("strategy.h", "must be at least 1"));
        }
        if self.h != 1 && self.kind != StrategyKind::CseFsl {
            return Err(Error::config(
                "strategy.h",
                format!("{} uploads every batch; h must be 1", self.kind),
            ));
        }
        if let Some(c) = self.clip_threshold {
            if self.kind != StrategyKind::FslOc {
                return Err(Error::config(
                    "strategy.clip_threshold",
                    format!("only FSL_OC clips, not {}", self.kind),
                ));
            }
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(
                    "strategy.clip_threshold",
                    format!("must be positive, got {c}"),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StrategyKind::CseFsl => write!(f, "CSE_FSL(h={})", self.h),
            k => write!(f, "{k}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_per_kind() {
        use StrategyKind::*;
        let copies: Vec<usize> = StrategyKind::ALL.iter().map(|k| k.server_copies(5)).collect();
        assert_eq!(copies, vec![5, 1, 5, 1]);
        assert!(FslMc.sends_grad_down() && FslOc.sends_grad_down());
        assert!(!FslAn.sends_grad_down() && !CseFsl.sends_grad_down());
    }

    #[test]
    fn serde_names() {
        let s = serde_json::to_string(&StrategyKind::CseFsl).unwrap();
        assert_eq!(s, "\"CSE_FSL\"");
        let k: StrategyKind = serde_json::from_str("\"FSL_OC\"").unwrap();
        assert_eq!(k, StrategyKind::FslOc);
        assert_eq!("fsl_an".parse::<StrategyKind>().unwrap(), StrategyKind::FslAn);
    }

    #[test]
    fn validation() {
        assert!(Strategy::cse_fsl(0).validate().is_err());
        assert!(Strategy::cse_fsl(5).validate().is_ok());
        let mut s = Strategy::new(StrategyKind::FslMc);
        s.h = 2;
        assert!(s.validate().is_err());
        assert!(Strategy::fsl_oc(-1.0).validate().is_err());
        assert_eq!(Strategy::new(StrategyKind::FslOc).effective_clip(), Some(1.0));
        assert_eq!(Strategy::new(StrategyKind::FslMc).effective_clip(), None);
    }
}
