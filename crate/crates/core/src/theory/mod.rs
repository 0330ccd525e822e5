//! Randomized numerical certification of the feature-diversity bounds, plus
//! the collapse demonstration that stacks modules and tracks `d_M` by depth.

mod checks;
mod collapse;
mod instance;
mod spectral;
mod suite;

pub use checks::{check_inequality, EQUALITY_TOL, INEQUALITY_TOL};
pub use collapse::{collapse_demo, CollapseVariant, DecayCurve, DecayPoint};
pub use instance::{sample_instance, Dims, DimsRanges, MlpLayer, MsaLayer, TrialInstance};
pub use suite::{perron_frobenius_demo, run_suite, KindSummary, PerronFrobeniusReport, TheoryReport};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// The bound a check certifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundKind {
    Lemma1Weight,
    Lemma1Activation,
    Lemma1Convex,
    Lemma1Attention,
    Lemma2ConcatEq,
    Thm1Singlehead,
    Thm2Msa,
    Thm2MsaStack,
    Thm3Mlp,
    Thm3MlpStack,
    Thm4Augmsa,
    Thm4AugmsaStack,
    Thm7Siaf,
    Thm7SiafStack,
    Thm8CombinedVanilla,
    Thm9CombinedPangu,
    NoiseLemma3Msa,
    NoiseLemma4Linear,
    NoiseThm5NonlinearStrict,
    NoiseThm6Augmsa,
    NoiseDiversityTriangle,
}

impl BoundKind {
    pub const ALL: [BoundKind; 21] = [
        BoundKind::Lemma1Weight,
        BoundKind::Lemma1Activation,
        BoundKind::Lemma1Convex,
        BoundKind::Lemma1Attention,
        BoundKind::Lemma2ConcatEq,
        BoundKind::Thm1Singlehead,
        BoundKind::Thm2Msa,
        BoundKind::Thm2MsaStack,
        BoundKind::Thm3Mlp,
        BoundKind::Thm3MlpStack,
        BoundKind::Thm4Augmsa,
        BoundKind::Thm4AugmsaStack,
        BoundKind::Thm7Siaf,
        BoundKind::Thm7SiafStack,
        BoundKind::Thm8CombinedVanilla,
        BoundKind::Thm9CombinedPangu,
        BoundKind::NoiseLemma3Msa,
        BoundKind::NoiseLemma4Linear,
        BoundKind::NoiseThm5NonlinearStrict,
        BoundKind::NoiseThm6Augmsa,
        BoundKind::NoiseDiversityTriangle,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BoundKind::Lemma1Weight => "LEMMA1_WEIGHT",
            BoundKind::Lemma1Activation => "LEMMA1_ACTIVATION",
            BoundKind::Lemma1Convex => "LEMMA1_CONVEX",
            BoundKind::Lemma1Attention => "LEMMA1_ATTENTION",
            BoundKind::Lemma2ConcatEq => "LEMMA2_CONCAT_EQ",
            BoundKind::Thm1Singlehead => "THM1_SINGLEHEAD",
            BoundKind::Thm2Msa => "THM2_MSA",
            BoundKind::Thm2MsaStack => "THM2_MSA_STACK",
            BoundKind::Thm3Mlp => "THM3_MLP",
            BoundKind::Thm3MlpStack => "THM3_MLP_STACK",
            BoundKind::Thm4Augmsa => "THM4_AUGMSA",
            BoundKind::Thm4AugmsaStack => "THM4_AUGMSA_STACK",
            BoundKind::Thm7Siaf => "THM7_SIAF",
            BoundKind::Thm7SiafStack => "THM7_SIAF_STACK",
            BoundKind::Thm8CombinedVanilla => "THM8_COMBINED_VANILLA",
            BoundKind::Thm9CombinedPangu => "THM9_COMBINED_PANGU",
            BoundKind::NoiseLemma3Msa => "NOISE_LEMMA3_MSA",
            BoundKind::NoiseLemma4Linear => "NOISE_LEMMA4_LINEAR",
            BoundKind::NoiseThm5NonlinearStrict => "NOISE_THM5_NONLINEAR_STRICT",
            BoundKind::NoiseThm6Augmsa => "NOISE_THM6_AUGMSA",
            BoundKind::NoiseDiversityTriangle => "NOISE_DIVERSITY_TRIANGLE",
        }
    }

    /// Kinds whose statement is an identity rather than an inequality.
    pub fn is_equality(self) -> bool {
        matches!(self, BoundKind::Lemma2ConcatEq)
    }

    /// Kinds that require positive slack to pass.
    pub fn is_strict(self) -> bool {
        matches!(self, BoundKind::NoiseThm5NonlinearStrict)
    }

    /// Kinds whose instances contain multi-head attention.
    pub fn uses_heads(self) -> bool {
        matches!(
            self,
            BoundKind::Lemma2ConcatEq
                | BoundKind::Thm2Msa
                | BoundKind::Thm2MsaStack
                | BoundKind::Thm4Augmsa
                | BoundKind::Thm4AugmsaStack
                | BoundKind::Thm8CombinedVanilla
                | BoundKind::Thm9CombinedPangu
                | BoundKind::NoiseLemma3Msa
                | BoundKind::NoiseThm6Augmsa
        )
    }

    /// Kinds that stack several modules.
    pub fn is_stack(self) -> bool {
        matches!(
            self,
            BoundKind::Thm2MsaStack
                | BoundKind::Thm3MlpStack
                | BoundKind::Thm4AugmsaStack
                | BoundKind::Thm7SiafStack
                | BoundKind::Thm8CombinedVanilla
                | BoundKind::Thm9CombinedPangu
        )
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BoundKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        let wanted = s.trim().to_ascii_uppercase();
        BoundKind::ALL
            .into_iter()
            .find(|k| k.tag() == wanted)
            .ok_or_else(|| crate::Error::invalid(format!("unknown bound kind '{s}'")))
    }
}

/// One numerical verification of a bound.
///
/// `aux` carries the measured constants and any secondary forms of the
/// bound that were evaluated alongside the primary one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundCheck {
    pub kind: BoundKind,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
    pub strict: bool,
    pub inconclusive: bool,
    pub seed: u64,
    pub dims: Dims,
    pub aux: BTreeMap<String, f64>,
}

impl BoundCheck {
    /// Slack scaled by `max(1, |rhs|)`.
    pub fn relative_slack(&self) -> f64 {
        self.slack / self.rhs.abs().max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip_through_serde_and_from_str() {
        for k in BoundKind::ALL {
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.tag()));
            assert_eq!(serde_json::from_str::<BoundKind>(&json).unwrap(), k);
            assert_eq!(k.tag().parse::<BoundKind>().unwrap(), k);
        }
        assert!("LEMMA9".parse::<BoundKind>().is_err());
    }
}
