//! Model families compared in the experiments.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use opinf_core::operators::{InputSignature, OperatorKind, RomModel, StructuredOperator};
use opinf_core::polyopinf::PolyBlocks;
use serde::{Deserialize, Serialize};

use crate::catalog::ExperimentId;
use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Galerkin,
    #[serde(rename = "P-OpInf-A")]
    PolyA,
    #[serde(rename = "P-OpInf-AH")]
    PolyAH,
    #[serde(rename = "P-OpInf-cA")]
    PolyCA,
    #[serde(rename = "P-OpInf-cAH")]
    PolyCAH,
    #[serde(rename = "NN-OpInf-NN")]
    NnStandard,
    #[serde(rename = "NN-OpInf-SS")]
    NnSkew,
    #[serde(rename = "NN-OpInf-SPSD-f")]
    NnSpsdForced,
}

pub const HIDDEN_LAYERS: usize = 3;

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Galerkin,
        Family::PolyA,
        Family::PolyAH,
        Family::PolyCA,
        Family::PolyCAH,
        Family::NnStandard,
        Family::NnSkew,
        Family::NnSpsdForced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Galerkin => "Galerkin",
            Family::PolyA => "P-OpInf-A",
            Family::PolyAH => "P-OpInf-AH",
            Family::PolyCA => "P-OpInf-cA",
            Family::PolyCAH => "P-OpInf-cAH",
            Family::NnStandard => "NN-OpInf-NN",
            Family::NnSkew => "NN-OpInf-SS",
            Family::NnSpsdForced => "NN-OpInf-SPSD-f",
        }
    }

    /// Both simulators expose their right-hand side, so every family is
    /// available for every experiment.
    pub fn available_for(self, _experiment: ExperimentId) -> bool {
        true
    }

    pub fn poly_blocks(self) -> Option<PolyBlocks> {
        match self {
            Family::PolyA => Some(PolyBlocks::A),
            Family::PolyAH => Some(PolyBlocks::AH),
            Family::PolyCA => Some(PolyBlocks::CA),
            Family::PolyCAH => Some(PolyBlocks::CAH),
            _ => None,
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Family::NnStandard | Family::NnSkew | Family::NnSpsdForced)
    }

    /// Fresh model for one ensemble member: networks with three hidden
    /// layers of width `k`, inputs `x` (and `mu` when parametric).
    ///
    /// * NN-OpInf-NN: `f = N(x)`
    /// * NN-OpInf-SS: `f = (S(x) - S(x)^T) x`
    /// * NN-OpInf-SPSD-f: `f = -L(x) L(x)^T x + b`, with `b` constant, or a
    ///   network of `mu` when parametric
    pub fn build_network(self, k: usize, n_params: usize, seed: u64) -> opinf_core::Result<RomModel> {
        let sig = if n_params > 0 {
            InputSignature::state_params()
        } else {
            InputSignature::state()
        };
        let net = |kind, sig, seed| StructuredOperator::network(kind, sig, k, n_params, HIDDEN_LAYERS, k, seed);
        let ops = match self {
            Family::NnStandard => vec![net(OperatorKind::Standard, sig, seed)?],
            Family::NnSkew => vec![net(OperatorKind::Skew, sig, seed)?],
            Family::NnSpsdForced => {
                let spsd = net(OperatorKind::Spsd, sig, seed)?.with_positive(true).with_negate(true);
                let forcing = if n_params > 0 {
                    net(OperatorKind::Vector, InputSignature::params(), seed.wrapping_add(0x9e37))?
                } else {
                    StructuredOperator::constant(OperatorKind::Vector, k, n_params, DVector::zeros(k))?
                };
                vec![spsd, forcing]
            }
            other => {
                return Err(opinf_core::Error::InvalidArgument(format!(
                    "{other} is not a neural family"
                )))
            }
        };
        RomModel::new(k, n_params, ops)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown model family `{s}`")))
    }
}
