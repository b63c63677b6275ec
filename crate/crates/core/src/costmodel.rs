//! Analytical FLOP estimates for evaluating and training reduced models.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::operators::OperatorKind;
use crate::{Error, Result};

/// Network and data sizes entering the formulas. `n_hidden` counts the
/// hidden-to-hidden products, so a network with `n_hidden + 1` hidden
/// layers has `n_hidden` square hidden blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostQuery {
    pub k: usize,
    pub n_hidden: usize,
    pub width: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub n_activation: usize,
    pub n_snapshots: usize,
    pub n_epochs: usize,
}

impl CostQuery {
    /// The sizing used for the ratio tables: `n_h = 3`, `n_n = K`,
    /// `n_in = K`, one op per activation, `n_out` taken from the kind.
    pub fn reference(k: usize) -> Self {
        Self {
            k,
            n_hidden: 3,
            width: k,
            n_in: k,
            n_out: k,
            n_activation: 1,
            n_snapshots: 10_000,
            n_epochs: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostKind {
    Linear,
    Quadratic,
    SpsdApply,
    SkewApply,
    NnForward,
    NnOpinf(OperatorKind),
    SpsdPotential,
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostKind::Linear => f.write_str("linear"),
            CostKind::Quadratic => f.write_str("quadratic"),
            CostKind::SpsdApply => f.write_str("spsd_apply"),
            CostKind::SkewApply => f.write_str("skew_apply"),
            CostKind::NnForward => f.write_str("nn_forward"),
            CostKind::NnOpinf(k) => write!(f, "nn_opinf_{k}"),
            CostKind::SpsdPotential => f.write_str("spsd_potential"),
        }
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => CostKind::Linear,
            "quadratic" => CostKind::Quadratic,
            "spsd_apply" => CostKind::SpsdApply,
            "skew_apply" => CostKind::SkewApply,
            "nn_forward" => CostKind::NnForward,
            "spsd_potential" => CostKind::SpsdPotential,
            other => match other.strip_prefix("nn_opinf_") {
                Some(k) => CostKind::NnOpinf(k.parse()?),
                None => return Err(Error::UnknownKind(other.to_string())),
            },
        })
    }
}

/// Raw network output width per operator kind.
pub fn eval_nout(kind: OperatorKind, k: usize) -> usize {
    kind.n_out(k)
}

/// `2 n_n n_in + n_oa n_n + n_h (2 n_n^2 + n_oa n_n) + 2 n_n n_out`
pub fn nn_forward(q: &CostQuery) -> f64 {
    let (nn, oa) = (q.width as f64, q.n_activation as f64);
    2.0 * nn * q.n_in as f64 + oa * nn + q.n_hidden as f64 * (2.0 * nn * nn + oa * nn) + 2.0 * nn * q.n_out as f64
}

/// Cost of applying the raw output to the state.
fn apply_cost(kind: OperatorKind, k: f64) -> f64 {
    match kind {
        OperatorKind::Standard | OperatorKind::Vector => 0.0,
        OperatorKind::Matrix => 2.0 * k * k,
        OperatorKind::Spsd | OperatorKind::Skew | OperatorKind::SpsdPotential => k * k,
    }
}

pub fn eval_cost(kind: CostKind, q: &CostQuery) -> f64 {
    let k = q.k as f64;
    match kind {
        CostKind::Linear => 2.0 * k * k,
        CostKind::Quadratic => k * k * k + 1.5 * k * k,
        CostKind::SpsdApply | CostKind::SkewApply => k * k,
        CostKind::NnForward => nn_forward(q),
        CostKind::NnOpinf(op) => {
            let sized = CostQuery {
                n_out: eval_nout(op, q.k),
                ..*q
            };
            nn_forward(&sized) + apply_cost(op, k)
        }
        CostKind::SpsdPotential => {
            let sized = CostQuery {
                n_out: eval_nout(OperatorKind::Spsd, q.k),
                ..*q
            };
            3.0 * nn_forward(&sized) + k * k
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrainingMethod {
    PopinfLinear,
    PopinfQuadratic,
    NnOpinf(OperatorKind),
}

impl FromStr for TrainingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "popinf_linear" => TrainingMethod::PopinfLinear,
            "popinf_quadratic" => TrainingMethod::PopinfQuadratic,
            other => match other.strip_prefix("nnopinf_") {
                Some(k) => TrainingMethod::NnOpinf(k.parse()?),
                None => return Err(Error::UnknownKind(other.to_string())),
            },
        })
    }
}

/// Least squares costs `K (N_s p^2 + p^3)` with `p = K` or `K(K+1)/2`;
/// network training `3 N_s n_epochs C`.
pub fn training_cost(method: TrainingMethod, q: &CostQuery) -> f64 {
    let k = q.k as f64;
    let ns = q.n_snapshots as f64;
    match method {
        TrainingMethod::PopinfLinear | TrainingMethod::PopinfQuadratic => {
            let p = if method == TrainingMethod::PopinfLinear {
                k
            } else {
                k * (k + 1.0) / 2.0
            };
            k * (ns * p * p + p * p * p)
        }
        TrainingMethod::NnOpinf(op) => 3.0 * ns * q.n_epochs as f64 * eval_cost(CostKind::NnOpinf(op), q),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub k: usize,
    pub kind: String,
    pub cost: f64,
    pub ratio_vs_linear: f64,
    pub ratio_vs_quadratic: f64,
}

/// Evaluation cost of each kind relative to the linear and quadratic
/// polynomial models, using [`CostQuery::reference`] sizing.
pub fn ratio_table(kinds: &[CostKind], ks: &[usize]) -> Result<Vec<RatioRow>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("ratio table needs positive K values".into()));
    }
    let mut rows = Vec::with_capacity(kinds.len() * ks.len());
    for &k in ks {
        let q = CostQuery::reference(k);
        let lin = eval_cost(CostKind::Linear, &q);
        let quad = eval_cost(CostKind::Quadratic, &q);
        for &kind in kinds {
            let cost = eval_cost(kind, &q);
            rows.push(RatioRow {
                k,
                kind: kind.to_string(),
                cost,
                ratio_vs_linear: cost / lin,
                ratio_vs_quadratic: cost / quad,
            });
        }
    }
    Ok(rows)
}

pub fn write_ratio_csv<W: Write>(rows: &[RatioRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "K,kind,cost,ratio_vs_linear,ratio_vs_quadratic")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6e},{:.6e}",
            r.k, r.kind, r.cost, r.ratio_vs_linear, r.ratio_vs_quadratic
        )?;
    }
    Ok(())
}

/// The kinds plotted by default.
pub fn default_kinds() -> Vec<CostKind> {
    vec![
        CostKind::Linear,
        CostKind::Quadratic,
        CostKind::NnOpinf(OperatorKind::Standard),
        CostKind::NnOpinf(OperatorKind::Matrix),
        CostKind::NnOpinf(OperatorKind::Spsd),
        CostKind::NnOpinf(OperatorKind::Skew),
        CostKind::SpsdPotential,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let q = CostQuery::reference(10);
        assert_eq!(eval_cost(CostKind::Quadratic, &q), 1150.0);
        assert_eq!(eval_cost(CostKind::NnForward, &q), 1040.0);
        assert_eq!(eval_cost(CostKind::Linear, &CostQuery::reference(1)), 2.0);
        assert_eq!(eval_nout(OperatorKind::Standard, 10), 10);
        assert_eq!(eval_nout(OperatorKind::Spsd, 10), 55);
        assert_eq!(eval_nout(OperatorKind::Skew, 2), 1);
    }

    #[test]
    fn closed_form_forward_cost() {
        for k in 1..200 {
            for n_out in [1, k, k * k] {
                let q = CostQuery {
                    n_out,
                    ..CostQuery::reference(k)
                };
                let k = k as f64;
                let expect = 8.0 * k * k + 4.0 * k + 2.0 * k * n_out as f64;
                assert_eq!(eval_cost(CostKind::NnForward, &q), expect);
            }
        }
    }

    #[test]
    fn training_examples() {
        let q = CostQuery {
            n_snapshots: 10_000,
            ..CostQuery::reference(10)
        };
        assert_eq!(training_cost(TrainingMethod::PopinfLinear, &q), 10_010_000.0);
        let c = eval_cost(CostKind::NnOpinf(OperatorKind::Standard), &q);
        assert_eq!(training_cost(TrainingMethod::NnOpinf(OperatorKind::Standard), &q), 3e8 * c);
        let one = CostQuery {
            n_snapshots: 1,
            n_epochs: 1,
            ..q
        };
        assert_eq!(training_cost(TrainingMethod::NnOpinf(OperatorKind::Skew), &one), 3.0 * eval_cost(CostKind::NnOpinf(OperatorKind::Skew), &one));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("nn_opinf_spsd".parse::<CostKind>().unwrap(), CostKind::NnOpinf(OperatorKind::Spsd));
        assert_eq!("quadratic".parse::<CostKind>().unwrap(), CostKind::Quadratic);
        assert!("cubic".parse::<CostKind>().is_err());
        assert!("nnopinf_generic".parse::<TrainingMethod>().is_err());
        for k in default_kinds() {
            assert_eq!(k.to_string().parse::<CostKind>().unwrap(), k);
        }
    }

    #[test]
    fn ratio_table_shape() {
        let rows = ratio_table(&default_kinds(), &[4, 8]).unwrap();
        assert_eq!(rows.len(), 14);
        assert!(rows.iter().filter(|r| r.kind == "linear").all(|r| r.ratio_vs_linear == 1.0));
        assert!(ratio_table(&default_kinds(), &[]).is_err());
        let mut buf = Vec::new();
        write_ratio_csv(&rows[..1], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("K,kind,cost,ratio_vs_linear,ratio_vs_quadratic\n4,linear,32,"));
    }
}
