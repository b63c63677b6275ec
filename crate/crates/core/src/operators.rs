//! Structured operator blocks and their additive composition.
//!
//! Every operator maps normalized inputs to a `K`-vector contribution. A
//! [`RomModel`] sums the contributions and converts to physical reduced
//! units with its stored [`Scales`].

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::binio::{read_f64s, read_magic, read_u64, read_usize, write_f64s, write_magic, write_u64};
use crate::error::check_len;
use crate::neural::{ForwardCache, Mlp, MlpSpec};
use crate::reduction::Scales;
use crate::{Error, Result};

const OP_MAGIC: &[u8; 8] = b"OIFOP01\0";

/// Index of entry `(i, j)`, `j <= i`, in row-by-row lower-triangular packing.
pub fn lower_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Index of entry `(i, j)`, `j < i`, in strictly-lower packing.
pub fn strict_index(i: usize, j: usize) -> usize {
    i * (i - 1) / 2 + j
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lower-triangular matrix from its row-by-row packing. With `positive`, the
/// diagonal goes through softplus.
pub fn unpack_lower(v: &[f64], k: usize, positive: bool) -> Result<DMatrix<f64>> {
    check_len("lower-triangular packing", k * (k + 1) / 2, v.len())?;
    let mut l = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let x = v[lower_index(i, j)];
            l[(i, j)] = if positive && i == j { softplus(x) } else { x };
        }
    }
    Ok(l)
}

pub fn pack_lower(l: &DMatrix<f64>) -> Vec<f64> {
    let k = l.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
    out
}

pub fn unpack_strict(v: &[f64], k: usize) -> Result<DMatrix<f64>> {
    check_len("strictly-lower packing", k * k.saturating_sub(1) / 2, v.len())?;
    let mut s = DMatrix::zeros(k, k);
    for i in 1..k {
        for j in 0..i {
            s[(i, j)] = v[strict_index(i, j)];
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    Standard,
    Matrix,
    Spsd,
    Skew,
    Vector,
    SpsdPotential,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 6] = [
        OperatorKind::Standard,
        OperatorKind::Matrix,
        OperatorKind::Spsd,
        OperatorKind::Skew,
        OperatorKind::Vector,
        OperatorKind::SpsdPotential,
    ];

    /// Width of the raw network (or constant) output.
    pub fn n_out(&self, k: usize) -> usize {
        match self {
            OperatorKind::Standard | OperatorKind::Vector => k,
            OperatorKind::Matrix => k * k,
            OperatorKind::Spsd | OperatorKind::SpsdPotential => k * (k + 1) / 2,
            OperatorKind::Skew => k * k.saturating_sub(1) / 2,
        }
    }

    fn tag(&self) -> u64 {
        *self as u64
    }

    fn from_tag(t: u64) -> Result<Self> {
        Self::ALL
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::UnknownKind(format!("operator tag {t}")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Standard => "standard",
            OperatorKind::Matrix => "matrix",
            OperatorKind::Spsd => "spsd",
            OperatorKind::Skew => "skew",
            OperatorKind::Vector => "vector",
            OperatorKind::SpsdPotential => "spsd_potential",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputGroup {
    State,
    Params,
}

/// Ordered input groups fed to an operator's network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSignature {
    pub groups: Vec<InputGroup>,
}

impl InputSignature {
    pub fn new(groups: Vec<InputGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidArgument("input signature must not be empty".into()));
        }
        Ok(Self { groups })
    }

    pub fn state() -> Self {
        Self {
            groups: vec![InputGroup::State],
        }
    }

    pub fn state_params() -> Self {
        Self {
            groups: vec![InputGroup::State, InputGroup::Params],
        }
    }

    pub fn params() -> Self {
        Self {
            groups: vec![InputGroup::Params],
        }
    }

    pub fn width(&self, k: usize, n_params: usize) -> usize {
        self.groups
            .iter()
            .map(|g| match g {
                InputGroup::State => k,
                InputGroup::Params => n_params,
            })
            .sum()
    }

    /// Stacks the groups of a batch into the network input.
    pub fn assemble(&self, x: &DMatrix<f64>, mu: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = self.width(x.nrows(), mu.nrows());
        let mut eta = DMatrix::zeros(rows, x.ncols());
        let mut r = 0;
        for g in &self.groups {
            let src = match g {
                InputGroup::State => x,
                InputGroup::Params => mu,
            };
            eta.rows_mut(r, src.nrows()).copy_from(src);
            r += src.nrows();
        }
        eta
    }

    /// Sum of the state-group rows of an input-space matrix.
    fn state_part(&self, eta: &DMatrix<f64>, k: usize, n_params: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(k, eta.ncols());
        let mut r = 0;
        for g in &self.groups {
            match g {
                InputGroup::State => {
                    out += eta.rows(r, k);
                    r += k;
                }
                InputGroup::Params => r += n_params,
            }
        }
        out
    }

    fn tag(&self) -> Vec<u64> {
        self.groups
            .iter()
            .map(|g| match g {
                InputGroup::State => 0,
                InputGroup::Params => 1,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorBody {
    Network(Mlp),
    Constant(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOperator {
    kind: OperatorKind,
    signature: InputSignature,
    body: OperatorBody,
    k: usize,
    n_params: usize,
    /// Softplus on the diagonal of `L` (SPSD kinds).
    positive: bool,
    /// Contribute the negated output, e.g. `-L L^T x`.
    negate: bool,
}

/// Per-call intermediates needed by the reverse sweep.
#[derive(Debug, Clone)]
pub struct OperatorCache {
    x: DMatrix<f64>,
    raw: DMatrix<f64>,
    net: Option<ForwardCache>,
    eta: Option<DMatrix<f64>>,
}

impl StructuredOperator {
    /// Operator whose body is a fresh Kaiming-initialized network of
    /// `hidden_layers` x `hidden_width`.
    pub fn network(
        kind: OperatorKind,
        signature: InputSignature,
        k: usize,
        n_params: usize,
        hidden_layers: usize,
        hidden_width: usize,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if signature.groups.is_empty() {
            return Err(Error::InvalidArgument("input signature must not be empty".into()));
        }
        let n_in = signature.width(k, n_params);
        let n_out = kind.n_out(k);
        if n_in == 0 || n_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "{kind} operator at K={k} has an empty network (n_in={n_in}, n_out={n_out})"
            )));
        }
        let spec = MlpSpec::new(n_in, hidden_layers, hidden_width, n_out)?;
        Ok(Self {
            kind,
            signature,
            body: OperatorBody::Network(Mlp::init(spec, seed)),
            k,
            n_params,
            positive: matches!(kind, OperatorKind::Spsd | OperatorKind::SpsdPotential),
            negate: false,
        })
    }

    /// Operator with state-independent raw output `values`.
    pub fn constant(kind: OperatorKind, k: usize, n_params: usize, values: DVector<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        check_len("constant operator values", kind.n_out(k), values.len())?;
        Ok(Self {
            kind,
            signature: InputSignature::state(),
            body: OperatorBody::Constant(values),
            k,
            n_params,
            positive: false,
            negate: false,
        })
    }

    pub fn with_positive(mut self, positive: bool) -> Self {
        self.positive = positive;
        self
    }

    pub fn with_negate(mut self, negate: bool) -> Self {
        self.negate = negate;
        self
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn signature(&self) -> &InputSignature {
        &self.signature
    }

    pub fn body(&self) -> &OperatorBody {
        &self.body
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn positive(&self) -> bool {
        self.positive
    }

    pub fn negate(&self) -> bool {
        self.negate
    }

    pub fn n_weights(&self) -> usize {
        match &self.body {
            OperatorBody::Network(net) => net.n_params(),
            OperatorBody::Constant(v) => v.len(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match &self.body {
            OperatorBody::Network(net) => net.params(),
            OperatorBody::Constant(v) => v.as_slice().to_vec(),
        }
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        match &mut self.body {
            OperatorBody::Network(net) => net.set_params(w),
            OperatorBody::Constant(v) => {
                check_len("constant operator values", v.len(), w.len())?;
                v.copy_from_slice(w);
                Ok(())
            }
        }
    }

    fn check_inputs(&self, x: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<()> {
        check_len("operator state", self.k, x.nrows())?;
        check_len("operator parameters", self.n_params, mu.nrows())?;
        check_len("parameter batch", x.ncols(), mu.ncols())
    }

    fn sign(&self) -> f64 {
        if self.negate {
            -1.0
        } else {
            1.0
        }
    }

    fn lower(&self, raw: &[f64]) -> Result<DMatrix<f64>> {
        unpack_lower(raw, self.k, self.positive)
    }

    /// Matrix `A(eta)` with `out = A x` for the matrix-valued kinds at one
    /// sample, `None` for Standard and Vector.
    pub fn applied_matrix(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let mm = DMatrix::from_column_slice(mu.len(), 1, mu.as_slice());
        self.check_inputs(&xm, &mm)?;
        let raw = self.raw_output(&xm, &mm)?;
        let r = raw.column(0);
        let k = self.k;
        let a = match self.kind {
            OperatorKind::Standard | OperatorKind::Vector => return Ok(None),
            OperatorKind::Matrix => DMatrix::from_row_slice(k, k, r.as_slice()),
            OperatorKind::Spsd | OperatorKind::SpsdPotential => {
                let l = self.lower(r.as_slice())?;
                &l * l.transpose()
            }
            OperatorKind::Skew => {
                let s = unpack_strict(r.as_slice(), k)?;
                &s - s.transpose()
            }
        };
        Ok(Some(a * self.sign()))
    }

    fn raw_output(&self, x: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.body {
            OperatorBody::Network(net) => net.forward(&self.signature.assemble(x, mu)),
            OperatorBody::Constant(v) => Ok(DMatrix::from_fn(v.len(), x.ncols(), |i, _| v[i])),
        }
    }

    pub fn eval(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.eval_batch(
            &DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
            &DMatrix::from_column_slice(mu.len(), 1, mu.as_slice()),
        )?;
        Ok(out.column(0).into_owned())
    }

    pub fn eval_batch(&self, x: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x, mu)?.0)
    }

    /// Contribution for a batch plus the cache for [`Self::backward`].
    pub fn forward(&self, x: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<(DMatrix<f64>, OperatorCache)> {
        self.check_inputs(x, mu)?;
        let k = self.k;
        let b = x.ncols();
        let (raw, net, eta) = match &self.body {
            OperatorBody::Network(mlp) => {
                let eta = self.signature.assemble(x, mu);
                let (raw, cache) = mlp.forward_cached(&eta)?;
                (raw, Some(cache), Some(eta))
            }
            OperatorBody::Constant(_) => (self.raw_output(x, mu)?, None, None),
        };
        let mut out = DMatrix::zeros(k, b);
        match self.kind {
            OperatorKind::Standard | OperatorKind::Vector => out.copy_from(&raw),
            OperatorKind::Matrix => {
                for s in 0..b {
                    let m = DMatrix::from_row_slice(k, k, raw.column(s).as_slice());
                    out.set_column(s, &(m * x.column(s)));
                }
            }
            OperatorKind::Spsd => {
                for s in 0..b {
                    let l = self.lower(raw.column(s).as_slice())?;
                    let y = l.tr_mul(&x.column(s));
                    out.set_column(s, &(&l * y));
                }
            }
            OperatorKind::Skew => {
                for s in 0..b {
                    let sm = unpack_strict(raw.column(s).as_slice(), k)?;
                    let xs = x.column(s);
                    out.set_column(s, &(&sm * xs - sm.tr_mul(&xs)));
                }
            }
            OperatorKind::SpsdPotential => {
                // grad of x^T L L^T x: 2 L L^T x plus the path through L(eta(x))
                let mut adj_raw = DMatrix::zeros(raw.nrows(), b);
                for s in 0..b {
                    let rs = raw.column(s);
                    let l = self.lower(rs.as_slice())?;
                    let xs = x.column(s);
                    let y = l.tr_mul(&xs);
                    out.set_column(s, &(&l * &y * 2.0));
                    for i in 0..k {
                        for j in 0..=i {
                            let mut g = 2.0 * xs[i] * y[j];
                            if self.positive && i == j {
                                g *= sigmoid(rs[lower_index(i, i)]);
                            }
                            adj_raw[(lower_index(i, j), s)] = g;
                        }
                    }
                }
                if let (OperatorBody::Network(mlp), Some(cache)) = (&self.body, &net) {
                    let adj_eta = mlp.grad_input(cache, &adj_raw)?;
                    out += self.signature.state_part(&adj_eta, k, self.n_params);
                }
            }
        }
        if self.negate {
            out.neg_mut();
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{} operator produced a non-finite output", self.kind)));
        }
        Ok((
            out,
            OperatorCache {
                x: x.clone(),
                raw,
                net,
                eta,
            },
        ))
    }

    /// Gradient of `<adjoint, output>` (summed over the batch) with respect
    /// to the operator weights, added into `grad`.
    pub fn backward(&self, cache: &OperatorCache, adjoint: &DMatrix<f64>, grad: &mut [f64]) -> Result<()> {
        check_len("operator weight gradient", self.n_weights(), grad.len())?;
        check_len("operator adjoint rows", self.k, adjoint.nrows())?;
        check_len("operator adjoint batch", cache.x.ncols(), adjoint.ncols())?;
        let adj = if self.negate { -adjoint } else { adjoint.clone() };
        if self.kind == OperatorKind::SpsdPotential {
            return self.backward_potential(cache, &adj, grad);
        }
        let adj_raw = self.raw_adjoint(cache, &adj)?;
        match (&self.body, &cache.net) {
            (OperatorBody::Network(mlp), Some(nc)) => {
                mlp.backward(nc, &adj_raw, Some(grad))?;
            }
            _ => {
                for s in 0..adj_raw.ncols() {
                    for (g, a) in grad.iter_mut().zip(adj_raw.column(s).iter()) {
                        *g += a;
                    }
                }
            }
        }
        Ok(())
    }

    /// Adjoint of the raw network output for the kinds whose output is
    /// algebraic in (raw, x).
    fn raw_adjoint(&self, cache: &OperatorCache, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = self.k;
        let raw = &cache.raw;
        let x = &cache.x;
        let mut adj_raw = DMatrix::zeros(raw.nrows(), raw.ncols());
        match self.kind {
            OperatorKind::Standard | OperatorKind::Vector => adj_raw.copy_from(a),
            OperatorKind::Matrix => {
                for s in 0..raw.ncols() {
                    for i in 0..k {
                        for j in 0..k {
                            adj_raw[(i * k + j, s)] = a[(i, s)] * x[(j, s)];
                        }
                    }
                }
            }
            OperatorKind::Spsd => {
                for s in 0..raw.ncols() {
                    let rs = raw.column(s);
                    let l = self.lower(rs.as_slice())?;
                    let xs = x.column(s);
                    let as_ = a.column(s);
                    let y = l.tr_mul(&xs);
                    let z = l.tr_mul(&as_);
                    for i in 0..k {
                        for j in 0..=i {
                            let mut g = as_[i] * y[j] + xs[i] * z[j];
                            if self.positive && i == j {
                                g *= sigmoid(rs[lower_index(i, i)]);
                            }
                            adj_raw[(lower_index(i, j), s)] = g;
                        }
                    }
                }
            }
            OperatorKind::Skew => {
                for s in 0..raw.ncols() {
                    for i in 1..k {
                        for j in 0..i {
                            adj_raw[(strict_index(i, j), s)] = a[(i, s)] * x[(j, s)] - x[(i, s)] * a[(j, s)];
                        }
                    }
                }
            }
            OperatorKind::SpsdPotential => unreachable!("handled by backward_potential"),
        }
        Ok(adj_raw)
    }

    /// For the potential kind `<a, grad L(x)>` is the directional derivative
    /// `phi = dL(x)[a] = 2 <y, Ldot^T x> + 2 <y, L^T a>` with `y = L^T x` and
    /// `Ldot` the derivative of `L(eta(x))` along `a`; its weight gradient
    /// comes from a reverse sweep through the dual network pass.
    fn backward_potential(&self, cache: &OperatorCache, a: &DMatrix<f64>, grad: &mut [f64]) -> Result<()> {
        let k = self.k;
        let x = &cache.x;
        let b = x.ncols();
        let m = self.kind.n_out(k);
        let (raw, raw_dot, dual) = match (&self.body, &cache.eta) {
            (OperatorBody::Network(mlp), Some(eta)) => {
                let zeros = DMatrix::zeros(self.n_params, b);
                let eta_dot = self.signature.assemble(a, &zeros);
                let (raw, raw_dot, dual) = mlp.forward_dual(eta, &eta_dot)?;
                (raw, raw_dot, Some(dual))
            }
            _ => (cache.raw.clone(), DMatrix::zeros(m, b), None),
        };
        let mut adj_raw = DMatrix::zeros(m, b);
        let mut adj_raw_dot = DMatrix::zeros(m, b);
        for s in 0..b {
            let rs = raw.column(s);
            let rd = raw_dot.column(s);
            let l = self.lower(rs.as_slice())?;
            let mut ldot = unpack_lower(rd.as_slice(), k, false)?;
            if self.positive {
                for i in 0..k {
                    ldot[(i, i)] = sigmoid(rs[lower_index(i, i)]) * rd[lower_index(i, i)];
                }
            }
            let xs = x.column(s);
            let as_ = a.column(s);
            let y = l.tr_mul(&xs);
            let ydot = ldot.tr_mul(&xs);
            let la = l.tr_mul(&as_);
            for i in 0..k {
                for j in 0..=i {
                    let p = lower_index(i, j);
                    let d_ldot = 2.0 * xs[i] * y[j];
                    let d_l = 2.0 * xs[i] * ydot[j] + 2.0 * (xs[i] * la[j] + as_[i] * y[j]);
                    if self.positive && i == j {
                        let o = rs[p];
                        let sg = sigmoid(o);
                        adj_raw[(p, s)] = d_l * sg + d_ldot * sg * (1.0 - sg) * rd[p];
                        adj_raw_dot[(p, s)] = d_ldot * sg;
                    } else {
                        adj_raw[(p, s)] = d_l;
                        adj_raw_dot[(p, s)] = d_ldot;
                    }
                }
            }
        }
        match (&self.body, dual) {
            (OperatorBody::Network(mlp), Some(dual)) => {
                mlp.backward_dual(&dual, &adj_raw, &adj_raw_dot, grad)?;
            }
            _ => {
                for s in 0..b {
                    for (g, v) in grad.iter_mut().zip(adj_raw.column(s).iter()) {
                        *g += v;
                    }
                }
            }
        }
        Ok(())
    }

    /// The scalar `x^T L L^T x` (sign applied) whose state gradient is the
    /// potential operator's output.
    pub fn potential(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
        if self.kind != OperatorKind::SpsdPotential {
            return Err(Error::InvalidArgument(format!("{} operator has no potential", self.kind)));
        }
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let mm = DMatrix::from_column_slice(mu.len(), 1, mu.as_slice());
        self.check_inputs(&xm, &mm)?;
        let raw = self.raw_output(&xm, &mm)?;
        let l = self.lower(raw.column(0).as_slice())?;
        Ok(self.sign() * l.tr_mul(x).norm_squared())
    }

    /// Structure diagnostics over sample points `(x, mu)`.
    pub fn structure_report(&self, samples: &[(DVector<f64>, DVector<f64>)]) -> Result<StructureReport> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("structure report needs samples".into()));
        }
        match self.kind {
            OperatorKind::Skew => {
                let mut r = SkewReport::default();
                for (x, mu) in samples {
                    let a = self.applied_matrix(x, mu)?.expect("skew is matrix valued");
                    let out = a.clone() * x;
                    r.max_quadratic_form = r.max_quadratic_form.max(x.dot(&out).abs());
                    r.max_symmetric_part = r.max_symmetric_part.max((&a + a.transpose()).norm());
                    r.max_operator_norm = r.max_operator_norm.max(a.norm());
                }
                Ok(StructureReport::Skew(r))
            }
            OperatorKind::Spsd | OperatorKind::SpsdPotential => {
                let mut r = SpsdReport {
                    min_eigenvalue: f64::INFINITY,
                    min_quadratic_form: f64::INFINITY,
                    max_operator_norm: 0.0,
                };
                for (x, mu) in samples {
                    let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
                    let mm = DMatrix::from_column_slice(mu.len(), 1, mu.as_slice());
                    self.check_inputs(&xm, &mm)?;
                    let raw = self.raw_output(&xm, &mm)?;
                    let l = self.lower(raw.column(0).as_slice())?;
                    let g = &l * l.transpose();
                    let eig = SymmetricEigen::new(g.clone()).eigenvalues.min();
                    r.min_eigenvalue = r.min_eigenvalue.min(eig);
                    r.min_quadratic_form = r.min_quadratic_form.min(l.tr_mul(x).norm_squared());
                    r.max_operator_norm = r.max_operator_norm.max(g.norm());
                }
                Ok(StructureReport::Spsd(r))
            }
            _ => Ok(StructureReport::Unstructured),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SkewReport {
    pub max_quadratic_form: f64,
    pub max_symmetric_part: f64,
    pub max_operator_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpsdReport {
    /// Smallest eigenvalue of `L L^T` (sign flag not applied).
    pub min_eigenvalue: f64,
    pub min_quadratic_form: f64,
    pub max_operator_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StructureReport {
    Skew(SkewReport),
    Spsd(SpsdReport),
    Unstructured,
}

impl fmt::Display for StructureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructureReport::Skew(r) => write!(
                f,
                "skew: max |x^T A x| = {:.3e}, max |A + A^T| = {:.3e}",
                r.max_quadratic_form, r.max_symmetric_part
            ),
            StructureReport::Spsd(r) => write!(
                f,
                "spsd: min eig(L L^T) = {:.3e}, min x^T L L^T x = {:.3e}",
                r.min_eigenvalue, r.min_quadratic_form
            ),
            StructureReport::Unstructured => f.write_str("no structure claimed"),
        }
    }
}

/// Intermediates of every operator for one batch.
#[derive(Debug, Clone)]
pub struct ModelCache {
    operators: Vec<OperatorCache>,
}

/// Additive reduced model acting on normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RomModel {
    k: usize,
    n_params: usize,
    operators: Vec<StructuredOperator>,
    pub scales: Scales,
}

impl RomModel {
    pub fn new(k: usize, n_params: usize, operators: Vec<StructuredOperator>) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one operator".into()));
        }
        for op in &operators {
            check_len("operator state dimension", k, op.k)?;
            check_len("operator parameter count", n_params, op.n_params)?;
        }
        Ok(Self {
            k,
            n_params,
            operators,
            scales: Scales::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn operators(&self) -> &[StructuredOperator] {
        &self.operators
    }

    pub fn n_weights(&self) -> usize {
        self.operators.iter().map(|o| o.n_weights()).sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.operators.iter().flat_map(|o| o.weights()).collect()
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        check_len("model weights", self.n_weights(), w.len())?;
        let mut p = 0;
        for op in &mut self.operators {
            let n = op.n_weights();
            op.set_weights(&w[p..p + n])?;
            p += n;
        }
        Ok(())
    }

    /// Sum of contributions in normalized coordinates.
    pub fn eval_normalized(&self, x: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward(x, mu)?.0)
    }

    pub fn forward(&self, x: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<(DMatrix<f64>, ModelCache)> {
        let mut out = DMatrix::zeros(self.k, x.ncols());
        let mut caches = Vec::with_capacity(self.operators.len());
        for op in &self.operators {
            let (o, c) = op.forward(x, mu)?;
            out += o;
            caches.push(c);
        }
        Ok((out, ModelCache { operators: caches }))
    }

    /// Weight gradient of `<adjoint, eval_normalized>`.
    pub fn backward(&self, cache: &ModelCache, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.n_weights()];
        let mut p = 0;
        for (op, c) in self.operators.iter().zip(&cache.operators) {
            let n = op.n_weights();
            op.backward(c, adjoint, &mut grad[p..p + n])?;
            p += n;
        }
        Ok(grad)
    }

    /// Reduced right-hand side in physical units.
    pub fn eval(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("model state", self.k, x.len())?;
        check_len("model parameters", self.n_params, mu.len())?;
        let xn = DMatrix::from_column_slice(self.k, 1, (x / self.scales.state).as_slice());
        let mn = DMatrix::from_column_slice(self.n_params, 1, (mu / self.scales.params).as_slice());
        let out = self.eval_normalized(&xn, &mn)?;
        Ok(out.column(0) * self.scales.velocity)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut ops = Vec::new();
        for (i, op) in self.operators.iter().enumerate() {
            let file = format!("op{i}.bin");
            let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
            write_operator(&mut w, op)?;
            w.flush()?;
            ops.push(ManifestOperator {
                file,
                kind: op.kind,
                signature: op.signature.clone(),
            });
        }
        let manifest = Manifest {
            k: self.k,
            n_params: self.n_params,
            scales: self.scales,
            operators: ops,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut ops = Vec::with_capacity(manifest.operators.len());
        for entry in &manifest.operators {
            let mut r = BufReader::new(fs::File::open(dir.join(&entry.file))?);
            let op = read_operator(&mut r)?;
            if op.kind != entry.kind || op.signature != entry.signature {
                return Err(Error::Format(format!("{} disagrees with the manifest", entry.file)));
            }
            ops.push(op);
        }
        let mut model = Self::new(manifest.k, manifest.n_params, ops)?;
        model.scales = manifest.scales;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestOperator {
    file: String,
    kind: OperatorKind,
    signature: InputSignature,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    k: usize,
    n_params: usize,
    scales: Scales,
    operators: Vec<ManifestOperator>,
}

fn write_operator<W: Write>(w: &mut W, op: &StructuredOperator) -> Result<()> {
    write_magic(w, OP_MAGIC)?;
    write_u64(w, op.kind.tag())?;
    write_u64(w, op.k as u64)?;
    write_u64(w, op.n_params as u64)?;
    write_u64(w, u64::from(op.positive) | (u64::from(op.negate) << 1))?;
    let sig = op.signature.tag();
    write_u64(w, sig.len() as u64)?;
    for g in sig {
        write_u64(w, g)?;
    }
    match &op.body {
        OperatorBody::Network(net) => {
            write_u64(w, 0)?;
            net.write_to(w)
        }
        OperatorBody::Constant(v) => {
            write_u64(w, 1)?;
            write_u64(w, v.len() as u64)?;
            write_f64s(w, v.as_slice())
        }
    }
}

fn read_operator<R: Read>(r: &mut R) -> Result<StructuredOperator> {
    read_magic(r, OP_MAGIC)?;
    let kind = OperatorKind::from_tag(read_u64(r)?)?;
    let k = read_usize(r)?;
    let n_params = read_usize(r)?;
    let flags = read_u64(r)?;
    let n_groups = read_usize(r)?;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        groups.push(match read_u64(r)? {
            0 => InputGroup::State,
            1 => InputGroup::Params,
            t => return Err(Error::Format(format!("unknown input group tag {t}"))),
        });
    }
    let body = match read_u64(r)? {
        0 => {
            let net = Mlp::read_from(r)?;
            check_len("stored network output", kind.n_out(k), net.spec().n_out)?;
            OperatorBody::Network(net)
        }
        1 => {
            let n = read_usize(r)?;
            check_len("stored constant", kind.n_out(k), n)?;
            OperatorBody::Constant(DVector::from_vec(read_f64s(r, n)?))
        }
        t => return Err(Error::Format(format!("unknown operator body tag {t}"))),
    };
    Ok(StructuredOperator {
        kind,
        signature: InputSignature { groups },
        body,
        k,
        n_params,
        positive: flags & 1 != 0,
        negate: flags & 2 != 0,
    })
}

/// Uniform average of independently trained members.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<RomModel>,
    seeds: Vec<u64>,
}

impl EnsembleModel {
    pub fn new(members: Vec<RomModel>, seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        check_len("ensemble seeds", members.len(), seeds.len())?;
        let first = &members[0];
        for m in &members[1..] {
            let same = m.k == first.k
                && m.n_params == first.n_params
                && m.operators.len() == first.operators.len()
                && m.operators
                    .iter()
                    .zip(&first.operators)
                    .all(|(a, b)| a.kind == b.kind && a.signature == b.signature && a.n_weights() == b.n_weights());
            if !same {
                return Err(Error::InvalidArgument("ensemble members differ in architecture".into()));
            }
        }
        Ok(Self { members, seeds })
    }

    pub fn single(model: RomModel) -> Self {
        Self {
            members: vec![model],
            seeds: vec![0],
        }
    }

    pub fn members(&self) -> &[RomModel] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn k(&self) -> usize {
        self.members[0].k
    }

    pub fn eval(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.k());
        for m in &self.members {
            out += m.eval(x, mu)?;
        }
        Ok(out / self.members.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, m) in self.members.iter().enumerate() {
            m.save(&dir.join(format!("member{i}")))?;
        }
        fs::write(
            dir.join("ensemble.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "members": self.members.len(),
                "seeds": self.seeds,
            }))?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            members: usize,
            seeds: Vec<u64>,
        }
        let doc: Doc = serde_json::from_str(&fs::read_to_string(dir.join("ensemble.json"))?)?;
        let members = (0..doc.members)
            .map(|i| RomModel::load(&dir.join(format!("member{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, doc.seeds)
    }
}
