//! Polynomial operator inference: `dx/dt = c + A x + H sqr(x)` fit by
//! Tikhonov-regularized least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binio::{f64s_from_base64, f64s_to_base64};
use crate::error::check_len;
use crate::romeval::integrate_rom;
use crate::{Error, Result};

/// The `K(K+1)/2` unique products `x_i x_j` (`j <= i`) in row-by-row
/// lower-triangular order.
pub fn sqr_pack(x: &DVector<f64>) -> DVector<f64> {
    let k = x.len();
    let mut out = DVector::zeros(k * (k + 1) / 2);
    let mut p = 0;
    for i in 0..k {
        for j in 0..=i {
            out[p] = x[i] * x[j];
            p += 1;
        }
    }
    out
}

pub fn sqr_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Which polynomial blocks a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyBlocks {
    pub constant: bool,
    pub linear: bool,
    pub quadratic: bool,
}

impl PolyBlocks {
    pub const A: PolyBlocks = PolyBlocks {
        constant: false,
        linear: true,
        quadratic: false,
    };
    pub const AH: PolyBlocks = PolyBlocks {
        constant: false,
        linear: true,
        quadratic: true,
    };
    pub const CA: PolyBlocks = PolyBlocks {
        constant: true,
        linear: true,
        quadratic: false,
    };
    pub const CAH: PolyBlocks = PolyBlocks {
        constant: true,
        linear: true,
        quadratic: true,
    };

    pub fn n_terms(&self, k: usize) -> usize {
        usize::from(self.constant) + if self.linear { k } else { 0 } + if self.quadratic { sqr_len(k) } else { 0 }
    }

    fn design_row(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_terms(x.len()));
        if self.constant {
            row.push(1.0);
        }
        if self.linear {
            row.extend(x.iter());
        }
        if self.quadratic {
            row.extend(sqr_pack(x).iter());
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyOperators {
    pub k: usize,
    pub c: Option<DVector<f64>>,
    pub a: Option<DMatrix<f64>>,
    pub h: Option<DMatrix<f64>>,
    pub lambda: f64,
}

impl PolyOperators {
    pub fn blocks(&self) -> PolyBlocks {
        PolyBlocks {
            constant: self.c.is_some(),
            linear: self.a.is_some(),
            quadratic: self.h.is_some(),
        }
    }

    pub fn zeros(k: usize, blocks: PolyBlocks) -> Self {
        Self {
            k,
            c: blocks.constant.then(|| DVector::zeros(k)),
            a: blocks.linear.then(|| DMatrix::zeros(k, k)),
            h: blocks.quadratic.then(|| DMatrix::zeros(k, sqr_len(k))),
            lambda: 0.0,
        }
    }

    /// `[c | A | H]` as one `K x p` coefficient matrix.
    fn coefficient_matrix(&self) -> DMatrix<f64> {
        let p = self.blocks().n_terms(self.k);
        let mut out = DMatrix::zeros(self.k, p);
        let mut col = 0;
        if let Some(c) = &self.c {
            out.set_column(col, c);
            col += 1;
        }
        if let Some(a) = &self.a {
            out.columns_mut(col, self.k).copy_from(a);
            col += self.k;
        }
        if let Some(h) = &self.h {
            out.columns_mut(col, h.ncols()).copy_from(h);
        }
        out
    }

    fn from_coefficients(k: usize, blocks: PolyBlocks, theta: &DMatrix<f64>, lambda: f64) -> Self {
        let mut col = 0;
        let c = blocks.constant.then(|| {
            col += 1;
            theta.column(0).into_owned()
        });
        let a = blocks.linear.then(|| {
            let m = theta.columns(col, k).into_owned();
            col += k;
            m
        });
        let h = blocks.quadratic.then(|| theta.columns(col, sqr_len(k)).into_owned());
        Self { k, c, a, h, lambda }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let enc = |m: &DMatrix<f64>| {
            serde_json::json!({
                "rows": m.nrows(),
                "cols": m.ncols(),
                "data": f64s_to_base64(m.as_slice()),
            })
        };
        serde_json::json!({
            "k": self.k,
            "s": sqr_len(self.k),
            "lambda": self.lambda,
            "c": self.c.as_ref().map(|c| enc(&DMatrix::from_column_slice(c.len(), 1, c.as_slice()))),
            "A": self.a.as_ref().map(enc),
            "H": self.h.as_ref().map(enc),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Block {
            rows: usize,
            cols: usize,
            data: String,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            k: usize,
            s: usize,
            lambda: f64,
            c: Option<Block>,
            #[serde(rename = "A")]
            a: Option<Block>,
            #[serde(rename = "H")]
            h: Option<Block>,
        }
        let doc: Doc = serde_json::from_value(v.clone())?;
        check_len("quadratic width", sqr_len(doc.k), doc.s)?;
        let dec = |b: Block, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            check_len("operator rows", rows, b.rows)?;
            check_len("operator cols", cols, b.cols)?;
            let data = f64s_from_base64(&b.data)?;
            check_len("operator entries", rows * cols, data.len())?;
            Ok(DMatrix::from_vec(rows, cols, data))
        };
        let k = doc.k;
        Ok(Self {
            k,
            c: doc.c.map(|b| dec(b, k, 1).map(|m| m.column(0).into_owned())).transpose()?,
            a: doc.a.map(|b| dec(b, k, k)).transpose()?,
            h: doc.h.map(|b| dec(b, k, doc.s)).transpose()?,
            lambda: doc.lambda,
        })
    }
}

/// `c + A x + H sqr(x)` over the blocks that are present.
pub fn eval_poly_rhs(ops: &PolyOperators, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("polynomial state", ops.k, x.len())?;
    let mut out = DVector::zeros(ops.k);
    if let Some(c) = &ops.c {
        out += c;
    }
    if let Some(a) = &ops.a {
        out += a * x;
    }
    if let Some(h) = &ops.h {
        out += h * sqr_pack(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub rank_deficient: bool,
    pub rank: usize,
    pub n_terms: usize,
    pub residual_norm: f64,
}

fn design_matrix(states: &DMatrix<f64>, blocks: PolyBlocks) -> DMatrix<f64> {
    let k = states.nrows();
    let p = blocks.n_terms(k);
    let mut d = DMatrix::zeros(states.ncols(), p);
    for (j, col) in states.column_iter().enumerate() {
        let row = blocks.design_row(&col.into_owned());
        for (c, v) in row.into_iter().enumerate() {
            d[(j, c)] = v;
        }
    }
    d
}

/// Solves `min |D theta - Y|^2 + lambda |theta|^2` for all outputs at once
/// through a QR factorization of the augmented matrix `[D; sqrt(lambda) I]`.
/// Falls back to the minimum-norm SVD solution when that matrix is rank
/// deficient.
fn tikhonov_solve(d: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> (DMatrix<f64>, FitDiagnostics) {
    let (n, p) = d.shape();
    let rows = n + if lambda > 0.0 { p } else { 0 };
    let mut aug = DMatrix::zeros(rows, p);
    aug.rows_mut(0, n).copy_from(d);
    let mut rhs = DMatrix::zeros(rows, y.ncols());
    rhs.rows_mut(0, n).copy_from(y);
    if lambda > 0.0 {
        let s = lambda.sqrt();
        for i in 0..p {
            aug[(n + i, i)] = s;
        }
    }

    let scale = aug.amax().max(f64::MIN_POSITIVE);
    let mut rank = 0;
    let mut theta = None;
    if rows >= p {
        let qr = aug.clone().qr();
        let r = qr.r();
        let rdiag_max = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let tol = rdiag_max.max(scale) * (rows.max(p) as f64) * f64::EPSILON;
        rank = (0..p).filter(|&i| r[(i, i)].abs() > tol).count();
        if rank == p {
            let qtb = qr.q().tr_mul(&rhs);
            theta = r.solve_upper_triangular(&qtb);
        }
    }
    let rank_deficient = theta.is_none();
    let theta = theta.unwrap_or_else(|| {
        let svd = aug.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * (rows.max(p) as f64) * f64::EPSILON;
        rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        svd.solve(&rhs, eps).unwrap_or_else(|_| DMatrix::zeros(p, y.ncols()))
    });
    let residual_norm = (d * &theta - y).norm();
    (
        theta,
        FitDiagnostics {
            rank_deficient,
            rank,
            n_terms: p,
            residual_norm,
        },
    )
}

/// Least-squares fit of the requested blocks. `states` and `velocities` are
/// `K x n` with one sample per column.
pub fn fit(
    states: &DMatrix<f64>,
    velocities: &DMatrix<f64>,
    blocks: PolyBlocks,
    lambda: f64,
) -> Result<(PolyOperators, FitDiagnostics)> {
    let k = states.nrows();
    check_len("velocity rows", k, velocities.nrows())?;
    check_len("velocity samples", states.ncols(), velocities.ncols())?;
    if states.ncols() == 0 {
        return Err(Error::InvalidArgument("fit needs at least one sample".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("regularization must be >= 0, got {lambda}")));
    }
    if blocks.n_terms(k) == 0 {
        return Err(Error::InvalidArgument("no polynomial blocks requested".into()));
    }
    let d = design_matrix(states, blocks);
    let y = velocities.transpose();
    let (theta, diag) = tikhonov_solve(&d, &y, lambda);
    Ok((PolyOperators::from_coefficients(k, blocks, &theta.transpose(), lambda), diag))
}

/// Independent route for the unregularized linear problem: solve
/// `|(X^T kron I) vec(A) - vec(Y)|^2` directly in the `K^2` unknowns.
pub fn fit_vec_oracle(states: &DMatrix<f64>, velocities: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = states.nrows();
    check_len("velocity rows", k, velocities.nrows())?;
    check_len("velocity samples", states.ncols(), velocities.ncols())?;
    let n = states.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("fit needs at least one sample".into()));
    }
    // row (l, i) -> l*K + i ; column vec(A) index j*K + i'
    let mut big = DMatrix::zeros(n * k, k * k);
    for l in 0..n {
        for j in 0..k {
            let v = states[(j, l)];
            for i in 0..k {
                big[(l * k + i, j * k + i)] = v;
            }
        }
    }
    let y = DVector::from_column_slice(velocities.as_slice());
    let svd = big.svd(true, true);
    let eps = svd.singular_values.max() * ((n * k).max(k * k) as f64) * f64::EPSILON;
    let vec_a = svd
        .solve(&y, eps)
        .map_err(|e| Error::InvalidArgument(format!("vectorized solve failed: {e}")))?;
    Ok(DMatrix::from_column_slice(k, k, vec_a.as_slice()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegSearchSpec {
    pub lambdas: Vec<f64>,
}

impl RegSearchSpec {
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || n < 2 {
            return Err(Error::InvalidArgument("log grid needs 0 < lo < hi and n >= 2".into()));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let lambdas = (0..n)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
            .collect();
        Ok(Self { lambdas })
    }
}

impl Default for RegSearchSpec {
    /// 40 values log-spaced on `[1e-8, 1e3]`.
    fn default() -> Self {
        Self::log_spaced(1e-8, 1e3, 40).expect("valid default grid")
    }
}

/// Time grid over which each candidate is rolled out.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationSpec {
    pub times: Vec<f64>,
    pub substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    pub lambda: f64,
    pub error: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub operators: PolyOperators,
    pub lambda: f64,
    pub error: f64,
    pub candidates: Vec<CandidateScore>,
}

/// Fits one model per regularization value, rolls each out from `x0` over
/// `integration.times`, and keeps the one with the smallest relative error
/// against `reference` (reduced training states, one column per time).
/// Ties go to the smaller regularization.
pub fn grid_search(
    states: &DMatrix<f64>,
    velocities: &DMatrix<f64>,
    x0: &DVector<f64>,
    reference: &DMatrix<f64>,
    integration: &IntegrationSpec,
    spec: &RegSearchSpec,
    blocks: PolyBlocks,
) -> Result<SearchOutcome> {
    check_len("reference times", integration.times.len(), reference.ncols())?;
    check_len("reference rows", states.nrows(), reference.nrows())?;
    let ref_norm: f64 = reference.column_iter().map(|c| c.norm()).sum();
    let mut best: Option<(PolyOperators, f64)> = None;
    let mut candidates = Vec::with_capacity(spec.lambdas.len());
    for &lambda in &spec.lambdas {
        let (ops, _) = fit(states, velocities, blocks, lambda)?;
        let run = integrate_rom(|x| eval_poly_rhs(&ops, x), x0, &integration.times, integration.substeps);
        let error = if run.completed() {
            let num: f64 = run
                .states
                .column_iter()
                .zip(reference.column_iter())
                .map(|(a, b)| (a - b).norm())
                .sum();
            if ref_norm > 0.0 {
                num / ref_norm
            } else {
                num
            }
        } else {
            f64::INFINITY
        };
        candidates.push(CandidateScore {
            lambda,
            error,
            stable: run.completed(),
        });
        let better = match &best {
            None => error.is_finite(),
            Some((_, e)) => error < *e,
        };
        if better {
            best = Some((ops, error));
        }
    }
    match best {
        Some((operators, error)) => Ok(SearchOutcome {
            lambda: operators.lambda,
            operators,
            error,
            candidates,
        }),
        None => Err(Error::SearchFailed(
            candidates
                .iter()
                .map(|c| format!("lambda={:.3e}: unstable", c.lambda))
                .collect::<Vec<_>>()
                .join(", "),
        )),
    }
}

/// Axis-aligned regular lattice of parameter points; the first axis varies
/// slowest in the node ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLattice {
    pub axes: Vec<Vec<f64>>,
}

impl ParamLattice {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(Error::InvalidArgument("lattice needs at least one non-empty axis".into()));
        }
        if axes.iter().any(|a| a.windows(2).any(|w| !(w[1] > w[0]))) {
            return Err(Error::InvalidArgument("lattice axes must be strictly increasing".into()));
        }
        Ok(Self { axes })
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let idx = self.unflatten(flat);
        idx.iter().zip(&self.axes).map(|(&i, a)| a[i]).collect()
    }

    fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for d in (0..self.axes.len()).rev() {
            idx[d] = flat % self.axes[d].len();
            flat /= self.axes[d].len();
        }
        idx
    }

    fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (&i, a)| acc * a.len() + i)
    }

    pub fn contains(&self, mu: &[f64]) -> bool {
        mu.len() == self.axes.len()
            && mu.iter().zip(&self.axes).all(|(&m, a)| {
                let tol = 1e-12 * (a[a.len() - 1] - a[0]).abs().max(1.0);
                m >= a[0] - tol && m <= a[a.len() - 1] + tol
            })
    }

    /// Multilinear weights of the corner nodes of the cell containing `mu`.
    pub fn weights(&self, mu: &[f64]) -> Result<Vec<(usize, f64)>> {
        check_len("lattice query", self.axes.len(), mu.len())?;
        if !self.contains(mu) {
            return Err(Error::Extrapolation(mu.to_vec()));
        }
        let mut per_axis = Vec::with_capacity(self.axes.len());
        for (&m, a) in mu.iter().zip(&self.axes) {
            if a.len() == 1 {
                per_axis.push(vec![(0usize, 1.0)]);
                continue;
            }
            let mut lo = a.partition_point(|&v| v <= m).saturating_sub(1);
            lo = lo.min(a.len() - 2);
            let t = ((m - a[lo]) / (a[lo + 1] - a[lo])).clamp(0.0, 1.0);
            per_axis.push(vec![(lo, 1.0 - t), (lo + 1, t)]);
        }
        let mut out = vec![(Vec::new(), 1.0)];
        for axis in per_axis {
            let mut next = Vec::with_capacity(out.len() * axis.len());
            for (idx, w) in &out {
                for &(i, wi) in &axis {
                    let mut idx2: Vec<usize> = idx.clone();
                    idx2.push(i);
                    next.push((idx2, w * wi));
                }
            }
            out = next;
        }
        Ok(out
            .into_iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(idx, w)| (self.flatten(&idx), w))
            .collect())
    }
}

/// Entrywise multilinear interpolation of operators given at every lattice
/// node (in lattice node order).
pub fn interpolate(lattice: &ParamLattice, nodes: &[PolyOperators], mu: &[f64]) -> Result<PolyOperators> {
    check_len("lattice operators", lattice.n_nodes(), nodes.len())?;
    let first = &nodes[0];
    let blocks = first.blocks();
    if nodes.iter().any(|n| n.k != first.k || n.blocks() != blocks) {
        return Err(Error::InvalidArgument("lattice operators have inconsistent blocks".into()));
    }
    let weights = lattice.weights(mu)?;
    let mut theta = DMatrix::zeros(first.k, blocks.n_terms(first.k));
    let mut lambda = 0.0;
    for (node, w) in weights {
        theta += nodes[node].coefficient_matrix() * w;
        lambda += nodes[node].lambda * w;
    }
    Ok(PolyOperators::from_coefficients(first.k, blocks, &theta, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sqr_examples() {
        assert_eq!(sqr_pack(&DVector::from_vec(vec![2.0, 3.0])).as_slice(), &[4.0, 6.0, 9.0]);
        assert_eq!(sqr_pack(&DVector::from_vec(vec![5.0])).as_slice(), &[25.0]);
        // pairs (0,0) (1,0) (1,1) (2,0) (2,1) (2,2)
        assert_eq!(
            sqr_pack(&DVector::from_vec(vec![1.0, 0.0, -1.0])).as_slice(),
            &[1.0, 0.0, 0.0, -1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn sqr_encodes_symmetric_quadratic_forms() {
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // symmetric tensor T[o][i][j] = T[o][j][i]
        let mut t = vec![DMatrix::zeros(k, k); k];
        for tm in t.iter_mut() {
            let m = random(k, k, rng.random());
            *tm = &m + m.transpose();
        }
        let mut h = DMatrix::zeros(k, sqr_len(k));
        for o in 0..k {
            let mut p = 0;
            for i in 0..k {
                for j in 0..=i {
                    h[(o, p)] = if i == j { t[o][(i, i)] } else { 2.0 * t[o][(i, j)] };
                    p += 1;
                }
            }
        }
        for s in 0..10 {
            let x = random(k, 1, 100 + s).column(0).into_owned();
            let direct = DVector::from_fn(k, |o, _| (x.transpose() * &t[o] * &x)[(0, 0)]);
            assert!((&h * sqr_pack(&x) - direct).amax() < 1e-12);
        }
    }

    #[test]
    fn eval_examples() {
        let ops = PolyOperators {
            k: 2,
            c: None,
            a: Some(DMatrix::identity(2, 2)),
            h: None,
            lambda: 0.0,
        };
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(eval_poly_rhs(&ops, &x).unwrap(), x);
        let c = DVector::from_vec(vec![0.3, -0.1]);
        let only_c = PolyOperators {
            k: 2,
            c: Some(c.clone()),
            a: None,
            h: None,
            lambda: 0.0,
        };
        assert_eq!(eval_poly_rhs(&only_c, &DVector::from_vec(vec![9.0, 9.0])).unwrap(), c);
        let h = random(2, 3, 3);
        let only_h = PolyOperators {
            k: 2,
            c: None,
            a: None,
            h: Some(h.clone()),
            lambda: 0.0,
        };
        let out = eval_poly_rhs(&only_h, &DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert!((out - &h * DVector::from_vec(vec![4.0, 6.0, 9.0])).amax() < 1e-15);
    }

    #[test]
    fn fit_recovers_linear_operator() {
        let a = random(4, 4, 5);
        let x = random(4, 30, 6);
        let y = &a * &x;
        let (ops, diag) = fit(&x, &y, PolyBlocks::A, 0.0).unwrap();
        assert!(!diag.rank_deficient);
        let est = ops.a.unwrap();
        assert!((&est - &a).norm() / a.norm() < 1e-8);
    }

    #[test]
    fn fit_recovers_quadratic_operator() {
        let k = 3;
        let h = random(k, sqr_len(k), 7);
        let x = random(k, 40, 8);
        let y = DMatrix::from_columns(
            &x.column_iter()
                .map(|c| &h * sqr_pack(&c.into_owned()))
                .collect::<Vec<_>>(),
        );
        let blocks = PolyBlocks {
            constant: false,
            linear: false,
            quadratic: true,
        };
        let (ops, _) = fit(&x, &y, blocks, 0.0).unwrap();
        assert!((ops.h.unwrap() - &h).norm() / h.norm() < 1e-6);
    }

    #[test]
    fn huge_regularization_shrinks_to_zero() {
        let x = random(3, 1, 9);
        let y = random(3, 1, 10);
        let (ops, _) = fit(&x, &y, PolyBlocks::A, 1e14).unwrap();
        assert!(ops.a.unwrap().amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_fit_is_flagged() {
        let x = random(3, 1, 11);
        let y = random(3, 1, 12);
        let (ops, diag) = fit(&x, &y, PolyBlocks::A, 0.0).unwrap();
        assert!(diag.rank_deficient);
        // minimum-norm solution of a single sample interpolates it
        assert!((ops.a.unwrap() * &x - &y).amax() < 1e-12);
    }

    #[test]
    fn fit_validates_inputs() {
        let x = random(3, 4, 1);
        assert!(fit(&x, &random(2, 4, 2), PolyBlocks::A, 0.0).is_err());
        assert!(fit(&x, &random(3, 4, 2), PolyBlocks::A, -1.0).is_err());
        assert!(fit(&DMatrix::zeros(3, 0), &DMatrix::zeros(3, 0), PolyBlocks::A, 0.0).is_err());
    }

    #[test]
    fn vec_oracle_examples() {
        let x = random(3, 10, 13);
        let a = fit_vec_oracle(&x, &x).unwrap();
        assert!((a - DMatrix::identity(3, 3)).amax() < 1e-12);
        let z = fit_vec_oracle(&x, &DMatrix::zeros(3, 10)).unwrap();
        assert!(z.amax() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fit_agrees_with_vec_oracle(seed in 0u64..10_000, k in 1usize..6, extra in 0usize..20) {
            let n = k + 1 + extra;
            let x = random(k, n, seed);
            let y = random(k, n, seed + 1);
            let (ops, _) = fit(&x, &y, PolyBlocks::A, 0.0).unwrap();
            let oracle = fit_vec_oracle(&x, &y).unwrap();
            prop_assert!((ops.a.unwrap() - oracle).norm() <= 1e-9);
        }

        #[test]
        fn normal_equations_hold(seed in 0u64..10_000, lambda in 0.0f64..10.0) {
            let x = random(3, 25, seed);
            let y = random(3, 25, seed + 7);
            let (ops, _) = fit(&x, &y, PolyBlocks::CAH, lambda).unwrap();
            let d = design_matrix(&x, PolyBlocks::CAH);
            let theta = ops.coefficient_matrix().transpose();
            let resid = d.transpose() * (&d * &theta - y.transpose()) + &theta * lambda;
            let scale = d.norm() * (d.norm() * theta.norm() + y.norm()) + lambda * theta.norm();
            prop_assert!(resid.amax() <= 1e-8 * scale.max(1.0));
        }
    }

    fn linear_rollout(a: &DMatrix<f64>, x0: &DVector<f64>, times: &[f64]) -> DMatrix<f64> {
        let run = integrate_rom(|x| Ok(a * x), x0, times, 1);
        run.states
    }

    #[test]
    fn grid_search_on_noiseless_linear_data() {
        let s = random(3, 3, 20);
        let a = (&s - s.transpose()) - DMatrix::identity(3, 3) * 0.2;
        let times: Vec<f64> = (0..101).map(|j| j as f64 * 0.01).collect();
        let x0 = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let states = linear_rollout(&a, &x0, &times);
        let vel = &a * &states;
        let spec = RegSearchSpec::default();
        assert_eq!(spec.lambdas.len(), 40);
        let out = grid_search(
            &states,
            &vel,
            &x0,
            &states,
            &IntegrationSpec { times: times.clone(), substeps: 1 },
            &spec,
            PolyBlocks::A,
        )
        .unwrap();
        assert!(out.error < 1e-6, "error {}", out.error);
        assert!(out.lambda <= 1e-6);
    }

    #[test]
    fn grid_search_zero_targets_picks_smallest_lambda() {
        let times: Vec<f64> = (0..11).map(|j| j as f64 * 0.1).collect();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let states = DMatrix::from_columns(&vec![x0.clone(); 11]);
        let vel = DMatrix::zeros(2, 11);
        let out = grid_search(
            &states,
            &vel,
            &x0,
            &states,
            &IntegrationSpec { times, substeps: 1 },
            &RegSearchSpec::default(),
            PolyBlocks::A,
        )
        .unwrap();
        assert_eq!(out.lambda, 1e-8);
        assert!(out.operators.a.unwrap().amax() < 1e-12);
    }

    #[test]
    fn grid_search_fails_when_everything_diverges() {
        let times: Vec<f64> = (0..50).map(|j| j as f64 * 1.0).collect();
        let x0 = DVector::from_vec(vec![1.0]);
        // dx/dt = 5 x fits exactly and blows up over the horizon
        let states = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let vel = &states * 5.0;
        let spec = RegSearchSpec {
            lambdas: vec![1e-8, 1e-6],
        };
        let reference = DMatrix::from_element(1, 50, 1.0);
        let err = grid_search(
            &states,
            &vel,
            &x0,
            &reference,
            &IntegrationSpec { times, substeps: 1 },
            &spec,
            PolyBlocks::A,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SearchFailed(_)));
    }

    fn a_only(k: usize, a: DMatrix<f64>) -> PolyOperators {
        PolyOperators {
            k,
            c: None,
            a: Some(a),
            h: None,
            lambda: 0.0,
        }
    }

    #[test]
    fn interpolation_examples() {
        let lat = ParamLattice::new(vec![vec![0.0, 1.0]]).unwrap();
        let nodes = vec![a_only(2, DMatrix::zeros(2, 2)), a_only(2, DMatrix::identity(2, 2))];
        let mid = interpolate(&lat, &nodes, &[0.5]).unwrap();
        assert!((mid.a.unwrap() - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        let at_node = interpolate(&lat, &nodes, &[1.0]).unwrap();
        assert_eq!(at_node.a.unwrap(), DMatrix::identity(2, 2));
        assert!(matches!(interpolate(&lat, &nodes, &[1.5]), Err(Error::Extrapolation(_))));
    }

    #[test]
    fn bilinear_data_is_reproduced() {
        let lat = ParamLattice::new(vec![vec![0.2, 0.4], vec![0.3, 0.4]]).unwrap();
        let f = |m: &[f64]| DMatrix::from_row_slice(1, 1, &[1.0 + 2.0 * m[0] - m[1] + 3.0 * m[0] * m[1]]);
        let nodes: Vec<PolyOperators> = (0..4).map(|i| a_only(1, f(&lat.node(i)))).collect();
        for mu in [[0.25, 0.33], [0.39, 0.31], [0.3, 0.35]] {
            let got = interpolate(&lat, &nodes, &mu).unwrap().a.unwrap()[(0, 0)];
            assert!((got - f(&mu)[(0, 0)]).abs() < 1e-14);
        }
        // node order: first axis slowest
        assert_eq!(lat.node(1), vec![0.2, 0.4]);
        assert_eq!(lat.node(2), vec![0.4, 0.3]);
    }

    #[test]
    fn json_round_trip() {
        let (ops, _) = fit(&random(3, 20, 30), &random(3, 20, 31), PolyBlocks::CAH, 0.1).unwrap();
        let v = ops.to_json();
        assert_eq!(v["s"], 6);
        let back = PolyOperators::from_json(&v).unwrap();
        assert_eq!(back, ops);
    }
}
