//! Snapshot aggregation, POD, projection, derivative estimation, max-abs
//! scaling and train/validation splits.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::check_len;
use crate::fom::Trajectory;
use crate::{Error, Result};

/// Column-wise concatenation of per-parameter snapshot blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub data: DMatrix<f64>,
    /// Exclusive end column of each block.
    pub block_ends: Vec<usize>,
}

impl SnapshotMatrix {
    pub fn from_blocks(blocks: &[&DMatrix<f64>]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("no snapshot blocks".into()))?;
        let rows = first.nrows();
        let total: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut data = DMatrix::zeros(rows, total);
        let mut block_ends = Vec::with_capacity(blocks.len());
        let mut col = 0;
        for b in blocks {
            check_len("snapshot block rows", rows, b.nrows())?;
            data.columns_mut(col, b.ncols()).copy_from(*b);
            col += b.ncols();
            block_ends.push(col);
        }
        Ok(Self { data, block_ends })
    }

    /// States of every trajectory, in order.
    pub fn states_of(trajectories: &[&Trajectory]) -> Result<Self> {
        let blocks: Vec<&DMatrix<f64>> = trajectories.iter().map(|t| &t.states).collect();
        Self::from_blocks(&blocks)
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }
}

/// Orthonormal reduction map with the full retained singular spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

const POD_MAGIC: &[u8; 8] = b"OIFPOD1\0";

impl PodBasis {
    pub fn full_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Leading `k` modes of this basis (spectrum unchanged).
    pub fn truncate(&self, k: usize) -> Result<PodBasis> {
        if k == 0 || k > self.reduced_dim() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-mode basis to {k} modes",
                self.reduced_dim()
            )));
        }
        Ok(PodBasis {
            basis: self.basis.columns(0, k).into_owned(),
            singular_values: self.singular_values.clone(),
        })
    }

    /// `sum_{i > K} sigma_i^2`, the squared Frobenius projection error.
    pub fn tail_energy(&self) -> f64 {
        self.singular_values
            .iter()
            .skip(self.reduced_dim())
            .map(|s| s * s)
            .sum()
    }

    pub fn lift(&self, reduced: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("lift", self.reduced_dim(), reduced.nrows())?;
        Ok(&self.basis * reduced)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, POD_MAGIC)?;
        binio::write_u64(w, self.full_dim() as u64)?;
        binio::write_u64(w, self.reduced_dim() as u64)?;
        binio::write_u64(w, self.singular_values.len() as u64)?;
        binio::write_f64s(w, self.basis.as_slice())?;
        binio::write_f64s(w, &self.singular_values)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, POD_MAGIC)?;
        let n = binio::read_usize(r)?;
        let k = binio::read_usize(r)?;
        let ns = binio::read_usize(r)?;
        let basis = binio::read_f64s(r, n * k)?;
        let singular_values = binio::read_f64s(r, ns)?;
        Ok(Self {
            basis: DMatrix::from_vec(n, k, basis),
            singular_values,
        })
    }
}

/// POD basis of dimension `k` from the thin SVD of the snapshot matrix.
pub fn compute_pod(x: &DMatrix<f64>, k: usize) -> Result<PodBasis> {
    let (n, m) = x.shape();
    let max_k = n.min(m);
    if k == 0 || k > max_k {
        return Err(Error::InvalidArgument(format!(
            "POD dimension {k} outside 1..={max_k}"
        )));
    }
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut basis = DMatrix::zeros(n, k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        let mut col = u.column(src).into_owned();
        // sign convention: largest-magnitude entry positive
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        basis.set_column(dst, &col);
    }
    Ok(PodBasis {
        basis,
        singular_values,
    })
}

pub fn project(pod: &PodBasis, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_len("projection rows", pod.full_dim(), x.nrows())?;
    Ok(pod.basis.tr_mul(x))
}

pub fn project_vector(pod: &PodBasis, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("projection rows", pod.full_dim(), x.len())?;
    Ok(pod.basis.tr_mul(x))
}

/// Second-order finite-difference time derivatives on a uniform time grid:
/// central in the interior, one-sided three-point at both ends.
pub fn estimate_derivatives(states: &DMatrix<f64>, times: &[f64]) -> Result<DMatrix<f64>> {
    let nt = states.ncols();
    check_len("derivative times", nt, times.len())?;
    if nt < 3 {
        return Err(Error::InvalidArgument(format!(
            "derivative estimation needs at least 3 snapshots, got {nt}"
        )));
    }
    let dt = times[1] - times[0];
    let uniform = times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1e-300));
    if !(dt > 0.0) || !uniform {
        return Err(Error::InvalidArgument("derivative estimation needs a uniform increasing time grid".into()));
    }
    let mut out = DMatrix::zeros(states.nrows(), nt);
    let c = |j: usize| states.column(j);
    out.set_column(0, &((c(0) * -3.0 + c(1) * 4.0 - c(2)) / (2.0 * dt)));
    for j in 1..nt - 1 {
        out.set_column(j, &((c(j + 1) - c(j - 1)) / (2.0 * dt)));
    }
    out.set_column(
        nt - 1,
        &((c(nt - 1) * 3.0 - c(nt - 2) * 4.0 + c(nt - 3)) / (2.0 * dt)),
    );
    Ok(out)
}

/// Largest absolute entry, or 1 for an all-zero (or empty) group.
pub fn maxabs_fit(data: &DMatrix<f64>) -> f64 {
    let m = data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Max-abs over a subset of columns.
pub fn maxabs_fit_columns(data: &DMatrix<f64>, columns: &[usize]) -> f64 {
    let m = columns
        .iter()
        .flat_map(|&j| data.column(j).iter().copied().collect::<Vec<_>>())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

/// Seeded random 80/20 split with `floor(0.8 n)` training samples.
pub fn split(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (4 * n) / 5;
    let n_train = n_train.clamp(1, n - 1);
    let validation = idx.split_off(n_train);
    Ok(SplitIndices {
        train: idx,
        validation,
        seed,
    })
}

/// One scalar scale per variable group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub state: f64,
    pub velocity: f64,
    pub params: f64,
}

impl Default for Scales {
    fn default() -> Self {
        Self {
            state: 1.0,
            velocity: 1.0,
            params: 1.0,
        }
    }
}

/// Reduced snapshot pairs in physical reduced units.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPairs {
    pub states: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
    pub params: DMatrix<f64>,
}

impl SnapshotPairs {
    pub fn new(states: DMatrix<f64>, velocities: DMatrix<f64>, params: DMatrix<f64>) -> Result<Self> {
        check_len("velocity rows", states.nrows(), velocities.nrows())?;
        check_len("velocity samples", states.ncols(), velocities.ncols())?;
        check_len("parameter samples", states.ncols(), params.ncols())?;
        Ok(Self {
            states,
            velocities,
            params,
        })
    }

    /// Projects the states and exact velocities of each trajectory; each
    /// sample carries its trajectory's parameter vector.
    pub fn from_trajectories(pod: &PodBasis, trajectories: &[&Trajectory]) -> Result<Self> {
        let n_params = trajectories.first().map_or(0, |t| t.params.len());
        let mut xs = Vec::new();
        let mut fs = Vec::new();
        let mut ps = Vec::new();
        for tr in trajectories {
            check_len("trajectory parameters", n_params, tr.params.len())?;
            xs.push(project(pod, &tr.states)?);
            fs.push(project(pod, &tr.rhs)?);
            let mu = DVector::from_column_slice(&tr.params);
            ps.push(DMatrix::from_fn(n_params, tr.len(), |i, _| mu[i]));
        }
        let cat = |blocks: &[DMatrix<f64>]| -> Result<DMatrix<f64>> {
            let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
            if blocks.iter().all(|b| b.nrows() == 0) {
                let n: usize = blocks.iter().map(|b| b.ncols()).sum();
                return Ok(DMatrix::zeros(0, n));
            }
            Ok(SnapshotMatrix::from_blocks(&refs)?.data)
        };
        Self::new(cat(&xs)?, cat(&fs)?, cat(&ps)?)
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reduced_dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.params.nrows()
    }
}

/// Normalized reduced data ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDataset {
    pub states: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
    pub params: DMatrix<f64>,
    pub scales: Scales,
}

impl ReducedDataset {
    /// Scales each group by its max-abs over the `fit_columns` samples.
    pub fn normalize(pairs: &SnapshotPairs, fit_columns: &[usize]) -> Result<Self> {
        if fit_columns.is_empty() {
            return Err(Error::InvalidArgument("no samples to fit the scaling on".into()));
        }
        let scales = Scales {
            state: maxabs_fit_columns(&pairs.states, fit_columns),
            velocity: maxabs_fit_columns(&pairs.velocities, fit_columns),
            params: maxabs_fit_columns(&pairs.params, fit_columns),
        };
        Ok(Self::with_scales(pairs, scales))
    }

    pub fn with_scales(pairs: &SnapshotPairs, scales: Scales) -> Self {
        Self {
            states: &pairs.states / scales.state,
            velocities: &pairs.velocities / scales.velocity,
            params: &pairs.params / scales.params,
            scales,
        }
    }

    /// Undoes the scaling.
    pub fn to_pairs(&self) -> SnapshotPairs {
        SnapshotPairs {
            states: &self.states * self.scales.state,
            velocities: &self.velocities * self.scales.velocity,
            params: &self.params * self.scales.params,
        }
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reduced_dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.params.nrows()
    }
}
