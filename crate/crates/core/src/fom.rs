//! Full-order models: 1D periodic Burgers and 2D nonlinear heat conduction.
//!
//! Both simulators record the exact semi-discrete right-hand side next to each
//! stored state so that reduced velocities never have to be differentiated
//! numerically.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::binio;
use crate::error::check_len;
use crate::{Error, Result};

/// Uniform periodic grid on `[0, length)` with nodes at `j * dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub n_cells: usize,
    pub length: f64,
    pub dx: f64,
}

impl Grid1D {
    pub fn new(n_cells: usize, length: f64) -> Result<Self> {
        if n_cells == 0 || !(length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "periodic grid needs n_cells >= 1 and length > 0 (got {n_cells}, {length})"
            )));
        }
        Ok(Self {
            n_cells,
            length,
            dx: length / n_cells as f64,
        })
    }

    /// The Burgers domain `[0, 2π)`.
    pub fn burgers(n_cells: usize) -> Result<Self> {
        Self::new(n_cells, 2.0 * PI)
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 * self.dx
    }
}

/// Uniform grid on the unit square with `(nx+1) x (ny+1)` nodes, x fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument(format!(
                "heat grid needs at least 2 intervals per direction (got {nx} x {ny})"
            )));
        }
        Ok(Self {
            nx,
            ny,
            hx: 1.0 / nx as f64,
            hy: 1.0 / ny as f64,
        })
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }
}

/// Constants of the temperature-dependent diffusivity law.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeatParams {
    pub k0: f64,
    pub k1: f64,
    pub w: f64,
    pub tc: f64,
}

impl HeatParams {
    pub const K0: f64 = 1e-2;
    pub const W: f64 = 2e-2;

    /// Parameter point `mu = (k1, Tc)` with the fixed `k0` and `w`.
    pub fn new(k1: f64, tc: f64) -> Result<Self> {
        Self::with_constants(Self::K0, k1, Self::W, tc)
    }

    pub fn with_constants(k0: f64, k1: f64, w: f64, tc: f64) -> Result<Self> {
        if !(k0 > 0.0 && k1 > k0 && w > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "diffusivity law needs 0 < k0 < k1 and w > 0 (got k0={k0}, k1={k1}, w={w})"
            )));
        }
        Ok(Self { k0, k1, w, tc })
    }

    pub fn mu(&self) -> Vec<f64> {
        vec![self.k1, self.tc]
    }
}

/// States and exact right-hand sides at the stored times of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
    pub times: Vec<f64>,
    pub params: Vec<f64>,
}

const TRAJ_MAGIC: &[u8; 8] = b"OIFTRAJ1";

impl Trajectory {
    pub fn new(states: DMatrix<f64>, rhs: DMatrix<f64>, times: Vec<f64>, params: Vec<f64>) -> Result<Self> {
        check_len("trajectory rhs rows", states.nrows(), rhs.nrows())?;
        check_len("trajectory rhs columns", states.ncols(), rhs.ncols())?;
        check_len("trajectory times", states.ncols(), times.len())?;
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("trajectory times must be strictly increasing".into()));
        }
        Ok(Self {
            states,
            rhs,
            times,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Keeps the stored columns with `t <= t_end` (within round-off).
    pub fn truncate_to(&self, t_end: f64) -> Trajectory {
        let n = self
            .times
            .iter()
            .take_while(|&&t| t <= t_end + 1e-9 * t_end.abs().max(1.0))
            .count();
        Trajectory {
            states: self.states.columns(0, n).into_owned(),
            rhs: self.rhs.columns(0, n).into_owned(),
            times: self.times[..n].to_vec(),
            params: self.params.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, TRAJ_MAGIC)?;
        binio::write_u64(w, self.dim() as u64)?;
        binio::write_u64(w, self.len() as u64)?;
        binio::write_u64(w, self.params.len() as u64)?;
        binio::write_f64s(w, &self.times)?;
        binio::write_f64s(w, &self.params)?;
        binio::write_f64s(w, self.states.as_slice())?;
        binio::write_f64s(w, self.rhs.as_slice())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, TRAJ_MAGIC)?;
        let n = binio::read_usize(r)?;
        let nt = binio::read_usize(r)?;
        let np = binio::read_usize(r)?;
        let times = binio::read_f64s(r, nt)?;
        let params = binio::read_f64s(r, np)?;
        let states = binio::read_f64s(r, n * nt)?;
        let rhs = binio::read_f64s(r, n * nt)?;
        Self::new(
            DMatrix::from_vec(n, nt, states),
            DMatrix::from_vec(n, nt, rhs),
            times,
            params,
        )
    }
}

/// Semi-discrete Burgers velocity with the energy-conserving split flux
/// `F_{j+1/2} = (u_j^2 + u_j u_{j+1} + u_{j+1}^2) / 6`.
pub fn burgers_rhs(u: &DVector<f64>, grid: &Grid1D) -> Result<DVector<f64>> {
    check_len("burgers state", grid.n_cells, u.len())?;
    let n = grid.n_cells;
    let flux = |a: f64, b: f64| (a * a + a * b + b * b) / 6.0;
    let mut out = DVector::zeros(n);
    // flux through the left face of cell 0 wraps around
    let mut f_left = flux(u[n - 1], u[0]);
    for j in 0..n {
        let f_right = flux(u[j], u[(j + 1) % n]);
        out[j] = -(f_right - f_left) / grid.dx;
        f_left = f_right;
    }
    Ok(out)
}

pub fn burgers_initial(grid: &Grid1D) -> DVector<f64> {
    DVector::from_fn(grid.n_cells, |j, _| {
        let x = grid.node(j);
        0.025 * ((4.0 * x).sin() + 2.0 * (6.0 * x).cos()) + 2.0
    })
}

/// Discrete energy `dx * sum u_j^2`.
pub fn energy(u: &DVector<f64>, grid: &Grid1D) -> f64 {
    grid.dx * u.norm_squared()
}

pub fn heat_kappa(t: f64, p: &HeatParams) -> f64 {
    0.5 * (p.k0 + p.k1) + 0.5 * (p.k1 - p.k0) * ((t - p.tc) / p.w).tanh()
}

/// `div(kappa grad v)` on interior nodes with face diffusivity averaged from
/// the given nodal values. Boundary rows are left at zero.
fn apply_diffusion(kappa: &[f64], v: &[f64], grid: &Grid2D, out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    let sx = 1.0 / (grid.hx * grid.hx);
    let sy = 1.0 / (grid.hy * grid.hy);
    let stride = nx + 1;
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 1..ny {
        for i in 1..nx {
            let c = j * stride + i;
            let (e, wst, n, s) = (c + 1, c - 1, c + stride, c - stride);
            let ke = 0.5 * (kappa[c] + kappa[e]);
            let kw = 0.5 * (kappa[c] + kappa[wst]);
            let kn = 0.5 * (kappa[c] + kappa[n]);
            let ks = 0.5 * (kappa[c] + kappa[s]);
            out[c] = sx * (ke * (v[e] - v[c]) - kw * (v[c] - v[wst]))
                + sy * (kn * (v[n] - v[c]) - ks * (v[c] - v[s]));
        }
    }
}

fn nodal_kappa(t: &[f64], p: &HeatParams) -> Vec<f64> {
    t.iter().map(|&v| heat_kappa(v, p)).collect()
}

/// Nonlinear heat velocity: `div(kappa(T) grad T) + 1` on interior nodes,
/// zero on the Dirichlet boundary.
pub fn heat_rhs(t: &DVector<f64>, grid: &Grid2D, p: &HeatParams) -> Result<DVector<f64>> {
    check_len("heat state", grid.n_nodes(), t.len())?;
    let kappa = nodal_kappa(t.as_slice(), p);
    let mut out = DVector::zeros(t.len());
    apply_diffusion(&kappa, t.as_slice(), grid, out.as_mut_slice());
    for j in 1..grid.ny {
        for i in 1..grid.nx {
            out[grid.index(i, j)] += 1.0;
        }
    }
    Ok(out)
}

fn ensure_finite(v: &DVector<f64>, time: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            time,
            reason: "non-finite state".into(),
        })
    }
}

/// One classical four-stage Runge-Kutta step.
pub fn rk4_step<F>(rhs: &F, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let k1 = rhs(t, x)?;
    let k2 = rhs(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)))?;
    let k3 = rhs(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)))?;
    let k4 = rhs(t + dt, &(x + &k3 * dt))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    ensure_finite(&next, t + dt)?;
    Ok(next)
}

const PICARD_TOL: f64 = 1e-10;
const PICARD_MAX_ITERS: usize = 100;

/// Crank-Nicolson step `T+ = T + dt/2 (f(T) + f(T+))`, solved by Picard
/// iteration with the diffusivity lagged at the previous iterate. Each linear
/// solve is a conjugate-gradient solve on the interior nodes.
pub fn crank_nicolson_step(t: &DVector<f64>, grid: &Grid2D, p: &HeatParams, dt: f64) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let n = grid.n_nodes();
    check_len("heat state", n, t.len())?;
    let interior: Vec<usize> = (1..grid.ny)
        .flat_map(|j| (1..grid.nx).map(move |i| (i, j)))
        .map(|(i, j)| grid.index(i, j))
        .collect();

    let f0 = heat_rhs(t, grid, p)?;
    // Explicit part plus the source of the implicit half.
    let mut b = vec![0.0; n];
    for &c in &interior {
        b[c] = t[c] + 0.5 * dt * (f0[c] + 1.0);
    }
    // Boundary values are Dirichlet data; only the interior is solved for.
    let mut boundary = t.clone();
    for &c in &interior {
        boundary[c] = 0.0;
    }

    let mut current = t.clone();
    let mut work = vec![0.0; n];
    for iter in 0..PICARD_MAX_ITERS {
        let kappa = nodal_kappa(current.as_slice(), p);
        // Move the boundary coupling to the right-hand side.
        apply_diffusion(&kappa, boundary.as_slice(), grid, &mut work);
        let mut rhs_vec = b.clone();
        for &c in &interior {
            rhs_vec[c] += 0.5 * dt * work[c];
        }
        let apply = |v: &[f64], out: &mut [f64], scratch: &mut [f64]| {
            apply_diffusion(&kappa, v, grid, scratch);
            for &c in &interior {
                out[c] = v[c] - 0.5 * dt * scratch[c];
            }
        };
        let mut next_interior: Vec<f64> = vec![0.0; n];
        for &c in &interior {
            next_interior[c] = current[c];
        }
        conjugate_gradient(&apply, &rhs_vec, &mut next_interior, &interior)?;

        let mut update = 0.0f64;
        let mut next = boundary.clone();
        for &c in &interior {
            next[c] = next_interior[c];
            update = update.max((next_interior[c] - current[c]).abs());
        }
        ensure_finite(&next, f64::NAN)?;
        current = next;
        if update <= PICARD_TOL {
            return Ok(current);
        }
        if iter + 1 == PICARD_MAX_ITERS {
            return Err(Error::SolverDivergence {
                iterations: PICARD_MAX_ITERS,
                residual: update,
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Conjugate gradients restricted to `active` entries of full-length vectors.
fn conjugate_gradient<A>(apply: &A, b: &[f64], x: &mut [f64], active: &[usize]) -> Result<()>
where
    A: Fn(&[f64], &mut [f64], &mut [f64]),
{
    let n = b.len();
    let mut scratch = vec![0.0; n];
    let mut ax = vec![0.0; n];
    apply(x, &mut ax, &mut scratch);
    let mut r = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut bnorm2 = 0.0;
    let mut rr = 0.0;
    for &c in active {
        r[c] = b[c] - ax[c];
        d[c] = r[c];
        rr += r[c] * r[c];
        bnorm2 += b[c] * b[c];
    }
    let tol2 = (1e-14 * bnorm2.sqrt().max(1e-300)).powi(2);
    let mut ad = vec![0.0; n];
    for _ in 0..(10 * active.len() + 10) {
        if rr <= tol2 {
            return Ok(());
        }
        apply(&d, &mut ad, &mut scratch);
        let dad: f64 = active.iter().map(|&c| d[c] * ad[c]).sum();
        if !(dad > 0.0) {
            break;
        }
        let alpha = rr / dad;
        let mut rr_new = 0.0;
        for &c in active {
            x[c] += alpha * d[c];
            r[c] -= alpha * ad[c];
            rr_new += r[c] * r[c];
        }
        let beta = rr_new / rr;
        for &c in active {
            d[c] = r[c] + beta * d[c];
        }
        rr = rr_new;
    }
    if rr.sqrt() <= 1e-10 * bnorm2.sqrt().max(1.0) {
        Ok(())
    } else {
        Err(Error::SolverDivergence {
            iterations: 10 * active.len() + 10,
            residual: rr.sqrt(),
        })
    }
}

/// A full-order model ready to be simulated.
#[derive(Debug, Clone, PartialEq)]
pub enum FullOrderModel {
    Burgers(Grid1D),
    Heat { grid: Grid2D, params: HeatParams },
}

impl FullOrderModel {
    pub fn dim(&self) -> usize {
        match self {
            FullOrderModel::Burgers(g) => g.n_cells,
            FullOrderModel::Heat { grid, .. } => grid.n_nodes(),
        }
    }

    pub fn rhs(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            FullOrderModel::Burgers(g) => burgers_rhs(x, g),
            FullOrderModel::Heat { grid, params } => heat_rhs(x, grid, params),
        }
    }

    pub fn initial_state(&self) -> DVector<f64> {
        match self {
            FullOrderModel::Burgers(g) => burgers_initial(g),
            FullOrderModel::Heat { grid, .. } => DVector::zeros(grid.n_nodes()),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            FullOrderModel::Burgers(_) => Vec::new(),
            FullOrderModel::Heat { params, .. } => params.mu(),
        }
    }

    fn step(&self, x: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>> {
        match self {
            FullOrderModel::Burgers(g) => rk4_step(&|_, u: &DVector<f64>| burgers_rhs(u, g), x, t, dt),
            FullOrderModel::Heat { grid, params } => crank_nicolson_step(x, grid, params, dt).map_err(|e| match e {
                Error::Integration { reason, .. } => Error::Integration { time: t + dt, reason },
                other => other,
            }),
        }
    }
}

/// Integrates from the model's initial condition to `t_final`, storing every
/// `stride`-th step (always including `t = 0`).
pub fn simulate(fom: &FullOrderModel, t_final: f64, dt: f64, stride: usize) -> Result<Trajectory> {
    if !(t_final >= 0.0) || !(dt > 0.0) || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "simulate needs t_final >= 0, dt > 0, stride >= 1 (got {t_final}, {dt}, {stride})"
        )));
    }
    let n_steps = (t_final / dt).round() as usize;
    if (n_steps as f64 * dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "t_final = {t_final} is not a whole number of steps of {dt}"
        )));
    }
    let mut x = fom.initial_state();
    let mut states = vec![x.clone()];
    let mut times = vec![0.0];
    for step in 1..=n_steps {
        let t = (step - 1) as f64 * dt;
        x = fom.step(&x, t, dt)?;
        if step % stride == 0 {
            states.push(x.clone());
            times.push(step as f64 * dt);
        }
    }
    let rhs = states.iter().map(|s| fom.rhs(s)).collect::<Result<Vec<_>>>()?;
    Trajectory::new(
        DMatrix::from_columns(&states),
        DMatrix::from_columns(&rhs),
        times,
        fom.params(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn burgers_constant_state_is_steady() {
        let g = Grid1D::burgers(64).unwrap();
        let u = DVector::from_element(64, 2.0);
        let r = burgers_rhs(&u, &g).unwrap();
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn burgers_four_cell_stencil() {
        // fluxes: F_{1/2} = 1/6, F_{3/2} = F_{5/2} = 0, F_{7/2} = 1/6 (wraps to cell 0)
        let g = Grid1D::burgers(4).unwrap();
        let u = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let r = burgers_rhs(&u, &g).unwrap();
        let dx = PI / 2.0;
        let expected = [0.0, 1.0 / 6.0 / dx, 0.0, -1.0 / 6.0 / dx];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn burgers_semi_discrete_energy_vanishes() {
        let g = Grid1D::burgers(500).unwrap();
        for seed in 0..20 {
            let u = rand_vec(500, seed);
            let r = burgers_rhs(&u, &g).unwrap();
            let scale = u.norm() * r.norm();
            assert!(u.dot(&r).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn burgers_rhs_rejects_wrong_length() {
        let g = Grid1D::burgers(8).unwrap();
        assert!(matches!(
            burgers_rhs(&DVector::zeros(7), &g),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn burgers_initial_condition_values() {
        let g = Grid1D::burgers(500).unwrap();
        let u = burgers_initial(&g);
        assert!((u[0] - 2.05).abs() < 1e-15);
        let mean = u.sum() / 500.0;
        assert!((mean - 2.0).abs() < 1e-12);
        // x = pi/2 sits on node 125
        assert!((g.node(125) - PI / 2.0).abs() < 1e-14);
        assert!((u[125] - 1.95).abs() < 1e-12);
    }

    #[test]
    fn energy_of_simple_fields() {
        let g = Grid1D::burgers(100).unwrap();
        assert_eq!(energy(&DVector::zeros(100), &g), 0.0);
        assert!((energy(&DVector::from_element(100, 1.0), &g) - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn kappa_law() {
        let p = HeatParams::new(0.2, 0.3).unwrap();
        assert!((heat_kappa(0.3, &p) - 0.105).abs() < 1e-15);
        assert!((heat_kappa(1e6, &p) - 0.2).abs() < 1e-15);
        let expected = 0.105 + 0.095 * 1f64.tanh();
        assert!((heat_kappa(0.3 + 0.02, &p) - expected).abs() < 1e-15);
        assert!((expected - 0.17735).abs() < 1e-5);
    }

    #[test]
    fn heat_params_validation() {
        assert!(HeatParams::with_constants(0.1, 0.05, 0.02, 0.3).is_err());
        assert!(HeatParams::with_constants(0.01, 0.2, 0.0, 0.3).is_err());
    }

    #[test]
    fn heat_zero_field_gives_unit_source() {
        let g = Grid2D::new(6, 5).unwrap();
        let p = HeatParams::new(0.2, 0.3).unwrap();
        let r = heat_rhs(&DVector::zeros(g.n_nodes()), &g, &p).unwrap();
        for j in 0..=g.ny {
            for i in 0..=g.nx {
                let v = r[g.index(i, j)];
                if g.is_boundary(i, j) {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, 1.0);
                }
            }
        }
    }

    #[test]
    fn heat_linear_field_in_constant_regime() {
        let g = Grid2D::new(10, 10).unwrap();
        // Tc far above the field: kappa == k0 to round-off
        let p = HeatParams::new(0.2, 100.0).unwrap();
        let t = DVector::from_fn(g.n_nodes(), |c, _| {
            let i = c % (g.nx + 1);
            0.3 * i as f64 * g.hx
        });
        let r = heat_rhs(&t, &g, &p).unwrap();
        for j in 1..g.ny {
            for i in 1..g.nx {
                assert!((r[g.index(i, j)] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heat_single_hot_node_stencil() {
        let g = Grid2D::new(4, 4).unwrap();
        let p = HeatParams::new(0.2, 0.3).unwrap();
        let mut t = DVector::zeros(g.n_nodes());
        t[g.index(2, 2)] = 1.0;
        let r = heat_rhs(&t, &g, &p).unwrap();
        let kbar = 0.5 * (heat_kappa(1.0, &p) + heat_kappa(0.0, &p));
        let inv_h2 = 16.0;
        assert!((r[g.index(2, 2)] - (1.0 - 4.0 * kbar * inv_h2)).abs() < 1e-13);
        for (i, j) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!((r[g.index(i, j)] - (1.0 + kbar * inv_h2)).abs() < 1e-13);
        }
        for (i, j) in [(1, 1), (3, 1), (1, 3), (3, 3)] {
            assert!((r[g.index(i, j)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn heat_matches_assembled_constant_laplacian() {
        let g = Grid2D::new(5, 7).unwrap();
        let p = HeatParams::new(0.3, 50.0).unwrap();
        let k = heat_kappa(0.0, &p);
        let n = g.n_nodes();
        let mut lap = DMatrix::zeros(n, n);
        for j in 1..g.ny {
            for i in 1..g.nx {
                let c = g.index(i, j);
                let sx = k / (g.hx * g.hx);
                let sy = k / (g.hy * g.hy);
                lap[(c, c)] = -2.0 * sx - 2.0 * sy;
                lap[(c, g.index(i + 1, j))] = sx;
                lap[(c, g.index(i - 1, j))] = sx;
                lap[(c, g.index(i, j + 1))] = sy;
                lap[(c, g.index(i, j - 1))] = sy;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = DVector::from_fn(n, |c, _| {
            let (i, j) = (c % (g.nx + 1), c / (g.nx + 1));
            if g.is_boundary(i, j) {
                0.0
            } else {
                rng.random_range(0.0..0.01)
            }
        });
        let mut expected = &lap * &t;
        for j in 1..g.ny {
            for i in 1..g.nx {
                expected[g.index(i, j)] += 1.0;
            }
        }
        let r = heat_rhs(&t, &g, &p).unwrap();
        assert!((r - expected).amax() < 1e-12);
    }

    #[test]
    fn rk4_basics() {
        let zero = |_: f64, x: &DVector<f64>| Ok(DVector::zeros(x.len()));
        let x = DVector::from_vec(vec![1.0, -3.0]);
        assert_eq!(rk4_step(&zero, &x, 0.0, 0.1).unwrap(), x);

        let decay = |_: f64, x: &DVector<f64>| Ok(-x);
        let y = rk4_step(&decay, &DVector::from_vec(vec![1.0]), 0.0, 0.1).unwrap();
        assert!((y[0] - (-0.1f64).exp()).abs() <= 1e-7);

        let unit = |_: f64, x: &DVector<f64>| Ok(DVector::from_element(x.len(), 1.0));
        let z = rk4_step(&unit, &DVector::from_vec(vec![0.5]), 0.0, 0.25).unwrap();
        assert_eq!(z[0], 0.75);

        assert!(rk4_step(&unit, &x, 0.0, 0.0).is_err());
    }

    #[test]
    fn rk4_reports_non_finite() {
        let blow = |_: f64, x: &DVector<f64>| Ok(x * f64::INFINITY);
        let err = rk4_step(&blow, &DVector::from_vec(vec![1.0]), 0.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::Integration { .. }));
    }

    #[test]
    fn rk4_observed_order() {
        let decay = |_: f64, x: &DVector<f64>| Ok(-x);
        let run = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let mut x = DVector::from_vec(vec![1.0]);
            for s in 0..n {
                x = rk4_step(&decay, &x, s as f64 * dt, dt).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let (e1, e2) = (run(0.1), run(0.05));
        let order = (e1 / e2).log2();
        assert!(order >= 3.9, "order {order}");
    }

    fn steady_state(g: &Grid2D, p: &HeatParams) -> DVector<f64> {
        let mut t = DVector::zeros(g.n_nodes());
        for _ in 0..400 {
            t = crank_nicolson_step(&t, g, p, 5.0).unwrap();
        }
        t
    }

    #[test]
    fn crank_nicolson_keeps_steady_state() {
        let g = Grid2D::new(8, 8).unwrap();
        let p = HeatParams::new(0.2, 100.0).unwrap();
        let ts = steady_state(&g, &p);
        assert!(heat_rhs(&ts, &g, &p).unwrap().amax() < 1e-8);
        let next = crank_nicolson_step(&ts, &g, &p, 0.01).unwrap();
        assert!((next - &ts).amax() < 1e-9);
    }

    fn cn_run(g: &Grid2D, p: &HeatParams, t_end: f64, dt: f64) -> DVector<f64> {
        let n = (t_end / dt).round() as usize;
        let mut t = DVector::zeros(g.n_nodes());
        for _ in 0..n {
            t = crank_nicolson_step(&t, g, p, dt).unwrap();
        }
        t
    }

    #[test]
    fn crank_nicolson_step_size_consistency() {
        let g = Grid2D::new(12, 12).unwrap();
        let p = HeatParams::new(0.2, 0.3).unwrap();
        let t0 = cn_run(&g, &p, 0.05, 0.01);
        let a = crank_nicolson_step(&t0, &g, &p, 1e-3).unwrap();
        let b = crank_nicolson_step(&t0, &g, &p, 5e-4).unwrap();
        let da = (&a - &t0).norm();
        let db = (&b - &t0).norm();
        // O(dt): halving the step halves the increment
        assert!((da / db - 2.0).abs() < 0.05, "{}", da / db);
    }

    #[test]
    fn crank_nicolson_second_order() {
        let g = Grid2D::new(12, 12).unwrap();
        let p = HeatParams::new(0.2, 0.3).unwrap();
        let a = cn_run(&g, &p, 0.1, 0.01);
        let b = cn_run(&g, &p, 0.1, 0.005);
        let c = cn_run(&g, &p, 0.1, 0.0025);
        let order = ((&a - &b).norm() / (&b - &c).norm()).log2();
        assert!(order >= 1.9, "order {order}");
    }

    #[test]
    fn crank_nicolson_agrees_with_fine_rk4() {
        let g = Grid2D::new(12, 12).unwrap();
        let p = HeatParams::new(0.2, 0.3).unwrap();
        let cn = cn_run(&g, &p, 0.1, 1e-3);
        let rhs = |_: f64, x: &DVector<f64>| heat_rhs(x, &g, &p);
        let mut x = DVector::zeros(g.n_nodes());
        let dt = 1e-4;
        for s in 0..1000 {
            x = rk4_step(&rhs, &x, s as f64 * dt, dt).unwrap();
        }
        let rel = (&cn - &x).norm() / x.norm();
        assert!(rel <= 1e-4, "relative difference {rel}");
    }

    #[test]
    fn simulate_column_counts() {
        let g = Grid1D::burgers(50).unwrap();
        let fom = FullOrderModel::Burgers(g);
        let tr = simulate(&fom, 4.0, 0.01, 1).unwrap();
        assert_eq!(tr.len(), 401);
        assert_eq!(tr.states.ncols(), tr.rhs.ncols());
        assert!((tr.times[400] - 4.0).abs() < 1e-12);
        let single = simulate(&fom, 0.0, 0.01, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.states.column(0), burgers_initial(&g));
        assert!(simulate(&fom, 1.0, 0.01, 0).is_err());
    }

    #[test]
    fn simulate_stride_and_exact_rhs() {
        let g = Grid1D::burgers(40).unwrap();
        let fom = FullOrderModel::Burgers(g);
        let tr = simulate(&fom, 0.5, 0.01, 5).unwrap();
        assert_eq!(tr.len(), 11);
        for j in 0..tr.len() {
            let r = burgers_rhs(&tr.states.column(j).into_owned(), &g).unwrap();
            assert_eq!(r, tr.rhs.column(j).into_owned());
        }
    }

    #[test]
    fn heat_run_is_symmetric() {
        let g = Grid2D::new(10, 10).unwrap();
        let p = HeatParams::new(0.2, 0.3).unwrap();
        let fom = FullOrderModel::Heat { grid: g, params: p };
        let tr = simulate(&fom, 2.0, 0.01, 50).unwrap();
        let last = tr.states.column(tr.len() - 1);
        for j in 0..=g.ny {
            for i in 0..=g.nx {
                assert!((last[g.index(i, j)] - last[g.index(j, i)]).abs() < 1e-10);
            }
        }
        assert_eq!(tr.params, vec![0.2, 0.3]);
    }

    #[test]
    fn trajectory_round_trip() {
        let g = Grid1D::burgers(16).unwrap();
        let tr = simulate(&FullOrderModel::Burgers(g), 0.1, 0.01, 2).unwrap();
        let mut buf = Vec::new();
        tr.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"OIFTRAJ1");
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 16);
        let back = Trajectory::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, tr);
        buf[0] = b'X';
        assert!(Trajectory::read_from(&mut buf.as_slice()).is_err());
    }
}
