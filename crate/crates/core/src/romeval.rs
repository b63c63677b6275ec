//! Reduced time integration, the intrusive Galerkin baseline, the relative
//! state error and energy diagnostics.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::check_len;
use crate::fom::Grid1D;
use crate::reduction::PodBasis;
use crate::{Error, Result};

/// A run is declared divergent once `|x| > DIVERGENCE_FACTOR * max(|x0|, 1)`.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct RomRun {
    /// Reduced states at the stored times; truncated at divergence.
    pub states: DMatrix<f64>,
    pub times: Vec<f64>,
    pub stable: bool,
    pub failure: Option<String>,
    /// Relative error against the full-order reference, once computed.
    pub error: Option<f64>,
    pub wall_time: Duration,
}

impl RomRun {
    pub fn completed(&self) -> bool {
        self.stable && self.states.ncols() == self.times.len()
    }

    /// Lifts through `pod` and scores against the reference states. Unstable
    /// runs score `+inf`.
    pub fn score(&mut self, pod: &PodBasis, reference: &DMatrix<f64>) -> Result<f64> {
        let e = if self.completed() {
            relative_error(&pod.lift(&self.states)?, reference)?
        } else {
            f64::INFINITY
        };
        self.error = Some(e);
        Ok(e)
    }
}

/// RK4 over the reduced dynamics on a uniform time grid, with `substeps`
/// RK4 steps between consecutive stored times.
pub fn integrate_rom<F>(mut rhs: F, x0: &DVector<f64>, times: &[f64], substeps: usize) -> RomRun
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let start = Instant::now();
    let k = x0.len();
    let mut stored = vec![x0.clone()];
    let limit = DIVERGENCE_FACTOR * if x0.norm() > 0.0 { x0.norm() } else { 1.0 };
    let substeps = substeps.max(1);
    let mut failure = None;
    if !x0.iter().all(|v| v.is_finite()) {
        failure = Some("non-finite initial state".to_string());
    }
    let mut x = x0.clone();
    'outer: for w in times.windows(2) {
        if failure.is_some() {
            break;
        }
        let h = (w[1] - w[0]) / substeps as f64;
        for _ in 0..substeps {
            let step = (|| -> Result<DVector<f64>> {
                let k1 = rhs(&x)?;
                let k2 = rhs(&(&x + &k1 * (0.5 * h)))?;
                let k3 = rhs(&(&x + &k2 * (0.5 * h)))?;
                let k4 = rhs(&(&x + &k3 * h))?;
                Ok(&x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
            })();
            match step {
                Ok(next) => {
                    let norm = next.norm();
                    if !norm.is_finite() {
                        failure = Some(format!("non-finite state near t = {}", w[1]));
                        break 'outer;
                    }
                    if norm > limit {
                        failure = Some(format!("state norm {norm:e} exceeded {limit:e} near t = {}", w[1]));
                        break 'outer;
                    }
                    x = next;
                }
                Err(e) => {
                    failure = Some(format!("right-hand side failed near t = {}: {e}", w[1]));
                    break 'outer;
                }
            }
        }
        stored.push(x.clone());
    }
    let states = if stored.is_empty() {
        DMatrix::zeros(k, 0)
    } else {
        DMatrix::from_columns(&stored)
    };
    RomRun {
        states,
        times: times.to_vec(),
        stable: failure.is_none(),
        failure,
        error: None,
        wall_time: start.elapsed(),
    }
}

/// Intrusive reduced velocity `V^T f(V x)`.
pub fn galerkin_rhs<F>(pod: &PodBasis, fom_rhs: F, reduced: &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    check_len("galerkin reduced state", pod.reduced_dim(), reduced.len())?;
    let full = &pod.basis * reduced;
    let f = fom_rhs(&full)?;
    check_len("galerkin full velocity", pod.full_dim(), f.len())?;
    Ok(pod.basis.tr_mul(&f))
}

/// `sum_i |x_rom(t_i) - x_fom(t_i)| / sum_i |x_fom(t_i)|`.
pub fn relative_error(rom: &DMatrix<f64>, fom: &DMatrix<f64>) -> Result<f64> {
    if rom.shape() != fom.shape() {
        return Err(Error::Dimension {
            context: "relative error trajectories",
            expected: fom.len(),
            actual: rom.len(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in rom.column_iter().zip(fom.column_iter()) {
        num += (a - b).norm();
        den += b.norm();
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("reference trajectory is identically zero".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyDiagnostics {
    pub times: Vec<f64>,
    /// `dx * sum u^2` of the lifted state.
    pub energy: Vec<f64>,
    /// `E(t) - E(0)`.
    pub violation: Vec<f64>,
}

impl EnergyDiagnostics {
    pub fn from_energy(times: &[f64], energy: Vec<f64>) -> Self {
        let e0 = energy.first().copied().unwrap_or(0.0);
        let violation = energy.iter().map(|e| e - e0).collect();
        Self {
            times: times[..energy.len()].to_vec(),
            energy,
            violation,
        }
    }

    /// `max_t |E(t) - E(0)| / E(0)` over stored times `>= t_start`.
    pub fn max_relative_drift_from(&self, t_start: f64) -> f64 {
        let e0 = self.energy.first().copied().unwrap_or(0.0);
        let m = self
            .times
            .iter()
            .zip(&self.violation)
            .filter(|(t, _)| **t >= t_start - 1e-12)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max);
        if e0 != 0.0 {
            m / e0.abs()
        } else {
            m
        }
    }

    pub fn max_relative_drift(&self) -> f64 {
        self.max_relative_drift_from(f64::NEG_INFINITY)
    }
}

/// Energy series of a lifted scalar field on a periodic grid.
pub fn energy_violation(lifted: &DMatrix<f64>, times: &[f64], grid: &Grid1D) -> Result<EnergyDiagnostics> {
    check_len("energy field length", grid.n_cells, lifted.nrows())?;
    if lifted.ncols() > times.len() {
        return Err(Error::Dimension {
            context: "energy times",
            expected: lifted.ncols(),
            actual: times.len(),
        });
    }
    let energy = lifted
        .column_iter()
        .map(|c| grid.dx * c.norm_squared())
        .collect();
    Ok(EnergyDiagnostics::from_energy(times, energy))
}

/// Energy series computed in reduced coordinates, `dx * |x_hat|^2`; equal to
/// the lifted energy for an orthonormal basis.
pub fn reduced_energy(states: &DMatrix<f64>, times: &[f64], dx: f64) -> EnergyDiagnostics {
    let energy = states.column_iter().map(|c| dx * c.norm_squared()).collect();
    EnergyDiagnostics::from_energy(times, energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{burgers_initial, burgers_rhs, simulate, FullOrderModel};
    use crate::reduction::compute_pod;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn times(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|j| j as f64 * dt).collect()
    }

    fn random(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_rhs_keeps_state() {
        let x0 = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let run = integrate_rom(|x| Ok(DVector::zeros(x.len())), &x0, &times(11, 0.1), 1);
        assert!(run.stable);
        for c in run.states.column_iter() {
            assert_eq!(c, x0);
        }
    }

    #[test]
    fn skew_system_conserves_norm() {
        let s = random(6, 6, 1);
        let a = &s - s.transpose();
        let x0 = DVector::from_vec(vec![1.0, -0.5, 0.3, 0.2, 0.8, -1.0]);
        let run = integrate_rom(|x| Ok(&a * x), &x0, &times(401, 0.01), 1);
        let e0 = x0.norm_squared();
        let drift = run
            .states
            .column_iter()
            .map(|c| (c.norm_squared() - e0).abs() / e0)
            .fold(0.0, f64::max);
        assert!(drift <= 1e-8, "drift {drift}");
    }

    #[test]
    fn dissipative_system_decays() {
        let l = random(5, 5, 2).lower_triangle();
        let a = -(&l * l.transpose());
        let x0 = DVector::from_vec(vec![1.0, 1.0, -1.0, 0.5, 0.0]);
        let run = integrate_rom(|x| Ok(&a * x), &x0, &times(201, 0.01), 1);
        let norms: Vec<f64> = run.states.column_iter().map(|c| c.norm()).collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn divergence_is_flagged_and_truncated() {
        let x0 = DVector::from_vec(vec![1.0]);
        let run = integrate_rom(|x| Ok(x * 50.0), &x0, &times(101, 0.1), 1);
        assert!(!run.stable);
        assert!(run.states.ncols() < 101);
        assert!(run.failure.is_some());
    }

    #[test]
    fn zero_initial_state_uses_unit_reference() {
        let x0 = DVector::zeros(2);
        let run = integrate_rom(|x| Ok(DVector::from_element(x.len(), 1.0)), &x0, &times(11, 0.1), 2);
        assert!(run.stable);
        assert!((run.states[(0, 10)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn galerkin_of_linear_map() {
        let pod = compute_pod(&random(10, 20, 3), 4).unwrap();
        let a = random(10, 10, 4);
        let reduced = pod.basis.tr_mul(&(&a * &pod.basis));
        for j in 0..4 {
            let e = DVector::from_fn(4, |i, _| if i == j { 1.0 } else { 0.0 });
            let g = galerkin_rhs(&pod, |x| Ok(&a * x), &e).unwrap();
            assert!((g - reduced.column(j)).amax() < 1e-12);
        }
        let z = galerkin_rhs(&pod, |x| Ok(DVector::zeros(x.len())), &DVector::from_element(4, 1.0)).unwrap();
        assert_eq!(z, DVector::zeros(4));
    }

    #[test]
    fn galerkin_burgers_initial_state() {
        let grid = Grid1D::burgers(64).unwrap();
        let tr = simulate(&FullOrderModel::Burgers(grid), 0.2, 0.01, 1).unwrap();
        let pod = compute_pod(&tr.states, 5).unwrap();
        let x0 = burgers_initial(&grid);
        let r0 = pod.basis.tr_mul(&x0);
        let g = galerkin_rhs(&pod, |u| burgers_rhs(u, &grid), &r0).unwrap();
        let direct = pod.basis.tr_mul(&burgers_rhs(&(&pod.basis * pod.basis.tr_mul(&x0)), &grid).unwrap());
        assert!((g - direct).amax() < 1e-13);
    }

    #[test]
    fn relative_error_examples() {
        let f = random(5, 7, 5);
        assert_eq!(relative_error(&f, &f).unwrap(), 0.0);
        assert!((relative_error(&DMatrix::zeros(5, 7), &f).unwrap() - 1.0).abs() < 1e-15);
        let g = &f * (1.0 + 1e-3);
        assert!((relative_error(&g, &f).unwrap() - 1e-3).abs() < 1e-14);
        let (a, b) = (random(5, 7, 6), random(5, 7, 7));
        let e1 = relative_error(&a, &b).unwrap();
        let e2 = relative_error(&(&a * 13.0), &(&b * 13.0)).unwrap();
        assert!((e1 - e2).abs() < 1e-14);
        assert!(relative_error(&f, &DMatrix::zeros(5, 7)).is_err());
        assert!(relative_error(&f, &DMatrix::zeros(5, 6)).is_err());
    }

    #[test]
    fn constant_trajectory_has_no_violation() {
        let grid = Grid1D::burgers(8).unwrap();
        let u = DMatrix::from_element(8, 5, 1.5);
        let d = energy_violation(&u, &times(5, 0.1), &grid).unwrap();
        assert!(d.violation.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lifted_energy_matches_reduced_energy() {
        let grid = Grid1D::burgers(30).unwrap();
        let pod = compute_pod(&random(30, 12, 8), 4).unwrap();
        let s = random(4, 4, 9);
        let a = &s - s.transpose();
        let x0 = DVector::from_vec(vec![2.0, 0.1, -0.3, 0.2]);
        let ts = times(401, 0.01);
        let run = integrate_rom(|x| Ok(&a * x), &x0, &ts, 1);
        let lifted = pod.lift(&run.states).unwrap();
        let full = energy_violation(&lifted, &ts, &grid).unwrap();
        let red = reduced_energy(&run.states, &ts, grid.dx);
        for (a, b) in full.energy.iter().zip(&red.energy) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
        assert!(full.max_relative_drift() <= 1e-8);
    }
}
