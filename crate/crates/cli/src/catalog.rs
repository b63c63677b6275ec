//! The five experiment setups and their defaults.

use std::fmt;
use std::str::FromStr;

use opinf_core::fom::{FullOrderModel, Grid1D, Grid2D, HeatParams};
use opinf_core::polyopinf::ParamLattice;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    BurgersReproductive,
    BurgersFuture,
    HeatReproductive,
    HeatFuture,
    HeatParametric,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::BurgersReproductive,
        ExperimentId::BurgersFuture,
        ExperimentId::HeatReproductive,
        ExperimentId::HeatFuture,
        ExperimentId::HeatParametric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::BurgersReproductive => "burgers-reproductive",
            ExperimentId::BurgersFuture => "burgers-future",
            ExperimentId::HeatReproductive => "heat-reproductive",
            ExperimentId::HeatFuture => "heat-future",
            ExperimentId::HeatParametric => "heat-parametric",
        }
    }

    pub fn is_burgers(self) -> bool {
        matches!(self, ExperimentId::BurgersReproductive | ExperimentId::BurgersFuture)
    }

    pub fn is_parametric(self) -> bool {
        self == ExperimentId::HeatParametric
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown experiment `{s}`")))
    }
}

/// Defaults of one experiment as reported by `list`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentDefaults {
    pub id: ExperimentId,
    pub fom: &'static str,
    /// Burgers: `[cells]`; heat: `[nx, ny]` intervals.
    pub grid: Vec<usize>,
    pub dt: f64,
    pub snapshot_stride: usize,
    /// End of the training window.
    pub t_train: f64,
    /// End of the prediction window.
    pub t_final: f64,
    /// Stored snapshots per training trajectory.
    pub train_snapshots: usize,
    /// RK4 substeps of the reduced model between stored times, so the
    /// reduced step equals the full-order step.
    pub rom_substeps: usize,
    /// Parameter vectors of the training trajectories (empty vectors for
    /// Burgers).
    pub train_params: Vec<Vec<f64>>,
    pub lattice: Option<ParamLattice>,
    pub test_draws: usize,
    /// Per-parameter sampling ranges for test draws.
    pub test_ranges: Vec<(f64, f64)>,
}

pub const BURGERS_CELLS: usize = 500;
pub const BURGERS_DT: f64 = 0.01;
pub const HEAT_INTERVALS: usize = 50;
pub const HEAT_DT: f64 = 1e-3;
pub const HEAT_STRIDE: usize = 10;

pub fn defaults(id: ExperimentId) -> ExperimentDefaults {
    let heat = |t_train: f64, train_params: Vec<Vec<f64>>, lattice: Option<ParamLattice>, draws: usize| {
        ExperimentDefaults {
            id,
            fom: "heat",
            grid: vec![HEAT_INTERVALS, HEAT_INTERVALS],
            dt: HEAT_DT,
            snapshot_stride: HEAT_STRIDE,
            t_train,
            t_final: 2.0,
            train_snapshots: snapshot_count(t_train, HEAT_DT, HEAT_STRIDE),
            rom_substeps: HEAT_STRIDE,
            train_params,
            lattice,
            test_draws: draws,
            test_ranges: if draws > 0 { vec![(0.2, 0.5), (0.3, 0.5)] } else { Vec::new() },
        }
    };
    let burgers = |t_train: f64| ExperimentDefaults {
        id,
        fom: "burgers",
        grid: vec![BURGERS_CELLS],
        dt: BURGERS_DT,
        snapshot_stride: 1,
        t_train,
        t_final: 4.0,
        train_snapshots: snapshot_count(t_train, BURGERS_DT, 1),
        rom_substeps: 1,
        train_params: vec![Vec::new()],
        lattice: None,
        test_draws: 0,
        test_ranges: Vec::new(),
    };
    match id {
        ExperimentId::BurgersReproductive => burgers(4.0),
        ExperimentId::BurgersFuture => burgers(1.0),
        ExperimentId::HeatReproductive => heat(2.0, vec![vec![0.2, 0.3]], None, 0),
        ExperimentId::HeatFuture => heat(1.0, vec![vec![0.2, 0.3]], None, 0),
        ExperimentId::HeatParametric => {
            let lattice = ParamLattice::new(vec![vec![0.2, 0.4], vec![0.3, 0.4]]).expect("valid lattice");
            let nodes = (0..lattice.n_nodes()).map(|i| lattice.node(i)).collect();
            heat(2.0, nodes, Some(lattice), 4)
        }
    }
}

pub fn list_experiments() -> Vec<ExperimentDefaults> {
    ExperimentId::ALL.into_iter().map(defaults).collect()
}

fn snapshot_count(t: f64, dt: f64, stride: usize) -> usize {
    (t / dt).round() as usize / stride + 1
}

/// Defaults with the config's discretization overrides applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedSetup {
    pub defaults: ExperimentDefaults,
    pub test_params: Vec<Vec<f64>>,
}

impl ResolvedSetup {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut d = defaults(cfg.experiment);
        let o = &cfg.fom;
        if let Some(c) = o.cells {
            d.grid = vec![c];
        }
        if let Some(nx) = o.nx {
            d.grid[0] = nx;
        }
        if let Some(ny) = o.ny {
            d.grid[1] = ny;
        }
        if let Some(dt) = o.dt {
            d.dt = dt;
        }
        if let Some(s) = o.snapshot_stride {
            d.snapshot_stride = s;
            d.rom_substeps = s;
        }
        if let Some(n) = cfg.test_draws {
            d.test_draws = n;
        }
        d.train_snapshots = snapshot_count(d.t_train, d.dt, d.snapshot_stride);
        let test_params = draw_test_params(&d.test_ranges, d.test_draws, cfg.seed);
        Self { defaults: d, test_params }
    }

    pub fn fom(&self, mu: &[f64]) -> opinf_core::Result<FullOrderModel> {
        let d = &self.defaults;
        if d.fom == "burgers" {
            Ok(FullOrderModel::Burgers(Grid1D::burgers(d.grid[0])?))
        } else {
            Ok(FullOrderModel::Heat {
                grid: Grid2D::new(d.grid[0], d.grid[1])?,
                params: HeatParams::new(mu[0], mu[1])?,
            })
        }
    }

    /// Stored time grid of a prediction run.
    pub fn eval_times(&self) -> Vec<f64> {
        let d = &self.defaults;
        let n = snapshot_count(d.t_final, d.dt, d.snapshot_stride);
        (0..n).map(|i| (i * d.snapshot_stride) as f64 * d.dt).collect()
    }
}

/// Uniform draws from the ranges, one ChaCha stream per config seed.
pub fn draw_test_params(ranges: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    if ranges.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7e57);
    (0..n)
        .map(|_| ranges.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_experiments() {
        let c = list_experiments();
        assert_eq!(c.len(), 5);
        for (d, id) in c.iter().zip(ExperimentId::ALL) {
            assert_eq!(d.id, id);
            assert_eq!(id.name().parse::<ExperimentId>().unwrap(), id);
        }
    }

    #[test]
    fn burgers_and_heat_defaults() {
        let b = defaults(ExperimentId::BurgersReproductive);
        assert_eq!((b.grid.as_slice(), b.dt, b.train_snapshots), (&[500][..], 0.01, 401));
        assert_eq!(defaults(ExperimentId::BurgersFuture).train_snapshots, 101);
        let h = defaults(ExperimentId::HeatFuture);
        assert_eq!(h.grid, vec![50, 50]);
        assert_eq!((h.t_train, h.t_final, h.train_snapshots), (1.0, 2.0, 101));
    }

    #[test]
    fn parametric_lattice_is_two_by_two() {
        let p = defaults(ExperimentId::HeatParametric);
        assert_eq!(
            p.train_params,
            vec![vec![0.2, 0.3], vec![0.2, 0.4], vec![0.4, 0.3], vec![0.4, 0.4]]
        );
        assert_eq!(p.test_draws, 4);
    }

    #[test]
    fn test_draws_are_seeded_and_in_range() {
        let r = [(0.2, 0.5), (0.3, 0.5)];
        let a = draw_test_params(&r, 4, 3);
        assert_eq!(a, draw_test_params(&r, 4, 3));
        assert_ne!(a, draw_test_params(&r, 4, 4));
        for mu in &a {
            assert!((0.2..0.5).contains(&mu[0]) && (0.3..0.5).contains(&mu[1]));
        }
    }

    #[test]
    fn eval_times_cover_the_horizon() {
        let cfg = ExperimentConfig::new(ExperimentId::HeatReproductive, vec![2], vec![]);
        let t = ResolvedSetup::new(&cfg).eval_times();
        assert_eq!(t.len(), 201);
        assert!((t[200] - 2.0).abs() < 1e-12);
    }
}
