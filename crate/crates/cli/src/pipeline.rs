//! simulate → reduce → train → evaluate → export.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use opinf_core::costmodel::{default_kinds, ratio_table, write_ratio_csv};
use opinf_core::fom::{simulate, Trajectory};
use opinf_core::operators::EnsembleModel;
use opinf_core::polyopinf::{
    eval_poly_rhs, grid_search, interpolate, CandidateScore, IntegrationSpec, ParamLattice, PolyOperators,
    RegSearchSpec,
};
use opinf_core::reduction::{compute_pod, project, PodBasis, SnapshotMatrix, SnapshotPairs};
use opinf_core::romeval::{galerkin_rhs, reduced_energy, integrate_rom, EnergyDiagnostics, DIVERGENCE_FACTOR};
use opinf_core::training::{train_ensemble, TrainingHistory, TrainingSettings};
use serde::Serialize;
use serde_json::json;

use crate::catalog::ResolvedSetup;
use crate::config::ExperimentConfig;
use crate::family::{Family, HIDDEN_LAYERS};
use crate::pool::map_ordered;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Reduce,
    Train,
    Evaluate,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Simulate => "simulate",
            Stage::Reduce => "reduce",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed (config {hash}): {message}")]
pub struct StageError {
    pub stage: Stage,
    pub hash: String,
    pub message: String,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// Full-order data of one experiment.
#[derive(Debug, Clone)]
pub struct Snapshots {
    /// Full-horizon runs at the training parameters.
    pub train: Vec<Trajectory>,
    /// Full-horizon runs at the test parameters.
    pub test: Vec<Trajectory>,
}

/// How a trained family produces reduced velocities.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Galerkin,
    Poly(PolyFit),
    PolyLattice { lattice: ParamLattice, nodes: Vec<PolyFit> },
    Neural { ensemble: EnsembleModel, histories: Vec<TrainingHistory> },
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct PolyFit {
    pub operators: PolyOperators,
    /// Regularization search scores; empty when loaded from disk.
    pub candidates: Vec<CandidateScore>,
}

#[derive(Debug, Clone)]
pub struct TrainedEntry {
    pub family: Family,
    pub k: usize,
    pub model: TrainedModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Unstable,
    /// Parameter outside the interpolation lattice; not evaluated.
    Extrapolation,
    /// Training produced no model.
    Failed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::Unstable => "unstable",
            RunStatus::Extrapolation => "extrapolation",
            RunStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub family: Family,
    pub k: usize,
    pub mu: Vec<f64>,
    pub mu_index: usize,
    pub split: Split,
    /// Relative state error; `inf` when unstable, `NaN` when not evaluated.
    pub error: f64,
    pub stable: bool,
    /// Maximum relative reduced-energy drift over the horizon (Burgers only).
    pub energy_drift: Option<f64>,
    pub status: RunStatus,
}

impl ResultRow {
    pub const CSV_HEADER: &'static str = "experiment,family,K,mu,split,e,stable,energy_drift,status";

    pub fn csv_line(&self) -> String {
        let mu: Vec<String> = self.mu.iter().map(|v| v.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.family,
            self.k,
            mu.join(";"),
            self.split,
            self.error,
            self.stable,
            self.energy_drift.map(|d| d.to_string()).unwrap_or_default(),
            self.status
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub row: ResultRow,
    pub failure: Option<String>,
    /// Reduced rollout, one column per stored time (truncated on divergence).
    pub states: Option<DMatrix<f64>>,
    pub times: Vec<f64>,
    pub energy: Option<EnergyDiagnostics>,
}

#[derive(Debug)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub hash: String,
    pub pod: PodBasis,
    pub models: Vec<TrainedEntry>,
    pub records: Vec<RunRecord>,
}

impl Outcome {
    pub fn rows(&self) -> Vec<&ResultRow> {
        self.records.iter().map(|r| &r.row).collect()
    }

    pub fn find(&self, family: Family, k: usize, split: Split, mu_index: usize) -> Option<&RunRecord> {
        self.records
            .iter()
            .find(|r| r.row.family == family && r.row.k == k && r.row.split == split && r.row.mu_index == mu_index)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub jobs: usize,
    pub cost: bool,
    pub verbose: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            cost: false,
            verbose: false,
        }
    }
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub setup: ResolvedSetup,
    pub run_dir: PathBuf,
    pub hash: String,
    pub options: PipelineOptions,
}

/// One case a trained model is rolled out on.
struct EvalCase<'a> {
    split: Split,
    mu_index: usize,
    reference: &'a Trajectory,
}

enum TrainJob {
    Poly { entry: usize, node: usize },
    Member { entry: usize, member: usize },
}

enum TrainPiece {
    Poly(opinf_core::Result<PolyFit>),
    Member(opinf_core::Result<(opinf_core::operators::RomModel, u64, TrainingHistory)>),
}

fn model_dir_name(family: Family, k: usize) -> String {
    format!("{}_K{k}", family.name())
}

impl Pipeline {
    /// Artifacts go to `<out_root>/<experiment>-<hash8>/`.
    pub fn new(config: ExperimentConfig, out_root: &Path, options: PipelineOptions) -> Self {
        let hash = config.hash8();
        let run_dir = out_root.join(format!("{}-{hash}", config.experiment));
        let setup = ResolvedSetup::new(&config);
        Self {
            config,
            setup,
            run_dir,
            hash,
            options,
        }
    }

    fn fail(&self, stage: Stage, message: impl fmt::Display) -> StageError {
        StageError {
            stage,
            hash: self.hash.clone(),
            message: message.to_string(),
        }
    }

    fn log(&self, msg: impl fmt::Display) {
        if self.options.verbose {
            eprintln!("[{}] {msg}", self.hash);
        }
    }

    fn io<T, E: fmt::Display>(&self, stage: Stage, r: std::result::Result<T, E>) -> StageResult<T> {
        r.map_err(|e| self.fail(stage, e))
    }

    fn ensure_dir(&self, stage: Stage, rel: &str) -> StageResult<PathBuf> {
        let d = self.run_dir.join(rel);
        self.io(stage, fs::create_dir_all(&d))?;
        Ok(d)
    }

    fn settings(&self) -> TrainingSettings {
        self.config.settings()
    }

    fn n_params(&self) -> usize {
        self.setup.defaults.train_params.first().map_or(0, |p| p.len())
    }

    // ---- simulate ----------------------------------------------------------

    pub fn simulate(&self) -> StageResult<Snapshots> {
        let d = &self.setup.defaults;
        let run = |mu: &Vec<f64>| -> opinf_core::Result<Trajectory> {
            simulate(&self.setup.fom(mu)?, d.t_final, d.dt, d.snapshot_stride)
        };
        let all: Vec<Vec<f64>> = d.train_params.iter().chain(&self.setup.test_params).cloned().collect();
        let trajs = map_ordered(&all, self.options.jobs, run);
        let mut trajs = self.io(Stage::Simulate, trajs.into_iter().collect::<opinf_core::Result<Vec<_>>>())?;
        let test = trajs.split_off(d.train_params.len());
        let snaps = Snapshots { train: trajs, test };
        self.log(format_args!(
            "simulated {} training and {} test trajectories",
            snaps.train.len(),
            snaps.test.len()
        ));
        let dir = self.ensure_dir(Stage::Simulate, "trajectories")?;
        for (name, list) in [("train", &snaps.train), ("test", &snaps.test)] {
            for (i, t) in list.iter().enumerate() {
                let mut w = BufWriter::new(self.io(Stage::Simulate, File::create(dir.join(format!("{name}_{i}.bin"))))?);
                self.io(Stage::Simulate, t.write_to(&mut w))?;
                self.io(Stage::Simulate, w.flush())?;
            }
        }
        Ok(snaps)
    }

    pub fn load_snapshots(&self) -> StageResult<Option<Snapshots>> {
        let dir = self.run_dir.join("trajectories");
        let d = &self.setup.defaults;
        let read = |name: &str, n: usize| -> StageResult<Option<Vec<Trajectory>>> {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let p = dir.join(format!("{name}_{i}.bin"));
                if !p.exists() {
                    return Ok(None);
                }
                let mut r = BufReader::new(self.io(Stage::Simulate, File::open(&p))?);
                out.push(self.io(Stage::Simulate, Trajectory::read_from(&mut r))?);
            }
            Ok(Some(out))
        };
        let train = read("train", d.train_params.len())?;
        let test = read("test", self.setup.test_params.len())?;
        Ok(train.zip(test).map(|(train, test)| Snapshots { train, test }))
    }

    /// Training windows of the training trajectories.
    pub fn training_windows(&self, snaps: &Snapshots) -> Vec<Trajectory> {
        snaps
            .train
            .iter()
            .map(|t| t.truncate_to(self.setup.defaults.t_train))
            .collect()
    }

    // ---- reduce ------------------------------------------------------------

    pub fn reduce(&self, snaps: &Snapshots) -> StageResult<PodBasis> {
        let windows = self.training_windows(snaps);
        let refs: Vec<&Trajectory> = windows.iter().collect();
        let x = self.io(Stage::Reduce, SnapshotMatrix::states_of(&refs))?;
        let k_max = *self.config.k_values.iter().max().expect("validated non-empty");
        let pod = self.io(Stage::Reduce, compute_pod(&x.data, k_max))?;
        let mut w = BufWriter::new(self.io(Stage::Reduce, File::create(self.run_dir.join("pod.bin")))?);
        self.io(Stage::Reduce, pod.write_to(&mut w))?;
        self.io(Stage::Reduce, w.flush())?;
        self.log(format_args!("POD basis of dimension {k_max} from {} snapshots", x.ncols()));
        Ok(pod)
    }

    pub fn load_pod(&self) -> StageResult<Option<PodBasis>> {
        let p = self.run_dir.join("pod.bin");
        if !p.exists() {
            return Ok(None);
        }
        let mut r = BufReader::new(self.io(Stage::Reduce, File::open(&p))?);
        Ok(Some(self.io(Stage::Reduce, PodBasis::read_from(&mut r))?))
    }

    // ---- train -------------------------------------------------------------

    pub fn train(&self, snaps: &Snapshots, pod: &PodBasis) -> StageResult<Vec<TrainedEntry>> {
        let settings = self.settings();
        let reg = self.io(Stage::Train, self.config.regularization.spec())?;
        let windows = self.training_windows(snaps);
        let window_refs: Vec<&Trajectory> = windows.iter().collect();
        let substeps = self.setup.defaults.rom_substeps;

        let mut entries = Vec::new();
        for &family in &self.config.families {
            for &k in &self.config.k_values {
                entries.push((family, k));
            }
        }
        let bases = self
            .config
            .k_values
            .iter()
            .map(|&k| Ok((k, self.io(Stage::Train, pod.truncate(k))?)))
            .collect::<StageResult<Vec<_>>>()?;
        let basis = |k: usize| &bases.iter().find(|(kk, _)| *kk == k).expect("basis per K").1;
        let mut pairs = Vec::new();
        for &k in &self.config.k_values {
            let p = self.io(Stage::Train, SnapshotPairs::from_trajectories(basis(k), &window_refs))?;
            pairs.push((k, p));
        }
        let pairs_for = |k: usize| &pairs.iter().find(|(kk, _)| *kk == k).expect("pairs per K").1;

        let mut jobs = Vec::new();
        for (i, &(family, _)) in entries.iter().enumerate() {
            if family.poly_blocks().is_some() {
                for node in 0..windows.len() {
                    jobs.push(TrainJob::Poly { entry: i, node });
                }
            } else if family.is_neural() {
                for member in 0..settings.ensemble_size {
                    jobs.push(TrainJob::Member { entry: i, member });
                }
            }
        }

        let run_job = |job: &TrainJob| -> TrainPiece {
            match *job {
                TrainJob::Poly { entry, node } => {
                    let (family, k) = entries[entry];
                    let blocks = family.poly_blocks().expect("poly family");
                    let r = fit_poly(basis(k), &windows[node], substeps, &reg, blocks);
                    self.log(format_args!("{family} K={k} node {node} fitted"));
                    TrainPiece::Poly(r)
                }
                TrainJob::Member { entry, member } => {
                    let (family, k) = entries[entry];
                    let seed = settings.seed.wrapping_add(member as u64);
                    let member_settings = TrainingSettings {
                        seed,
                        ensemble_size: 1,
                        ..settings
                    };
                    let n_params = self.n_params();
                    let r = train_ensemble(|s| family.build_network(k, n_params, s), pairs_for(k), &member_settings)
                        .map(|(ens, mut hist)| (ens.members()[0].clone(), seed, hist.remove(0)))
                        .map_err(|e| match e {
                            opinf_core::Error::EnsembleMember { source, .. } => opinf_core::Error::EnsembleMember {
                                member,
                                source,
                            },
                            other => other,
                        });
                    self.log(format_args!(
                        "{family} K={k} member {member} trained{}",
                        if r.is_ok() { "" } else { " (failed)" }
                    ));
                    TrainPiece::Member(r)
                }
            }
        };
        let mut pieces = map_ordered(&jobs, self.options.jobs, run_job).into_iter();

        let mut out = Vec::with_capacity(entries.len());
        for &(family, k) in &entries {
            let model = if family == Family::Galerkin {
                TrainedModel::Galerkin
            } else if family.poly_blocks().is_some() {
                let fits: opinf_core::Result<Vec<PolyFit>> = (0..windows.len())
                    .map(|_| match pieces.next() {
                        Some(TrainPiece::Poly(r)) => r,
                        _ => unreachable!("job order"),
                    })
                    .collect();
                match (fits, &self.setup.defaults.lattice) {
                    (Err(e), _) => TrainedModel::Failed(e.to_string()),
                    (Ok(mut f), None) => TrainedModel::Poly(f.remove(0)),
                    (Ok(f), Some(lattice)) => TrainedModel::PolyLattice {
                        lattice: lattice.clone(),
                        nodes: f,
                    },
                }
            } else {
                let mut members = Vec::new();
                let mut seeds = Vec::new();
                let mut histories = Vec::new();
                let mut failure = None;
                for _ in 0..settings.ensemble_size {
                    match pieces.next() {
                        Some(TrainPiece::Member(Ok((m, s, h)))) => {
                            members.push(m);
                            seeds.push(s);
                            histories.push(h);
                        }
                        Some(TrainPiece::Member(Err(e))) => {
                            failure.get_or_insert(e.to_string());
                        }
                        _ => unreachable!("job order"),
                    }
                }
                match failure {
                    Some(f) => TrainedModel::Failed(f),
                    None => TrainedModel::Neural {
                        ensemble: self.io(Stage::Train, EnsembleModel::new(members, seeds))?,
                        histories,
                    },
                }
            };
            let entry = TrainedEntry { family, k, model };
            self.save_model(&entry)?;
            out.push(entry);
        }
        Ok(out)
    }

    fn save_model(&self, entry: &TrainedEntry) -> StageResult<()> {
        let dir = self.ensure_dir(Stage::Train, &format!("models/{}", model_dir_name(entry.family, entry.k)))?;
        let fit_json = |f: &PolyFit| {
            json!({
                "operators": f.operators.to_json(),
                "candidates": f.candidates,
            })
        };
        let doc = match &entry.model {
            TrainedModel::Galerkin => json!({"type": "galerkin"}),
            TrainedModel::Poly(f) => json!({"type": "poly", "fit": fit_json(f)}),
            TrainedModel::PolyLattice { lattice, nodes } => json!({
                "type": "poly-lattice",
                "lattice": lattice,
                "nodes": nodes.iter().map(fit_json).collect::<Vec<_>>(),
            }),
            TrainedModel::Neural { ensemble, histories } => {
                self.io(Stage::Train, ensemble.save(&dir))?;
                for (m, h) in histories.iter().enumerate() {
                    let mut w = BufWriter::new(self.io(Stage::Train, File::create(dir.join(format!("history_member{m}.csv"))))?);
                    self.io(Stage::Train, h.write_csv(&mut w))?;
                    self.io(Stage::Train, w.flush())?;
                }
                json!({"type": "neural", "members": ensemble.members().len()})
            }
            TrainedModel::Failed(reason) => json!({"type": "failed", "reason": reason}),
        };
        let doc = json!({"family": entry.family, "k": entry.k, "model": doc});
        self.io(Stage::Train, fs::write(dir.join("model.json"), serde_json::to_string_pretty(&doc).expect("json")))
    }

    pub fn load_models(&self) -> StageResult<Option<Vec<TrainedEntry>>> {
        let mut out = Vec::new();
        for &family in &self.config.families {
            for &k in &self.config.k_values {
                let dir = self.run_dir.join("models").join(model_dir_name(family, k));
                let p = dir.join("model.json");
                if !p.exists() {
                    return Ok(None);
                }
                let doc: serde_json::Value =
                    self.io(Stage::Train, serde_json::from_str(&self.io(Stage::Train, fs::read_to_string(&p))?))?;
                let m = &doc["model"];
                let fit = |v: &serde_json::Value| -> StageResult<PolyFit> {
                    Ok(PolyFit {
                        operators: self.io(Stage::Train, PolyOperators::from_json(&v["operators"]))?,
                        candidates: Vec::new(),
                    })
                };
                let model = match m["type"].as_str() {
                    Some("galerkin") => TrainedModel::Galerkin,
                    Some("poly") => TrainedModel::Poly(fit(&m["fit"])?),
                    Some("poly-lattice") => TrainedModel::PolyLattice {
                        lattice: self.io(Stage::Train, serde_json::from_value(m["lattice"].clone()))?,
                        nodes: m["nodes"]
                            .as_array()
                            .map(|a| a.iter().map(fit).collect::<StageResult<Vec<_>>>())
                            .transpose()?
                            .unwrap_or_default(),
                    },
                    Some("neural") => TrainedModel::Neural {
                        ensemble: self.io(Stage::Train, EnsembleModel::load(&dir))?,
                        histories: Vec::new(),
                    },
                    Some("failed") => TrainedModel::Failed(m["reason"].as_str().unwrap_or("unknown").to_string()),
                    other => return Err(self.fail(Stage::Train, format!("{}: unknown model type {other:?}", p.display()))),
                };
                out.push(TrainedEntry { family, k, model });
            }
        }
        Ok(Some(out))
    }

    // ---- evaluate ----------------------------------------------------------

    pub fn evaluate(&self, snaps: &Snapshots, pod: &PodBasis, models: &[TrainedEntry]) -> StageResult<Vec<RunRecord>> {
        let mut cases = Vec::new();
        for (i, t) in snaps.train.iter().enumerate() {
            cases.push(EvalCase {
                split: Split::Train,
                mu_index: i,
                reference: t,
            });
        }
        for (i, t) in snaps.test.iter().enumerate() {
            cases.push(EvalCase {
                split: Split::Test,
                mu_index: i,
                reference: t,
            });
        }
        let mut jobs = Vec::new();
        for m in models {
            for c in &cases {
                jobs.push((m, c));
            }
        }
        let records = map_ordered(&jobs, self.options.jobs, |(m, c)| self.evaluate_one(pod, m, c));
        let records = records.into_iter().collect::<StageResult<Vec<_>>>()?;
        self.write_run_summaries(&records)?;
        Ok(records)
    }

    fn evaluate_one(&self, pod: &PodBasis, entry: &TrainedEntry, case: &EvalCase) -> StageResult<RunRecord> {
        let pod_k = self.io(Stage::Evaluate, pod.truncate(entry.k))?;
        let reference = case.reference;
        let mu = reference.params.clone();
        let mut row = ResultRow {
            experiment: self.config.experiment.to_string(),
            family: entry.family,
            k: entry.k,
            mu: mu.clone(),
            mu_index: case.mu_index,
            split: case.split,
            error: f64::NAN,
            stable: false,
            energy_drift: None,
            status: RunStatus::Failed,
        };
        let not_run = |row: ResultRow, status, failure: String| RunRecord {
            row: ResultRow { status, ..row },
            failure: Some(failure),
            states: None,
            times: reference.times.clone(),
            energy: None,
        };
        let x0 = self.io(Stage::Evaluate, project(&pod_k, &reference.states.columns(0, 1).into_owned()))?;
        let x0 = DVector::from_column_slice(x0.as_slice());
        let times = &reference.times;
        let substeps = self.setup.defaults.rom_substeps;
        let mu_vec = DVector::from_column_slice(&mu);
        let mut run = match &entry.model {
            TrainedModel::Failed(reason) => return Ok(not_run(row, RunStatus::Failed, reason.clone())),
            TrainedModel::Galerkin => {
                let fom = self.io(Stage::Evaluate, self.setup.fom(&mu))?;
                integrate_rom(|x| galerkin_rhs(&pod_k, |u| fom.rhs(u), x), &x0, times, substeps)
            }
            TrainedModel::Poly(fit) => integrate_rom(|x| eval_poly_rhs(&fit.operators, x), &x0, times, substeps),
            TrainedModel::PolyLattice { lattice, nodes } => {
                let ops: Vec<PolyOperators> = nodes.iter().map(|n| n.operators.clone()).collect();
                match interpolate(lattice, &ops, &mu) {
                    Ok(op) => integrate_rom(|x| eval_poly_rhs(&op, x), &x0, times, substeps),
                    Err(e @ opinf_core::Error::Extrapolation(_)) => {
                        return Ok(not_run(row, RunStatus::Extrapolation, e.to_string()))
                    }
                    Err(e) => return Err(self.fail(Stage::Evaluate, e)),
                }
            }
            TrainedModel::Neural { ensemble, .. } => {
                integrate_rom(|x| ensemble.eval(x, &mu_vec), &x0, times, substeps)
            }
        };
        let e = self.io(Stage::Evaluate, run.score(&pod_k, &reference.states))?;
        row.error = e;
        row.stable = run.completed();
        row.status = if row.stable { RunStatus::Ok } else { RunStatus::Unstable };
        let energy = if self.config.experiment.is_burgers() {
            let dx = match self.io(Stage::Evaluate, self.setup.fom(&mu))? {
                opinf_core::fom::FullOrderModel::Burgers(g) => g.dx,
                _ => unreachable!("burgers experiment"),
            };
            let en = reduced_energy(&run.states, times, dx);
            row.energy_drift = Some(en.max_relative_drift());
            Some(en)
        } else {
            None
        };
        Ok(RunRecord {
            row,
            failure: run.failure.take(),
            states: Some(run.states),
            times: times.clone(),
            energy,
        })
    }

    fn write_run_summaries(&self, records: &[RunRecord]) -> StageResult<()> {
        let dir = self.ensure_dir(Stage::Evaluate, "runs")?;
        for r in records {
            let stem = format!(
                "{}_{}{}",
                model_dir_name(r.row.family, r.row.k),
                r.row.split,
                r.row.mu_index
            );
            let summary = json!({
                "row": r.row,
                "error": r.row.error.to_string(),
                "failure": r.failure,
                "stored_steps": r.states.as_ref().map(|s| s.ncols()),
            });
            self.io(
                Stage::Evaluate,
                fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&summary).expect("json")),
            )?;
            if let Some(states) = &r.states {
                let mut w = BufWriter::new(self.io(Stage::Evaluate, File::create(dir.join(format!("{stem}_reduced.csv"))))?);
                let mut header = vec!["t".to_string()];
                header.extend((0..states.nrows()).map(|i| format!("x{i}")));
                if r.energy.is_some() {
                    header.push("energy".into());
                }
                self.io(Stage::Evaluate, writeln!(w, "{}", header.join(",")))?;
                for (j, col) in states.column_iter().enumerate() {
                    let mut line = vec![r.times[j].to_string()];
                    line.extend(col.iter().map(|v| format!("{v:e}")));
                    if let Some(en) = &r.energy {
                        line.push(format!("{:e}", en.energy[j]));
                    }
                    self.io(Stage::Evaluate, writeln!(w, "{}", line.join(",")))?;
                }
                self.io(Stage::Evaluate, w.flush())?;
            }
        }
        Ok(())
    }

    // ---- export ------------------------------------------------------------

    pub fn export(&self, records: &[RunRecord]) -> StageResult<()> {
        let mut text = String::from(ResultRow::CSV_HEADER);
        text.push('\n');
        for r in records {
            text.push_str(&r.row.csv_line());
            text.push('\n');
        }
        self.io(Stage::Export, fs::write(self.run_dir.join("results.csv"), text))?;
        if self.options.cost {
            let rows = self.io(Stage::Export, ratio_table(&default_kinds(), &self.config.k_values))?;
            let mut w = BufWriter::new(self.io(Stage::Export, File::create(self.run_dir.join("cost_ratios.csv")))?);
            self.io(Stage::Export, write_ratio_csv(&rows, &mut w))?;
            self.io(Stage::Export, w.flush())?;
        }
        Ok(())
    }

    pub fn write_metadata(&self) -> StageResult<()> {
        self.io(Stage::Export, fs::create_dir_all(&self.run_dir))?;
        let config: serde_json::Value = serde_json::from_str(&self.config.canonical_json()).expect("json");
        let meta = json!({
            "config": config,
            "config_hash": self.hash,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed,
            "member_seeds": (0..self.settings().ensemble_size as u64).map(|m| self.config.seed.wrapping_add(m)).collect::<Vec<_>>(),
            "training": self.settings(),
            "setup": self.setup,
            "defaults_in_force": {
                "rom_integrator": "rk4",
                "rom_substeps": self.setup.defaults.rom_substeps,
                "divergence_factor": DIVERGENCE_FACTOR,
                "hidden_layers": HIDDEN_LAYERS,
                "hidden_width": "K",
                "activation": "relu",
                "weight_init": "uniform(+-sqrt(6/fan_in)), bias uniform(+-1/sqrt(fan_in))",
                "normalization": "max-abs per group on training samples",
                "split": "80/20 seeded per ensemble member",
                "regularization": self.config.regularization,
                "regularization_score": "reduced-space rollout error over the training window",
                "heat_boundary": "strong dirichlet",
                "heat_nonlinear_solve": "picard with conjugate gradients",
            },
        });
        self.io(
            Stage::Export,
            fs::write(self.run_dir.join("metadata.json"), serde_json::to_string_pretty(&meta).expect("json")),
        )
    }

    /// Every stage from scratch.
    pub fn run(&self) -> StageResult<Outcome> {
        self.write_metadata()?;
        let snaps = self.simulate()?;
        let pod = self.reduce(&snaps)?;
        let models = self.train(&snaps, &pod)?;
        let records = self.evaluate(&snaps, &pod, &models)?;
        self.export(&records)?;
        Ok(Outcome {
            run_dir: self.run_dir.clone(),
            hash: self.hash.clone(),
            pod,
            models,
            records,
        })
    }

    /// Loads stored snapshots, or simulates them.
    pub fn snapshots(&self) -> StageResult<Snapshots> {
        match self.load_snapshots()? {
            Some(s) => Ok(s),
            None => self.simulate(),
        }
    }

    pub fn pod(&self, snaps: &Snapshots) -> StageResult<PodBasis> {
        match self.load_pod()? {
            Some(p) if p.reduced_dim() >= *self.config.k_values.iter().max().expect("validated") => Ok(p),
            _ => self.reduce(snaps),
        }
    }
}

/// Regularization search on one training window, scored over that window.
fn fit_poly(
    pod: &PodBasis,
    window: &Trajectory,
    substeps: usize,
    reg: &RegSearchSpec,
    blocks: opinf_core::polyopinf::PolyBlocks,
) -> opinf_core::Result<PolyFit> {
    let states = project(pod, &window.states)?;
    let velocities = project(pod, &window.rhs)?;
    let x0 = states.column(0).into_owned();
    let integration = IntegrationSpec {
        times: window.times.clone(),
        substeps,
    };
    let out = grid_search(&states, &velocities, &x0, &states, &integration, reg, blocks)?;
    Ok(PolyFit {
        operators: out.operators,
        candidates: out.candidates,
    })
}
