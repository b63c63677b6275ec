//! Library-level pipeline runs on coarse discretizations.

use opinf_cli::catalog::ExperimentId;
use opinf_cli::config::ExperimentConfig;
use opinf_cli::pipeline::{Pipeline, PipelineOptions, RunStatus, Split, TrainedModel};
use opinf_cli::Family;

fn quick(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.training.epochs = Some(15);
    cfg.training.lbfgs_every = Some(10);
    cfg.training.lbfgs_steps = Some(3);
    cfg.regularization.count = 5;
    cfg
}

#[test]
fn parametric_heat_flags_extrapolation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(ExperimentConfig::new(
        ExperimentId::HeatParametric,
        vec![4],
        vec![Family::Galerkin, Family::PolyCA, Family::NnSpsdForced],
    ));
    cfg.fom.nx = Some(12);
    cfg.fom.ny = Some(12);
    cfg.test_draws = Some(6);
    cfg.validate().unwrap();
    let p = Pipeline::new(cfg, dir.path(), PipelineOptions::default());
    let outcome = p.run().unwrap();
    let rows = outcome.rows();
    assert_eq!(rows.len(), 3 * (4 + 6));
    // ordering: family, K, then train nodes before test draws
    assert_eq!(rows[0].family, Family::Galerkin);
    assert_eq!((rows[4].split, rows[4].mu_index), (Split::Test, 0));
    assert_eq!(rows[10].family, Family::PolyCA);

    let lattice = p.setup.defaults.lattice.clone().unwrap();
    for r in rows.iter().filter(|r| r.family == Family::PolyCA) {
        if lattice.contains(&r.mu) {
            assert!(r.status == RunStatus::Ok || r.status == RunStatus::Unstable);
            assert!(!r.error.is_nan());
        } else {
            assert_eq!(r.status, RunStatus::Extrapolation);
            assert!(!r.stable && r.error.is_nan());
        }
    }
    for r in rows.iter().filter(|r| r.family != Family::PolyCA) {
        assert_ne!(r.status, RunStatus::Extrapolation);
        assert!(r.energy_drift.is_none());
    }
    // every parameter in the draws reached the networks
    let nn = &outcome.models[2];
    assert!(matches!(&nn.model, TrainedModel::Neural { ensemble, .. } if ensemble.members()[0].n_params() == 2));
    assert!(matches!(&outcome.models[1].model, TrainedModel::PolyLattice { nodes, .. } if nodes.len() == 4));
}

#[test]
fn galerkin_burgers_improves_with_k_and_conserves_energy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(ExperimentId::BurgersReproductive, vec![2, 6, 10], vec![Family::Galerkin]);
    cfg.fom.cells = Some(100);
    let outcome = Pipeline::new(cfg, dir.path(), PipelineOptions::default()).run().unwrap();
    let e: Vec<f64> = outcome.rows().iter().map(|r| r.error).collect();
    assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    for r in &outcome.records {
        assert!(r.row.stable);
        // RK4 dissipation only
        assert!(r.row.energy_drift.unwrap() < 1e-5);
        let en = r.energy.as_ref().unwrap();
        assert_eq!(en.times.len(), 401);
    }
}

#[test]
fn worker_pool_does_not_change_results() {
    let cfg = quick({
        let mut c = ExperimentConfig::new(
            ExperimentId::BurgersFuture,
            vec![2, 3],
            vec![Family::PolyA, Family::NnStandard],
        );
        c.fom.cells = Some(48);
        c
    });
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let serial = Pipeline::new(cfg.clone(), a.path(), PipelineOptions::default()).run().unwrap();
    let pooled = Pipeline::new(
        cfg,
        b.path(),
        PipelineOptions {
            jobs: 3,
            ..Default::default()
        },
    )
    .run()
    .unwrap();
    let lines = |o: &opinf_cli::Outcome| o.rows().iter().map(|r| r.csv_line()).collect::<Vec<_>>();
    assert_eq!(lines(&serial), lines(&pooled));
}
