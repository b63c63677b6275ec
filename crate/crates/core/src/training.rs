//! Loss, optimizers and the interleaved L-BFGS / ADAM schedule.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::check_len;
use crate::operators::{EnsembleModel, RomModel};
use crate::reduction::{split, ReducedDataset, SnapshotPairs, SplitIndices};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub weight_decay: f64,
    /// L-BFGS runs at every epoch divisible by this.
    pub lbfgs_every: usize,
    pub lbfgs_steps: usize,
    pub lbfgs_history: usize,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            batch_size: 50,
            learning_rate: 5e-3,
            decay: 0.9998,
            weight_decay: 1e-6,
            lbfgs_every: 5_000,
            lbfgs_steps: 50,
            lbfgs_history: 10,
            ensemble_size: 2,
            seed: 0,
        }
    }
}

impl TrainingSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("training settings: {m}")));
        if self.batch_size == 0 || self.lbfgs_every == 0 || self.lbfgs_history == 0 || self.ensemble_size == 0 {
            return bad("counts must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("learning rate and decay must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0");
        }
        Ok(())
    }

    /// Learning rate used during epoch `n`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Mean minibatch objective for ADAM rows, full-batch objective after an
    /// L-BFGS run.
    pub train_loss: f64,
    /// Data term on the validation samples.
    pub val_loss: f64,
    pub lr: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,lr,phase")?;
        for r in &self.rows {
            writeln!(w, "{},{:e},{:e},{:e},{}", r.epoch, r.train_loss, r.val_loss, r.lr, r.phase)?;
        }
        Ok(())
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_loss).reduce(f64::min)
    }
}

/// Relative squared residual over the columns `cols`, plus `weight_decay`
/// times the squared weight norm, and its weight gradient.
pub fn loss(model: &RomModel, data: &ReducedDataset, cols: &[usize], weight_decay: f64) -> Result<(f64, Vec<f64>)> {
    let (data_term, mut grad) = data_loss(model, data, cols, true)?;
    let w = model.weights();
    let mut penalty = 0.0;
    for (g, wi) in grad.iter_mut().zip(&w) {
        penalty += wi * wi;
        *g += 2.0 * weight_decay * wi;
    }
    Ok((data_term + weight_decay * penalty, grad))
}

fn gather(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

fn data_loss(model: &RomModel, data: &ReducedDataset, cols: &[usize], with_grad: bool) -> Result<(f64, Vec<f64>)> {
    if cols.is_empty() {
        return Err(Error::InvalidArgument("loss needs a non-empty batch".into()));
    }
    check_len("model state dimension", model.k(), data.reduced_dim())?;
    let x = gather(&data.states, cols);
    let mu = gather(&data.params, cols);
    let t = gather(&data.velocities, cols);
    let (out, cache) = model.forward(&x, &mu)?;
    let r = out - &t;
    let mut den = t.norm_squared();
    if den == 0.0 {
        den = 1.0;
    }
    let value = r.norm_squared() / den;
    let grad = if with_grad {
        model.backward(&cache, &(r * (2.0 / den)))?
    } else {
        Vec::new()
    };
    Ok((value, grad))
}

/// Data term of the loss without gradient.
pub fn evaluate_loss(model: &RomModel, data: &ReducedDataset, cols: &[usize]) -> Result<f64> {
    Ok(data_loss(model, data, cols, false)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected ADAM update. A non-finite gradient leaves both the
    /// state and the parameters untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_len("adam parameters", self.m.len(), params.len())?;
        check_len("adam gradient", self.m.len(), grad.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "adam step rejected: gradient entry {i} is {}",
                grad[i]
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsState {
    pub s: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub m: usize,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl LbfgsState {
    pub fn new(m: usize) -> Self {
        Self {
            s: Vec::new(),
            y: Vec::new(),
            m,
            iterations: 0,
        }
    }

    /// Stores the pair unless its curvature is too small; returns whether it
    /// was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if sy <= 1e-10 * norm(&s) * norm(&y) {
            return false;
        }
        if self.s.len() == self.m {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        true
    }

    /// Two-loop recursion: returns `-H g`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let n = self.s.len();
        let mut alpha = vec![0.0; n];
        let rho: Vec<f64> = (0..n).map(|i| 1.0 / dot(&self.s[i], &self.y[i])).collect();
        for i in (0..n).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = if n > 0 {
            dot(&self.s[n - 1], &self.y[n - 1]) / dot(&self.y[n - 1], &self.y[n - 1])
        } else {
            1.0
        };
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..n {
            let beta = rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub steps: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Set when the line search failed and the run stopped early.
    pub stopped_early: bool,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const GRAD_TOL: f64 = 1e-12;

struct LinePoint {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dg: f64,
}

/// Minimizer of the cubic interpolating two line points, safeguarded to
/// the interior of the bracket.
fn cubic_min(a: &LinePoint, b: &LinePoint) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let d1 = a.dg + b.dg - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dg * b.dg;
    let mid = 0.5 * (lo + hi);
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.dg + d2 - d1) / (b.dg - a.dg + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t >= lo + margin && t <= hi - margin {
        t
    } else {
        mid
    }
}

/// Strong-Wolfe line search (bracketing then zoom). Returns `None` if no
/// acceptable point was found.
fn wolfe_search<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    dg0: f64,
    dir: &[f64],
    alpha0: f64,
) -> Result<Option<(Vec<f64>, LinePoint)>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut eval = |alpha: f64| -> Result<(Vec<f64>, LinePoint)> {
        let xn: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + alpha * di).collect();
        let (fv, g) = f(&xn)?;
        let dg = dot(&g, dir);
        Ok((xn, LinePoint { alpha, f: fv, g, dg }))
    };
    let origin = LinePoint {
        alpha: 0.0,
        f: f0,
        g: Vec::new(),
        dg: dg0,
    };
    let mut prev = origin;
    let mut alpha = alpha0;
    for i in 0..25 {
        let (xn, cur) = eval(alpha)?;
        if !cur.f.is_finite() || cur.f > f0 + WOLFE_C1 * alpha * dg0 || (i > 0 && cur.f >= prev.f) {
            return zoom(&mut eval, f0, dg0, prev, cur);
        }
        if cur.dg.abs() <= -WOLFE_C2 * dg0 {
            return Ok(Some((xn, cur)));
        }
        if cur.dg >= 0.0 {
            return zoom(&mut eval, f0, dg0, cur, prev);
        }
        prev = cur;
        alpha *= 2.0;
    }
    Ok(None)
}

fn zoom<E>(eval: &mut E, f0: f64, dg0: f64, mut lo: LinePoint, mut hi: LinePoint) -> Result<Option<(Vec<f64>, LinePoint)>>
where
    E: FnMut(f64) -> Result<(Vec<f64>, LinePoint)>,
{
    for _ in 0..30 {
        let alpha = if hi.f.is_finite() && !hi.g.is_empty() && (lo.alpha == 0.0 || !lo.g.is_empty()) {
            cubic_min(&lo, &hi)
        } else {
            0.5 * (lo.alpha + hi.alpha)
        };
        if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
        let (xn, cur) = eval(alpha)?;
        if !cur.f.is_finite() || cur.f > f0 + WOLFE_C1 * alpha * dg0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.dg.abs() <= -WOLFE_C2 * dg0 {
                return Ok(Some((xn, cur)));
            }
            if cur.dg * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Accept a point with sufficient decrease even if curvature failed.
    if lo.alpha > 0.0 && lo.f < f0 {
        let (xn, p) = eval(lo.alpha)?;
        return Ok(Some((xn, p)));
    }
    Ok(None)
}

/// Runs up to `n_steps` L-BFGS iterations on `f`, which returns the value
/// and gradient. `params` ends at the best point visited.
pub fn lbfgs_run<F>(params: &mut Vec<f64>, mut f: F, n_steps: usize, m: usize) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut state = LbfgsState::new(m.max(1));
    let (mut fx, mut g) = f(params)?;
    if !fx.is_finite() {
        return Err(Error::InvalidArgument("l-bfgs started from a non-finite loss".into()));
    }
    let mut report = LbfgsReport {
        steps: 0,
        loss: fx,
        grad_norm: norm(&g),
        stopped_early: false,
    };
    for it in 0..n_steps {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax <= GRAD_TOL {
            break;
        }
        let mut dir = state.direction(&g);
        let mut dg = dot(&g, &dir);
        if !(dg < 0.0) {
            state = LbfgsState::new(state.m);
            dir = g.iter().map(|v| -v).collect();
            dg = -dot(&g, &g);
        }
        let alpha0 = if it == 0 && state.s.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        match wolfe_search(&mut f, params, fx, dg, &dir, alpha0)? {
            Some((xn, p)) if p.f <= fx => {
                let s: Vec<f64> = xn.iter().zip(params.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
                state.push(s, y);
                *params = xn;
                fx = p.f;
                g = p.g;
                state.iterations += 1;
                report.steps += 1;
            }
            _ => {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.loss = fx;
    report.grad_norm = norm(&g);
    Ok(report)
}

fn lbfgs_phase(model: &mut RomModel, data: &ReducedDataset, cols: &[usize], settings: &TrainingSettings) -> Result<f64> {
    let mut w = model.weights();
    let mut work = model.clone();
    let report = lbfgs_run(
        &mut w,
        |p| {
            work.set_weights(p)?;
            loss(&work, data, cols, settings.weight_decay)
        },
        settings.lbfgs_steps,
        settings.lbfgs_history,
    )?;
    model.set_weights(&w)?;
    Ok(report.loss)
}

/// Interleaved schedule: at every epoch divisible by `lbfgs_every` run
/// `lbfgs_steps` full-batch L-BFGS iterations, then one ADAM pass over
/// shuffled minibatches. Returns the parameters with the lowest validation
/// loss seen (the training loss stands in if there are no validation
/// samples).
pub fn train(
    mut model: RomModel,
    data: &ReducedDataset,
    split: &SplitIndices,
    settings: &TrainingSettings,
) -> Result<(RomModel, TrainingHistory)> {
    settings.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    model.scales = data.scales;
    let mut history = TrainingHistory::default();
    let val_cols: &[usize] = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };
    let mut best_w = model.weights();
    let mut best_val = if settings.epochs == 0 {
        return Ok((model, history));
    } else {
        evaluate_loss(&model, data, val_cols)?
    };
    let abort = |epoch: usize, reason: String, history: &TrainingHistory| Error::TrainingAborted {
        epoch,
        reason,
        history: Box::new(history.clone()),
    };

    let mut adam = AdamState::new(model.n_weights());
    let mut order = split.train.clone();
    for epoch in 0..settings.epochs {
        let lr = settings.learning_rate_at(epoch);
        if settings.lbfgs_steps > 0 && epoch % settings.lbfgs_every == 0 {
            let train_loss = lbfgs_phase(&mut model, data, &split.train, settings)
                .map_err(|e| abort(epoch, format!("l-bfgs: {e}"), &history))?;
            let val_loss = evaluate_loss(&model, data, val_cols)?;
            history.rows.push(HistoryRow {
                epoch,
                train_loss,
                val_loss,
                lr,
                phase: Phase::Lbfgs,
            });
            if !train_loss.is_finite() || !val_loss.is_finite() {
                return Err(abort(epoch, "non-finite loss after l-bfgs".into(), &history));
            }
            if val_loss < best_val {
                best_val = val_loss;
                best_w = model.weights();
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut w = model.weights();
        let mut sum = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(settings.batch_size) {
            let (l, g) = loss(&model, data, batch, settings.weight_decay)?;
            if !l.is_finite() {
                return Err(abort(epoch, format!("non-finite minibatch loss {l}"), &history));
            }
            adam.step(&mut w, &g, lr).map_err(|e| abort(epoch, e.to_string(), &history))?;
            model.set_weights(&w)?;
            sum += l;
            n_batches += 1;
        }
        let val_loss = evaluate_loss(&model, data, val_cols)?;
        history.rows.push(HistoryRow {
            epoch,
            train_loss: sum / n_batches as f64,
            val_loss,
            lr,
            phase: Phase::Adam,
        });
        if !val_loss.is_finite() {
            return Err(abort(epoch, "non-finite validation loss".into(), &history));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_w = w;
        }
    }
    model.set_weights(&best_w)?;
    Ok((model, history))
}

/// Trains `settings.ensemble_size` members. Member `m` uses seed
/// `settings.seed + m` for its architecture initialization (through
/// `build`), its train/validation split, and its minibatch order, and fits
/// its own scaling on its training samples.
pub fn train_ensemble<B>(
    build: B,
    pairs: &SnapshotPairs,
    settings: &TrainingSettings,
) -> Result<(EnsembleModel, Vec<TrainingHistory>)>
where
    B: Fn(u64) -> Result<RomModel>,
{
    settings.validate()?;
    let mut members = Vec::with_capacity(settings.ensemble_size);
    let mut seeds = Vec::with_capacity(settings.ensemble_size);
    let mut histories = Vec::with_capacity(settings.ensemble_size);
    for m in 0..settings.ensemble_size {
        let seed = settings.seed + m as u64;
        let run = || -> Result<(RomModel, TrainingHistory)> {
            let sp = split(pairs.len(), seed)?;
            let data = ReducedDataset::normalize(pairs, &sp.train)?;
            let member_settings = TrainingSettings { seed, ..*settings };
            train(build(seed)?, &data, &sp, &member_settings)
        };
        let (model, history) = run().map_err(|e| Error::EnsembleMember {
            member: m,
            source: Box::new(e),
        })?;
        members.push(model);
        seeds.push(seed);
        histories.push(history);
    }
    Ok((EnsembleModel::new(members, seeds)?, histories))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_schedule() {
        let s = TrainingSettings::default();
        assert_eq!(s.epochs, 10_000);
        assert_eq!(s.batch_size, 50);
        assert_eq!(s.lbfgs_every, 5_000);
        assert_eq!(s.ensemble_size, 2);
        assert!(s.validate().is_ok());
        assert_eq!(s.learning_rate_at(0), 5e-3);
        assert_eq!(s.learning_rate_at(100), 5e-3 * 0.9998f64.powi(100));
        let bad = TrainingSettings {
            decay: 1.5,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut a = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        a.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = AdamState::new(3);
        let mut p = vec![0.0; 3];
        a.step(&mut p, &[2.0, -0.5, 1e-3], 0.01).unwrap();
        // m_hat = g, v_hat = g^2
        for (pi, g) in p.iter().zip([2.0f64, -0.5, 1e-3]) {
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut a = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        assert!(a.step(&mut p, &[f64::NAN, 0.0], 0.1).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(a.t, 0);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut a = AdamState::new(1);
        let mut p = vec![0.0];
        let mut prev = 0.0;
        for _ in 0..100 {
            a.step(&mut p, &[1.0], 0.01).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn lbfgs_pair_filter() {
        let mut s = LbfgsState::new(2);
        assert!(!s.push(vec![1.0, 0.0], vec![-1.0, 0.0]));
        assert!(s.push(vec![1.0, 0.0], vec![1.0, 0.0]));
        assert!(s.push(vec![0.0, 1.0], vec![0.0, 2.0]));
        assert!(s.push(vec![1.0, 1.0], vec![1.0, 1.0]));
        assert_eq!(s.s.len(), 2);
        assert_eq!(s.s[0], vec![0.0, 1.0]);
    }

    #[test]
    fn lbfgs_on_rosenbrock() {
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (x, y) = (p[0], p[1]);
            let v = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let g = vec![-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)];
            Ok((v, g))
        };
        let mut p = vec![-1.2, 1.0];
        let r = lbfgs_run(&mut p, f, 200, 10).unwrap();
        assert!(r.loss < 1e-12, "{r:?}");
        assert!((p[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn lbfgs_at_minimum_takes_no_steps() {
        let mut p = vec![0.0, 0.0];
        let r = lbfgs_run(&mut p, |p| Ok((p[0] * p[0] + p[1] * p[1], vec![2.0 * p[0], 2.0 * p[1]])), 50, 10)
            .unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn history_csv() {
        let h = TrainingHistory {
            rows: vec![HistoryRow {
                epoch: 3,
                train_loss: 0.5,
                val_loss: 0.25,
                lr: 1e-3,
                phase: Phase::Lbfgs,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,train_loss,val_loss,lr,phase\n3,5e-1,2.5e-1,1e-3,lbfgs\n");
    }
}
