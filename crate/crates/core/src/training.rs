//! Loss assembly and gradient training for Taylor models and the direct
//! baseline network.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    convex_penalty, convex_penalty_grad, mono_penalty, mono_penalty_grad, MonoTag, PenaltyWeights,
};
use crate::error::{Error, Result};
use crate::linalg::{solve, Matrix};
use crate::net::{Activation, DenseNet, ParamGradient, Scaling};
use crate::plants::Transition;
use crate::taylor::{GateMode, ModelLayout, MtnnModel};

/// Which terms enter the training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Mse,
    MonoSoft,
    Convex,
    MonoSoftConvex,
}

impl LossMode {
    pub fn uses_mono(self) -> bool {
        matches!(self, LossMode::MonoSoft | LossMode::MonoSoftConvex)
    }

    pub fn uses_convex(self) -> bool {
        matches!(self, LossMode::Convex | LossMode::MonoSoftConvex)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub mode: LossMode,
    pub penalty: PenaltyWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay on connection weights (biases are exempt);
    /// 0 gives plain Adam.
    pub weight_decay: f64,
    /// Losses above this abort training as diverged.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 2000,
            batch_size: None,
            seed: 0,
            mode: LossMode::Mse,
            penalty: PenaltyWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            divergence_threshold: 1e12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_data: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > n_data {
                return Err(Error::config(format!("batch_size {b} outside 1..={n_data}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam decay terms must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and nonnegative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        self.penalty.validate()
    }
}

/// Loss split into its terms. Each penalty is already averaged over the
/// batch and weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub mono: f64,
    pub convex: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.mse.is_finite() && self.mono.is_finite() && self.convex.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Full-data loss before the first update.
    pub initial: LossBreakdown,
    /// Full-data loss after each epoch.
    pub epochs: Vec<LossBreakdown>,
    /// Seconds since the start of training, per epoch.
    pub wall_time: Vec<f64>,
    /// 1-based epoch of the returned parameters, 0 for the initial ones.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> LossBreakdown {
        if self.best_epoch == 0 {
            self.initial
        } else {
            self.epochs[self.best_epoch - 1]
        }
    }

    pub fn last(&self) -> LossBreakdown {
        self.epochs.last().copied().unwrap_or(self.initial)
    }

    /// `epoch,total,mse,mono,convex`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,mse,mono,convex\n");
        for (e, l) in self.epochs.iter().enumerate() {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                e + 1,
                l.total,
                l.mse,
                l.mono,
                l.convex
            ));
        }
        s
    }
}

fn check_data(data: &[Transition], n: usize, nx: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("empty batch"));
    }
    for (i, t) in data.iter().enumerate() {
        if t.z_curr.len() != n || t.z_prev.len() != n || t.x_next.len() != nx {
            return Err(Error::shape(format!(
                "transition {i} does not match a model with {nx} states and {n} inputs"
            )));
        }
    }
    Ok(())
}

fn fault(sample: usize, what: &str) -> Error {
    Error::TrainingFault {
        sample,
        reason: format!("non-finite {what}"),
    }
}

fn flat_grads(grads: &[ParamGradient]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
}

/// 1 for connection weights, 0 for biases, in [`DenseNet::params`] order.
fn weight_mask(net: &DenseNet) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| std::iter::repeat_n(1.0, l.weights().len()).chain(std::iter::repeat_n(0.0, l.biases().len())))
        .collect()
}

fn model_params(model: &MtnnModel) -> Vec<f64> {
    model.nets().iter().flat_map(DenseNet::params).collect()
}

fn set_model_params(model: &mut MtnnModel, params: &[f64]) -> Result<()> {
    let mut off = 0;
    for net in model.nets_mut() {
        let k = net.param_count();
        net.set_params(&params[off..off + k])?;
        off += k;
    }
    Ok(())
}

/// Loss of a Taylor model on `batch` under `cfg.mode`, with the gradient
/// over all network parameters (concatenated net by net) when `with_grad`.
fn taylor_objective(
    model: &MtnnModel,
    batch: &[&Transition],
    cfg: &TrainConfig,
    with_grad: bool,
    index_of: &dyn Fn(usize) -> usize,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let b = batch.len() as f64;
    let spec = model.mono_spec();
    let use_mono = cfg.mode.uses_mono();
    let use_convex = cfg.mode.uses_convex();
    let mut grads: Vec<ParamGradient> = model.nets().iter().map(ParamGradient::zeros_like).collect();
    let mut out = LossBreakdown::default();
    for (k, t) in batch.iter().enumerate() {
        let sample = index_of(k);
        let tape = model
            .record(t.z_curr.as_slice(), t.z_prev.as_slice(), use_convex)
            .map_err(|_| fault(sample, "input"))?;
        let r: Vec<f64> = tape.prediction().iter().zip(&t.x_next).map(|(p, y)| p - y).collect();
        let se: f64 = r.iter().map(|v| v * v).sum();
        if !se.is_finite() {
            return Err(fault(sample, "prediction"));
        }
        out.mse += se / b;
        let mut d_jac: Option<Matrix> = None;
        if use_mono {
            let p = mono_penalty(tape.jacobian(), spec, &cfg.penalty)?;
            out.mono += p / b;
            if with_grad {
                let mut g = mono_penalty_grad(tape.jacobian(), spec, &cfg.penalty)?;
                g.scale(1.0 / b);
                d_jac = Some(g);
            }
        }
        let mut d_hess: Option<Vec<Matrix>> = None;
        if use_convex {
            let blocks = tape.hessian().expect("recorded with Hessian");
            let c = cfg.penalty.convex_criterion;
            let p = convex_penalty(blocks, cfg.penalty.gamma, c)?;
            if !p.is_finite() {
                return Err(fault(sample, "convexity penalty"));
            }
            out.convex += p / b;
            if with_grad {
                let mut g = convex_penalty_grad(blocks, cfg.penalty.gamma, c)?;
                g.iter_mut().for_each(|m| m.scale(1.0 / b));
                d_hess = Some(g);
            }
        }
        if with_grad {
            let d_pred: Vec<f64> = r.iter().map(|v| 2.0 * v / b).collect();
            model.backward(&tape, &d_pred, d_jac.as_ref(), d_hess.as_deref(), Some(&mut grads));
        }
    }
    out.total = out.mse + out.mono + out.convex;
    let grad = with_grad.then(|| flat_grads(&grads));
    if let Some(g) = &grad {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::TrainingFault {
                sample: index_of(0),
                reason: format!("non-finite gradient entry {i}"),
            });
        }
    }
    Ok((out, grad))
}

/// Batch loss: mean squared prediction error plus the penalties selected by
/// `cfg.mode`, each averaged over the batch.
pub fn total_loss(model: &MtnnModel, batch: &[Transition], cfg: &TrainConfig) -> Result<f64> {
    Ok(loss_breakdown(model, batch, cfg)?.total)
}

pub fn loss_breakdown(model: &MtnnModel, batch: &[Transition], cfg: &TrainConfig) -> Result<LossBreakdown> {
    check_data(batch, model.n(), model.nx())?;
    let refs: Vec<&Transition> = batch.iter().collect();
    Ok(taylor_objective(model, &refs, cfg, false, &|k| k)?.0)
}

/// Loss and its gradient over all parameters, concatenated net by net in
/// [`DenseNet::params`] order.
pub fn loss_and_gradient(
    model: &MtnnModel,
    batch: &[Transition],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_data(batch, model.n(), model.nx())?;
    let refs: Vec<&Transition> = batch.iter().collect();
    let (l, g) = taylor_objective(model, &refs, cfg, true, &|k| k)?;
    Ok((l, g.expect("gradient requested")))
}

fn baseline_objective(
    net: &DenseNet,
    batch: &[&Transition],
    with_grad: bool,
    index_of: &dyn Fn(usize) -> usize,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let b = batch.len() as f64;
    let mut grad = ParamGradient::zeros_like(net);
    let mut out = LossBreakdown::default();
    for (k, t) in batch.iter().enumerate() {
        let sample = index_of(k);
        let tape = net
            .record(t.z_curr.as_slice(), false)
            .map_err(|_| fault(sample, "input"))?;
        let r: Vec<f64> = tape.output().iter().zip(&t.x_next).map(|(p, y)| p - y).collect();
        let se: f64 = r.iter().map(|v| v * v).sum();
        if !se.is_finite() {
            return Err(fault(sample, "prediction"));
        }
        out.mse += se / b;
        if with_grad {
            let d: Vec<f64> = r.iter().map(|v| 2.0 * v / b).collect();
            net.backward(&tape, &d, None, &mut grad);
        }
    }
    out.total = out.mse;
    Ok((out, with_grad.then(|| grad.as_slice().to_vec())))
}

pub fn baseline_loss(net: &DenseNet, batch: &[Transition]) -> Result<f64> {
    check_data(batch, net.input_dim(), net.output_dim())?;
    let refs: Vec<&Transition> = batch.iter().collect();
    Ok(baseline_objective(net, &refs, false, &|k| k)?.0.total)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    decay: Vec<f64>,
}

impl Adam {
    /// `decay_mask[i]` is 1 for parameters subject to weight decay.
    fn new(decay_mask: &[f64], cfg: &TrainConfig) -> Self {
        let n = decay_mask.len();
        Self {
            decay: decay_mask.iter().map(|m| m * cfg.weight_decay).collect(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.decay[i] * params[i]);
        }
    }
}

/// Shared optimization loop. `eval(params, batch indices, with_grad)`
/// returns the loss on those samples and optionally its gradient.
fn fit<E>(
    mut params: Vec<f64>,
    decay_mask: &[f64],
    n_data: usize,
    cfg: &TrainConfig,
    mut eval: E,
) -> Result<(Vec<f64>, TrainHistory)>
where
    E: FnMut(&[f64], &[usize], bool) -> Result<(LossBreakdown, Option<Vec<f64>>)>,
{
    cfg.validate(n_data)?;
    let start = Instant::now();
    let mut adam = Adam::new(decay_mask, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_data).collect();
    let batch = cfg.batch_size.unwrap_or(n_data);
    let full_batch = batch == n_data;
    let mut history = TrainHistory::default();

    let (initial, mut grad) = eval(&params, &order, full_batch)?;
    if !initial.is_finite() {
        return Err(Error::TrainingFault {
            sample: 0,
            reason: "initial loss is not finite".into(),
        });
    }
    history.initial = initial;
    let mut best = (initial.total, params.clone());

    for epoch in 1..=cfg.epochs {
        let step = if full_batch {
            adam.step(&mut params, grad.as_deref().expect("full-batch gradient"));
            eval(&params, &order, true)
        } else {
            order.shuffle(&mut rng);
            let mut failed = None;
            for chunk in order.chunks(batch) {
                match eval(&params, chunk, true) {
                    Ok((_, Some(g))) => adam.step(&mut params, &g),
                    Ok(_) => unreachable!("gradient requested"),
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            match failed {
                Some(e) => Err(e),
                None => {
                    let all: Vec<usize> = (0..n_data).collect();
                    eval(&params, &all, false)
                }
            }
        };
        let loss = match step {
            Ok((l, g)) => {
                grad = g;
                l
            }
            Err(Error::TrainingFault { .. }) => LossBreakdown {
                total: f64::NAN,
                ..Default::default()
            },
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss.total > cfg.divergence_threshold {
            return Err(Error::Diverged {
                epoch,
                loss: loss.total,
                history: Box::new(history),
            });
        }
        history.epochs.push(loss);
        history.wall_time.push(start.elapsed().as_secs_f64());
        if loss.total < best.0 {
            best = (loss.total, params.clone());
            history.best_epoch = epoch;
        }
    }
    Ok((best.1, history))
}

/// Trains all Jacobian networks of `model` jointly. Returns the parameters
/// with the lowest recorded full-data loss.
pub fn train(model: &MtnnModel, data: &[Transition], cfg: &TrainConfig) -> Result<(MtnnModel, TrainHistory)> {
    if data.len() < 2 {
        return Err(Error::config("training needs at least 2 transitions"));
    }
    check_data(data, model.n(), model.nx())?;
    let mut work = model.clone();
    let mask: Vec<f64> = model.nets().iter().flat_map(weight_mask).collect();
    let (best, history) = fit(model_params(model), &mask, data.len(), cfg, |p, idx, g| {
        set_model_params(&mut work, p)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| &data[i]).collect();
        taylor_objective(&work, &batch, cfg, g, &|k| idx[k])
    })?;
    let mut out = model.clone();
    set_model_params(&mut out, &best)?;
    Ok((out, history))
}

/// Trains a direct map `z_curr → x_next`. `cfg.mode` is ignored.
pub fn train_baseline(net: &DenseNet, data: &[Transition], cfg: &TrainConfig) -> Result<(DenseNet, TrainHistory)> {
    if data.len() < 2 {
        return Err(Error::config("training needs at least 2 transitions"));
    }
    check_data(data, net.input_dim(), net.output_dim())?;
    let mut work = net.clone();
    let (best, history) = fit(net.params(), &weight_mask(net), data.len(), cfg, |p, idx, g| {
        work.set_params(p)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| &data[i]).collect();
        baseline_objective(&work, &batch, g, &|k| idx[k])
    })?;
    let mut out = net.clone();
    out.set_params(&best)?;
    Ok((out, history))
}

fn mean_and_spread(rows: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = rows.collect();
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Input standardization for the Jacobian networks from the `z_prev`
/// statistics of `data`.
pub fn taylor_scaling(data: &[Transition]) -> Result<Scaling> {
    if data.is_empty() {
        return Err(Error::config("cannot normalize on empty data"));
    }
    let n = data[0].z_prev.len();
    let (mean, spread) = mean_and_spread(data.iter().map(|t| t.z_prev.as_slice().to_vec()));
    Ok(Scaling::identity(n, n).standardize_inputs(&mean, &spread))
}

/// Output bias given to sign-gated Jacobian entries at initialization.
/// A gate whose raw output starts negative over the whole data set never
/// receives a gradient; the positive offset keeps it active.
pub const GATED_BIAS_INIT: f64 = 0.1;

/// Fresh Taylor model with inputs standardized on `data`. Under
/// [`GateMode::Architecture`] the output biases of tagged entries start at
/// [`GATED_BIAS_INIT`].
pub fn init_taylor(layout: &ModelLayout, data: &[Transition], seed: u64) -> Result<MtnnModel> {
    let scaling = taylor_scaling(data)?;
    let mut model = MtnnModel::random(layout, Some(&scaling), seed)?;
    if model.gate_mode() == GateMode::Architecture {
        let spec = model.mono_spec().clone();
        for (j, net) in model.nets_mut().iter_mut().enumerate() {
            let gain = net.scaling().output_gain.clone();
            let last = net.layers().len() - 1;
            for (i, b) in net.layers_mut()[last].biases_mut().iter_mut().enumerate() {
                if spec.tag(j, i) != MonoTag::Free {
                    *b = GATED_BIAS_INIT / gain[i];
                }
            }
        }
    }
    Ok(model)
}

/// Best constant Jacobian for the first-order increment model:
/// row `j` minimizes `Σ (x_next_j − x_curr_j − g·Δz)²` plus a tiny ridge
/// term that keeps unexcited directions at zero.
pub fn linear_jacobian_fit(data: &[Transition]) -> Result<Matrix> {
    if data.is_empty() {
        return Err(Error::config("cannot fit on empty data"));
    }
    let n = data[0].z_curr.len();
    let nx = data[0].x_next.len();
    let mut gram = Matrix::zeros(n, n);
    let mut rhs = Matrix::zeros(nx, n);
    for t in data {
        let dz: Vec<f64> = t
            .z_curr
            .as_slice()
            .iter()
            .zip(t.z_prev.as_slice())
            .map(|(c, p)| c - p)
            .collect();
        for r in 0..n {
            for c in 0..n {
                gram[(r, c)] += dz[r] * dz[c];
            }
        }
        for j in 0..nx {
            let dx = t.x_next[j] - t.z_curr.x()[j];
            for c in 0..n {
                rhs[(j, c)] += dx * dz[c];
            }
        }
    }
    let ridge = 1e-8 * (0..n).map(|i| gram[(i, i)]).sum::<f64>().max(1e-300);
    for i in 0..n {
        gram[(i, i)] += ridge;
    }
    let mut g = Matrix::zeros(nx, n);
    for j in 0..nx {
        let row = solve(&gram, rhs.row(j)).ok_or_else(|| Error::NonFinite("singular increment Gram matrix".into()))?;
        g.row_mut(j).copy_from_slice(&row);
    }
    Ok(g)
}

/// Starts every Jacobian network near the constant Jacobian `g`: the output
/// biases are set so the (gated) outputs equal `g` and the output weights
/// are multiplied by `output_weight_scale`. Entries of `g` whose sign
/// contradicts an architecture gate start at `floor` on the admissible side
/// so the gate is not inactive from the first step.
pub fn warm_start(model: &mut MtnnModel, g: &Matrix, output_weight_scale: f64, floor: f64) -> Result<()> {
    if (g.rows(), g.cols()) != (model.nx(), model.n()) {
        return Err(Error::shape("warm-start Jacobian has the wrong shape"));
    }
    let gated = model.gate_mode() == GateMode::Architecture;
    let spec = model.mono_spec().clone();
    for (j, net) in model.nets_mut().iter_mut().enumerate() {
        let sc = net.scaling().clone();
        let last = net.layers().len() - 1;
        let layer = &mut net.layers_mut()[last];
        layer.weights_mut().iter_mut().for_each(|w| *w *= output_weight_scale);
        for (i, b) in layer.biases_mut().iter_mut().enumerate() {
            let target = g[(j, i)];
            let raw = match (gated, spec.tag(j, i)) {
                (true, MonoTag::Increasing) => target.max(floor),
                (true, MonoTag::Decreasing) => (-target).max(floor),
                _ => target,
            };
            *b = (raw - sc.output_offset[i]) / sc.output_gain[i];
        }
    }
    Ok(())
}

/// Fresh direct baseline `z_curr → x_next` with inputs and outputs
/// standardized on `data`.
pub fn init_baseline(hidden: &[usize], activation: Activation, data: &[Transition], seed: u64) -> Result<DenseNet> {
    if data.is_empty() {
        return Err(Error::config("cannot normalize on empty data"));
    }
    let n = data[0].z_curr.len();
    let nx = data[0].x_next.len();
    let (in_mean, in_spread) = mean_and_spread(data.iter().map(|t| t.z_curr.as_slice().to_vec()));
    let (out_mean, out_spread) = mean_and_spread(data.iter().map(|t| t.x_next.clone()));
    let out_gain: Vec<f64> = out_spread.iter().map(|&s| if s > 1e-12 { s } else { 1.0 }).collect();
    let mut dims = vec![n];
    dims.extend(hidden);
    dims.push(nx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseNet::random(&dims, activation, &mut rng)?.with_scaling(
        Scaling::identity(n, nx)
            .standardize_inputs(&in_mean, &in_spread)
            .with_output(&out_mean, &out_gain),
    )
}

/// Splits time-ordered data into a leading training part and a trailing
/// validation part holding `fraction` of the samples (at least one each).
pub fn chronological_holdout(data: &[Transition], fraction: f64) -> Result<(&[Transition], &[Transition])> {
    if data.len() < 4 || !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::config("holdout needs ≥ 4 samples and a fraction in (0, 1)"));
    }
    let n_val = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len() - 2);
    Ok(data.split_at(data.len() - n_val))
}
