//! Receding-horizon control with a learned Taylor model as the prediction
//! model.
//!
//! The horizon cost is
//!
//! ```text
//! Σ_{k=0}^{N_h-1} (‖x_k − x_ref‖²_Q + ‖u_k‖²_R) + ‖x_{N_h} − x_ref‖²_P + w Σ_{k=1}^{N_h} ‖violation(x_k)‖²
//! ```
//!
//! with diagonal weights and `x_{k+1}` produced by the model from
//! `z_k = [x_k; u_k]` and `z_{k-1}`. Inputs are box constrained; state bounds
//! enter only through the quadratic violation penalty.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plants::Plant;
use crate::taylor::{MtnnModel, StepTape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonals of the state, input and terminal weights.
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub x_ref: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Empty vectors disable the corresponding state bound.
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub state_penalty: f64,
    pub max_iterations: usize,
    /// Stop once the projected-gradient step moves no input by more than
    /// this (input units).
    pub tolerance: f64,
    /// First trial step of the line search, input units per unit gradient.
    pub initial_step: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            q: vec![1.0, 1.0],
            r: vec![0.01, 0.01],
            p: vec![5.0, 5.0],
            x_ref: vec![55.0, 45.0],
            u_min: vec![30.0, 20.0],
            u_max: vec![65.0, 65.0],
            x_min: Vec::new(),
            x_max: Vec::new(),
            state_penalty: 1e3,
            max_iterations: 300,
            tolerance: 1e-6,
            initial_step: 1.0,
        }
    }
}

impl MpcConfig {
    pub fn nx(&self) -> usize {
        self.x_ref.len()
    }

    pub fn nu(&self) -> usize {
        self.u_min.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.nx(), self.nu());
        if self.horizon == 0 {
            return Err(Error::config("MPC horizon must be at least 1"));
        }
        if self.q.len() != nx || self.p.len() != nx || self.r.len() != nu || self.u_max.len() != nu {
            return Err(Error::shape("MPC weight or bound dimensions disagree"));
        }
        if !self.x_min.is_empty() && self.x_min.len() != nx || !self.x_max.is_empty() && self.x_max.len() != nx {
            return Err(Error::shape("state bounds must be empty or have one entry per state"));
        }
        let nonneg = |v: &[f64]| v.iter().all(|&w| w >= 0.0 && w.is_finite());
        if !nonneg(&self.q) || !nonneg(&self.r) || !nonneg(&self.p) || !(self.state_penalty >= 0.0) {
            return Err(Error::config("MPC weights must be nonnegative"));
        }
        if self.u_min.iter().zip(&self.u_max).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::config("u_min must not exceed u_max"));
        }
        if !self.x_min.is_empty()
            && !self.x_max.is_empty()
            && self.x_min.iter().zip(&self.x_max).any(|(lo, hi)| !(lo <= hi))
        {
            return Err(Error::config("x_min must not exceed x_max"));
        }
        if !(self.tolerance > 0.0 && self.initial_step > 0.0) {
            return Err(Error::config("solver tolerance and step must be positive"));
        }
        Ok(())
    }

    pub fn project(&self, u: &mut [f64]) {
        for (i, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.u_min[i], self.u_max[i]);
        }
    }

    fn check_model(&self, model: &MtnnModel) -> Result<()> {
        if model.nx() != self.nx() || model.nu() != self.nu() {
            return Err(Error::shape(format!(
                "model has {} states and {} inputs, MPC config {} and {}",
                model.nx(),
                model.nu(),
                self.nx(),
                self.nu()
            )));
        }
        Ok(())
    }

    /// State cost at `x` for weights `w` plus the bound penalty, with its
    /// gradient added into `grad` when given.
    fn state_term(&self, x: &[f64], w: &[f64], bounds: bool, grad: Option<&mut [f64]>) -> f64 {
        let mut c = 0.0;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let e = x[i] - self.x_ref[i];
            c += w[i] * e * e;
            g[i] += 2.0 * w[i] * e;
            if bounds {
                if let Some(&hi) = self.x_max.get(i) {
                    if x[i] > hi {
                        c += self.state_penalty * (x[i] - hi).powi(2);
                        g[i] += 2.0 * self.state_penalty * (x[i] - hi);
                    }
                }
                if let Some(&lo) = self.x_min.get(i) {
                    if x[i] < lo {
                        c += self.state_penalty * (lo - x[i]).powi(2);
                        g[i] -= 2.0 * self.state_penalty * (lo - x[i]);
                    }
                }
            }
        }
        if let Some(out) = grad {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
        c
    }
}

fn input_term(cfg: &MpcConfig, u: &[f64]) -> f64 {
    u.iter().zip(&cfg.r).map(|(v, r)| r * v * v).sum()
}

fn check_sequence(cfg: &MpcConfig, u_seq: &[Vec<f64>]) -> Result<()> {
    if u_seq.len() != cfg.horizon || u_seq.iter().any(|u| u.len() != cfg.nu()) {
        return Err(Error::shape(format!(
            "input sequence must hold {} vectors of length {}",
            cfg.horizon,
            cfg.nu()
        )));
    }
    Ok(())
}

/// Cost of applying `u_seq` from state `x0` with previous augmented state
/// `z_prev`. A rollout that leaves the finite numbers yields `+∞`.
pub fn horizon_cost(model: &MtnnModel, u_seq: &[Vec<f64>], x0: &[f64], z_prev: &[f64], cfg: &MpcConfig) -> Result<f64> {
    cfg.validate()?;
    cfg.check_model(model)?;
    check_sequence(cfg, u_seq)?;
    if x0.len() != cfg.nx() || z_prev.len() != model.n() {
        return Err(Error::shape("initial state or history has the wrong length"));
    }
    let mut cost = 0.0;
    let mut x = x0.to_vec();
    let mut prev = z_prev.to_vec();
    for (k, u) in u_seq.iter().enumerate() {
        cost += cfg.state_term(&x, &cfg.q, k > 0, None) + input_term(cfg, u);
        let curr: Vec<f64> = x.iter().chain(u).copied().collect();
        x = match model.predict(&curr, &prev) {
            Ok(v) if v.iter().all(|a| a.is_finite()) => v,
            Ok(_) | Err(Error::NonFinite(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        prev = curr;
    }
    cost += cfg.state_term(&x, &cfg.p, true, None);
    Ok(if cost.is_finite() { cost } else { f64::INFINITY })
}

/// Cost and its exact gradient with respect to every input of the sequence.
pub fn horizon_cost_and_gradient(
    model: &MtnnModel,
    u_seq: &[Vec<f64>],
    x0: &[f64],
    z_prev: &[f64],
    cfg: &MpcConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.check_model(model)?;
    check_sequence(cfg, u_seq)?;
    let nx = cfg.nx();
    let n = model.n();
    let nh = cfg.horizon;
    let mut cost = 0.0;
    let mut xs = vec![x0.to_vec()];
    let mut tapes: Vec<StepTape> = Vec::with_capacity(nh);
    let mut prev = z_prev.to_vec();
    for (k, u) in u_seq.iter().enumerate() {
        cost += cfg.state_term(&xs[k], &cfg.q, k > 0, None) + input_term(cfg, u);
        let curr: Vec<f64> = xs[k].iter().chain(u).copied().collect();
        let tape = match model.record(&curr, &prev, false) {
            Ok(t) => t,
            Err(Error::NonFinite(_)) => return Ok((f64::INFINITY, vec![vec![0.0; cfg.nu()]; nh])),
            Err(e) => return Err(e),
        };
        if tape.prediction().iter().any(|v| !v.is_finite()) {
            return Ok((f64::INFINITY, vec![vec![0.0; cfg.nu()]; nh]));
        }
        xs.push(tape.prediction().to_vec());
        tapes.push(tape);
        prev = curr;
    }
    let mut g_x = vec![0.0; nx];
    cost += cfg.state_term(&xs[nh], &cfg.p, true, Some(&mut g_x));
    if !cost.is_finite() {
        return Ok((f64::INFINITY, vec![vec![0.0; cfg.nu()]; nh]));
    }

    let mut grads = vec![vec![0.0; cfg.nu()]; nh];
    let mut carry = vec![0.0; n];
    for k in (0..nh).rev() {
        let (d_curr, d_prev) = model.backward(&tapes[k], &g_x, None, None, None);
        let gz: Vec<f64> = d_curr.iter().zip(&carry).map(|(a, b)| a + b).collect();
        for (i, g) in grads[k].iter_mut().enumerate() {
            *g = gz[nx + i] + 2.0 * cfg.r[i] * u_seq[k][i];
        }
        g_x = gz[..nx].to_vec();
        if k > 0 {
            cfg.state_term(&xs[k], &cfg.q, true, Some(&mut g_x));
        }
        carry = d_prev;
    }
    Ok((cost, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub u_seq: Vec<Vec<f64>>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Best cost after each iteration, starting with the initial guess.
    pub best_costs: Vec<f64>,
}

fn flatten(u: &[Vec<f64>]) -> Vec<f64> {
    u.iter().flatten().copied().collect()
}

fn unflatten(v: &[f64], nu: usize) -> Vec<Vec<f64>> {
    v.chunks(nu).map(<[f64]>::to_vec).collect()
}

/// Projected gradient descent over the stacked input sequence with
/// Barzilai–Borwein trial steps and Armijo backtracking. `warm` (if given)
/// is projected and used as the starting point; otherwise the midpoint of
/// the input box.
pub fn solve_horizon(
    model: &MtnnModel,
    x0: &[f64],
    z_prev: &[f64],
    cfg: &MpcConfig,
    warm: Option<&[Vec<f64>]>,
) -> Result<SolveResult> {
    cfg.validate()?;
    cfg.check_model(model)?;
    if x0.len() != cfg.nx() || z_prev.len() != model.n() {
        return Err(Error::shape("initial state or history has the wrong length"));
    }
    let nu = cfg.nu();
    let lo: Vec<f64> = (0..cfg.horizon).flat_map(|_| cfg.u_min.iter().copied()).collect();
    let hi: Vec<f64> = (0..cfg.horizon).flat_map(|_| cfg.u_max.iter().copied()).collect();
    let project = |v: &mut [f64]| {
        for i in 0..v.len() {
            v[i] = v[i].clamp(lo[i], hi[i]);
        }
    };
    let mut u = match warm {
        Some(w) => {
            check_sequence(cfg, w)?;
            flatten(w)
        }
        None => lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
    };
    project(&mut u);

    let eval = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (c, g) = horizon_cost_and_gradient(model, &unflatten(v, nu), x0, z_prev, cfg)?;
        Ok((c, flatten(&g)))
    };
    let (mut c, mut g) = eval(&u)?;
    let mut best_costs = vec![c];
    let mut step = cfg.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    if !c.is_finite() {
        return Err(Error::NonFinite("horizon cost at the initial guess".into()));
    }

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        // Stationarity: size of a unit projected-gradient step.
        let pg = u
            .iter()
            .zip(&g)
            .enumerate()
            .map(|(i, (ui, gi))| ((ui - gi).clamp(lo[i], hi[i]) - ui).abs())
            .fold(0.0, f64::max);
        if pg <= cfg.tolerance {
            converged = true;
            best_costs.push(c);
            break;
        }
        let mut accepted = None;
        let mut t = step;
        for _ in 0..60 {
            let mut trial: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            project(&mut trial);
            let d: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
            let dn: f64 = d.iter().map(|v| v * v).sum();
            if dn == 0.0 {
                break;
            }
            let lin: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            let (ct, gt) = eval(&trial)?;
            if ct.is_finite() && ct <= c + 1e-4 * lin.min(0.0) && ct <= c {
                accepted = Some((trial, ct, gt, d));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, ct, gt, s)) = accepted else {
            // No descent along the projected direction at any step length.
            converged = pg <= cfg.tolerance.sqrt();
            best_costs.push(c);
            break;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            (2.0 * t).min(1e10)
        };
        let moved = s.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        let improvement = c - ct;
        u = trial;
        c = ct;
        g = gt;
        best_costs.push(c);
        if moved <= cfg.tolerance && improvement <= cfg.tolerance * (1.0 + c.abs()) {
            converged = true;
            break;
        }
    }
    Ok(SolveResult {
        u_seq: unflatten(&u, nu),
        cost: c,
        converged,
        iterations,
        best_costs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Seconds since the first control step.
    pub t: f64,
    /// State measured before the solve.
    pub x: Vec<f64>,
    /// Input applied after the solve.
    pub u: Vec<f64>,
    /// Predicted horizon cost of the returned plan; NaN after a solver fault.
    pub cost: f64,
    pub converged: bool,
    pub fault: Option<String>,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    /// State after the last applied input.
    pub final_state: Vec<f64>,
}

impl ClosedLoopTrace {
    /// `t,<states>,<inputs>,cost,converged`. Solve times are left out so
    /// traces are reproducible byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "t,{},{},cost,converged\n",
            self.state_names.join(","),
            self.input_names.join(",")
        );
        for r in &self.rows {
            let vals: Vec<String> = std::iter::once(r.t)
                .chain(r.x.iter().copied())
                .chain(r.u.iter().copied())
                .map(|v| format!("{v}"))
                .collect();
            s.push_str(&format!("{},{:.6},{}\n", vals.join(","), r.cost, r.converged));
        }
        s
    }

    /// States at steps `0..=steps` (the measured state before each solve and
    /// the final state).
    pub fn states(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.x.clone())
            .chain(std::iter::once(self.final_state.clone()))
            .collect()
    }
}

/// Closed loop against a simulator. The plant starts at `x_init` and takes
/// one zero-input step to create the history `z_prev = [x_init; 0]`; from
/// then on each control step solves the horizon problem, applies the first
/// input and shifts the plan as the next warm start. A failed solve holds
/// the previous input.
pub fn run_closed_loop<P: Plant + ?Sized>(
    plant: &P,
    model: &MtnnModel,
    cfg: &MpcConfig,
    x_init: &[f64],
    steps: usize,
) -> Result<ClosedLoopTrace> {
    cfg.validate()?;
    cfg.check_model(model)?;
    if plant.nx() != model.nx() || plant.nu() != model.nu() || x_init.len() != plant.nx() {
        return Err(Error::shape("plant, model and initial state disagree"));
    }
    let nu = plant.nu();
    let zero = vec![0.0; nu];
    let mut z_prev: Vec<f64> = x_init.iter().chain(&zero).copied().collect();
    let mut x = plant.step(x_init, &zero)?;
    let mut last_u = zero;
    cfg.project(&mut last_u);
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let start = Instant::now();
        let solved = solve_horizon(model, &x, &z_prev, cfg, warm.as_deref());
        let solve_seconds = start.elapsed().as_secs_f64();
        let (u, cost, converged, fault) = match solved {
            Ok(res) if res.cost.is_finite() => {
                let u = res.u_seq[0].clone();
                let mut next = res.u_seq[1..].to_vec();
                next.push(res.u_seq[cfg.horizon - 1].clone());
                warm = Some(next);
                (u, res.cost, res.converged, None)
            }
            Ok(_) => (last_u.clone(), f64::NAN, false, Some("non-finite cost".to_string())),
            Err(e) => (last_u.clone(), f64::NAN, false, Some(e.to_string())),
        };
        let next_x = plant.step(&x, &u)?;
        rows.push(TraceRow {
            t: k as f64 * plant.dt(),
            x: x.clone(),
            u: u.clone(),
            cost,
            converged,
            fault,
            solve_seconds,
        });
        z_prev = x.iter().chain(&u).copied().collect();
        x = next_x;
        last_u = u;
    }
    Ok(ClosedLoopTrace {
        state_names: plant.state_names(),
        input_names: plant.input_names(),
        rows,
        final_state: x,
    })
}
