//! The Taylor predictor: a stack of Jacobian networks evaluated at the
//! previous augmented state, expanded to first or second order.
//!
//! With `z = [x; u]` and `Δz = z_curr - z_prev`, the next state is
//!
//! ```text
//! x̂_j = x_curr_j + G_j(z_prev) · Δz  [+ ½ Δzᵀ H_j(z_prev) Δz]
//! ```
//!
//! where `G_j` is the (optionally sign-gated) output of network `j` and
//! `H_j = ∂G_j/∂z` its input Jacobian.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{gate, gate_slope, MonoSpec, MonoTag};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::net::{Activation, DenseNet, ParamGradient, Scaling, Tape};

/// Augmented state `z = [x; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugState {
    z: Vec<f64>,
    nx: usize,
}

impl AugState {
    pub fn new(x: &[f64], u: &[f64]) -> Result<Self> {
        let z: Vec<f64> = x.iter().chain(u).copied().collect();
        Self::from_vec(z, x.len())
    }

    pub fn from_vec(z: Vec<f64>, nx: usize) -> Result<Self> {
        if nx > z.len() {
            return Err(Error::shape(format!("state length {nx} exceeds z length {}", z.len())));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("augmented state entry {i}")));
        }
        Ok(Self { z, nx })
    }

    pub fn x(&self) -> &[f64] {
        &self.z[..self.nx]
    }

    pub fn u(&self) -> &[f64] {
        &self.z[self.nx..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nu(&self) -> usize {
        self.z.len() - self.nx
    }

    /// Same inputs, state slice replaced.
    pub fn with_state(&self, x: &[f64]) -> Self {
        assert_eq!(x.len(), self.nx);
        let mut z = self.z.clone();
        z[..self.nx].copy_from_slice(x);
        Self { z, nx: self.nx }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaylorOrder {
    First,
    Second,
}

/// How the sign prior reaches the Jacobian networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// ReLU / -ReLU gates on the network outputs.
    Architecture,
    /// Raw outputs; the prior enters through the training loss.
    Soft,
    /// Raw outputs, no prior.
    None,
}

/// Architecture of each Jacobian network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Tanh,
        }
    }
}

/// Everything needed to initialize a model besides its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub nx: usize,
    pub nu: usize,
    pub shape: NetShape,
    pub mono_spec: MonoSpec,
    pub order: TaylorOrder,
    pub gate_mode: GateMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtnnModel {
    nets: Vec<DenseNet>,
    mono_spec: MonoSpec,
    order: TaylorOrder,
    gate_mode: GateMode,
    nx: usize,
    symmetrize_hessian: bool,
}

impl MtnnModel {
    pub fn new(
        nets: Vec<DenseNet>,
        nx: usize,
        mono_spec: MonoSpec,
        order: TaylorOrder,
        gate_mode: GateMode,
    ) -> Result<Self> {
        if nets.len() != nx || nx == 0 {
            return Err(Error::shape(format!("{} networks for {nx} states", nets.len())));
        }
        let n = nets[0].input_dim();
        if n < nx {
            return Err(Error::shape("network input narrower than the state"));
        }
        for (j, net) in nets.iter().enumerate() {
            if net.input_dim() != n || net.output_dim() != n {
                return Err(Error::shape(format!(
                    "network {j} maps {}→{}, expected {n}→{n}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        if (mono_spec.rows(), mono_spec.cols()) != (nx, n) {
            return Err(Error::shape(format!(
                "monotonicity spec is {}x{}, model Jacobian is {nx}x{n}",
                mono_spec.rows(),
                mono_spec.cols()
            )));
        }
        if order == TaylorOrder::Second && !nets.iter().all(DenseNet::is_smooth) {
            return Err(Error::config(
                "second-order expansion needs infinitely differentiable activations",
            ));
        }
        Ok(Self {
            nets,
            mono_spec,
            order,
            gate_mode,
            nx,
            symmetrize_hessian: false,
        })
    }

    /// Freshly initialized model: `nx` stacked networks of shape
    /// `n → hidden.. → n`, all sharing `scaling`.
    pub fn random(layout: &ModelLayout, scaling: Option<&Scaling>, seed: u64) -> Result<Self> {
        let n = layout.nx + layout.nu;
        let mut dims = vec![n];
        dims.extend(&layout.shape.hidden);
        dims.push(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = (0..layout.nx)
            .map(|_| {
                let net = DenseNet::random(&dims, layout.shape.activation, &mut rng)?;
                match scaling {
                    Some(s) => net.with_scaling(s.clone()),
                    None => Ok(net),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            nets,
            layout.nx,
            layout.mono_spec.clone(),
            layout.order,
            layout.gate_mode,
        )
    }

    pub fn with_symmetrized_hessian(mut self, on: bool) -> Self {
        self.symmetrize_hessian = on;
        self
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn n(&self) -> usize {
        self.nets[0].input_dim()
    }

    pub fn nu(&self) -> usize {
        self.n() - self.nx
    }

    pub fn nets(&self) -> &[DenseNet] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [DenseNet] {
        &mut self.nets
    }

    pub fn mono_spec(&self) -> &MonoSpec {
        &self.mono_spec
    }

    pub fn order(&self) -> TaylorOrder {
        self.order
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    pub fn symmetrize_hessian(&self) -> bool {
        self.symmetrize_hessian
    }

    fn check_z(&self, z: &[f64], what: &str) -> Result<()> {
        if z.len() != self.n() {
            return Err(Error::shape(format!(
                "{what} has length {}, model expects {}",
                z.len(),
                self.n()
            )));
        }
        Ok(())
    }

    #[inline]
    fn tag(&self, j: usize, i: usize) -> MonoTag {
        match self.gate_mode {
            GateMode::Architecture => self.mono_spec.tag(j, i),
            GateMode::Soft | GateMode::None => MonoTag::Free,
        }
    }

    /// Learned Jacobian `Nx × N` at `z_prev`.
    pub fn jacobian_matrix(&self, z_prev: &[f64]) -> Result<Matrix> {
        self.check_z(z_prev, "z_prev")?;
        let n = self.n();
        let mut g = Matrix::zeros(self.nx, n);
        for (j, net) in self.nets.iter().enumerate() {
            let raw = net.forward(z_prev)?;
            for i in 0..n {
                g[(j, i)] = gate(raw[i], self.tag(j, i));
            }
        }
        Ok(g)
    }

    /// One `N × N` block per state: the input Jacobian of the (gated)
    /// network `j` at `z_prev`.
    pub fn hessian_stack(&self, z_prev: &[f64]) -> Result<Vec<Matrix>> {
        self.check_z(z_prev, "z_prev")?;
        (0..self.nx)
            .map(|j| {
                let (raw, jac) = self.nets[j].forward_with_jacobian(z_prev)?;
                Ok(self.gated_block(j, &raw, jac))
            })
            .collect()
    }

    fn gated_block(&self, j: usize, raw: &[f64], mut jac: Matrix) -> Matrix {
        for (i, &r) in raw.iter().enumerate() {
            let s = gate_slope(r, self.tag(j, i));
            if s != 1.0 {
                jac.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
        }
        if self.symmetrize_hessian {
            jac.symmetrized()
        } else {
            jac
        }
    }

    /// Next-state prediction from the current and previous augmented states.
    pub fn predict(&self, z_curr: &[f64], z_prev: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z_curr, "z_curr")?;
        self.check_z(z_prev, "z_prev")?;
        let dz = increment(z_curr, z_prev)?;
        let mut x = z_curr[..self.nx].to_vec();
        if dz.iter().all(|&d| d == 0.0) {
            return Ok(x);
        }
        let g = self.jacobian_matrix(z_prev)?;
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += dot(g.row(j), &dz);
        }
        if self.order == TaylorOrder::Second {
            for (j, h) in self.hessian_stack(z_prev)?.iter().enumerate() {
                x[j] += 0.5 * h.bilinear(&dz, &dz);
            }
        }
        Ok(x)
    }

    /// Records one prediction for a later [`backward`](Self::backward).
    /// Set `need_hessian` when the caller will pass Hessian sensitivities;
    /// second-order models always record it.
    pub fn record(&self, z_curr: &[f64], z_prev: &[f64], need_hessian: bool) -> Result<StepTape> {
        self.check_z(z_curr, "z_curr")?;
        self.check_z(z_prev, "z_prev")?;
        let dz = increment(z_curr, z_prev)?;
        let with_h = need_hessian || self.order == TaylorOrder::Second;
        let n = self.n();
        let mut tapes = Vec::with_capacity(self.nx);
        let mut g = Matrix::zeros(self.nx, n);
        let mut blocks = Vec::new();
        for (j, net) in self.nets.iter().enumerate() {
            let tape = net.record(z_prev, with_h)?;
            for i in 0..n {
                g[(j, i)] = gate(tape.output()[i], self.tag(j, i));
            }
            if with_h {
                let jac = tape.jacobian().expect("recorded with tangents").clone();
                blocks.push(self.gated_block(j, tape.output(), jac));
            }
            tapes.push(tape);
        }
        let mut x = z_curr[..self.nx].to_vec();
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += dot(g.row(j), &dz);
            if self.order == TaylorOrder::Second {
                *xj += 0.5 * blocks[j].bilinear(&dz, &dz);
            }
        }
        Ok(StepTape {
            tapes,
            dz,
            jacobian: g,
            hessian: with_h.then_some(blocks),
            prediction: x,
        })
    }

    /// Reverse pass for one recorded prediction.
    ///
    /// * `d_pred`: sensitivity of the scalar objective to the prediction.
    /// * `d_jacobian`: extra sensitivity to the (gated) Jacobian matrix.
    /// * `d_hessian`: extra sensitivity to each Hessian block.
    ///
    /// Parameter gradients are accumulated into `grads` (one per network)
    /// when given. Returns `(∂/∂z_curr, ∂/∂z_prev)`.
    pub fn backward(
        &self,
        tape: &StepTape,
        d_pred: &[f64],
        d_jacobian: Option<&Matrix>,
        d_hessian: Option<&[Matrix]>,
        mut grads: Option<&mut [ParamGradient]>,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let dz = &tape.dz;
        let second = self.order == TaylorOrder::Second;
        let mut d_dz = vec![0.0; n];
        let mut d_prev = vec![0.0; n];
        let mut d_curr = vec![0.0; n];
        d_curr[..self.nx].copy_from_slice(d_pred);

        for j in 0..self.nx {
            let xb = d_pred[j];
            let grow = tape.jacobian.row(j);
            // ∂x̂_j/∂Δz = G_j + ½ (H_j + H_jᵀ) Δz
            for i in 0..n {
                d_dz[i] += xb * grow[i];
            }
            if second {
                let h = &tape.hessian.as_ref().expect("second order records H")[j];
                for r in 0..n {
                    for c in 0..n {
                        let v = 0.5 * xb * h[(r, c)];
                        d_dz[r] += v * dz[c];
                        d_dz[c] += v * dz[r];
                    }
                }
            }

            // Sensitivities of the gated quantities of network j.
            let mut gbar: Vec<f64> = dz.iter().map(|d| xb * d).collect();
            if let Some(dj) = d_jacobian {
                for (g, d) in gbar.iter_mut().zip(dj.row(j)) {
                    *g += d;
                }
            }
            let mut hbar: Option<Matrix> = None;
            if second && xb != 0.0 {
                let mut m = Matrix::zeros(n, n);
                for r in 0..n {
                    for c in 0..n {
                        m[(r, c)] = 0.5 * xb * dz[r] * dz[c];
                    }
                }
                hbar = Some(m);
            }
            if let Some(dh) = d_hessian {
                match hbar.as_mut() {
                    Some(m) => m.add_assign_scaled(&dh[j], 1.0),
                    None => hbar = Some(dh[j].clone()),
                }
            }
            if let Some(m) = hbar.as_mut() {
                if self.symmetrize_hessian {
                    *m = m.symmetrized();
                }
            }

            // Through the gates to the raw outputs and raw input Jacobian.
            let raw = tape.tapes[j].output();
            let mut ybar = vec![0.0; n];
            for i in 0..n {
                ybar[i] = gbar[i] * gate_slope(raw[i], self.tag(j, i));
            }
            let tbar = hbar.map(|mut m| {
                for (i, &r) in raw.iter().enumerate() {
                    let s = gate_slope(r, self.tag(j, i));
                    if s != 1.0 {
                        m.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                }
                m
            });

            let mut scratch;
            let grad = match grads.as_deref_mut() {
                Some(g) => &mut g[j],
                None => {
                    scratch = ParamGradient::zeros_like(&self.nets[j]);
                    &mut scratch
                }
            };
            let dzp = self.nets[j].backward(&tape.tapes[j], &ybar, tbar.as_ref(), grad);
            for (a, b) in d_prev.iter_mut().zip(&dzp) {
                *a += b;
            }
        }

        for i in 0..n {
            d_curr[i] += d_dz[i];
            d_prev[i] -= d_dz[i];
        }
        (d_curr, d_prev)
    }
}

/// Everything [`MtnnModel::backward`] needs from one prediction.
#[derive(Debug, Clone)]
pub struct StepTape {
    tapes: Vec<Tape>,
    dz: Vec<f64>,
    jacobian: Matrix,
    hessian: Option<Vec<Matrix>>,
    prediction: Vec<f64>,
}

impl StepTape {
    pub fn prediction(&self) -> &[f64] {
        &self.prediction
    }

    pub fn jacobian(&self) -> &Matrix {
        &self.jacobian
    }

    pub fn hessian(&self) -> Option<&[Matrix]> {
        self.hessian.as_deref()
    }

    pub fn increment(&self) -> &[f64] {
        &self.dz
    }
}

fn increment(z_curr: &[f64], z_prev: &[f64]) -> Result<Vec<f64>> {
    let dz: Vec<f64> = z_curr.iter().zip(z_prev).map(|(a, b)| a - b).collect();
    if let Some(i) = dz.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("state increment entry {i}")));
    }
    Ok(dz)
}
