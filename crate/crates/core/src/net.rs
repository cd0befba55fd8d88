//! Dense feed-forward networks with exact derivatives.
//!
//! Besides the plain forward pass, a network can be evaluated together with
//! its input Jacobian by pushing tangents for every input coordinate through
//! the layers (forward mode). [`DenseNet::backward`] then runs reverse mode
//! over that augmented pass, so losses that depend on the input Jacobian get
//! exact parameter gradients, and the gradient with respect to the input is
//! returned as well.
//!
//! Each layer computes `a' = σ(W a + b)` with `W` stored row-major as
//! `out_dim × in_dim`. A fixed, non-trainable affine [`Scaling`] wraps the
//! stack: inputs are mapped to `(z - input_offset) * input_gain` and outputs
//! to `output_offset + output_gain * a_L`. All derivatives are taken with
//! respect to the unscaled quantities.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    /// Value and first two derivatives at `s`.
    #[inline]
    pub fn eval(self, s: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = s.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            Activation::Sigmoid => {
                let y = if s >= 0.0 {
                    1.0 / (1.0 + (-s).exp())
                } else {
                    let e = s.exp();
                    e / (1.0 + e)
                };
                let d1 = y * (1.0 - y);
                (y, d1, d1 * (1.0 - 2.0 * y))
            }
            Activation::Linear => (s, 1.0, 0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    /// All supported activations are C∞; this is checked wherever a
    /// second-order expansion needs it so new variants cannot slip through.
    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Sigmoid | Activation::Linear)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" | "identity" => Ok(Activation::Linear),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::shape("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::shape(format!(
                "weight length {} != {out_dim}x{in_dim}",
                weights.len()
            )));
        }
        if biases.len() != out_dim {
            return Err(Error::shape(format!("bias length {} != {out_dim}", biases.len())));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).map_err(|e| Error::config(format!("init range: {e}")))?;
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self::new(in_dim, out_dim, activation, weights, vec![0.0; out_dim])
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    #[inline]
    fn w(&self, k: usize, i: usize) -> f64 {
        self.weights[k * self.in_dim + i]
    }
}

/// Fixed affine normalization around the trainable stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_offset: Vec<f64>,
    pub input_gain: Vec<f64>,
    pub output_offset: Vec<f64>,
    pub output_gain: Vec<f64>,
}

impl Scaling {
    pub fn identity(n_in: usize, n_out: usize) -> Self {
        Self {
            input_offset: vec![0.0; n_in],
            input_gain: vec![1.0; n_in],
            output_offset: vec![0.0; n_out],
            output_gain: vec![1.0; n_out],
        }
    }

    /// Standardizes inputs with the given per-coordinate mean and spread.
    /// Spreads below `1e-12` fall back to a unit gain.
    pub fn standardize_inputs(mut self, mean: &[f64], spread: &[f64]) -> Self {
        self.input_offset = mean.to_vec();
        self.input_gain = spread.iter().map(|&s| if s > 1e-12 { 1.0 / s } else { 1.0 }).collect();
        self
    }

    pub fn with_output(mut self, offset: &[f64], gain: &[f64]) -> Self {
        self.output_offset = offset.to_vec();
        self.output_gain = gain.to_vec();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    scaling: Scaling,
}

/// Gradient of a scalar with respect to every parameter of a [`DenseNet`],
/// laid out like [`DenseNet::params`]: per layer, the row-major weights then
/// the biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    shapes: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            shapes: net.layers.iter().map(|l| (l.out_dim, l.in_dim)).collect(),
            values: vec![0.0; net.param_count()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Weight and bias gradients of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (off, nw, nb) = self.span(l);
        let s = &self.values[off..off + nw + nb];
        s.split_at(nw)
    }

    fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (off, nw, nb) = self.span(l);
        let s = &mut self.values[off..off + nw + nb];
        s.split_at_mut(nw)
    }

    fn span(&self, l: usize) -> (usize, usize, usize) {
        let off = self.shapes[..l].iter().map(|(o, i)| o * i + o).sum();
        let (o, i) = self.shapes[l];
        (off, o * i, o)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Intermediate values of one evaluation, kept for [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `a_0 ..= a_L`; `a_0` is the scaled input.
    activations: Vec<Vec<f64>>,
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
    /// `T_0 ..= T_L`, each `dim(a_l) × N`.
    tangents: Option<Vec<Matrix>>,
    /// Pre-activation tangents `S_1 ..= S_L`.
    pre_tangents: Option<Vec<Matrix>>,
    output: Vec<f64>,
    jacobian: Option<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Input Jacobian, present when the tape was recorded with tangents.
    pub fn jacobian(&self) -> Option<&Matrix> {
        self.jacobian.as_ref()
    }
}

/// Value of a per-point loss together with its sensitivities to the network
/// output and, optionally, to the network's input Jacobian.
#[derive(Debug, Clone)]
pub struct PointLoss {
    pub value: f64,
    pub d_output: Vec<f64>,
    pub d_jacobian: Option<Matrix>,
}

impl DenseNet {
    /// Random network with `dims = [n_in, hidden.., n_out]`, the given hidden
    /// activation and a linear output layer.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("a network needs at least input and output dims"));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let act = if l == last { Activation::Linear } else { hidden };
                Layer::glorot(w[0], w[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::shape("network without layers"))?;
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        let n_in = first.in_dim;
        let n_out = layers[layers.len() - 1].out_dim;
        Ok(Self {
            layers,
            scaling: Scaling::identity(n_in, n_out),
        })
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Result<Self> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        if scaling.input_offset.len() != n_in
            || scaling.input_gain.len() != n_in
            || scaling.output_offset.len() != n_out
            || scaling.output_gain.len() != n_out
        {
            return Err(Error::shape("scaling does not match network dims"));
        }
        self.scaling = scaling;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn is_smooth(&self) -> bool {
        self.layers.iter().all(|l| l.activation.is_smooth())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} parameters supplied, network has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            let (b, r) = r.split_at(l.biases.len());
            l.weights.copy_from_slice(w);
            l.biases.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input of length {} for a network with {} inputs",
                z.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let mut a: Vec<f64> = z
            .iter()
            .zip(&self.scaling.input_offset)
            .zip(&self.scaling.input_gain)
            .map(|((z, o), g)| (z - o) * g)
            .collect();
        for layer in &self.layers {
            a = (0..layer.out_dim)
                .map(|k| {
                    let s = dot(&layer.weights[k * layer.in_dim..(k + 1) * layer.in_dim], &a) + layer.biases[k];
                    layer.activation.eval(s).0
                })
                .collect();
        }
        Ok(self.scale_output(a))
    }

    fn scale_output(&self, a: Vec<f64>) -> Vec<f64> {
        a.iter()
            .zip(&self.scaling.output_offset)
            .zip(&self.scaling.output_gain)
            .map(|((a, o), g)| o + g * a)
            .collect()
    }

    /// Exact `∂output/∂z` (`out_dim × in_dim`) by forward-mode propagation.
    pub fn input_jacobian(&self, z: &[f64]) -> Result<Matrix> {
        let tape = self.record(z, true)?;
        Ok(tape.jacobian.expect("tangents were recorded"))
    }

    /// Output and input Jacobian in one pass.
    pub fn forward_with_jacobian(&self, z: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        let tape = self.record(z, true)?;
        Ok((tape.output, tape.jacobian.expect("tangents were recorded")))
    }

    /// Evaluates the network and records what [`backward`](Self::backward)
    /// needs. With `tangents`, the input Jacobian is propagated alongside.
    pub fn record(&self, z: &[f64], tangents: bool) -> Result<Tape> {
        self.check_input(z)?;
        let n = self.input_dim();
        let sc = &self.scaling;
        let a0: Vec<f64> = (0..n).map(|i| (z[i] - sc.input_offset[i]) * sc.input_gain[i]).collect();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut d1s = Vec::with_capacity(self.layers.len());
        let mut d2s = Vec::with_capacity(self.layers.len());
        let mut tans = tangents.then(|| {
            let mut v = Vec::with_capacity(self.layers.len() + 1);
            v.push(Matrix::from_diagonal(&sc.input_gain));
            v
        });
        let mut pre_tans = tangents.then(|| Vec::with_capacity(self.layers.len()));
        activations.push(a0);

        for layer in &self.layers {
            let a_in = activations.last().expect("nonempty");
            let mut a = Vec::with_capacity(layer.out_dim);
            let mut d1 = Vec::with_capacity(layer.out_dim);
            let mut d2 = Vec::with_capacity(layer.out_dim);
            for k in 0..layer.out_dim {
                let s = dot(&layer.weights[k * layer.in_dim..(k + 1) * layer.in_dim], a_in) + layer.biases[k];
                let (v, g1, g2) = layer.activation.eval(s);
                a.push(v);
                d1.push(g1);
                d2.push(g2);
            }
            if let (Some(tans), Some(pre_tans)) = (tans.as_mut(), pre_tans.as_mut()) {
                let t_in: &Matrix = tans.last().expect("nonempty");
                let mut s_t = Matrix::zeros(layer.out_dim, n);
                for k in 0..layer.out_dim {
                    let row = s_t.row_mut(k);
                    for i in 0..layer.in_dim {
                        let w = layer.w(k, i);
                        if w != 0.0 {
                            for (r, t) in row.iter_mut().zip(t_in.row(i)) {
                                *r += w * t;
                            }
                        }
                    }
                }
                let mut t_out = s_t.clone();
                for k in 0..layer.out_dim {
                    t_out.row_mut(k).iter_mut().for_each(|x| *x *= d1[k]);
                }
                pre_tans.push(s_t);
                tans.push(t_out);
            }
            activations.push(a);
            d1s.push(d1);
            d2s.push(d2);
        }

        let output = self.scale_output(activations.last().expect("nonempty").clone());
        let jacobian = tans.as_ref().map(|t| {
            let mut j = t.last().expect("nonempty").clone();
            for (k, g) in sc.output_gain.iter().enumerate() {
                j.row_mut(k).iter_mut().for_each(|x| *x *= g);
            }
            j
        });
        Ok(Tape {
            activations,
            d1: d1s,
            d2: d2s,
            tangents: tans,
            pre_tangents: pre_tans,
            output,
            jacobian,
        })
    }

    /// Reverse pass over a recorded tape.
    ///
    /// `d_output` is `∂L/∂output`; `d_jacobian`, if given, is `∂L/∂J` for the
    /// input Jacobian `J` and requires a tape recorded with tangents.
    /// Parameter gradients are accumulated into `grad`; the return value is
    /// `∂L/∂z`, including the path through `J`.
    pub fn backward(
        &self,
        tape: &Tape,
        d_output: &[f64],
        d_jacobian: Option<&Matrix>,
        grad: &mut ParamGradient,
    ) -> Vec<f64> {
        assert_eq!(d_output.len(), self.output_dim());
        let sc = &self.scaling;
        let mut a_bar: Vec<f64> = d_output.iter().zip(&sc.output_gain).map(|(d, g)| d * g).collect();
        let mut t_bar: Option<Matrix> = d_jacobian.map(|dj| {
            assert_eq!((dj.rows(), dj.cols()), (self.output_dim(), self.input_dim()));
            let mut m = dj.clone();
            for (k, g) in sc.output_gain.iter().enumerate() {
                m.row_mut(k).iter_mut().for_each(|x| *x *= g);
            }
            m
        });
        let n = self.input_dim();

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a_in = &tape.activations[l];
            let d1 = &tape.d1[l];
            let d2 = &tape.d2[l];
            let mut s_bar = vec![0.0; layer.out_dim];
            let mut big_s_bar: Option<Matrix> = None;
            match &t_bar {
                None => {
                    for k in 0..layer.out_dim {
                        s_bar[k] = a_bar[k] * d1[k];
                    }
                }
                Some(tb) => {
                    let big_s = &tape
                        .pre_tangents
                        .as_ref()
                        .expect("Jacobian sensitivities need a tape with tangents")[l];
                    let mut sb = Matrix::zeros(layer.out_dim, n);
                    for k in 0..layer.out_dim {
                        s_bar[k] = a_bar[k] * d1[k] + d2[k] * dot(tb.row(k), big_s.row(k));
                        for (o, t) in sb.row_mut(k).iter_mut().zip(tb.row(k)) {
                            *o = t * d1[k];
                        }
                    }
                    big_s_bar = Some(sb);
                }
            }

            {
                let (wg, bg) = grad.layer_mut(l);
                for k in 0..layer.out_dim {
                    bg[k] += s_bar[k];
                    let row = &mut wg[k * layer.in_dim..(k + 1) * layer.in_dim];
                    for (w, a) in row.iter_mut().zip(a_in) {
                        *w += s_bar[k] * a;
                    }
                }
                if let Some(sb) = &big_s_bar {
                    let t_in = &tape.tangents.as_ref().expect("tangents")[l];
                    for k in 0..layer.out_dim {
                        let row = &mut wg[k * layer.in_dim..(k + 1) * layer.in_dim];
                        for (i, w) in row.iter_mut().enumerate() {
                            *w += dot(sb.row(k), t_in.row(i));
                        }
                    }
                }
            }

            let mut next_a_bar = vec![0.0; layer.in_dim];
            for k in 0..layer.out_dim {
                if s_bar[k] != 0.0 {
                    for (i, nb) in next_a_bar.iter_mut().enumerate() {
                        *nb += layer.w(k, i) * s_bar[k];
                    }
                }
            }
            a_bar = next_a_bar;
            if let Some(sb) = big_s_bar {
                let mut next = Matrix::zeros(layer.in_dim, n);
                for k in 0..layer.out_dim {
                    for i in 0..layer.in_dim {
                        let w = layer.w(k, i);
                        if w != 0.0 {
                            for (o, s) in next.row_mut(i).iter_mut().zip(sb.row(k)) {
                                *o += w * s;
                            }
                        }
                    }
                }
                t_bar = Some(next);
            }
        }

        a_bar.iter().zip(&sc.input_gain).map(|(a, g)| a * g).collect()
    }
}

/// Exact `(loss, ∂loss/∂θ)` for a loss built from the network output at `z`
/// and, when `with_jacobian` is set, its input Jacobian there.
pub fn loss_gradient<F>(net: &DenseNet, z: &[f64], with_jacobian: bool, loss: F) -> Result<(f64, ParamGradient)>
where
    F: FnOnce(&[f64], Option<&Matrix>) -> PointLoss,
{
    let tape = net.record(z, with_jacobian)?;
    let pl = loss(tape.output(), tape.jacobian());
    if !pl.value.is_finite() {
        return Err(Error::TrainingFault {
            sample: 0,
            reason: format!("loss evaluated to {}", pl.value),
        });
    }
    if pl.d_jacobian.is_some() && !with_jacobian {
        return Err(Error::config(
            "loss depends on the input Jacobian but it was not requested",
        ));
    }
    let mut grad = ParamGradient::zeros_like(net);
    net.backward(&tape, &pl.d_output, pl.d_jacobian.as_ref(), &mut grad);
    if !grad.is_finite() {
        return Err(Error::TrainingFault {
            sample: 0,
            reason: "non-finite parameter gradient".into(),
        });
    }
    Ok((pl.value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Vec<f64>, b: Vec<f64>, n_in: usize, n_out: usize) -> DenseNet {
        DenseNet::from_layers(vec![Layer::new(n_in, n_out, Activation::Linear, w, b).unwrap()]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = linear(Matrix::identity(3).as_slice().to_vec(), vec![0.0; 3], 3, 3);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let net = linear(vec![0.0; 6], vec![0.5, -1.5], 3, 2);
        assert_eq!(net.forward(&[7.0, -3.0, 1e3]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let net = linear(vec![0.0; 6], vec![0.0; 2], 3, 2);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(net.input_jacobian(&[1.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = Layer::new(2, 3, Activation::Tanh, vec![0.0; 6], vec![0.0; 3]).unwrap();
        let b = Layer::new(4, 1, Activation::Linear, vec![0.0; 4], vec![0.0]).unwrap();
        assert!(DenseNet::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn seeded_tanh_net_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = DenseNet::random(&[2, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let z = [0.5, -0.5];
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut h = [0.0; 4];
        for k in 0..4 {
            h[k] = (l0.weights()[2 * k] * z[0] + l0.weights()[2 * k + 1] * z[1] + l0.biases()[k]).tanh();
        }
        let mut expected = [0.0; 2];
        for o in 0..2 {
            expected[o] = l1.biases()[o];
            for k in 0..4 {
                expected[o] += l1.weights()[4 * o + k] * h[k];
            }
        }
        let got = net.forward(&z).unwrap();
        for o in 0..2 {
            assert!((got[o] - expected[o]).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_jacobian_is_weight_matrix() {
        let w = vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let net = linear(w.clone(), vec![0.1, 0.2], 3, 2);
        let j = net.input_jacobian(&[0.3, -7.0, 2.0]).unwrap();
        assert_eq!(j.as_slice(), w.as_slice());
    }

    #[test]
    fn tanh_slope_at_origin_is_one() {
        let hidden = Layer::new(1, 1, Activation::Tanh, vec![1.0], vec![0.0]).unwrap();
        let out = Layer::new(1, 1, Activation::Linear, vec![1.0], vec![0.0]).unwrap();
        let net = DenseNet::from_layers(vec![hidden, out]).unwrap();
        assert_eq!(net.input_jacobian(&[0.0]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn jacobian_matches_central_differences_with_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = DenseNet::random(&[3, 6, 5, 3], Activation::Sigmoid, &mut rng)
            .unwrap()
            .with_scaling(
                Scaling::identity(3, 3)
                    .standardize_inputs(&[70.0, 60.0, 0.5], &[2.0, 3.0, 0.2])
                    .with_output(&[1.0, 0.0, -1.0], &[0.5, 2.0, 1.0]),
            )
            .unwrap();
        let z = [71.0, 58.0, 0.6];
        let exact = net.input_jacobian(&z).unwrap();
        let fd = finite_diff::jacobian(|v| net.forward(v).unwrap(), &z, 1e-5);
        assert!(finite_diff::max_relative_error(exact.as_slice(), fd.as_slice(), finite_diff::DEFAULT_FLOOR) < 1e-6);
    }

    #[test]
    fn quadratic_loss_gradient_is_outer_product() {
        let w = vec![1.0, 2.0, -1.0, 0.5];
        let net = linear(w.clone(), vec![0.0, 0.0], 2, 2);
        let z = [0.3, -0.7];
        let (value, grad) = loss_gradient(&net, &z, false, |y, _| PointLoss {
            value: 0.5 * dot(y, y),
            d_output: y.to_vec(),
            d_jacobian: None,
        })
        .unwrap();
        let wz = [w[0] * z[0] + w[1] * z[1], w[2] * z[0] + w[3] * z[1]];
        assert!((value - 0.5 * (wz[0] * wz[0] + wz[1] * wz[1])).abs() < 1e-15);
        let (wg, bg) = grad.layer(0);
        for o in 0..2 {
            for i in 0..2 {
                assert!((wg[2 * o + i] - wz[o] * z[i]).abs() < 1e-15);
            }
            assert!((bg[o] - wz[o]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::random(&[2, 3, 2], Activation::Tanh, &mut rng).unwrap();
        let (v, g) = loss_gradient(&net, &[0.1, 0.2], true, |y, j| PointLoss {
            value: 4.0,
            d_output: vec![0.0; y.len()],
            d_jacobian: j.map(|j| Matrix::zeros(j.rows(), j.cols())),
        })
        .unwrap();
        assert_eq!(v, 4.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_loss_is_a_training_fault() {
        let net = linear(vec![1.0], vec![0.0], 1, 1);
        let r = loss_gradient(&net, &[1.0], false, |_, _| PointLoss {
            value: f64::NAN,
            d_output: vec![0.0],
            d_jacobian: None,
        });
        assert!(matches!(r, Err(Error::TrainingFault { .. })));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenseNet::random(&[3, 4, 3], Activation::Tanh, &mut rng).unwrap();
        let p: Vec<f64> = (0..net.param_count()).map(|i| i as f64 * 0.01).collect();
        net.set_params(&p).unwrap();
        assert_eq!(net.params(), p);
        assert!(net.set_params(&p[1..]).is_err());
    }
}
