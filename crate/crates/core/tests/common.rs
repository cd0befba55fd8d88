#![allow(dead_code)]

use mtnn_core::plants::to_transitions;
use mtnn_core::{Activation, AugState, GateMode, ModelLayout, NetShape, TaylorOrder, TimeSeries, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn transition(z_prev: &[f64], z_curr: &[f64], x_next: &[f64]) -> Transition {
    Transition {
        z_prev: AugState::from_vec(z_prev.to_vec(), x_next.len()).unwrap(),
        z_curr: AugState::from_vec(z_curr.to_vec(), x_next.len()).unwrap(),
        x_next: x_next.to_vec(),
    }
}

/// `x[k+1] = x[k] + 0.5 (u[k] - u[k-1])` under random inputs.
pub fn linear_series(n: usize, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let mut x = vec![vec![0.3]];
    for k in 1..n {
        let du = if k >= 2 { u[k - 1][0] - u[k - 2][0] } else { 0.0 };
        x.push(vec![x[k - 1][0] + 0.5 * du]);
    }
    TimeSeries {
        t: (0..n).map(|k| k as f64).collect(),
        x,
        u,
        state_names: vec!["x".into()],
        input_names: vec!["u".into()],
    }
}

pub fn linear_transitions(n: usize, seed: u64) -> Vec<Transition> {
    to_transitions(&linear_series(n, seed)).unwrap()
}

pub fn layout(nx: usize, nu: usize, spec: &str, order: TaylorOrder, gate: GateMode) -> ModelLayout {
    ModelLayout {
        nx,
        nu,
        shape: NetShape {
            hidden: vec![6],
            activation: Activation::Tanh,
        },
        mono_spec: spec.parse().unwrap(),
        order,
        gate_mode: gate,
    }
}
