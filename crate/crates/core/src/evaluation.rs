//! Multi-step open-loop rollout and the metrics used to compare models.

use crate::error::{Error, Result};
use crate::net::DenseNet;
use crate::plants::{Plant, Transition};
use crate::taylor::MtnnModel;

/// Anything that maps `(z_curr, z_prev)` to a next-state estimate.
pub trait Predictor {
    fn nx(&self) -> usize;
    /// Length of the augmented state.
    fn n(&self) -> usize;
    fn predict_next(&self, z_curr: &[f64], z_prev: &[f64]) -> Result<Vec<f64>>;
}

impl Predictor for MtnnModel {
    fn nx(&self) -> usize {
        MtnnModel::nx(self)
    }

    fn n(&self) -> usize {
        MtnnModel::n(self)
    }

    fn predict_next(&self, z_curr: &[f64], z_prev: &[f64]) -> Result<Vec<f64>> {
        self.predict(z_curr, z_prev)
    }
}

/// Direct model: the network maps `z_curr` to the next state and ignores
/// `z_prev`.
impl Predictor for DenseNet {
    fn nx(&self) -> usize {
        self.output_dim()
    }

    fn n(&self) -> usize {
        self.input_dim()
    }

    fn predict_next(&self, z_curr: &[f64], _z_prev: &[f64]) -> Result<Vec<f64>> {
        self.forward(z_curr)
    }
}

/// Wraps a simulator as a predictor.
pub struct PlantModel<'a, P: ?Sized>(pub &'a P);

impl<P: Plant + ?Sized> Predictor for PlantModel<'_, P> {
    fn nx(&self) -> usize {
        self.0.nx()
    }

    fn n(&self) -> usize {
        self.0.nx() + self.0.nu()
    }

    fn predict_next(&self, z_curr: &[f64], _z_prev: &[f64]) -> Result<Vec<f64>> {
        let nx = self.0.nx();
        self.0.step(&z_curr[..nx], &z_curr[nx..])
    }
}

/// Predictions and targets of one horizon step over all origins.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub predicted: Vec<Vec<f64>>,
    pub actual: Vec<Vec<f64>>,
}

impl StepOutcome {
    /// R², averaged over state components.
    pub fn r2(&self) -> Result<f64> {
        r2_multi(&self.predicted, &self.actual)
    }

    /// RMSE in state units, averaged over state components.
    pub fn rmse(&self) -> Result<f64> {
        rmse_multi(&self.predicted, &self.actual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `steps[i - 1]` holds the `i`-step-ahead outcome.
    pub steps: Vec<StepOutcome>,
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// 1-based step accessor.
    pub fn step(&self, i: usize) -> &StepOutcome {
        &self.steps[i - 1]
    }
}

fn check_chain(series: &[Transition]) -> Result<()> {
    for (k, w) in series.windows(2).enumerate() {
        if w[0].z_curr != w[1].z_prev || w[0].x_next != w[1].z_curr.x() {
            return Err(Error::config(format!(
                "transitions {k} and {} are not consecutive samples",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Open-loop rollout of `steps` predictions from every origin that has
/// targets for the whole horizon.
///
/// From origin `k` the first prediction uses the measured pair of
/// `series[k]`. Later predictions feed the predicted state back while the
/// inputs come from the measurements; prediction `i` is compared with
/// `series[k + i - 1].x_next`.
pub fn rollout<M: Predictor + ?Sized>(model: &M, series: &[Transition], steps: usize) -> Result<RolloutResult> {
    if steps == 0 {
        return Err(Error::config("rollout horizon must be at least 1"));
    }
    if series.len() < steps {
        return Err(Error::config(format!(
            "{} transitions ({} samples) cannot support a {steps}-step rollout",
            series.len(),
            series.len() + 2
        )));
    }
    let nx = model.nx();
    if let Some(t) = series.first() {
        if t.z_curr.len() != model.n() || t.x_next.len() != nx {
            return Err(Error::shape("model does not match the series dimensions"));
        }
    }
    check_chain(series)?;
    let origins = series.len() - steps + 1;
    let mut out: Vec<StepOutcome> = (0..steps)
        .map(|_| StepOutcome {
            predicted: Vec::with_capacity(origins),
            actual: Vec::with_capacity(origins),
        })
        .collect();
    for k in 0..origins {
        let mut z_prev = series[k].z_prev.as_slice().to_vec();
        let mut z_curr = series[k].z_curr.as_slice().to_vec();
        for (i, slot) in out.iter_mut().enumerate() {
            let x_hat = model.predict_next(&z_curr, &z_prev)?;
            let target = &series[k + i];
            slot.predicted.push(x_hat.clone());
            slot.actual.push(target.x_next.clone());
            if i + 1 < steps {
                let u_next = series[k + i + 1].z_curr.u();
                z_prev = std::mem::take(&mut z_curr);
                z_curr = x_hat.into_iter().chain(u_next.iter().copied()).collect();
            }
        }
    }
    Ok(RolloutResult { steps: out })
}

/// `1 - SS_res / SS_tot`.
pub fn r2(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::shape("prediction and target lengths differ"));
    }
    if actual.len() < 2 {
        return Err(Error::UndefinedMetric("R² needs at least two points".into()));
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::shape("prediction and target lengths differ"));
    }
    if actual.is_empty() {
        return Err(Error::UndefinedMetric("RMSE of an empty series".into()));
    }
    let ss: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((ss / actual.len() as f64).sqrt())
}

fn per_component(pred: &[Vec<f64>], actual: &[Vec<f64>], metric: fn(&[f64], &[f64]) -> Result<f64>) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::shape("prediction and target lengths differ"));
    }
    let dim = actual.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::UndefinedMetric("no components".into()));
    }
    let mut acc = 0.0;
    for j in 0..dim {
        let p: Vec<f64> = pred.iter().map(|v| v[j]).collect();
        let a: Vec<f64> = actual.iter().map(|v| v[j]).collect();
        acc += metric(&p, &a)?;
    }
    Ok(acc / dim as f64)
}

/// [`r2`] per state component, averaged.
pub fn r2_multi(pred: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<f64> {
    per_component(pred, actual, r2)
}

/// [`rmse`] per state component, averaged.
pub fn rmse_multi(pred: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<f64> {
    per_component(pred, actual, rmse)
}

/// Per-step R² and RMSE for several named models.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub variants: Vec<String>,
    /// `r2[v][i - 1]`: variant `v` at step `i`.
    pub r2: Vec<Vec<f64>>,
    pub rmse: Vec<Vec<f64>>,
}

impl ComparisonTable {
    pub fn steps(&self) -> usize {
        self.r2.first().map_or(0, Vec::len)
    }

    pub fn r2_of(&self, variant: &str, step: usize) -> Option<f64> {
        let v = self.variants.iter().position(|n| n == variant)?;
        self.r2[v].get(step.checked_sub(1)?).copied()
    }

    pub fn rmse_of(&self, variant: &str, step: usize) -> Option<f64> {
        let v = self.variants.iter().position(|n| n == variant)?;
        self.rmse[v].get(step.checked_sub(1)?).copied()
    }

    /// `metric,step,<variants..>` with R² rows first, 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut s = format!("metric,step,{}\n", self.variants.join(","));
        for (name, cells) in [("R2", &self.r2), ("RMSE", &self.rmse)] {
            for i in 0..self.steps() {
                let row: Vec<String> = cells.iter().map(|c| format!("{:.4}", c[i])).collect();
                s.push_str(&format!("{name},{},{}\n", i + 1, row.join(",")));
            }
        }
        s
    }
}

pub fn comparison_table(
    models: &[(&str, &dyn Predictor)],
    series: &[Transition],
    steps: usize,
) -> Result<ComparisonTable> {
    let mut table = ComparisonTable {
        variants: Vec::new(),
        r2: Vec::new(),
        rmse: Vec::new(),
    };
    for (name, model) in models {
        let res = rollout(*model, series, steps)?;
        table.variants.push((*name).to_string());
        table
            .r2
            .push(res.steps.iter().map(StepOutcome::r2).collect::<Result<_>>()?);
        table
            .rmse
            .push(res.steps.iter().map(StepOutcome::rmse).collect::<Result<_>>()?);
    }
    Ok(table)
}
