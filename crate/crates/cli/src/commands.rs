use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtnn_core::checkpoint::{Bundle, LoadedModel};
use mtnn_core::evaluation::{comparison_table, ComparisonTable, Predictor};
use mtnn_core::mpc::{run_closed_loop, ClosedLoopTrace};
use mtnn_core::plants::{excite, load_csv, to_transitions, write_csv, ColumnRoles};
use mtnn_core::training::{
    baseline_loss, chronological_holdout, init_baseline, init_taylor, loss_breakdown, train, train_baseline,
};
use mtnn_core::{LossMode, ModelLayout, MonoSpec, NetShape, Plant, TimeSeries, TrainConfig, TrainHistory, Transition};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DataConfig, ExperimentConfig, Variant};

const NOISE_STREAM: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// Written next to the generated CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub data: DataConfig,
    pub columns: ColumnRoles,
    pub n_train: usize,
    pub n_test: usize,
    pub train_file: String,
    pub test_file: String,
}

impl DataManifest {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let path = cfg.data_dir().join("manifest.json");
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {} (run gen-data first)", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn load_split(&self, cfg: &ExperimentConfig, file: &str) -> Result<Vec<Transition>> {
        let path = cfg.data_dir().join(file);
        let series = load_csv(&path, &self.columns).with_context(|| format!("loading {}", path.display()))?;
        Ok(to_transitions(&series)?)
    }

    pub fn train_set(&self, cfg: &ExperimentConfig) -> Result<Vec<Transition>> {
        self.load_split(cfg, &self.train_file)
    }

    pub fn test_set(&self, cfg: &ExperimentConfig) -> Result<Vec<Transition>> {
        self.load_split(cfg, &self.test_file)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn full_series(data: &DataConfig, seed: u64) -> Result<TimeSeries> {
    Ok(match data {
        DataConfig::Hvac(b) => b.generate(seed)?,
        DataConfig::Tclab(t) => {
            let plant = t.plant.clone().validated()?;
            let n = t.n_train + t.n_test + 2;
            excite(&plant, &t.initial_temps, &t.excitation, n, seed)?
                .with_state_noise(t.noise_sigma, seed ^ NOISE_STREAM)?
        }
        DataConfig::Csv(c) => load_csv(&c.path, &c.columns).with_context(|| format!("loading {}", c.path.display()))?,
    })
}

/// Generates (or ingests) the data set and writes `data/train.csv`,
/// `data/test.csv` and `data/manifest.json`. The training file holds the
/// first `n_train` transitions and the test file the last `n_test`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<DataManifest> {
    let data = cfg.data()?;
    let (n_train, n_test) = data.split_sizes();
    if n_train < 2 || n_test == 0 {
        bail!("data needs at least 2 training and 1 test transition");
    }
    let series = full_series(data, cfg.seed)?;
    let len = series.len();
    if len < n_train + n_test + 2 {
        bail!(
            "series has {len} samples; {n_train} + {n_test} transitions need at least {}",
            n_train + n_test + 2
        );
    }
    let dir = cfg.data_dir();
    create_dir(&dir)?;
    write_csv(&series.slice(0..n_train + 2), &dir.join("train.csv"))?;
    write_csv(&series.slice(len - n_test - 2..len), &dir.join("test.csv"))?;
    let manifest = DataManifest {
        seed: cfg.seed,
        data: data.clone(),
        columns: ColumnRoles::for_series(&series),
        n_train,
        n_test,
        train_file: "train.csv".into(),
        test_file: "test.csv".into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub learning_rate: f64,
    /// One-step validation MSE; `None` if training diverged.
    pub validation_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mode: LossMode,
    pub learning_rate: f64,
    pub sweep: Vec<SweepPoint>,
    pub best_epoch: usize,
    pub train_mse: f64,
    pub train_mono: f64,
    pub train_convex: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub variant: Variant,
    pub result: std::result::Result<VariantSummary, String>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub outcomes: Vec<TrainOutcome>,
}

impl TrainReport {
    pub fn all_ok(&self) -> bool {
        self.outcomes.iter().all(|o| o.result.is_ok())
    }
}

enum Trained {
    Taylor(mtnn_core::MtnnModel),
    Direct(mtnn_core::DenseNet),
}

fn layout(cfg: &ExperimentConfig, v: Variant, nx: usize, nu: usize) -> Result<ModelLayout> {
    let mono_spec = match &cfg.model.mono_spec {
        Some(s) => s.clone(),
        None if v.needs_spec() => bail!("variant {v} needs `model.mono_spec`"),
        None => MonoSpec::free(nx, nx + nu),
    };
    Ok(ModelLayout {
        nx,
        nu,
        shape: NetShape {
            hidden: cfg.model.hidden.clone(),
            activation: cfg.model.activation,
        },
        mono_spec,
        order: v.order().expect("Taylor variant"),
        gate_mode: v.gate_mode(),
    })
}

fn fit_once(
    cfg: &ExperimentConfig,
    layout: Option<&ModelLayout>,
    data: &[Transition],
    tc: &TrainConfig,
) -> mtnn_core::Result<(Trained, TrainHistory)> {
    Ok(match layout {
        None => {
            let net = init_baseline(&cfg.model.baseline_hidden, cfg.model.activation, data, cfg.seed)?;
            let (net, h) = train_baseline(&net, data, tc)?;
            (Trained::Direct(net), h)
        }
        Some(l) => {
            let m = init_taylor(l, data, cfg.seed)?;
            let (m, h) = train(&m, data, tc)?;
            (Trained::Taylor(m), h)
        }
    })
}

fn validation_mse(model: &Trained, val: &[Transition]) -> Result<f64> {
    Ok(match model {
        Trained::Direct(n) => baseline_loss(n, val)?,
        Trained::Taylor(m) => loss_breakdown(m, val, &TrainConfig::default())?.mse,
    })
}

fn train_variant(cfg: &ExperimentConfig, v: Variant, data: &[Transition]) -> Result<VariantSummary> {
    let mode = v.loss_mode(cfg.train.soft_convexity);
    let layout = match v.order() {
        Some(_) => {
            let (nx, n) = (data[0].x_next.len(), data[0].z_curr.len());
            Some(layout(cfg, v, nx, n - nx)?)
        }
        None => None,
    };
    let (fit_part, val_part) = chronological_holdout(data, cfg.train.validation_fraction)?;
    let mut sweep = Vec::new();
    for &lr in &cfg.train.learning_rates {
        let tc = cfg.train.train_config(lr, mode, cfg.seed);
        let score = match fit_once(cfg, layout.as_ref(), fit_part, &tc) {
            Ok((m, _)) => Some(validation_mse(&m, val_part)?).filter(|s| s.is_finite()),
            Err(mtnn_core::Error::Diverged { .. } | mtnn_core::Error::TrainingFault { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        sweep.push(SweepPoint {
            learning_rate: lr,
            validation_mse: score,
        });
    }
    let learning_rate = sweep
        .iter()
        .filter_map(|p| p.validation_mse.map(|s| (p.learning_rate, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(lr, _)| lr)
        .context("training diverged at every learning rate")?;
    let tc = cfg.train.train_config(learning_rate, mode, cfg.seed);
    let (model, history) = fit_once(cfg, layout.as_ref(), data, &tc)?;
    let best = history.best();
    let summary = VariantSummary {
        variant: v,
        mode,
        learning_rate,
        sweep,
        best_epoch: history.best_epoch,
        train_mse: best.mse,
        train_mono: best.mono,
        train_convex: best.convex,
    };
    let meta = json!({
        "seed": cfg.seed,
        "train": tc_metadata(&tc),
        "summary": summary,
    });
    let bundle = match &model {
        Trained::Taylor(m) => Bundle::taylor(v.name(), m),
        Trained::Direct(n) => Bundle::direct(v.name(), n),
    }
    .with_metadata(meta);
    bundle.save(&cfg.bundle_path(v))?;
    fs::write(cfg.history_path(v), history.to_csv())?;
    Ok(summary)
}

fn tc_metadata(tc: &TrainConfig) -> serde_json::Value {
    json!({
        "learning_rate": tc.learning_rate,
        "epochs": tc.epochs,
        "batch_size": tc.batch_size,
        "mode": tc.mode,
        "penalty": tc.penalty,
        "beta1": tc.beta1,
        "beta2": tc.beta2,
        "epsilon": tc.epsilon,
        "weight_decay": tc.weight_decay,
    })
}

/// Trains every requested variant (in parallel), writing
/// `models/<variant>.json` and `models/<variant>_history.csv`, then
/// `models/manifest.json`. A variant that fails is reported without
/// stopping the others.
pub fn cmd_train(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<TrainReport> {
    let manifest = DataManifest::load(cfg)?;
    let data = manifest.train_set(cfg)?;
    create_dir(&cfg.output_dir.join("models"))?;
    let outcomes: Vec<TrainOutcome> = variants
        .par_iter()
        .map(|&v| TrainOutcome {
            variant: v,
            result: train_variant(cfg, v, &data).map_err(|e| format!("{e:#}")),
        })
        .collect();
    let entries: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| match &o.result {
            Ok(s) => {
                json!({"variant": o.variant, "status": "ok", "bundle": format!("{}.json", o.variant), "summary": s})
            }
            Err(e) => json!({"variant": o.variant, "status": "failed", "error": e}),
        })
        .collect();
    write_json(
        &cfg.output_dir.join("models").join("manifest.json"),
        &json!({"seed": cfg.seed, "model": cfg.model, "train": cfg.train, "variants": entries}),
    )?;
    Ok(TrainReport { outcomes })
}

pub fn load_bundle(path: &Path) -> Result<LoadedModel> {
    let b = Bundle::load(path).with_context(|| format!("loading bundle {}", path.display()))?;
    Ok(b.load_model()?)
}

#[derive(Debug)]
pub struct EvalReport {
    pub table: ComparisonTable,
    pub missing: Vec<Variant>,
    pub table_path: PathBuf,
}

/// Rolls every available bundle over the test set and writes
/// `eval/table.csv` in config variant order. Missing bundles are listed and
/// skipped.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let manifest = DataManifest::load(cfg)?;
    let test = manifest.test_set(cfg)?;
    let mut missing = Vec::new();
    let mut loaded = Vec::new();
    for &v in &cfg.variants {
        let path = cfg.bundle_path(v);
        if !path.exists() {
            missing.push(v);
            continue;
        }
        loaded.push((v, load_bundle(&path)?));
    }
    if loaded.is_empty() {
        bail!("no model bundles found in {}", cfg.output_dir.join("models").display());
    }
    let entries: Vec<(&str, &dyn Predictor)> = loaded.iter().map(|(v, m)| (v.name(), m.as_predictor())).collect();
    let table = comparison_table(&entries, &test, cfg.eval.steps)?;
    let dir = cfg.output_dir.join("eval");
    create_dir(&dir)?;
    let table_path = dir.join("table.csv");
    fs::write(&table_path, table.to_csv())?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "seed": cfg.seed,
            "steps": cfg.eval.steps,
            "test_transitions": test.len(),
            "evaluated": loaded.iter().map(|(v, _)| *v).collect::<Vec<_>>(),
            "missing": missing,
        }),
    )?;
    Ok(EvalReport {
        table,
        missing,
        table_path,
    })
}

#[derive(Debug)]
pub struct MpcReport {
    pub trace: ClosedLoopTrace,
    pub trace_path: PathBuf,
}

fn plant_of(data: &DataConfig) -> Result<Box<dyn Plant + Sync>> {
    Ok(match data {
        DataConfig::Hvac(b) => Box::new(b.plant.clone().validated()?),
        DataConfig::Tclab(t) => Box::new(t.plant.clone().validated()?),
        DataConfig::Csv(_) => bail!("closed-loop runs need a simulated plant, not recorded data"),
    })
}

/// Closed loop of the configured plant under MPC with a trained Taylor
/// bundle; writes `mpc/trace.csv`.
pub fn cmd_mpc(cfg: &ExperimentConfig) -> Result<MpcReport> {
    let sec = cfg.mpc()?;
    let plant = plant_of(cfg.data()?)?;
    let path = sec.bundle.clone().unwrap_or_else(|| cfg.bundle_path(sec.variant));
    let model = match load_bundle(&path)? {
        LoadedModel::Taylor(m) => m,
        LoadedModel::Direct(_) => bail!("{} holds a direct network; MPC needs a Taylor model", path.display()),
    };
    let trace = run_closed_loop(plant.as_ref(), &model, &sec.controller, &sec.initial_state, sec.steps)?;
    let dir = cfg.output_dir.join("mpc");
    create_dir(&dir)?;
    let trace_path = dir.join("trace.csv");
    fs::write(&trace_path, trace.to_csv())?;
    let faults: Vec<_> = trace
        .rows
        .iter()
        .enumerate()
        .filter_map(|(k, r)| r.fault.as_ref().map(|f| json!({"step": k, "fault": f})))
        .collect();
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "seed": cfg.seed,
            "bundle": path.file_name().map(|f| f.to_string_lossy().into_owned()),
            "mpc": sec,
            "final_state": trace.final_state,
            "faults": faults,
        }),
    )?;
    Ok(MpcReport { trace, trace_path })
}
