//! TOML experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mtnn_core::mpc::MpcConfig;
use mtnn_core::plants::{ColumnRoles, Excitation, HvacBenchmark, TcLabPlant};
use mtnn_core::{Activation, GateMode, LossMode, MonoSpec, PenaltyWeights, TaylorOrder, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Taylor1,
    Taylor2,
    Mono1,
    Mono2,
    Soft1,
    Soft2,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Taylor1,
        Variant::Taylor2,
        Variant::Mono1,
        Variant::Mono2,
        Variant::Soft1,
        Variant::Soft2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Taylor1 => "taylor1",
            Variant::Taylor2 => "taylor2",
            Variant::Mono1 => "mono1",
            Variant::Mono2 => "mono2",
            Variant::Soft1 => "soft1",
            Variant::Soft2 => "soft2",
        }
    }

    /// `None` for the direct baseline.
    pub fn order(self) -> Option<TaylorOrder> {
        match self {
            Variant::Baseline => None,
            Variant::Taylor1 | Variant::Mono1 | Variant::Soft1 => Some(TaylorOrder::First),
            Variant::Taylor2 | Variant::Mono2 | Variant::Soft2 => Some(TaylorOrder::Second),
        }
    }

    pub fn gate_mode(self) -> GateMode {
        match self {
            Variant::Mono1 | Variant::Mono2 => GateMode::Architecture,
            Variant::Soft1 | Variant::Soft2 => GateMode::Soft,
            _ => GateMode::None,
        }
    }

    pub fn needs_spec(self) -> bool {
        self.gate_mode() != GateMode::None
    }

    pub fn loss_mode(self, soft_convexity: bool) -> LossMode {
        match self {
            Variant::Soft1 => LossMode::MonoSoft,
            Variant::Soft2 if soft_convexity => LossMode::MonoSoftConvex,
            Variant::Soft2 => LossMode::MonoSoft,
            _ => LossMode::Mse,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .with_context(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant `{s}` (expected one of {})", names.join(", "))
            })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_variant_list(s: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        bail!("empty variant list");
    }
    Ok(v)
}

/// Two-heater lab data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TclabData {
    pub plant: TcLabPlant,
    pub initial_temps: Vec<f64>,
    pub excitation: Excitation,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
}

impl Default for TclabData {
    fn default() -> Self {
        Self {
            plant: TcLabPlant::default(),
            initial_temps: vec![23.0, 23.0],
            excitation: Excitation::tclab_default(),
            n_train: 250,
            n_test: 100,
            noise_sigma: 0.05,
        }
    }
}

/// Recorded log with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvData {
    pub path: PathBuf,
    pub columns: ColumnRoles,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    Hvac(HvacBenchmark),
    Tclab(TclabData),
    Csv(CsvData),
}

impl DataConfig {
    pub fn split_sizes(&self) -> (usize, usize) {
        match self {
            DataConfig::Hvac(b) => (b.n_train, b.n_test),
            DataConfig::Tclab(t) => (t.n_train, t.n_test),
            DataConfig::Csv(c) => (c.n_train, c.n_test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// One string per state row; required by the mono and soft variants.
    pub mono_spec: Option<MonoSpec>,
    pub baseline_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Tanh,
            mono_spec: None,
            baseline_hidden: vec![32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Candidates tried on a chronological validation holdout; the winner
    /// is retrained on the full training set.
    pub learning_rates: Vec<f64>,
    pub validation_fraction: f64,
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub divergence_threshold: f64,
    pub penalty: PenaltyWeights,
    /// Adds the convexity penalty to `soft2`.
    pub soft_convexity: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rates: vec![1e-2, 3e-3, 1e-3, 3e-4],
            validation_fraction: 0.2,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            divergence_threshold: t.divergence_threshold,
            penalty: t.penalty,
            soft_convexity: false,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, learning_rate: f64, mode: LossMode, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            mode,
            penalty: self.penalty.clone(),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            divergence_threshold: self.divergence_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { steps: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    /// Variant whose bundle drives the controller.
    pub variant: Variant,
    /// Explicit bundle file; defaults to the variant's bundle in the output
    /// directory.
    #[serde(default)]
    pub bundle: Option<PathBuf>,
    pub initial_state: Vec<f64>,
    pub steps: usize,
    #[serde(default)]
    pub controller: MpcConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub mpc: Option<MpcSection>,
}

fn default_variants() -> Vec<Variant> {
    vec![
        Variant::Baseline,
        Variant::Taylor1,
        Variant::Mono1,
        Variant::Soft1,
        Variant::Taylor2,
    ]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(DataConfig::Csv(c)) = &mut cfg.data {
            c.path = base.join(&c.path);
        }
        if let Some(m) = &mut cfg.mpc {
            if let Some(b) = &mut m.bundle {
                *b = base.join(&*b);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            bail!("`variants` must list at least one model variant");
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            bail!("`model.hidden` needs at least one nonzero layer width");
        }
        if self.train.learning_rates.is_empty()
            || self.train.learning_rates.iter().any(|&l| !(l > 0.0 && l.is_finite()))
        {
            bail!("`train.learning_rates` must be a nonempty list of positive rates");
        }
        if !(0.0 < self.train.validation_fraction && self.train.validation_fraction < 1.0) {
            bail!("`train.validation_fraction` must lie in (0, 1)");
        }
        if self.eval.steps == 0 {
            bail!("`eval.steps` must be at least 1");
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().context("config is missing the `data` section")
    }

    pub fn mpc(&self) -> Result<&MpcSection> {
        self.mpc.as_ref().context("config is missing the `mpc` section")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn bundle_path(&self, v: Variant) -> PathBuf {
        self.output_dir.join("models").join(format!("{v}.json"))
    }

    pub fn history_path(&self, v: Variant) -> PathBuf {
        self.output_dir.join("models").join(format!("{v}_history.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("mono3".parse::<Variant>().is_err());
        assert_eq!(
            parse_variant_list("taylor1, soft1").unwrap(),
            vec![Variant::Taylor1, Variant::Soft1]
        );
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("output_dir = \"out\"\n").unwrap();
        assert_eq!(cfg.eval.steps, 5);
        assert_eq!(cfg.train.learning_rates, vec![1e-2, 3e-3, 1e-3, 3e-4]);
        assert!(cfg.data().unwrap_err().to_string().contains("`data`"));
    }

    #[test]
    fn data_sections_parse() {
        let cfg = ExperimentConfig::from_toml(
            r#"
output_dir = "x"
variants = ["taylor1", "mono2"]
[data]
kind = "hvac"
n_train = 20
[data.plant]
capacitance = 400.0
[model]
mono_spec = ["++."]
"#,
        )
        .unwrap();
        match cfg.data().unwrap() {
            DataConfig::Hvac(b) => {
                assert_eq!(b.n_train, 20);
                assert_eq!(b.plant.capacitance, 400.0);
                assert_eq!(b.n_test, 100);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.model.mono_spec.unwrap(), "++.".parse().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("output_dir = \"x\"\n[train]\nepoch = 3\n").is_err());
    }
}
