//! Synthetic thermal plants, excitation signals and dataset handling.
//!
//! Two simulators stand in for real systems: a single-zone HVAC room
//! (state: room temperature; inputs: supply-air temperature and mass flow)
//! and a two-heater, two-sensor thermal lab (states: both sensor
//! temperatures; inputs: both heater powers in %). Both are explicit Euler
//! discretizations of linear heat balances, so their monotone structure can
//! be checked analytically.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taylor::AugState;

pub trait Plant {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    /// Sampling interval in seconds.
    fn dt(&self) -> f64;
    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;
    fn state_names(&self) -> Vec<String>;
    fn input_names(&self) -> Vec<String>;
}

/// Single-zone room: `T' = T + (Δt/C)(ṁ c_p (T_s − T) + k_a (T_amb − T))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HvacPlant {
    /// Thermal capacitance C, kJ/°F.
    pub capacitance: f64,
    /// Supply-air heat coefficient c_p, kJ/(kg·°F).
    pub air_heat_capacity: f64,
    /// Envelope coupling k_a, kW/°F.
    pub ambient_coupling: f64,
    /// °F.
    pub ambient_temp: f64,
    /// Seconds.
    pub dt: f64,
    /// Largest admissible mass flow, kg/s; bounds the monotonicity check.
    pub max_flow: f64,
}

impl Default for HvacPlant {
    fn default() -> Self {
        Self {
            capacitance: 600.0,
            air_heat_capacity: 0.56,
            ambient_coupling: 0.1,
            ambient_temp: 85.0,
            dt: 300.0,
            max_flow: 1.5,
        }
    }
}

impl HvacPlant {
    /// Validates parameters and that the update is increasing in `T` and
    /// nondecreasing in `T_s` for every flow in `[0, max_flow]`.
    pub fn validated(self) -> Result<Self> {
        if !(self.capacitance > 0.0 && self.air_heat_capacity > 0.0) {
            return Err(Error::config("HVAC plant needs C > 0 and c_p > 0"));
        }
        if !(self.ambient_coupling >= 0.0 && self.max_flow >= 0.0 && self.dt > 0.0) {
            return Err(Error::config("HVAC plant needs k_a ≥ 0, max_flow ≥ 0, dt > 0"));
        }
        let r = self.dt / self.capacitance;
        for k in 0..=64 {
            let mdot = self.max_flow * k as f64 / 64.0;
            let d_temp = 1.0 - r * (mdot * self.air_heat_capacity + self.ambient_coupling);
            let d_supply = r * mdot * self.air_heat_capacity;
            if !(d_temp > 0.0 && d_supply >= 0.0) {
                return Err(Error::config(format!(
                    "HVAC update is not monotone at ṁ = {mdot:.3} (∂T'/∂T = {d_temp:.3})"
                )));
            }
        }
        Ok(self)
    }

    pub fn step_temperature(&self, temp: f64, supply: f64, mdot: f64) -> Result<f64> {
        if mdot < 0.0 {
            return Err(Error::config(format!("negative mass flow {mdot}")));
        }
        let q = mdot * self.air_heat_capacity * (supply - temp) + self.ambient_coupling * (self.ambient_temp - temp);
        Ok(temp + self.dt / self.capacitance * q)
    }

    /// Supply temperature whose equilibrium at flow `mdot` is `target`.
    pub fn equilibrium_supply(&self, target: f64, mdot: f64) -> f64 {
        target + self.ambient_coupling * (target - self.ambient_temp) / (mdot * self.air_heat_capacity)
    }
}

impl Plant for HvacPlant {
    fn nx(&self) -> usize {
        1
    }

    fn nu(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dims(self, x, u)?;
        Ok(vec![self.step_temperature(x[0], u[0], u[1])?])
    }

    fn state_names(&self) -> Vec<String> {
        vec!["T".into()]
    }

    fn input_names(&self) -> Vec<String> {
        vec!["Ts".into(), "mdot".into()]
    }
}

/// Two heaters, two sensors, symmetric conductive coupling:
///
/// ```text
/// T_i' = T_i + Δt (α_i Q_i − h_i (T_i − T_amb) + c (T_j − T_i) − ε ((T_i+273.15)⁴ − (T_amb+273.15)⁴))
/// ```
///
/// `ε = 0` (the default) keeps the plant linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcLabPlant {
    /// °C·s⁻¹ per % heater power.
    pub heater_gain: [f64; 2],
    /// s⁻¹.
    pub heat_loss: [f64; 2],
    /// s⁻¹.
    pub coupling: f64,
    /// Optional quartic radiation coefficient, s⁻¹·K⁻³.
    pub radiation: f64,
    /// °C.
    pub ambient_temp: f64,
    /// Seconds.
    pub dt: f64,
}

impl Default for TcLabPlant {
    fn default() -> Self {
        Self {
            heater_gain: [0.01, 0.01],
            heat_loss: [0.0125, 0.0125],
            coupling: 0.005,
            radiation: 0.0,
            ambient_temp: 23.0,
            dt: 15.0,
        }
    }
}

impl TcLabPlant {
    pub const MAX_CHECKED_TEMP: f64 = 150.0;

    /// Validates coefficients and that each next temperature is increasing in
    /// its own previous value up to [`Self::MAX_CHECKED_TEMP`].
    pub fn validated(self) -> Result<Self> {
        let all = [
            self.heater_gain[0],
            self.heater_gain[1],
            self.heat_loss[0],
            self.heat_loss[1],
            self.coupling,
            self.radiation,
        ];
        if all.iter().any(|&c| !(c >= 0.0)) || !(self.dt > 0.0) {
            return Err(Error::config("thermal-lab coefficients must be nonnegative"));
        }
        let tk = Self::MAX_CHECKED_TEMP + 273.15;
        for i in 0..2 {
            let self_slope = 1.0 - self.dt * (self.heat_loss[i] + self.coupling + 4.0 * self.radiation * tk.powi(3));
            if !(self_slope > 0.0) {
                return Err(Error::config(format!(
                    "sensor {} update is not increasing in its own temperature",
                    i + 1
                )));
            }
        }
        Ok(self)
    }

    pub fn step_pair(&self, temps: [f64; 2], heaters: [f64; 2]) -> Result<[f64; 2]> {
        if let Some(q) = heaters.iter().find(|q| !(0.0..=100.0).contains(*q)) {
            return Err(Error::config(format!("heater power {q} outside [0, 100] %")));
        }
        let ta_k = self.ambient_temp + 273.15;
        let mut next = [0.0; 2];
        for i in 0..2 {
            let j = 1 - i;
            let rad = if self.radiation > 0.0 {
                self.radiation * ((temps[i] + 273.15).powi(4) - ta_k.powi(4))
            } else {
                0.0
            };
            let rate = self.heater_gain[i] * heaters[i] - self.heat_loss[i] * (temps[i] - self.ambient_temp)
                + self.coupling * (temps[j] - temps[i])
                - rad;
            next[i] = temps[i] + self.dt * rate;
        }
        Ok(next)
    }

    /// Heater powers that hold `temps` in equilibrium (linear plant only).
    pub fn steady_inputs(&self, temps: [f64; 2]) -> [f64; 2] {
        let mut q = [0.0; 2];
        for i in 0..2 {
            let j = 1 - i;
            let need = self.heat_loss[i] * (temps[i] - self.ambient_temp) - self.coupling * (temps[j] - temps[i]);
            q[i] = need / self.heater_gain[i];
        }
        q
    }
}

impl Plant for TcLabPlant {
    fn nx(&self) -> usize {
        2
    }

    fn nu(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dims(self, x, u)?;
        Ok(self.step_pair([x[0], x[1]], [u[0], u[1]])?.to_vec())
    }

    fn state_names(&self) -> Vec<String> {
        vec!["T1".into(), "T2".into()]
    }

    fn input_names(&self) -> Vec<String> {
        vec!["Q1".into(), "Q2".into()]
    }
}

fn check_dims<P: Plant + ?Sized>(p: &P, x: &[f64], u: &[f64]) -> Result<()> {
    if x.len() != p.nx() || u.len() != p.nu() {
        return Err(Error::shape(format!(
            "plant expects {} states and {} inputs, got {} and {}",
            p.nx(),
            p.nu(),
            x.len(),
            u.len()
        )));
    }
    Ok(())
}

/// Uniformly sampled multivariate series. `u[k]` is the input applied at
/// sample `k`, so `x[k + 1] = f(x[k], u[k])` for simulated data.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn nx(&self) -> usize {
        self.state_names.len()
    }

    pub fn nu(&self) -> usize {
        self.input_names.len()
    }

    pub fn z(&self, k: usize) -> Vec<f64> {
        self.x[k].iter().chain(&self.u[k]).copied().collect()
    }

    pub fn slice(&self, range: Range<usize>) -> TimeSeries {
        TimeSeries {
            t: self.t[range.clone()].to_vec(),
            x: self.x[range.clone()].to_vec(),
            u: self.u[range].to_vec(),
            state_names: self.state_names.clone(),
            input_names: self.input_names.clone(),
        }
    }

    /// Copy with i.i.d. Gaussian noise of standard deviation `sigma` added to
    /// the state columns.
    pub fn with_state_noise(&self, sigma: f64, seed: u64) -> Result<TimeSeries> {
        if sigma == 0.0 {
            return Ok(self.clone());
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(format!("noise level {sigma}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for row in &mut out.x {
            for v in row.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(out)
    }

    /// Smallest and largest value of state column `j`.
    pub fn state_range(&self, j: usize) -> (f64, f64) {
        self.x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x[j]), hi.max(x[j]))
        })
    }
}

/// One supervised sample built from three consecutive measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub z_prev: AugState,
    pub z_curr: AugState,
    pub x_next: Vec<f64>,
}

/// Sliding window over consecutive triples `(k-1, k, k+1)`.
pub fn to_transitions(series: &TimeSeries) -> Result<Vec<Transition>> {
    if series.len() < 3 {
        return Err(Error::config(format!(
            "need at least 3 samples to form a transition, got {}",
            series.len()
        )));
    }
    let nx = series.nx();
    (1..series.len() - 1)
        .map(|k| {
            Ok(Transition {
                z_prev: AugState::from_vec(series.z(k - 1), nx)?,
                z_curr: AugState::from_vec(series.z(k), nx)?,
                x_next: series.x[k + 1].clone(),
            })
        })
        .collect()
}

/// Input schedule for [`excite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Excitation {
    Constant {
        levels: Vec<f64>,
    },
    /// Each input independently draws a level uniformly from its bounds and
    /// holds it for a dwell drawn from `dwell_seconds`.
    RandomHold {
        bounds: Vec<(f64, f64)>,
        dwell_seconds: Vec<f64>,
    },
}

impl Excitation {
    /// Heater levels in [10, 50] % switched every 120 or 150 s.
    pub fn tclab_default() -> Self {
        Excitation::RandomHold {
            bounds: vec![(10.0, 50.0), (10.0, 50.0)],
            dwell_seconds: vec![120.0, 150.0],
        }
    }
}

/// Rolls `plant` forward from `x0` for `n` samples under `policy`.
pub fn excite<P: Plant + ?Sized>(
    plant: &P,
    x0: &[f64],
    policy: &Excitation,
    n: usize,
    seed: u64,
) -> Result<TimeSeries> {
    if n < 3 {
        return Err(Error::config("excitation needs n ≥ 3"));
    }
    if x0.len() != plant.nx() {
        return Err(Error::shape("initial state does not match the plant"));
    }
    let nu = plant.nu();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = match policy {
        Excitation::Constant { levels } => {
            if levels.len() != nu {
                return Err(Error::shape("constant excitation has the wrong input count"));
            }
            vec![levels.clone(); n]
        }
        Excitation::RandomHold { bounds, dwell_seconds } => {
            if bounds.len() != nu || dwell_seconds.is_empty() {
                return Err(Error::config(
                    "random-hold excitation needs one bound per input and at least one dwell",
                ));
            }
            let dwells: Vec<usize> = dwell_seconds
                .iter()
                .map(|d| ((d / plant.dt()).round() as usize).max(1))
                .collect();
            let mut u = vec![vec![0.0; nu]; n];
            for (i, &(lo, hi)) in bounds.iter().enumerate() {
                if lo > hi {
                    return Err(Error::config(format!("input {i} bounds are reversed")));
                }
                let mut k = 0;
                while k < n {
                    let level = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    let hold = dwells[rng.random_range(0..dwells.len())];
                    for row in u.iter_mut().skip(k).take(hold) {
                        row[i] = level;
                    }
                    k += hold;
                }
            }
            u
        }
    };
    let mut x = Vec::with_capacity(n);
    x.push(x0.to_vec());
    for k in 1..n {
        let next = plant.step(&x[k - 1], &inputs[k - 1])?;
        x.push(next);
    }
    Ok(TimeSeries {
        t: (0..n).map(|k| k as f64 * plant.dt()).collect(),
        x,
        u: inputs,
        state_names: plant.state_names(),
        input_names: plant.input_names(),
    })
}

/// Range-shifted HVAC benchmark: a training phase steered to a low
/// temperature band followed by a test phase steered to a higher one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HvacBenchmark {
    pub plant: HvacPlant,
    pub n_train: usize,
    pub n_test: usize,
    pub initial_temp: f64,
    pub train_band: (f64, f64),
    pub test_band: (f64, f64),
    pub flow_range: (f64, f64),
    pub supply_range: (f64, f64),
    /// Candidate input hold times, in samples.
    pub dwell_samples: Vec<usize>,
    /// Proportional correction of the supply temperature toward the
    /// current target, °F per °F of tracking error; 0 holds the supply
    /// constant over each hold period.
    pub feedback_gain: f64,
    /// Test-phase samples simulated before the test window starts; they
    /// belong to neither split.
    pub settle_samples: usize,
    /// Standard deviation of the measurement noise on the room temperature.
    pub noise_sigma: f64,
}

impl Default for HvacBenchmark {
    fn default() -> Self {
        Self {
            plant: HvacPlant {
                capacitance: 300.0,
                max_flow: 1.2,
                ..HvacPlant::default()
            },
            n_train: 180,
            n_test: 100,
            initial_temp: 70.0,
            train_band: (68.5, 72.5),
            test_band: (73.5, 76.0),
            flow_range: (0.6, 0.8),
            supply_range: (45.0, 80.0),
            dwell_samples: vec![2, 3, 4, 5, 6],
            feedback_gain: 2.0,
            settle_samples: 12,
            noise_sigma: 0.05,
        }
    }
}

impl HvacBenchmark {
    pub fn series_len(&self) -> usize {
        self.n_train + 2 + self.settle_samples + self.n_test + 2
    }

    /// Noise-free series. Every hold period draws a flow and a target
    /// temperature in the current band. The supply temperature is the one
    /// whose equilibrium is that target, plus `feedback_gain` times the
    /// tracking error, clamped to `supply_range`.
    pub fn simulate(&self, seed: u64) -> Result<TimeSeries> {
        let plant = self.plant.clone().validated()?;
        let (f_lo, f_hi) = self.flow_range;
        let (s_lo, s_hi) = self.supply_range;
        if !(0.0 < f_lo && f_lo <= f_hi && f_hi <= plant.max_flow) || s_lo > s_hi {
            return Err(Error::config("benchmark input ranges are invalid"));
        }
        if self.dwell_samples.is_empty() || self.dwell_samples.contains(&0) {
            return Err(Error::config("dwell_samples must be nonempty and positive"));
        }
        let n = self.series_len();
        let switch = self.n_train + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = vec![self.initial_temp];
        let mut u: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut hold = 0;
        let (mut target, mut mdot) = (0.0, 0.0);
        for k in 0..n {
            // Never hold a training-phase setting across the phase switch.
            if hold == 0 || k == switch {
                let (lo, hi) = if k < switch { self.train_band } else { self.test_band };
                target = rng.random_range(lo..=hi);
                mdot = rng.random_range(f_lo..=f_hi);
                hold = self.dwell_samples[rng.random_range(0..self.dwell_samples.len())];
            }
            let supply =
                (plant.equilibrium_supply(target, mdot) + self.feedback_gain * (target - t[k])).clamp(s_lo, s_hi);
            u.push(vec![supply, mdot]);
            hold -= 1;
            if k + 1 < n {
                let next = plant.step_temperature(t[k], supply, mdot)?;
                t.push(next);
            }
        }
        Ok(TimeSeries {
            t: (0..n).map(|k| k as f64 * plant.dt).collect(),
            x: t.into_iter().map(|v| vec![v]).collect(),
            u,
            state_names: plant.state_names(),
            input_names: plant.input_names(),
        })
    }

    /// Simulated series with measurement noise (seeded from `seed` as well).
    pub fn generate(&self, seed: u64) -> Result<TimeSeries> {
        self.simulate(seed)?
            .with_state_noise(self.noise_sigma, seed ^ 0x9E37_79B9_7F4A_7C15)
    }
}

/// Chronological split into the first `n_train` transitions and the last
/// `n_test`; samples in between are dropped.
pub fn range_shift_split(
    series: &TimeSeries,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<Transition>, Vec<Transition>)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("train and test sizes must be positive"));
    }
    if series.len() < n_train + n_test + 2 {
        return Err(Error::config(format!(
            "series of {} samples cannot supply {n_train} + {n_test} transitions",
            series.len()
        )));
    }
    let mut all = to_transitions(series)?;
    let test = all.split_off(all.len() - n_test);
    all.truncate(n_train);
    Ok((all, test))
}

/// Which CSV columns hold time, states and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub time: String,
    pub states: Vec<String>,
    pub inputs: Vec<String>,
}

impl ColumnRoles {
    pub fn hvac() -> Self {
        Self {
            time: "t".into(),
            states: vec!["T".into()],
            inputs: vec!["Ts".into(), "mdot".into()],
        }
    }

    pub fn tclab() -> Self {
        Self {
            time: "t".into(),
            states: vec!["T1".into(), "T2".into()],
            inputs: vec!["Q1".into(), "Q2".into()],
        }
    }

    pub fn for_series(series: &TimeSeries) -> Self {
        Self {
            time: "t".into(),
            states: series.state_names.clone(),
            inputs: series.input_names.clone(),
        }
    }
}

/// Writes `t, <states>, <inputs>` with shortest round-trip float formatting.
pub fn write_csv(series: &TimeSeries, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<&str> = std::iter::once("t")
        .chain(series.state_names.iter().map(String::as_str))
        .chain(series.input_names.iter().map(String::as_str))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for k in 0..series.len() {
        let row: Vec<String> = std::iter::once(series.t[k])
            .chain(series.x[k].iter().copied())
            .chain(series.u[k].iter().copied())
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a uniformly sampled series. Missing or non-finite values,
/// non-increasing timestamps and sampling gaps are rejected with the
/// offending line number.
pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<TimeSeries> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let t_col = col(&roles.time)?;
    let x_cols = roles.states.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let u_cols = roles.inputs.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;

    let mut series = TimeSeries {
        t: Vec::new(),
        x: Vec::new(),
        u: Vec::new(),
        state_names: roles.states.clone(),
        input_names: roles.inputs.clone(),
    };
    let mut dt: Option<f64> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            if raw.is_empty() {
                return Err(parse_err(line, format!("missing value in column `{}`", &headers[c])));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("`{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value in column `{}`", &headers[c])));
            }
            Ok(v)
        };
        let t = field(t_col)?;
        if let Some(&prev) = series.t.last() {
            let step = t - prev;
            if step <= 0.0 {
                return Err(parse_err(line, format!("timestamp {t} does not increase")));
            }
            match dt {
                None => dt = Some(step),
                Some(d) if (step - d).abs() > 1e-6 * d => {
                    return Err(parse_err(line, format!("sampling gap: step {step} differs from {d}")));
                }
                _ => {}
            }
        }
        series.t.push(t);
        series.x.push(x_cols.iter().map(|&c| field(c)).collect::<Result<_>>()?);
        series.u.push(u_cols.iter().map(|&c| field(c)).collect::<Result<_>>()?);
    }
    Ok(series)
}
