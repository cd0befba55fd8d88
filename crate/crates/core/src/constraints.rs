//! Monotonicity priors: sign gates on Jacobian-network outputs, the
//! sign-violation penalty, and the determinant-based convexity penalty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cofactor_matrix, determinant, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MonoTag {
    Increasing,
    Decreasing,
    Free,
}

impl MonoTag {
    pub fn symbol(self) -> char {
        match self {
            MonoTag::Increasing => '+',
            MonoTag::Decreasing => '-',
            MonoTag::Free => '.',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(MonoTag::Increasing),
            // ASCII hyphen and U+2212 minus sign
            '-' | '\u{2212}' => Some(MonoTag::Decreasing),
            '.' => Some(MonoTag::Free),
            _ => None,
        }
    }

    /// Whether `value` has the sign this tag demands.
    pub fn admits(self, value: f64) -> bool {
        match self {
            MonoTag::Increasing => value >= 0.0,
            MonoTag::Decreasing => value <= 0.0,
            MonoTag::Free => true,
        }
    }
}

/// Partial-monotonicity prior: one tag per entry of the `Nx × N` Jacobian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonoSpec {
    rows: usize,
    cols: usize,
    tags: Vec<MonoTag>,
}

impl MonoSpec {
    pub fn new(rows: usize, cols: usize, tags: Vec<MonoTag>) -> Result<Self> {
        if tags.len() != rows * cols {
            return Err(Error::shape(format!("{} tags for a {rows}x{cols} spec", tags.len())));
        }
        Ok(Self { rows, cols, tags })
    }

    pub fn free(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            tags: vec![MonoTag::Free; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tag(&self, r: usize, c: usize) -> MonoTag {
        self.tags[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[MonoTag] {
        &self.tags[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count(&self, tag: MonoTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Entries carrying a sign requirement, as `(row, col, tag)`.
    pub fn tagged(&self) -> impl Iterator<Item = (usize, usize, MonoTag)> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t != MonoTag::Free)
            .map(|(k, &t)| (k / self.cols, k % self.cols, t))
    }
}

impl FromStr for MonoSpec {
    type Err = Error;

    /// One row per line; symbols `+`, `-` (or `−`), `.`; whitespace between
    /// symbols is ignored, as are blank lines and `#` comments.
    fn from_str(s: &str) -> Result<Self> {
        let mut tags = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for (lineno, line) in s.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| {
                    MonoTag::from_symbol(c)
                        .ok_or_else(|| Error::config(format!("line {}: unknown monotonicity symbol `{c}`", lineno + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::shape(format!(
                        "line {}: row has {} tags, expected {c}",
                        lineno + 1,
                        row.len()
                    )));
                }
                _ => {}
            }
            tags.extend(row);
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::config("empty monotonicity spec"))?;
        Self::new(rows, cols, tags)
    }
}

impl fmt::Display for MonoSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|t| t.symbol().to_string()).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl Serialize for MonoSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<String> = (0..self.rows)
            .map(|r| self.row(r).iter().map(|t| t.symbol()).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MonoSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        rows.join("\n").parse().map_err(serde::de::Error::custom)
    }
}

/// How the convexity penalty reads a Hessian block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexCriterion {
    /// `ReLU(-det H)` per block.
    #[default]
    Determinant,
    /// Sum of `ReLU(-minor_k)` over the leading principal minors; stricter
    /// than the determinant alone.
    LeadingMinors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyWeights {
    pub lambda_increasing: f64,
    pub lambda_decreasing: f64,
    /// Optional per-entry override of λ (row-major `Nx × N`).
    pub lambda_entries: Option<Vec<f64>>,
    pub gamma: f64,
    pub convex_criterion: ConvexCriterion,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            lambda_increasing: 1.0,
            lambda_decreasing: 1.0,
            lambda_entries: None,
            gamma: 0.1,
            convex_criterion: ConvexCriterion::Determinant,
        }
    }
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        let neg = |x: f64| !(x >= 0.0 && x.is_finite());
        if neg(self.lambda_increasing) || neg(self.lambda_decreasing) || neg(self.gamma) {
            return Err(Error::config("penalty weights must be finite and nonnegative"));
        }
        if let Some(e) = &self.lambda_entries {
            if e.iter().any(|&x| neg(x)) {
                return Err(Error::config("per-entry λ must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn lambda(&self, spec: &MonoSpec, r: usize, c: usize) -> f64 {
        if let Some(e) = &self.lambda_entries {
            return e[r * spec.cols() + c];
        }
        match spec.tag(r, c) {
            MonoTag::Increasing => self.lambda_increasing,
            MonoTag::Decreasing => self.lambda_decreasing,
            MonoTag::Free => 0.0,
        }
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Gate a single raw network output: `ReLU` for increasing, `-ReLU` for
/// decreasing, identity for free entries.
#[inline]
pub fn gate(raw: f64, tag: MonoTag) -> f64 {
    match tag {
        MonoTag::Increasing => relu(raw),
        MonoTag::Decreasing => -relu(raw),
        MonoTag::Free => raw,
    }
}

/// Derivative of [`gate`] with respect to `raw`; 0 at the kink.
#[inline]
pub fn gate_slope(raw: f64, tag: MonoTag) -> f64 {
    match tag {
        MonoTag::Increasing => f64::from(u8::from(raw > 0.0)),
        MonoTag::Decreasing => -f64::from(u8::from(raw > 0.0)),
        MonoTag::Free => 1.0,
    }
}

pub fn apply_sign_gate(raw: &[f64], tags: &[MonoTag]) -> Result<Vec<f64>> {
    if raw.len() != tags.len() {
        return Err(Error::shape(format!(
            "{} raw outputs for {} tags",
            raw.len(),
            tags.len()
        )));
    }
    Ok(raw.iter().zip(tags).map(|(&r, &t)| gate(r, t)).collect())
}

fn check_spec(jac: &Matrix, spec: &MonoSpec) -> Result<()> {
    if (jac.rows(), jac.cols()) != (spec.rows(), spec.cols()) {
        return Err(Error::shape(format!(
            "Jacobian is {}x{}, spec is {}x{}",
            jac.rows(),
            jac.cols(),
            spec.rows(),
            spec.cols()
        )));
    }
    Ok(())
}

/// `Σ λ·ReLU(-J)` over increasing tags plus `Σ λ·ReLU(J)` over decreasing
/// tags.
pub fn mono_penalty(jac: &Matrix, spec: &MonoSpec, weights: &PenaltyWeights) -> Result<f64> {
    check_spec(jac, spec)?;
    Ok(spec
        .tagged()
        .map(|(r, c, t)| {
            let lam = weights.lambda(spec, r, c);
            match t {
                MonoTag::Increasing => lam * relu(-jac[(r, c)]),
                MonoTag::Decreasing => lam * relu(jac[(r, c)]),
                MonoTag::Free => 0.0,
            }
        })
        .sum())
}

/// Subgradient of [`mono_penalty`] with respect to the Jacobian entries.
pub fn mono_penalty_grad(jac: &Matrix, spec: &MonoSpec, weights: &PenaltyWeights) -> Result<Matrix> {
    check_spec(jac, spec)?;
    let mut g = Matrix::zeros(jac.rows(), jac.cols());
    for (r, c, t) in spec.tagged() {
        let lam = weights.lambda(spec, r, c);
        let v = jac[(r, c)];
        g[(r, c)] = match t {
            MonoTag::Increasing if v < 0.0 => -lam,
            MonoTag::Decreasing if v > 0.0 => lam,
            _ => 0.0,
        };
    }
    Ok(g)
}

fn check_blocks(blocks: &[Matrix]) -> Result<()> {
    if let Some(b) = blocks.iter().find(|b| !b.is_square()) {
        return Err(Error::shape(format!(
            "Hessian block is {}x{}, expected square",
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `Σ_j γ·ReLU(-det H_j)` (or the leading-minor variant).
pub fn convex_penalty(blocks: &[Matrix], gamma: f64, criterion: ConvexCriterion) -> Result<f64> {
    check_blocks(blocks)?;
    Ok(blocks
        .iter()
        .map(|h| match criterion {
            ConvexCriterion::Determinant => gamma * relu(-determinant(h)),
            ConvexCriterion::LeadingMinors => (1..=h.rows()).map(|k| gamma * relu(-determinant(&h.leading(k)))).sum(),
        })
        .sum())
}

/// Subgradient of [`convex_penalty`] with respect to each block.
pub fn convex_penalty_grad(blocks: &[Matrix], gamma: f64, criterion: ConvexCriterion) -> Result<Vec<Matrix>> {
    check_blocks(blocks)?;
    Ok(blocks
        .iter()
        .map(|h| {
            let n = h.rows();
            let mut g = Matrix::zeros(n, n);
            let ks: Vec<usize> = match criterion {
                ConvexCriterion::Determinant => vec![n],
                ConvexCriterion::LeadingMinors => (1..=n).collect(),
            };
            for k in ks {
                let sub = h.leading(k);
                if determinant(&sub) < 0.0 {
                    let cof = cofactor_matrix(&sub);
                    for r in 0..k {
                        for c in 0..k {
                            g[(r, c)] -= gamma * cof[(r, c)];
                        }
                    }
                }
            }
            g
        })
        .collect())
}
