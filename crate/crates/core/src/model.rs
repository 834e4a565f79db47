//! Domain types and the multiplicative scaling law.
//!
//! Accuracy is modelled as
//!
//! ```text
//! Acc ≈ C · N^α · [log2(C_b)]^β · G^γ · [log2(B_eff)]^δ
//! ```
//!
//! where `B_eff = W_base + (b_s + b_z) / G` is the storage cost per weight once
//! the per-group scale and zero-point are amortised. Factors outside a law's
//! [`FactorMask`] contribute a constant 1.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits used to store the per-group scale factor (FP16).
pub const DEFAULT_SCALE_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Factor {
    /// Model size in raw parameters.
    N,
    /// Calibration set size, entering as `log2(C_b)`.
    Cb,
    /// Quantization group size.
    G,
    /// Effective bit-width, entering as `log2(B_eff)`.
    Beff,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::N, Factor::Cb, Factor::G, Factor::Beff];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Factor::N => "N",
            Factor::Cb => "C_b",
            Factor::G => "G",
            Factor::Beff => "B_eff",
        }
    }

    /// Name of the exponent attached to this factor.
    pub fn exponent_name(self) -> &'static str {
        match self {
            Factor::N => "alpha",
            Factor::Cb => "beta",
            Factor::G => "gamma",
            Factor::Beff => "delta",
        }
    }

    /// Whether the factor enters the law through `log2`.
    pub fn is_log_transformed(self) -> bool {
        matches!(self, Factor::Cb | Factor::Beff)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" => Ok(Factor::N),
            "c_b" | "cb" => Ok(Factor::Cb),
            "g" => Ok(Factor::G),
            "b_eff" | "beff" => Ok(Factor::Beff),
            other => Err(Error::Parse {
                what: "factor".into(),
                message: format!("unknown factor `{other}` (expected N, C_b, G or B_eff)"),
            }),
        }
    }
}

/// Subset of factors included in a law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FactorMask(u8);

impl FactorMask {
    pub const EMPTY: FactorMask = FactorMask(0);
    pub const FULL: FactorMask = FactorMask(0b1111);

    pub fn from_factors(factors: impl IntoIterator<Item = Factor>) -> Self {
        factors
            .into_iter()
            .fold(Self::EMPTY, |mask, f| mask.with(f))
    }

    pub fn with(self, factor: Factor) -> Self {
        FactorMask(self.0 | 1 << factor.index())
    }

    pub fn without(self, factor: Factor) -> Self {
        FactorMask(self.0 & !(1 << factor.index()))
    }

    pub fn contains(self, factor: Factor) -> bool {
        self.0 & (1 << factor.index()) != 0
    }

    pub fn is_subset_of(self, other: FactorMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Included factors in canonical order (N, C_b, G, B_eff).
    pub fn iter(self) -> impl Iterator<Item = Factor> {
        Factor::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    /// Every subset of the four factors, ordered by bit pattern.
    pub fn all_subsets() -> impl Iterator<Item = FactorMask> {
        (0u8..16).map(FactorMask)
    }
}

impl fmt::Display for FactorMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("const");
        }
        let names: Vec<_> = self.iter().map(Factor::symbol).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for FactorMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("const") {
            return Ok(Self::EMPTY);
        }
        s.split(',')
            .map(str::parse::<Factor>)
            .collect::<Result<Vec<_>>>()
            .map(Self::from_factors)
    }
}

/// How per-group metadata is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataScheme {
    pub scale_bits: u32,
    /// Symmetric quantization stores no zero-point; asymmetric stores one of `W_base` bits.
    pub symmetric: bool,
}

impl Default for MetadataScheme {
    fn default() -> Self {
        Self {
            scale_bits: DEFAULT_SCALE_BITS,
            symmetric: false,
        }
    }
}

impl MetadataScheme {
    pub fn symmetric(scale_bits: u32) -> Self {
        Self {
            scale_bits,
            symmetric: true,
        }
    }

    pub fn zero_point_bits(&self, w_base: u32) -> u32 {
        if self.symmetric {
            0
        } else {
            w_base
        }
    }
}

/// One post-training quantization setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PtqConfig {
    n_params: f64,
    w_base: u32,
    c_b: u32,
    g: u32,
    b_s: u32,
    b_z: u32,
}

impl PtqConfig {
    /// Asymmetric configuration with FP16 scales (`b_s = 16`, `b_z = w_base`).
    pub fn new(n_params: f64, w_base: u32, c_b: u32, g: u32) -> Result<Self> {
        Self::with_metadata(n_params, w_base, c_b, g, DEFAULT_SCALE_BITS, w_base)
    }

    pub fn with_scheme(
        n_params: f64,
        w_base: u32,
        c_b: u32,
        g: u32,
        scheme: MetadataScheme,
    ) -> Result<Self> {
        Self::with_metadata(
            n_params,
            w_base,
            c_b,
            g,
            scheme.scale_bits,
            scheme.zero_point_bits(w_base),
        )
    }

    pub fn with_metadata(
        n_params: f64,
        w_base: u32,
        c_b: u32,
        g: u32,
        b_s: u32,
        b_z: u32,
    ) -> Result<Self> {
        if !n_params.is_finite() || n_params < 1.0 {
            return Err(invalid("n_params", format!("must be finite and >= 1, got {n_params}")));
        }
        if w_base < 1 {
            return Err(invalid("w_base", "must be >= 1".into()));
        }
        if c_b < 2 {
            return Err(invalid(
                "c_b",
                format!("must be >= 2 so that log2(c_b) > 0, got {c_b}"),
            ));
        }
        if g < 1 {
            return Err(invalid("g", "must be >= 1".into()));
        }
        Ok(Self {
            n_params,
            w_base,
            c_b,
            g,
            b_s,
            b_z,
        })
    }

    pub fn n_params(&self) -> f64 {
        self.n_params
    }
    pub fn w_base(&self) -> u32 {
        self.w_base
    }
    pub fn c_b(&self) -> u32 {
        self.c_b
    }
    pub fn g(&self) -> u32 {
        self.g
    }
    pub fn scale_bits(&self) -> u32 {
        self.b_s
    }
    pub fn zero_point_bits(&self) -> u32 {
        self.b_z
    }

    pub fn effective_bit_width(&self) -> EffectiveBitWidth {
        EffectiveBitWidth(
            f64::from(self.w_base) + f64::from(self.b_s + self.b_z) / f64::from(self.g),
        )
    }

    /// Same configuration with a different model size.
    pub fn with_n_params(&self, n_params: f64) -> Result<Self> {
        Self::with_metadata(n_params, self.w_base, self.c_b, self.g, self.b_s, self.b_z)
    }

    /// Base of the power attached to `factor`: N, log2(C_b), G or log2(B_eff).
    pub fn factor_value(&self, factor: Factor) -> f64 {
        match factor {
            Factor::N => self.n_params,
            Factor::Cb => log2(f64::from(self.c_b)),
            Factor::G => f64::from(self.g),
            Factor::Beff => log2(self.effective_bit_width().value()),
        }
    }
}

impl fmt::Display for PtqConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(N={}, W_base={}, C_b={}, G={}, b_s={}, b_z={})",
            self.n_params, self.w_base, self.c_b, self.g, self.b_s, self.b_z
        )
    }
}

fn invalid(field: &'static str, reason: String) -> Error {
    Error::InvalidConfig { field, reason }
}

fn log2(x: f64) -> f64 {
    x.ln() / LN_2
}

/// Bits of storage per weight including amortised group metadata.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct EffectiveBitWidth(f64);

impl EffectiveBitWidth {
    pub fn value(self) -> f64 {
        self.0
    }

    /// Rounded to two decimals, halves away from zero.
    pub fn display_2dp(self) -> String {
        format!("{:.2}", (self.0 * 100.0).round() / 100.0)
    }
}

impl fmt::Display for EffectiveBitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `W_base + (b_s + b_z) / G` for raw bit-width inputs.
pub fn effective_bit_width(w_base: u32, g: u32, b_s: u32, b_z: u32) -> Result<EffectiveBitWidth> {
    if g == 0 {
        return Err(invalid("g", "must be >= 1 (group size divides metadata bits)".into()));
    }
    Ok(EffectiveBitWidth(
        f64::from(w_base) + f64::from(b_s + b_z) / f64::from(g),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    General,
    Memorization,
    Utilization,
    Custom(String),
}

impl TaskKind {
    pub fn label(&self) -> &str {
        match self {
            TaskKind::General => "general",
            TaskKind::Memorization => "memorization",
            TaskKind::Utilization => "utilization",
            TaskKind::Custom(label) => label,
        }
    }

    pub fn from_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "general" => TaskKind::General,
            "memorization" | "mem" | "km" => TaskKind::Memorization,
            "utilization" | "util" | "ku" => TaskKind::Utilization,
            _ => TaskKind::Custom(label.trim().to_string()),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Axis-aligned box of configurations a law was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityDomain {
    pub n_params: (f64, f64),
    pub w_base: (u32, u32),
    pub c_b: (u32, u32),
    pub g: (u32, u32),
}

impl ValidityDomain {
    /// 125M–13B parameters, 2–8 bits, 8–4096 calibration samples, groups of 32–1024.
    pub const PUBLISHED_GRID: ValidityDomain = ValidityDomain {
        n_params: (125e6, 13e9),
        w_base: (2, 8),
        c_b: (8, 4096),
        g: (32, 1024),
    };

    pub fn contains(&self, cfg: &PtqConfig) -> bool {
        let within = |v, (lo, hi)| lo <= v && v <= hi;
        (self.n_params.0..=self.n_params.1).contains(&cfg.n_params())
            && within(cfg.w_base(), self.w_base)
            && within(cfg.c_b(), self.c_b)
            && within(cfg.g(), self.g)
    }

    /// Smallest box covering every configuration.
    pub fn spanning<'a>(configs: impl IntoIterator<Item = &'a PtqConfig>) -> Option<Self> {
        let mut iter = configs.into_iter();
        let first = iter.next()?;
        let mut d = ValidityDomain {
            n_params: (first.n_params(), first.n_params()),
            w_base: (first.w_base(), first.w_base()),
            c_b: (first.c_b(), first.c_b()),
            g: (first.g(), first.g()),
        };
        for cfg in iter {
            d.n_params = (d.n_params.0.min(cfg.n_params()), d.n_params.1.max(cfg.n_params()));
            d.w_base = (d.w_base.0.min(cfg.w_base()), d.w_base.1.max(cfg.w_base()));
            d.c_b = (d.c_b.0.min(cfg.c_b()), d.c_b.1.max(cfg.c_b()));
            d.g = (d.g.0.min(cfg.g()), d.g.1.max(cfg.g()));
        }
        Some(d)
    }
}

/// Fitted constants of the multiplicative law for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingLawParams {
    task: TaskKind,
    c: f64,
    exponents: [f64; 4],
    mask: FactorMask,
    domain: Option<ValidityDomain>,
}

impl ScalingLawParams {
    /// `exponents` is indexed by [`Factor::index`]; entries for excluded factors must be zero.
    pub fn new(task: TaskKind, c: f64, exponents: [f64; 4], mask: FactorMask) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidParams(format!("C must be finite and > 0, got {c}")));
        }
        for factor in Factor::ALL {
            let e = exponents[factor.index()];
            if !e.is_finite() {
                return Err(Error::InvalidParams(format!(
                    "exponent {} is not finite",
                    factor.exponent_name()
                )));
            }
            if !mask.contains(factor) && e != 0.0 {
                return Err(Error::InvalidParams(format!(
                    "exponent {} = {e} but {factor} is excluded by mask {mask}",
                    factor.exponent_name()
                )));
            }
        }
        Ok(Self {
            task,
            c,
            exponents,
            mask,
            domain: None,
        })
    }

    /// Four-factor law from `(C, α, β, γ, δ)`.
    pub fn full(task: TaskKind, c: f64, alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        Self::new(task, c, [alpha, beta, gamma, delta], FactorMask::FULL)
    }

    /// Law with only the constant term.
    pub fn constant(task: TaskKind, c: f64) -> Result<Self> {
        Self::new(task, c, [0.0; 4], FactorMask::EMPTY)
    }

    pub fn with_domain(mut self, domain: Option<ValidityDomain>) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_task(mut self, task: TaskKind) -> Self {
        self.task = task;
        self
    }

    pub fn task(&self) -> &TaskKind {
        &self.task
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn mask(&self) -> FactorMask {
        self.mask
    }
    pub fn domain(&self) -> Option<&ValidityDomain> {
        self.domain.as_ref()
    }
    pub fn exponent(&self, factor: Factor) -> f64 {
        self.exponents[factor.index()]
    }
    pub fn exponents(&self) -> [f64; 4] {
        self.exponents
    }
    pub fn alpha(&self) -> f64 {
        self.exponent(Factor::N)
    }
    pub fn beta(&self) -> f64 {
        self.exponent(Factor::Cb)
    }
    pub fn gamma(&self) -> f64 {
        self.exponent(Factor::G)
    }
    pub fn delta(&self) -> f64 {
        self.exponent(Factor::Beff)
    }

    /// Human-readable law, e.g. `Acc ≈ 0.0255 × N^0.1016 × [log2(B_eff)]^0.3188`.
    pub fn formula(&self, precision: usize) -> String {
        let mut s = format!("Acc ≈ {}", format_constant(self.c, precision));
        for factor in self.mask.iter() {
            let e = self.exponent(factor);
            let term = if factor.is_log_transformed() {
                format!("[log2({factor})]")
            } else {
                factor.to_string()
            };
            s.push_str(&format!(" × {term}^{e:.precision$}"));
        }
        s
    }
}

fn format_constant(c: f64, precision: usize) -> String {
    if c != 0.0 && c.abs() < 1e-2 {
        format!("{c:.precision$e}")
    } else {
        format!("{c:.precision$}")
    }
}

/// Evaluates a masked-in factor's base, rejecting non-positive log terms.
fn checked_factor_value(cfg: &PtqConfig, factor: Factor) -> Result<f64> {
    let v = cfg.factor_value(factor);
    if factor.is_log_transformed() && !(v > 0.0) {
        let arg = match factor {
            Factor::Cb => f64::from(cfg.c_b()),
            _ => cfg.effective_bit_width().value(),
        };
        return Err(Error::Domain { factor, value: arg });
    }
    Ok(v)
}

/// Natural logs of the four factor bases, `ln N, ln log2 C_b, ln G, ln log2 B_eff`.
///
/// Only factors in `mask` are checked; the others are reported as `0.0`.
pub fn log_features(cfg: &PtqConfig, mask: FactorMask) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for factor in mask.iter() {
        out[factor.index()] = checked_factor_value(cfg, factor)?.ln();
    }
    Ok(out)
}

/// Predicted accuracy as a fraction. Not clamped: values above 1 are possible.
pub fn predict(params: &ScalingLawParams, cfg: &PtqConfig) -> Result<f64> {
    let mut acc = params.c;
    for factor in params.mask.iter() {
        acc *= checked_factor_value(cfg, factor)?.powf(params.exponent(factor));
    }
    Ok(acc)
}

/// Partial derivatives of the prediction with respect to `(C, α, β, γ, δ)`.
///
/// Entries for excluded factors are zero.
pub fn gradient(params: &ScalingLawParams, cfg: &PtqConfig) -> Result<[f64; 5]> {
    let y = predict(params, cfg)?;
    let feats = log_features(cfg, params.mask)?;
    let mut out = [y / params.c, 0.0, 0.0, 0.0, 0.0];
    for factor in params.mask.iter() {
        out[1 + factor.index()] = y * feats[factor.index()];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoreSensitive {
    First,
    Second,
    Tied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorComparison {
    pub factor: Factor,
    pub first: f64,
    pub second: f64,
    /// `first - second`.
    pub difference: f64,
    /// Which law has the larger exponent magnitude on this factor.
    pub more_sensitive: MoreSensitive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub first_task: TaskKind,
    pub second_task: TaskKind,
    pub rows: Vec<FactorComparison>,
}

impl SensitivityReport {
    pub fn row(&self, factor: Factor) -> Option<&FactorComparison> {
        self.rows.iter().find(|r| r.factor == factor)
    }
}

/// Compares the elasticities of two laws fitted with the same mask.
pub fn sensitivity_report(a: &ScalingLawParams, b: &ScalingLawParams) -> Result<SensitivityReport> {
    if a.mask != b.mask {
        return Err(Error::MaskMismatch {
            left: a.mask.to_string(),
            right: b.mask.to_string(),
        });
    }
    let rows = a
        .mask
        .iter()
        .map(|factor| {
            let (first, second) = (a.exponent(factor), b.exponent(factor));
            let more_sensitive = match first.abs().partial_cmp(&second.abs()) {
                Some(std::cmp::Ordering::Greater) => MoreSensitive::First,
                Some(std::cmp::Ordering::Less) => MoreSensitive::Second,
                _ => MoreSensitive::Tied,
            };
            FactorComparison {
                factor,
                first,
                second,
                difference: first - second,
                more_sensitive,
            }
        })
        .collect();
    Ok(SensitivityReport {
        first_task: a.task.clone(),
        second_task: b.task.clone(),
        rows,
    })
}

/// Cartesian grid of candidate values, iterated in `N, W_base, C_b, G` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_params: Vec<f64>,
    pub w_base: Vec<u32>,
    pub c_b: Vec<u32>,
    pub g: Vec<u32>,
}

impl Grid {
    /// The published OPT experiment grid (6 × 4 × 4 × 4 = 384 configurations).
    pub fn published() -> Self {
        Self {
            n_params: vec![125e6, 350e6, 1.3e9, 2.7e9, 6.7e9, 13e9],
            w_base: vec![2, 3, 4, 8],
            c_b: vec![8, 128, 1024, 4096],
            g: vec![32, 64, 128, 1024],
        }
    }

    pub fn len(&self) -> usize {
        self.n_params.len() * self.w_base.len() * self.c_b.len() * self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn configs(&self, scheme: MetadataScheme) -> Result<Vec<PtqConfig>> {
        let mut out = Vec::with_capacity(self.len());
        for &n in &self.n_params {
            for &w in &self.w_base {
                for &cb in &self.c_b {
                    for &g in &self.g {
                        out.push(PtqConfig::with_scheme(n, w, cb, g, scheme)?);
                    }
                }
            }
        }
        Ok(out)
    }
}
