//! Trivial-attention suppression.
//!
//! Attention rows are split into trivial and non-trivial weights by a
//! threshold, either relative to the row maximum (`t · x_m`) or absolute
//! (`t`). Trivial weights are then replaced by
//!
//! ```text
//! x_j' = s · x_j² / Σ_{i ∈ trivial} x_i
//! ```
//!
//! which caps the accumulated trivial mass of a row at `s · x_m` and, for
//! `s ≤ 1`, never increases an individual weight. Non-trivial weights pass
//! through untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Threshold is `t · max(row)`.
    Relative,
    /// Threshold is `t`.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuppressionScale {
    Fixed(f64),
    /// One trainable scalar per transformer layer, shared by all heads.
    Learnable {
        init: f64,
    },
}

impl SuppressionScale {
    pub fn initial(self) -> f64 {
        match self {
            SuppressionScale::Fixed(s) => s,
            SuppressionScale::Learnable { init } => init,
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(self, SuppressionScale::Learnable { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SataConfig {
    pub mode: ThresholdMode,
    pub t: f64,
    pub scale: SuppressionScale,
    /// Divide each row by its post-suppression sum.
    pub renormalize_rows: bool,
    /// Added to the trivial-sum denominator.
    pub epsilon: f64,
    /// Clamp learnable scales at zero after each optimizer step.
    pub clamp_scale: bool,
}

impl Default for SataConfig {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Relative,
            t: 0.1,
            scale: SuppressionScale::Learnable { init: 0.5 },
            renormalize_rows: false,
            epsilon: 1e-12,
            clamp_scale: false,
        }
    }
}

impl SataConfig {
    pub fn relative(t: f64, scale: SuppressionScale) -> Self {
        Self {
            t,
            scale,
            ..Self::default()
        }
    }

    pub fn absolute(t: f64, scale: SuppressionScale) -> Self {
        Self {
            mode: ThresholdMode::Absolute,
            t,
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::Config(format!(
                "threshold t must be >= 0, got {}",
                self.t
            )));
        }
        if self.mode == ThresholdMode::Relative && self.t >= 1.0 {
            return Err(Error::Config(format!(
                "relative threshold t must be < 1 (t >= 1 masks the row maximum), got {}",
                self.t
            )));
        }
        let s = self.scale.initial();
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Config(format!(
                "suppression scale must start >= 0, got {s}"
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Threshold applied to a row whose largest weight is `row_max`.
    pub fn threshold(&self, row_max: f64) -> f64 {
        match self.mode {
            ThresholdMode::Relative => self.t * row_max,
            ThresholdMode::Absolute => self.t,
        }
    }

    pub fn twist_options(&self) -> TwistOptions {
        TwistOptions {
            epsilon: self.epsilon,
            renormalize_rows: self.renormalize_rows,
        }
    }
}

/// Binary trivial/non-trivial mask with the same row layout as the
/// attention matrix it was computed from. `true` marks a trivial weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrivialMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl TrivialMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim("trivial_mask", &[rows, cols], &[bits.len()]));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of trivial positions.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    fn check_shape(&self, a: &Tensor) -> Result<()> {
        if a.rows() != self.rows || a.cols() != self.cols {
            return Err(Error::dim("twist", a.shape(), &[self.rows, self.cols]));
        }
        Ok(())
    }
}

/// Marks `A[i][j] ≤ threshold_i` as trivial, row by row over the last
/// dimension. The mask is piecewise constant in `A` and carries no gradient.
pub fn trivial_mask(a: &Tensor, cfg: &SataConfig) -> Result<TrivialMask> {
    cfg.validate()?;
    let cols = a.cols();
    let mut bits = Vec::with_capacity(a.len());
    for row in a.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = cfg.threshold(max);
        bits.extend(row.iter().map(|&w| w <= threshold));
    }
    Ok(TrivialMask {
        rows: a.rows(),
        cols,
        bits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistOptions {
    pub epsilon: f64,
    pub renormalize_rows: bool,
}

impl Default for TwistOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-12,
            renormalize_rows: false,
        }
    }
}

/// Applies the transform to one row, returning the trivial-set sum of the
/// input (without epsilon).
fn twist_row(a: &[f64], mask: &[bool], s: f64, epsilon: f64, out: &mut [f64]) -> f64 {
    let trivial_sum: f64 = a
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| v)
        .fold(0.0, |acc, v| acc + v);
    let denom = trivial_sum + epsilon;
    for ((o, &v), &m) in out.iter_mut().zip(a).zip(mask) {
        *o = if m { s * v * v / denom } else { v };
    }
    trivial_sum
}

/// Value-level transform of every row of `a` with scale `s`.
pub fn twist(a: &Tensor, mask: &TrivialMask, s: f64, opts: &TwistOptions) -> Result<Tensor> {
    mask.check_shape(a)?;
    let cols = a.cols();
    let mut data = vec![0.0; a.len()];
    for ((src, dst), m) in a
        .data()
        .chunks(cols)
        .zip(data.chunks_mut(cols))
        .zip(mask.bits.chunks(cols))
    {
        twist_row(src, m, s, opts.epsilon, dst);
        if opts.renormalize_rows {
            let total: f64 = dst.iter().sum();
            dst.iter_mut().for_each(|v| *v /= total);
        }
    }
    Tensor::new(a.shape().to_vec(), data)
}

struct TwistRule {
    mask: TrivialMask,
    epsilon: f64,
    trivial_sums: Vec<f64>,
}

impl BackwardRule for TwistRule {
    fn name(&self) -> &'static str {
        "twist"
    }

    // For j, k in the trivial set T of a row with S = Σ_T a + ε:
    //   ∂out_j/∂a_k = s·(2·a_j·δ_jk / S − a_j² / S²),   ∂out_j/∂s = a_j² / S.
    // Non-trivial entries are the identity.
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, s) = (inputs[0], inputs[1].data()[0]);
        let cols = a.cols();
        let mut ga = grad.data().to_vec();
        let mut gs = 0.0;
        for (r, sum) in self.trivial_sums.iter().enumerate() {
            let m = self.mask.row(r);
            if !m.iter().any(|b| *b) {
                continue;
            }
            let denom = sum + self.epsilon;
            let ar = a.row(r);
            let gr = &grad.data()[r * cols..(r + 1) * cols];
            let mut weighted = 0.0;
            for j in 0..cols {
                if m[j] {
                    let sq = ar[j] * ar[j];
                    weighted += gr[j] * sq;
                }
            }
            gs += weighted / denom;
            let shared = s * weighted / (denom * denom);
            for j in 0..cols {
                if m[j] {
                    ga[r * cols + j] = 2.0 * s * ar[j] * gr[j] / denom - shared;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(a.shape().to_vec(), ga)),
            Some(Tensor::scalar(gs)),
        ]
    }
}

/// Differentiable transform on a tape; gradients flow to `a` (through both
/// numerator and denominator, mask fixed) and to the one-element `s`.
pub fn twist_on_tape(
    tape: &mut Tape,
    a: Var,
    mask: TrivialMask,
    s: Var,
    opts: &TwistOptions,
) -> Result<Var> {
    let av = tape.value(a);
    mask.check_shape(av)?;
    let scale = tape.value(s).item()?;
    let cols = av.cols();
    let mut data = vec![0.0; av.len()];
    let mut trivial_sums = Vec::with_capacity(mask.rows);
    for ((src, dst), m) in av
        .data()
        .chunks(cols)
        .zip(data.chunks_mut(cols))
        .zip(mask.bits.chunks(cols))
    {
        trivial_sums.push(twist_row(src, m, scale, opts.epsilon, dst));
    }
    let out = Tensor::from_parts(av.shape().to_vec(), data);
    let rule = TwistRule {
        mask,
        epsilon: opts.epsilon,
        trivial_sums,
    };
    let twisted = tape.custom(&[a, s], out, Box::new(rule));
    Ok(if opts.renormalize_rows {
        tape.normalize_rows(twisted)
    } else {
        twisted
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Row {
    pub trivial_sum_after: f64,
    /// `|s| · max(row)`; equals `s · x_m` for the non-negative scales the
    /// bound is stated for.
    pub bound: f64,
    /// `None` when `s ∉ [0, 1]`, where elementwise non-increase is not
    /// guaranteed.
    pub elementwise_nonincrease: Option<bool>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Report {
    pub rows: Vec<Lemma1Row>,
    pub pass: bool,
}

pub const LEMMA_BOUND_TOL: f64 = 1e-12;
pub const LEMMA_ELEMENT_TOL: f64 = 1e-15;

/// Transforms `a` with scale `s` (no renormalization) and checks, per row,
/// that the trivial mass is at most `s · x_m` and, for `0 ≤ s ≤ 1`, that
/// no trivial weight grew.
pub fn verify_lemma1(a: &Tensor, mask: &TrivialMask, s: f64) -> Result<Lemma1Report> {
    let out = twist(a, mask, s, &TwistOptions::default())?;
    Ok(check_lemma1(a, &out, mask, s))
}

/// Lemma check on an already transformed matrix.
pub fn check_lemma1(before: &Tensor, after: &Tensor, mask: &TrivialMask, s: f64) -> Lemma1Report {
    let cols = before.cols();
    let elementwise = (0.0..=1.0).contains(&s);
    let rows: Vec<Lemma1Row> = (0..before.rows())
        .map(|r| {
            let (a, o, m) = (
                before.row(r),
                &after.data()[r * cols..(r + 1) * cols],
                mask.row(r),
            );
            let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let trivial_sum_after: f64 = o
                .iter()
                .zip(m)
                .filter(|(_, t)| **t)
                .map(|(v, _)| v)
                .fold(0.0, |acc, v| acc + v);
            let bound = s.abs() * max;
            let elementwise_nonincrease = elementwise.then(|| {
                a.iter()
                    .zip(o)
                    .zip(m)
                    .filter(|(_, t)| **t)
                    .all(|((x, y), _)| *y <= *x + LEMMA_ELEMENT_TOL)
            });
            let pass = trivial_sum_after.abs() <= bound + LEMMA_BOUND_TOL
                && elementwise_nonincrease.unwrap_or(true);
            Lemma1Row {
                trivial_sum_after,
                bound,
                elementwise_nonincrease,
                pass,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Lemma1Report { rows, pass }
}

/// Fixed-width histogram; bin `k` covers `[origin + k·w, origin + (k+1)·w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub origin: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    pub mass: Vec<f64>,
}

impl Histogram {
    fn new(origin: f64, bin_width: f64, bins: usize) -> Self {
        Self {
            origin,
            bin_width,
            counts: vec![0; bins],
            mass: vec![0.0; bins],
        }
    }

    fn bin_of(&self, w: f64) -> usize {
        let k = ((w - self.origin) / self.bin_width).floor().max(0.0) as usize;
        k.min(self.counts.len() - 1)
    }

    fn insert(&mut self, w: f64) {
        let k = self.bin_of(w);
        self.counts[k] += 1;
        self.mass[k] += w;
    }

    fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
    }

    pub fn bin_lower(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.bin_width
    }

    /// Mass in bins lying entirely below `threshold`.
    pub fn mass_below(&self, threshold: f64) -> f64 {
        (0..self.counts.len())
            .filter(|&k| self.bin_lower(k + 1) <= threshold + 1e-12)
            .map(|k| self.mass[k])
            .fold(0.0, |acc, m| acc + m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowStats {
    pub max: f64,
    pub total: f64,
    /// Weights `≤ threshold`.
    pub trivial_count: usize,
    pub trivial_mass: f64,
    pub histogram: Histogram,
}

impl RowStats {
    /// The accumulated trivial weight exceeds the largest single weight.
    pub fn trivial_dominates(&self) -> bool {
        self.trivial_mass > self.max
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStats {
    pub threshold: f64,
    pub bin_width: f64,
    /// All rows pooled.
    pub histogram: Histogram,
    pub rows: Vec<RowStats>,
}

/// Per-row weight histograms and trivial count/mass at an absolute
/// threshold. Bins start at 0 (or lower, if negative weights are present)
/// and extend to cover the largest weight.
pub fn attention_stats(a: &Tensor, threshold: f64, bin_width: f64) -> Result<AttentionStats> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Parameter(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let lo = a.data().iter().copied().fold(0.0, f64::min);
    let hi = a.data().iter().copied().fold(1.0, f64::max);
    let origin = (lo / bin_width).floor() * bin_width;
    let bins = (((hi - origin) / bin_width).ceil() as usize).max(1);

    let mut pooled = Histogram::new(origin, bin_width, bins);
    let rows = a
        .data()
        .chunks(a.cols())
        .map(|row| {
            let mut histogram = Histogram::new(origin, bin_width, bins);
            row.iter().for_each(|&w| histogram.insert(w));
            pooled.merge(&histogram);
            let (trivial_count, trivial_mass) = row
                .iter()
                .filter(|&&w| w <= threshold)
                .fold((0, 0.0), |(n, m), &w| (n + 1, m + w));
            RowStats {
                max: row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                total: row.iter().sum(),
                trivial_count,
                trivial_mass,
                histogram,
            }
        })
        .collect();
    Ok(AttentionStats {
        threshold,
        bin_width,
        histogram: pooled,
        rows,
    })
}

/// Aggregate trivial-attention statistics over every row of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSummary {
    pub rows: usize,
    pub mean_trivial_count: f64,
    pub mean_trivial_mass: f64,
    pub max_trivial_mass: f64,
    /// Fraction of rows whose trivial mass exceeds their maximum weight.
    pub dominated_fraction: f64,
}

impl LayerSummary {
    pub fn from_stats<'a>(stats: impl IntoIterator<Item = &'a AttentionStats>) -> Self {
        let rows: Vec<&RowStats> = stats.into_iter().flat_map(|s| &s.rows).collect();
        let n = rows.len().max(1) as f64;
        Self {
            rows: rows.len(),
            mean_trivial_count: rows.iter().map(|r| r.trivial_count as f64).sum::<f64>() / n,
            mean_trivial_mass: rows.iter().map(|r| r.trivial_mass).sum::<f64>() / n,
            max_trivial_mass: rows.iter().map(|r| r.trivial_mass).fold(0.0, f64::max),
            dominated_fraction: rows.iter().filter(|r| r.trivial_dominates()).count() as f64 / n,
        }
    }
}
