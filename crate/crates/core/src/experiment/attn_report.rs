//! Per-layer, per-head attention statistics before and after suppression.
//!
//! For each captured attention matrix, every row gets its maximum weight,
//! the count and mass of weights at or below an absolute threshold, the
//! same mass read back from the histogram, and the trivial mass after the
//! suppression transform with the layer's `s` (1 for models trained
//! without suppression) together with its bound `s · max`. The last two
//! columns describe the mask the model itself applied during the forward
//! pass, if any.

use std::fs;
use std::path::Path;

use super::train::csv_err;
use crate::attention::AttentionProbe;
use crate::error::{Error, Result};
use crate::sata::{attention_stats, check_lemma1, twist, Histogram, TrivialMask, TwistOptions};
use crate::tensor::{Tape, Tensor};
use crate::vit::{load_checkpoint, vit_forward, ModelState, ViTConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub image: usize,
    pub row: usize,
    pub max_weight: f64,
    pub trivial_count: usize,
    pub trivial_mass: f64,
    /// Mass of histogram bins lying below the threshold.
    pub hist_trivial_mass: f64,
    pub suppressed_trivial_mass: f64,
    pub s: f64,
    pub bound: f64,
    pub lemma_ok: bool,
    pub model_trivial_count: usize,
    pub model_trivial_mass_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTable {
    pub layer: usize,
    pub head: usize,
    pub rows: Vec<ReportRow>,
    /// Pooled over all rows and images, before suppression.
    pub histogram_before: Histogram,
    pub histogram_after: Histogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub threshold: f64,
    pub bin_width: f64,
    /// Ordered by layer, then head.
    pub tables: Vec<HeadTable>,
}

impl AttentionReport {
    pub fn table(&self, layer: usize, head: usize) -> Option<&HeadTable> {
        self.tables
            .iter()
            .find(|t| t.layer == layer && t.head == head)
    }

    pub fn all_rows_within_bound(&self) -> bool {
        self.tables.iter().flat_map(|t| &t.rows).all(|r| r.lemma_ok)
    }
}

fn check_bins(threshold: f64, bin_width: f64) -> Result<()> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(Error::Parameter(format!(
            "threshold must be non-negative, got {threshold}"
        )));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Parameter(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let ratio = threshold / bin_width;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Parameter(format!(
            "threshold {threshold} must be a whole number of bins of width {bin_width}"
        )));
    }
    Ok(())
}

/// Runs `images` through the model and tabulates every attention head.
pub fn attention_report(
    state: &ModelState,
    model: &ViTConfig,
    images: &Tensor,
    threshold: f64,
    bin_width: f64,
) -> Result<AttentionReport> {
    check_bins(threshold, bin_width)?;
    let mut tape = Tape::new();
    let params = state.register(&mut tape, false);
    let mut probe = AttentionProbe::default();
    vit_forward(&mut tape, images, &params, model, Some(&mut probe))?;
    tape.check_finite()?;

    let mut tables: Vec<HeadTable> = Vec::new();
    for rec in &probe.records {
        let before = &rec.before;
        let s = rec.scale.unwrap_or(1.0);
        let bits = before.data().iter().map(|&w| w <= threshold).collect();
        let mask = TrivialMask::from_bits(before.rows(), before.cols(), bits)?;
        let after = twist(before, &mask, s, &TwistOptions::default())?;
        let lemma = check_lemma1(before, &after, &mask, s);
        let stats = attention_stats(before, threshold, bin_width)?;
        let stats_after = attention_stats(&after, threshold, bin_width)?;

        let rows = stats
            .rows
            .iter()
            .zip(&lemma.rows)
            .enumerate()
            .map(|(r, (st, lm))| {
                let (model_trivial_count, model_trivial_mass_after) = match &rec.mask {
                    Some(m) => {
                        let marked = m.row(r);
                        let mass = rec
                            .after
                            .row(r)
                            .iter()
                            .zip(marked)
                            .filter(|(_, t)| **t)
                            .map(|(v, _)| v)
                            .fold(0.0, |acc, v| acc + v);
                        (marked.iter().filter(|t| **t).count(), mass)
                    }
                    None => (0, 0.0),
                };
                ReportRow {
                    image: rec.image,
                    row: r,
                    max_weight: st.max,
                    trivial_count: st.trivial_count,
                    trivial_mass: st.trivial_mass,
                    hist_trivial_mass: st.histogram.mass_below(threshold),
                    suppressed_trivial_mass: lm.trivial_sum_after,
                    s,
                    bound: lm.bound,
                    lemma_ok: lm.pass,
                    model_trivial_count,
                    model_trivial_mass_after,
                }
            });

        match tables
            .iter_mut()
            .find(|t| t.layer == rec.layer && t.head == rec.head)
        {
            Some(table) => {
                table.rows.extend(rows);
                merge_into(&mut table.histogram_before, &stats.histogram);
                merge_into(&mut table.histogram_after, &stats_after.histogram);
            }
            None => tables.push(HeadTable {
                layer: rec.layer,
                head: rec.head,
                rows: rows.collect(),
                histogram_before: stats.histogram,
                histogram_after: stats_after.histogram,
            }),
        }
    }
    tables.sort_by_key(|t| (t.layer, t.head));
    Ok(AttentionReport {
        threshold,
        bin_width,
        tables,
    })
}

/// Adds `other` into `acc`, growing `acc` if `other` has more bins. Both
/// share the origin 0 grid whenever weights are non-negative.
fn merge_into(acc: &mut Histogram, other: &Histogram) {
    if other.counts.len() > acc.counts.len() {
        acc.counts.resize(other.counts.len(), 0);
        acc.mass.resize(other.mass.len(), 0.0);
    }
    for (k, (&c, &m)) in other.counts.iter().zip(&other.mass).enumerate() {
        acc.counts[k] += c;
        acc.mass[k] += m;
    }
}

pub fn head_file(layer: usize, head: usize) -> String {
    format!("attn_layer{layer}_head{head}.csv")
}

pub fn hist_file(layer: usize, head: usize) -> String {
    format!("attn_layer{layer}_head{head}_hist.csv")
}

pub const ROW_HEADER: [&str; 12] = [
    "image",
    "row",
    "max_weight",
    "trivial_count",
    "trivial_mass",
    "hist_trivial_mass",
    "suppressed_trivial_mass",
    "s",
    "bound",
    "lemma_ok",
    "model_trivial_count",
    "model_trivial_mass_after",
];

pub fn write_report(dir: &Path, report: &AttentionReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    for table in &report.tables {
        let mut w = csv::Writer::from_path(dir.join(head_file(table.layer, table.head)))
            .map_err(csv_err)?;
        w.write_record(ROW_HEADER).map_err(csv_err)?;
        for r in &table.rows {
            w.write_record([
                r.image.to_string(),
                r.row.to_string(),
                r.max_weight.to_string(),
                r.trivial_count.to_string(),
                r.trivial_mass.to_string(),
                r.hist_trivial_mass.to_string(),
                r.suppressed_trivial_mass.to_string(),
                r.s.to_string(),
                r.bound.to_string(),
                r.lemma_ok.to_string(),
                r.model_trivial_count.to_string(),
                r.model_trivial_mass_after.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(hist_file(table.layer, table.head)))
            .map_err(csv_err)?;
        w.write_record(["stage", "bin_lower", "bin_upper", "count", "mass"])
            .map_err(csv_err)?;
        for (stage, h) in [
            ("before", &table.histogram_before),
            ("after", &table.histogram_after),
        ] {
            for k in 0..h.counts.len() {
                w.write_record([
                    stage.to_string(),
                    h.bin_lower(k).to_string(),
                    h.bin_lower(k + 1).to_string(),
                    h.counts[k].to_string(),
                    h.mass[k].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Loads a checkpoint, tabulates its attention on `images`, and writes the
/// CSV files when `out_dir` is given.
pub fn export_attention_report(
    checkpoint: &Path,
    images: &Tensor,
    threshold: f64,
    bin_width: f64,
    out_dir: Option<&Path>,
) -> Result<AttentionReport> {
    let (model, state) = load_checkpoint(checkpoint)?;
    let report = attention_report(&state, &model, images, threshold, bin_width)?;
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}
