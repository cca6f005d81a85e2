//! Fixed-`s` × threshold grid search with a suppression-off baseline.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::RunConfig;
use super::train::{csv_err, load_data, train_on};
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const GRID_FILE: &str = "grid.csv";

/// Outcome of one trained cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Done {
        /// Final top-1 validation accuracy in `[0, 1]`.
        val_acc: f64,
        /// Loss of the last optimizer step (NaN when no step ran).
        final_loss: f64,
    },
    Failed(String),
}

impl Cell {
    pub fn val_acc(&self) -> Option<f64> {
        match self {
            Cell::Done { val_acc, .. } => Some(*val_acc),
            Cell::Failed(_) => None,
        }
    }

    fn csv_field(&self) -> String {
        match self {
            Cell::Done { val_acc, .. } => val_acc.to_string(),
            Cell::Failed(_) => "failed".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub s_values: Vec<f64>,
    pub t_values: Vec<f64>,
    /// `cells[i][j]` is threshold `t_values[i]` with scale `s_values[j]`.
    pub cells: Vec<Vec<Cell>>,
    /// Suppression disabled.
    pub baseline: Cell,
}

impl GridResult {
    /// Header `t\s,<s values>`, one row per threshold, then a `baseline`
    /// row repeating the suppression-off accuracy under every column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header =
            std::iter::once("t\\s".to_string()).chain(self.s_values.iter().map(f64::to_string));
        w.write_record(header).map_err(csv_err)?;
        for (t, row) in self.t_values.iter().zip(&self.cells) {
            let fields = std::iter::once(t.to_string()).chain(row.iter().map(Cell::csv_field));
            w.write_record(fields).map_err(csv_err)?;
        }
        let base = self.baseline.csv_field();
        let fields = std::iter::once("baseline".to_string())
            .chain(self.s_values.iter().map(|_| base.clone()));
        w.write_record(fields).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Configuration of one cell: fixed `s`, threshold `t`, everything else
/// from `base`, no output directory.
pub fn cell_config(base: &RunConfig, t: f64, s: f64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.sata = true;
    cfg.s_learnable = false;
    cfg.t = t;
    cfg.s = s;
    cfg.out_dir = None;
    cfg
}

pub fn baseline_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.sata = false;
    cfg.out_dir = None;
    cfg
}

fn run_cell(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Cell {
    match train_on(cfg, train, val) {
        Ok(report) => Cell::Done {
            val_acc: report.final_val_acc().unwrap_or(f64::NAN),
            final_loss: report.step_losses.last().copied().unwrap_or(f64::NAN),
        },
        Err(e) => {
            log::warn!("grid cell t={} s={} failed: {e}", cfg.t, cfg.s);
            Cell::Failed(format!("error[{}]: {e}", e.category()))
        }
    }
}

pub fn grid_search(base: &RunConfig, s_values: &[f64], t_values: &[f64]) -> Result<GridResult> {
    base.validate()?;
    let (train, val) = load_data(base)?;
    grid_search_on(base, s_values, t_values, &train, &val)
}

/// Trains every cell (in parallel, identically seeded) plus the baseline on
/// shared data. Failed cells are recorded and do not stop the grid. Writes
/// `grid.csv` when `base.out_dir` is set.
pub fn grid_search_on(
    base: &RunConfig,
    s_values: &[f64],
    t_values: &[f64],
    train: &Dataset,
    val: &Dataset,
) -> Result<GridResult> {
    if s_values.is_empty() || t_values.is_empty() {
        return Err(Error::Config(
            "grid needs at least one s and one t value".into(),
        ));
    }
    let jobs: Vec<RunConfig> = t_values
        .iter()
        .flat_map(|&t| s_values.iter().map(move |&s| (t, s)))
        .map(|(t, s)| cell_config(base, t, s))
        .chain(std::iter::once(baseline_config(base)))
        .collect();
    let mut outcomes: Vec<Cell> = jobs
        .par_iter()
        .map(|cfg| run_cell(cfg, train, val))
        .collect();
    let baseline = outcomes.pop().expect("baseline job present");
    let cells = outcomes
        .chunks(s_values.len())
        .map(<[Cell]>::to_vec)
        .collect();
    let result = GridResult {
        s_values: s_values.to_vec(),
        t_values: t_values.to_vec(),
        cells,
        baseline,
    };
    if let Some(dir) = &base.out_dir {
        write_grid(dir, &result)?;
    }
    Ok(result)
}

fn write_grid(dir: &Path, result: &GridResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(GRID_FILE), result.to_csv()?)?;
    Ok(())
}
