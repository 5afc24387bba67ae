use std::fmt::Write as _;
use std::fs;

use rayon::prelude::*;

use crate::config::{Origin, RunConfig};
use crate::error::{Error, Result};
use crate::train::trainer::{TrainSummary, Trainer};

/// Suppression values swept with MRFA-W.
pub const SUPPRESSION_SWEEP: [f64; 6] = [-100.0, -50.0, -10.0, -5.0, -1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationGrid {
    /// {D, W, DW} × {fixed, learnable, learnable + decay}.
    Modes,
    /// MRFA-W over [`SUPPRESSION_SWEEP`].
    Suppression,
    /// Absolute versus relative bias.
    BiasMethod,
}

impl AblationGrid {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "modes" | "mode" => Some(AblationGrid::Modes),
            "suppression" => Some(AblationGrid::Suppression),
            "bias-method" | "bias_method" | "method" => Some(AblationGrid::BiasMethod),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationGrid::Modes => "modes",
            AblationGrid::Suppression => "suppression",
            AblationGrid::BiasMethod => "bias-method",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    /// Subdirectory name.
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

fn cell(name: String, kv: &[(&str, &str)]) -> AblationCell {
    AblationCell {
        name,
        overrides: kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

pub fn cells(grid: AblationGrid) -> Vec<AblationCell> {
    match grid {
        AblationGrid::Modes => {
            let training = [
                ("fixed", "false", "false"),
                ("learnable", "true", "false"),
                ("learnable-decay", "true", "true"),
            ];
            let mut out = Vec::new();
            for mode in ["D", "W", "DW"] {
                for (label, learnable, decay) in training {
                    out.push(cell(
                        format!("mrfa-{}_{label}", mode.to_ascii_lowercase()),
                        &[
                            ("mrfa_mode", mode),
                            ("learnable_bias", learnable),
                            ("decay_enabled", decay),
                        ],
                    ));
                }
            }
            out
        }
        AblationGrid::Suppression => SUPPRESSION_SWEEP
            .iter()
            .map(|v| {
                let v = format!("{v}");
                cell(format!("suppression_{v}"), &[("mrfa_mode", "W"), ("suppression", &v)])
            })
            .collect(),
        AblationGrid::BiasMethod => ["absolute", "relative"]
            .iter()
            .map(|m| cell(format!("bias_{m}"), &[("bias_mode", m)]))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: AblationCell,
    pub config: RunConfig,
    pub summary: TrainSummary,
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str =
    "cell,mrfa_mode,bias_mode,learnable_bias,decay_enabled,suppression,steps,final_train_loss,eval_acc";

/// Config of one cell: `base` with the cell's overrides and its own
/// subdirectory. Every cell keeps the base seed.
pub fn cell_config(base: &RunConfig, cell: &AblationCell) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (k, v) in &cell.overrides {
        cfg.set(k, v, &Origin::Flag)?;
    }
    cfg.out_dir = base.out_dir.join(&cell.name);
    cfg.validate()?;
    Ok(cfg)
}

/// Trains every cell of `grid` and writes `summary.csv` under the base
/// output directory. Results are in cell order whether or not the cells
/// run in parallel.
pub fn run_ablation(base: &RunConfig, grid: AblationGrid, parallel: bool) -> Result<Vec<CellResult>> {
    let cells = cells(grid);
    let configs = cells.iter().map(|c| cell_config(base, c)).collect::<Result<Vec<_>>>()?;
    let run = |(cell, cfg): (&AblationCell, &RunConfig)| -> Result<CellResult> {
        let mut t = Trainer::new(cfg.clone())?;
        let summary = t.run(&mut |_| {})?;
        Ok(CellResult {
            cell: cell.clone(),
            config: cfg.clone(),
            summary,
        })
    };
    let results: Vec<CellResult> = if parallel {
        cells
            .par_iter()
            .zip(configs.par_iter())
            .map(run)
            .collect::<Result<_>>()?
    } else {
        cells.iter().zip(configs.iter()).map(run).collect::<Result<_>>()?
    };
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let path = base.out_dir.join(SUMMARY_FILE);
    fs::write(&path, summary_csv(&results)).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

pub fn summary_csv(results: &[CellResult]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in results {
        let m = &r.config.model;
        let loss = r.summary.step_records.last().map_or(f32::NAN, |s| s.loss);
        let acc = r.summary.final_eval_acc().unwrap_or(f64::NAN);
        writeln!(
            out,
            "{},{},{},{},{},{:?},{},{:?},{:?}",
            r.cell.name,
            m.mrfa_mode.as_str(),
            m.bias_mode.as_str(),
            m.learnable_bias,
            m.decay_enabled,
            m.suppression,
            r.summary.steps,
            loss,
            acc
        )
        .unwrap();
    }
    out
}
