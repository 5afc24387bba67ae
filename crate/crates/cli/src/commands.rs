use std::fs;
use std::path::{Path, PathBuf};

use vitp_core::analysis::{mad_report, model_bias_histogram};
use vitp_core::config::RunConfig;
use vitp_core::model::{model_grad_check, ViTPModel};
use vitp_core::train::ablate::summary_csv;
use vitp_core::train::trainer::{evaluate, load_datasets, load_model};
use vitp_core::train::{run_ablation, AblationGrid, Checkpoint, Dataset, Trainer};
use vitp_core::{Error, Tensor};

use crate::{Command, ConfigArgs, OUT_DIR_ENV};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_CHECKPOINT: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

fn config_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_INTERNAL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn checkpoint_error(e: Error) -> CliError {
    CliError {
        code: EXIT_CHECKPOINT,
        message: e.to_string(),
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `--key value` and `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(config_error(format!("expected `--key value`, got `{a}`")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| config_error(format!("override `--{key}` is missing a value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn resolve(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut flags = parse_overrides(&args.overrides)?;
    if let Some(d) = &args.out_dir {
        flags.push(("out_dir".into(), d.display().to_string()));
    }
    let text = match &args.config {
        Some(p) => {
            Some(fs::read_to_string(p).map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?)
        }
        None => None,
    };
    let name = args
        .config
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let default_out = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    Ok(RunConfig::resolve(
        text.as_deref().map(|t| (t, name.as_str())),
        &flags,
        default_out,
    )?)
}

fn open_model(path: &Path) -> CliResult<(RunConfig, ViTPModel<f32>)> {
    if !path.is_file() {
        return Err(CliError {
            code: EXIT_CHECKPOINT,
            message: format!("checkpoint not found: {}", path.display()),
        });
    }
    let (cfg, model, _) = load_model(path).map_err(checkpoint_error)?;
    Ok((cfg, model))
}

fn write_output(output: Option<&Path>, text: &str) -> CliResult<()> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn first_images(data: &Dataset, n: usize) -> Tensor<f32> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    data.batch(&idx).0
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train { resume, log_every, cfg } => train(resume, log_every, &cfg),
        Command::Eval { checkpoint, split } => {
            let (cfg, model) = open_model(&checkpoint)?;
            let (train, test) = load_datasets(&cfg)?;
            let data = match split.as_str() {
                "test" | "eval" => test,
                "train" => train,
                other => return Err(config_error(format!("unknown split `{other}` (train or test)"))),
            };
            let acc = evaluate(&model, &data, cfg.eval_batch_size)?;
            println!("split={split} samples={} eval_acc={acc}", data.len());
            Ok(())
        }
        Command::Mad {
            checkpoint,
            batch,
            output,
        } => {
            let (cfg, model) = open_model(&checkpoint)?;
            let (_, eval) = load_datasets(&cfg)?;
            let report = mad_report(&model, &first_images(&eval, batch.max(1)))?;
            write_output(output.as_deref(), &report.to_csv())
        }
        Command::BiasHist {
            checkpoint,
            bins,
            lo,
            hi,
            output,
        } => {
            let range = match (lo, hi) {
                (Some(l), Some(h)) => Some((l, h)),
                (None, None) => None,
                _ => return Err(config_error("--lo and --hi must be given together")),
            };
            let (_, model) = open_model(&checkpoint)?;
            let h = model_bias_histogram(&model, bins, range)?;
            write_output(output.as_deref(), &h.to_csv())
        }
        Command::Schedule { cfg } => {
            let cfg = resolve(&cfg)?;
            let s = cfg.model.schedule()?;
            print!("{s}");
            Ok(())
        }
        Command::Gradcheck {
            eps,
            threshold,
            tol,
            batch,
            cfg,
        } => {
            let cfg = resolve(&cfg)?;
            let (train, _) = load_datasets(&cfg)?;
            let idx: Vec<usize> = (0..batch.clamp(1, train.len())).collect();
            let (x, y) = train.batch(&idx);
            let model = ViTPModel::<f64>::new(&cfg.model, cfg.seed)?;
            let r = model_grad_check(&model, &x.cast::<f64>(), &y, eps, threshold)?;
            let worst = r.worst.as_ref().map_or("-".to_string(), |(n, i)| format!("{n}[{i}]"));
            println!(
                "checked={} skipped={} eps={eps:e} max_rel_err={:e} worst={worst}",
                r.checked, r.skipped, r.max_rel_err
            );
            if r.passes(tol) {
                Ok(())
            } else {
                Err(CliError {
                    code: EXIT_INTERNAL,
                    message: format!("gradient check failed: max rel err {:e} >= {tol:e}", r.max_rel_err),
                })
            }
        }
        Command::Ablate { grid, parallel, cfg } => {
            let g = AblationGrid::parse(&grid)
                .ok_or_else(|| config_error(format!("unknown grid `{grid}` (modes, suppression, bias-method)")))?;
            let base = resolve(&cfg)?;
            let results = run_ablation(&base, g, parallel)?;
            print!("{}", summary_csv(&results));
            Ok(())
        }
    }
}

fn train(resume: Option<PathBuf>, log_every: u64, args: &ConfigArgs) -> CliResult<()> {
    let mut trainer = match resume {
        Some(path) => {
            if !args.overrides.is_empty() || args.config.is_some() {
                return Err(config_error(
                    "--resume uses the checkpoint's config; drop --config and overrides",
                ));
            }
            if !path.is_file() {
                return Err(CliError {
                    code: EXIT_CHECKPOINT,
                    message: format!("checkpoint not found: {}", path.display()),
                });
            }
            let ckpt = Checkpoint::load(&path).map_err(checkpoint_error)?;
            let dir = args.out_dir.clone().or_else(|| path.parent().map(Path::to_path_buf));
            Trainer::from_checkpoint(&ckpt, dir).map_err(|e| match e {
                Error::Config(_) => CliError::from(e),
                other => checkpoint_error(other),
            })?
        }
        None => Trainer::new(resolve(args)?)?,
    };
    let total = trainer.total_steps();
    let summary = trainer.run(&mut |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == total) {
            eprintln!("step {:>6}/{total}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;
    if summary.step_records.is_empty() {
        eprintln!("run already complete at step {}", summary.steps);
    }
    let loss = summary.step_records.last().map_or(f32::NAN, |s| s.loss);
    let acc = summary.final_eval_acc().unwrap_or(f64::NAN);
    println!(
        "steps={} final_train_loss={loss} eval_acc={acc} out_dir={}",
        summary.steps,
        trainer.cfg.out_dir.display()
    );
    Ok(())
}
