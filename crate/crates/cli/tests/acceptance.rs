//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitp_core::analysis::{mad_report, mean_attention_distance};
use vitp_core::config::RunConfig;
use vitp_core::focal_bias::{
    bias_histogram, build_absolute_bias, build_relative_table, materialize_relative_bias, GridShape, MrfaMode,
    SuppressionValue, WindowSchedule, WindowSpec,
};
use vitp_core::model::{model_grad_check, BiasMode, ParamKind, ViTPConfig, ViTPModel};
use vitp_core::train::trainer::{CHECKPOINT_FILE, EPOCH_METRICS_FILE, STEP_METRICS_FILE};
use vitp_core::train::{AdamW, Checkpoint, OptimizerConfig, Trainer};
use vitp_core::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn images<T: vitp_core::Scalar>(cfg: &ViTPConfig, b: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_px;
    Tensor::from_fn(vec![b, 3, s, s], |_| T::cast(rng.random_range(-1.0..1.0)))
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_correctness() -> Outcome {
    let cfg = ViTPConfig {
        depth: 2,
        embed_dim: 32,
        heads: 2,
        image_px: 16,
        patch_px: 4,
        num_classes: 3,
        bias_mode: BiasMode::Relative,
        mrfa_mode: MrfaMode::Width,
        ..ViTPConfig::default()
    };
    let start = Instant::now();
    let model = ViTPModel::<f64>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let r = model_grad_check(&model, &images(&cfg, 2, 1), &[0, 2], 1e-3, 1e-8).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let worst = r.worst.map_or("-".into(), |(n, i)| format!("{n}[{i}]"));
    check(
        r.checked > 0 && r.max_rel_err < 1e-5 && took < Duration::from_secs(60),
        format!(
            "{} coords, max rel err {:.3e} at {worst} (limit 1e-5), {}",
            r.checked,
            r.max_rel_err,
            secs(took)
        ),
    )
}

fn degeneracy_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for trial in 0..3 {
        let heads = rng.random_range(1..=3usize);
        let patch_px = rng.random_range(1..=2usize);
        let m = rng.random_range(2..=4usize);
        let cfg = ViTPConfig {
            depth: rng.random_range(1..=3),
            heads,
            embed_dim: heads * 4 * rng.random_range(1..=2usize),
            image_px: m * patch_px,
            patch_px,
            num_classes: rng.random_range(2..=5),
            mrfa_mode: MrfaMode::ALL[rng.random_range(0..3usize)],
            ..ViTPConfig::default()
        };
        let seed = rng.random();
        let biased = ViTPConfig {
            bias_mode: BiasMode::Absolute,
            suppression: 0.0,
            learnable_bias: false,
            ..cfg.clone()
        };
        let plain = ViTPConfig {
            bias_mode: BiasMode::None,
            ..cfg.clone()
        };
        let x = images::<f32>(&cfg, 3, trial);
        let a = ViTPModel::<f32>::new(&biased, seed)
            .and_then(|m| m.logits(&x))
            .map_err(|e| e.to_string())?;
        let b = ViTPModel::<f32>::new(&plain, seed)
            .and_then(|m| m.logits(&x))
            .map_err(|e| e.to_string())?;
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs() as f64);
        }
    }
    let took = start.elapsed();
    check(
        worst < 1e-6 && took < Duration::from_secs(30),
        format!("3 configs, max abs diff {worst:.3e}, {}", secs(took)),
    )
}

fn init_equivalence() -> Outcome {
    let v = SuppressionValue::new(-100.0).map_err(|e| e.to_string())?;
    let mut pairs = 0;
    for m in [2usize, 4, 8] {
        let grid = GridShape::new(m, 1).map_err(|e| e.to_string())?;
        for w in (3..=2 * m - 1).step_by(2) {
            let spec = WindowSpec::new(w, grid).map_err(|e| e.to_string())?;
            let abs = build_absolute_bias::<f32>(spec, grid, v, false);
            let table = build_relative_table::<f32>(spec, grid, v);
            let rel = materialize_relative_bias(&table, grid, false).map_err(|e| e.to_string())?;
            let same = abs.shape() == rel.shape()
                && abs
                    .data()
                    .iter()
                    .zip(rel.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("m={m} w={w} differs"));
            }
            pairs += 1;
        }
    }
    check(pairs == 1 + 3 + 7, format!("{pairs} (m, w) pairs bitwise equal"))
}

fn decay_law() -> Outcome {
    let model = ViTPModel::<f32>::new(&ViTPConfig::default(), 0).map_err(|e| e.to_string())?;
    let mut params = model.params().clone();
    let oc = OptimizerConfig {
        weight_decay: 0.0,
        bias_decay: Some(0.01),
        ..Default::default()
    };
    let mut opt = AdamW::new(&params, &oc, true);
    for _ in 0..100 {
        let zeros: Vec<Option<Vec<f32>>> = params
            .iter()
            .map(|p| p.trainable.then(|| vec![0.0; p.tensor.numel()]))
            .collect();
        opt.step(&mut params, &zeros, 1.0).map_err(|e| e.to_string())?;
    }
    let expected = -100.0 * 0.99f64.powi(100);
    let (mut n, mut worst) = (0usize, 0f64);
    for (p, p0) in params.iter().zip(model.params()) {
        if p.kind != ParamKind::FocalBias {
            continue;
        }
        for (&x, &x0) in p.tensor.data().iter().zip(p0.tensor.data()) {
            if x0 != 0.0 {
                worst = worst.max(((x as f64 - expected) / expected).abs());
                n += 1;
            }
        }
    }
    check(
        n > 0 && worst < 1e-6,
        format!("{n} suppressed entries, max rel err {worst:.3e} vs {expected:.6}"),
    )
}

/// Nearest odd integer to `p / q`, ties up: `2·floor(p / 2q) + 1`.
fn odd_of_ratio(p: usize, q: usize) -> usize {
    2 * (p / (2 * q)) + 1
}

fn interpolate(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![hi];
    }
    let q = count - 1;
    (0..count).map(|i| odd_of_ratio(lo * q + i * (hi - lo), q)).collect()
}

fn oracle(mode: MrfaMode, layers: usize, heads: usize, m: usize) -> Vec<Vec<usize>> {
    let g = 2 * m - 1;
    match mode {
        MrfaMode::Width => vec![interpolate(3, g, heads); layers],
        MrfaMode::Depth => interpolate(3, g, layers).into_iter().map(|s| vec![s; heads]).collect(),
        MrfaMode::DepthWidth => interpolate(3, g, layers)
            .into_iter()
            .map(|lo| interpolate(lo, g, heads))
            .collect(),
    }
}

fn invariants_hold(mode: MrfaMode, sides: &[Vec<usize>], m: usize) -> bool {
    let g = 2 * m - 1;
    let (l, h) = (sides.len(), sides[0].len());
    let all_valid = sides.iter().flatten().all(|&s| s % 2 == 1 && (3..=g).contains(&s));
    let rows_sorted = sides.iter().all(|r| r.windows(2).all(|w| w[0] <= w[1]));
    let mins: Vec<usize> = sides.iter().map(|r| r[0]).collect();
    let mins_sorted = mins.windows(2).all(|w| w[0] <= w[1]);
    let shape_ok = match mode {
        MrfaMode::Width => {
            rows_sorted
                && sides.iter().all(|r| r[h - 1] == g && (h == 1 || r[0] == 3))
                && sides.windows(2).all(|w| w[0] == w[1])
        }
        MrfaMode::Depth => {
            sides.iter().all(|r| r.iter().all(|&s| s == r[0]))
                && mins_sorted
                && mins[l - 1] == g
                && (l == 1 || mins[0] == 3)
        }
        MrfaMode::DepthWidth => {
            rows_sorted && mins_sorted && sides.iter().all(|r| r[h - 1] == g) && (l == 1 || h == 1 || mins[0] == 3)
        }
    };
    all_valid && shape_ok
}

fn schedule_oracle() -> Outcome {
    let grid = GridShape::new(16, 1).map_err(|e| e.to_string())?;
    let w = WindowSchedule::build(MrfaMode::Width, 1, 12, grid).map_err(|e| e.to_string())?;
    let row = w.side_matrix().remove(0);
    if row != [3, 5, 9, 11, 13, 15, 19, 21, 23, 25, 29, 31] {
        return Err(format!("m=16 H=12 width schedule is {row:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for draw in 0..20 {
        let (l, h, m) = (
            rng.random_range(1..=12),
            rng.random_range(1..=12),
            rng.random_range(2..=16),
        );
        let grid = GridShape::new(m, 1).map_err(|e| e.to_string())?;
        for mode in MrfaMode::ALL {
            let s = WindowSchedule::build(mode, l, h, grid)
                .map_err(|e| e.to_string())?
                .side_matrix();
            if s != oracle(mode, l, h, m) || !invariants_hold(mode, &s, m) {
                return Err(format!("draw {draw}: {mode} L={l} H={h} m={m} gave {s:?}"));
            }
        }
    }
    Ok("m=16 H=12 exact; 20 draws x 3 modes match oracle and invariants".into())
}

fn histogram_oracle() -> Outcome {
    let (m, w) = (4usize, 3usize);
    let grid = GridShape::new(m, 1).map_err(|e| e.to_string())?;
    let spec = WindowSpec::new(w, grid).map_err(|e| e.to_string())?;
    let v = SuppressionValue::new(-100.0).map_err(|e| e.to_string())?;
    let bias = build_absolute_bias::<f64>(spec, grid, v, false);
    // in-window pairs factor over rows and columns
    let per_axis: usize = (0..m).map(|r| (r + 1).min(m - 1) - r.saturating_sub(1) + 1).sum();
    let zeros = per_axis * per_axis;
    let suppressed = m.pow(4) - zeros;
    let h = bias_histogram(bias.data().iter().copied(), 2, -100.0, 0.0).map_err(|e| e.to_string())?;
    let counted = (
        bias.data().iter().filter(|&&x| x == 0.0).count(),
        bias.data().iter().filter(|&&x| x == -100.0).count(),
    );
    check(
        (zeros, suppressed) == (100, 156) && counted == (100, 156) && h.counts() == [156, 100],
        format!(
            "zeros {} at 0, {} at -100, histogram {:?}",
            counted.0,
            counted.1,
            h.counts()
        ),
    )
}

fn mad_properties() -> Outcome {
    let mut lines = Vec::new();
    for (heads, embed_dim) in [(2usize, 32usize), (3, 48)] {
        let cfg = ViTPConfig {
            heads,
            embed_dim,
            mrfa_mode: MrfaMode::Width,
            suppression: -100.0,
            ..ViTPConfig::default()
        };
        let model = ViTPModel::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
        let report = mad_report(&model, &images(&cfg, 8, 3)).map_err(|e| e.to_string())?;
        let p = cfg.patch_px as f64;
        for l in 0..cfg.depth {
            for h in 1..heads {
                let (a, b) = (report.get(l, h - 1).unwrap(), report.get(l, h).unwrap());
                if b.mad_px < a.mad_px - 1e-6 {
                    return Err(format!("H={heads} layer {l}: head {h} MAD {} < {}", b.mad_px, a.mad_px));
                }
            }
        }
        for r in &report.rows {
            let bound = p * 2f64.sqrt() * (r.window_side_at_init - 1) as f64 / 2.0;
            if r.mad_px > bound + 1e-6 {
                return Err(format!("{r:?} exceeds {bound}"));
            }
        }
        lines.push(format!("H={heads} ok"));
    }
    let grid = GridShape::new(2, 2).map_err(|e| e.to_string())?;
    let u = mean_attention_distance(&Tensor::<f64>::full(vec![1, 4, 4], 0.25), grid).map_err(|e| e.to_string())?;
    check(
        (u - 1.70711).abs() < 1e-4,
        format!("{}; uniform 2x2 MAD {u:.5}", lines.join(", ")),
    )
}

fn smoke_config(dir: &Path) -> Result<RunConfig, String> {
    let text = format!(
        "steps = 500\nepochs = 16\nwarmup_epochs = 1\nlr = 0.001\nweight_decay = 0.05\nseed = 0\nout_dir = {}\n",
        dir.display()
    );
    RunConfig::parse(&text, "smoke").map_err(|e| e.to_string())
}

fn smoke_training() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut t = Trainer::new(smoke_config(dir.path())?).map_err(|e| e.to_string())?;
    let s = t.run(&mut |_| {}).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let (first, last) = s.loss_window_means(10).ok_or("no loss records")?;
    let acc = s.final_eval_acc().ok_or("no evaluation")?;
    let chance = 1.0 / t.cfg.model.num_classes as f64;
    check(
        s.steps == 500 && last < 0.5 * first && acc > 2.0 * chance && took < Duration::from_secs(600),
        format!(
            "{} steps, loss {first:.3} -> {last:.3} (first/last 10 mean), held-out acc {acc:.3}, {}",
            s.steps,
            secs(took)
        ),
    )
}

fn vitp(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vitp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("vitp {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn complete_csv(path: &Path, rows: usize) -> bool {
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let lines: Vec<&str> = text.lines().collect();
    let cols = lines.first().map_or(0, |h| h.split(',').count());
    lines.len() == rows + 1 && lines.iter().all(|l| l.split(',').count() == cols && !l.contains("NaN"))
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fast = [
        "--steps",
        "8",
        "--epochs",
        "2",
        "--warmup-epochs",
        "1",
        "--train-samples",
        "64",
        "--eval-samples",
        "32",
        "--batch-size",
        "16",
    ];
    let mut report = Vec::new();
    for (grid, expected) in [("modes", 9usize), ("suppression", 6)] {
        let out = dir.path().join(grid);
        let out_s = out.display().to_string();
        let mut args = vec!["ablate", "--grid", grid, "--out-dir", &out_s];
        args.extend(fast);
        let summary = vitp(&args)?;
        let cells: Vec<String> = summary
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect();
        if cells.len() != expected {
            return Err(format!("{grid}: {} cells, expected {expected}", cells.len()));
        }
        for c in &cells {
            let d = out.join(c);
            if !(complete_csv(&d.join(STEP_METRICS_FILE), 8)
                && complete_csv(&d.join(EPOCH_METRICS_FILE), 2)
                && d.join("config.txt").is_file())
            {
                return Err(format!("{grid}: incomplete outputs in {}", d.display()));
            }
        }
        report.push(format!("{grid}: {expected} run dirs"));
    }
    Ok(format!("{} with complete metrics", report.join(", ")))
}

fn persistence() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = |d: &Path| -> Result<RunConfig, String> {
        let text = format!(
            "depth = 1\nembed_dim = 16\nheads = 2\nimage_px = 8\npatch_px = 2\nnum_classes = 4\n\
             train_samples = 64\neval_samples = 32\nbatch_size = 16\nepochs = 3\nwarmup_epochs = 1\n\
             lr = 0.002\naugment = true\ndropout = 0.1\ncheckpoint_every = 5\nout_dir = {}\n",
            d.display()
        );
        RunConfig::parse(&text, "persist").map_err(|e| e.to_string())
    };
    let err = |e: vitp_core::Error| e.to_string();
    let mut full = Trainer::new(cfg(a.path())?).map_err(err)?;
    full.run(&mut |_| {}).map_err(err)?;

    let mut first = Trainer::new(cfg(b.path())?).map_err(err)?;
    first.run_until(7, &mut |_| {}).map_err(err)?;
    let path = b.path().join(CHECKPOINT_FILE);
    let ck = Checkpoint::load(&path).map_err(err)?;
    let on_disk = fs::read(&path).map_err(|e| e.to_string())?;
    let again = Checkpoint::from_bytes(&ck.to_bytes(), &path).map_err(err)?;
    let bitwise = on_disk == ck.to_bytes() && again == ck;
    let mut resumed = Trainer::from_checkpoint(&ck, None).map_err(err)?;
    resumed.run(&mut |_| {}).map_err(err)?;

    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap_or_default();
    let same_metrics = read(a.path(), STEP_METRICS_FILE) == read(b.path(), STEP_METRICS_FILE)
        && read(a.path(), EPOCH_METRICS_FILE) == read(b.path(), EPOCH_METRICS_FILE);
    let same_params = full.model.params() == resumed.model.params();
    check(
        bitwise && same_metrics && same_params && ck.step == 5,
        format!(
            "checkpoint bitwise {bitwise}; resumed from step {} metrics identical {same_metrics}, params identical {same_params}",
            ck.step
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("degeneracy equivalence", degeneracy_equivalence),
        ("absolute/relative init equivalence", init_equivalence),
        ("bias decay law", decay_law),
        ("schedule oracle", schedule_oracle),
        ("histogram oracle", histogram_oracle),
        ("MAD properties", mad_properties),
        ("smoke training", smoke_training),
        ("ablation harness", ablation_harness),
        ("persistence", persistence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2}. {name}: {detail}", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
