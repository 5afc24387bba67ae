//! Plain-text run configuration: `key = value` lines, `#` comments, merged
//! with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::autodiff::GeluVariant;
use crate::error::{Error, Result};
use crate::focal_bias::MrfaMode;
use crate::model::{BiasMode, Preset, ViTPConfig};
use crate::train::{Normalization, OptimizerConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Directory with standard CIFAR batch files, or a single batch file.
    Cifar(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic training-set size.
    pub train_samples: usize,
    /// Synthetic held-out size.
    pub eval_samples: usize,
    pub data_seed: u64,
    pub augment: bool,
    pub norm: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_samples: 2000,
            eval_samples: 500,
            data_seed: 1,
            augment: false,
            norm: Normalization::CIFAR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ViTPConfig,
    pub optim: OptimizerConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Total optimizer steps; `None` runs `epochs` full epochs.
    pub steps: Option<u64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint cadence in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Tiny)
    }
}

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line { file: String, line: usize },
    Flag,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Line { file, line } => write!(f, "{file}:{line}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

/// Every recognized key, in emission order.
pub const KEYS: &[&str] = &[
    "preset",
    "image_px",
    "patch_px",
    "depth",
    "embed_dim",
    "heads",
    "mlp_ratio",
    "num_classes",
    "bias_mode",
    "learnable_bias",
    "decay_enabled",
    "suppression",
    "mrfa_mode",
    "gelu",
    "ln_eps",
    "dropout",
    "drop_path",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "bias_decay",
    "warmup_epochs",
    "epochs",
    "steps",
    "clip_grad",
    "label_smoothing",
    "batch_size",
    "eval_batch_size",
    "dataset",
    "data_path",
    "train_samples",
    "eval_samples",
    "data_seed",
    "augment",
    "norm_mean",
    "norm_std",
    "seed",
    "out_dir",
    "checkpoint_every",
];

fn parse_err(origin: &Origin, key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{origin}: key `{key}`: {msg}"))
}

/// Raw `key = value` pairs of a config file. Later duplicates win.
pub fn parse_lines(text: &str, file: &str) -> Result<Vec<(String, String, Origin)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = Origin::Line {
            file: file.to_string(),
            line: i + 1,
        };
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{origin}: expected `key = value`, got `{line}`")));
        };
        out.push((k.trim().to_string(), v.trim().to_string(), origin));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(origin: &Origin, key: &str, v: &str, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| parse_err(origin, key, format!("expected {what}, got `{v}`")))
}

fn float(origin: &Origin, key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(origin, key, v, "a number")?;
    if !x.is_finite() {
        return Err(parse_err(origin, key, format!("must be finite, got `{v}`")));
    }
    Ok(x)
}

fn unit_interval(origin: &Origin, key: &str, v: &str) -> Result<f64> {
    let x = float(origin, key, v)?;
    if !(0.0..1.0).contains(&x) {
        return Err(parse_err(origin, key, format!("must be in [0, 1), got {x}")));
    }
    Ok(x)
}

fn nonneg(origin: &Origin, key: &str, v: &str) -> Result<f64> {
    let x = float(origin, key, v)?;
    if x < 0.0 {
        return Err(parse_err(origin, key, format!("must be >= 0, got {x}")));
    }
    Ok(x)
}

fn positive(origin: &Origin, key: &str, v: &str) -> Result<usize> {
    let x: usize = num(origin, key, v, "a positive integer")?;
    if x == 0 {
        return Err(parse_err(origin, key, "must be positive"));
    }
    Ok(x)
}

fn boolean(origin: &Origin, key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(parse_err(origin, key, format!("expected true or false, got `{v}`"))),
    }
}

fn triple(origin: &Origin, key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(parse_err(
            origin,
            key,
            format!("expected three comma-separated numbers, got `{v}`"),
        ));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = float(origin, key, p)?;
    }
    Ok(out)
}

fn auto_or<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("auto") || v.eq_ignore_ascii_case("default") {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        RunConfig {
            preset,
            model: ViTPConfig::preset(preset),
            optim: OptimizerConfig::default(),
            data: DataConfig::default(),
            batch_size: preset.batch_size(),
            eval_batch_size: 256,
            steps: None,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }

    /// Resolves a config from file text (if any) and flag overrides.
    /// Precedence: flags, then file, then `default_out_dir` and the preset.
    pub fn resolve(
        file: Option<(&str, &str)>,
        flags: &[(String, String)],
        default_out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let mut entries: BTreeMap<String, (String, Origin)> = BTreeMap::new();
        if let Some((text, name)) = file {
            for (k, v, o) in parse_lines(text, name)? {
                entries.insert(k, (v, o));
            }
        }
        for (k, v) in flags {
            entries.insert(k.replace('-', "_"), (v.clone(), Origin::Flag));
        }
        for (k, (_, o)) in &entries {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("{o}: unknown key `{k}`")));
            }
        }
        let preset = match entries.get("preset") {
            Some((v, o)) => Preset::parse(v).ok_or_else(|| {
                parse_err(
                    o,
                    "preset",
                    format!("expected tiny, deit-tiny, deit-small or deit-base, got `{v}`"),
                )
            })?,
            None => Preset::Tiny,
        };
        let mut cfg = RunConfig::for_preset(preset);
        if let Some(dir) = default_out_dir {
            cfg.out_dir = dir;
        }
        for key in KEYS.iter().filter(|k| **k != "preset") {
            if let Some((v, o)) = entries.get(*key) {
                cfg.set(key, v, o)?;
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => {
                let lines: Vec<String> = entries
                    .iter()
                    .filter(|(k, _)| msg.contains(k.as_str()))
                    .map(|(k, (_, o))| format!("`{k}` at {o}"))
                    .collect();
                if lines.is_empty() {
                    Error::Config(msg)
                } else {
                    Error::Config(format!("{msg} ({})", lines.join(", ")))
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        Self::resolve(Some((text, file)), &[], None)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, v: &str, o: &Origin) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => {
                self.preset = Preset::parse(v).ok_or_else(|| parse_err(o, key, format!("unknown preset `{v}`")))?
            }
            "image_px" => m.image_px = positive(o, key, v)?,
            "patch_px" => m.patch_px = positive(o, key, v)?,
            "depth" => m.depth = positive(o, key, v)?,
            "embed_dim" => m.embed_dim = positive(o, key, v)?,
            "heads" => m.heads = positive(o, key, v)?,
            "mlp_ratio" => m.mlp_ratio = positive(o, key, v)?,
            "num_classes" => m.num_classes = positive(o, key, v)?,
            "bias_mode" => {
                m.bias_mode = BiasMode::parse(v)
                    .ok_or_else(|| parse_err(o, key, format!("expected none, absolute or relative, got `{v}`")))?
            }
            "learnable_bias" => m.learnable_bias = boolean(o, key, v)?,
            "decay_enabled" => m.decay_enabled = boolean(o, key, v)?,
            "suppression" => {
                let x = float(o, key, v)?;
                if x > 0.0 {
                    return Err(parse_err(o, key, format!("suppression value must be <= 0, got {x}")));
                }
                m.suppression = x;
            }
            "mrfa_mode" => {
                m.mrfa_mode =
                    MrfaMode::parse(v).ok_or_else(|| parse_err(o, key, format!("expected D, W or DW, got `{v}`")))?
            }
            "gelu" => {
                m.gelu = GeluVariant::parse(v)
                    .ok_or_else(|| parse_err(o, key, format!("expected erf or tanh, got `{v}`")))?
            }
            "ln_eps" => {
                let x = float(o, key, v)?;
                if x <= 0.0 {
                    return Err(parse_err(o, key, format!("must be > 0, got {x}")));
                }
                m.ln_eps = x;
            }
            "dropout" => m.dropout = unit_interval(o, key, v)?,
            "drop_path" => m.drop_path = unit_interval(o, key, v)?,
            "lr" => self.optim.base_lr = auto_or(v, |v| nonneg(o, key, v))?,
            "beta1" => self.optim.beta1 = unit_interval(o, key, v)?,
            "beta2" => self.optim.beta2 = unit_interval(o, key, v)?,
            "adam_eps" => self.optim.eps = nonneg(o, key, v)?,
            "weight_decay" => self.optim.weight_decay = nonneg(o, key, v)?,
            "bias_decay" => self.optim.bias_decay = auto_or(v, |v| nonneg(o, key, v))?,
            "warmup_epochs" => self.optim.warmup_epochs = nonneg(o, key, v)?,
            "epochs" => {
                let x = nonneg(o, key, v)?;
                if x == 0.0 {
                    return Err(parse_err(o, key, "must be positive"));
                }
                self.optim.epochs = x;
            }
            "steps" => self.steps = auto_or(v, |v| num(o, key, v, "a step count"))?.filter(|&s: &u64| s > 0),
            "clip_grad" => self.optim.clip_grad = nonneg(o, key, v)?,
            "label_smoothing" => self.optim.label_smoothing = unit_interval(o, key, v)?,
            "batch_size" => self.batch_size = positive(o, key, v)?,
            "eval_batch_size" => self.eval_batch_size = positive(o, key, v)?,
            "dataset" => {
                self.data.source = match v.to_ascii_lowercase().as_str() {
                    "synthetic" => DataSource::Synthetic,
                    "cifar" | "cifar-binary" => match &self.data.source {
                        DataSource::Cifar(p) => DataSource::Cifar(p.clone()),
                        DataSource::Synthetic => DataSource::Cifar(PathBuf::new()),
                    },
                    _ => return Err(parse_err(o, key, format!("expected synthetic or cifar, got `{v}`"))),
                }
            }
            "data_path" => {
                if let DataSource::Cifar(p) = &mut self.data.source {
                    *p = PathBuf::from(v);
                } else if !v.is_empty() {
                    return Err(parse_err(o, key, "data_path needs `dataset = cifar` set before it"));
                }
            }
            "train_samples" => self.data.train_samples = positive(o, key, v)?,
            "eval_samples" => self.data.eval_samples = positive(o, key, v)?,
            "data_seed" => self.data.data_seed = num(o, key, v, "an integer seed")?,
            "augment" => self.data.augment = boolean(o, key, v)?,
            "norm_mean" => self.data.norm.mean = triple(o, key, v)?,
            "norm_std" => {
                let s = triple(o, key, v)?;
                if s.iter().any(|&x| x <= 0.0) {
                    return Err(parse_err(o, key, "standard deviations must be > 0"));
                }
                self.data.norm.std = s;
            }
            "seed" => self.seed = num(o, key, v, "an integer seed")?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(o, key, v, "a step count")?,
            _ => return Err(Error::Config(format!("{o}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if let DataSource::Cifar(p) = &self.data.source {
            if p.as_os_str().is_empty() {
                return Err(Error::Config("dataset cifar needs data_path".into()));
            }
            if self.model.image_px != 32 {
                return Err(Error::Config(format!(
                    "CIFAR images are 32 px but image_px is {}",
                    self.model.image_px
                )));
            }
        }
        Ok(())
    }

    /// Fully resolved settings in `key = value` form; parses back to an
    /// equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let d = &self.data;
        let triple = |t: [f64; 3]| format!("{:?},{:?},{:?}", t[0], t[1], t[2]);
        let opt = |x: Option<f64>| x.map_or("auto".to_string(), |v| format!("{v:?}"));
        let (dataset, path) = match &d.source {
            DataSource::Synthetic => ("synthetic", String::new()),
            DataSource::Cifar(p) => ("cifar", p.display().to_string()),
        };
        let values: Vec<(&str, String)> = vec![
            ("preset", self.preset.as_str().into()),
            ("image_px", m.image_px.to_string()),
            ("patch_px", m.patch_px.to_string()),
            ("depth", m.depth.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("heads", m.heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("bias_mode", m.bias_mode.as_str().into()),
            ("learnable_bias", m.learnable_bias.to_string()),
            ("decay_enabled", m.decay_enabled.to_string()),
            ("suppression", format!("{:?}", m.suppression)),
            ("mrfa_mode", m.mrfa_mode.as_str().into()),
            ("gelu", m.gelu.as_str().into()),
            ("ln_eps", format!("{:?}", m.ln_eps)),
            ("dropout", format!("{:?}", m.dropout)),
            ("drop_path", format!("{:?}", m.drop_path)),
            ("lr", opt(o.base_lr)),
            ("beta1", format!("{:?}", o.beta1)),
            ("beta2", format!("{:?}", o.beta2)),
            ("adam_eps", format!("{:?}", o.eps)),
            ("weight_decay", format!("{:?}", o.weight_decay)),
            ("bias_decay", opt(o.bias_decay)),
            ("warmup_epochs", format!("{:?}", o.warmup_epochs)),
            ("epochs", format!("{:?}", o.epochs)),
            ("steps", self.steps.map_or("auto".into(), |s| s.to_string())),
            ("clip_grad", format!("{:?}", o.clip_grad)),
            ("label_smoothing", format!("{:?}", o.label_smoothing)),
            ("batch_size", self.batch_size.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("dataset", dataset.into()),
            ("data_path", path),
            ("train_samples", d.train_samples.to_string()),
            ("eval_samples", d.eval_samples.to_string()),
            ("data_seed", d.data_seed.to_string()),
            ("augment", d.augment.to_string()),
            ("norm_mean", triple(d.norm.mean)),
            ("norm_std", triple(d.norm.std)),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let rows = parse_lines("# header\n\nheads = 4 # trailing\n", "f").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, "heads");
        assert_eq!(rows[0].1, "4");
        assert_eq!(
            rows[0].2,
            Origin::Line {
                file: "f".into(),
                line: 3
            }
        );
    }

    #[test]
    fn missing_equals_names_the_line() {
        let err = parse_lines("depth 3\n", "cfg.txt").unwrap_err().to_string();
        assert!(err.contains("cfg.txt:1"), "{err}");
    }
}
