use vitp_core::config::{DataSource, RunConfig, KEYS};
use vitp_core::focal_bias::MrfaMode;
use vitp_core::model::{BiasMode, Preset, ViTPConfig};
use vitp_core::Error;

fn flags(kv: &[(&str, &str)]) -> Vec<(String, String)> {
    kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn config_err(r: vitp_core::Result<RunConfig>) -> String {
    match r {
        Err(Error::Config(m)) => m,
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn empty_file_gives_tiny_desk_defaults() {
    let cfg = RunConfig::parse("", "empty").unwrap();
    assert_eq!(cfg.preset, Preset::Tiny);
    assert_eq!(cfg.model, ViTPConfig::preset(Preset::Tiny));
    assert_eq!((cfg.model.depth, cfg.model.embed_dim, cfg.model.heads), (2, 32, 2));
    assert_eq!(cfg.model.grid().unwrap().m(), 4);
    assert_eq!(cfg.data.source, DataSource::Synthetic);
}

#[test]
fn positive_suppression_is_rejected_with_line() {
    let msg = config_err(RunConfig::parse("# c\nsuppression = 5\n", "run.cfg"));
    assert!(msg.contains("suppression") && msg.contains("run.cfg:2"), "{msg}");
}

#[test]
fn flags_override_file_values() {
    let cfg = RunConfig::resolve(
        Some(("heads = 3\nembed_dim = 48\n", "f")),
        &flags(&[("heads", "12")]),
        None,
    );
    let cfg = cfg.unwrap();
    assert_eq!(cfg.model.heads, 12);
    assert_eq!(cfg.model.embed_dim, 48);
}

#[test]
fn dashed_flag_names_are_accepted() {
    let cfg = RunConfig::resolve(None, &flags(&[("mrfa-mode", "DW"), ("bias-mode", "absolute")]), None).unwrap();
    assert_eq!(cfg.model.mrfa_mode, MrfaMode::DepthWidth);
    assert_eq!(cfg.model.bias_mode, BiasMode::Absolute);
}

#[test]
fn unknown_key_and_type_errors_name_key_and_line() {
    let msg = config_err(RunConfig::parse("depth = 2\nwidth = 3\n", "a.cfg"));
    assert!(msg.contains("`width`") && msg.contains("a.cfg:2"), "{msg}");
    let msg = config_err(RunConfig::parse("\n\ndepth = two\n", "b.cfg"));
    assert!(msg.contains("`depth`") && msg.contains("b.cfg:3"), "{msg}");
    let msg = config_err(RunConfig::resolve(None, &flags(&[("dropout", "1.5")]), None));
    assert!(msg.contains("`dropout`") && msg.contains("command line"), "{msg}");
}

#[test]
fn invariant_violations_cite_their_keys() {
    let msg = config_err(RunConfig::parse("image_px = 16\npatch_px = 3\n", "c.cfg"));
    assert!(msg.contains("patch_px") && msg.contains("c.cfg:2"), "{msg}");
    let msg = config_err(RunConfig::parse("heads = 5\n", "d.cfg"));
    assert!(msg.contains("heads") && msg.contains("d.cfg:1"), "{msg}");
    let msg = config_err(RunConfig::parse("epochs = 10\nwarmup_epochs = 20\n", "e.cfg"));
    assert!(msg.contains("warmup_epochs"), "{msg}");
}

#[test]
fn preset_sets_dimensions_and_batch_size() {
    let cfg = RunConfig::parse("preset = deit-small\n", "p").unwrap();
    assert_eq!((cfg.model.depth, cfg.model.embed_dim, cfg.model.heads), (12, 384, 6));
    assert_eq!(cfg.batch_size, 128);
    let cfg = RunConfig::parse("preset = deit-base\ndepth = 4\n", "p").unwrap();
    assert_eq!(cfg.model.depth, 4);
    assert_eq!(cfg.batch_size, 64);
}

#[test]
fn resolved_text_round_trips() {
    let text = "preset = deit-tiny\ndepth = 3\nmrfa_mode = DW\nsuppression = -10\nlr = 0.002\nbias_decay = 0.1\n\
                dataset = cifar\ndata_path = /data/cifar\nnorm_mean = 0.5, 0.5, 0.5\ngelu = tanh\nsteps = 40\n";
    let cfg = RunConfig::parse(text, "r").unwrap();
    let emitted = cfg.to_text();
    assert_eq!(emitted.lines().count(), KEYS.len());
    let back = RunConfig::parse(&emitted, "emitted").unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_text(), emitted);
    let default = RunConfig::default();
    assert_eq!(RunConfig::parse(&default.to_text(), "d").unwrap(), default);
}

#[test]
fn default_out_dir_yields_to_file_value() {
    let cfg = RunConfig::resolve(None, &[], Some("/tmp/env".into())).unwrap();
    assert_eq!(cfg.out_dir, std::path::PathBuf::from("/tmp/env"));
    let cfg = RunConfig::resolve(Some(("out_dir = here\n", "f")), &[], Some("/tmp/env".into())).unwrap();
    assert_eq!(cfg.out_dir, std::path::PathBuf::from("here"));
}

#[test]
fn cifar_needs_a_path() {
    let msg = config_err(RunConfig::parse("preset = deit-tiny\ndataset = cifar\n", "f"));
    assert!(msg.contains("data_path"), "{msg}");
}
