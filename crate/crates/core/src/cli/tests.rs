use super::*;

const SMOKE: &str = include_str!("../../configs/smoke.toml");
const DESK: &str = include_str!("../../configs/desk.toml");

#[test]
fn shipped_configs_parse_and_validate() {
    for text in [SMOKE, DESK] {
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        c.validate().unwrap();
    }
    let desk = ExperimentConfig::from_toml_str(DESK).unwrap();
    assert_eq!(desk.bench.n_list, BenchConfig::default().n_list);
    assert_eq!(desk.train.seeds.len(), 4);
}

#[test]
fn missing_field_is_a_usage_error_naming_it() {
    let text = SMOKE.replace("heads = 2\n", "");
    let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("[model]") && msg.contains("heads"), "{msg}");

    let text = SMOKE.replace("[bench]", "[benchmark]");
    let msg = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
    assert!(msg.contains("benchmark"), "{msg}");
}

#[test]
fn unknown_field_is_rejected() {
    let text = SMOKE.replace("d = 8\n", "d = 8\ndepth = 3\n");
    let msg = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
    assert!(msg.contains("depth"), "{msg}");
}

#[test]
fn overrides_reach_any_field() {
    let mut v = toml_to_value(SMOKE).unwrap();
    apply_override(&mut v, "train.peak_lr=5e-4").unwrap();
    apply_override(&mut v, "data.rule=identity").unwrap();
    apply_override(&mut v, "train.eval_steps=[5, 20]").unwrap();
    apply_override(&mut v, "injection.separate_batches=true").unwrap();
    let c = ExperimentConfig::from_value(&v).unwrap();
    assert_eq!(c.train.peak_lr, 5e-4);
    assert_eq!(c.data.rule, ReorderRule::Identity);
    assert_eq!(c.train.eval_steps, vec![5, 20]);
    assert!(c.injection.separate_batches);
    assert!(apply_override(&mut v, "nosuch.key=1").is_err());
    assert!(apply_override(&mut v, "train.peak_lr").is_err());
}

#[test]
fn presets_set_learning_rates() {
    let mut t = ExperimentConfig::from_toml_str(SMOKE).unwrap().train;
    Preset::Marathon.apply(&mut t);
    assert_eq!((t.peak_lr, t.warmup_steps), (8e-4, 120));
    Preset::Ismr.apply(&mut t);
    assert_eq!(t.peak_lr, 1e-4);
}

#[test]
fn manifest_round_trip_and_status() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig::from_toml_str(SMOKE).unwrap();
    let tpl = RunManifest { arch: Some(Arch::Prism), ..template("train", &config, dir.path()) };
    let seeds = seed_dirs(dir.path(), &[3, 4]);
    let m = Manifests::start(&tpl, dir.path(), &seeds, false).unwrap();
    let on_disk = RunManifest::read(&dir.path().join("3/manifest.json")).unwrap();
    assert_eq!(on_disk.status, RunStatus::Incomplete);
    assert_eq!(on_disk.seeds, vec![3]);
    assert_eq!(on_disk.config, config);
    assert!(matches!(Manifests::start(&tpl, dir.path(), &seeds, false), Err(CliError::Usage(_))));
    m.finish(&Err(CliError::Compute("boom".into()))).unwrap();
    let failed = RunManifest::read(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(failed.status, RunStatus::Failed);
    assert_eq!(failed.error.as_deref(), Some("boom"));
    assert!(failed.finished_unix.is_some());
}

#[test]
fn argument_parsing() {
    let cli = Cli::try_parse_from(["prism", "train", "--config", "c.toml", "--arch", "prism", "--seed", "1,2", "--preset", "marathon"])
        .unwrap();
    match cli.command {
        Command::Train { common, arch, preset, .. } => {
            assert_eq!(common.seed, vec![1, 2]);
            assert_eq!(arch, Some(Arch::Prism));
            assert_eq!(preset, Some(Preset::Marathon));
        }
        _ => panic!("wrong command"),
    }
    let err = Cli::try_parse_from(["prism", "train", "--arch", "lstm", "--config", "c.toml"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
