use std::fs;
use std::path::Path;

use super::*;
use crate::federation::RoundKind;

const ONE_FLEET: &str = r#"
batch = 32
server = "server"

[profiles.strong]
freq_mhz = 12000.0
flops_per_cycle = 10.0
rate = 800e6

[profiles.server]
freq_mhz = 42000.0
flops_per_cycle = 16.0
rate = 1000e6

[[clients]]
profile = "strong"
"#;

const ONE_SCENARIO: &str = r#"
name = "one-client"
classes = 4
test_per_class = 300

[[domains]]
kind = "gaussian-mixture-2d"
name = "a"
radius = 1.0
spread = 0.15
rotation_slots = 0
offset = [0.0, 0.0]
per_class = 400

[[groups]]
domain = 0
count = 1
samples = [400]
exclude = 0
"#;

/// Short desk run with cheap evaluation.
fn quick(epochs: usize) -> RunConfig {
    let mut c = RunConfig {
        epochs,
        ..RunConfig::default()
    };
    c.eval.n_gen = 400;
    c.ga.population = 40;
    c.ga.generations = 20;
    c
}

fn one_client(dir: &Path, epochs: usize) -> RunConfig {
    fs::write(dir.join("fleet.toml"), ONE_FLEET).unwrap();
    fs::write(dir.join("scenario.toml"), ONE_SCENARIO).unwrap();
    RunConfig {
        fleet: dir.join("fleet.toml").display().to_string(),
        scenario: dir.join("scenario.toml").display().to_string(),
        flags: parse_flags("no-clustering,no-kld").unwrap(),
        ..quick(epochs)
    }
}

#[test]
fn flags_parse_sorted_and_unknown_is_config_error() {
    let f = parse_flags(" kld-labels,no-clustering,kld-labels ").unwrap();
    assert_eq!(f, vec![Flag::NoClustering, Flag::KldLabels]);
    assert!(parse_flags("").unwrap().is_empty());
    for name in FLAG_NAMES {
        assert_eq!(name.parse::<Flag>().unwrap().to_string(), name);
    }
    assert!(matches!(parse_flags("no-clustering,bogus"), Err(Error::Config { .. })));
}

#[test]
fn config_round_trips_and_validates() {
    let mut c = quick(20);
    c.flags = vec![Flag::NoKld];
    c.federation.k = Some(3);
    let back = RunConfig::from_toml(&c.to_toml(), Path::new("x.toml")).unwrap();
    assert_eq!(back, c);

    let partial = RunConfig::from_toml("epochs = 10\n[federation]\nbeta = 0.0\n", Path::new("p.toml")).unwrap();
    assert_eq!(partial.epochs, 10);
    assert_eq!(partial.federation.beta, 0.0);
    assert_eq!(partial.epochs_per_round, 5);

    assert!(matches!(
        RunConfig::from_toml("epoch = 10\n", Path::new("typo.toml")),
        Err(Error::Parse { .. })
    ));
    for bad in ["epochs_per_round = 0\n", "epochs = 3\n", "batch = 0\n", "[federation]\nbeta = -1.0\n"] {
        assert!(RunConfig::from_toml(bad, Path::new("b.toml")).is_err(), "{bad}");
    }
}

#[test]
fn federation_config_follows_flags() {
    let mut c = RunConfig::default();
    let f = c.federation(2);
    assert_eq!((f.k, f.clustering, f.kld_weighting, f.beta), (2, true, true, 150.0));
    c.flags = parse_flags("no-clustering,no-kld,kld-labels").unwrap();
    c.federation.k = Some(4);
    let f = c.federation(2);
    assert_eq!((f.k, f.clustering, f.kld_weighting), (4, false, false));
    assert_eq!(f.source, crate::federation::KldSource::Labels);
}

#[test]
fn mismatched_fleet_is_a_config_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = one_client(dir.path(), 5);
    c.scenario = "desk-1-domain-iid".into();
    let err = Trainer::new(c).err().unwrap();
    assert_eq!(err.stage, Stage::Config);
    assert!(err.to_string().starts_with("[config]"));
}

#[test]
fn round_count_kinds_and_pass_counters() {
    let mut t = Trainer::new(quick(22)).unwrap();
    t.train_all().unwrap();
    assert_eq!(t.rounds.len(), 22 / 5);
    let kinds: Vec<RoundKind> = t.rounds.iter().map(|r| r.state.kind).collect();
    assert_eq!(
        kinds,
        vec![RoundKind::Vanilla, RoundKind::Vanilla, RoundKind::Clustered, RoundKind::Clustered]
    );
    assert_eq!(t.rounds.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    assert!(t.steps > 0);
    assert_eq!(t.d_forwards, 3 * t.steps);
    assert_eq!(t.g_forwards, 2 * t.steps);
    assert!(t.audit.messages > 0);
    assert!(t.audit.violations.is_empty(), "{:?}", t.audit.violations);
}

#[test]
fn audit_flags_a_wrong_boundary() {
    let t = Trainer::new(quick(5)).unwrap();
    let mut bus = AuditBus::new(&t.system);
    let rows = 2;
    let msg = SplitMessage {
        kind: crate::split::MessageKind::Activation,
        client: 0,
        network: Net::Discriminator,
        boundary: 1,
        payload: Tensor::zeros(&[rows, 7]),
        rows,
    };
    bus.carry(msg);
    assert_eq!(bus.messages, 1);
    assert_eq!(bus.violations.len(), 1);
}

#[test]
fn single_client_is_a_plain_split_gan() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(one_client(dir.path(), 60)).unwrap();
    t.train_all().unwrap();
    assert_eq!(t.rounds.len(), 12);
    for r in &t.rounds {
        assert_eq!(r.state.clusters, vec![vec![0]]);
        let l = r.losses[&0];
        assert!(l.d_loss.is_finite() && l.g_loss.is_finite());
    }
    // D leads for the first ~35 epochs at lr 2e-4, then settles near 1/2.
    for r in &t.rounds[7..] {
        let acc = r.losses[&0].d_accuracy;
        assert!(acc > 0.4 && acc < 0.75, "round {} D accuracy {acc}", r.state.round);
    }
}

#[test]
fn evaluation_generator_draws_from_domain_members() {
    let mut t = Trainer::new(quick(5)).unwrap();
    t.train_all().unwrap();
    let labels: Vec<usize> = (0..50).map(|i| i % 4).collect();
    let a = t.generate(1, &labels, 3).unwrap();
    assert_eq!(a.shape(), &[50, 2]);
    assert!(a.data().iter().all(|v| v.is_finite()));
    assert_eq!(a, t.generate(1, &labels, 3).unwrap());
    assert_ne!(a, t.generate(1, &labels, 4).unwrap());
}

#[test]
fn run_dir_is_complete_and_seed_repeat_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let c = quick(10);
    let sa = run(&c, &a).unwrap();
    run(&c, &b).unwrap();
    for f in ["rounds.csv", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    assert_eq!(sa.rounds, 2);
    assert_eq!(sa.d_forwards_per_step, 3.0);
    assert_eq!(sa.g_forwards_per_step, 2.0);
    assert_eq!(sa.report.domains.len(), 2);
    assert!(!a.join(".lock").exists());

    let m: RunManifest = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.status, "complete");
    assert_eq!(m.csv_schema, CSV_SCHEMA);
    let last = fs::metadata(a.join("manifest.json")).unwrap().modified().unwrap();
    for name in ["config.toml", "plan.json", "rounds.csv", "summary.json", "model.json"] {
        assert!(m.artifacts.iter().any(|x| x == name), "{name}");
    }
    for name in &m.artifacts {
        let meta = fs::metadata(a.join(name)).unwrap_or_else(|_| panic!("{name} missing"));
        assert!(meta.modified().unwrap() <= last);
    }
    assert!(m.artifacts.iter().any(|x| x.starts_with("plots/")));
    assert!(m.artifacts.iter().any(|x| x.starts_with("classifiers/")));

    let rows: Vec<RoundRow> = csv::Reader::from_path(a.join("rounds.csv"))
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect();
    assert_eq!(rows.len(), 2 * 8);
    assert!(rows.iter().all(|r| r.kind == RoundKind::Vanilla));

    let before = fs::read(a.join("plots/d_loss.csv")).unwrap();
    fs::remove_dir_all(a.join("plots")).unwrap();
    let written = regenerate_plots(&a).unwrap();
    assert!(written.iter().any(|x| x == "plots/d_loss.csv"));
    assert_eq!(fs::read(a.join("plots/d_loss.csv")).unwrap(), before);

    let reports = evaluate_dir(&a, false).unwrap();
    assert_eq!(reports, sa.report.domains);
    assert!(a.join("eval.json").exists());

    fs::remove_dir_all(a.join("classifiers")).unwrap();
    let err = evaluate_dir(&a, false).unwrap_err();
    assert_eq!(err.stage, Stage::Evaluate);
    assert!(matches!(err.source, Error::MissingClassifier { .. }));
    assert!(err.to_string().contains("--train-classifiers"));
    assert_eq!(evaluate_dir(&a, true).unwrap(), sa.report.domains);
}

#[test]
fn locked_dir_is_refused_and_failures_still_write_a_manifest() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".lock"), "").unwrap();
    let err = run(&quick(5), &dir).unwrap_err();
    assert_eq!(err.stage, Stage::Persist);
    assert!(!dir.join("manifest.json").exists());
    fs::remove_file(dir.join(".lock")).unwrap();

    let mut c = quick(5);
    c.scenario = "no-such-scenario".into();
    let err = run(&c, &dir).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage.as_deref(), Some("config"));
    assert_eq!(m.artifacts, vec!["config.toml".to_string()]);
    assert!(!dir.join(".lock").exists());
}

#[test]
fn regenerate_without_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(regenerate_plots(dir.path()), Err(Error::Io { .. })));
}

