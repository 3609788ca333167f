mod support;

use steplab::harness::config::StagesConfig;
use steplab::harness::pipeline::{PRM_CKPT, RFT_CKPT, RL_CKPT, SFT_CKPT};
use steplab::harness::{run_pipeline, ExperimentConfig};
use steplab::rl::{GroupDump, GROUP_DUMP_FILE};
use steplab::Params;

#[test]
fn identical_runs_write_identical_files() {
    let cfg = support::quick_config(3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_pipeline(&cfg, a.path()).unwrap();
    let sb = run_pipeline(&cfg, b.path()).unwrap();
    assert_eq!(sa.text, sb.text);
    let (fa, fb) = (support::all_files(a.path()), support::all_files(b.path()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs");
    }
    for f in [
        SFT_CKPT,
        PRM_CKPT,
        RFT_CKPT,
        RL_CKPT,
        "metrics.csv",
        "summary.txt",
        "rl_metrics.csv",
        "eval.csv",
    ] {
        assert!(fa.contains_key(f), "missing {f}");
    }
    let v = support::determinism_check(&cfg);
    assert!(v.pass, "{}", v.detail);
}

#[test]
fn group_dump_carries_ratios_and_advantages() {
    let cfg = support::quick_config(4);
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(GROUP_DUMP_FILE)).unwrap();
    let rows: Vec<GroupDump> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let iters: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.iteration).collect();
    assert_eq!(iters.into_iter().collect::<Vec<_>>(), vec![0, 10]);
    assert_eq!(rows.len(), 2 * cfg.rl.queries_per_iter * cfg.rl.group_size);
    for r in &rows {
        for t in &r.tokens {
            assert!((t.rho - 1.0).abs() < 1e-12);
            assert!((t.a_total - (t.a_out + cfg.rl.beta * t.a_proc)).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoints_survive_a_round_trip() {
    let cfg = support::quick_config(5);
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, dir.path()).unwrap();
    let path = dir.path().join(RL_CKPT);
    let bytes = std::fs::read(&path).unwrap();
    let again = dir.path().join("again.json");
    Params::load(&path).unwrap().save(&again).unwrap();
    assert_eq!(bytes, std::fs::read(&again).unwrap());
}

#[test]
fn reinforcement_without_a_verifier_names_the_stage() {
    let cfg = ExperimentConfig {
        stages: StagesConfig {
            sft: false,
            search: false,
            prm: false,
            rft: false,
            rl: true,
            ..Default::default()
        },
        ..support::quick_config(6)
    };
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.stage(), Some("train-rl"), "{err}");
    assert!(err.to_string().contains("train-rl"), "{err}");
}
