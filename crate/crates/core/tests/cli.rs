//! End-to-end runs of the `hindcaus` binary on tiny settings.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hindcaus"));
    c.env("HINDCAUS_LOG", "warn");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A copy of a shipped config with a short training schedule.
fn tiny_config(dir: &Path, encoder: &str) -> PathBuf {
    let text = std::fs::read_to_string(config("chain3_noisy_hidden.toml")).unwrap();
    let text = text
        .replace("steps = 10000", "steps = 30")
        .replace("lr_milestones = [4000, 8000]", "lr_milestones = [20]")
        .replace("cmi_period = 100", "cmi_period = 10")
        .replace("batch_size = 32", "batch_size = 8")
        .replace("encoder = \"dvae_full\"", &format!("encoder = \"{encoder}\""))
        .replace("train_episodes = 10000", "train_episodes = 64")
        .replace("eval_episodes = 1000", "eval_episodes = 40");
    let path = dir.join(format!("{encoder}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn gen_data(cfg: &Path, out: &Path) {
    ok(bin().args(["gen-data", "--config"]).arg(cfg).arg("--out").arg(out).args(["--workers", "2"]).output().unwrap());
}

fn train(cfg: &Path, data: &Path, out: &Path, seed: u64) -> String {
    ok(bin()
        .args(["train", "--config"])
        .arg(cfg)
        .arg("--data")
        .arg(data.join("train.jsonl"))
        .arg("--out")
        .arg(out)
        .args(["--seed", &seed.to_string()])
        .output()
        .unwrap())
}

#[test]
fn shipped_configs_parse() {
    for name in ["chain3_noisy_hidden.toml", "chain3_noisy_obs.toml", "five_chain.toml", "five_full.toml"] {
        hindcaus::trainer::ExperimentConfig::load(&config(name)).unwrap();
    }
}

#[test]
fn identical_seeds_give_identical_runs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "dvae_full");
    let data = tmp.path().join("data");
    gen_data(&cfg, &data);
    let runs: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("run{k}"))).collect();
    for r in &runs {
        train(&cfg, &data, r, 7);
    }
    for f in ["metrics.csv", "cmi_history.csv", "graph.json"] {
        assert_eq!(
            std::fs::read(runs[0].join(f)).unwrap(),
            std::fs::read(runs[1].join(f)).unwrap(),
            "{f} differs"
        );
    }

    let report = tmp.path().join("report");
    let out = ok(bin()
        .arg("eval")
        .arg("--run")
        .args(&runs)
        .arg("--data")
        .arg(data.join("eval.jsonl"))
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap());
    assert!(out.contains("graph_accuracy"));
    let tables = hindcaus::eval::read_tables(&report.join("tables.csv")).unwrap();
    // Two identical runs: zero spread everywhere.
    assert!(tables.values().all(|s| s.std == 0.0 && s.n == 2));
    let rep: hindcaus::eval::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert!(rep.partial, "2 of 3 expected seeds");

    let figs = tmp.path().join("figs");
    ok(bin().args(["export-figures", "--run"]).arg(&runs[0]).arg("--out").arg(&figs).output().unwrap());
    assert!(figs.join("cmi_step_000010.svg").exists());
    assert!(figs.join("loss_curves.csv").exists());
}

#[test]
fn every_encoder_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&tiny_config(tmp.path(), "history"), &data);
    for enc in ["history", "current_1step", "current_full", "dvae_1step", "dvae_full"] {
        let cfg = tiny_config(tmp.path(), enc);
        let run = tmp.path().join(enc);
        let out = train(&cfg, &data, &run, 0);
        assert!(out.contains(&format!("encoder = \"{enc}\"")), "{out}");
        assert!(run.join("graph.json").exists());
    }
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "dvae_full");
    let missing = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(tmp.path().join("nope.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.jsonl"));

    let bad_encoder = bin().args(["train", "--config"]).arg(&cfg).args(["--encoder", "lstm"]).output().unwrap();
    assert_eq!(bad_encoder.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_encoder.stderr).contains("dvae_full"));

    let no_config = bin().args(["gen-data", "--config"]).arg(tmp.path().join("x.toml")).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(no_config.status.code(), Some(2));
}

#[test]
fn mismatched_environment_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&tiny_config(tmp.path(), "dvae_full"), &data);
    let obs = std::fs::read_to_string(config("chain3_noisy_obs.toml")).unwrap();
    let obs_cfg = tmp.path().join("obs.toml");
    std::fs::write(&obs_cfg, obs).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&obs_cfg)
        .arg("--data")
        .arg(data.join("train.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selfcheck_passes() {
    let out = ok(bin().arg("selfcheck").output().unwrap());
    assert!(out.contains("0 failed"), "{out}");
}
