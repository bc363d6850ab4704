use std::path::Path;
use std::process::{Command, Output};

use contest_ite::config::RunConfig;

fn bin(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contest-ite"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, RunConfig::tiny().to_toml().unwrap()).unwrap();
    path
}

#[test]
fn staged_commands_then_resume_and_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");

    let o = bin(&["generate"], &run, Some(&cfg));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("unique drivers"), "{text}");
    let manifest = std::fs::read_to_string(run.join("dataset/manifest.toml")).unwrap();
    assert!(manifest.contains("n_contests = 3"));

    // Out of order.
    let o = bin(&["train"], &run, None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("featurize"), "{}", stderr(&o));

    for stage in ["estimate", "featurize", "train", "evaluate"] {
        let o = bin(&[stage], &run, None);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    assert!(stdout(&bin(&["config"], &run, None)).contains("[synth]"));
    let o = bin(&["simulate"], &run, None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ROI ="));

    // Existing outputs are protected.
    let o = bin(&["generate"], &run, None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = bin(&["pipeline", "--resume"], &run, None);
    assert!(o.status.success(), "{}", stderr(&o));

    // A different seed in the same directory needs --force.
    let o = bin(&["generate", "--seed", "99"], &run, None);
    assert!(!o.status.success());
    let o = bin(&["generate", "--seed", "99", "--force"], &run, None);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn pipeline_reruns_are_byte_identical_and_cli_simulate_matches_the_api() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = bin(&["pipeline"], dir, Some(&cfg));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let sa = std::fs::read(a.join("summary.json")).unwrap();
    assert_eq!(sa, std::fs::read(b.join("summary.json")).unwrap());

    let art = contest_ite::pipeline::Artifacts::load(&a).unwrap();
    let id = art.contests[2].contest_id;
    let req = tmp.path().join("req.json");
    let body = format!(r#"{{"contest_id": {id}, "overrides": {{"captain_bonus": true}}, "noise_level": "contest", "n_boot": 300, "seed": 4}}"#);
    std::fs::write(&req, &body).unwrap();
    let o = bin(&["simulate", "--request", req.to_str().unwrap()], &a, None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), contest_ite_cli::simulate_body(&art, body.as_bytes()).unwrap());

    std::fs::write(&req, "{").unwrap();
    let o = bin(&["simulate", "--request", req.to_str().unwrap()], &a, None);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("malformed"));
}

#[test]
fn serve_needs_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["serve", "--address", "127.0.0.1:0"], &tmp.path().join("nothing"), None);
    assert!(!o.status.success());
}
