use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use ldla_core::PixelGrid;
use serde_json::Value;

fn ldla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldla")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(o));
}

fn resolved(o: &Output) -> Value {
    let err = stderr(o);
    let marker = "resolved config:\n";
    let start = err.find(marker).expect("resolved config printed") + marker.len();
    serde_json::Deserializer::from_str(&err[start..])
        .into_iter::<Value>()
        .next()
        .unwrap()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_face(path: &Path, n: usize) {
    let mut f = PixelGrid::filled(n, n, [0.0; 3]);
    for y in 0..n {
        for x in 0..n {
            f.set(x, y, 0, 0.6 + 0.2 * x as f32 / n as f32);
            f.set(x, y, 1, 0.45 + 0.1 * y as f32 / n as f32);
            f.set(x, y, 2, 0.35);
        }
    }
    f.save_png(path).unwrap();
}

#[test]
fn usage_errors_exit_with_two() {
    let o = ldla(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(ldla(&[]).status.code(), Some(2));
    assert_eq!(ldla(&["frobnicate"]).status.code(), Some(2));
    let o = ldla(&["age", "--checkpoint", "x", "--face", "y", "--out", "z", "--ethnicity", "Asian", "--targets", "uniform:101"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ldla(&["eval", "--real", "a", "--generated", "b", "--grid", "many"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(ldla(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldla(&["train", "--set", "no_such_key=1", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
    let missing = dir.path().join("missing.ckpt");
    let o = ldla(&["serve", "--checkpoint", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:") || stderr(&o).contains("\nerror:"));
    let o = ldla(&["eval", "--real", s(&dir.path().join("r.jsonl")), "--generated", s(&dir.path().join("g.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corpus_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = ldla(&["gen-corpus", "--out", s(&out), "--n-per-zone", "5", "--zones", "forehead,glabellar", "--seed", "4"]);
        ok(&o);
        let cfg = resolved(&o);
        assert_eq!(cfg["corpus"]["n_per_zone"], 5);
        assert_eq!(cfg["corpus"]["zones"], serde_json::json!(["forehead", "glabellar"]));
        std::fs::read_to_string(out.join("manifest.jsonl")).unwrap()
    };
    let a = run("a");
    assert_eq!(a.lines().count(), 10);
    assert_eq!(a, run("b"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_per_zone": 3, "colour": "blue"}"#).unwrap();
    let o = ldla(&["gen-corpus", "--out", s(&dir.path().join("c")), "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));
}

/// Corpus, ablation training, aging and evaluation through the binary.
#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    ok(&ldla(&["gen-corpus", "--out", s(&corpus), "--n-per-zone", "8", "--zones", "forehead,glabellar", "--seed", "1"]));

    let config = d.join("train.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "manifest": corpus.join("manifest.jsonl"),
            "codec": {"kind": "pca", "patch": 16, "channels": 8, "fit_images": 16},
            "denoiser": {"latent_channels": 8, "width": 4},
            "scorenet": {"latent_channels": 8, "width": 4},
            "batch_size": 2,
            "scorenet_warmup_steps": 1
        })
        .to_string(),
    )
    .unwrap();
    let ckpt = d.join("model.ckpt");
    let log = d.join("loss.csv");
    let o = ldla(&[
        "train", "--config", s(&config), "--steps", "2", "--seed", "3",
        "--lambda-cycle", "0", "--lambda-score", "0",
        "--checkpoint-out", s(&ckpt), "--loss-log", s(&log),
    ]);
    ok(&o);
    let cfg = resolved(&o);
    assert_eq!(cfg["weights"]["lambda_cycle"], 0.0);
    assert_eq!(cfg["weights"]["lambda_score"], 0.0);
    assert_eq!(cfg["steps"], 2);
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["denoiser"]["width"], 4);
    assert!(stdout(&o).contains("checkpoint:"));
    let rows: Vec<String> = std::fs::read_to_string(&log).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols.iter().skip(1).take(4).filter(|c| !c.is_empty()).count(), 2, "{r}");
    }

    let face = d.join("face.png");
    write_face(&face, 256);
    let age = |targets: &str, out: &Path, extra: &[&str]| {
        let mut args = vec![
            "age", "--checkpoint", s(&ckpt), "--face", s(&face), "--ethnicity", "Asian",
            "--targets", targets, "--out", s(out), "--seed", "5",
        ];
        args.extend_from_slice(extra);
        ldla(&args)
    };

    let same = d.join("same.png");
    ok(&age("{}", &same, &["--no-refiner"]));
    assert_eq!(std::fs::read(&same).unwrap(), std::fs::read(&face).unwrap());

    let (u1, u2) = (d.join("u1.png"), d.join("u2.png"));
    let o = age("uniform:85", &u1, &["--gamma-inf", "10"]);
    ok(&o);
    let cfg = resolved(&o);
    let targets = cfg["targets"].as_object().unwrap();
    assert_eq!(targets.len(), 8);
    assert!(targets.values().all(|v| v.as_f64() == Some(0.85)));
    assert_eq!(cfg["params"]["gamma_n"], 0.2);
    assert_eq!(cfg["params"]["gamma_g"], 0.8);
    assert_eq!(cfg["params"]["gamma_inf"], 10);
    ok(&age("uniform:85", &u2, &["--gamma-inf", "10"]));
    let (a, b) = (std::fs::read(&u1).unwrap(), std::fs::read(&u2).unwrap());
    assert_eq!(a, b);
    let aged = PixelGrid::load_png(&u1).unwrap();
    assert_eq!((aged.width(), aged.height()), (256, 256));
    assert_ne!(aged, PixelGrid::load_png(&face).unwrap());

    let o = age(r#"{"cheek_xyz": 10}"#, &d.join("x.png"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("forehead"), "{}", stderr(&o));

    let gen = d.join("gen");
    ok(&ldla(&["gen-corpus", "--out", s(&gen), "--n-per-zone", "8", "--zones", "forehead,glabellar", "--seed", "2"]));
    let real = corpus.join("manifest.jsonl");
    let generated = gen.join("manifest.jsonl");
    let o = ldla(&["eval", "--real", s(&real), "--generated", s(&generated), "--split-reference", "--grid", "2"]);
    ok(&o);
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["fid"].as_f64().unwrap() >= 0.0);
    assert!(report["reference_fid"].is_number());
    assert!(report["mae"].is_number());
    assert_eq!(resolved(&o)["options"]["scorer"], "oracle");

    let out = d.join("report.json");
    let o = ldla(&[
        "eval", "--real", s(&real), "--generated", s(&generated), "--grid", "2",
        "--checkpoint", s(&ckpt), "--out", s(&out),
    ]);
    ok(&o);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["reference_fid"].is_null());
    assert!(report["mae"].is_number());

    serve_reports_health(&ckpt);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http_get(port: u16, path: &str) -> Option<(u16, String)> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut text = String::new();
    stream.read_to_string(&mut text).ok()?;
    let code = text.split_whitespace().nth(1)?.parse().ok()?;
    let body = text.split_once("\r\n\r\n")?.1.to_string();
    Some((code, body))
}

/// The port comes from `LDLA_PORT`.
fn serve_reports_health(ckpt: &Path) {
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ldla"))
        .args(["serve", "--checkpoint", s(ckpt), "--no-refiner", "-q"])
        .env("LDLA_PORT", port.to_string())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    let mut last = None;
    while Instant::now() < deadline {
        last = http_get(port, "/healthz");
        if matches!(last, Some((200, _))) {
            break;
        }
        std::thread::sleep(Duration::from_millis(200));
    }
    let zones = http_get(port, "/zones");
    child.kill().unwrap();
    child.wait().unwrap();

    let (code, body) = last.expect("service answered");
    assert_eq!(code, 200, "{body}");
    let health: Value = serde_json::from_str(body.trim()).unwrap();
    let expected = ldla_core::training::file_hash(ckpt).unwrap();
    assert_eq!(health["checkpoint_hash"], expected.as_str());
    let (code, body) = zones.unwrap();
    assert_eq!(code, 200);
    assert_eq!(serde_json::from_str::<Value>(body.trim()).unwrap().as_array().unwrap().len(), 8);
}
