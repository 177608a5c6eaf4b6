use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sharenav_core::service::protocol::{decode_message, encode_message, read_frame, write_frame, ServerMessage};
use sharenav_core::service::ClientMessage;
use sharenav_core::world::load_episode_dir;

const TINY: &str = r#"
seed = 1

[corpus]
corridor = 2
straight = 1
yjunction = 1
seed = 40

[pretrain]
epochs = 1

[stage1]
epochs = 1

[stage2]
epochs = 1
"#;

fn sharenav(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sharenav")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_label_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let eps = dir.path().join("episodes");
    let labels = dir.path().join("labels");
    let ckpt = dir.path().join("model.ckpt");
    let report = dir.path().join("eval.json");

    sharenav(&["generate", "--config", p(&cfg), "--out", p(&eps)]);
    assert_eq!(load_episode_dir(&eps).unwrap().len(), 4);
    sharenav(&["autolabel", "--episodes", p(&eps), "--out", p(&labels)]);
    // Labels written next to episodes are not mistaken for episodes.
    sharenav(&["autolabel", "--episodes", p(&eps), "--out", p(&eps)]);
    assert_eq!(load_episode_dir(&eps).unwrap().len(), 4);
    assert!(labels.join("manifest.json").exists());

    sharenav(&["train", "--config", p(&cfg), "--episodes", p(&eps), "--labels", p(&labels), "--out", p(&ckpt)]);
    let metrics = std::fs::read_to_string(dir.path().join("model.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");

    sharenav(&[
        "eval", "--checkpoint", p(&ckpt), "--episodes", p(&eps), "--mode", "arrowing", "--takeover-duration", "2", "--seed", "3",
        "--report", p(&report),
    ]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["mode"], "arrowing");
    assert_eq!(json["takeover_duration"], 2.0);
    let table = std::fs::read_to_string(dir.path().join("eval.shared_control.csv")).unwrap();
    assert!(table.starts_with("mode,duration_s,ho_percent"));
    assert_eq!(table.lines().count(), 5);
    assert!(dir.path().join("eval.open_loop.csv").exists());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sharenav"))
        .args(["eval", "--checkpoint", "/nonexistent", "--episodes", p(dir.path()), "--mode", "point", "--report", "r.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = Command::new(env!("CARGO_BIN_EXE_sharenav")).args(["eval", "--mode", "fly"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn defaults_parse_back() {
    let out = sharenav(&["defaults", "train"]);
    sharenav_core::training::TrainConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let out = sharenav(&["defaults", "session"]);
    sharenav_core::service::SessionConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
}

fn recv(s: &mut TcpStream) -> ServerMessage {
    decode_message(&read_frame(s).unwrap().expect("message")).unwrap()
}

#[test]
fn serve_records_one_session() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    sharenav(&["train", "--config", p(&cfg), "--out", p(&ckpt)]);
    let session = dir.path().join("session.json");
    std::fs::write(&session, r#"{"max_frames": 30}"#).unwrap();
    let record = dir.path().join("rec");

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut server = Command::new(env!("CARGO_BIN_EXE_sharenav"))
        .args(["serve", "--checkpoint", p(&ckpt), "--seed", "5", "--config", p(&session), "--max-sessions", "1", "--fast"])
        .env("SHARENAV_PORT", port.to_string())
        .env("SHARENAV_RECORD_DIR", p(&record))
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let start = Instant::now();
    let mut s = loop {
        match TcpStream::connect(("127.0.0.1", port)) {
            Ok(s) => break s,
            Err(_) if start.elapsed() < Duration::from_secs(20) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("server did not come up: {e}"),
        }
    };
    assert!(matches!(recv(&mut s), ServerMessage::Hello { .. }));
    write_frame(&mut s, &encode_message(&ClientMessage::SetTexting { phrase: "go straight".into() })).unwrap();
    let mut frames = 0;
    let summary = loop {
        match recv(&mut s) {
            ServerMessage::Frame(_) => frames += 1,
            ServerMessage::Summary(sum) => break sum,
            _ => {}
        }
    };
    assert!(server.wait().unwrap().success());
    assert_eq!((frames, summary.frames), (30, 30));
    let logged = load_episode_dir(&record).unwrap();
    assert_eq!(logged.len(), 1);
    assert_eq!(logged[0].1.frames.len(), 30);
}
