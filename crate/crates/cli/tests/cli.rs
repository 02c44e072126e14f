use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::thread;

fn veye(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veye")).args(args).env("RUST_LOG", "error").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Two reach demos shared by the tests that only read a dataset.
fn dataset() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let path = dir.join("reach.veds");
        let o = veye(&["make-dataset", "--task", "reach", "--n", "2", "--out", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        path
    })
}

fn mock(dir: &Path, responses: &[&str]) -> String {
    let p = dir.join("responses.json");
    std::fs::write(&p, serde_json::to_string(responses).unwrap()).unwrap();
    format!("llm.endpoint=mock:{}", p.display())
}

#[test]
fn make_dataset_prints_keypoint_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.veds");
    let o = veye(&["make-dataset", "--task", "stack", "--n", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("keypoints"));
    assert!(out.is_file());
    let o = veye(&["make-dataset", "--task", "juggle", "--n", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_and_paths_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 1\nmodel.widht = 3\n").unwrap();
    let o = veye(&["--config", cfg.to_str().unwrap(), "gradcheck"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown config key"));
    let o = veye(&["--set", "train.lr=fast", "gradcheck"]);
    assert_eq!(code(&o), 2);
    let o = veye(&["render", "--dataset", "/nonexistent.veds", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&veye(&["frobnicate"])), 2);
}

#[test]
fn select_view_with_mock_writes_spec_and_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, transcript) = (dir.path().join("spec.json"), dir.path().join("t.json"));
    let set = mock(dir.path(), &["ELEV=-10; AZIM=0", "ELEV=90; AZIM=0"]);
    let o = veye(&[
        "--set",
        &set,
        "select-view",
        "--dataset",
        dataset().to_str().unwrap(),
        "--out",
        spec.to_str().unwrap(),
        "--transcript",
        transcript.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&spec).unwrap()).unwrap();
    assert_eq!(s["elev"], 90.0);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&transcript).unwrap()).unwrap();
    assert_eq!(t["attempts"].as_array().unwrap().len(), 2);
}

#[test]
fn exhausted_selection_exits_with_service_failure() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("t.json");
    let set = mock(dir.path(), &["the front camera", "ELEV=0; AZIM=0", "ELEV=-5; AZIM=90"]);
    let o = veye(&[
        "--set",
        &set,
        "select-view",
        "--dataset",
        dataset().to_str().unwrap(),
        "--out",
        dir.path().join("spec.json").to_str().unwrap(),
        "--transcript",
        transcript.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("SELECTION_FAILED"));
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&transcript).unwrap()).unwrap();
    assert_eq!(t["attempts"].as_array().unwrap().len(), 3);
}

/// Serves `responses` (status, body) to consecutive requests and returns the
/// raw requests it received.
fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            seen.push(head + &String::from_utf8_lossy(&buf));
            let reply =
                format!("HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}", body.len());
            stream.write_all(reply.as_bytes()).unwrap();
        }
        seen
    });
    (url, handle)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn select_view_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let (url, server) = serve(vec![(200, completion("Looking at the images, top-down works. ELEV=90; AZIM=0"))]);
    let spec = dir.path().join("spec.json");
    let endpoint = format!("llm.endpoint={url}");
    let o = Command::new(env!("CARGO_BIN_EXE_veye"))
        .args(["--set", &endpoint, "--set", "llm.api_key_env=VEYE_TEST_KEY", "--set", "llm.model=test-model"])
        .args(["select-view", "--dataset", dataset().to_str().unwrap(), "--out", spec.to_str().unwrap()])
        .args(["--transcript", dir.path().join("t.json").to_str().unwrap()])
        .env("VEYE_TEST_KEY", "sekret")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let requests = server.join().unwrap();
    assert_eq!(requests.len(), 1);
    let req = &requests[0];
    assert!(req.starts_with("POST /v1/chat/completions"));
    assert!(req.to_ascii_lowercase().contains("authorization: bearer sekret"));
    let body: serde_json::Value = serde_json::from_str(&req[req.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    assert_eq!(body["model"], "test-model");
    let images = body["messages"][0]["content"].as_array().unwrap().iter().filter(|p| p["type"] == "image_url").count();
    assert_eq!(images, 5);
}

#[test]
fn http_error_status_is_a_service_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (url, server) = serve(vec![(500, "{\"error\": \"boom\"}".into())]);
    let endpoint = format!("llm.endpoint={url}");
    let o = veye(&[
        "--set",
        &endpoint,
        "--set",
        "llm.api_key_env=",
        "select-view",
        "--dataset",
        dataset().to_str().unwrap(),
        "--out",
        dir.path().join("spec.json").to_str().unwrap(),
        "--transcript",
        dir.path().join("t.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
    assert_eq!(server.join().unwrap().len(), 1);
}

#[test]
fn render_train_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ds = dataset().to_str().unwrap();
    let views = d.join("views");
    let o = veye(&["render", "--dataset", ds, "--out-dir", views.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_dir(&views).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "depth")));

    let small = [
        "--set",
        "model.layers=1",
        "--set",
        "model.embed_dim=16",
        "--set",
        "model.heads=2",
        "--set",
        "model.hidden_dim=16",
        "--set",
        "train.steps=2",
    ];
    let ck = d.join("ck");
    let o = Command::new(env!("CARGO_BIN_EXE_veye")).args(small).args(["train", "--dataset", ds, "--out", ck.to_str().unwrap()]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["coarse.bin", "coarse.bin.json", "fine.bin", "metrics_coarse.csv", "metrics_fine.csv", "spec.json", "config.txt"] {
        assert!(ck.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(ck.join("metrics_coarse.csv")).unwrap();
    assert!(csv.starts_with("step,total,trans,rot,open,collision,depth,dyn_inf"));
    assert_eq!(csv.lines().count(), 3);

    let (report, traces) = (d.join("report.json"), d.join("traces.jsonl"));
    let o = Command::new(env!("CARGO_BIN_EXE_veye"))
        .args(["--set", "c2f.refine_policy=force_on"])
        .args(["eval", "--dataset", ds, "--checkpoints", ck.to_str().unwrap(), "--out", report.to_str().unwrap()])
        .args(["--traces", traces.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let n = r["keyframes"].as_u64().unwrap();
    assert!(n > 0);
    assert_eq!(r["forward_passes"].as_u64().unwrap(), 2 * n);
    assert_eq!(std::fs::read_to_string(&traces).unwrap().lines().count() as u64, n);

    let set = mock(d, &["ELEV=90; AZIM=0"; 8]);
    let o = Command::new(env!("CARGO_BIN_EXE_veye"))
        .args(["--set", &set])
        .args(["eval", "--dataset", ds, "--checkpoints", ck.to_str().unwrap(), "--out", report.to_str().unwrap()])
        .args(["--requery-every-k-keyframes", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    for (input, out) in [(ck.join("metrics_coarse.csv"), d.join("loss.png")), (report.clone(), d.join("err.png"))] {
        let o = veye(&["plot", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(&std::fs::read(&out).unwrap()[1..4], b"PNG");
    }
}

#[test]
fn gradcheck_exit_codes() {
    let o = veye(&["--set", "gradcheck.per_tensor=1", "gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("pass").count(), 3);
    let o = veye(&["--set", "gradcheck.per_tensor=1", "--set", "gradcheck.tolerance=0", "gradcheck"]);
    assert_eq!(code(&o), 3);
}
