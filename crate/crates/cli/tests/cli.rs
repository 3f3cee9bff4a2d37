use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvcomm_core::model::{Model, ModelConfig};
use kvcomm_core::selection::{self, Budget, SelectionConfig};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kvcomm"));
    c.env_remove("KVCOMM_SERVER");
    c
}

fn kv(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn kvcomm")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = kv(dir, args);
    assert!(
        out.status.success(),
        "kvcomm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).expect("valid JSON")
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn assert_schema(name: &str, v: &Value) {
    let schema: Value = serde_json::from_slice(&std::fs::read(schema_dir().join(name)).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.txt"), "10 20 30 40 50 60 70 80 90 100 110 120").unwrap();
        std::fs::write(dir.path().join("q.txt"), "1 2 3 4").unwrap();
        Fixture { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn model(&self, name: &str, seed: u64, extra: &[&str]) -> Value {
        let seed = seed.to_string();
        let mut args = vec!["gen-model", "--seed", &seed, "-o", name];
        args.extend_from_slice(extra);
        json(&ok(self.path(), &args))
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path().join(name)).unwrap()
    }
}

const SMALL: &[&str] = &["--layers", "6", "--vocab", "128"];

#[test]
fn gen_model_is_reproducible_and_loadable() {
    let f = Fixture::new();
    let a = f.model("a.bin", 5, SMALL);
    let b = f.model("b.bin", 5, SMALL);
    let c = f.model("c.bin", 6, SMALL);
    assert_schema("model-info.schema.json", &a);
    assert_eq!(f.read("a.bin"), f.read("b.bin"));
    assert_eq!(a["id"], b["id"]);
    assert_ne!(a["id"], c["id"]);
    assert!(f.path().join("a.bin.meta.json").exists());

    let loaded = Model::load(f.path().join("a.bin")).unwrap();
    let config: ModelConfig = serde_json::from_value(a["config"].clone()).unwrap();
    let fresh = Model::build(config, 5).unwrap();
    let prompt = [3u32, 1, 4, 1, 5, 9, 2, 6];
    let x = loaded.generate(&prompt, &kvcomm_core::model::GenerateOptions::greedy(4)).unwrap();
    let y = fresh.generate(&prompt, &kvcomm_core::model::GenerateOptions::greedy(4)).unwrap();
    assert_eq!(x.tokens, y.tokens);
    let diff = kvcomm_core::baselines::max_logit_diff(&x.step_logits, &y.step_logits);
    assert!(diff <= 1e-7, "load-after-save logits differ by {diff}");
}

#[test]
fn calibrate_matches_library_and_reruns_identically() {
    let f = Fixture::new();
    f.model("m.bin", 2, SMALL);
    let args = ["calibrate", "--sender", "m.bin", "--receiver", "m.bin", "--context", "c.txt", "--query", "q.txt"];
    let first = ok(f.path(), &args);
    assert_eq!(first, ok(f.path(), &args));
    let set = json(&first);
    assert_schema("layer-set.schema.json", &set);

    let model = Model::load(f.path().join("m.bin")).unwrap();
    let context: Vec<u32> = (1..=12).map(|i| i * 10).collect();
    let cal = selection::calibrate(&model, &context, &[1, 2, 3, 4], &SelectionConfig::default()).unwrap();
    assert_eq!(serde_json::to_value(&cal.layers).unwrap(), set["layers"]);

    let mut all = args.to_vec();
    all.extend(["--ratio", "1.0"]);
    let set = json(&ok(f.path(), &all));
    assert_eq!(set["layers"], serde_json::json!([0, 1, 2, 3, 4, 5]));

    let cfg = SelectionConfig {
        budget: Budget::Count(2),
        alpha: 0.0,
        ..SelectionConfig::default()
    };
    let cal = selection::calibrate(&model, &context, &[1, 2, 3, 4], &cfg).unwrap();
    let mut two = args.to_vec();
    two.extend(["--m", "2", "--alpha", "0"]);
    assert_eq!(serde_json::to_value(&cal.layers).unwrap(), json(&ok(f.path(), &two))["layers"]);
}

fn tokens_of(report: &[u8]) -> Value {
    json(report)["result"]["tokens"].clone()
}

#[test]
fn run_modes_agree_with_their_anchors() {
    let f = Fixture::new();
    f.model("m.bin", 3, SMALL);
    let base = ["run", "--sender", "m.bin", "--receiver", "m.bin", "--context", "c.txt", "--query", "q.txt", "--max-new", "6"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        ok(f.path(), &a)
    };

    let none = with(&["--strategy", "none"]);
    let baseline = with(&["--baseline"]);
    assert_eq!(tokens_of(&none), tokens_of(&baseline));
    assert_schema("run-report.schema.json", &json(&none));
    assert_schema("run-report.schema.json", &json(&baseline));

    let full = with(&["--ratio", "1.0", "--compare-skyline"]);
    let skyline = with(&["--skyline"]);
    assert_eq!(tokens_of(&full), tokens_of(&skyline));
    let report = json(&full);
    assert_schema("run-report.schema.json", &report);
    assert!(report["result"]["cost"]["receiver_ratio"].is_number());

    for extra in [&["--ac", "mean"][..], &["--hs-prepend", "0,2"], &["--transport", "tcp", "--dtype", "f16"]] {
        assert_schema("run-report.schema.json", &json(&with(extra)));
    }

    // The report carries the config; feeding it back reproduces the run.
    std::fs::write(f.path().join("run.json"), serde_json::to_vec(&report["config"]).unwrap()).unwrap();
    assert_schema("run-config.schema.json", &report["config"]);
    let again = ok(f.path(), &["run", "--config", "run.json"]);
    assert_eq!(json(&again)["result"], report["result"]);
}

#[test]
fn reports_rerun_byte_identical_with_time_in_sidecar() {
    let f = Fixture::new();
    f.model("m.bin", 4, SMALL);
    let args = ["run", "--sender", "m.bin", "--receiver", "m.bin", "--context", "c.txt", "--query", "q.txt", "-o", "out/r.json"];
    ok(f.path(), &args);
    let first = f.read("out/r.json");
    ok(f.path(), &args);
    assert!(first == f.read("out/r.json"), "report changed on rerun");
    let meta = json(&f.read("out/r.json.meta.json"));
    assert!(meta["written_unix_ms"].is_u64());
}

#[test]
fn corrupted_payload_file_is_a_protocol_error() {
    let f = Fixture::new();
    f.model("m.bin", 5, SMALL);
    let run = [
        "run", "--sender", "m.bin", "--receiver", "m.bin", "--context", "c.txt", "--query", "q.txt", "--layers", "1,4",
        "--payload-out", "p.bin", "--max-new", "5",
    ];
    let report = json(&ok(f.path(), &run));

    let recv = ["run", "--receiver", "m.bin", "--query", "q.txt", "--payload-in", "p.bin", "--max-new", "5"];
    let received = json(&ok(f.path(), &recv));
    assert_schema("receive-report.schema.json", &received);
    assert_eq!(received["result"]["tokens"], report["result"]["tokens"]);
    assert_eq!(received["result"]["layers"], serde_json::json!([1, 4]));

    let mut bytes = f.read("p.bin");
    for at in [0, 30, bytes.len() / 2, bytes.len() - 1] {
        bytes[at] ^= 0x10;
        std::fs::write(f.path().join("bad.bin"), &bytes).unwrap();
        bytes[at] ^= 0x10;
        let out = kv(f.path(), &["run", "--receiver", "m.bin", "--query", "q.txt", "--payload-in", "bad.bin"]);
        assert_eq!(out.status.code(), Some(3), "flip at {at}");
    }
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let f = Fixture::new();
    f.model("m.bin", 6, SMALL);
    let missing = kv(f.path(), &["run", "--sender", "m.bin", "--receiver", "m.bin", "--context", "nope.txt", "--query", "q.txt"]);
    assert_eq!(missing.status.code(), Some(2));
    std::fs::write(f.path().join("big.txt"), "100000").unwrap();
    let vocab = kv(f.path(), &["run", "--sender", "m.bin", "--receiver", "m.bin", "--context", "c.txt", "--query", "big.txt"]);
    assert_eq!(vocab.status.code(), Some(2));
    let flag = kv(f.path(), &["run", "--bogus"]);
    assert_eq!(flag.status.code(), Some(2));
    let unreachable = kv(f.path(), &["--server", "http://127.0.0.1:9", "check", "--model", "m.bin"]);
    assert_eq!(unreachable.status.code(), Some(3));

    let out = kv(f.path(), &["check", "--model", "m.bin", "--samples", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert_schema("check.schema.json", &json(&out.stdout));
}

#[test]
fn experiments_emit_valid_grids() {
    let f = Fixture::new();
    f.model("m.bin", 7, SMALL);
    let common = ["--sender", "m.bin", "--receiver", "m.bin", "--out-dir", "g", "--context-len", "12", "--query-len", "4"];
    for kind in ["chunk", "attn-level", "token-importance", "hs-prepend", "random-vs-kvcomm", "flops-sweep"] {
        let mut args = vec!["experiment", "--kind", kind, "--draws", "3"];
        args.extend_from_slice(&common);
        ok(f.path(), &args);
        let report = json(&f.read(&format!("g/{kind}.json")));
        assert_schema("experiment-report.schema.json", &report);
        let csv = String::from_utf8(f.read(&format!("g/{kind}.csv"))).unwrap();
        let grid = &report["grid"];
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + grid["rows"].as_array().unwrap().len(), "{kind}");
        assert_eq!(
            lines[0].split(',').count(),
            1 + grid["cols"].as_array().unwrap().len(),
            "{kind}"
        );

        let long = ok(f.path(), &["plot-data", "--input", &format!("g/{kind}.json")]);
        let filled = grid["cells"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|r| r.as_array().unwrap())
            .filter(|c| !c.is_null())
            .count();
        assert_eq!(String::from_utf8(long).unwrap().lines().count(), 1 + filled, "{kind}");

        match kind {
            "chunk" => {
                let cells = grid["cells"].as_array().unwrap();
                for (i, row) in cells.iter().enumerate() {
                    for (j, cell) in row.as_array().unwrap().iter().enumerate() {
                        assert_eq!(cell.is_null(), j < i, "chunk cell ({i},{j})");
                    }
                }
            }
            "attn-level" => assert_eq!(grid["rows"].as_array().unwrap().len(), 9),
            "flops-sweep" => {
                let col = grid["cols"].as_array().unwrap().iter().position(|c| c == "receiver_prefill").unwrap();
                let vals: Vec<f64> = grid["cells"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|r| r[col].as_f64().unwrap())
                    .collect();
                assert!(vals.windows(2).all(|w| w[0] < w[1]), "{vals:?}");
            }
            _ => {}
        }
    }
    let before = f.read("g/chunk.json");
    let mut args = vec!["experiment", "--kind", "chunk", "--draws", "3"];
    args.extend_from_slice(&common);
    ok(f.path(), &args);
    assert!(before == f.read("g/chunk.json"), "chunk grid changed on rerun");
}

#[test]
fn flops_outputs() {
    let f = Fixture::new();
    let p = ["flops", "--l", "8", "--m", "3", "--d", "64", "--c", "100", "--q", "10", "--t", "4"];
    let csv = String::from_utf8(ok(f.path(), &p)).unwrap();
    assert!(csv.starts_with("method,term,flops\n"));
    let margin: i128 = csv
        .lines()
        .find(|l| l.starts_with("margin,over_skyline,"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    // |C|·d·(L(2Q+T) − M(Q+T)) under unit constants.
    assert_eq!(margin, 100 * 64 * (8 * (20 + 4) - 3 * (10 + 4)));
    let mut j = p.to_vec();
    j.extend(["--format", "json"]);
    assert_schema("flops.schema.json", &json(&ok(f.path(), &j)));

    f.model("m.bin", 8, &["--layers", "4", "--vocab", "64"]);
    let sweep = [
        "flops", "--model", "m.bin", "--c", "32", "--q", "8", "--t", "3", "--ratios", "0.25,0.5,1.0",
    ];
    let csv = String::from_utf8(ok(f.path(), &sweep)).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let mut j = sweep.to_vec();
    j.extend(["--format", "json"]);
    assert_schema("flops-sweep.schema.json", &json(&ok(f.path(), &j)));
}

#[test]
fn external_server_via_serve() {
    use std::io::{BufRead, BufReader};
    let f = Fixture::new();
    f.model("m.bin", 9, SMALL);
    let mut child = bin()
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let remote = bin()
        .current_dir(f.path())
        .env("KVCOMM_SERVER", &url)
        .args(["run", "--sender", "m.bin", "--receiver", "m.bin", "--context", "c.txt", "--query", "q.txt"])
        .output()
        .unwrap();
    let local = ok(f.path(), &["run", "--sender", "m.bin", "--receiver", "m.bin", "--context", "c.txt", "--query", "q.txt"]);
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(remote.stdout, local);
}
