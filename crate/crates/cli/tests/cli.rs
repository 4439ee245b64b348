use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_retouch");
const SHORT: [&str; 8] = ["--steps", "10", "--lambda1", "2", "--lambda2", "3", "--blend-start", "6"];

/// Frozen mask hashes for `mask-debug` on the square fixture with the short schedule.
const MASK_DEBUG_GOLDEN: [(&str, &str); 4] = [
    ("composite", "8e0c7265352aecc5e51d3266039ebe3864df60befc23a2ee86bbea34961d898e"),
    ("cross_attn", "7173c253fe0e23091f6fb575ca3f18c2565bd2b0b37794911f8283b8b0268252"),
    ("segmenter", "2f16fd4f8921827ea1269d190a38ccb6791e86ea5cab05fa9ce65b6d21ab8234"),
    ("union", "38479a3c6def4485814ed700c7b89588b7e142af087acd6f6c52a33b0ade3448"),
];

fn retouch(args: &[&str]) -> Output {
    retouch_env(args, &[])
}

fn retouch_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for var in ["RETOUCH_SEGMENTER", "RETOUCH_IMAGE_EMBEDDER", "RETOUCH_TEXT_EMBEDDER", "RETOUCH_CLASSIFIER"] {
        cmd.env_remove(var);
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn with_short<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SHORT).collect()
}

fn record(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("record.json")).unwrap()).unwrap()
}

fn hashes(rec: &Value) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for group in ["latents", "masks", "images"] {
        for (name, r) in rec[group].as_object().unwrap() {
            out.insert(format!("{group}/{name}"), r["sha256"].as_str().unwrap().to_string());
        }
    }
    out
}

/// 64x64 PPM with a bright square on a dark gradient.
fn write_square_fixture(path: &Path) {
    let mut bytes = b"P6\n64 64\n255\n".to_vec();
    for r in 0..64usize {
        for c in 0..64usize {
            let inside = (20..44).contains(&r) && (16..40).contains(&c);
            let v = if inside { 230 } else { (r + c) as u8 / 4 };
            bytes.extend_from_slice(&[v, v / 2 + 10, v]);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_images_and_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&retouch(&with_short(&["generate", "--out", s(tmp.path()), "--run-id", "g"])));
    let dir = tmp.path().join("g");
    assert_eq!(PathBuf::from(out.trim()), dir.join("record.json"));
    for f in ["images/layout.ppm", "images/target.ppm", "images/reference.ppm", "latents/target_z0.ltr"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let rec = record(&dir);
    assert_eq!(rec["retouch_steps"].as_array().unwrap().len(), 10);
    assert_eq!(rec["layout_steps"].as_array().unwrap().len(), 10);
}

#[test]
fn generate_is_deterministic_across_processes() {
    let tmp = tempfile::tempdir().unwrap();
    for id in ["a", "b"] {
        ok(&retouch(&with_short(&["generate", "--out", s(tmp.path()), "--run-id", id, "--seed", "7"])));
    }
    let (a, b) = (hashes(&record(&tmp.path().join("a"))), hashes(&record(&tmp.path().join("b"))));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    ok(&retouch(&with_short(&["generate", "--out", s(tmp.path()), "--run-id", "c", "--seed", "8"])));
    assert_ne!(a["latents/target_z0"], hashes(&record(&tmp.path().join("c")))["latents/target_z0"]);
}

#[test]
fn default_run_directory_is_named_after_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&retouch(&with_short(&["layout", "--out", s(tmp.path()), "--seed", "3"])));
    let path = PathBuf::from(out.trim());
    let name = path.parent().unwrap().file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.starts_with("layout-s3-"), "{name}");
}

#[test]
fn sweep_writes_one_record_per_value_and_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_short(&["sweep-lambda1", "--values", "0,3,5,10", "--out", s(tmp.path()), "--run-id", "sw"]);
    let stdout = ok(&retouch(&args));
    let dir = tmp.path().join("sw");
    for v in [0, 3, 5, 10] {
        assert!(dir.join(format!("lambda1-{v}/seed-0/record.json")).is_file(), "lambda1={v}");
    }
    let table = std::fs::read_to_string(dir.join("table.tsv")).unwrap();
    assert_eq!(table, stdout);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("lambda1\truns\tidentity"));
    let first_cols: Vec<&str> = lines[1..].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(first_cols, ["0", "3", "5", "10"]);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("table.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn mask_debug_writes_the_four_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = tmp.path().join("square.ppm");
    write_square_fixture(&fixture);
    ok(&retouch(&with_short(&["mask-debug", "--layout", s(&fixture), "--out", s(tmp.path()), "--run-id", "m"])));
    let dir = tmp.path().join("m");
    let rec = record(&dir);
    for (name, golden) in MASK_DEBUG_GOLDEN {
        let file = dir.join(format!("masks/{name}.pgm"));
        let bytes = std::fs::read(&file).unwrap();
        assert!(bytes.starts_with(b"P5"), "{name}");
        let recorded = rec["masks"][name]["sha256"].as_str().unwrap();
        assert_eq!(recorded, golden, "{name}");
        assert_eq!(recorded, sha256_hex(&bytes), "{name}");
    }
}

#[test]
fn dry_run_prints_the_schedule_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&retouch(&with_short(&["generate", "--dry-run", "--out", s(tmp.path())])));
    let doc: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(doc["config"]["T"], 10);
    let sched = doc["schedule"].as_array().unwrap();
    assert_eq!(sched.len(), 10);
    assert_eq!(sched[0]["timestep"], 10);
    assert_eq!(sched[9]["blend"], true);
    assert_eq!(sched[4]["blend"], false);
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn set_overrides_and_config_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&retouch(&with_short(&["layout", "--dry-run", "--set", "ca_threshold=0.5", "--set", "swap_layers=[0,2]"])));
    let doc: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(doc["config"]["ca_threshold"], 0.5);
    assert_eq!(doc["config"]["swap_layers"], serde_json::json!([0, 2]));

    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"T": 20, "lambda1": 4, "lambda2": 5, "blend_start": 12}"#).unwrap();
    let out = ok(&retouch(&["layout", "--dry-run", "--config", s(&cfg), "--lambda1", "6"]));
    let doc: Value = serde_json::from_str(&out).unwrap();
    assert_eq!((doc["config"]["T"].as_u64(), doc["config"]["lambda1"].as_u64()), (Some(20), Some(6)));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(retouch(&["generate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(retouch(&["generate", "--lambda1", "99", "--dry-run"]).status.code(), Some(1));
    let out = retouch(&with_short(&["layout", "--set", "nonsense=1", "--dry-run"]));
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
    assert_eq!(retouch(&["--help"]).status.code(), Some(0));

    let missing = tmp.path().join("missing.ppm");
    let out = retouch(&with_short(&["mask-debug", "--layout", s(&missing), "--out", s(tmp.path())]));
    assert_eq!(out.status.code(), Some(2));

    let out = retouch_env(
        &with_short(&["generate", "--out", s(tmp.path())]),
        &[("RETOUCH_SEGMENTER", "subprocess:false")],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("segmentation"));
}

#[test]
fn external_denoiser_matches_the_toy_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let personalized = format!("{BIN} serve-toy --seed 4");
    let vanilla = format!("{BIN} serve-toy --seed 4 --identity vanilla");
    let short = ["--steps", "4", "--lambda1", "1", "--lambda2", "1", "--blend-start", "2", "--seed", "4"];
    let base = ["layout", "--out", s(tmp.path())];
    let mut toy: Vec<&str> = base.iter().copied().chain(short).collect();
    toy.extend(["--run-id", "toy"]);
    ok(&retouch(&toy));
    let mut ext: Vec<&str> = base.iter().copied().chain(short).collect();
    ext.extend(["--run-id", "ext", "--denoiser", &personalized, "--vanilla-denoiser", &vanilla]);
    ok(&retouch(&ext));
    let (a, b) = (hashes(&record(&tmp.path().join("toy"))), hashes(&record(&tmp.path().join("ext"))));
    assert_eq!(a, b);

    let out = retouch(&with_short(&["layout", "--dry-run", "--denoiser", &personalized]));
    assert_eq!(out.status.code(), Some(0));
    let out = retouch(&with_short(&["layout", "--out", s(tmp.path()), "--denoiser", &personalized]));
    assert_eq!(out.status.code(), Some(1));
}
