use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn acshadow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acshadow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sql_dump_manifest_is_dangerous() {
    let manifest = fixtures().join("sql-dump/manifest.json");
    let out = acshadow(&["run", s(&manifest)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["summary"]["impacts"], 1);
    assert_eq!(report["impacts"][0]["object"], "/db/light.sql.gz");
    assert_eq!(report["impacts"][0]["r_old"], "DENY");
    assert_eq!(report["impacts"][0]["r_new"], "ALLOW");
    let entry = &report["triage"][0];
    assert_eq!(entry["severity"], "DANGEROUS");
    assert_eq!(entry["key"]["suffix"], ".sql.gz");
}

#[test]
fn identity_change_is_clean() {
    let out = acshadow(&["run", s(&fixtures().join("sql-dump/identity.json"))]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["impacts"], Value::Array(vec![]));
}

fn manifest_in(dir: &TempDir, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let src = fixtures().join("sql-dump");
    let mut m: Value = serde_json::from_str(&fs::read_to_string(src.join("manifest.json")).unwrap()).unwrap();
    for key in ["program", "config_old", "config_new", "data", "data_delta"] {
        let abs = src.join(m[key].as_str().unwrap());
        m[key] = Value::String(abs.to_str().unwrap().into());
    }
    m["requests"]["synthesize"] = Value::String(s(&src.join("spec.json")).into());
    edit(&mut m);
    let path = dir.path().join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    path
}

#[test]
fn missing_config_names_the_path() {
    let dir = TempDir::new().unwrap();
    let manifest = manifest_in(&dir, |m| m["config_new"] = "nowhere.acdl".into());
    let out = acshadow(&["run", s(&manifest)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.acdl"));
}

#[test]
fn config_syntax_errors_carry_file_and_line() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.acdl");
    fs::write(&bad, "location /a {\n    allow from everywhere\n}\n").unwrap();
    let manifest = manifest_in(&dir, |m| m["config_new"] = s(&bad).into());
    let out = acshadow(&["run", s(&manifest)]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.acdl") && err.contains("2:"), "{err}");
}

#[test]
fn reports_are_byte_stable_and_written_to_output() {
    let dir = TempDir::new().unwrap();
    let manifest = manifest_in(&dir, |m| m["output"] = "report.json".into());
    let first = acshadow(&["run", s(&manifest), "--workers", "1"]);
    let written = fs::read(dir.path().join("report.json")).unwrap();
    let second = acshadow(&["run", s(&manifest), "--workers", "8"]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(first.stdout, written);
    let text = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.starts_with("1 impacted requests"));
}

#[test]
fn run_from_access_logs() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("access.log");
    fs::write(
        &log,
        "198.51.100.20 - [01/Jan/2024:00:00:00 +0000] \"GET /db/light.sql.gz HTTP/1.1\" 404 0\n\
         198.51.100.20 - [01/Jan/2024:00:00:01 +0000] \"GET /index.php HTTP/1.1\" 200 10\n",
    )
    .unwrap();
    let manifest = manifest_in(&dir, |m| m["requests"] = serde_json::json!({ "logs": s(&log) }));
    let out = acshadow(&["run", s(&manifest)]);
    assert_eq!(code(&out), 2);
    assert_eq!(json(&out)["summary"]["impacts"], 1);
}

#[test]
fn trimmed_run_confirms_impacts() {
    let dir = TempDir::new().unwrap();
    let tuples = dir.path().join("tuples.json");
    let allow = fixtures().join("sql-dump/drupal.acdl");
    let deny = dir.path().join("deny.acdl");
    fs::write(&deny, "root { deny from all }\n").unwrap();
    let t = serde_json::json!([{
        "request": {"subject": {"name": null}, "object": "/index.php", "action": "GET", "source_ip": "198.51.100.20"},
        "cfg_allow_path": s(&allow),
        "cfg_deny_path": "deny.acdl",
    }]);
    fs::write(&tuples, t.to_string()).unwrap();
    let manifest = manifest_in(&dir, |m| m["tuples"] = "tuples.json".into());
    let out = acshadow(&["run", s(&manifest)]);
    assert_eq!(code(&out), 2);
    assert_eq!(json(&out)["impacts"][0]["object"], "/db/light.sql.gz");
}

#[test]
fn advanced_trim_of_static_handler_has_one_probe() {
    let f = fixtures().join("static-handler");
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("accs.json");
    let out = acshadow(&[
        "trim",
        "--program",
        s(&core_fixture("static_handler.hir")),
        "--tuples",
        s(&f.join("tuples.json")),
        "--data",
        s(&f.join("data.json")),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ir = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ir.matches("probe ").count(), 1);
    assert_eq!(ir.matches("check ").count(), 1);
    let accs: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(accs["finals"][0]["tags"]["fn_name"], "file_open");
}

#[test]
fn strawman_without_sub_handlers_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let prog = dir.path().join("flat.hir");
    let text = "# flat handler\nfn main   entry {\nstart:\n    check gate directive_match ? ok : no   # gate\nok:\n    log result(gate)\n    return 200\nno:\n    log result(gate)\n    return 403\n}\n";
    fs::write(&prog, text).unwrap();
    let out_path = dir.path().join("trimmed.hir");
    let out = acshadow(&["trim", "--mode", "strawman", "--program", s(&prog), "--out", s(&out_path)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(out_path).unwrap(), text);
}

#[test]
fn contract_violating_tuples_fail() {
    let f = fixtures().join("static-handler");
    let out = acshadow(&[
        "trim",
        "--program",
        s(&core_fixture("static_handler.hir")),
        "--tuples",
        s(&f.join("swapped.json")),
        "--data",
        s(&f.join("data.json")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid trace tuple"));
}

fn trace(dir: &TempDir, config: &str, name: &str) -> PathBuf {
    let f = fixtures().join("static-handler");
    let out_path = dir.path().join(name);
    let out = acshadow(&[
        "trace",
        "--program",
        s(&core_fixture("static_handler.hir")),
        "--config",
        s(&f.join(config)),
        "--data",
        s(&f.join("data.json")),
        "--request",
        s(&f.join("request.json")),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out_path
}

#[test]
fn cfg_diff_exit_codes() {
    let dir = TempDir::new().unwrap();
    let a = trace(&dir, "allow.acdl", "allow.json");
    let d = trace(&dir, "deny.acdl", "deny.json");
    let dot = dir.path().join("merged.dot");

    let out = acshadow(&["cfg-diff", s(&a), s(&d), "--dot", s(&dot)]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["acc"]["tags"]["fn_name"], "file_open");
    assert_eq!(v["colors"]["RED"], 1);
    assert!(fs::read_to_string(dot).unwrap().starts_with("digraph"));

    let same = acshadow(&["cfg-diff", s(&a), s(&a)]);
    assert_eq!(code(&same), 3);

    let mut g: Value = serde_json::from_str(&fs::read_to_string(&d).unwrap()).unwrap();
    g["nodes"][0]["fn"] = "elsewhere".into();
    let other = dir.path().join("other.json");
    fs::write(&other, g.to_string()).unwrap();
    let disjoint = acshadow(&["cfg-diff", s(&a), s(&other)]);
    assert_eq!(code(&disjoint), 1);
}

#[test]
fn synthesize_and_empty_sources() {
    let f = fixtures().join("sql-dump");
    let out = acshadow(&["synthesize", "--spec", s(&f.join("spec.json")), "--data", s(&f.join("data.json"))]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out).as_array().unwrap().len(), 6);

    let with_change = acshadow(&[
        "synthesize",
        "--spec",
        s(&f.join("spec.json")),
        "--data",
        s(&f.join("data.json")),
        "--delta",
        s(&f.join("delta.json")),
    ]);
    assert_eq!(json(&with_change).as_array().unwrap().len(), 8);

    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"subjects": {"inline": [{"name": null}]}, "objects": {"root": "/"}, "actions": []}"#).unwrap();
    let empty = acshadow(&["synthesize", "--spec", s(&spec), "--data", s(&f.join("data.json"))]);
    assert_eq!(code(&empty), 1);
}

#[test]
fn replay_reports_rejected_lines() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("access.log");
    fs::write(
        &log,
        "10.0.0.5 alice [10/Oct/2023:13:55:36 +0000] \"GET /index.html HTTP/1.1\" 200\nnot a log line\n",
    )
    .unwrap();
    let rejected = dir.path().join("rejected.json");
    let out = acshadow(&["replay", "--log", s(&log), "--rejected", s(&rejected)]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)[0]["subject"]["name"], "alice");
    let r: Value = serde_json::from_str(&fs::read_to_string(rejected).unwrap()).unwrap();
    assert_eq!(r[0]["line"], 2);

    fs::write(&log, "garbage\nmore garbage\n").unwrap();
    let all_bad = acshadow(&["replay", "--log", s(&log)]);
    assert_eq!(code(&all_bad), 1);
}

#[test]
fn triage_follows_the_rules() {
    let dir = TempDir::new().unwrap();
    let manifest = manifest_in(&dir, |m| m["output"] = "report.json".into());
    assert_eq!(code(&acshadow(&["run", s(&manifest)])), 2);
    let report = dir.path().join("report.json");
    assert_eq!(code(&acshadow(&["triage", "--report", s(&report)])), 2);

    let rules = dir.path().join("rules.json");
    fs::write(&rules, r#"{"suffixes": [".bak"]}"#).unwrap();
    let relaxed = acshadow(&["triage", "--report", s(&report), "--rules", s(&rules)]);
    assert_eq!(code(&relaxed), 0);
    assert_eq!(json(&relaxed)["triage"][0]["severity"], "LESS_DANGEROUS");

    fs::write(&rules, r#"{"suffix": [".bak"]}"#).unwrap();
    assert_eq!(code(&acshadow(&["triage", "--report", s(&report), "--rules", s(&rules)])), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&acshadow(&["run"])), 1);
    assert_eq!(code(&acshadow(&["frobnicate"])), 1);
    assert_eq!(code(&acshadow(&["--help"])), 0);
}
