//! End-to-end runs of the `wickmart` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const QUARTIC: &str = "0,0,0,0,1";

fn wickmart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wickmart"))
        .args(args)
        .env_remove("WICKMART_SEED")
        .output()
        .expect("binary runs")
}

fn ok_stdout(args: &[&str]) -> String {
    let out = wickmart(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn schema(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Just enough JSON Schema for the shipped schemas: type, enum, minimum,
/// required, properties, items and minItems.
fn validate(v: &Value, s: &Value, at: &str) -> Result<(), String> {
    if let Some(t) = s.get("type") {
        let types: Vec<&str> = match t {
            Value::String(t) => vec![t.as_str()],
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let fits = |t: &str| match t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            "number" => v.is_number(),
            "integer" => v.is_u64() || v.is_i64(),
            _ => false,
        };
        if !types.iter().any(|t| fits(t)) {
            return Err(format!("{at}: {v} is not {types:?}"));
        }
    }
    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.contains(v) {
            return Err(format!("{at}: {v} not in {options:?}"));
        }
    }
    if let (Some(min), Some(x)) = (s.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            return Err(format!("{at}: {x} < {min}"));
        }
    }
    if let Value::Object(map) = v {
        for key in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = key.as_str().unwrap();
            if !map.contains_key(key) {
                return Err(format!("{at}: missing {key}"));
            }
        }
        if let Some(Value::Object(props)) = s.get("properties") {
            for (k, sub) in props {
                if let Some(x) = map.get(k) {
                    validate(x, sub, &format!("{at}.{k}"))?;
                }
            }
        }
    }
    if let Value::Array(items) = v {
        if let Some(min) = s.get("minItems").and_then(Value::as_u64) {
            if (items.len() as u64) < min {
                return Err(format!("{at}: fewer than {min} items"));
            }
        }
        if let Some(sub) = s.get("items") {
            for (i, x) in items.iter().enumerate() {
                validate(x, sub, &format!("{at}[{i}]"))?;
            }
        }
    }
    Ok(())
}

fn check_schema(name: &str, json: &str) {
    let v: Value = serde_json::from_str(json).unwrap_or_else(|e| panic!("{name}: {e}\n{json}"));
    if let Err(e) = validate(&v, &schema(name), "$") {
        panic!("{name}: {e}");
    }
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn validator_rejects_bad_documents() {
    let s = schema("cone");
    assert!(validate(&serde_json::json!({"A": 3.0, "eps_table": [], "t_check_max": 50}), &s, "$").is_ok());
    assert!(validate(&serde_json::json!({"A": -1.0, "eps_table": [], "t_check_max": 50}), &s, "$").is_err());
    assert!(validate(&serde_json::json!({"A": 3.0, "t_check_max": 50}), &s, "$").is_err());
    assert!(validate(&serde_json::json!({"A": "3", "eps_table": [], "t_check_max": 50}), &s, "$").is_err());
}

#[test]
fn eval_prints_the_wick_value() {
    // x⁴ − 6x²t + 3t² at x = 2, t = 1
    assert_eq!(ok_stdout(&["wick", "eval", "--poly", QUARTIC, "--x", "2", "--t", "1"]).trim(), "-5");
    let v: Value =
        serde_json::from_str(&ok_stdout(&["wick", "eval", "--poly", QUARTIC, "--x", "2", "--t", "1", "--format", "json"]))
            .unwrap();
    assert_eq!(v["value"], serde_json::json!(-5.0));
}

#[test]
fn expand_matches_schema() {
    let out = ok_stdout(&["wick", "expand", "--poly", "0,0,1,0,1"]);
    check_schema("wick-expand", &out);
}

#[test]
fn missing_required_flag_exits_one_with_usage() {
    let out = wickmart(&["wick", "eval", "--x", "2", "--t", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--poly"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_exits_one() {
    let out = wickmart(&["envelope", "--poly", QUARTIC, "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_polynomial_is_rejected() {
    let out = wickmart(&["wick", "expand", "--poly", "0,0,2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_goes_to_stdout() {
    let out = wickmart(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("verify-all"));
}

#[test]
fn envelope_single_time_is_json() {
    check_schema("envelope", &ok_stdout(&["envelope", "--poly", QUARTIC, "--t", "1.0"]));
    let bad = wickmart(&["envelope", "--poly", QUARTIC, "--t", "1,x"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn envelope_csv_has_header() {
    let out = ok_stdout(&["envelope", "--poly", QUARTIC, "--t", "0:0.5:2"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("t,f"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn cone_file_roundtrips_and_must_match_poly() {
    let dir = tmp();
    let cone = p(dir.path(), "cone.json");
    ok_stdout(&["cone-calibrate", "--poly", QUARTIC, "--out", &cone]);
    check_schema("cone", &std::fs::read_to_string(&cone).unwrap());
    let out = ok_stdout(&["paths", "simulate", "--poly", QUARTIC, "--cone", &cone, "--paths", "20", "--tmax", "1"]);
    assert!(out.starts_with("path,d_t,d_l,d_h,q,r0,hits,ends_high,first_order_residual\n"));
    assert_eq!(out.lines().count(), 21);

    let wrong = wickmart(&["paths", "simulate", "--poly", "0,0,1,0,1", "--cone", &cone, "--paths", "2"]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn same_seed_same_bytes() {
    let args = ["paths", "simulate", "--poly", QUARTIC, "--paths", "300", "--tmax", "2", "--seed", "42"];
    let a = ok_stdout(&args);
    let b = ok_stdout(&args);
    assert_eq!(a, b);
    let mut threads = args.to_vec();
    threads.extend(["--threads", "1"]);
    assert_eq!(a, ok_stdout(&threads));
    let mut other = args.to_vec();
    let last = other.len() - 1;
    other[last] = "43";
    assert_ne!(a, ok_stdout(&other));
}

#[test]
fn seed_from_environment_and_config() {
    let args = ["paths", "simulate", "--poly", QUARTIC, "--paths", "50", "--tmax", "1"];
    let with_flag = ok_stdout(&[&args[..], &["--seed", "99"]].concat());
    let env = Command::new(env!("CARGO_BIN_EXE_wickmart"))
        .args(args)
        .env("WICKMART_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(env.stdout).unwrap(), with_flag);

    let dir = tmp();
    let cfg = p(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"seed": 99, "paths": 50, "tmax": 1.0}"#).unwrap();
    assert_eq!(ok_stdout(&["paths", "simulate", "--poly", QUARTIC, "--config", &cfg]), with_flag);
}

#[test]
fn path_level_outputs_match_schemas() {
    let hits = ["paths", "hitting-stats", "--poly", QUARTIC, "--paths", "200", "--tmax", "3", "--mmax", "3"];
    let csv = ok_stdout(&hits);
    assert!(csv.starts_with("m,mean,stderr,bound\n"), "{csv}");
    assert_eq!(csv.lines().count(), 4);
    check_schema("hitting-stats", &ok_stdout(&[&hits[..], &["--format", "json"]].concat()));
    check_schema(
        "tau-scaling",
        &ok_stdout(&["coupling", "tau", "--poly", QUARTIC, "--paths", "300", "--gaps", "0.1,0.2,0.4"]),
    );
    check_schema(
        "parallel-summary",
        &ok_stdout(&["coupling", "parallel", "--poly", QUARTIC, "--paths", "200", "--tmax", "3", "--z1", "-0.3", "--z2", "0.3"]),
    );
    let lip = ["coupling", "lipschitz", "--poly", QUARTIC, "--paths", "100", "--tmax", "2", "--dt", "0.01"];
    assert!(ok_stdout(&lip).starts_with("z,f,stderr\n"));
    check_schema("lipschitz-probe", &ok_stdout(&[&lip[..], &["--format", "json"]].concat()));
    check_schema(
        "tau-single",
        &ok_stdout(&["coupling", "tau", "--poly", QUARTIC, "--paths", "300", "--gap", "0.1"]),
    );
    check_schema("exit", &ok_stdout(&["coupling", "exit", "--z", "-0.5", "--paths", "300"]));
    check_schema(
        "exit",
        &ok_stdout(&["coupling", "exit", "--z", "-0.5", "--l", "-1", "--drift", "1", "--paths", "300"]),
    );
}

#[test]
fn field_outputs_match_schemas() {
    let dir = tmp();
    let report = p(dir.path(), "kernel.json");
    ok_stdout(&["gff", "kernel-check", "--grid", "4", "--tmax", "2", "--report", &report]);
    check_schema("kernel-report", &std::fs::read_to_string(&report).unwrap());

    let dump = p(dir.path(), "fields");
    let samples = p(dir.path(), "d.csv");
    ok_stdout(&[
        "gff", "simulate", "--poly", QUARTIC, "--grid", "4", "--t", "1", "--replicas", "1200", "--dump", &dump,
        "--dump-count", "2", "--out", &samples,
    ]);
    let csv = std::fs::read_to_string(&samples).unwrap();
    assert!(csv.starts_with("replica,d_t\n"));
    assert_eq!(csv.lines().count(), 1201);
    let header = std::fs::read_to_string(dir.path().join("fields/replica-1.bin.json")).unwrap();
    check_schema("field-header", &header);
    let raw = std::fs::read(dir.path().join("fields/replica-1.bin")).unwrap();
    assert_eq!(raw.len(), 16 * 8);

    check_schema(
        "mgf-curve",
        &ok_stdout(&["moments", "mgf", "--input", &samples, "--column", "d_t", "--alphas", "-0.1:0.05:0.1"]),
    );

    let out = ok_stdout(&["moments", "negexp", "--poly", QUARTIC, "--grid", "4", "--t", "1,2", "--replicas", "200"]);
    assert!(out.starts_with("t,estimate,stderr,ci_low,ci_high,ess,status,mean_d,jensen_ok\n"));
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn json_only_command_refuses_csv() {
    let out = wickmart(&["wick", "expand", "--poly", QUARTIC, "--format", "csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn quick_verify_writes_a_report() {
    let dir = tmp();
    let report = p(dir.path(), "verify.json");
    let out = wickmart(&["verify-all", "--profile", "quick", "--out", &report]);
    // 2 means the run completed with at least one FAIL line
    assert!(matches!(out.status.code(), Some(0 | 2)), "{out:?}");
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 15);
    let json = std::fs::read_to_string(&report).unwrap();
    check_schema("verify-report", &json);
    let v: Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 15);
    assert_eq!(out.status.code() == Some(0), v["results"].as_array().unwrap().iter().all(|r| r["pass"] == true));
}
