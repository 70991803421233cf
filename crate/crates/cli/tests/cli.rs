use std::path::PathBuf;

use asymrls::bpsk::{error_probability, ordinary_point, Theta2Variant};
use asymrls_cli::{run, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn invoke(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["asymrls"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn csv_rows(text: &str) -> Vec<std::collections::HashMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines.map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect()).collect()
}

fn temp(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("asymrls-cli-{}-{name}", std::process::id()))
}

#[test]
fn predict_matches_bpsk_closed_forms() {
    let (code, out, err) = invoke(&["predict", "--config", &config("bpsk_ridge.json")]);
    assert_eq!(code, EXIT_OK, "{err}");
    let rows = csv_rows(&out);
    let get = |r: &std::collections::HashMap<String, String>, k: &str| r[k].parse::<f64>().unwrap();
    let sign = rows.iter().find(|r| r["distortion"] == "sign_error").unwrap();
    let lambda = get(sign, "lambda_engine");
    let closed = ordinary_point(lambda, 1.0, 0.1, Theta2Variant::VALIDATED).unwrap();
    assert!((get(sign, "tau") - closed.tau).abs() <= 1e-8);
    assert!((get(sign, "theta2") - closed.theta * closed.theta).abs() <= 1e-8);
    assert!((get(sign, "prediction") - closed.p_e).abs() <= 1e-8);
    assert!((closed.p_e - error_probability(get(sign, "theta2").sqrt())).abs() <= 1e-8);
}

#[test]
fn missing_config_is_a_config_error() {
    let (code, _, err) = invoke(&["predict", "--config", "/no/such/dir/config.json"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("/no/such/dir/config.json"), "{err}");
}

#[test]
fn invalid_config_names_the_field() {
    let path = temp("bad.json");
    let text = std::fs::read_to_string(config("two_block.json")).unwrap().replace("\"sigma2\": 0.05", "\"sigma2\": -1.0");
    std::fs::write(&path, text).unwrap();
    let (code, _, err) = invoke(&["tune", "--config", path.to_str().unwrap()]);
    std::fs::remove_file(&path).ok();
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("sigma2"), "{err}");
}

#[test]
fn unconverged_fixed_point_exits_with_numerical_code() {
    let path = temp("short.json");
    let text = std::fs::read_to_string(config("two_block.json"))
        .unwrap()
        .replace("\"seed\": 1", "\"seed\": 1, \"replica\": {\"max_iter\": 2}");
    std::fs::write(&path, text).unwrap();
    let (code, _, err) = invoke(&["predict", "--config", path.to_str().unwrap()]);
    std::fs::remove_file(&path).ok();
    assert_eq!(code, EXIT_NUMERICAL, "{err}");
}

#[test]
fn bpsk_curves_are_monotone() {
    let (code, out, err) = invoke(&["bpsk-curve", "--rho", "0.7", "--rho", "1.0"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let rows = csv_rows(&out);
    for rho in ["0.7", "1.0"] {
        let pe: Vec<f64> = rows.iter().filter(|r| r["rho"] == rho).map(|r| r["P_E"].parse().unwrap()).collect();
        assert_eq!(pe.len(), 16);
        assert!(pe.windows(2).all(|w| w[1] < w[0]), "rho {rho}: {pe:?}");
    }
}

#[test]
fn simulate_output_is_byte_identical() {
    let cfg = config("two_block.json");
    for format in ["csv", "json"] {
        let a = invoke(&["simulate", "--config", &cfg, "--trials", "3", "--format", format]);
        let b = invoke(&["simulate", "--config", &cfg, "--trials", "3", "--format", format, "--threads", "1"]);
        assert_eq!(a.0, EXIT_OK, "{}", a.2);
        assert_eq!(a.1, b.1);
    }
    let other = invoke(&["simulate", "--config", &cfg, "--trials", "3", "--seed", "99"]);
    let base = invoke(&["simulate", "--config", &cfg, "--trials", "3"]);
    assert_ne!(other.1, base.1);
}

#[test]
fn simulate_csv_and_json_carry_the_same_rows() {
    let cfg = config("two_block.json");
    let csv = invoke(&["simulate", "--config", &cfg, "--trials", "2"]).1;
    let json: serde_json::Value = serde_json::from_str(&invoke(&["simulate", "--config", &cfg, "--trials", "2", "--format", "json"]).1).unwrap();
    let rows = csv_rows(&csv);
    let arr = json.as_array().unwrap();
    assert_eq!(rows.len(), arr.len());
    let kinds: Vec<&str> = rows.iter().map(|r| r["kind"].as_str()).collect();
    assert_eq!(kinds, ["trial", "trial", "mean", "stderr", "prediction"]);
    for (r, j) in rows.iter().zip(arr) {
        assert_eq!(r["kind"], j["kind"].as_str().unwrap());
        if let Some(v) = j["value"].as_f64() {
            assert_eq!(r["value"].parse::<f64>().unwrap(), v);
        }
    }
}

#[test]
fn out_flag_writes_a_file() {
    let path = temp("curve.csv");
    let (code, out, _) = invoke(&["bpsk-curve", "--rho", "1.0", "--snr-min", "0", "--snr-max", "2", "--out", path.to_str().unwrap()]);
    let written = std::fs::read_to_string(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(code, EXIT_OK);
    assert!(out.is_empty());
    assert_eq!(written.lines().count(), 4);
}
