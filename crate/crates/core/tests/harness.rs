use parakernel::harness::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn config_parses_comments_and_whitespace() {
    let cfg = Config::parse("# header\nseed = 7  # trailing\n\n grid.points=32\nlist = 1, 2.5, inf\n").unwrap();
    assert_eq!(cfg.get("seed"), Some("7"));
    assert_eq!(cfg.usize_or("grid.points", 0).unwrap(), 32);
    assert_eq!(cfg.f64_list("list").unwrap().unwrap(), vec![1.0, 2.5, f64::INFINITY]);
    assert_eq!(cfg.f64_or("missing", 1.5).unwrap(), 1.5);
}

#[test]
fn config_rejects_malformed_input() {
    assert!(Config::parse("no equals sign").is_err());
    assert!(Config::parse("a = 1\na = 2").is_err());
    assert!(Config::parse("bad key = 1").is_err());
    let cfg = Config::parse("x = abc\nl = 1, z").unwrap();
    assert!(cfg.f64_or("x", 0.0).is_err());
    assert!(cfg.f64_list("l").is_err());
    let cfg = Config::parse("f.kind = spiral").unwrap();
    let grid = parakernel::Grid::new(1, 1.0, 16).unwrap();
    assert!(cfg.descriptor("f", grid).is_err());
}

#[test]
fn missing_config_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.cfg");
    let msg = Config::load(&path).unwrap_err().to_string();
    assert!(msg.contains("absent.cfg"), "{msg}");
}

#[test]
fn resolved_config_records_defaults() {
    let cfg = Config::parse("a = 1").unwrap();
    cfg.f64_or("b", 2.0).unwrap();
    cfg.f64_or("a", 9.0).unwrap();
    let r = cfg.resolved();
    assert_eq!(r.get("a").map(String::as_str), Some("1"));
    assert_eq!(r.get("b").map(String::as_str), Some("2"));
    assert!(!cfg.entries().contains_key("b"));
}

#[test]
fn json_floats_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let x = f64::from_bits(rng.gen::<u64>());
        if !x.is_finite() {
            assert_eq!(json_float(x), "null");
            continue;
        }
        assert_eq!(json_float(x).parse::<f64>().unwrap(), x);
        let y: f64 = rng.gen_range(-1e6..1e6);
        let text = to_json_string(&serde_json::json!({ "v": y }));
        let field = text.split("\"v\": ").nth(1).unwrap().lines().next().unwrap();
        assert_eq!(field.trim().parse::<f64>().unwrap(), y);
    }
}

#[test]
fn json_keys_are_sorted() {
    let text = to_json_string(&serde_json::json!({ "b": 1, "a": { "z": 0.5, "y": [] } }));
    let a = text.find("\"a\"").unwrap();
    let b = text.find("\"b\"").unwrap();
    assert!(a < b);
    assert!(text.find("\"y\"").unwrap() < text.find("\"z\"").unwrap());
    assert!(text.contains("5.0000000000000000e-1"));
}

#[test]
fn criteria_compare_as_declared() {
    assert!(Criterion::at_most("x", 1.0, 1.0, CONSISTENCY).passed);
    assert!(!Criterion::at_most("x", 1.1, 1.0, CONSISTENCY).passed);
    assert!(Criterion::at_least("x", 0.5, 0.4, BOUND).passed);
    assert!(Criterion::within("x", 0.26, 0.25, 0.01 + 1e-12, CLOSED_FORM).passed);
    assert!(!Criterion::within("x", 0.27, 0.25, 0.01, CLOSED_FORM).passed);
    assert!(!Criterion::at_most("x", f64::NAN, 1.0, REFINEMENT).passed);
}

#[test]
fn report_json_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::parse("grid.points = 16\ngreen.cells = 4, 6").unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let sub = dir.path().join(k.to_string());
        let report = run_green(&cfg, Some(&sub)).unwrap();
        assert!(report.passed());
        write_report(&report, &sub).unwrap();
        bytes.push(std::fs::read(sub.join("report.json")).unwrap());
        assert!(sub.join("timing.json").exists());
        assert!(sub.join("green.csv").exists());
    }
    assert_eq!(bytes[0], bytes[1]);
    let v: serde_json::Value = serde_json::from_slice(&bytes[0]).unwrap();
    for c in v["criteria"].as_array().unwrap() {
        let basis = c["basis"].as_str().unwrap();
        assert!([CLOSED_FORM, REFINEMENT, BOUND, CONSISTENCY].contains(&basis));
    }
    assert_eq!(v["config"]["grid.points"], "16");
    assert!(v["config"].get("grid.dim").is_some());
}

#[test]
fn verify_passes() {
    let report = run_verify(&Config::parse("").unwrap(), None).unwrap();
    for c in &report.criteria {
        assert!(c.passed, "{} = {}", c.name, c.measured);
    }
}
