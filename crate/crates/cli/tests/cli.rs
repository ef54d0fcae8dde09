use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const CI_CONFIG: &str = r#"
[ev]
mode = "bi"

[abstraction]
eta = [0.05, 0.1, 0.1, 0.1]

[robustness]
seeds = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_freqsynth"));
    c.env_remove("FREQSYNTH_THREADS");
    c
}

fn run(dir: &Path, config: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn freqsynth")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

/// Directory holding a model and both controllers for the coarse setup.
struct Pipeline {
    dir: TempDir,
    config: PathBuf,
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let config = write_config(dir.path(), "ci.toml", CI_CONFIG);
        let o = run(dir.path(), &config, &["abstract"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = run(dir.path(), &config, &["synth", "--csv"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Pipeline { dir, config }
    })
}

#[test]
fn abstract_report_counts_cells_and_inputs() {
    let p = pipeline();
    let r = json(&p.dir.path().join("abstract.json"));
    assert_eq!(r["cells"], 22 * 30 * 20 * 20);
    assert_eq!(r["counts"], serde_json::json!([22, 30, 20, 20]));
    assert_eq!(r["inputs"], 21);
    assert_eq!(r["mode"], "bi");
}

#[test]
fn abstract_refuses_to_overwrite_without_force() {
    let dir = TempDir::new().unwrap();
    let coarse = "[abstraction]\neta = [0.1, 0.2, 0.2, 0.2]\ninputs = 3\n";
    let config = write_config(dir.path(), "c.toml", coarse);
    assert_eq!(code(&run(dir.path(), &config, &["abstract"])), 0);
    let model = dir.path().join("model.fsm");
    let before = std::fs::read(&model).unwrap();
    let o = run(dir.path(), &config, &["abstract"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    assert_eq!(std::fs::read(&model).unwrap(), before);
    assert_eq!(code(&run(dir.path(), &config, &["--force", "abstract"])), 0);
}

#[test]
fn halving_eta_multiplies_cells_by_sixteen() {
    let dir = TempDir::new().unwrap();
    let mut cells = Vec::new();
    for (k, eta) in ["[0.1, 0.5, 0.5, 0.5]", "[0.05, 0.25, 0.25, 0.25]"].iter().enumerate() {
        let sub = dir.path().join(k.to_string());
        let config = write_config(dir.path(), &format!("{k}.toml"), &format!("[abstraction]\neta = {eta}\ninputs = 3\n"));
        assert_eq!(code(&run(&sub, &config, &["abstract"])), 0);
        cells.push(json(&sub.join("abstract.json"))["cells"].as_u64().unwrap());
    }
    assert_eq!(cells[1], 16 * cells[0]);
}

#[test]
fn symbolic_run_passes_and_check_agrees() {
    let p = pipeline();
    let dir = p.dir.path();
    let o = run(dir, &p.config, &["simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.join("symbolic_verdict.json"));
    assert_eq!(v["psi"], true);
    let svg = std::fs::read_to_string(dir.join("symbolic.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    let trace = dir.join("symbolic_trace.csv");
    assert_eq!(data_lines(&trace)[0], "t,f_hz,g,l,p,u,w,phase");
    let o = run(dir, &p.config, &["check", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["psi"], v["psi"]);
    assert_eq!(report["trace_config_hash"], v["config_hash"]);
}

#[test]
fn baseline_fails_the_check() {
    let p = pipeline();
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), &p.config, &["baseline"])), 0);
    let v = json(&dir.path().join("baseline_verdict.json"));
    assert_eq!(v["psi"], false);
    let trace = dir.path().join("baseline_trace.csv");
    let o = run(dir.path(), &p.config, &["check", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn removing_the_fleet_breaches_containment() {
    let p = pipeline();
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(dir.path(), &p.config, &["baseline", "--no-ev"])), 0);
    let v = json(&dir.path().join("noev_verdict.json"));
    assert!(v["verdicts"]["min_f_hz"].as_f64().unwrap() < 49.2);
}

#[test]
fn zero_uncertainty_reproduces_the_nominal_run() {
    let p = pipeline();
    let dir = p.dir.path();
    let zero = write_config(
        dir,
        "zero.toml",
        &CI_CONFIG.replace("seeds = 4", "seeds = 4\ndelta_max = 0.0"),
    );
    let out = TempDir::new().unwrap();
    copy_pipeline(out.path());
    assert_eq!(code(&run(out.path(), &zero, &["simulate"])), 0);
    assert_eq!(code(&run(out.path(), &zero, &["--seed", "11", "simulate", "--robust"])), 0);
    assert_eq!(
        data_lines(&out.path().join("symbolic_trace.csv")),
        data_lines(&out.path().join("symbolic_seed11_trace.csv"))
    );
}

#[test]
fn seeded_runs_are_reproducible() {
    let p = pipeline();
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        copy_pipeline(d.path());
        run(d.path(), &p.config, &["--seed", "7", "simulate", "--robust"]);
    }
    let name = "symbolic_seed7_trace.csv";
    assert_eq!(
        std::fs::read(a.path().join(name)).unwrap(),
        std::fs::read(b.path().join(name)).unwrap()
    );
}

#[test]
fn robustness_batch_reports_every_seed() {
    let p = pipeline();
    let out = TempDir::new().unwrap();
    copy_pipeline(out.path());
    let o = run(out.path(), &p.config, &["robustness"]);
    let r = json(&out.path().join("robustness.json"));
    let report = &r["report"];
    assert_eq!(report["total"], 4);
    assert_eq!(report["runs"].as_array().unwrap().len(), 4);
    let all = report["passed"] == report["total"];
    assert_eq!(code(&o), if all { 0 } else { 1 });
    assert_eq!(data_lines(&out.path().join("robustness.csv")).len(), 5);
}

#[test]
fn sweep_writes_one_row_per_mode_and_width() {
    let p = pipeline();
    let out = TempDir::new().unwrap();
    assert_eq!(code(&run(out.path(), &p.config, &["sweep"])), 0);
    let lines = data_lines(&out.path().join("sweep.csv"));
    assert_eq!(lines[0], "half_width_hz,mode,steady_f_hz,settled");
    assert_eq!(lines.len(), 1 + 2 * 8);
    assert!(lines.iter().any(|l| l.contains(",uni,")) && lines.iter().any(|l| l.contains(",bi,")));
}

#[test]
fn missing_controllers_are_a_usage_error() {
    let p = pipeline();
    let out = TempDir::new().unwrap();
    let o = run(out.path(), &p.config, &["simulate"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth"));
    assert_eq!(code(&run(out.path(), &p.config, &["robustness"])), 2);
    assert_eq!(code(&run(out.path(), &p.config, &["synth"])), 2);
}

#[test]
fn model_from_another_configuration_is_rejected() {
    let p = pipeline();
    let out = TempDir::new().unwrap();
    let other = write_config(out.path(), "other.toml", &CI_CONFIG.replace("[abstraction]", "[abstraction]\ntau = 0.4"));
    let model = p.dir.path().join("model.fsm");
    let o = run(out.path(), &other, &["synth", "--model", model.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_inputs_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let unknown = write_config(dir.path(), "bad.toml", "[grid]\nbogus = 1\n");
    assert_eq!(code(&run(dir.path(), &unknown, &["baseline"])), 2);
    let invalid = write_config(dir.path(), "neg.toml", "[abstraction]\ntau = -1.0\n");
    assert_eq!(code(&run(dir.path(), &invalid, &["abstract"])), 2);
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&run(dir.path(), &missing, &["baseline"])), 2);

    let o = bin().env("FREQSYNTH_THREADS", "zero").arg("--out").arg(dir.path()).arg("sweep").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().arg("no-such-command").output().unwrap();
    assert_eq!(code(&o), 2);

    let broken = write_config(dir.path(), "broken.csv", "t,f_hz\n0,abc\n");
    let ok = write_config(dir.path(), "ok.toml", "");
    assert_eq!(code(&run(dir.path(), &ok, &["check", "--trace", broken.to_str().unwrap()])), 2);
}

fn copy_pipeline(to: &Path) {
    for f in ["model.fsm", "c1.ctl", "c2.ctl"] {
        std::fs::copy(pipeline().dir.path().join(f), to.join(f)).unwrap();
    }
}

#[test]
fn thread_cap_does_not_change_results() {
    let p = pipeline();
    let mut traces = Vec::new();
    for threads in ["1", "3"] {
        let out = TempDir::new().unwrap();
        copy_pipeline(out.path());
        let o = bin()
            .env("FREQSYNTH_THREADS", threads)
            .arg("--config")
            .arg(&p.config)
            .arg("--out")
            .arg(out.path())
            .arg("simulate")
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        traces.push(data_lines(&out.path().join("symbolic_trace.csv")));
    }
    assert_eq!(traces[0], traces[1]);
}
