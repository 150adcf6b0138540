//! End-to-end checks of the command-line binary: artifact layout,
//! determinism of repeated seeds, and failure modes.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_coagsim");

const SMALL_CONFIG: &str = r#"
[params]
dim = 3
big_z = 50.0
n_particles = 500
horizon = 0.05
seed = 9001

[domain]
kind = "torus"
side = 4.0

[kernel]
profile = "bump"
support_radius = 1.0

[alpha]
policy = "constant"
coeff = 0.5

[diffusion]
policy = "constant"
coeff = 0.5

[[initial]]
mass = 1
intensity = 50.0
shape = "uniform"

[pde]
m_max = 5

[run]
replicas = 2
counts_every = 2
"#;

struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("coagsim-cli-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("config.toml"), SMALL_CONFIG).unwrap();
        Workspace { dir }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(["--config", self.dir.join("config.toml").to_str().unwrap()])
            .args(args)
            .output()
            .unwrap()
    }

    fn artifact(&self, out: &str, name: &str) -> Vec<u8> {
        fs::read(self.dir.join(out).join(name)).unwrap()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

#[test]
fn simulate_is_byte_deterministic() {
    let ws = Workspace::new("determinism");
    for out in ["a", "b"] {
        let o = ws.run(&["--out", ws.dir.join(out).to_str().unwrap(), "simulate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["events.jsonl", "counts.csv"] {
        assert_eq!(
            ws.artifact("a", name),
            ws.artifact("b", name),
            "{name} differs between identical runs"
        );
    }
    assert!(!ws.dir.join("a").join("_incomplete").exists());
}

#[test]
fn seed_override_changes_the_trajectory() {
    let ws = Workspace::new("seed");
    for (out, seed) in [("a", "9001"), ("b", "9002")] {
        let o = ws.run(&[
            "--out",
            ws.dir.join(out).to_str().unwrap(),
            "--seed",
            seed,
            "simulate",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_ne!(ws.artifact("a", "counts.csv"), ws.artifact("b", "counts.csv"));
}

#[test]
fn rate_table_and_curve_artifacts() {
    let ws = Workspace::new("artifacts");
    let o = ws.run(&["--out", ws.dir.join("cp").to_str().unwrap(), "cell-problem"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(ws.artifact("cp", "beta_table.csv")).unwrap();
    assert!(table.starts_with("# config_hash: "));
    let header = table.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "n,m,alpha,alpha_prime,beta,residual");
    // 15 unordered pairs for m_max = 5
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 16);

    let o = ws.run(&[
        "--out",
        ws.dir.join("curve").to_str().unwrap(),
        "capacity-curve",
    ]);
    assert!(o.status.success());
    let curve = String::from_utf8(ws.artifact("curve", "f_curve.csv")).unwrap();
    let mut last = 0.0;
    for line in curve.lines().skip(3) {
        let f: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(f >= last, "saturation curve must be nondecreasing");
        last = f;
    }
}

#[test]
fn pde_mode_writes_density_series() {
    let ws = Workspace::new("pde");
    let o = ws.run(&["--out", ws.dir.join("pde").to_str().unwrap(), "pde"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let counts = String::from_utf8(ws.artifact("pde", "macro_counts.csv")).unwrap();
    let header = counts.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "t,mass,integral");
    assert!(counts.lines().count() > 4);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let ws = Workspace::new("errors");

    // config flag missing entirely
    let o = Command::new(BIN).arg("simulate").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));

    // unknown key in the file
    let bad = ws.dir.join("bad.toml");
    fs::write(&bad, SMALL_CONFIG.replace("[run]", "[run]\nbogus = 1")).unwrap();
    let o = Command::new(BIN)
        .args(["--config", bad.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    // physically invalid parameter
    let bad = ws.dir.join("neg.toml");
    fs::write(&bad, SMALL_CONFIG.replace("coeff = 0.5", "coeff = -0.5")).unwrap();
    let o = Command::new(BIN)
        .args(["--config", bad.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn env_override_reaches_the_run() {
    let ws = Workspace::new("env");
    let o = Command::new(BIN)
        .args(["--config", ws.dir.join("config.toml").to_str().unwrap()])
        .args(["--out", ws.dir.join("a").to_str().unwrap(), "simulate"])
        .env("COAG_RUN__REPLICAS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let events = String::from_utf8(ws.artifact("a", "events.jsonl")).unwrap();
    assert!(events
        .lines()
        .filter(|l| !l.starts_with('#'))
        .all(|l| l.contains("\"replica\":0")));
}
