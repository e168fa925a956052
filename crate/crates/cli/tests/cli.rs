use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"seed = 1
[supernet]
image_size = 32
stem_channels = 4
stage_channels = [4, 4, 8, 8]
neck_channels = 4
head_fc_dim = 8
[data]
image_size = 32
train_pool = 32
test = 16
[screening]
epochs = 2
warmup_epochs = 1
removal_events = 2
targets = [4, 4, 4]
batch_size = 8
[search]
epochs = 2
arch_warmup_epochs = 1
batch_size = 8
[train]
epochs = 2
batch_size = 8
random_baselines = 2
"#;

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, config).unwrap();
        let out = dir.path().join("out");
        Self {
            _dir: dir,
            config: cfg,
            out,
        }
    }

    fn trinas(&self, args: &[&str]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_trinas"));
        for (k, _) in std::env::vars() {
            if k.starts_with("TRINAS_") {
                c.env_remove(k);
            }
        }
        c.arg("--config").arg(&self.config).arg("--out").arg(&self.out).args(args);
        c.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.trinas(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out.join(name)).unwrap()
    }
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let r = Run::new(TINY);
    r.ok(&["screen"]);
    assert_eq!(header(&r.out.join("screening_trace.csv")), "step,component,op_name,column_norm");
    let spaces = r.read("spaces.txt");
    assert_eq!(spaces.lines().count(), 4);

    r.ok(&["search"]);
    assert_eq!(header(&r.out.join("search_trace.csv")), "epoch,train_loss,val_loss,expected_flops");
    assert_eq!(r.read("search_trace.csv").lines().count(), 3);
    let audit: serde_json::Value = serde_json::from_str(&r.read("split_audit.json")).unwrap();
    assert!(audit.to_string().contains("weight"));

    r.ok(&["decode"]);
    let arch = r.read("architecture.txt");
    r.ok(&["decode"]);
    assert_eq!(r.read("architecture.txt"), arch, "decode is idempotent");

    r.ok(&["train", "--inherit-weights"]);
    r.ok(&["eval", "--baseline"]);
    let m: serde_json::Value = serde_json::from_str(&r.read("metrics.json")).unwrap();
    let acc = m["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let b: serde_json::Value = serde_json::from_str(&r.read("baseline.json")).unwrap();
    assert_eq!(b["random"].as_array().unwrap().len(), 2);

    r.ok(&["flops", "--appendix"]);
    assert_eq!(header(&r.out.join("cost_table.csv")), "layer_id,op_name,flops,params");
    r.ok(&["report"]);
    assert!(r.read("report.md").contains("Search trace"));
    assert!(!r.out.join(".trinas.lock").exists());
}

#[test]
fn appendix_cost_table_has_eight_rows_per_layer() {
    let r = Run::new(TINY);
    r.ok(&["flops", "--appendix"]);
    let mut per_layer: BTreeMap<String, usize> = BTreeMap::new();
    let mut rd = csv::Reader::from_path(r.out.join("cost_table.csv")).unwrap();
    for rec in rd.records() {
        *per_layer.entry(rec.unwrap()[0].to_string()).or_default() += 1;
    }
    assert!(!per_layer.is_empty());
    assert!(per_layer.values().all(|&n| n == 8), "{per_layer:?}");
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let r = Run::new(&format!("{TINY}\n[extra]\nfoo = 1\n"));
    assert_eq!(r.trinas(&["flops"]).status.code(), Some(2));
    let r = Run::new(TINY);
    assert_eq!(r.trinas(&["flops", "--set", "search.lambada=0.1"]).status.code(), Some(2));
    assert_eq!(r.trinas(&["flops", "--set", "search.lambda=-1"]).status.code(), Some(2));
}

#[test]
fn missing_prerequisites_exit_with_missing_code() {
    let r = Run::new(TINY);
    let o = r.trinas(&["decode"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("search"));
    assert_eq!(r.trinas(&["report"]).status.code(), Some(5));
}

#[test]
fn corrupt_checkpoint_exits_with_data_code() {
    let r = Run::new(TINY);
    fs::create_dir_all(&r.out).unwrap();
    fs::write(r.out.join("supernet.json"), "{ not json").unwrap();
    assert_eq!(r.trinas(&["decode"]).status.code(), Some(3));
}

#[test]
fn held_lock_exits_with_locked_code() {
    let r = Run::new(TINY);
    fs::create_dir_all(&r.out).unwrap();
    fs::write(r.out.join(".trinas.lock"), "1").unwrap();
    assert_eq!(r.trinas(&["flops", "--appendix"]).status.code(), Some(6));
    fs::remove_file(r.out.join(".trinas.lock")).unwrap();
    r.ok(&["flops", "--appendix"]);
}

#[test]
fn flag_beats_environment_beats_file() {
    let r = Run::new(TINY);
    let mut c = Command::new(env!("CARGO_BIN_EXE_trinas"));
    c.arg("--config").arg(&r.config).arg("--out").arg(&r.out);
    c.env("TRINAS_SEARCH__LAMBDA", "0.5").env("TRINAS_TRAIN__EPOCHS", "7");
    c.args(["--set", "search.lambda=0.25", "flops", "--appendix"]);
    let o = c.output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: toml::Table = r.read("run_config.toml").parse().unwrap();
    assert_eq!(cfg["search"]["lambda"].as_float(), Some(0.25));
    assert_eq!(cfg["train"]["epochs"].as_integer(), Some(7));
    assert_eq!(cfg["seed"].as_integer(), Some(1));
}

#[test]
fn selftest_passes() {
    let o = Command::new(env!("CARGO_BIN_EXE_trinas")).arg("selftest").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let s = String::from_utf8_lossy(&o.stdout);
    assert_eq!(s.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{s}");
}
