//! Subcommand bodies. Every artifact lands in `cfg.out_dir` under a fixed
//! name so reruns overwrite rather than accumulate.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use trinity_nas::archio::{
    decode, parse_spaces, random_baseline, spaces_to_text, train, Architecture, Detector,
};
use trinity_nas::cost::{flops_of, params_of};
use trinity_nas::opspace::{
    appendix_backbone, appendix_head, appendix_neck, catalogue_for, parse_opname, Component, OpSpec,
    SearchSpace, APPENDIX_BACKBONE, APPENDIX_HEAD, APPENDIX_NECK,
};
use trinity_nas::screening::screen;
use trinity_nas::search::run_search;
use trinity_nas::seeding::substream;
use trinity_nas::supernet::{Checkpoint, Network, Supernet, SupernetConfig};
use trinity_nas::tensor::ParamStore;
use trinity_nas::toytask::{generate, Dataset, Metrics, Split};
use trinity_nas::{Error, Real};

use crate::config::{Precision, RunConfig};
use crate::{Command, Failure};

pub const SPACES: &str = "spaces.txt";
pub const SEARCH_SPACES: &str = "search_spaces.txt";
pub const SCREENING_TRACE: &str = "screening_trace.csv";
pub const SCREENING_REMOVALS: &str = "screening_removals.csv";
pub const SUPERNET: &str = "supernet.json";
pub const SEARCH_TRACE: &str = "search_trace.csv";
pub const SPLIT_AUDIT: &str = "split_audit.json";
pub const ARCHITECTURE: &str = "architecture.txt";
pub const DETECTOR: &str = "detector.json";
pub const TRAIN_CURVE: &str = "train_curve.csv";
pub const METRICS: &str = "metrics.json";
pub const BASELINE: &str = "baseline.json";
pub const COST_TABLE: &str = "cost_table.csv";

pub fn dispatch(cfg: &RunConfig, cmd: &Command) -> Result<()> {
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, cmd),
        Precision::F64 => run::<f64>(cfg, cmd),
    }
}

fn run<T: Real>(cfg: &RunConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Screen => screen_cmd::<T>(cfg),
        Command::Search { appendix } => search_cmd::<T>(cfg, *appendix),
        Command::Decode { checkpoint } => decode_cmd(cfg, checkpoint.as_deref()),
        Command::Train {
            architecture,
            inherit_weights,
        } => train_cmd::<T>(cfg, architecture.as_deref(), *inherit_weights),
        Command::Eval { baseline } => eval_cmd::<T>(cfg, *baseline),
        Command::Flops {
            appendix,
            architecture,
            double,
        } => flops_cmd(cfg, *appendix, architecture.as_deref(), *double),
        Command::Report => crate::report::run(cfg),
        Command::Selftest => crate::selftest::run(),
    }
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Missing {
            path,
            hint: hint.to_string(),
        }
        .into())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    Ok(generate(&cfg.data.spec(cfg.seed))?)
}

fn appendix_spaces() -> [SearchSpace; 3] {
    [appendix_backbone().0, appendix_neck(), appendix_head()]
}

fn screen_cmd<T: Real>(cfg: &RunConfig) -> Result<()> {
    let data = dataset(cfg)?;
    let scfg = cfg.supernet.with_depth_factor(cfg.screening.depth_factor);
    let spaces = Component::ALL.map(|c| catalogue_for(c.into()));
    let mut sn = Supernet::<T>::build(&scfg, spaces, cfg.seed)?;
    let (bs, seed) = (cfg.screening.batch_size, cfg.seed);
    let batches = |split: Split, epoch: usize| data.epoch_batches::<T>(split, bs, seed, epoch);
    let state = screen(&mut sn, &batches, &cfg.screening)?;
    let (w, a) = state.audit.leaks(&data);
    if (w, a) != (0, 0) {
        return Err(Error::Split(format!("screening leaked {w} arch samples into weight updates and {a} weight samples into arch updates")).into());
    }
    let out = &cfg.out_dir;
    fs::write(out.join(SPACES), spaces_to_text(&sn.spaces))?;
    state.write_trace(fs::File::create(out.join(SCREENING_TRACE))?)?;
    let mut w = csv::Writer::from_path(out.join(SCREENING_REMOVALS))?;
    for r in &state.removal_log {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("screened to {:?} candidates per component", sn.spaces.iter().map(SearchSpace::len).collect::<Vec<_>>());
    for s in &sn.spaces {
        println!("  {}", s.to_line());
    }
    Ok(())
}

fn search_spaces(cfg: &RunConfig, appendix: bool) -> Result<[SearchSpace; 3]> {
    if appendix {
        return Ok(appendix_spaces());
    }
    let p = require(
        cfg.out_dir.join(SPACES),
        "run `trinas screen` first, or pass --appendix to search the published sub spaces",
    )?;
    Ok(parse_spaces(&read(&p)?)?)
}

#[derive(Serialize)]
struct AuditReport {
    weight_updates: Vec<(String, usize)>,
    arch_updates: Vec<(String, usize)>,
    arch_samples_in_weight_updates: usize,
    weight_samples_in_arch_updates: usize,
}

fn search_cmd<T: Real>(cfg: &RunConfig, appendix: bool) -> Result<()> {
    let spaces = search_spaces(cfg, appendix)?;
    let data = dataset(cfg)?;
    let out = &cfg.out_dir;
    fs::write(out.join(SEARCH_SPACES), spaces_to_text(&spaces))?;
    let mut sn = Supernet::<T>::build(&cfg.supernet, spaces, cfg.seed)?;
    let res = run_search(&mut sn, &data, &cfg.search, cfg.seed, Some(out))?;
    Checkpoint::from_supernet(&sn, cfg.seed, Some(cfg.search.epochs - 1)).save(&out.join(SUPERNET))?;
    res.write_trace(fs::File::create(out.join(SEARCH_TRACE))?)?;
    let (w, a) = res.audit.leaks(&data);
    let counts = |m: &std::collections::BTreeMap<Split, usize>| m.iter().map(|(s, n)| (s.name().to_string(), *n)).collect();
    write_json(
        &out.join(SPLIT_AUDIT),
        &AuditReport {
            weight_updates: counts(&res.audit.weight_updates),
            arch_updates: counts(&res.audit.arch_updates),
            arch_samples_in_weight_updates: w,
            weight_samples_in_arch_updates: a,
        },
    )?;
    if (w, a) != (0, 0) {
        return Err(Error::Split(format!("search leaked {w} arch samples into weight updates and {a} weight samples into arch updates")).into());
    }
    let last = res.val_loss.len() - 1;
    println!(
        "search done: train loss {:.4}, val loss {:.4}, expected MACs {:.0}",
        res.train_loss[last], res.val_loss[last], res.expected_flops[last]
    );
    Ok(())
}

fn decode_cmd(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let path = match checkpoint {
        Some(p) => require(p.to_path_buf(), "checkpoint not found")?,
        None => require(cfg.out_dir.join(SUPERNET), "run `trinas search` first, or pass --checkpoint")?,
    };
    let ck = Checkpoint::load(&path)?;
    let digest = ck.digest()?;
    let arch = match ck.precision.as_str() {
        "f32" => {
            let sn = ck.to_supernet::<f32>()?;
            decode(&sn.arch, &sn.spaces, &sn.cfg, ck.seed, Some(digest))?
        }
        _ => {
            let sn = ck.to_supernet::<f64>()?;
            decode(&sn.arch, &sn.spaces, &sn.cfg, ck.seed, Some(digest))?
        }
    };
    fs::write(cfg.out_dir.join(ARCHITECTURE), arch.to_text())?;
    print_layer_table(&arch)?;
    Ok(())
}

/// `(component, layer_id, op, flops, params)` for every searched layer.
fn layer_rows(arch: &Architecture) -> Result<Vec<(Component, String, OpSpec, u64, u64)>> {
    let net = shape_network(&arch.fingerprint)?;
    let mut rows = Vec::new();
    for c in Component::ALL {
        for ((id, s), op) in net.layer_shapes(c).into_iter().zip(arch.ops(c)) {
            rows.push((c, id, op, flops_of(&op, &s), params_of(&op, s.c_in, s.c_out)));
        }
    }
    Ok(rows)
}

fn print_layer_table(arch: &Architecture) -> Result<()> {
    let rows = layer_rows(arch)?;
    println!("{:<18} {:<14} {:>12} {:>10}", "layer", "op", "MACs", "params");
    for (_, id, op, f, p) in &rows {
        println!("{id:<18} {:<14} {f:>12} {p:>10}", op.to_string());
    }
    println!(
        "{:<18} {:<14} {:>12} {:>10}",
        "total",
        "",
        rows.iter().map(|r| r.3).sum::<u64>(),
        rows.iter().map(|r| r.4).sum::<u64>()
    );
    Ok(())
}

/// Layer shapes only: one cheap candidate per layer.
fn shape_network(cfg: &SupernetConfig) -> Result<Network> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = substream(0, "shapes");
    Ok(Network::build(cfg, &mut |_, _| vec![OpSpec::sep(3, 1)], &mut store, &mut rng)?)
}

fn load_architecture(cfg: &RunConfig, path: Option<&Path>) -> Result<Architecture> {
    let p = match path {
        Some(p) => require(p.to_path_buf(), "architecture file not found")?,
        None => require(cfg.out_dir.join(ARCHITECTURE), "run `trinas decode` first, or pass --architecture")?,
    };
    Ok(Architecture::parse(&read(&p)?)?)
}

fn train_cmd<T: Real>(cfg: &RunConfig, architecture: Option<&Path>, inherit: bool) -> Result<()> {
    let arch = load_architecture(cfg, architecture)?;
    let mut det = Detector::<T>::instantiate(&arch, &cfg.supernet, cfg.seed)?;
    if inherit {
        let p = require(cfg.out_dir.join(SUPERNET), "--inherit-weights needs the search checkpoint")?;
        let sn = Checkpoint::load(&p)?.to_supernet::<T>()?;
        det.inherit(&sn.store)?;
    }
    let data = dataset(cfg)?;
    let curve = train(&mut det, &data, &cfg.train, cfg.seed)?;
    det.to_checkpoint(cfg.seed).save(&cfg.out_dir.join(DETECTOR))?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join(TRAIN_CURVE))?;
    w.write_record(["epoch", "train_loss"])?;
    for (e, l) in curve.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    println!("trained {} epochs, final loss {:.4}", curve.len(), curve.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

#[derive(Serialize)]
struct MetricsReport {
    accuracy: f64,
    mean_iou: f64,
    loss: f64,
    macs: u64,
    params: usize,
}

#[derive(Serialize)]
struct BaselineReport {
    searched: Metrics,
    random: Vec<Metrics>,
    random_mean: Metrics,
    searched_loss_below_mean: bool,
}

fn eval_cmd<T: Real>(cfg: &RunConfig, baseline: bool) -> Result<()> {
    let p = require(cfg.out_dir.join(DETECTOR), "run `trinas train` first")?;
    let det = Detector::<T>::from_checkpoint(&Checkpoint::load(&p)?)?;
    let data = dataset(cfg)?;
    let m = det.evaluate(&data, Split::Test, cfg.train.batch_size)?;
    write_json(
        &cfg.out_dir.join(METRICS),
        &MetricsReport {
            accuracy: m.accuracy,
            mean_iou: m.mean_iou,
            loss: m.loss,
            macs: det.arch.flops(),
            params: det.param_count(),
        },
    )?;
    println!("test accuracy {:.4}, mean IoU {:.4}, loss {:.4}", m.accuracy, m.mean_iou, m.loss);
    if baseline {
        let sp = require(cfg.out_dir.join(SEARCH_SPACES), "the baseline samples from the searched sub spaces; run `trinas search` first")?;
        let spaces = parse_spaces(&read(&sp)?)?;
        let (runs, mean) = random_baseline::<T>(&cfg.supernet, &spaces, &data, &cfg.train, cfg.train.random_baselines, cfg.seed)?;
        println!("random architectures: mean loss {:.4}, mean accuracy {:.4}", mean.loss, mean.accuracy);
        write_json(
            &cfg.out_dir.join(BASELINE),
            &BaselineReport {
                searched_loss_below_mean: m.loss < mean.loss,
                searched: m,
                random: runs,
                random_mean: mean,
            },
        )?;
    }
    Ok(())
}

fn listing(names: &[&str]) -> Result<Vec<OpSpec>> {
    Ok(names.iter().map(|n| parse_opname(n)).collect::<Result<_, _>>().map_err(Error::from)?)
}

fn flops_cmd(cfg: &RunConfig, appendix: bool, architecture: Option<&Path>, double: bool) -> Result<()> {
    let mult = if double { 2 } else { 1 };
    let mut w = csv::Writer::from_path(cfg.out_dir.join(COST_TABLE))?;
    w.write_record(["layer_id", "op_name", "flops", "params"])?;
    if let Some(p) = architecture {
        let arch = load_architecture(cfg, Some(p))?;
        let rows = layer_rows(&arch)?;
        for (_, id, op, f, prm) in &rows {
            w.write_record([id.clone(), op.canonical_name(), (f * mult).to_string(), prm.to_string()])?;
        }
        w.flush()?;
        println!("total {} {}", rows.iter().map(|r| r.3 * mult).sum::<u64>(), if double { "FLOPs" } else { "MACs" });
        return Ok(());
    }
    // the published listings verbatim, duplicate entry included
    let ops: [Vec<OpSpec>; 3] = if appendix {
        [listing(&APPENDIX_BACKBONE)?, listing(&APPENDIX_NECK)?, listing(&APPENDIX_HEAD)?]
    } else {
        let p = ["search_spaces.txt", SPACES]
            .iter()
            .map(|n| cfg.out_dir.join(n))
            .find(|p| p.exists());
        let p = match p {
            Some(p) => p,
            None => require(cfg.out_dir.join(SPACES), "run `trinas screen` first, or pass --appendix")?,
        };
        parse_spaces(&read(&p)?)?.map(|s| s.ops().to_vec())
    };
    let net = shape_network(&cfg.supernet)?;
    for c in Component::ALL {
        for (id, s) in net.layer_shapes(c) {
            for op in &ops[c.index()] {
                w.write_record([
                    id.clone(),
                    op.canonical_name(),
                    (flops_of(op, &s) * mult).to_string(),
                    params_of(op, s.c_in, s.c_out).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    println!(
        "wrote {} ({} candidates per backbone, neck and head layer)",
        cfg.out_dir.join(COST_TABLE).display(),
        ops.iter().map(|o| o.len().to_string()).collect::<Vec<_>>().join("/")
    );
    Ok(())
}
