//! Decoded architectures: argmax decoding, the text format, standalone
//! detectors and their retraining.
//!
//! Architecture file grammar (one item per line, `\n` terminated):
//!
//! ```text
//! trinas-architecture v1
//! fingerprint image=<n> in=<n> classes=<n> stem=<n> depths=<a,b,c,d> channels=<a,b,c,d> neck=<n> head_blocks=<n> fc=<n>
//! provenance seed=<u64> checkpoint=<sha256 hex | none>
//! backbone/<i>: <op> stride=<1|2> layer=<id>
//! neck/<i>: <op> path=<td4|td3|td2|td1|bu1|bu2|bu3|bu4>
//! head/<i>: <op>
//! ```
//!
//! Spaces file grammar: `trinas-spaces v1`, then one `<tag>: <op> <op> …`
//! line each for backbone, neck and head.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::opspace::{parse_opname, Component, OpSpec, SearchSpace, SpaceTag};
use crate::optim::{cosine_lr, Sgd};
use crate::real::Real;
use crate::seeding::substream;
use crate::supernet::{detection_loss, ArchParams, Checkpoint, Network, SupernetConfig, NECK_IDS};
use crate::tensor::{ParamBinding, ParamStore, Tape, Tensor};
use crate::toytask::{evaluate, Batch, Dataset, Metrics, Prediction, Split};

pub const ARCH_HEADER: &str = "trinas-architecture v1";
pub const SPACES_HEADER: &str = "trinas-spaces v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneLayer {
    pub layer_id: String,
    pub op: OpSpec,
    pub stride: usize,
}

/// One op per searched layer plus the topology it was decoded for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub fingerprint: SupernetConfig,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub backbone: Vec<BackboneLayer>,
    /// Path order: td4, td3, td2, td1, bu1, bu2, bu3, bu4.
    pub neck: Vec<OpSpec>,
    pub head: Vec<OpSpec>,
}

fn backbone_layout(cfg: &SupernetConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for s in 0..4 {
        for b in 0..cfg.stage_depths[s] {
            out.push((format!("backbone.s{}.b{b}", s + 1), if b == 0 { 2 } else { 1 }));
        }
    }
    out
}

fn argmax_low(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > row[b] { i } else { b })
}

/// Per-row argmax of the logits, ties to the lowest column (which is the
/// lowest catalogue index, since spaces are kept in catalogue order).
pub fn decode<T: Real>(
    arch: &ArchParams<T>,
    spaces: &[SearchSpace; 3],
    cfg: &SupernetConfig,
    seed: u64,
    checkpoint: Option<String>,
) -> Result<Architecture> {
    if !arch.all_finite() {
        return Err(Error::Numerical("cannot decode non-finite architecture logits".into()));
    }
    let mut chosen: [Vec<OpSpec>; 3] = Default::default();
    for c in Component::ALL {
        let m = arch
            .get(c)
            .ok_or_else(|| config(format!("no {c} architecture matrix")))?;
        let space = &spaces[c.index()];
        if m.cols != space.names() {
            return Err(config(format!("{c} logits columns do not match the {c} space")));
        }
        chosen[c.index()] = m.logit_rows().iter().map(|r| space.ops()[argmax_low(r)]).collect();
    }
    let [b, n, h] = chosen;
    Architecture::new(cfg, b, n, h, seed, checkpoint)
}

impl Architecture {
    pub fn new(
        cfg: &SupernetConfig,
        backbone: Vec<OpSpec>,
        neck: Vec<OpSpec>,
        head: Vec<OpSpec>,
        seed: u64,
        checkpoint: Option<String>,
    ) -> Result<Self> {
        let layout = backbone_layout(cfg);
        let counts = cfg.layer_counts();
        if backbone.len() != counts[0] || neck.len() != counts[1] || head.len() != counts[2] {
            return Err(config(format!(
                "layer counts ({}, {}, {}) do not match the fingerprint {:?}",
                backbone.len(),
                neck.len(),
                head.len(),
                counts
            )));
        }
        Ok(Self {
            fingerprint: cfg.clone(),
            seed,
            checkpoint,
            backbone: layout
                .into_iter()
                .zip(backbone)
                .map(|((layer_id, stride), op)| BackboneLayer { layer_id, op, stride })
                .collect(),
            neck,
            head,
        })
    }

    /// Every searched layer set to `op`.
    pub fn uniform(cfg: &SupernetConfig, op: OpSpec) -> Result<Self> {
        let [b, n, h] = cfg.layer_counts();
        Self::new(cfg, vec![op; b], vec![op; n], vec![op; h], 0, None)
    }

    /// Uniform draw from the given spaces, one op per layer.
    pub fn random<R: Rng>(cfg: &SupernetConfig, spaces: &[SearchSpace; 3], rng: &mut R) -> Result<Self> {
        let counts = cfg.layer_counts();
        let mut pick = |c: usize| -> Vec<OpSpec> {
            (0..counts[c])
                .map(|_| spaces[c].ops()[rng.random_range(0..spaces[c].len())])
                .collect()
        };
        let (b, n, h) = (pick(0), pick(1), pick(2));
        Self::new(cfg, b, n, h, 0, None)
    }

    pub fn ops(&self, c: Component) -> Vec<OpSpec> {
        match c {
            Component::Backbone => self.backbone.iter().map(|l| l.op).collect(),
            Component::Neck => self.neck.clone(),
            Component::Head => self.head.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.fingerprint;
        let join = |v: &[usize; 4]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "{ARCH_HEADER}").unwrap();
        writeln!(
            s,
            "fingerprint image={} in={} classes={} stem={} depths={} channels={} neck={} head_blocks={} fc={}",
            c.image_size,
            c.in_channels,
            c.classes,
            c.stem_channels,
            join(&c.stage_depths),
            join(&c.stage_channels),
            c.neck_channels,
            c.head_blocks,
            c.head_fc_dim
        )
        .unwrap();
        writeln!(
            s,
            "provenance seed={} checkpoint={}",
            self.seed,
            self.checkpoint.as_deref().unwrap_or("none")
        )
        .unwrap();
        for (i, l) in self.backbone.iter().enumerate() {
            let short = l.layer_id.trim_start_matches("backbone.");
            writeln!(s, "backbone/{i}: {} stride={} layer={short}", l.op, l.stride).unwrap();
        }
        for (i, op) in self.neck.iter().enumerate() {
            writeln!(s, "neck/{i}: {op} path={}", NECK_IDS[i]).unwrap();
        }
        for (i, op) in self.head.iter().enumerate() {
            writeln!(s, "head/{i}: {op}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format(format!("architecture line {}: {msg}", line + 1));
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&ARCH_HEADER) {
            return Err(bad(0, format!("expected header {ARCH_HEADER:?}")));
        }
        let fp = lines
            .get(1)
            .and_then(|l| l.strip_prefix("fingerprint "))
            .ok_or_else(|| bad(1, "expected fingerprint".into()))?;
        let cfg = parse_fingerprint(fp).map_err(|m| bad(1, m))?;
        cfg.validate()?;
        let prov = lines
            .get(2)
            .and_then(|l| l.strip_prefix("provenance "))
            .ok_or_else(|| bad(2, "expected provenance".into()))?;
        let kv = pairs(prov).map_err(|m| bad(2, m))?;
        if kv.len() != 2 || kv[0].0 != "seed" || kv[1].0 != "checkpoint" {
            return Err(bad(2, "expected seed=<n> checkpoint=<hash|none>".into()));
        }
        let seed: u64 = kv[0].1.parse().map_err(|_| bad(2, "bad seed".into()))?;
        let checkpoint = (kv[1].1 != "none").then(|| kv[1].1.to_string());

        let mut ops: [Vec<OpSpec>; 3] = Default::default();
        for (n, line) in lines.iter().enumerate().skip(3) {
            let (key, rest) = line.split_once(": ").ok_or_else(|| bad(n, "expected '<component>/<i>: <op>'".into()))?;
            let (comp, idx) = key.split_once('/').ok_or_else(|| bad(n, "expected '<component>/<i>'".into()))?;
            let comp: Component = comp.parse().map_err(|m| bad(n, m))?;
            let idx: usize = idx.parse().map_err(|_| bad(n, format!("bad layer index {idx:?}")))?;
            if idx != ops[comp.index()].len() {
                return Err(bad(n, format!("{comp} layer {idx} out of order")));
            }
            let mut fields = rest.split(' ');
            let op = parse_opname(fields.next().unwrap_or(""))?;
            let extras: Vec<&str> = fields.collect();
            let expect: Vec<String> = match comp {
                Component::Backbone => {
                    let layout = backbone_layout(&cfg);
                    let (id, stride) = layout.get(idx).ok_or_else(|| bad(n, "more backbone layers than the fingerprint".into()))?;
                    vec![format!("stride={stride}"), format!("layer={}", id.trim_start_matches("backbone."))]
                }
                Component::Neck => {
                    let p = NECK_IDS.get(idx).ok_or_else(|| bad(n, "more than 8 neck layers".into()))?;
                    vec![format!("path={p}")]
                }
                Component::Head => Vec::new(),
            };
            if extras != expect {
                return Err(bad(n, format!("expected attributes {expect:?}, found {extras:?}")));
            }
            ops[comp.index()].push(op);
        }
        let [b, nk, h] = ops;
        let arch = Self::new(&cfg, b, nk, h, seed, checkpoint)?;
        if arch.to_text() != text {
            return Err(Error::Format("architecture text is not in canonical form".into()));
        }
        Ok(arch)
    }

    pub fn flops(&self) -> u64 {
        let mut store = ParamStore::<f32>::new();
        let mut rng = substream(0, "flops");
        let net = self.network(&mut store, &mut rng).expect("validated architecture");
        Component::ALL
            .iter()
            .flat_map(|&c| net.component(c).iter())
            .map(|l| crate::cost::flops_of(&l.candidates[0].op, &l.shape))
            .sum()
    }

    fn network<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<Network> {
        let chosen = Component::ALL.map(|c| self.ops(c));
        Network::build(&self.fingerprint, &mut |c, row| vec![chosen[c.index()][row]], store, rng)
    }
}

fn pairs(s: &str) -> std::result::Result<Vec<(&str, &str)>, String> {
    s.split(' ')
        .map(|kv| kv.split_once('=').ok_or_else(|| format!("expected key=value, found {kv:?}")))
        .collect()
}

fn parse_fingerprint(s: &str) -> std::result::Result<SupernetConfig, String> {
    let kv = pairs(s)?;
    let keys = ["image", "in", "classes", "stem", "depths", "channels", "neck", "head_blocks", "fc"];
    if kv.iter().map(|(k, _)| *k).collect::<Vec<_>>() != keys {
        return Err(format!("fingerprint keys must be {keys:?} in order"));
    }
    let num = |v: &str| v.parse::<usize>().map_err(|_| format!("bad number {v:?}"));
    let quad = |v: &str| -> std::result::Result<[usize; 4], String> {
        let parts = v.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?;
        parts.try_into().map_err(|_| format!("expected four values in {v:?}"))
    };
    Ok(SupernetConfig {
        image_size: num(kv[0].1)?,
        in_channels: num(kv[1].1)?,
        classes: num(kv[2].1)?,
        stem_channels: num(kv[3].1)?,
        stage_depths: quad(kv[4].1)?,
        stage_channels: quad(kv[5].1)?,
        neck_channels: num(kv[6].1)?,
        head_blocks: num(kv[7].1)?,
        head_fc_dim: num(kv[8].1)?,
    })
}

pub fn spaces_to_text(spaces: &[SearchSpace; 3]) -> String {
    let mut s = format!("{SPACES_HEADER}\n");
    for sp in spaces {
        s.push_str(&sp.to_line());
        s.push('\n');
    }
    s
}

pub fn parse_spaces(text: &str) -> Result<[SearchSpace; 3]> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&SPACES_HEADER) || lines.len() != 4 {
        return Err(Error::Format(format!("expected {SPACES_HEADER:?} followed by three space lines")));
    }
    let mut out = Vec::with_capacity(3);
    for (c, line) in Component::ALL.iter().zip(&lines[1..]) {
        let sp = SearchSpace::parse_line(line).map_err(Error::Format)?;
        if sp.tag != SpaceTag::from(*c) {
            return Err(Error::Format(format!("expected the {c} space, found {}", sp.tag.name())));
        }
        out.push(sp);
    }
    let spaces: [SearchSpace; 3] = out.try_into().expect("three lines");
    if spaces_to_text(&spaces) != text {
        return Err(Error::Format("spaces text is not in canonical form".into()));
    }
    Ok(spaces)
}

/// A standalone network with one op per layer.
#[derive(Debug, Clone)]
pub struct Detector<T> {
    pub arch: Architecture,
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Detector<T> {
    /// Fresh weights from the `init` substream of `seed`.
    pub fn instantiate(arch: &Architecture, cfg: &SupernetConfig, seed: u64) -> Result<Self> {
        if &arch.fingerprint != cfg {
            return Err(config("architecture fingerprint does not match the configured topology"));
        }
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "init");
        let net = arch.network(&mut store, &mut rng)?;
        Ok(Self {
            arch: arch.clone(),
            net,
            store,
        })
    }

    /// Copies every parameter from `source` by name (the supernet weights of
    /// the chosen ops). Fails if any is missing.
    pub fn inherit(&mut self, source: &ParamStore<T>) -> Result<()> {
        let keys: Vec<_> = self.store.iter().map(|(k, n, _)| (k, n.to_string())).collect();
        for (k, name) in keys {
            let src = source
                .key(&name)
                .ok_or_else(|| config(format!("source weights lack {name}")))?;
            let t = source.get(src);
            if t.shape() != self.store.get(k).shape() {
                return Err(config(format!("shape mismatch inheriting {name}")));
            }
            *self.store.get_mut(k) = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.count(self.net.param_keys())
    }

    pub fn loss_and_grads(&mut self, batch: &Batch<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let mut bind = ParamBinding::new(&self.store, true);
        let x = tape.leaf_from(&batch.images, false);
        let (cls, bbox) = self.net.forward(&mut tape, &mut bind, &self.store, x, None)?;
        let loss = detection_loss(&mut tape, cls, bbox, &batch.labels, &batch.boxes)?;
        let v = tape.scalar(loss).as_f64();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("training loss is {v}")));
        }
        let grads = tape.backward(loss)?;
        self.store.zero_grad();
        grads.accumulate_into(&bind, &mut self.store);
        Ok(v)
    }

    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let mut bind = ParamBinding::new(&self.store, false);
        let x = tape.leaf_from(&batch.images, false);
        let (cls, bbox) = self.net.forward(&mut tape, &mut bind, &self.store, x, None)?;
        let k = self.arch.fingerprint.classes;
        let (cv, bv) = (tape.value(cls), tape.value(bbox));
        Ok((0..batch.labels.len())
            .map(|i| Prediction {
                logits: cv[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect(),
                bbox: std::array::from_fn(|j| bv[i * 4 + j].as_f64()),
            })
            .collect())
    }

    /// Metrics over `split`, evaluated batch-parallel.
    pub fn evaluate(&self, data: &Dataset, split: Split, batch_size: usize) -> Result<Metrics> {
        let n = data.spec.count(split);
        let starts: Vec<usize> = (0..n).step_by(batch_size.max(1)).collect();
        let parts = crate::parallel::map_indices(starts.len(), |i| {
            let idx: Vec<usize> = (starts[i]..(starts[i] + batch_size).min(n)).collect();
            self.predict(&data.batch::<T>(split, &idx))
        });
        let mut preds = Vec::with_capacity(n);
        for p in parts {
            preds.extend(p?);
        }
        let truths: Vec<(usize, [f64; 4])> = data.split(split).iter().map(|s| (s.label, s.bbox)).collect();
        evaluate(&preds, &truths)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::new("detector", &self.arch.fingerprint, seed, &self.store);
        ck.architecture = Some(self.arch.to_text());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "detector" || ck.precision != T::NAME {
            return Err(Error::Format(format!(
                "expected a {} detector checkpoint, found {} {}",
                T::NAME,
                ck.precision,
                ck.kind
            )));
        }
        let text = ck
            .architecture
            .as_deref()
            .ok_or_else(|| Error::Format("detector checkpoint lacks its architecture".into()))?;
        let arch = Architecture::parse(text)?;
        let mut d = Self::instantiate(&arch, &ck.config, ck.seed)?;
        ck.load_params(&mut d.store)?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// Random architectures retrained as a baseline by `eval`.
    pub random_baselines: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            // without normalization 0.04 collapses many architectures
            lr: 0.01,
            momentum: 0.9,
            clip_norm: Some(5.0),
            random_baselines: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(config("train epochs, batch_size and lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config("train momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Trains `det` on the full search pool (weight ∪ arch splits). Returns the
/// mean loss of each epoch.
pub fn train<T: Real>(det: &mut Detector<T>, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.clip_norm);
    let per_epoch = data.spec.count(Split::Train).div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = data.epoch_batches::<T>(Split::Train, cfg.batch_size, seed, epoch);
        for b in &batches {
            sum += det.loss_and_grads(b)?;
            let mut params: Vec<&mut Tensor<T>> = det.store.tensors_mut().collect();
            sgd.step(&mut params, cosine_lr(cfg.lr, step, total));
            step += 1;
        }
        curve.push(sum / batches.len() as f64);
    }
    Ok(curve)
}

/// Fresh weights, train on the search pool, evaluate on the test split.
pub fn retrain_and_eval<T: Real>(arch: &Architecture, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(Detector<T>, Metrics)> {
    let mut det = Detector::instantiate(arch, &arch.fingerprint, seed)?;
    train(&mut det, data, cfg, seed)?;
    let m = det.evaluate(data, Split::Test, cfg.batch_size)?;
    Ok((det, m))
}

/// `n` uniform architectures from `spaces`, each retrained like the searched
/// one; returns the per-architecture metrics and their mean.
pub fn random_baseline<T: Real>(
    cfg: &SupernetConfig,
    spaces: &[SearchSpace; 3],
    data: &Dataset,
    train_cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> Result<(Vec<Metrics>, Metrics)> {
    let mut rng = substream(seed, "random-architectures");
    let archs = (0..n)
        .map(|_| Architecture::random(cfg, spaces, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut all = Vec::with_capacity(n);
    for a in &archs {
        all.push(retrain_and_eval::<T>(a, data, train_cfg, seed)?.1);
    }
    let k = n.max(1) as f64;
    let mean = Metrics {
        accuracy: all.iter().map(|m| m.accuracy).sum::<f64>() / k,
        mean_iou: all.iter().map(|m| m.mean_iou).sum::<f64>() / k,
        loss: all.iter().map(|m| m.loss).sum::<f64>() / k,
    };
    Ok((all, mean))
}
