//! Synthetic single-object detection data and its metrics.
//!
//! Each image holds one axis-aligned rectangle on a dark background. The
//! class decides the fill colour, the fill pattern (solid, horizontal stripes,
//! vertical stripes, checker) and the aspect ratio. Every sample is drawn
//! from its own generator stream keyed by (split, index), so splits are
//! independent and regeneration is bit-identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which partition a sample or batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Weight updates during search.
    Weight,
    /// Architecture updates during search.
    Arch,
    Test,
    /// Union of weight and arch splits, used to retrain decoded detectors.
    Train,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Weight => "weight",
            Split::Arch => "arch",
            Split::Test => "test",
            Split::Train => "train",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Weight => 1,
            Split::Arch => 2,
            Split::Test => 3,
            Split::Train => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    /// Search training pool, split 50/50 between weights and architecture
    /// unless configured otherwise.
    pub train_pool: usize,
    pub split_fraction: f64,
    pub test: usize,
    pub noise: f64,
    /// Solid fills with one distinct colour per class and no noise, so the
    /// globally pooled colour alone separates classes linearly.
    pub separable: bool,
}

impl DatasetSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            image_size: 64,
            channels: 3,
            classes: 4,
            train_pool: 256,
            split_fraction: 0.5,
            test: 128,
            noise: 0.05,
            separable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(config("dataset image_size must be at least 8"));
        }
        if self.channels != 3 {
            return Err(config("dataset images have 3 channels"));
        }
        if self.classes == 0 || self.classes > 8 {
            return Err(config("dataset classes must be in 1..=8"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(config("split_fraction must lie strictly between 0 and 1"));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(config("noise must be finite and non-negative"));
        }
        let (w, a) = self.split_counts();
        if w == 0 || a == 0 || self.test == 0 {
            return Err(config("every split needs at least one sample"));
        }
        Ok(())
    }

    /// (weight, arch) counts: a disjoint, exhaustive partition of the pool.
    pub fn split_counts(&self) -> (usize, usize) {
        let w = (self.train_pool as f64 * self.split_fraction).round() as usize;
        (w, self.train_pool - w)
    }

    pub fn count(&self, split: Split) -> usize {
        let (w, a) = self.split_counts();
        match split {
            Split::Weight => w,
            Split::Arch => a,
            Split::Test => self.test,
            Split::Train => w + a,
        }
    }

    /// Stable key for an on-disk cache of generated data.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("plain struct");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    /// `C × H × W`, row-major.
    pub image: Vec<f32>,
    pub label: usize,
    /// `(cx, cy, w, h)` normalized to [0, 1].
    pub bbox: [f64; 4],
    /// Content hash, used to audit split discipline.
    pub id: u64,
}

/// Canonical fill intensity of class `k`, one value per channel.
pub fn class_colour(k: usize, separable: bool) -> [f32; 3] {
    const SOLID: [[f32; 3]; 8] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.5, 0.0],
        [0.5, 0.0, 1.0],
    ];
    const MUTED: [f32; 3] = [0.9, 0.8, 0.7];
    if separable {
        SOLID[k % 8]
    } else {
        // same hue family for every class, so shape and pattern matter
        let t = 0.15 * (k % 4) as f32;
        [MUTED[0] - t, MUTED[1], MUTED[2] + t * 0.5]
    }
}

/// Width/height ratio of class `k`.
pub fn class_aspect(k: usize) -> f64 {
    [1.0, 2.0, 0.5, 1.5, 0.75, 1.25, 0.6, 1.75][k % 8]
}

fn pattern_gain(k: usize, separable: bool, row: usize, col: usize) -> f32 {
    if separable {
        return 1.0;
    }
    let dim = 0.35;
    match k % 4 {
        0 => 1.0,
        1 if (row / 2) % 2 == 1 => dim,
        2 if (col / 2) % 2 == 1 => dim,
        3 if ((row / 2) + (col / 2)) % 2 == 1 => dim,
        _ => 1.0,
    }
}

fn sample_rng(spec: &DatasetSpec, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

/// Area bins by fraction of the image: small < 1/16, large > 1/5.
pub fn size_bin(bbox: &[f64; 4]) -> usize {
    let a = bbox[2] * bbox[3];
    if a < 1.0 / 16.0 {
        0
    } else if a <= 0.2 {
        1
    } else {
        2
    }
}

pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> ToySample {
    let mut rng = sample_rng(spec, split, index);
    let s = spec.image_size;
    let label = rng.random_range(0..spec.classes);
    let scale: f64 = rng.random_range(0.15..0.7);
    let aspect = class_aspect(label).sqrt();
    let bw = (scale * aspect).min(0.9);
    let bh = (scale / aspect).min(0.9);
    let cx: f64 = rng.random_range(bw / 2.0..=1.0 - bw / 2.0);
    let cy: f64 = rng.random_range(bh / 2.0..=1.0 - bh / 2.0);
    // snap to pixel edges so the stored box is exactly what was drawn
    let edge = |v: f64| ((v * s as f64).round() as usize).min(s);
    let (x0, mut x1) = (edge(cx - bw / 2.0), edge(cx + bw / 2.0));
    let (y0, mut y1) = (edge(cy - bh / 2.0), edge(cy + bh / 2.0));
    x1 = x1.max(x0 + 1).min(s);
    y1 = y1.max(y0 + 1).min(s);
    let x0 = x0.min(x1 - 1);
    let y0 = y0.min(y1 - 1);
    let sf = s as f64;
    let bbox = [
        (x0 + x1) as f64 / (2.0 * sf),
        (y0 + y1) as f64 / (2.0 * sf),
        (x1 - x0) as f64 / sf,
        (y1 - y0) as f64 / sf,
    ];

    let colour = class_colour(label, spec.separable);
    let mut image = vec![0f32; spec.channels * s * s];
    for c in 0..spec.channels {
        for r in y0..y1 {
            for q in x0..x1 {
                image[(c * s + r) * s + q] = colour[c] * pattern_gain(label, spec.separable, r - y0, q - x0);
            }
        }
    }
    if spec.noise > 0.0 && !spec.separable {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in &mut image {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let mut h = Sha256::new();
    for v in &image {
        h.update(v.to_le_bytes());
    }
    h.update((label as u64).to_le_bytes());
    let digest = h.finalize();
    let id = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
    ToySample { image, label, bbox, id }
}

/// Generated splits. `Train` is never stored; it is weight ∪ arch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub weight: Vec<ToySample>,
    pub arch: Vec<ToySample>,
    pub test: Vec<ToySample>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |split| {
        crate::parallel::map_indices(spec.count(split), |i| generate_sample(spec, split, i))
    };
    Ok(Dataset {
        spec: spec.clone(),
        weight: make(Split::Weight),
        arch: make(Split::Arch),
        test: make(Split::Test),
    })
}

/// A mini-batch tagged with the split it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub split: Split,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub boxes: Vec<[f64; 4]>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ToySample> {
        match split {
            Split::Weight => self.weight.iter().collect(),
            Split::Arch => self.arch.iter().collect(),
            Split::Test => self.test.iter().collect(),
            Split::Train => self.weight.iter().chain(&self.arch).collect(),
        }
    }

    pub fn batch<T: Real>(&self, split: Split, indices: &[usize]) -> Batch<T> {
        let pool = self.split(split);
        let s = self.spec.image_size;
        let c = self.spec.channels;
        let mut data = Vec::with_capacity(indices.len() * c * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        let mut boxes = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let smp = pool[i];
            data.extend(smp.image.iter().map(|&v| T::of(v as f64)));
            labels.push(smp.label);
            boxes.push(smp.bbox);
            ids.push(smp.id);
        }
        Batch {
            split,
            images: Tensor::new(vec![indices.len(), c, s, s], data).expect("sized"),
            labels,
            boxes,
            ids,
        }
    }

    /// Shuffled batches of `split` for `epoch`; the order is a pure function
    /// of (seed, split, epoch). The last partial batch is kept.
    pub fn epoch_batches<T: Real>(&self, split: Split, batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch<T>> {
        let n = self.spec.count(split);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = crate::seeding::substream(seed, &format!("shuffle/{}/{epoch}", split.name()));
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
            .chunks(batch_size.max(1))
            .map(|idx| self.batch(split, idx))
            .collect()
    }
}

/// `(cx, cy, w, h)` intersection over union; negative extents count as empty.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let span = |c: f64, e: f64| (c - e.max(0.0) / 2.0, c + e.max(0.0) / 2.0);
    let (ax0, ax1) = span(a[0], a[2]);
    let (ay0, ay1) = span(a[1], a[3]);
    let (bx0, bx1) = span(b[0], b[2]);
    let (by0, by1) = span(b[1], b[3]);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_iou: f64,
    pub loss: f64,
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Accuracy, mean IoU and mean detection loss (cross-entropy plus summed
/// smooth-L1 over the four box coordinates).
pub fn evaluate(preds: &[Prediction], truths: &[(usize, [f64; 4])]) -> Result<Metrics> {
    if preds.len() != truths.len() {
        return Err(Error::Data(format!("{} predictions vs {} truths", preds.len(), truths.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let (mut correct, mut iou_sum, mut loss) = (0usize, 0.0, 0.0);
    for (p, (label, bbox)) in preds.iter().zip(truths) {
        if *label >= p.logits.len() {
            return Err(Error::Data(format!("label {label} out of range for {} classes", p.logits.len())));
        }
        let best = p
            .logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > p.logits[b] { i } else { b });
        correct += usize::from(best == *label);
        iou_sum += iou(&p.bbox, bbox);
        let m = p.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + p.logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - p.logits[*label];
        loss += p.bbox.iter().zip(bbox).map(|(a, b)| smooth_l1(a - b)).sum::<f64>();
    }
    let n = preds.len() as f64;
    Ok(Metrics {
        accuracy: correct as f64 / n,
        mean_iou: iou_sum / n,
        loss: loss / n,
    })
}
