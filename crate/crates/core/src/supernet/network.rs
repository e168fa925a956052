//! Detector wiring shared by the supernet (many candidates per layer) and
//! decoded detectors (one candidate per layer).
//!
//! backbone: stem → four stages emitting C1..C4 at strides 4..32
//! neck:     fixed 1×1 laterals to neck width, then
//!           P4 = m(L4), Pi = m(Li) + up(P(i+1)),
//!           N1 = m(P1), Ni = m(pool(N(i−1))) + Pi
//! head:     pool(N1) + N2 + up(N3) + up(up(N4)) at N2 resolution →
//!           searched blocks → global average pool → fc → class / box

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{SupernetConfig, NECK_IDS};
use crate::cost::LayerShape;
use crate::error::{config, Result};
use crate::opspace::{build_block, Block, Component, ConvUnit, OpSpec};
use crate::real::Real;
use crate::tensor::{ConvGeometry, ParamBinding, ParamKey, ParamStore, Tape, Tensor, Var};

/// One searched layer and its candidate blocks, in space order.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedLayer {
    pub id: String,
    pub component: Component,
    pub shape: LayerShape,
    pub candidates: Vec<Block>,
}

impl MixedLayer {
    pub fn ops(&self) -> Vec<OpSpec> {
        self.candidates.iter().map(|b| b.op).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamKey,
    pub bias: ParamKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: SupernetConfig,
    pub stem: ConvUnit,
    pub layers: [Vec<MixedLayer>; 3],
    pub laterals: Vec<ConvUnit>,
    pub fc: Dense,
    pub cls: Dense,
    pub bbox: Dense,
}

#[allow(clippy::too_many_arguments)]
fn fixed_conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    relu: bool,
) -> ConvUnit {
    let fan_in = c_in * kernel * kernel;
    let gain = if relu { 2.0 } else { 1.0 };
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
    let data = (0..c_out * fan_in).map(|_| T::of(normal.sample(rng))).collect();
    let weight = store.insert(
        format!("{name}.w"),
        Tensor::new(vec![c_out, c_in, kernel, kernel], data).expect("sized"),
    );
    let bias = store.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]));
    ConvUnit {
        weight,
        bias,
        c_in,
        c_out,
        kernel,
        dilation: 1,
        stride,
        groups: 1,
        padding: (kernel - 1) / 2,
        relu,
    }
}

/// Small output layers so the initial loss sits near ln K.
const OUTPUT_GAIN: f64 = 0.01;

fn dense<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    inputs: usize,
    outputs: usize,
    gain: f64,
    bias: f64,
) -> Dense {
    let normal = Normal::new(0.0, (gain / inputs as f64).sqrt()).expect("finite std");
    let data = (0..inputs * outputs).map(|_| T::of(normal.sample(rng))).collect();
    let weight = store.insert(
        format!("{name}.w"),
        Tensor::new(vec![outputs, inputs], data).expect("sized"),
    );
    let bias = store.insert(format!("{name}.b"), Tensor::full(vec![outputs], T::of(bias)));
    Dense { weight, bias }
}

/// Propagates a symbolic `(1, C, H, W)` shape through a block's convs.
fn block_out_shape(block: &Block, shape: [usize; 4]) -> Result<[usize; 4]> {
    let mut s = shape;
    for c in &block.convs {
        let g = ConvGeometry::new(
            &s,
            &[c.c_out, c.c_in / c.groups, c.kernel, c.kernel],
            c.stride,
            c.dilation,
            c.groups,
            c.padding,
        )?;
        let o = g.out_shape();
        s = [o[0], o[1], o[2], o[3]];
    }
    Ok(s)
}

impl Network {
    /// Builds every layer with the candidates returned by `choose`.
    /// Fails at construction if candidates of one layer disagree on shape.
    pub fn build<T: Real, R: Rng>(
        cfg: &SupernetConfig,
        choose: &mut dyn FnMut(Component, usize) -> Vec<OpSpec>,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = fixed_conv(store, rng, "stem", cfg.in_channels, cfg.stem_channels, 3, 2, true);
        let mut layers: [Vec<MixedLayer>; 3] = Default::default();

        let mut make = |component: Component,
                        row: usize,
                        id: String,
                        shape: LayerShape,
                        store: &mut ParamStore<T>,
                        rng: &mut R|
         -> Result<MixedLayer> {
            let ops = choose(component, row);
            if ops.is_empty() {
                return Err(config(format!("layer {id} has no candidates")));
            }
            let input = [1, shape.c_in, shape.h * shape.stride, shape.w * shape.stride];
            let expect = [1, shape.c_out, shape.h, shape.w];
            let mut candidates = Vec::with_capacity(ops.len());
            for op in &ops {
                let b = build_block(op, shape.c_in, shape.c_out, shape.stride, &id, store, rng)?;
                let got = block_out_shape(&b, input)?;
                if got != expect {
                    return Err(config(format!("layer {id}: {op} yields {got:?}, expected {expect:?}")));
                }
                candidates.push(b);
            }
            Ok(MixedLayer {
                id,
                component,
                shape,
                candidates,
            })
        };

        let mut c_prev = cfg.stem_channels;
        let mut row = 0;
        for s in 0..4 {
            let e = cfg.stage_extent(s);
            for b in 0..cfg.stage_depths[s] {
                let stride = if b == 0 { 2 } else { 1 };
                let c_out = cfg.stage_channels[s];
                let shape = LayerShape::new(c_prev, c_out, e, e, stride);
                let id = format!("backbone.s{}.b{b}", s + 1);
                layers[0].push(make(Component::Backbone, row, id, shape, store, rng)?);
                c_prev = c_out;
                row += 1;
            }
        }

        let nc = cfg.neck_channels;
        let laterals = (0..4)
            .map(|s| fixed_conv(store, rng, &format!("lateral{}", s + 1), cfg.stage_channels[s], nc, 1, 1, false))
            .collect();
        for (row, id) in NECK_IDS.iter().enumerate() {
            let level: usize = id[2..].parse().expect("fixed ids");
            let e = cfg.stage_extent(level - 1);
            let shape = LayerShape::new(nc, nc, e, e, 1);
            layers[1].push(make(Component::Neck, row, format!("neck.{id}"), shape, store, rng)?);
        }

        let e2 = cfg.stage_extent(1);
        for b in 0..cfg.head_blocks {
            let shape = LayerShape::new(nc, nc, e2, e2, 1);
            layers[2].push(make(Component::Head, b, format!("head.b{b}"), shape, store, rng)?);
        }

        let fc = dense(store, rng, "head.fc", nc, cfg.head_fc_dim, 2.0, 0.0);
        let cls = dense(store, rng, "head.cls", cfg.head_fc_dim, cfg.classes, OUTPUT_GAIN, 0.0);
        let bbox = dense(store, rng, "head.box", cfg.head_fc_dim, 4, OUTPUT_GAIN, 0.5);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            layers,
            laterals,
            fc,
            cls,
            bbox,
        })
    }

    pub fn component(&self, c: Component) -> &[MixedLayer] {
        &self.layers[c.index()]
    }

    /// `(layer_id, shape)` rows for cost tables.
    pub fn layer_shapes(&self, c: Component) -> Vec<(String, LayerShape)> {
        self.component(c).iter().map(|l| (l.id.clone(), l.shape)).collect()
    }

    pub fn remove_candidate(&mut self, c: Component, col: usize) {
        for l in &mut self.layers[c.index()] {
            l.candidates.remove(col);
        }
    }

    /// Keys of every parameter the forward pass can touch.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = vec![self.stem.weight, self.stem.bias];
        for l in self.layers.iter().flatten() {
            for b in &l.candidates {
                keys.extend(b.params());
            }
        }
        for c in &self.laterals {
            keys.extend([c.weight, c.bias]);
        }
        for d in [self.fc, self.cls, self.bbox] {
            keys.extend([d.weight, d.bias]);
        }
        keys
    }

    #[allow(clippy::too_many_arguments)]
    fn layer<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut ParamBinding,
        store: &ParamStore<T>,
        c: Component,
        row: usize,
        x: Var,
        probs: Option<&[Var]>,
    ) -> Result<Var> {
        let layer = &self.layers[c.index()][row];
        match probs {
            None => {
                if layer.candidates.len() != 1 {
                    return Err(config(format!(
                        "layer {} has {} candidates but no mixing weights",
                        layer.id,
                        layer.candidates.len()
                    )));
                }
                layer.candidates[0].forward(tape, bind, store, x)
            }
            Some(p) => {
                let outs = layer
                    .candidates
                    .iter()
                    .map(|b| b.forward(tape, bind, store, x))
                    .collect::<Result<Vec<_>>>()?;
                let w = tape.row(p[c.index()], row)?;
                Ok(tape.weighted_sum(&outs, w)?)
            }
        }
    }

    /// Returns `(class_logits (N,K), boxes (N,4))`. `probs` holds one
    /// softmax matrix per component; `None` runs single-candidate layers.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut ParamBinding,
        store: &ParamStore<T>,
        x: Var,
        probs: Option<&[Var]>,
    ) -> Result<(Var, Var)> {
        use Component::*;
        let mut h = self.stem.forward(tape, bind, store, x)?;
        let mut feats = Vec::with_capacity(4);
        let mut row = 0;
        for s in 0..4 {
            for _ in 0..self.cfg.stage_depths[s] {
                h = self.layer(tape, bind, store, Backbone, row, h, probs)?;
                row += 1;
            }
            feats.push(h);
        }
        let lat = feats
            .iter()
            .zip(&self.laterals)
            .map(|(&f, c)| c.forward(tape, bind, store, f))
            .collect::<Result<Vec<_>>>()?;

        let mut p = [lat[3]; 4];
        p[3] = self.layer(tape, bind, store, Neck, 0, lat[3], probs)?;
        for (row, i) in [(1, 2), (2, 1), (3, 0)] {
            let m = self.layer(tape, bind, store, Neck, row, lat[i], probs)?;
            let up = tape.upsample2x(p[i + 1])?;
            p[i] = tape.add(m, up)?;
        }
        let mut n = p;
        n[0] = self.layer(tape, bind, store, Neck, 4, p[0], probs)?;
        for i in 1..4 {
            let d = tape.maxpool2d(n[i - 1], 2, 2)?;
            let m = self.layer(tape, bind, store, Neck, 4 + i, d, probs)?;
            n[i] = tape.add(m, p[i])?;
        }

        let down = tape.maxpool2d(n[0], 2, 2)?;
        let mut f = tape.add(down, n[1])?;
        let up3 = tape.upsample2x(n[2])?;
        f = tape.add(f, up3)?;
        let up4 = tape.upsample2x(n[3])?;
        let up4 = tape.upsample2x(up4)?;
        f = tape.add(f, up4)?;
        for b in 0..self.cfg.head_blocks {
            f = self.layer(tape, bind, store, Head, b, f, probs)?;
        }

        let g = tape.global_avg_pool(f)?;
        let (fw, fb) = (bind.var(tape, store, self.fc.weight), bind.var(tape, store, self.fc.bias));
        let z = tape.linear(g, fw, Some(fb))?;
        let z = tape.relu(z);
        let (cw, cb) = (bind.var(tape, store, self.cls.weight), bind.var(tape, store, self.cls.bias));
        let cls = tape.linear(z, cw, Some(cb))?;
        let (bw, bb) = (bind.var(tape, store, self.bbox.weight), bind.var(tape, store, self.bbox.bias));
        let bbox = tape.linear(z, bw, Some(bb))?;
        Ok((cls, bbox))
    }
}
