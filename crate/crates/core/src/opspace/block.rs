//! Block graphs for each op family.
//!
//! * inverted residual: 1×1 expand → k×k depthwise → 1×1 project (linear)
//! * separable: k×k depthwise → 1×1 pointwise (linear)
//! * conv: k×k conv
//! * skip: identity
//!
//! Every conv carries a bias; all but the final linear projection are
//! followed by ReLU. Stride sits on the spatial (k×k) conv. The identity
//! shortcut is added to ir/sep blocks whenever stride is 1 and channels match.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{OpFamily, OpSpec};
use crate::error::{config, Result};
use crate::real::Real;
use crate::tensor::{ParamBinding, ParamKey, ParamStore, Tape, Tensor, Var};

/// One convolution inside a block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub weight: ParamKey,
    pub bias: ParamKey,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub groups: usize,
    pub padding: usize,
    pub relu: bool,
}

impl ConvUnit {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut ParamBinding,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = bind.var(tape, store, self.weight);
        let b = bind.var(tape, store, self.bias);
        Ok(tape.conv2d_bias_act(
            x,
            w,
            b,
            self.stride,
            self.dilation,
            self.groups,
            self.padding,
            self.relu,
        )?)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.kernel * self.kernel + self.c_out
    }
}

/// A built candidate: its conv chain plus the shortcut flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub op: OpSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub convs: Vec<ConvUnit>,
    pub residual: bool,
}

impl Block {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut ParamBinding,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(tape, bind, store, y)?;
        }
        if self.residual && !self.convs.is_empty() {
            y = tape.add(y, x)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.convs.iter().flat_map(|c| [c.weight, c.bias])
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvUnit::param_count).sum()
    }
}

const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[allow(clippy::too_many_arguments)]
fn add_conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    stride: usize,
    groups: usize,
    relu: bool,
) -> ConvUnit {
    let fan_in = (c_in / groups) * kernel * kernel;
    // Kaiming for ReLU layers, LeCun for the linear projections
    let gain = if relu { 2.0 } else { 1.0 };
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
    let n = c_out * (c_in / groups) * kernel * kernel;
    let data: Vec<T> = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    let weight = store.insert(
        format!("{name}.w"),
        Tensor::new(vec![c_out, c_in / groups, kernel, kernel], data).expect("sized"),
    );
    let bias = store.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]));
    ConvUnit {
        weight,
        bias,
        c_in,
        c_out,
        kernel,
        dilation,
        stride,
        groups,
        padding: dilation * (kernel - 1) / 2,
        relu,
    }
}

/// Builds the block for `op`, registering its weights under `prefix`.
pub fn build_block<T: Real, R: Rng>(
    op: &OpSpec,
    c_in: usize,
    c_out: usize,
    stride: usize,
    prefix: &str,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<Block> {
    if stride != 1 && stride != 2 {
        return Err(config(format!("{op}: stride {stride} not in {{1,2}}")));
    }
    if c_in == 0 || c_out == 0 {
        return Err(config(format!("{op}: zero channels")));
    }
    let k = op.kernel as usize;
    let d = op.dilation as usize;
    if op.family != OpFamily::Skip && (k.is_multiple_of(2) || d == 0) {
        return Err(config(format!("{op}: kernel must be odd and dilation positive")));
    }
    let shape_kept = stride == 1 && c_in == c_out;
    let base = format!("{prefix}.{op}");
    let convs = match op.family {
        OpFamily::Skip => {
            if !shape_kept {
                return Err(config(format!(
                    "skip needs stride 1 and equal channels, got {c_in}->{c_out} stride {stride}"
                )));
            }
            Vec::new()
        }
        OpFamily::InvertedResidual => {
            let e = op
                .expansion
                .ok_or_else(|| config(format!("{op}: missing expansion")))? as usize;
            let hidden = c_in * e;
            vec![
                add_conv(store, rng, &format!("{base}.expand"), c_in, hidden, 1, 1, 1, 1, true),
                add_conv(store, rng, &format!("{base}.dw"), hidden, hidden, k, d, stride, hidden, true),
                add_conv(store, rng, &format!("{base}.project"), hidden, c_out, 1, 1, 1, 1, false),
            ]
        }
        OpFamily::Separable => vec![
            add_conv(store, rng, &format!("{base}.dw"), c_in, c_in, k, d, stride, c_in, true),
            add_conv(store, rng, &format!("{base}.pw"), c_in, c_out, 1, 1, 1, 1, false),
        ],
        OpFamily::Conv => {
            let g = op.groups.max(1) as usize;
            if !c_in.is_multiple_of(g) || !c_out.is_multiple_of(g) {
                return Err(config(format!("{op}: groups {g} do not divide {c_in}->{c_out}")));
            }
            vec![add_conv(store, rng, &format!("{base}.conv"), c_in, c_out, k, d, stride, g, true)]
        }
    };
    let residual = shape_kept && matches!(op.family, OpFamily::InvertedResidual | OpFamily::Separable);
    if residual {
        // start residual blocks near identity; without normalization the
        // stacked sums otherwise blow up the activations
        let last = convs.last().expect("residual blocks have convs").weight;
        for v in store.get_mut(last).data_mut() {
            *v = *v * T::of(RESIDUAL_INIT_SCALE);
        }
    }
    Ok(Block {
        op: *op,
        c_in,
        c_out,
        stride,
        convs,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(block: &Block, store: &ParamStore<f64>, x: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let mut bind = ParamBinding::new(store, false);
        let xv = tape.leaf(x);
        let y = block.forward(&mut tape, &mut bind, store, xv).unwrap();
        tape.to_tensor(y)
    }

    fn input(c: usize, h: usize) -> Tensor<f64> {
        let data = (0..c * h * h).map(|i| (i as f64 * 0.37).sin()).collect();
        Tensor::new(vec![1, c, h, h], data).unwrap()
    }

    #[test]
    fn separable_structure() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_block(&OpSpec::sep(3, 1), 4, 4, 1, "l0", &mut store, &mut rng).unwrap();
        assert_eq!(b.convs.len(), 2);
        assert_eq!((b.convs[0].kernel, b.convs[0].groups), (3, 4));
        assert_eq!((b.convs[1].kernel, b.convs[1].groups), (1, 1));
        assert!(b.residual);
    }

    #[test]
    fn skip_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_block(&OpSpec::skip(), 3, 3, 1, "l0", &mut store, &mut rng).unwrap();
        let x = input(3, 5);
        assert_eq!(run(&b, &store, x.clone()), x);
        assert!(build_block(&OpSpec::skip(), 3, 4, 1, "l1", &mut store, &mut rng).is_err());
    }

    #[test]
    fn zero_weight_ir_block_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_block(&OpSpec::ir(3, 1, 3), 4, 4, 1, "l0", &mut store, &mut rng).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(4, 6);
        assert_eq!(run(&b, &store, x.clone()), x);
    }

    #[test]
    fn stride_two_halves_extent_and_drops_shortcut() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_block(&OpSpec::ir(5, 3, 6), 4, 4, 2, "l0", &mut store, &mut rng).unwrap();
        assert!(!b.residual);
        assert_eq!(b.convs[1].stride, 2);
        let y = run(&b, &store, input(4, 8));
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn unsupported_stride_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_block(&OpSpec::conv(3, 1), 4, 4, 3, "l0", &mut store, &mut rng).is_err());
    }
}
