//! FLOPs and parameter accounting.
//!
//! The unit is one multiply-accumulate (MAC). Bias adds and activations are
//! not counted. Reports can double the figures for conventions that count
//! the multiply and the add separately.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::opspace::{OpFamily, OpSpec, SearchSpace};
use crate::real::Real;
use crate::tensor::{Tape, TensorError, Var};

/// Context of one searched layer: channels, *output* extent and stride.
/// The input extent is `h * stride` by `w * stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl LayerShape {
    pub fn new(c_in: usize, c_out: usize, h: usize, w: usize, stride: usize) -> Self {
        assert!(
            c_in > 0 && c_out > 0 && h > 0 && w > 0 && stride > 0,
            "layer shape entries must be positive"
        );
        Self { c_in, c_out, h, w, stride }
    }
}

/// MACs of one convolution producing an `h × w` map.
pub fn conv_macs(kernel: usize, c_in: usize, c_out: usize, groups: usize, h: usize, w: usize) -> u64 {
    (kernel * kernel * (c_in / groups) * c_out * h * w) as u64
}

pub fn flops_of(op: &OpSpec, s: &LayerShape) -> u64 {
    let k = op.kernel as usize;
    let out = s.h * s.w;
    let (hi, wi) = (s.h * s.stride, s.w * s.stride);
    match op.family {
        OpFamily::Skip => 0,
        OpFamily::InvertedResidual => {
            let hidden = s.c_in * op.expansion.unwrap_or(1) as usize;
            conv_macs(1, s.c_in, hidden, 1, hi, wi)
                + conv_macs(k, hidden, hidden, hidden, s.h, s.w)
                + (hidden * s.c_out * out) as u64
        }
        OpFamily::Separable => {
            conv_macs(k, s.c_in, s.c_in, s.c_in, s.h, s.w) + conv_macs(1, s.c_in, s.c_out, 1, s.h, s.w)
        }
        OpFamily::Conv => conv_macs(k, s.c_in, s.c_out, op.groups.max(1) as usize, s.h, s.w),
    }
}

/// Weight plus bias count.
pub fn params_of(op: &OpSpec, c_in: usize, c_out: usize) -> u64 {
    let k = op.kernel as usize;
    let n = match op.family {
        OpFamily::Skip => 0,
        OpFamily::InvertedResidual => {
            let hidden = c_in * op.expansion.unwrap_or(1) as usize;
            (c_in * hidden + hidden) + (k * k * hidden + hidden) + (hidden * c_out + c_out)
        }
        OpFamily::Separable => (k * k * c_in + c_in) + (c_in * c_out + c_out),
        OpFamily::Conv => {
            let g = op.groups.max(1) as usize;
            k * k * (c_in / g) * c_out + c_out
        }
    };
    n as u64
}

/// FLOPs and parameter counts, one row per searched layer, one column per
/// candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub layer_ids: Vec<String>,
    pub ops: Vec<OpSpec>,
    pub flops: Vec<Vec<u64>>,
    pub params: Vec<Vec<u64>>,
}

impl CostTable {
    pub fn build(layers: &[(String, LayerShape)], ops: &[OpSpec]) -> Self {
        let flops = layers
            .iter()
            .map(|(_, s)| ops.iter().map(|o| flops_of(o, s)).collect())
            .collect();
        let params = layers
            .iter()
            .map(|(_, s)| ops.iter().map(|o| params_of(o, s.c_in, s.c_out)).collect())
            .collect();
        Self {
            layer_ids: layers.iter().map(|(id, _)| id.clone()).collect(),
            ops: ops.to_vec(),
            flops,
            params,
        }
    }

    pub fn for_space(layers: &[(String, LayerShape)], space: &SearchSpace) -> Self {
        Self::build(layers, space.ops())
    }

    pub fn rows(&self) -> usize {
        self.flops.len()
    }

    pub fn cols(&self) -> usize {
        self.ops.len()
    }

    pub fn remove_column(&mut self, col: usize) {
        self.ops.remove(col);
        for r in self.flops.iter_mut().chain(self.params.iter_mut()) {
            r.remove(col);
        }
    }

    /// Σ_l Σ_o w[l][o] · FLOPs(o, l), evaluated outside any tape.
    pub fn expected(&self, weights: &[Vec<f64>]) -> f64 {
        self.flops
            .iter()
            .zip(weights)
            .map(|(f, w)| f.iter().zip(w).map(|(&c, &p)| c as f64 * p).sum::<f64>())
            .sum()
    }

    /// FLOPs of a discrete choice (one column index per row).
    pub fn chosen(&self, choice: &[usize]) -> u64 {
        self.flops.iter().zip(choice).map(|(r, &c)| r[c]).sum()
    }

    pub fn chosen_params(&self, choice: &[usize]) -> u64 {
        self.params.iter().zip(choice).map(|(r, &c)| r[c]).sum()
    }

    /// `layer_id,op_name,flops,params`; `double` reports 2×MACs.
    pub fn write_csv<W: Write>(&self, out: W, double: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer_id", "op_name", "flops", "params"])?;
        let mult = if double { 2 } else { 1 };
        for (l, id) in self.layer_ids.iter().enumerate() {
            for (o, op) in self.ops.iter().enumerate() {
                w.write_record([
                    id.clone(),
                    op.canonical_name(),
                    (self.flops[l][o] * mult).to_string(),
                    self.params[l][o].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Differentiable expected cost `Σ_l Σ_o softmax(logits_l)_o · FLOPs(o,l) · unit`.
///
/// The penalty is taken over the softmax mixing weights, so it is bounded
/// by the most expensive choice per layer.
pub fn cost_regularizer<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    table: &CostTable,
    unit: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape != [table.rows(), table.cols()] {
        return Err(TensorError::Dimension {
            op: "cost_regularizer",
            axes: "rows/columns".into(),
            detail: format!(
                "architecture matrix {shape:?} vs cost table {}x{}",
                table.rows(),
                table.cols()
            ),
        }
        .into());
    }
    let probs = tape.softmax_rows(logits)?;
    let weights: Vec<T> = table
        .flops
        .iter()
        .flatten()
        .map(|&f| T::of(f as f64 * unit))
        .collect();
    let weighted = tape.mul_const(probs, weights)?;
    Ok(tape.sum(weighted))
}

/// Checks that `table` lines up with a space, used when reloading artifacts.
pub fn check_alignment(table: &CostTable, space: &SearchSpace) -> Result<()> {
    if table.ops != space.ops() {
        return Err(config(format!(
            "cost table columns {:?} do not match {} space",
            table.ops.iter().map(|o| o.canonical_name()).collect::<Vec<_>>(),
            space.tag.name()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn unit_conv_is_one_mac() {
        assert_eq!(conv_macs(1, 1, 1, 1, 1, 1), 1);
        assert_eq!(params_of(&OpSpec { kernel: 1, ..OpSpec::conv(1, 1) }, 1, 1), 2);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(flops_of(&OpSpec::conv(3, 1), &LayerShape::new(2, 4, 8, 8, 1)), 4608);
        assert_eq!(flops_of(&OpSpec::sep(3, 1), &LayerShape::new(8, 8, 4, 4, 1)), 2176);
        assert_eq!(params_of(&OpSpec::conv(3, 1), 2, 4), 76);
        assert_eq!(params_of(&OpSpec::skip(), 8, 8), 0);
        assert_eq!(flops_of(&OpSpec::skip(), &LayerShape::new(8, 8, 4, 4, 1)), 0);
    }

    #[test]
    fn expansion_monotone() {
        let s = LayerShape::new(8, 8, 4, 4, 1);
        let f = |e| flops_of(&OpSpec::ir(3, 1, e), &s);
        assert!(f(6) > f(3) && f(3) > f(1));
    }

    fn table(costs: &[u64]) -> CostTable {
        let ops = [OpSpec::conv(3, 1), OpSpec::conv(5, 1), OpSpec::conv(3, 2)];
        CostTable {
            layer_ids: vec!["l0".into()],
            ops: ops[..costs.len()].to_vec(),
            flops: vec![costs.to_vec()],
            params: vec![vec![0; costs.len()]],
        }
    }

    fn regularize(logits: Vec<f64>, t: &CostTable) -> f64 {
        let mut tape = Tape::new();
        let n = logits.len();
        let v = tape.leaf(Tensor::new(vec![1, n], logits).unwrap().with_grad());
        let c = cost_regularizer(&mut tape, v, t, 1.0).unwrap();
        tape.scalar(c)
    }

    #[test]
    fn uniform_mixture_averages() {
        assert!((regularize(vec![0.0, 0.0], &table(&[100, 300])) - 200.0).abs() < 1e-9);
    }

    #[test]
    fn saturated_row_picks_cost() {
        let v = regularize(vec![-40.0, 40.0], &table(&[100, 300]));
        assert!((v - 300.0).abs() < 1e-9);
    }

    #[test]
    fn zero_table_is_zero() {
        assert_eq!(regularize(vec![1.0, -3.0, 0.2], &table(&[0, 0, 0])), 0.0);
    }

    #[test]
    fn misaligned_table_rejected() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::zeros(vec![1, 3]));
        assert!(cost_regularizer(&mut tape, v, &table(&[1, 2]), 1.0).is_err());
    }
}
