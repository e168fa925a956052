//! The weight-sharing supernet: one mixed node per searched layer.

mod arch;
pub mod checkpoint;
mod config;
mod network;

pub use arch::{ArchMatrix, ArchParams};
pub use checkpoint::Checkpoint;
pub use config::{SupernetConfig, NECK_IDS, NECK_LAYERS};
pub use network::{Dense, MixedLayer, Network};

use num_bigint::BigUint;

use crate::cost::{cost_regularizer, CostTable};
use crate::error::{config, Error, Result};
use crate::opspace::{Component, SearchSpace};
use crate::real::Real;
use crate::seeding::substream;
use crate::tensor::{ParamBinding, ParamStore, Tape, TensorError, Var};

/// `softmax(logits_row) · [o_1(x), …, o_n(x)]`.
pub fn mix<T: Real>(tape: &mut Tape<T>, outputs: &[Var], logits_row: Var) -> Result<Var> {
    let w = tape.softmax_rows(logits_row)?;
    Ok(tape.weighted_sum(outputs, w)?)
}

/// Mean over the batch of `cross_entropy + Σ_coords smooth_l1`.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    class_logits: Var,
    boxes: Var,
    labels: &[usize],
    target_boxes: &[[f64; 4]],
) -> Result<Var> {
    let n = labels.len();
    if target_boxes.len() != n {
        return Err(Error::Data(format!("{n} labels vs {} boxes", target_boxes.len())));
    }
    let ce = tape.cross_entropy(class_logits, labels).map_err(|e| match e {
        TensorError::LabelOutOfRange { .. } => Error::Data(e.to_string()),
        other => other.into(),
    })?;
    let target = tape.constant(
        vec![n, 4],
        target_boxes.iter().flatten().map(|&v| T::of(v)).collect(),
    )?;
    let sl = tape.smooth_l1(boxes, target)?;
    let sl = tape.sum(sl);
    let sl = tape.scale(sl, T::one() / T::of(n.max(1) as f64));
    Ok(tape.add(ce, sl)?)
}

/// `Π sizes[i]^layers[i]` exactly.
pub fn search_space_size(layer_counts: &[usize], space_sizes: &[usize]) -> BigUint {
    assert_eq!(layer_counts.len(), space_sizes.len(), "one space size per component");
    layer_counts
        .iter()
        .zip(space_sizes)
        .fold(BigUint::from(1u32), |acc, (&l, &s)| acc * BigUint::from(s).pow(l as u32))
}

/// Network, candidate weights, architecture logits and cost tables.
#[derive(Debug, Clone)]
pub struct Supernet<T> {
    pub cfg: SupernetConfig,
    pub spaces: [SearchSpace; 3],
    pub net: Network,
    pub store: ParamStore<T>,
    pub arch: ArchParams<T>,
    pub tables: [CostTable; 3],
}

impl<T: Real> Supernet<T> {
    /// Fresh supernet with weights drawn from the `init` substream of `seed`
    /// and all-zero logits.
    pub fn build(cfg: &SupernetConfig, spaces: [SearchSpace; 3], seed: u64) -> Result<Self> {
        for (c, s) in Component::ALL.iter().zip(&spaces) {
            if s.is_empty() {
                return Err(config(format!("{c} space is empty")));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "init");
        let net = Network::build(
            cfg,
            &mut |c, _| spaces[c.index()].ops().to_vec(),
            &mut store,
            &mut rng,
        )?;
        let arch = ArchParams::new(
            Component::ALL
                .iter()
                .map(|&c| {
                    ArchMatrix::zeros(
                        c,
                        net.component(c).iter().map(|l| l.id.clone()).collect(),
                        spaces[c.index()].names(),
                    )
                })
                .collect(),
        );
        let tables = Component::ALL.map(|c| CostTable::for_space(&net.layer_shapes(c), &spaces[c.index()]));
        Ok(Self {
            cfg: cfg.clone(),
            spaces,
            net,
            store,
            arch,
            tables,
        })
    }

    pub fn layer_counts(&self) -> [usize; 3] {
        Component::ALL.map(|c| self.net.component(c).len())
    }

    /// Parameters reachable from the forward pass of the current spaces.
    pub fn param_count(&self) -> usize {
        self.store.count(self.net.param_keys())
    }

    /// Drops candidate `col` of component `c` everywhere: space, layers,
    /// logits and cost table. The softmax then renormalizes over survivors.
    pub fn remove_candidate(&mut self, c: Component, col: usize) -> Result<()> {
        let i = c.index();
        self.spaces[i].remove(col).map_err(config)?;
        self.net.remove_candidate(c, col);
        self.arch.matrices[i].remove_column(col);
        self.tables[i].remove_column(col);
        Ok(())
    }

    /// Softmax matrices for the given logits leaves.
    pub fn probabilities(&self, tape: &mut Tape<T>, arch_vars: &[Var]) -> Result<Vec<Var>> {
        arch_vars
            .iter()
            .map(|&v| tape.softmax_rows(v).map_err(Into::into))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bind: &mut ParamBinding,
        x: Var,
        arch_vars: &[Var],
    ) -> Result<(Var, Var)> {
        let probs = self.probabilities(tape, arch_vars)?;
        self.net.forward(tape, bind, &self.store, x, Some(&probs))
    }

    /// `unit · (C(α) + C(β) + C(γ))` on the tape.
    pub fn cost_term(&self, tape: &mut Tape<T>, arch_vars: &[Var], unit: f64) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (v, t) in arch_vars.iter().zip(&self.tables) {
            let c = cost_regularizer(tape, *v, t, unit)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, c)?,
                None => c,
            });
        }
        total.ok_or_else(|| config("no architecture matrices"))
    }

    /// Expected MACs with every layer mixing its candidates uniformly.
    pub fn uniform_flops(&self) -> f64 {
        self.tables
            .iter()
            .map(|t| t.expected(&vec![vec![1.0 / t.cols() as f64; t.cols()]; t.rows()]))
            .sum()
    }

    /// Expected MACs under the current mixing weights.
    pub fn expected_flops(&self) -> f64 {
        self.arch
            .matrices
            .iter()
            .zip(&self.tables)
            .map(|(m, t)| t.expected(&m.probabilities()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opspace::{appendix_head, appendix_neck, OpSpec, SpaceTag};
    use crate::tensor::Tensor;

    #[test]
    fn search_space_counts() {
        let n = search_space_size(&[20, 8, 4], &[8, 8, 8]);
        assert_eq!(n.to_string(), "79228162514264337593543950336");
        assert_eq!(search_space_size(&[1], &[1]), BigUint::from(1u32));
        assert_eq!(search_space_size(&[2, 3], &[4, 2]), BigUint::from(128u32));
    }

    #[test]
    fn two_and_four_mix_to_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 4.0);
        let logits = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = mix(&mut tape, &[a, b], logits).unwrap();
        assert_eq!(tape.value(y), &[3.0, -6.0, 1.5]);
    }

    #[test]
    fn single_candidate_mix_is_exact() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2], vec![0.3, -7.0]).unwrap();
        let logits = tape.constant(vec![1], vec![-12.5]).unwrap();
        let y = mix(&mut tape, &[x], logits).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn detection_loss_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let boxes = tape.constant(vec![1, 4], vec![0.5, 0.5, 0.2, 0.2]).unwrap();
        let l = detection_loss(&mut tape, logits, boxes, &[2], &[[0.5, 0.5, 0.2, 0.2]]).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let logits = tape.constant(vec![1, 4], vec![20.0, 0.0, 0.0, 0.0]).unwrap();
        let l = detection_loss(&mut tape, logits, boxes, &[0], &[[0.5, 0.5, 0.2, 0.2]]).unwrap();
        assert!(tape.scalar(l) < 1e-3);

        let off = tape.constant(vec![1, 4], vec![2.5, 2.5, 2.2, 2.2]).unwrap();
        let l = detection_loss(&mut tape, logits, off, &[0], &[[0.5, 0.5, 0.2, 0.2]]).unwrap();
        let ce = tape.scalar(l) - 6.0;
        assert!(ce.abs() < 1e-3 && ce >= 0.0);

        assert!(matches!(
            detection_loss(&mut tape, logits, boxes, &[4], &[[0.5; 4]]),
            Err(Error::Data(_))
        ));
    }

    fn tiny_spaces() -> [SearchSpace; 3] {
        let s = |t, ops: Vec<OpSpec>| SearchSpace::new(t, ops).unwrap();
        [
            s(SpaceTag::Backbone, vec![OpSpec::sep(3, 1), OpSpec::ir(3, 1, 1)]),
            s(SpaceTag::Neck, vec![OpSpec::conv(3, 1), OpSpec::sep(5, 2)]),
            s(SpaceTag::Head, vec![OpSpec::sep(3, 1)]),
        ]
    }

    fn tiny_cfg() -> SupernetConfig {
        SupernetConfig {
            image_size: 64,
            stem_channels: 4,
            stage_channels: [4, 4, 8, 8],
            neck_channels: 4,
            head_fc_dim: 8,
            ..SupernetConfig::desk()
        }
    }

    #[test]
    fn desk_layer_counts_and_extents() {
        let sn = Supernet::<f32>::build(&tiny_cfg(), tiny_spaces(), 0).unwrap();
        assert_eq!(sn.layer_counts(), [5, 8, 4]);
        let last = sn.net.component(Component::Backbone).last().unwrap();
        assert_eq!((last.shape.h, last.shape.w), (2, 2));
        let mut tape = Tape::new();
        let mut bind = ParamBinding::new(&sn.store, false);
        let x = tape.leaf(Tensor::full(vec![2, 3, 64, 64], 0.1));
        let av: Vec<Var> = sn.arch.matrices.iter().map(|m| tape.leaf_from(&m.logits, false)).collect();
        let (c, b) = sn.forward(&mut tape, &mut bind, x, &av).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert_eq!(tape.shape(b), &[2, 4]);
    }

    #[test]
    fn removal_shrinks_everything() {
        let mut sn = Supernet::<f32>::build(&tiny_cfg(), tiny_spaces(), 0).unwrap();
        let before = sn.param_count();
        sn.remove_candidate(Component::Neck, 0).unwrap();
        assert_eq!(sn.spaces[1].len(), 1);
        assert_eq!(sn.arch.matrices[1].n_cols(), 1);
        assert_eq!(sn.tables[1].cols(), 1);
        assert!(sn.param_count() < before);
        assert!(sn.remove_candidate(Component::Neck, 0).is_err());
    }

    #[test]
    fn appendix_spaces_build() {
        let (b, _) = crate::opspace::appendix_backbone();
        let sn = Supernet::<f32>::build(&tiny_cfg(), [b, appendix_neck(), appendix_head()], 1).unwrap();
        assert_eq!(sn.arch.matrices[0].n_cols(), 7);
        assert_eq!(sn.tables[2].cols(), 8);
    }
}
