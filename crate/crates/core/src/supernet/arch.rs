use serde::{Deserialize, Serialize};

use crate::opspace::Component;
use crate::real::Real;
use crate::tensor::{softmax_in_place, Tensor};

/// Logits for one component: one row per searched layer, one column per
/// candidate in space order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ArchMatrix<T> {
    pub component: Component,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub logits: Tensor<T>,
}

impl<T: Real> ArchMatrix<T> {
    pub fn zeros(component: Component, rows: Vec<String>, cols: Vec<String>) -> Self {
        let logits = Tensor::zeros(vec![rows.len(), cols.len()]);
        Self {
            component,
            rows,
            cols,
            logits,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn logit_rows(&self) -> Vec<Vec<f64>> {
        self.logits
            .data()
            .chunks(self.n_cols())
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect()
    }

    /// Row-wise softmax, computed in f64.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        let mut rows = self.logit_rows();
        rows.iter_mut().for_each(|r| softmax_in_place(r));
        rows
    }

    pub fn remove_column(&mut self, col: usize) {
        let n = self.n_cols();
        let data: Vec<T> = self
            .logits
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n != col)
            .map(|(_, &v)| v)
            .collect();
        self.cols.remove(col);
        self.logits = Tensor::new(vec![self.rows.len(), n - 1], data).expect("sized");
    }
}

/// α, β, γ (or any list of matrices for non-detector relaxed models).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ArchParams<T> {
    pub matrices: Vec<ArchMatrix<T>>,
}

impl<T: Real> ArchParams<T> {
    pub fn new(matrices: Vec<ArchMatrix<T>>) -> Self {
        Self { matrices }
    }

    pub fn get(&self, c: Component) -> Option<&ArchMatrix<T>> {
        self.matrices.iter().find(|m| m.component == c)
    }

    pub fn alpha(&self) -> Option<&ArchMatrix<T>> {
        self.get(Component::Backbone)
    }

    pub fn beta(&self) -> Option<&ArchMatrix<T>> {
        self.get(Component::Neck)
    }

    pub fn gamma(&self) -> Option<&ArchMatrix<T>> {
        self.get(Component::Head)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.matrices.iter_mut().map(|m| &mut m.logits).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.matrices
            .iter()
            .all(|m| m.logits.data().iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_removal_keeps_other_entries() {
        let mut m = ArchMatrix::<f64>::zeros(
            Component::Neck,
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
        );
        m.logits = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        m.remove_column(1);
        assert_eq!(m.logits.data(), &[1., 3., 4., 6.]);
        assert_eq!(m.cols, vec!["x".to_string(), "z".to_string()]);
    }

    #[test]
    fn zero_logits_are_uniform() {
        let m = ArchMatrix::<f64>::zeros(Component::Head, vec!["r".into()], vec!["a".into(), "b".into()]);
        assert_eq!(m.probabilities(), vec![vec![0.5, 0.5]]);
    }
}
