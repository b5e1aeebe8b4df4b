use std::ops::Range;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fp16::fp16_round;
use crate::model::{Precision, TableSpec};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    RowWiseAdaGrad,
    AdaGrad,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sgd" => Some(OptimizerKind::Sgd),
            "rowwise_adagrad" | "row_wise_adagrad" => Some(OptimizerKind::RowWiseAdaGrad),
            "adagrad" => Some(OptimizerKind::AdaGrad),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Added to `sqrt(moment)` in the denominator.
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, eps: 0.0 }
    }

    pub fn rowwise_adagrad(lr: f64, eps: f64) -> Self {
        Self { kind: OptimizerKind::RowWiseAdaGrad, lr, eps }
    }

    pub fn adagrad(lr: f64, eps: f64) -> Self {
        Self { kind: OptimizerKind::AdaGrad, lr, eps }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err("lr must be > 0".into());
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err("eps must be >= 0".into());
        }
        Ok(())
    }
}

/// Optimizer state of one table.
#[derive(Debug, Clone, PartialEq)]
pub enum MomentState<S> {
    None,
    /// One accumulator per (row, column group). A plain row-wise AdaGrad
    /// table has a single group covering all columns; a table whose columns
    /// are sharded keeps one group per column shard.
    RowWise {
        groups: Vec<Range<usize>>,
        values: Array2<S>,
    },
    Elementwise(Array2<S>),
}

impl<S: Scalar> MomentState<S> {
    pub fn for_kind(kind: OptimizerKind, rows: usize, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => MomentState::None,
            OptimizerKind::RowWiseAdaGrad => {
                MomentState::RowWise { groups: vec![0..dim], values: Array2::zeros((rows, 1)) }
            }
            OptimizerKind::AdaGrad => MomentState::Elementwise(Array2::zeros((rows, dim))),
        }
    }

    /// Flattened moment values, row-major.
    pub fn values(&self) -> Vec<S> {
        match self {
            MomentState::None => Vec::new(),
            MomentState::RowWise { values, .. } | MomentState::Elementwise(values) => values.iter().copied().collect(),
        }
    }
}

/// Embedding table values plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    pub spec: TableSpec,
    pub values: Array2<S>,
    pub moment: MomentState<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    /// Wraps `values`, rounding them through FP16 storage when the spec asks
    /// for half precision.
    pub fn new(spec: TableSpec, values: Array2<S>, kind: OptimizerKind) -> Result<Self, String> {
        let (rows, dim) = values.dim();
        if rows as u64 != spec.num_rows || dim != spec.dim {
            return Err(format!("values are {rows}x{dim} but table {} is {}x{}", spec.id, spec.num_rows, spec.dim));
        }
        let mut t = Self { moment: MomentState::for_kind(kind, rows, dim), spec, values };
        t.apply_storage_precision();
        Ok(t)
    }

    pub fn zeros(spec: TableSpec, kind: OptimizerKind) -> Self {
        let values = Array2::zeros((spec.num_rows as usize, spec.dim));
        Self::new(spec, values, kind).expect("shape matches spec")
    }

    /// Values drawn uniformly from `[-0.5, 0.5)` with a seeded generator.
    pub fn random(spec: TableSpec, kind: OptimizerKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values =
            Array2::from_shape_simple_fn((spec.num_rows as usize, spec.dim), || S::of(rng.random::<f64>() - 0.5));
        Self::new(spec, values, kind).expect("shape matches spec")
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.moment {
            MomentState::None => OptimizerKind::Sgd,
            MomentState::RowWise { .. } => OptimizerKind::RowWiseAdaGrad,
            MomentState::Elementwise(_) => OptimizerKind::AdaGrad,
        }
    }

    /// Splits the row-wise accumulator into one group per column slice,
    /// copying the current per-row value into each group.
    pub fn split_moment_groups(&mut self, groups: Vec<Range<usize>>) {
        if let MomentState::RowWise { values, groups: old } = &mut self.moment {
            assert_eq!(old.len(), 1, "moment already split");
            let rows = values.nrows();
            let col = values.column(0).to_owned();
            let mut next = Array2::zeros((rows, groups.len()));
            for mut c in next.columns_mut() {
                c.assign(&col);
            }
            *values = next;
            *old = groups;
        }
    }

    pub(crate) fn apply_storage_precision(&mut self) {
        if self.spec.precision == Precision::Fp16 {
            self.values.mapv_inplace(|v| S::of(fp16_round(v.to_f64().unwrap())));
        }
    }

    pub(crate) fn round_row(&mut self, row: usize) {
        if self.spec.precision == Precision::Fp16 {
            for v in self.values.row_mut(row) {
                *v = S::of(fp16_round(v.to_f64().unwrap()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_checked() {
        let spec = TableSpec::new("t", 3, 2, 1.0);
        assert!(EmbeddingTable::<f64>::new(spec.clone(), Array2::zeros((2, 2)), OptimizerKind::Sgd).is_err());
        let t = EmbeddingTable::<f64>::zeros(spec, OptimizerKind::RowWiseAdaGrad);
        assert_eq!(t.moment.values().len(), 3);
    }

    #[test]
    fn fp16_tables_are_stored_rounded() {
        let spec = TableSpec::new("t", 1, 1, 1.0).with_precision(Precision::Fp16);
        let t = EmbeddingTable::<f64>::new(spec, Array2::from_elem((1, 1), 2049.0), OptimizerKind::Sgd).unwrap();
        assert_eq!(t.values[[0, 0]], 2048.0);
    }

    #[test]
    fn random_tables_are_seeded() {
        let spec = TableSpec::new("t", 4, 3, 1.0);
        let a = EmbeddingTable::<f64>::random(spec.clone(), OptimizerKind::Sgd, 9);
        assert_eq!(a, EmbeddingTable::random(spec.clone(), OptimizerKind::Sgd, 9));
        assert_ne!(a, EmbeddingTable::random(spec, OptimizerKind::Sgd, 10));
    }
}
