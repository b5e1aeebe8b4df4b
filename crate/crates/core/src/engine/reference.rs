use ndarray::Array2;

use super::forward::{fused_forward, split_columns};
use super::optimizer::fused_backward_update;
use super::{EmbeddingTable, EngineError, OptimizerConfig};
use crate::model::CombinedBatch;
use crate::Scalar;

/// Scalar loss over the pooled outputs. Its gradient with respect to each
/// pooled output is what backward receives.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss<S> {
    /// Sum of every pooled value; the upstream gradient is all ones.
    Sum,
    /// `Σ_t Σ weights[t] ⊙ pooled[t]`; the upstream gradient is `weights[t]`.
    Weighted(Vec<Array2<S>>),
}

impl<S: Scalar> Loss<S> {
    pub fn upstream(&self, table: usize, samples: usize, dim: usize) -> Result<Array2<S>, EngineError> {
        match self {
            Loss::Sum => Ok(Array2::ones((samples, dim))),
            Loss::Weighted(w) => {
                let g = w
                    .get(table)
                    .ok_or_else(|| EngineError::ShapeMismatch(format!("no loss weights for table {table}")))?;
                if g.dim() != (samples, dim) {
                    return Err(EngineError::ShapeMismatch(format!(
                        "loss weights for table {table} are {:?}, pooled output is {:?}",
                        g.dim(),
                        (samples, dim)
                    )));
                }
                Ok(g.clone())
            }
        }
    }

    pub fn value(&self, pooled: &[Array2<S>]) -> S {
        match self {
            Loss::Sum => pooled.iter().map(|p| p.sum()).sum(),
            Loss::Weighted(w) => pooled.iter().zip(w).map(|(p, w)| (p * w).sum()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<S> {
    pub pooled: Vec<Array2<S>>,
    pub tables: Vec<EmbeddingTable<S>>,
}

/// Single-worker training step over every table: fused forward, loss
/// gradient, then sorted aggregation and one optimizer update per row.
///
/// The input tables are left untouched.
pub fn train_step_reference<S: Scalar>(
    tables: &[EmbeddingTable<S>],
    batch: &CombinedBatch,
    cfg: &OptimizerConfig,
    loss: &Loss<S>,
) -> Result<StepOutput<S>, EngineError> {
    cfg.validate().map_err(EngineError::ShapeMismatch)?;
    let fused = fused_forward(tables, batch)?;
    let dims: Vec<usize> = tables.iter().map(EmbeddingTable::dim).collect();
    let pooled = split_columns(&fused, &dims);
    let mut updated = tables.to_vec();
    for (t, table) in updated.iter_mut().enumerate() {
        let up = loss.upstream(t, batch.num_samples(), table.dim())?;
        fused_backward_update(table, batch.lengths(t), batch.table_indices(t), &up, cfg)?;
    }
    Ok(StepOutput { pooled, tables: updated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{backward_sort_aggregate, forward_pooled, OptimizerKind};
    use crate::model::{gen_synthetic_batch, ModelSpec, TableSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: OptimizerKind, zero: bool) -> (Vec<EmbeddingTable<f64>>, CombinedBatch) {
        let specs = vec![TableSpec::new("a", 40, 4, 3.0), TableSpec::new("b", 25, 8, 1.5)];
        let tables = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if zero {
                    EmbeddingTable::zeros(s.clone(), kind)
                } else {
                    EmbeddingTable::random(s.clone(), kind, 100 + i as u64)
                }
            })
            .collect();
        let model = ModelSpec::with_tables("m", 1, specs);
        (tables, gen_synthetic_batch(&model, 20, 5))
    }

    #[test]
    fn zero_tables_sgd_moves_by_occurrence_count() {
        let (tables, batch) = setup(OptimizerKind::Sgd, true);
        let lr = 0.5;
        let out = train_step_reference(&tables, &batch, &OptimizerConfig::sgd(lr), &Loss::Sum).unwrap();
        for (t, table) in out.tables.iter().enumerate() {
            let mut counts = vec![0usize; table.num_rows()];
            for &i in batch.table_indices(t) {
                counts[i as usize] += 1;
            }
            for (r, &c) in counts.iter().enumerate() {
                for &v in table.values.row(r) {
                    assert_eq!(v, -lr * c as f64);
                }
            }
        }
        assert!(out.pooled.iter().all(|p| p.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pure_and_deterministic() {
        let (tables, batch) = setup(OptimizerKind::RowWiseAdaGrad, false);
        let cfg = OptimizerConfig::rowwise_adagrad(0.01, 1e-8);
        let a = train_step_reference(&tables, &batch, &cfg, &Loss::Sum).unwrap();
        let b = train_step_reference(&tables, &batch, &cfg, &Loss::Sum).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tables, tables);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (tables, batch) = setup(OptimizerKind::Sgd, false);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let weights: Vec<Array2<f64>> = tables
            .iter()
            .map(|t| Array2::from_shape_simple_fn((20, t.dim()), || rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let loss = Loss::Weighted(weights.clone());
        let eval = |ts: &[EmbeddingTable<f64>]| {
            let pooled: Vec<_> = ts
                .iter()
                .enumerate()
                .map(|(t, tb)| forward_pooled(tb, batch.lengths(t), batch.table_indices(t)).unwrap())
                .collect();
            loss.value(&pooled)
        };
        let h = 1e-4;
        let mut worst = 0.0f64;
        for t in 0..tables.len() {
            let g = backward_sort_aggregate(batch.lengths(t), batch.table_indices(t), &weights[t]).unwrap();
            for r in 0..tables[t].num_rows() {
                for j in 0..tables[t].dim() {
                    let mut plus = tables.clone();
                    plus[t].values[[r, j]] += h;
                    let mut minus = tables.clone();
                    minus[t].values[[r, j]] -= h;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let analytic = g.get(r as u64).map_or(0.0, |row| row[j]);
                    worst = worst.max((fd - analytic).abs());
                }
            }
        }
        assert!(worst <= 1e-6, "max abs error {worst}");
    }

    #[test]
    fn weighted_loss_shape_is_checked() {
        let (tables, batch) = setup(OptimizerKind::Sgd, false);
        let bad = Loss::Weighted(vec![Array2::zeros((3, 3))]);
        assert!(train_step_reference(&tables, &batch, &OptimizerConfig::sgd(0.1), &bad).is_err());
    }

    proptest! {
        #[test]
        fn pooling_is_linear(seed in 0u64..300, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let spec = TableSpec::new("t", 15, 3, 2.5);
            let model = ModelSpec::with_tables("m", 1, vec![spec.clone()]);
            let b = gen_synthetic_batch(&model, 10, seed);
            let a = EmbeddingTable::<f64>::random(spec.clone(), OptimizerKind::Sgd, seed);
            let c = EmbeddingTable::<f64>::random(spec.clone(), OptimizerKind::Sgd, seed + 1);
            let mix = EmbeddingTable::new(spec, &a.values * alpha + &c.values * beta, OptimizerKind::Sgd).unwrap();
            let lhs = forward_pooled(&mix, b.lengths(0), b.table_indices(0)).unwrap();
            let rhs = forward_pooled(&a, b.lengths(0), b.table_indices(0)).unwrap() * alpha
                + forward_pooled(&c, b.lengths(0), b.table_indices(0)).unwrap() * beta;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn aggregation_ignores_sample_order(seed in 0u64..300) {
            let spec = TableSpec::new("t", 12, 2, 3.0);
            let model = ModelSpec::with_tables("m", 1, vec![spec]);
            let b = gen_synthetic_batch(&model, 9, seed);
            // Small integers keep sums exact in any order.
            let up = Array2::from_shape_fn((9, 2), |(i, j)| (i * 2 + j) as f64);
            let mut perm: Vec<usize> = (0..9).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..9).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let lengths: Vec<usize> = perm.iter().map(|&s| b.lengths(0)[s]).collect();
            let indices: Vec<u64> = perm.iter().flat_map(|&s| b.sample_indices(0, s).to_vec()).collect();
            let up_perm = Array2::from_shape_fn((9, 2), |(i, j)| up[[perm[i], j]]);
            let a = backward_sort_aggregate(b.lengths(0), b.table_indices(0), &up).unwrap();
            let p = backward_sort_aggregate(&lengths, &indices, &up_perm).unwrap();
            prop_assert_eq!(a, p);
        }
    }
}
