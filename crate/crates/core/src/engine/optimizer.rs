use ndarray::{s, Array2};

use super::backward::{backward_sort_aggregate, RowGradients};
use super::{EmbeddingTable, EngineError, MomentState, OptimizerConfig, OptimizerKind};
use crate::Scalar;

fn step<S: Scalar>(lr: S, g: S, m: S, eps: S) -> S {
    let denom = m.sqrt() + eps;
    // m == 0 with eps == 0 only happens when every gradient so far was zero.
    if denom == S::zero() {
        S::zero()
    } else {
        lr * g / denom
    }
}

fn check<S: Scalar>(table: &EmbeddingTable<S>, grads: &RowGradients<S>) -> Result<(), EngineError> {
    if grads.dim() != table.dim() {
        return Err(EngineError::ShapeMismatch(format!(
            "gradient width {} but table {} has dim {}",
            grads.dim(),
            table.spec.id,
            table.dim()
        )));
    }
    if let Some(&bad) = grads.ids.iter().find(|&&r| r >= table.num_rows() as u64) {
        return Err(EngineError::IndexOutOfRange { table: table.spec.id.clone(), index: bad });
    }
    Ok(())
}

fn mismatch<S: Scalar>(table: &EmbeddingTable<S>, kind: OptimizerKind) -> EngineError {
    EngineError::OptimizerState {
        kind,
        table: table.spec.id.clone(),
        reason: format!("table holds state for {:?}", table.optimizer_kind()),
    }
}

/// Row-wise AdaGrad over the rows named in `grads`.
///
/// Each (row, column group) keeps one accumulator that grows by the mean
/// squared gradient over the group's columns; the group's weights are then
/// scaled by `lr / (sqrt(m) + eps)`.
pub fn apply_rowwise_adagrad<S: Scalar>(
    table: &mut EmbeddingTable<S>,
    grads: &RowGradients<S>,
    cfg: &OptimizerConfig,
) -> Result<(), EngineError> {
    check(table, grads)?;
    let lr = S::of(cfg.lr);
    let eps = S::of(cfg.eps);
    let MomentState::RowWise { groups, values: moment } = &mut table.moment else {
        return Err(mismatch(table, OptimizerKind::RowWiseAdaGrad));
    };
    for (k, &row) in grads.ids.iter().enumerate() {
        let r = row as usize;
        let g = grads.grads.row(k);
        for (gi, cols) in groups.iter().enumerate() {
            let gs = g.slice(s![cols.clone()]);
            let sq: S = gs.iter().map(|&x| x * x).sum();
            let m = &mut moment[[r, gi]];
            *m += sq / S::of(cols.len() as f64);
            let m = *m;
            let mut w = table.values.slice_mut(s![r, cols.clone()]);
            w.zip_mut_with(&gs, |w, &g| *w -= step(lr, g, m, eps));
        }
    }
    for &row in &grads.ids {
        table.round_row(row as usize);
    }
    Ok(())
}

fn apply_sgd<S: Scalar>(table: &mut EmbeddingTable<S>, grads: &RowGradients<S>, lr: S) {
    for (k, &row) in grads.ids.iter().enumerate() {
        let r = row as usize;
        table.values.row_mut(r).zip_mut_with(&grads.grads.row(k), |w, &g| *w -= lr * g);
        table.round_row(r);
    }
}

fn apply_adagrad<S: Scalar>(table: &mut EmbeddingTable<S>, grads: &RowGradients<S>, lr: S, eps: S) {
    let MomentState::Elementwise(moment) = &mut table.moment else { unreachable!() };
    for (k, &row) in grads.ids.iter().enumerate() {
        let r = row as usize;
        for (j, &g) in grads.grads.row(k).iter().enumerate() {
            let m = &mut moment[[r, j]];
            *m += g * g;
            table.values[[r, j]] -= step(lr, g, *m, eps);
        }
    }
    for &row in &grads.ids {
        table.round_row(row as usize);
    }
}

/// Applies one optimizer step per row in `grads`.
pub fn apply_optimizer<S: Scalar>(
    table: &mut EmbeddingTable<S>,
    grads: &RowGradients<S>,
    cfg: &OptimizerConfig,
) -> Result<(), EngineError> {
    check(table, grads)?;
    if table.optimizer_kind() != cfg.kind {
        return Err(mismatch(table, cfg.kind));
    }
    match cfg.kind {
        OptimizerKind::Sgd => apply_sgd(table, grads, S::of(cfg.lr)),
        OptimizerKind::RowWiseAdaGrad => apply_rowwise_adagrad(table, grads, cfg)?,
        OptimizerKind::AdaGrad => apply_adagrad(table, grads, S::of(cfg.lr), S::of(cfg.eps)),
    }
    Ok(())
}

/// Backward pass fused with the sparse optimizer: gradients are sorted and
/// aggregated per row first, then each touched row is updated once.
///
/// Returns the aggregated gradients that were applied.
pub fn fused_backward_update<S: Scalar>(
    table: &mut EmbeddingTable<S>,
    lengths: &[usize],
    indices: &[u64],
    upstream: &Array2<S>,
    cfg: &OptimizerConfig,
) -> Result<RowGradients<S>, EngineError> {
    let grads = backward_sort_aggregate(lengths, indices, upstream)?;
    apply_optimizer(table, &grads, cfg)?;
    Ok(grads)
}

/// Applies the optimizer once per (sample, occurrence) without aggregating.
/// Only meaningful as a contrast to [`fused_backward_update`].
#[cfg(test)]
pub(crate) fn per_occurrence_update<S: Scalar>(
    table: &mut EmbeddingTable<S>,
    lengths: &[usize],
    indices: &[u64],
    upstream: &Array2<S>,
    cfg: &OptimizerConfig,
) -> Result<(), EngineError> {
    let mut cursor = 0;
    for (sidx, &len) in lengths.iter().enumerate() {
        for &row in &indices[cursor..cursor + len] {
            let g = upstream.row(sidx);
            let one = RowGradients::new(vec![row], g.to_owned().insert_axis(ndarray::Axis(0)))?;
            apply_optimizer(table, &one, cfg)?;
        }
        cursor += len;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_synthetic_batch, ModelSpec, TableSpec};
    use ndarray::array;
    use proptest::prelude::*;

    fn table(values: Array2<f64>, kind: OptimizerKind) -> EmbeddingTable<f64> {
        let spec = TableSpec::new("t", values.nrows() as u64, values.ncols(), 1.0);
        EmbeddingTable::new(spec, values, kind).unwrap()
    }

    #[test]
    fn rowwise_adagrad_example() {
        let mut t = table(array![[1.0, 1.0]], OptimizerKind::RowWiseAdaGrad);
        let g = RowGradients::new(vec![0], array![[3.0, 4.0]]).unwrap();
        apply_rowwise_adagrad(&mut t, &g, &OptimizerConfig::rowwise_adagrad(0.1, 0.0)).unwrap();
        assert_eq!(t.moment.values(), vec![12.5]);
        let root = 12.5f64.sqrt();
        assert_eq!(t.values[[0, 0]], 1.0 - 0.1 * 3.0 / root);
        assert_eq!(t.values[[0, 1]], 1.0 - 0.1 * 4.0 / root);
        // The commonly quoted 6-digit values are themselves rounded loosely.
        assert!((t.values[[0, 0]] - 0.915153).abs() < 1e-5);
        assert!((t.values[[0, 1]] - 0.886871).abs() < 1e-5);
    }

    #[test]
    fn rowwise_with_unit_dim_is_adagrad() {
        let w = array![[0.3], [-0.7]];
        let g = RowGradients::new(vec![1], array![[0.25]]).unwrap();
        let mut a = table(w.clone(), OptimizerKind::RowWiseAdaGrad);
        let mut b = table(w, OptimizerKind::AdaGrad);
        for _ in 0..3 {
            apply_optimizer(&mut a, &g, &OptimizerConfig::rowwise_adagrad(0.05, 1e-8)).unwrap();
            apply_optimizer(&mut b, &g, &OptimizerConfig::adagrad(0.05, 1e-8)).unwrap();
        }
        assert_eq!(a.values, b.values);
        assert_eq!(a.moment.values(), b.moment.values());
    }

    #[test]
    fn zero_gradient_leaves_row_alone() {
        let mut t = table(array![[2.0, -1.0]], OptimizerKind::RowWiseAdaGrad);
        let cfg = OptimizerConfig::rowwise_adagrad(0.1, 0.0);
        apply_optimizer(&mut t, &RowGradients::new(vec![0], array![[1.0, 1.0]]).unwrap(), &cfg).unwrap();
        let before = t.clone();
        apply_optimizer(&mut t, &RowGradients::new(vec![0], array![[0.0, 0.0]]).unwrap(), &cfg).unwrap();
        assert_eq!(t, before);

        // Fresh state and eps = 0 must not produce NaN.
        let mut z = table(array![[2.0]], OptimizerKind::AdaGrad);
        apply_optimizer(
            &mut z,
            &RowGradients::new(vec![0], array![[0.0]]).unwrap(),
            &OptimizerConfig::adagrad(0.1, 0.0),
        )
        .unwrap();
        assert_eq!(z.values[[0, 0]], 2.0);
    }

    #[test]
    fn untouched_rows_unchanged() {
        let mut t = table(array![[1.0], [2.0], [3.0]], OptimizerKind::RowWiseAdaGrad);
        let g = RowGradients::new(vec![1], array![[0.5]]).unwrap();
        apply_optimizer(&mut t, &g, &OptimizerConfig::rowwise_adagrad(0.1, 0.0)).unwrap();
        assert_eq!(t.values[[0, 0]], 1.0);
        assert_eq!(t.values[[2, 0]], 3.0);
        assert_eq!(t.moment.values(), vec![0.0, 0.25, 0.0]);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let mut t = table(array![[1.0]], OptimizerKind::Sgd);
        let g = RowGradients::new(vec![0], array![[1.0]]).unwrap();
        assert!(matches!(
            apply_optimizer(&mut t, &g, &OptimizerConfig::adagrad(0.1, 0.0)),
            Err(EngineError::OptimizerState { .. })
        ));
    }

    #[test]
    fn aggregation_differs_from_per_occurrence_adagrad() {
        // 1-D, w=0, row hit twice with g=1.
        // Aggregated: m=4, w = -lr*2/2 = -lr.
        // Twice: m=1, w=-lr; then m=2, w = -lr - lr/sqrt(2).
        let lr = 0.1;
        let cfg = OptimizerConfig::rowwise_adagrad(lr, 0.0);
        let up = array![[1.0], [1.0]];
        let mut fused = table(array![[0.0]], OptimizerKind::RowWiseAdaGrad);
        fused_backward_update(&mut fused, &[1, 1], &[0, 0], &up, &cfg).unwrap();
        let mut naive = fused.clone();
        naive.values[[0, 0]] = 0.0;
        naive.moment = MomentState::for_kind(OptimizerKind::RowWiseAdaGrad, 1, 1);
        per_occurrence_update(&mut naive, &[1, 1], &[0, 0], &up, &cfg).unwrap();
        assert_eq!(fused.values[[0, 0]], -lr);
        assert!((naive.values[[0, 0]] - (-lr - lr / 2f64.sqrt())).abs() < 1e-15);
        assert_ne!(fused.values, naive.values);
    }

    #[test]
    fn sgd_fused_equals_sequential() {
        // Power-of-two magnitudes keep every partial sum exact.
        let mut t = table(Array2::from_shape_fn((8, 3), |(i, j)| (i * 3 + j) as f64 * 0.25), OptimizerKind::Sgd);
        let up = Array2::from_shape_fn((4, 3), |(i, j)| ((i + j) % 3) as f64 * 0.5);
        let lengths = [2, 3, 1, 2];
        let idx = [1, 4, 4, 1, 7, 0, 4, 1];
        let cfg = OptimizerConfig::sgd(0.125);
        let mut seq = t.clone();
        fused_backward_update(&mut t, &lengths, &idx, &up, &cfg).unwrap();
        per_occurrence_update(&mut seq, &lengths, &idx, &up, &cfg).unwrap();
        assert_eq!(t.values, seq.values);
    }

    #[test]
    fn cw_groups_keep_separate_moments() {
        let mut t = table(array![[1.0, 1.0, 1.0, 1.0]], OptimizerKind::RowWiseAdaGrad);
        t.split_moment_groups(vec![0..2, 2..4]);
        let g = RowGradients::new(vec![0], array![[2.0, 2.0, 0.0, 4.0]]).unwrap();
        apply_rowwise_adagrad(&mut t, &g, &OptimizerConfig::rowwise_adagrad(1.0, 0.0)).unwrap();
        assert_eq!(t.moment.values(), vec![4.0, 8.0]);
        assert_eq!(t.values[[0, 0]], 0.0);
        assert!((t.values[[0, 3]] - (1.0 - 4.0 / 8f64.sqrt())).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn fused_is_aggregate_then_apply(seed in 0u64..500, kind in 0usize..3) {
            let kind = [OptimizerKind::Sgd, OptimizerKind::RowWiseAdaGrad, OptimizerKind::AdaGrad][kind];
            let cfg = OptimizerConfig { kind, lr: 0.05, eps: 1e-6 };
            let spec = TableSpec::new("t", 30, 4, 3.0);
            let model = ModelSpec::with_tables("m", 1, vec![spec.clone()]);
            let b = gen_synthetic_batch(&model, 12, seed);
            let up = Array2::from_shape_fn((12, 4), |(i, j)| ((i * 7 + j * 3 + seed as usize) % 11) as f64 / 7.0 - 0.6);
            let start = EmbeddingTable::<f64>::random(spec, kind, seed);
            let mut fused = start.clone();
            fused_backward_update(&mut fused, b.lengths(0), b.table_indices(0), &up, &cfg).unwrap();
            let mut manual = start;
            let g = backward_sort_aggregate(b.lengths(0), b.table_indices(0), &up).unwrap();
            apply_optimizer(&mut manual, &g, &cfg).unwrap();
            prop_assert_eq!(fused, manual);
        }

        #[test]
        fn moments_never_decrease(seed in 0u64..200) {
            let spec = TableSpec::new("t", 10, 3, 2.0);
            let model = ModelSpec::with_tables("m", 1, vec![spec.clone()]);
            let cfg = OptimizerConfig::rowwise_adagrad(0.1, 1e-8);
            let mut t = EmbeddingTable::<f64>::random(spec, OptimizerKind::RowWiseAdaGrad, seed);
            let mut prev = t.moment.values();
            for step in 0..4 {
                let b = gen_synthetic_batch(&model, 6, seed * 10 + step);
                let up = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
                fused_backward_update(&mut t, b.lengths(0), b.table_indices(0), &up, &cfg).unwrap();
                let now = t.moment.values();
                prop_assert!(now.iter().zip(&prev).all(|(a, b)| a >= b));
                prev = now;
            }
        }
    }
}
