use ndarray::{s, Array2};

use super::{EmbeddingTable, EngineError};
use crate::model::CombinedBatch;
use crate::Scalar;

fn check_lengths(lengths: &[usize], indices: &[u64]) -> Result<(), EngineError> {
    let total: usize = lengths.iter().sum();
    if total != indices.len() {
        return Err(EngineError::LayoutMismatch(format!(
            "lengths sum to {total} but {} indices were given",
            indices.len()
        )));
    }
    Ok(())
}

/// Sum-pooled lookup: row `s` of the output is the sum of the table rows
/// listed for sample `s`, accumulated in index order. Empty samples pool to
/// zero.
pub fn forward_pooled<S: Scalar>(
    table: &EmbeddingTable<S>,
    lengths: &[usize],
    indices: &[u64],
) -> Result<Array2<S>, EngineError> {
    check_lengths(lengths, indices)?;
    let mut out = Array2::zeros((lengths.len(), table.dim()));
    pool_into(table, lengths, indices, &mut out, 0)?;
    Ok(out)
}

fn pool_into<S: Scalar>(
    table: &EmbeddingTable<S>,
    lengths: &[usize],
    indices: &[u64],
    out: &mut Array2<S>,
    col0: usize,
) -> Result<(), EngineError> {
    let rows = table.num_rows() as u64;
    let dim = table.dim();
    let mut cursor = 0;
    for (s, &len) in lengths.iter().enumerate() {
        let mut dst = out.slice_mut(s![s, col0..col0 + dim]);
        for &idx in &indices[cursor..cursor + len] {
            if idx >= rows {
                return Err(EngineError::IndexOutOfRange { table: table.spec.id.clone(), index: idx });
            }
            dst.zip_mut_with(&table.values.row(idx as usize), |d, &v| *d += v);
        }
        cursor += len;
    }
    Ok(())
}

/// One pass over a combined batch for all tables resident on a worker.
///
/// The result has `num_samples` rows and the tables' columns side by side,
/// in table order.
pub fn fused_forward<S: Scalar>(tables: &[EmbeddingTable<S>], batch: &CombinedBatch) -> Result<Array2<S>, EngineError> {
    if batch.num_tables() != tables.len() {
        return Err(EngineError::LayoutMismatch(format!(
            "batch has {} tables, worker holds {}",
            batch.num_tables(),
            tables.len()
        )));
    }
    let width: usize = tables.iter().map(EmbeddingTable::dim).sum();
    let mut out = Array2::zeros((batch.num_samples(), width));
    let mut col = 0;
    for (t, table) in tables.iter().enumerate() {
        pool_into(table, batch.lengths(t), batch.table_indices(t), &mut out, col)?;
        col += table.dim();
    }
    Ok(out)
}

/// Splits a fused output back into per-table blocks of the given widths.
pub fn split_columns<S: Scalar>(fused: &Array2<S>, dims: &[usize]) -> Vec<Array2<S>> {
    let mut col = 0;
    dims.iter()
        .map(|&d| {
            let block = fused.slice(s![.., col..col + d]).to_owned();
            col += d;
            block
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::OptimizerKind;
    use crate::model::{gen_synthetic_batch, ModelSpec, TableSpec};
    use ndarray::array;

    fn table(values: Array2<f64>) -> EmbeddingTable<f64> {
        let spec = TableSpec::new("t", values.nrows() as u64, values.ncols(), 1.0);
        EmbeddingTable::new(spec, values, OptimizerKind::Sgd).unwrap()
    }

    #[test]
    fn sums_rows() {
        let t = table(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let out = forward_pooled(&t, &[2, 1, 0], &[0, 2, 1]).unwrap();
        assert_eq!(out, array![[6.0, 8.0], [3.0, 4.0], [0.0, 0.0]]);
    }

    #[test]
    fn rejects_bad_input() {
        let t = table(array![[1.0], [2.0]]);
        assert!(matches!(forward_pooled(&t, &[1], &[2]), Err(EngineError::IndexOutOfRange { index: 2, .. })));
        assert!(matches!(forward_pooled(&t, &[2], &[0]), Err(EngineError::LayoutMismatch(_))));
    }

    #[test]
    fn matches_scalar_loop() {
        let spec = TableSpec::new("t", 50, 7, 4.3);
        let t = EmbeddingTable::<f64>::random(spec.clone(), OptimizerKind::Sgd, 3);
        let model = ModelSpec::with_tables("m", 1, vec![spec]);
        let b = gen_synthetic_batch(&model, 40, 1);
        let out = forward_pooled(&t, b.lengths(0), b.table_indices(0)).unwrap();
        for s in 0..40 {
            for j in 0..7 {
                let mut acc = 0.0;
                for &i in b.sample_indices(0, s) {
                    acc += t.values[[i as usize, j]];
                }
                assert_eq!(out[[s, j]].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn fused_equals_per_table() {
        let specs = vec![TableSpec::new("a", 20, 3, 2.0), TableSpec::new("b", 30, 5, 3.5)];
        let tables: Vec<_> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| EmbeddingTable::<f64>::random(s.clone(), OptimizerKind::Sgd, i as u64))
            .collect();
        let model = ModelSpec::with_tables("m", 1, specs);
        let b = gen_synthetic_batch(&model, 16, 9);
        let fused = fused_forward(&tables, &b).unwrap();
        let parts = split_columns(&fused, &[3, 5]);
        for (t, part) in parts.iter().enumerate() {
            assert_eq!(part, &forward_pooled(&tables[t], b.lengths(t), b.table_indices(t)).unwrap());
        }
        let empty = fused_forward::<f64>(&[], &CombinedBatch::empty(4)).unwrap();
        assert_eq!(empty.dim(), (4, 0));
        assert!(matches!(fused_forward(&tables[..1], &b), Err(EngineError::LayoutMismatch(_))));
    }
}
