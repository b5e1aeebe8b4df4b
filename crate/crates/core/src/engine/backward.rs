use ndarray::{Array2, Zip};

use super::EngineError;
use crate::Scalar;

/// Aggregated gradients for the distinct rows a batch touched.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradients<S> {
    /// Strictly increasing.
    pub ids: Vec<u64>,
    /// One row per id.
    pub grads: Array2<S>,
}

impl<S: Scalar> RowGradients<S> {
    pub fn new(ids: Vec<u64>, grads: Array2<S>) -> Result<Self, EngineError> {
        if ids.len() != grads.nrows() {
            return Err(EngineError::ShapeMismatch(format!("{} ids but {} gradient rows", ids.len(), grads.nrows())));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EngineError::ShapeMismatch("row ids must be strictly increasing".into()));
        }
        Ok(Self { ids, grads })
    }

    pub fn empty(dim: usize) -> Self {
        Self { ids: Vec::new(), grads: Array2::zeros((0, dim)) }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.grads.ncols()
    }

    pub fn get(&self, row: u64) -> Option<ndarray::ArrayView1<'_, S>> {
        self.ids.binary_search(&row).ok().map(|k| self.grads.row(k))
    }

    /// Sum of several gradient sets, reduced in argument order per row.
    pub fn sum_all(parts: &[RowGradients<S>], dim: usize) -> RowGradients<S> {
        let mut ids: Vec<u64> = parts.iter().flat_map(|p| p.ids.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut grads = Array2::zeros((ids.len(), dim));
        for p in parts {
            for (k, &id) in p.ids.iter().enumerate() {
                let dst = ids.binary_search(&id).unwrap();
                Zip::from(grads.row_mut(dst)).and(p.grads.row(k)).for_each(|d, &g| *d += g);
            }
        }
        RowGradients { ids, grads }
    }
}

/// Adjoint of sum pooling, gathered per row.
///
/// Every `(sample, occurrence)` pair is sorted by row id (stably, so each
/// row's contributions stay in batch order) and then summed, giving one
/// gradient per distinct row. A row listed twice by the same sample receives
/// that sample's upstream gradient twice.
pub fn backward_sort_aggregate<S: Scalar>(
    lengths: &[usize],
    indices: &[u64],
    upstream: &Array2<S>,
) -> Result<RowGradients<S>, EngineError> {
    if upstream.nrows() != lengths.len() {
        return Err(EngineError::ShapeMismatch(format!(
            "{} samples but {} upstream gradient rows",
            lengths.len(),
            upstream.nrows()
        )));
    }
    let total: usize = lengths.iter().sum();
    if total != indices.len() {
        return Err(EngineError::LayoutMismatch(format!(
            "lengths sum to {total} but {} indices were given",
            indices.len()
        )));
    }
    let mut occurrences = Vec::with_capacity(indices.len());
    let mut cursor = 0;
    for (s, &len) in lengths.iter().enumerate() {
        occurrences.extend(indices[cursor..cursor + len].iter().map(|&row| (row, s)));
        cursor += len;
    }
    occurrences.sort_by_key(|&(row, _)| row);

    let dim = upstream.ncols();
    let mut ids = Vec::new();
    let mut grads = Vec::new();
    let mut k = 0;
    while k < occurrences.len() {
        let row = occurrences[k].0;
        let mut acc = upstream.row(occurrences[k].1).to_owned();
        k += 1;
        while k < occurrences.len() && occurrences[k].0 == row {
            Zip::from(&mut acc).and(upstream.row(occurrences[k].1)).for_each(|a, &g| *a += g);
            k += 1;
        }
        ids.push(row);
        grads.extend(acc);
    }
    let grads = Array2::from_shape_vec((ids.len(), dim), grads).expect("row-major gradients");
    Ok(RowGradients { ids, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shared_row_sums_upstream() {
        // Samples 1 and 2 both touch row 1.
        let up = array![[1.0, 0.0], [2.0, 3.0], [5.0, 7.0]];
        let g = backward_sort_aggregate(&[1, 2, 1], &[0, 1, 4, 1], &up).unwrap();
        assert_eq!(g.ids, vec![0, 1, 4]);
        assert_eq!(g.grads, array![[1.0, 0.0], [7.0, 10.0], [2.0, 3.0]]);
    }

    #[test]
    fn single_occurrence_is_verbatim() {
        let up = array![[0.25, -1.5, 3.0]];
        let g = backward_sort_aggregate(&[1], &[6], &up).unwrap();
        assert_eq!(g.ids, vec![6]);
        assert_eq!(g.grads.row(0), up.row(0));
    }

    #[test]
    fn duplicates_within_a_sample_count_twice() {
        let up = array![[1.5]];
        let g = backward_sort_aggregate(&[2], &[3, 3], &up).unwrap();
        assert_eq!(g.grads, array![[3.0]]);
    }

    #[test]
    fn shape_errors() {
        let up = array![[1.0]];
        assert!(backward_sort_aggregate(&[1, 1], &[0, 0], &up).is_err());
        assert!(backward_sort_aggregate(&[2], &[0], &up).is_err());
        assert!(RowGradients::new(vec![2, 1], array![[1.0], [1.0]]).is_err());
    }

    #[test]
    fn sum_all_merges_rows() {
        let a = RowGradients::new(vec![1, 3], array![[1.0], [2.0]]).unwrap();
        let b = RowGradients::new(vec![3, 4], array![[10.0], [20.0]]).unwrap();
        let s = RowGradients::sum_all(&[a, b], 1);
        assert_eq!(s.ids, vec![1, 3, 4]);
        assert_eq!(s.grads, array![[1.0], [12.0], [20.0]]);
    }
}
