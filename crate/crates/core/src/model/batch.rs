//! Combined sparse batch format: per-table lengths plus one concatenated
//! index buffer, table-major then sample-major.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

use super::{IndexSkew, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BatchError {
    #[error("offsets decrease at position {position}")]
    NonMonotonicOffsets { position: usize },
    #[error("offsets must start with 0")]
    NonZeroOffsetStart,
    #[error("offsets list is empty")]
    EmptyOffsets,
    #[error("lengths sum to {expected} but {actual} indices were given")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("index {index} out of range for table {table}")]
    IndexOutOfRange { table: usize, index: u64 },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("batch dump line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// `[0, l0, l0 + l1, ...]`, one longer than `lengths`.
pub fn lengths_to_offsets(lengths: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(lengths.len() + 1);
    let mut acc = 0usize;
    out.push(0);
    for &l in lengths {
        acc += l;
        out.push(acc);
    }
    out
}

/// Inverse of [`lengths_to_offsets`].
pub fn offsets_to_lengths(offsets: &[usize]) -> Result<Vec<usize>, BatchError> {
    match offsets.first() {
        None => return Err(BatchError::EmptyOffsets),
        Some(&o) if o != 0 => return Err(BatchError::NonZeroOffsetStart),
        _ => {}
    }
    offsets
        .windows(2)
        .enumerate()
        .map(|(i, w)| w[1].checked_sub(w[0]).ok_or(BatchError::NonMonotonicOffsets { position: i + 1 }))
        .collect()
}

/// Lengths-format sparse input for `num_tables` tables and `num_samples`
/// samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinedBatch {
    num_samples: usize,
    num_tables: usize,
    /// `lengths[t * num_samples + s]`
    lengths: Vec<usize>,
    indices: Vec<u64>,
    /// Prefix sums of `lengths`; sample `(t, s)` owns
    /// `indices[offsets[t * S + s]..offsets[t * S + s + 1]]`.
    offsets: Vec<usize>,
}

impl CombinedBatch {
    /// Builds a batch from flat table-major lengths.
    pub fn from_flat(
        num_samples: usize,
        num_tables: usize,
        lengths: Vec<usize>,
        indices: Vec<u64>,
    ) -> Result<Self, BatchError> {
        if lengths.len() != num_samples * num_tables {
            return Err(BatchError::LayoutMismatch(format!(
                "expected {} lengths for {num_tables} tables x {num_samples} samples, got {}",
                num_samples * num_tables,
                lengths.len()
            )));
        }
        let offsets = lengths_to_offsets(&lengths);
        let expected = *offsets.last().unwrap();
        if expected != indices.len() {
            return Err(BatchError::LengthMismatch { expected, actual: indices.len() });
        }
        Ok(Self { num_samples, num_tables, lengths, indices, offsets })
    }

    /// Builds a batch from per-table length rows.
    pub fn new(num_samples: usize, lengths: Vec<Vec<usize>>, indices: Vec<u64>) -> Result<Self, BatchError> {
        let num_tables = lengths.len();
        for (t, row) in lengths.iter().enumerate() {
            if row.len() != num_samples {
                return Err(BatchError::LayoutMismatch(format!(
                    "table {t} has {} lengths, expected {num_samples}",
                    row.len()
                )));
            }
        }
        Self::from_flat(num_samples, num_tables, lengths.concat(), indices)
    }

    /// Batch with zero tables.
    pub fn empty(num_samples: usize) -> Self {
        Self { num_samples, num_tables: 0, lengths: Vec::new(), indices: Vec::new(), offsets: vec![0] }
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_tables(&self) -> usize {
        self.num_tables
    }

    pub fn total_indices(&self) -> usize {
        self.indices.len()
    }

    pub fn lengths(&self, table: usize) -> &[usize] {
        &self.lengths[table * self.num_samples..(table + 1) * self.num_samples]
    }

    pub fn all_lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn all_indices(&self) -> &[u64] {
        &self.indices
    }

    fn table_range(&self, table: usize) -> std::ops::Range<usize> {
        self.offsets[table * self.num_samples]..self.offsets[(table + 1) * self.num_samples]
    }

    pub fn table_indices(&self, table: usize) -> &[u64] {
        &self.indices[self.table_range(table)]
    }

    pub fn sample_indices(&self, table: usize, sample: usize) -> &[u64] {
        let k = table * self.num_samples + sample;
        &self.indices[self.offsets[k]..self.offsets[k + 1]]
    }

    /// Checks every index of table `t` against `rows[t]`.
    pub fn validate_rows(&self, rows: &[u64]) -> Result<(), BatchError> {
        if rows.len() != self.num_tables {
            return Err(BatchError::LayoutMismatch(format!(
                "batch has {} tables, expected {}",
                self.num_tables,
                rows.len()
            )));
        }
        for (t, &h) in rows.iter().enumerate() {
            if let Some(&bad) = self.table_indices(t).iter().find(|&&i| i >= h) {
                return Err(BatchError::IndexOutOfRange { table: t, index: bad });
            }
        }
        Ok(())
    }

    /// Sub-batch with only the listed tables, in the listed order.
    pub fn select_tables(&self, tables: &[usize]) -> CombinedBatch {
        let mut lengths = Vec::with_capacity(tables.len() * self.num_samples);
        let mut indices = Vec::new();
        for &t in tables {
            lengths.extend_from_slice(self.lengths(t));
            indices.extend_from_slice(self.table_indices(t));
        }
        Self::from_flat(self.num_samples, tables.len(), lengths, indices).expect("selection of a valid batch is valid")
    }

    /// Samples `[start, end)` of every table.
    pub fn sample_range(&self, start: usize, end: usize) -> CombinedBatch {
        let n = end - start;
        let mut lengths = Vec::with_capacity(self.num_tables * n);
        let mut indices = Vec::new();
        for t in 0..self.num_tables {
            lengths.extend_from_slice(&self.lengths(t)[start..end]);
            let k0 = t * self.num_samples;
            indices.extend_from_slice(&self.indices[self.offsets[k0 + start]..self.offsets[k0 + end]]);
        }
        Self::from_flat(n, self.num_tables, lengths, indices).expect("sub-range of a valid batch")
    }
}

/// Element order of a multi-worker index buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    /// Worker-major: as received from an AlltoAll.
    Wtb,
    /// Table-major: what the fused embedding kernel consumes.
    Twb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalBatchLayout {
    pub workers: usize,
    pub tables: usize,
    pub local_batch: usize,
    pub order: BatchOrder,
}

/// The global batch as `W` per-worker local batches, i.e. `(W, T, B)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalBatch {
    layout: GlobalBatchLayout,
    locals: Vec<CombinedBatch>,
}

impl GlobalBatch {
    pub fn from_locals(locals: Vec<CombinedBatch>) -> Result<Self, BatchError> {
        let first = locals.first().ok_or_else(|| BatchError::LayoutMismatch("need at least one worker".into()))?;
        let (tables, local_batch) = (first.num_tables(), first.num_samples());
        for (w, l) in locals.iter().enumerate() {
            if l.num_tables() != tables || l.num_samples() != local_batch {
                return Err(BatchError::LayoutMismatch(format!("worker {w} batch shape differs from worker 0")));
            }
        }
        let layout = GlobalBatchLayout { workers: locals.len(), tables, local_batch, order: BatchOrder::Wtb };
        Ok(Self { layout, locals })
    }

    /// Splits a batch of `W * B` samples; sample `s` belongs to worker `s / B`.
    pub fn split(batch: &CombinedBatch, workers: usize) -> Result<Self, BatchError> {
        if workers == 0 || !batch.num_samples().is_multiple_of(workers) {
            return Err(BatchError::LayoutMismatch(format!(
                "{} samples do not split evenly over {workers} workers",
                batch.num_samples()
            )));
        }
        let b = batch.num_samples() / workers;
        Self::from_locals((0..workers).map(|w| batch.sample_range(w * b, (w + 1) * b)).collect())
    }

    pub fn layout(&self) -> GlobalBatchLayout {
        self.layout
    }

    pub fn locals(&self) -> &[CombinedBatch] {
        &self.locals
    }

    pub fn global_samples(&self) -> usize {
        self.layout.workers * self.layout.local_batch
    }

    /// Single batch over all `W * B` samples, table-major.
    pub fn to_combined(&self) -> CombinedBatch {
        let GlobalBatchLayout { workers, tables, local_batch, .. } = self.layout;
        let mut lengths = Vec::with_capacity(workers * tables * local_batch);
        let mut indices = Vec::new();
        for t in 0..tables {
            for l in &self.locals {
                lengths.extend_from_slice(l.lengths(t));
                indices.extend_from_slice(l.table_indices(t));
            }
        }
        CombinedBatch::from_flat(workers * local_batch, tables, lengths, indices)
            .expect("concatenation of valid batches")
    }
}

/// Text dump: header `W T B`, then `W * T` rows of `B` lengths (worker-major),
/// then one index per line in `(W, T, B)` order.
pub fn write_batch_dump(batch: &GlobalBatch) -> String {
    let GlobalBatchLayout { workers, tables, local_batch, .. } = batch.layout;
    let mut out = String::new();
    writeln!(out, "{workers} {tables} {local_batch}").unwrap();
    for l in &batch.locals {
        for t in 0..tables {
            let row: Vec<String> = l.lengths(t).iter().map(ToString::to_string).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    for l in &batch.locals {
        for i in l.all_indices() {
            writeln!(out, "{i}").unwrap();
        }
    }
    out
}

pub fn read_batch_dump(text: &str) -> Result<GlobalBatch, BatchError> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, reason: &str| BatchError::Parse { line: line + 1, reason: reason.into() };
    let (hl, header) = lines.next().ok_or_else(|| parse_err(0, "missing header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| parse_err(hl, "header must be `W T B`")))
        .collect::<Result<_, _>>()?;
    let [workers, tables, local_batch] = dims[..] else {
        return Err(parse_err(hl, "header must be `W T B`"));
    };
    let mut worker_lengths = vec![Vec::with_capacity(tables * local_batch); workers];
    for wl in worker_lengths.iter_mut() {
        for _ in 0..tables {
            let (ln, row) = lines.next().ok_or_else(|| parse_err(hl, "truncated lengths rows"))?;
            let vals: Vec<usize> = row
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| parse_err(ln, "bad length")))
                .collect::<Result<_, _>>()?;
            if vals.len() != local_batch {
                return Err(parse_err(ln, "wrong number of lengths"));
            }
            wl.extend(vals);
        }
    }
    let mut all = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        all.push(line.trim().parse::<u64>().map_err(|_| parse_err(ln, "bad index"))?);
    }
    let mut rest = &all[..];
    let mut locals = Vec::with_capacity(workers);
    for wl in worker_lengths {
        let n: usize = wl.iter().sum();
        if rest.len() < n {
            return Err(BatchError::LengthMismatch { expected: n, actual: rest.len() });
        }
        locals.push(CombinedBatch::from_flat(local_batch, tables, wl, rest[..n].to_vec())?);
        rest = &rest[n..];
    }
    if !rest.is_empty() {
        return Err(BatchError::LengthMismatch { expected: all.len() - rest.len(), actual: all.len() });
    }
    GlobalBatch::from_locals(locals)
}

/// Deterministic synthetic batch. Per-sample pooling is `floor(L)` plus a
/// Bernoulli(`frac(L)`) draw, so its expectation is exactly `L`.
pub fn gen_synthetic_batch(model: &ModelSpec, num_samples: usize, seed: u64) -> CombinedBatch {
    let mut lengths = Vec::with_capacity(model.tables.len() * num_samples);
    let mut indices = Vec::new();
    for (t, table) in model.tables.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let base = table.avg_pooling.floor();
        let frac = table.avg_pooling - base;
        let zipf = match table.skew {
            IndexSkew::Zipf { alpha } => {
                Some(Zipf::new(table.num_rows as f64, alpha).expect("validated zipf parameters"))
            }
            IndexSkew::Uniform => None,
        };
        for _ in 0..num_samples {
            let extra = usize::from(frac > 0.0 && rng.random::<f64>() < frac);
            let len = base as usize + extra;
            lengths.push(len);
            for _ in 0..len {
                let row = match &zipf {
                    Some(z) => (z.sample(&mut rng) as u64).clamp(1, table.num_rows) - 1,
                    None => rng.random_range(0..table.num_rows),
                };
                indices.push(row);
            }
        }
    }
    CombinedBatch::from_flat(num_samples, model.tables.len(), lengths, indices)
        .expect("generated lengths match indices")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TableSpec;
    use proptest::prelude::*;

    #[test]
    fn offsets_examples() {
        assert_eq!(lengths_to_offsets(&[2, 0, 3]), vec![0, 2, 2, 5]);
        assert_eq!(lengths_to_offsets(&[]), vec![0]);
        assert_eq!(offsets_to_lengths(&[0, 2, 2, 5]).unwrap(), vec![2, 0, 3]);
        assert_eq!(offsets_to_lengths(&[0]).unwrap(), Vec::<usize>::new());
        assert_eq!(offsets_to_lengths(&[0, 3, 1]), Err(BatchError::NonMonotonicOffsets { position: 2 }));
        assert_eq!(offsets_to_lengths(&[1, 3]), Err(BatchError::NonZeroOffsetStart));
    }

    proptest! {
        #[test]
        fn offsets_invert_lengths(v in proptest::collection::vec(0usize..50, 0..40)) {
            prop_assert_eq!(offsets_to_lengths(&lengths_to_offsets(&v)).unwrap(), v);
        }

        #[test]
        fn dump_round_trip_is_byte_identical(
            w in 1usize..4, t in 0usize..3, b in 0usize..4, seed in 0u64..1000
        ) {
            let tables = (0..t).map(|i| TableSpec::new(format!("t{i}"), 9, 2, 1.7)).collect();
            let model = ModelSpec::with_tables("m", b, tables);
            let batch = GlobalBatch::split(&gen_synthetic_batch(&model, w * b, seed), w).unwrap();
            let text = write_batch_dump(&batch);
            let back = read_batch_dump(&text).unwrap();
            prop_assert_eq!(&back, &batch);
            prop_assert_eq!(write_batch_dump(&back), text);
        }
    }

    #[test]
    fn synthetic_batches_are_deterministic() {
        let model =
            ModelSpec::with_tables("m", 8, vec![TableSpec::new("a", 100, 4, 3.3), TableSpec::new("b", 5, 4, 1.0)]);
        let a = gen_synthetic_batch(&model, 64, 7);
        assert_eq!(a, gen_synthetic_batch(&model, 64, 7));
        assert_ne!(a, gen_synthetic_batch(&model, 64, 8));
        a.validate_rows(&[100, 5]).unwrap();
        assert!(a.lengths(1).iter().all(|&l| l == 1));
    }

    #[test]
    fn unit_pooling_gives_one_index_per_table() {
        let model =
            ModelSpec::with_tables("m", 1, (0..5).map(|i| TableSpec::new(format!("t{i}"), 1000, 4, 1.0)).collect());
        let b = gen_synthetic_batch(&model, 1, 3);
        assert_eq!(b.total_indices(), 5);
        assert!(b.all_lengths().iter().all(|&l| l == 1));
    }

    #[test]
    fn stochastic_rounding_matches_expectation() {
        let model = ModelSpec::with_tables("m", 1, vec![TableSpec::new("a", 10, 1, 2.25)]);
        let b = gen_synthetic_batch(&model, 40_000, 11);
        let mean = b.total_indices() as f64 / 40_000.0;
        // Bernoulli(0.25) std is sqrt(0.1875); 4 sigma over 40k samples.
        assert!((mean - 2.25).abs() < 4.0 * (0.1875f64 / 40_000.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn uniform_rows_are_within_three_sigma() {
        // H = 10, 1e5 draws: each count ~ Binomial(1e5, 0.1), sigma = sqrt(9000).
        let model = ModelSpec::with_tables("m", 1, vec![TableSpec::new("a", 10, 1, 1.0)]);
        let b = gen_synthetic_batch(&model, 100_000, 5);
        let mut counts = [0u64; 10];
        for &i in b.all_indices() {
            counts[i as usize] += 1;
        }
        let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
        // Chi-square with 9 dof; 99.9th percentile is 27.88.
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1e4).powi(2) / 1e4).sum();
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    #[test]
    fn zipf_skew_prefers_low_rows() {
        let model = ModelSpec::with_tables(
            "m",
            1,
            vec![TableSpec::new("a", 1000, 1, 1.0).with_skew(IndexSkew::Zipf { alpha: 1.2 })],
        );
        let b = gen_synthetic_batch(&model, 10_000, 1);
        b.validate_rows(&[1000]).unwrap();
        let zeros = b.all_indices().iter().filter(|&&i| i == 0).count();
        let high = b.all_indices().iter().filter(|&&i| i == 999).count();
        assert!(zeros > 10 * high && zeros > 1000, "{zeros} {high}");
    }

    #[test]
    fn global_split_and_reassemble() {
        let model =
            ModelSpec::with_tables("m", 3, vec![TableSpec::new("a", 50, 2, 2.5), TableSpec::new("b", 50, 2, 1.5)]);
        let all = gen_synthetic_batch(&model, 12, 2);
        let g = GlobalBatch::split(&all, 4).unwrap();
        assert_eq!(g.layout().order, BatchOrder::Wtb);
        assert_eq!(g.to_combined(), all);
        assert!(GlobalBatch::split(&all, 5).is_err());
    }

    #[test]
    fn out_of_range_index_is_reported() {
        let b = CombinedBatch::new(1, vec![vec![2]], vec![1, 9]).unwrap();
        assert_eq!(b.validate_rows(&[5]), Err(BatchError::IndexOutOfRange { table: 0, index: 9 }));
        assert!(CombinedBatch::new(1, vec![vec![2]], vec![1]).is_err());
    }
}
