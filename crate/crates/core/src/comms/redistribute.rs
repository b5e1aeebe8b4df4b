use std::ops::Range;

use super::CommsError;
use crate::model::{BatchOrder, CombinedBatch, GlobalBatch, GlobalBatchLayout};
use crate::planner::{Scheme, ShardingPlan};

const LENGTH_BYTES: u64 = 4;
const INDEX_BYTES: u64 = 8;

/// Lengths plus indices of one table for one destination.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bucket {
    pub lengths: Vec<usize>,
    pub indices: Vec<u64>,
}

fn check_bounds(bounds: &[Range<u64>]) -> Result<u64, CommsError> {
    let first = bounds.first().ok_or_else(|| CommsError::LayoutMismatch("no row shards".into()))?;
    if first.start != 0 {
        return Err(CommsError::LayoutMismatch(format!("row shards start at {}", first.start)));
    }
    for w in bounds.windows(2) {
        if w[0].end != w[1].start || w[0].start > w[0].end {
            return Err(CommsError::LayoutMismatch(format!("row shards {:?} and {:?} do not abut", w[0], w[1])));
        }
    }
    Ok(bounds.last().unwrap().end)
}

/// Routes each index to the row shard containing it, rebased to that shard.
/// Order within a sample is kept.
pub fn bucketize_rowwise(lengths: &[usize], indices: &[u64], bounds: &[Range<u64>]) -> Result<Vec<Bucket>, CommsError> {
    let rows = check_bounds(bounds)?;
    let total: usize = lengths.iter().sum();
    if total != indices.len() {
        return Err(CommsError::LayoutMismatch(format!("lengths sum to {total}, got {} indices", indices.len())));
    }
    let mut out: Vec<Bucket> =
        bounds.iter().map(|_| Bucket { lengths: vec![0; lengths.len()], indices: Vec::new() }).collect();
    let mut cursor = 0;
    for (s, &len) in lengths.iter().enumerate() {
        for &i in &indices[cursor..cursor + len] {
            if i >= rows {
                return Err(CommsError::IndexOutOfRange { index: i, rows });
            }
            let k = bounds.partition_point(|r| r.end <= i);
            out[k].lengths[s] += 1;
            out[k].indices.push(i - bounds[k].start);
        }
        cursor += len;
    }
    Ok(out)
}

/// Concatenates each sample's shard-local indices back into global row ids,
/// shard by shard.
pub fn unbucketize_rowwise(buckets: &[Bucket], bounds: &[Range<u64>]) -> Result<Bucket, CommsError> {
    check_bounds(bounds)?;
    if buckets.len() != bounds.len() {
        return Err(CommsError::LayoutMismatch(format!("{} buckets for {} shards", buckets.len(), bounds.len())));
    }
    let samples = buckets.first().map_or(0, |b| b.lengths.len());
    let mut cursors = vec![0usize; buckets.len()];
    let mut out = Bucket { lengths: vec![0; samples], indices: Vec::new() };
    for s in 0..samples {
        for (k, b) in buckets.iter().enumerate() {
            let n = b.lengths[s];
            out.indices.extend(b.indices[cursors[k]..cursors[k] + n].iter().map(|&i| i + bounds[k].start));
            cursors[k] += n;
            out.lengths[s] += n;
        }
    }
    Ok(out)
}

/// One copy of the table's input per column shard.
pub fn replicate_columnwise(lengths: &[usize], indices: &[u64], num_col_shards: usize) -> Vec<Bucket> {
    let b = Bucket { lengths: lengths.to_vec(), indices: indices.to_vec() };
    vec![b; num_col_shards]
}

/// A shard resident on a worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalShard {
    pub table: usize,
    /// Position within the table's plan entry.
    pub shard: usize,
    pub rows: Range<u64>,
    pub cols: Range<usize>,
}

/// Everything one worker received for its local shards.
///
/// In `Wtb` order the buffers hold one `(source worker, local shard)` block
/// after another; in `Twb` order the blocks are shard-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerSlice {
    pub worker: usize,
    pub shards: Vec<LocalShard>,
    pub layout: GlobalBatchLayout,
    pub lengths: Vec<usize>,
    pub indices: Vec<u64>,
}

impl WorkerSlice {
    /// The received input as a batch over `W * B` samples with one table per
    /// local shard.
    pub fn to_batch(&self) -> Result<CombinedBatch, CommsError> {
        if self.layout.order != BatchOrder::Twb {
            return Err(CommsError::LayoutMismatch("slice must be permuted to (T, W, B) first".into()));
        }
        let GlobalBatchLayout { workers, tables, local_batch, .. } = self.layout;
        Ok(CombinedBatch::from_flat(workers * local_batch, tables, self.lengths.clone(), self.indices.clone())?)
    }
}

/// Bytes moved by the two exchange phases, `[src][dst]`, self-traffic
/// included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeLog {
    pub lengths_bytes: Vec<Vec<u64>>,
    pub index_bytes: Vec<Vec<u64>>,
}

impl ExchangeLog {
    fn new(w: usize) -> Self {
        Self { lengths_bytes: vec![vec![0; w]; w], index_bytes: vec![vec![0; w]; w] }
    }

    pub fn sent(&self, worker: usize) -> u64 {
        self.lengths_bytes[worker].iter().chain(&self.index_bytes[worker]).sum()
    }

    pub fn received(&self, worker: usize) -> u64 {
        self.lengths_bytes.iter().chain(&self.index_bytes).map(|row| row[worker]).sum()
    }

    pub fn total(&self) -> u64 {
        self.lengths_bytes.iter().chain(&self.index_bytes).flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Redistribution {
    pub slices: Vec<WorkerSlice>,
    pub log: ExchangeLog,
}

fn local_shards(plan: &ShardingPlan) -> Vec<Vec<LocalShard>> {
    let mut out = vec![Vec::new(); plan.num_workers];
    for (t, tp) in plan.tables.iter().enumerate() {
        if tp.scheme == Scheme::DataParallel {
            continue;
        }
        for (k, s) in tp.shards.iter().enumerate() {
            out[s.worker].push(LocalShard { table: t, shard: k, rows: s.rows.clone(), cols: s.cols.clone() });
        }
    }
    out
}

/// Moves every worker's local input to the workers owning the matching
/// shards: an exchange of lengths, then one of indices sized from them.
/// Row-split tables are bucketized; column-split tables are replicated.
/// Data-parallel tables stay where they are and do not appear in the slices.
pub fn alltoall_redistribute(global: &GlobalBatch, plan: &ShardingPlan) -> Result<Redistribution, CommsError> {
    let layout = global.layout();
    if layout.order != BatchOrder::Wtb {
        return Err(CommsError::LayoutMismatch("input must be in (W, T, B) order".into()));
    }
    let w = plan.num_workers;
    if layout.workers != w || layout.tables != plan.tables.len() {
        return Err(CommsError::LayoutMismatch(format!(
            "batch has {} workers x {} tables, plan has {} x {}",
            layout.workers,
            layout.tables,
            w,
            plan.tables.len()
        )));
    }
    let b = layout.local_batch;
    let owned = local_shards(plan);

    // send[src][t][k]: what src contributes to shard k of table t.
    let mut send: Vec<Vec<Vec<Bucket>>> = Vec::with_capacity(w);
    for local in global.locals() {
        let mut per_table = Vec::with_capacity(plan.tables.len());
        for (t, tp) in plan.tables.iter().enumerate() {
            let (lengths, indices) = (local.lengths(t), local.table_indices(t));
            let buckets = match tp.scheme {
                Scheme::DataParallel => Vec::new(),
                s if s.is_row_split() => {
                    let bounds: Vec<_> = tp.shards.iter().map(|s| s.rows.clone()).collect();
                    bucketize_rowwise(lengths, indices, &bounds)?
                }
                _ => replicate_columnwise(lengths, indices, tp.shards.len()),
            };
            per_table.push(buckets);
        }
        send.push(per_table);
    }

    let mut log = ExchangeLog::new(w);
    let mut slices = Vec::with_capacity(w);
    for (dst, shards) in owned.into_iter().enumerate() {
        // Lengths first; the receiver sizes its index buffer from them.
        let mut lengths = Vec::with_capacity(w * shards.len() * b);
        let mut expected = 0usize;
        for (src, per_table) in send.iter().enumerate() {
            for ls in &shards {
                let bucket = &per_table[ls.table][ls.shard];
                lengths.extend_from_slice(&bucket.lengths);
                expected += bucket.lengths.iter().sum::<usize>();
                log.lengths_bytes[src][dst] += bucket.lengths.len() as u64 * LENGTH_BYTES;
            }
        }
        let mut indices = Vec::with_capacity(expected);
        for (src, per_table) in send.iter().enumerate() {
            for ls in &shards {
                let bucket = &per_table[ls.table][ls.shard];
                indices.extend_from_slice(&bucket.indices);
                log.index_bytes[src][dst] += bucket.indices.len() as u64 * INDEX_BYTES;
            }
        }
        debug_assert_eq!(indices.len(), expected);
        let layout = GlobalBatchLayout { workers: w, tables: shards.len(), local_batch: b, order: BatchOrder::Wtb };
        slices.push(WorkerSlice { worker: dst, shards, layout, lengths, indices });
    }
    Ok(Redistribution { slices, log })
}

/// Reorders `outer × inner` blocks of `b` lengths each (and their indices)
/// into `inner × outer`.
fn transpose_blocks(
    lengths: &[usize],
    indices: &[u64],
    outer: usize,
    inner: usize,
    b: usize,
) -> (Vec<usize>, Vec<u64>) {
    let block_len: Vec<usize> = lengths.chunks(b.max(1)).map(|c| c.iter().sum()).collect();
    let mut starts = Vec::with_capacity(block_len.len());
    let mut acc = 0;
    for &n in &block_len {
        starts.push(acc);
        acc += n;
    }
    let mut out_l = Vec::with_capacity(lengths.len());
    let mut out_i = Vec::with_capacity(indices.len());
    for i in 0..inner {
        for o in 0..outer {
            let blk = o * inner + i;
            out_l.extend_from_slice(&lengths[blk * b..(blk + 1) * b]);
            out_i.extend_from_slice(&indices[starts[blk]..starts[blk] + block_len[blk]]);
        }
    }
    (out_l, out_i)
}

fn permute(slice: &WorkerSlice, from: BatchOrder, to: BatchOrder) -> Result<WorkerSlice, CommsError> {
    if slice.layout.order != from {
        return Err(CommsError::LayoutMismatch(format!("expected {from:?} order, slice is {:?}", slice.layout.order)));
    }
    let GlobalBatchLayout { workers, tables, local_batch, .. } = slice.layout;
    if slice.lengths.len() != workers * tables * local_batch {
        return Err(CommsError::LayoutMismatch(format!(
            "{} lengths for {workers} x {tables} x {local_batch}",
            slice.lengths.len()
        )));
    }
    let (outer, inner) = if from == BatchOrder::Wtb { (workers, tables) } else { (tables, workers) };
    let (lengths, indices) = transpose_blocks(&slice.lengths, &slice.indices, outer, inner, local_batch);
    Ok(WorkerSlice { layout: GlobalBatchLayout { order: to, ..slice.layout }, lengths, indices, ..slice.clone() })
}

/// `(W, T, B)` to `(T, W, B)`: the received blocks become table-major.
pub fn permute_wtb_to_twb(slice: &WorkerSlice) -> Result<WorkerSlice, CommsError> {
    permute(slice, BatchOrder::Wtb, BatchOrder::Twb)
}

pub fn permute_twb_to_wtb(slice: &WorkerSlice) -> Result<WorkerSlice, CommsError> {
    permute(slice, BatchOrder::Twb, BatchOrder::Wtb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::cluster;
    use crate::model::{gen_synthetic_batch, ModelSpec, TableSpec};
    use crate::planner::{plan_with_schemes, CompressionFlags, CostWeights};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn equal_halves(h: u64) -> Vec<Range<u64>> {
        vec![0..h / 2, h / 2..h]
    }

    #[test]
    fn bucketize_example() {
        let out = bucketize_rowwise(&[4], &[1, 7, 3, 9], &equal_halves(10)).unwrap();
        assert_eq!(out[0], Bucket { lengths: vec![2], indices: vec![1, 3] });
        assert_eq!(out[1], Bucket { lengths: vec![2], indices: vec![2, 4] });
    }

    #[test]
    fn single_shard_is_identity() {
        let out = bucketize_rowwise(&[2, 1], &[3, 0, 2], &[0..4]).unwrap();
        assert_eq!(out, vec![Bucket { lengths: vec![2, 1], indices: vec![3, 0, 2] }]);
    }

    #[test]
    fn bucketize_rejects_out_of_range() {
        assert_eq!(
            bucketize_rowwise(&[1], &[10], &equal_halves(10)),
            Err(CommsError::IndexOutOfRange { index: 10, rows: 10 })
        );
        assert!(bucketize_rowwise(&[1], &[0], &[0..3, 4..10]).is_err());
    }

    #[test]
    fn columnwise_doubles_payload() {
        let copies = replicate_columnwise(&[2, 1], &[5, 6, 7], 2);
        assert_eq!(copies.len(), 2);
        assert_eq!(copies[0], copies[1]);
        let payload: usize = copies.iter().map(|c| c.indices.len()).sum();
        assert_eq!(payload, 6);
        assert_eq!(replicate_columnwise(&[1], &[5], 1), vec![Bucket { lengths: vec![1], indices: vec![5] }]);
    }

    fn slice(w: usize, t: usize, b: usize, lengths: Vec<usize>, indices: Vec<u64>) -> WorkerSlice {
        WorkerSlice {
            worker: 0,
            shards: Vec::new(),
            layout: GlobalBatchLayout { workers: w, tables: t, local_batch: b, order: BatchOrder::Wtb },
            lengths,
            indices,
        }
    }

    #[test]
    fn permute_blocks_example() {
        // Blocks a, b, c, d of one index each: (w0,t0), (w0,t1), (w1,t0), (w1,t1).
        let s = slice(2, 2, 1, vec![1, 1, 1, 1], vec![10, 11, 12, 13]);
        let p = permute_wtb_to_twb(&s).unwrap();
        assert_eq!(p.indices, vec![10, 12, 11, 13]);
        assert_eq!(p.layout.order, BatchOrder::Twb);
        assert!(permute_wtb_to_twb(&p).is_err());
        assert_eq!(permute_twb_to_wtb(&p).unwrap(), s);
    }

    #[test]
    fn permute_trivial_shapes() {
        let s = slice(1, 3, 2, vec![1, 0, 2, 1, 0, 1], vec![1, 2, 3, 4, 5]);
        let p = permute_wtb_to_twb(&s).unwrap();
        assert_eq!((p.lengths.clone(), p.indices.clone()), (s.lengths.clone(), s.indices.clone()));
        let s = slice(3, 1, 1, vec![2, 0, 1], vec![7, 8, 9]);
        assert_eq!(permute_wtb_to_twb(&s).unwrap().indices, s.indices);
    }

    fn planned(schemes: &[Scheme], nodes: usize, gpus: usize) -> (ModelSpec, ShardingPlan) {
        let tables =
            schemes.iter().enumerate().map(|(i, _)| TableSpec::new(format!("t{i}"), 37 + i as u64, 8, 2.5)).collect();
        let m = ModelSpec::with_tables("m", 3, tables);
        let c = cluster(nodes, gpus);
        let p = plan_with_schemes(&m, &c, &CostWeights::default(), &CompressionFlags::default(), schemes).unwrap();
        (m, p)
    }

    #[test]
    fn tablewise_exchange() {
        let (m, p) = planned(&[Scheme::TableWise, Scheme::TableWise], 1, 2);
        let owner = p.tables[0].shards[0].worker;
        let g = GlobalBatch::split(&gen_synthetic_batch(&m, 6, 1), 2).unwrap();
        let r = alltoall_redistribute(&g, &p).unwrap();
        let s = permute_wtb_to_twb(&r.slices[owner]).unwrap();
        assert_eq!(s.shards.len(), 1);
        let want = g.to_combined().select_tables(&[0]);
        assert_eq!(s.to_batch().unwrap(), want);
    }

    fn multiset(
        batch: &CombinedBatch,
        table_of: impl Fn(usize) -> (usize, u64),
    ) -> BTreeMap<(usize, usize, u64), usize> {
        let mut out = BTreeMap::new();
        for t in 0..batch.num_tables() {
            let (table, base) = table_of(t);
            for s in 0..batch.num_samples() {
                for &i in batch.sample_indices(t, s) {
                    *out.entry((table, s, i + base)).or_default() += 1;
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn bucketize_roundtrip(lengths in prop::collection::vec(0usize..5, 1..8), n in 1usize..5, seed in 0u64..1000) {
            let h = 23u64;
            let total: usize = lengths.iter().sum();
            let indices: Vec<u64> = (0..total as u64).map(|k| (k * 7 + seed) % h).collect();
            let bounds = crate::planner::row_bounds(h, n);
            let back = unbucketize_rowwise(&bucketize_rowwise(&lengths, &indices, &bounds).unwrap(), &bounds).unwrap();
            prop_assert_eq!(&back.lengths, &lengths);
            let mut cursor = 0;
            for &l in &lengths {
                let mut a = indices[cursor..cursor + l].to_vec();
                let mut b = back.indices[cursor..cursor + l].to_vec();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
                cursor += l;
            }
        }

        #[test]
        fn permute_inverse(w in 1usize..4, t in 1usize..4, b in 1usize..4, seed in 0u64..1000) {
            let lengths: Vec<usize> = (0..w * t * b).map(|k| ((k as u64 * 31 + seed) % 4) as usize).collect();
            let n: usize = lengths.iter().sum();
            let s = slice(w, t, b, lengths, (0..n as u64).collect());
            prop_assert_eq!(permute_twb_to_wtb(&permute_wtb_to_twb(&s).unwrap()).unwrap(), s);
        }

        #[test]
        fn redistribution_conserves(seed in 0u64..200) {
            let schemes = [Scheme::TableWise, Scheme::RowWise(3), Scheme::ColumnWise(2), Scheme::DataParallel, Scheme::Hierarchical(2)];
            let (m, p) = planned(&schemes, 2, 2);
            let g = GlobalBatch::split(&gen_synthetic_batch(&m, 12, seed), 4).unwrap();
            let r = alltoall_redistribute(&g, &p).unwrap();
            let sent: u64 = (0..4).map(|w| r.log.sent(w)).sum();
            let recv: u64 = (0..4).map(|w| r.log.received(w)).sum();
            prop_assert_eq!(sent, recv);
            prop_assert_eq!(sent, r.log.total());

            // Every (table, sample, row) arrives once per column shard.
            let full = g.to_combined();
            let mut got = BTreeMap::new();
            for s in &r.slices {
                let s = permute_wtb_to_twb(s).unwrap();
                let batch = s.to_batch().unwrap();
                for (k, v) in multiset(&batch, |j| (s.shards[j].table, s.shards[j].rows.start)) {
                    *got.entry(k).or_insert(0) += v;
                }
            }
            let mut want = BTreeMap::new();
            for (t, tp) in p.tables.iter().enumerate() {
                let copies = match tp.scheme {
                    Scheme::DataParallel => 0,
                    Scheme::ColumnWise(k) => k,
                    _ => 1,
                };
                if copies == 0 {
                    continue;
                }
                for smp in 0..full.num_samples() {
                    for &i in full.sample_indices(t, smp) {
                        *want.entry((t, smp, i)).or_insert(0) += copies;
                    }
                }
            }
            prop_assert_eq!(got, want);
        }
    }
}
