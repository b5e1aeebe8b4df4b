use std::ops::Range;

use ndarray::{s, Array2};
use rayon::prelude::*;

use super::redistribute::{alltoall_redistribute, permute_wtb_to_twb, ExchangeLog, LocalShard};
use super::CommsError;
use crate::engine::{
    apply_optimizer, backward_sort_aggregate, forward_pooled, fused_backward_update, fused_forward, split_columns,
    EmbeddingTable, EngineError, Loss, MomentState, OptimizerConfig,
};
use crate::model::{CombinedBatch, GlobalBatch, TableSpec};
use crate::planner::{Scheme, ShardingPlan};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedStepOutput<S> {
    /// Pooled output of every table over all `W * B` samples.
    pub pooled: Vec<Array2<S>>,
    /// Shards written back into whole tables.
    pub tables: Vec<EmbeddingTable<S>>,
    /// Every worker's copy of each data-parallel table, by table index.
    pub replicas: Vec<(usize, Vec<EmbeddingTable<S>>)>,
    pub exchange: ExchangeLog,
}

/// Optimizer state the unsharded reference must start from to match a plan.
///
/// A column-sharded table under row-wise AdaGrad keeps one accumulator per
/// (row, column shard), so its single moment column is split to match.
pub fn reference_state<S: Scalar>(
    tables: &[EmbeddingTable<S>],
    plan: &ShardingPlan,
) -> Result<Vec<EmbeddingTable<S>>, CommsError> {
    check_tables(tables, plan)?;
    let mut out = tables.to_vec();
    for (t, tp) in out.iter_mut().zip(&plan.tables) {
        let Scheme::ColumnWise(_) = tp.scheme else { continue };
        let want: Vec<Range<usize>> = tp.shards.iter().map(|s| s.cols.clone()).collect();
        if let MomentState::RowWise { groups, .. } = &t.moment {
            if *groups == want {
                continue;
            }
            if groups.len() != 1 {
                return Err(CommsError::LayoutMismatch(format!(
                    "table {} has moment groups {groups:?}, plan splits columns as {want:?}",
                    t.spec.id
                )));
            }
            t.split_moment_groups(want);
        }
    }
    Ok(out)
}

fn check_tables<S: Scalar>(tables: &[EmbeddingTable<S>], plan: &ShardingPlan) -> Result<(), CommsError> {
    if tables.len() != plan.tables.len() {
        return Err(CommsError::LayoutMismatch(format!("{} tables, plan covers {}", tables.len(), plan.tables.len())));
    }
    for (t, tp) in tables.iter().zip(&plan.tables) {
        if t.spec.id != tp.table_id {
            return Err(CommsError::LayoutMismatch(format!("table {} where plan expects {}", t.spec.id, tp.table_id)));
        }
    }
    Ok(())
}

fn extract_shard<S: Scalar>(table: &EmbeddingTable<S>, ls: &LocalShard) -> Result<EmbeddingTable<S>, CommsError> {
    let (r0, r1) = (ls.rows.start as usize, ls.rows.end as usize);
    let cols = ls.cols.clone();
    let spec = TableSpec {
        id: format!("{}[{}]", table.spec.id, ls.shard),
        num_rows: (r1 - r0) as u64,
        dim: cols.len(),
        ..table.spec.clone()
    };
    let moment = match &table.moment {
        MomentState::None => MomentState::None,
        MomentState::Elementwise(m) => MomentState::Elementwise(m.slice(s![r0..r1, cols.clone()]).to_owned()),
        MomentState::RowWise { groups, values } => {
            let inside = groups_within(groups, &cols, &table.spec.id)?;
            let shifted = inside.iter().map(|&g| groups[g].start - cols.start..groups[g].end - cols.start).collect();
            let (g0, g1) = (inside[0], inside[inside.len() - 1] + 1);
            MomentState::RowWise { groups: shifted, values: values.slice(s![r0..r1, g0..g1]).to_owned() }
        }
    };
    Ok(EmbeddingTable { spec, values: table.values.slice(s![r0..r1, cols]).to_owned(), moment })
}

/// Positions of the moment groups that exactly tile `cols`.
fn groups_within(groups: &[Range<usize>], cols: &Range<usize>, id: &str) -> Result<Vec<usize>, CommsError> {
    let inside: Vec<usize> =
        (0..groups.len()).filter(|&g| groups[g].start >= cols.start && groups[g].end <= cols.end).collect();
    let covered: usize = inside.iter().map(|&g| groups[g].len()).sum();
    if inside.is_empty() || covered != cols.len() {
        return Err(CommsError::LayoutMismatch(format!("moment groups of {id} straddle shard columns {cols:?}")));
    }
    Ok(inside)
}

fn write_back<S: Scalar>(table: &mut EmbeddingTable<S>, shard: &EmbeddingTable<S>, ls: &LocalShard) {
    let (r0, r1) = (ls.rows.start as usize, ls.rows.end as usize);
    table.values.slice_mut(s![r0..r1, ls.cols.clone()]).assign(&shard.values);
    match (&mut table.moment, &shard.moment) {
        (MomentState::Elementwise(m), MomentState::Elementwise(src)) => {
            m.slice_mut(s![r0..r1, ls.cols.clone()]).assign(src);
        }
        (MomentState::RowWise { groups, values }, MomentState::RowWise { values: src, .. }) => {
            let inside = groups_within(groups, &ls.cols, "").expect("checked at extraction");
            let (g0, g1) = (inside[0], inside[inside.len() - 1] + 1);
            values.slice_mut(s![r0..r1, g0..g1]).assign(src);
        }
        _ => {}
    }
}

struct Worker<S> {
    shards: Vec<LocalShard>,
    tables: Vec<EmbeddingTable<S>>,
    batch: CombinedBatch,
}

/// One training step with every table laid out as `plan` says, each worker
/// simulated in-process.
///
/// Inputs are redistributed, each worker runs the fused lookup over its
/// shards, pooled outputs are assembled (column slices placed, row partials
/// summed in shard order), and each shard receives the loss gradient for
/// its columns. Data-parallel replicas pool their local samples; their
/// gradient sync gathers every worker's per-sample contributions and
/// reduces them in global sample order, so all replicas apply the same sum.
pub fn train_step_sharded<S: Scalar>(
    tables: &[EmbeddingTable<S>],
    plan: &ShardingPlan,
    batch: &GlobalBatch,
    cfg: &OptimizerConfig,
    loss: &Loss<S>,
) -> Result<ShardedStepOutput<S>, CommsError> {
    cfg.validate().map_err(EngineError::ShapeMismatch)?;
    let start = reference_state(tables, plan)?;
    let layout = batch.layout();
    let (w, b) = (layout.workers, layout.local_batch);
    let g = w * b;

    let red = alltoall_redistribute(batch, plan)?;
    let mut workers: Vec<Worker<S>> = red
        .slices
        .iter()
        .map(|slice| {
            let slice = permute_wtb_to_twb(slice)?;
            let shards =
                slice.shards.iter().map(|ls| extract_shard(&start[ls.table], ls)).collect::<Result<Vec<_>, _>>()?;
            Ok(Worker { batch: slice.to_batch()?, shards: slice.shards, tables: shards })
        })
        .collect::<Result<_, CommsError>>()?;

    let local_pooled: Vec<Vec<Array2<S>>> = workers
        .par_iter()
        .map(|wk| {
            let fused = fused_forward(&wk.tables, &wk.batch)?;
            let dims: Vec<usize> = wk.tables.iter().map(EmbeddingTable::dim).collect();
            Ok(split_columns(&fused, &dims))
        })
        .collect::<Result<_, EngineError>>()?;

    // (worker, position) of each shard, in plan order.
    let mut where_is: Vec<Vec<(usize, usize)>> = plan.tables.iter().map(|t| vec![(0, 0); t.shards.len()]).collect();
    for (wi, wk) in workers.iter().enumerate() {
        for (pos, ls) in wk.shards.iter().enumerate() {
            where_is[ls.table][ls.shard] = (wi, pos);
        }
    }

    let mut replicas: Vec<(usize, Vec<EmbeddingTable<S>>)> = Vec::new();
    let mut pooled = Vec::with_capacity(tables.len());
    for (t, tp) in plan.tables.iter().enumerate() {
        let mut out = Array2::zeros((g, start[t].dim()));
        match tp.scheme {
            Scheme::DataParallel => {
                let copies = vec![start[t].clone(); w];
                for (wi, local) in batch.locals().iter().enumerate() {
                    let part = forward_pooled(&copies[wi], local.lengths(t), local.table_indices(t))?;
                    out.slice_mut(s![wi * b..(wi + 1) * b, ..]).assign(&part);
                }
                replicas.push((t, copies));
            }
            s if s.is_row_split() => {
                for &(wi, pos) in &where_is[t] {
                    out += &local_pooled[wi][pos];
                }
            }
            _ => {
                for (k, &(wi, pos)) in where_is[t].iter().enumerate() {
                    out.slice_mut(s![.., tp.shards[k].cols.clone()]).assign(&local_pooled[wi][pos]);
                }
            }
        }
        pooled.push(out);
    }

    let upstream: Vec<Array2<S>> =
        start.iter().enumerate().map(|(t, table)| loss.upstream(t, g, table.dim())).collect::<Result<_, _>>()?;

    workers.par_iter_mut().try_for_each(|wk| -> Result<(), EngineError> {
        for (k, ls) in wk.shards.iter().enumerate() {
            let up = upstream[ls.table].slice(s![.., ls.cols.clone()]).to_owned();
            fused_backward_update(&mut wk.tables[k], wk.batch.lengths(k), wk.batch.table_indices(k), &up, cfg)?;
        }
        Ok(())
    })?;

    for (t, copies) in &mut replicas {
        let t = *t;
        let mut lengths = Vec::with_capacity(g);
        let mut indices = Vec::new();
        for local in batch.locals() {
            lengths.extend_from_slice(local.lengths(t));
            indices.extend_from_slice(local.table_indices(t));
        }
        let grads = backward_sort_aggregate(&lengths, &indices, &upstream[t])?;
        copies.par_iter_mut().try_for_each(|c| apply_optimizer(c, &grads, cfg))?;
    }

    let mut out_tables = start;
    for wk in &workers {
        for (k, ls) in wk.shards.iter().enumerate() {
            write_back(&mut out_tables[ls.table], &wk.tables[k], ls);
        }
    }
    for (t, copies) in &replicas {
        out_tables[*t] = copies[0].clone();
    }
    Ok(ShardedStepOutput { pooled, tables: out_tables, replicas, exchange: red.log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{train_step_reference, OptimizerKind};
    use crate::fixtures::cluster;
    use crate::model::{gen_synthetic_batch, ModelSpec, Precision};
    use crate::planner::{plan_with_schemes, CompressionFlags, CostWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Case {
        tables: Vec<EmbeddingTable<f64>>,
        plan: ShardingPlan,
        batch: GlobalBatch,
    }

    fn case(schemes: &[Scheme], nodes: usize, gpus: usize, kind: OptimizerKind, seed: u64) -> Case {
        let specs: Vec<TableSpec> = schemes
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let t = TableSpec::new(format!("t{i}"), 29 + 3 * i as u64, 8, 3.0);
                if i % 3 == 2 {
                    t.with_precision(Precision::Fp16)
                } else {
                    t
                }
            })
            .collect();
        let m = ModelSpec::with_tables("m", 5, specs.clone());
        let plan = plan_with_schemes(
            &m,
            &cluster(nodes, gpus),
            &CostWeights::default(),
            &CompressionFlags::default(),
            schemes,
        )
        .unwrap();
        let tables =
            specs.into_iter().enumerate().map(|(i, s)| EmbeddingTable::random(s, kind, seed * 31 + i as u64)).collect();
        let w = nodes * gpus;
        let batch = GlobalBatch::split(&gen_synthetic_batch(&m, 5 * w, seed), w).unwrap();
        Case { tables, plan, batch }
    }

    fn weighted(tables: &[EmbeddingTable<f64>], samples: usize, seed: u64) -> Loss<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Loss::Weighted(
            tables
                .iter()
                .map(|t| Array2::from_shape_simple_fn((samples, t.dim()), || rng.random::<f64>() - 0.5))
                .collect(),
        )
    }

    fn max_dev(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
        a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
    }

    const ALL: [Scheme; 5] =
        [Scheme::TableWise, Scheme::RowWise(3), Scheme::ColumnWise(2), Scheme::DataParallel, Scheme::Hierarchical(2)];

    #[test]
    fn sgd_is_bitwise() {
        for seed in 0..5 {
            let c = case(&ALL, 2, 2, OptimizerKind::Sgd, seed);
            let loss = weighted(&c.tables, 20, seed);
            let cfg = OptimizerConfig::sgd(0.1);
            let got = train_step_sharded(&c.tables, &c.plan, &c.batch, &cfg, &loss).unwrap();
            let want = train_step_reference(&c.tables, &c.batch.to_combined(), &cfg, &loss).unwrap();
            assert_eq!(got.tables, want.tables);
            assert!(max_dev(&got.pooled, &want.pooled) <= 1e-9);
        }
    }

    #[test]
    fn rowwise_adagrad_matches_split_reference() {
        for seed in 0..5 {
            let c = case(&ALL, 2, 2, OptimizerKind::RowWiseAdaGrad, seed);
            let loss = weighted(&c.tables, 20, seed);
            let cfg = OptimizerConfig::rowwise_adagrad(0.05, 1e-8);
            let got = train_step_sharded(&c.tables, &c.plan, &c.batch, &cfg, &loss).unwrap();
            let start = reference_state(&c.tables, &c.plan).unwrap();
            let want = train_step_reference(&start, &c.batch.to_combined(), &cfg, &loss).unwrap();
            let vals = |ts: &[EmbeddingTable<f64>]| ts.iter().map(|t| t.values.clone()).collect::<Vec<_>>();
            assert!(max_dev(&vals(&got.tables), &vals(&want.tables)) <= 1e-9);
            for (a, b) in got.tables.iter().zip(&want.tables) {
                assert_eq!(a.moment.values().len(), b.moment.values().len());
            }
        }
    }

    #[test]
    fn columnwise_moments_diverge_from_unsplit() {
        let c = case(&[Scheme::ColumnWise(2)], 1, 2, OptimizerKind::RowWiseAdaGrad, 3);
        let cfg = OptimizerConfig::rowwise_adagrad(0.05, 1e-8);
        let loss = weighted(&c.tables, 10, 1);
        let got = train_step_sharded(&c.tables, &c.plan, &c.batch, &cfg, &loss).unwrap();
        let MomentState::RowWise { groups, .. } = &got.tables[0].moment else { panic!() };
        assert_eq!(groups, &vec![0..4, 4..8]);
        let plain = train_step_reference(&c.tables, &c.batch.to_combined(), &cfg, &loss).unwrap();
        assert_ne!(got.tables[0].values, plain.tables[0].values);
    }

    #[test]
    fn data_parallel_replicas_agree() {
        let c = case(&[Scheme::DataParallel, Scheme::TableWise], 1, 4, OptimizerKind::RowWiseAdaGrad, 9);
        let cfg = OptimizerConfig::rowwise_adagrad(0.1, 1e-8);
        let got = train_step_sharded(&c.tables, &c.plan, &c.batch, &cfg, &Loss::Sum).unwrap();
        let (t, copies) = &got.replicas[0];
        assert_eq!(*t, 0);
        assert_eq!(copies.len(), 4);
        assert!(copies.iter().all(|r| r == &copies[0]));
        assert_ne!(copies[0], c.tables[0]);
    }

    #[test]
    fn single_worker_is_exact() {
        let c = case(&[Scheme::TableWise, Scheme::ColumnWise(2), Scheme::RowWise(1)], 1, 1, OptimizerKind::AdaGrad, 2);
        let cfg = OptimizerConfig::adagrad(0.1, 1e-8);
        let loss = weighted(&c.tables, 5, 2);
        let got = train_step_sharded(&c.tables, &c.plan, &c.batch, &cfg, &loss).unwrap();
        let want = train_step_reference(&c.tables, &c.batch.to_combined(), &cfg, &loss).unwrap();
        assert_eq!(got.tables, want.tables);
        assert_eq!(got.pooled, want.pooled);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let c = case(&ALL, 2, 2, OptimizerKind::RowWiseAdaGrad, 11);
        let cfg = OptimizerConfig::rowwise_adagrad(0.05, 1e-8);
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| train_step_sharded(&c.tables, &c.plan, &c.batch, &cfg, &Loss::Sum).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn mismatched_tables_rejected() {
        let c = case(&[Scheme::TableWise], 1, 2, OptimizerKind::Sgd, 0);
        let mut tables = c.tables.clone();
        tables[0].spec.id = "other".into();
        assert!(matches!(
            train_step_sharded(&tables, &c.plan, &c.batch, &OptimizerConfig::sgd(0.1), &Loss::Sum),
            Err(CommsError::LayoutMismatch(_))
        ));
    }
}
