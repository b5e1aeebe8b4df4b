use super::cost::{shard_costs, table_bytes, CompressionFlags, Normalizer, ShardCost};
use super::{
    global_batch, CostWeights, Heuristic, PlanError, Scheme, ShardPlacement, ShardingPlan, TablePlan, WorkerSummary,
};
use crate::model::{ClusterSpec, ModelSpec, TableSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePolicy {
    /// Tables at most this large may be replicated. `None` means 1/1000 of
    /// one GPU's HBM.
    pub dp_threshold_bytes: Option<u64>,
    /// Offer row and column splits even for tables that fit one worker.
    pub finer_grain: bool,
    pub max_col_shards: usize,
    pub flags: CompressionFlags,
    pub heuristic: Heuristic,
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        Self {
            dp_threshold_bytes: None,
            finer_grain: false,
            max_col_shards: 4,
            flags: CompressionFlags::default(),
            heuristic: Heuristic::KarmarkarKarp,
        }
    }
}

impl CandidatePolicy {
    pub fn dp_threshold(&self, cluster: &ClusterSpec) -> u64 {
        self.dp_threshold_bytes.unwrap_or(cluster.hbm_capacity_per_gpu / 1000)
    }
}

/// Schemes worth considering for `table`, in a fixed order: TW, RW by shard
/// count, CW by shard count, DP.
pub fn enumerate_candidates(
    table: &TableSpec,
    cluster: &ClusterSpec,
    policy: &CandidatePolicy,
) -> Result<Vec<Scheme>, PlanError> {
    candidates_within(table, cluster, policy, cluster.worker_capacity())
}

fn candidates_within(
    table: &TableSpec,
    cluster: &ClusterSpec,
    policy: &CandidatePolicy,
    cap: u64,
) -> Result<Vec<Scheme>, PlanError> {
    let flags = &policy.flags;
    let w = cluster.num_workers();
    let bytes = table_bytes(table, flags);
    if bytes > cap.saturating_mul(w as u64) {
        return Err(PlanError::NoFeasibleScheme(table.id.clone()));
    }
    let fits = bytes <= cap;
    let mut out = Vec::new();
    if fits {
        out.push(Scheme::TableWise);
    }
    if !fits || policy.finer_grain {
        let max_n = (w as u64).min(table.num_rows) as usize;
        let start = if fits { 2 } else { bytes.div_ceil(cap.max(1)) as usize };
        let shard_fits = |n: usize| {
            let rows = table.num_rows.div_ceil(n as u64);
            flags.block_bytes(table, rows, table.dim) <= cap
        };
        if let Some(n_min) = (start.max(2)..=max_n).find(|&n| shard_fits(n)) {
            out.push(Scheme::RowWise(n_min));
            let mut p = n_min.next_power_of_two();
            if p == n_min {
                p *= 2;
            }
            while p <= max_n {
                out.push(Scheme::RowWise(p));
                p *= 2;
            }
        }
        for k in 2..=policy.max_col_shards.min(w) {
            if table.dim.is_multiple_of(k)
                && table.dim / k >= 4
                && flags.block_bytes(table, table.num_rows, table.dim / k) <= cap
            {
                out.push(Scheme::ColumnWise(k));
            }
        }
    }
    if fits && bytes <= policy.dp_threshold(cluster) {
        out.push(Scheme::DataParallel);
    }
    if out.is_empty() {
        return Err(PlanError::NoFeasibleScheme(table.id.clone()));
    }
    Ok(out)
}

struct Cand {
    scheme: Scheme,
    shards: Vec<ShardCost>,
    /// Normalized cost per shard (per replica for DP).
    scalar: Vec<f64>,
}

impl Cand {
    fn is_dp(&self) -> bool {
        self.scheme == Scheme::DataParallel
    }
}

/// Mutable placement state shared by the construction, repair and search
/// phases.
struct State {
    w: usize,
    cap: u64,
    cands: Vec<Vec<Cand>>,
    choice: Vec<usize>,
    /// Worker of each shard of each table's chosen candidate.
    place: Vec<Vec<usize>>,
    obj: Vec<f64>,
    mem: Vec<u64>,
}

impl State {
    fn cand(&self, t: usize) -> &Cand {
        &self.cands[t][self.choice[t]]
    }

    fn recompute(&mut self) {
        self.obj = vec![0.0; self.w];
        self.mem = vec![0; self.w];
        for t in 0..self.cands.len() {
            let c = &self.cands[t][self.choice[t]];
            if c.is_dp() {
                for wk in 0..self.w {
                    self.obj[wk] += c.scalar[0];
                    self.mem[wk] += c.shards[0].memory_bytes;
                }
            } else {
                for (s, &wk) in self.place[t].iter().enumerate() {
                    self.obj[wk] += c.scalar[s];
                    self.mem[wk] += c.shards[s].memory_bytes;
                }
            }
        }
    }

    fn score(&self) -> (f64, f64) {
        let max = self.obj.iter().copied().fold(0.0, f64::max);
        let sq = self.obj.iter().map(|o| o * o).sum();
        (max, sq)
    }

    /// Places every shard of table `t` (already chosen, currently unplaced)
    /// on the least-loaded worker with room, preferring workers that hold no
    /// other shard of the table. Returns false if some shard does not fit.
    fn place_greedy(&mut self, t: usize) -> bool {
        let c = &self.cands[t][self.choice[t]];
        if c.is_dp() {
            let need = c.shards[0].memory_bytes;
            if self.mem.iter().any(|&m| m + need > self.cap) {
                return false;
            }
            for wk in 0..self.w {
                self.obj[wk] += c.scalar[0];
                self.mem[wk] += need;
            }
            self.place[t].clear();
            return true;
        }
        let mut placed: Vec<usize> = Vec::with_capacity(c.shards.len());
        for (s, sc) in c.shards.iter().enumerate() {
            let mut best: Option<usize> = None;
            for wk in 0..self.w {
                if self.mem[wk] + sc.memory_bytes > self.cap {
                    continue;
                }
                let key = |x: usize| (placed.contains(&x), self.obj[x]);
                best = match best {
                    None => Some(wk),
                    Some(b) => {
                        let (kb, kw) = (key(b), key(wk));
                        if !kw.0 & kb.0 || (kw.0 == kb.0 && kw.1 < kb.1) {
                            Some(wk)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            let Some(wk) = best else {
                for (s2, &p) in placed.iter().enumerate() {
                    self.obj[p] -= c.scalar[s2];
                    self.mem[p] -= c.shards[s2].memory_bytes;
                }
                return false;
            };
            self.obj[wk] += c.scalar[s];
            self.mem[wk] += sc.memory_bytes;
            placed.push(wk);
        }
        self.place[t] = placed;
        true
    }

    fn unplace(&mut self, t: usize) {
        let c = &self.cands[t][self.choice[t]];
        if c.is_dp() {
            for wk in 0..self.w {
                self.obj[wk] -= c.scalar[0];
                self.mem[wk] -= c.shards[0].memory_bytes;
            }
        } else {
            for (s, &wk) in self.place[t].iter().enumerate() {
                self.obj[wk] -= c.scalar[s];
                self.mem[wk] -= c.shards[s].memory_bytes;
            }
        }
        self.place[t].clear();
    }

    /// Tries to switch table `t` to candidate `k`; restores the old state and
    /// returns false if the new shards cannot be placed.
    fn try_rescheme(&mut self, t: usize, k: usize) -> bool {
        let old = (self.choice[t], self.place[t].clone());
        self.unplace(t);
        self.choice[t] = k;
        if self.place_greedy(t) {
            return true;
        }
        self.choice[t] = old.0;
        self.place[t] = old.1;
        self.recompute();
        false
    }

    fn shards_on(&self, wk: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 0..self.place.len() {
            for (s, &p) in self.place[t].iter().enumerate() {
                if p == wk {
                    out.push((t, s));
                }
            }
        }
        out
    }

    fn move_shard(&mut self, t: usize, s: usize, to: usize) {
        let c = &self.cands[t][self.choice[t]];
        let from = self.place[t][s];
        self.obj[from] -= c.scalar[s];
        self.mem[from] -= c.shards[s].memory_bytes;
        self.obj[to] += c.scalar[s];
        self.mem[to] += c.shards[s].memory_bytes;
        self.place[t][s] = to;
    }

    /// Moves shards off over-full workers, then re-schemes tables into more
    /// shards, until every worker fits.
    fn repair_memory(&mut self) -> Result<(), PlanError> {
        let limit = 4 * (self.place.iter().map(Vec::len).sum::<usize>() + self.cands.len() + self.w);
        for _ in 0..limit {
            let Some(over) = (0..self.w).find(|&wk| self.mem[wk] > self.cap) else {
                return Ok(());
            };
            let mut shards = self.shards_on(over);
            shards.sort_by(|a, b| {
                let ma = self.cand(a.0).shards[a.1].memory_bytes;
                let mb = self.cand(b.0).shards[b.1].memory_bytes;
                mb.cmp(&ma).then(a.cmp(b))
            });
            let mut moved = false;
            for &(t, s) in &shards {
                let need = self.cand(t).shards[s].memory_bytes;
                let target = (0..self.w)
                    .filter(|&wk| wk != over && self.mem[wk] + need <= self.cap)
                    .min_by(|&a, &b| self.obj[a].total_cmp(&self.obj[b]).then(a.cmp(&b)));
                if let Some(to) = target {
                    self.move_shard(t, s, to);
                    moved = true;
                    break;
                }
            }
            if moved {
                continue;
            }
            // Split the largest table on this worker (or a replicated one)
            // into more shards.
            let mut tables: Vec<usize> = shards.iter().map(|&(t, _)| t).collect();
            tables.extend((0..self.cands.len()).filter(|&t| self.cand(t).is_dp()));
            tables.sort_by_key(|&t| std::cmp::Reverse(self.cand(t).shards[0].memory_bytes));
            tables.dedup();
            let mut fixed = false;
            'tables: for t in tables {
                let cur = self.cand(t).shards.len();
                let cur_dp = self.cand(t).is_dp();
                for k in 0..self.cands[t].len() {
                    let c = &self.cands[t][k];
                    let finer = !c.is_dp() && (cur_dp || c.shards.len() > cur);
                    if finer && self.try_rescheme(t, k) {
                        fixed = true;
                        break 'tables;
                    }
                }
            }
            if !fixed {
                return Err(PlanError::Infeasible(format!(
                    "worker {over} needs {} bytes but holds {}",
                    self.mem[over], self.cap
                )));
            }
        }
        Err(PlanError::Infeasible("memory repair did not converge".into()))
    }

    /// Hill climbing on the bottleneck worker: shard moves, swaps, and scheme
    /// changes. A step is taken when it lowers the largest worker objective,
    /// or keeps it and lowers the sum of squares.
    fn local_search(&mut self, max_steps: usize) {
        let better = |a: (f64, f64), b: (f64, f64)| {
            let tol = 1e-12 * b.0.abs().max(1.0);
            a.0 < b.0 - tol || (a.0 <= b.0 + tol && a.1 < b.1 - 1e-12 * b.1.abs().max(1.0))
        };
        for _ in 0..max_steps {
            let cur = self.score();
            let b = (0..self.w).max_by(|&x, &y| self.obj[x].total_cmp(&self.obj[y]).then(y.cmp(&x))).unwrap();
            let on_b = self.shards_on(b);
            let mut best: Option<((f64, f64), Move)> = None;
            let consider = |score: (f64, f64), mv: Move, best: &mut Option<((f64, f64), Move)>| {
                if better(score, cur) && best.as_ref().is_none_or(|(s, _)| better(score, *s)) {
                    *best = Some((score, mv));
                }
            };

            for &(t, s) in &on_b {
                let c = self.cand(t).scalar[s];
                let need = self.cand(t).shards[s].memory_bytes;
                for to in 0..self.w {
                    if to == b || self.mem[to] + need > self.cap {
                        continue;
                    }
                    let score = self.score_with(&[(b, -c), (to, c)]);
                    consider(score, Move::Shift { t, s, to }, &mut best);
                }
                for t2 in 0..self.place.len() {
                    for (s2, &to) in self.place[t2].iter().enumerate() {
                        if to == b {
                            continue;
                        }
                        let c2 = self.cand(t2).scalar[s2];
                        if c2 >= c {
                            continue;
                        }
                        let n2 = self.cand(t2).shards[s2].memory_bytes;
                        if self.mem[to] + need - n2 > self.cap || self.mem[b] + n2 - need > self.cap {
                            continue;
                        }
                        let score = self.score_with(&[(b, c2 - c), (to, c - c2)]);
                        consider(score, Move::Swap { t, s, t2, s2 }, &mut best);
                    }
                }
            }

            let mut tables: Vec<usize> = on_b.iter().map(|&(t, _)| t).collect();
            tables.extend((0..self.cands.len()).filter(|&t| self.cand(t).is_dp()));
            tables.sort_unstable();
            tables.dedup();
            for t in tables {
                for k in 0..self.cands[t].len() {
                    if k == self.choice[t] {
                        continue;
                    }
                    let saved = (self.choice[t], self.place[t].clone(), self.obj.clone(), self.mem.clone());
                    if self.try_rescheme(t, k) {
                        let score = self.score();
                        consider(score, Move::Rescheme { t, k, place: self.place[t].clone() }, &mut best);
                    }
                    self.choice[t] = saved.0;
                    self.place[t] = saved.1;
                    self.obj = saved.2;
                    self.mem = saved.3;
                }
            }

            let Some((_, mv)) = best else { return };
            match mv {
                Move::Shift { t, s, to } => self.move_shard(t, s, to),
                Move::Swap { t, s, t2, s2 } => {
                    let a = self.place[t][s];
                    let b2 = self.place[t2][s2];
                    self.move_shard(t, s, b2);
                    self.move_shard(t2, s2, a);
                }
                Move::Rescheme { t, k, place } => {
                    self.choice[t] = k;
                    self.place[t] = place;
                }
            }
            self.recompute();
        }
    }

    fn score_with(&self, deltas: &[(usize, f64)]) -> (f64, f64) {
        let mut max = 0.0f64;
        let mut sq = 0.0;
        for (wk, &o) in self.obj.iter().enumerate() {
            let v = o + deltas.iter().filter(|d| d.0 == wk).map(|d| d.1).sum::<f64>();
            max = max.max(v);
            sq += v * v;
        }
        (max, sq)
    }
}

enum Move {
    Shift { t: usize, s: usize, to: usize },
    Swap { t: usize, s: usize, t2: usize, s2: usize },
    Rescheme { t: usize, k: usize, place: Vec<usize> },
}

fn dense_capacity(model: &ModelSpec, cluster: &ClusterSpec) -> Result<u64, PlanError> {
    cluster.worker_capacity().checked_sub(model.dense_param_bytes).ok_or_else(|| {
        PlanError::Infeasible(format!(
            "dense parameters ({} bytes) exceed one worker's memory ({} bytes)",
            model.dense_param_bytes,
            cluster.worker_capacity()
        ))
    })
}

/// Every candidate scheme of one table with its per-shard costs.
type RawCands = Vec<(Scheme, Vec<ShardCost>)>;

fn build_candidates(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    policy: &CandidatePolicy,
    cap: u64,
) -> Result<Vec<RawCands>, PlanError> {
    let gb = global_batch(model, cluster);
    model
        .tables
        .iter()
        .map(|t| {
            candidates_within(t, cluster, policy, cap)?
                .into_iter()
                .map(|s| Ok((s, shard_costs(t, s, cluster, gb, &policy.flags)?)))
                .collect()
        })
        .collect()
}

/// Whole-table cost of a candidate; data-parallel replicas count once per
/// worker.
fn aggregate(scheme: Scheme, shards: &[ShardCost], workers: usize) -> ShardCost {
    let mut total = ShardCost::default();
    for s in shards {
        total.add(s);
    }
    if scheme == Scheme::DataParallel {
        let n = workers as f64;
        total.comm_bytes *= n;
        total.pooled_bytes *= n;
        total.inter_node_bytes *= n;
        total.load *= n;
        total.fixed_latency *= n;
    }
    total
}

fn normalizer_for(raw: &[Vec<(Scheme, Vec<ShardCost>)>], workers: usize) -> Normalizer {
    let aggs: Vec<ShardCost> = raw.iter().flatten().map(|(s, c)| aggregate(*s, c, workers)).collect();
    Normalizer::from_costs(&aggs)
}

fn into_cands(raw: Vec<RawCands>, norm: &Normalizer, weights: &CostWeights) -> Vec<Vec<Cand>> {
    raw.into_iter()
        .map(|cs| {
            cs.into_iter()
                .map(|(scheme, shards)| {
                    let scalar = shards.iter().map(|c| norm.scalar(c, weights)).collect();
                    Cand { scheme, shards, scalar }
                })
                .collect()
        })
        .collect()
}

/// Per-table scheme selection followed by shard placement.
///
/// 1. Every candidate's costs are normalized by the mean of each term over
///    all candidates and combined with `weights`.
/// 2. Each table takes its cheapest candidate.
/// 3. Non-replicated shards are partitioned over workers with the policy's
///    heuristic; replicated tables add the same cost to every worker.
/// 4. Workers over memory shed shards, then tables are re-split.
/// 5. Local search lowers the bottleneck worker's objective.
pub fn plan_4d(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    weights: &CostWeights,
    policy: &CandidatePolicy,
) -> Result<ShardingPlan, PlanError> {
    weights.validate().map_err(PlanError::Infeasible)?;
    let w = cluster.num_workers();
    let cap = dense_capacity(model, cluster)?;
    let raw = build_candidates(model, cluster, policy, cap)?;
    let norm = normalizer_for(&raw, w);
    let cands = into_cands(raw, &norm, weights);

    let choice: Vec<usize> = cands
        .iter()
        .map(|cs| {
            let agg = |c: &Cand| -> f64 {
                let s: f64 = c.scalar.iter().sum();
                if c.is_dp() {
                    s * w as f64
                } else {
                    s
                }
            };
            let mut best = 0;
            for k in 1..cs.len() {
                if agg(&cs[k]) < agg(&cs[best]) {
                    best = k;
                }
            }
            best
        })
        .collect();

    let mut items = Vec::new();
    let mut owner = Vec::new();
    for (t, cs) in cands.iter().enumerate() {
        let c = &cs[choice[t]];
        if c.is_dp() {
            continue;
        }
        for (s, &x) in c.scalar.iter().enumerate() {
            items.push((items.len(), x));
            owner.push((t, s));
        }
    }
    let bins = policy.heuristic.partition(&items, w);
    let mut place: Vec<Vec<usize>> = cands
        .iter()
        .enumerate()
        .map(|(t, cs)| vec![0; if cs[choice[t]].is_dp() { 0 } else { cs[choice[t]].shards.len() }])
        .collect();
    for (i, &(t, s)) in owner.iter().enumerate() {
        place[t][s] = bins[i];
    }

    let mut st = State { w, cap, cands, choice, place, obj: Vec::new(), mem: Vec::new() };
    st.recompute();
    st.repair_memory()?;
    let steps = 4 * (items.len() + st.cands.len() + w);
    st.local_search(steps);
    if let Some(wk) = (0..w).find(|&wk| st.mem[wk] > cap) {
        return Err(PlanError::Infeasible(format!("worker {wk} over capacity after search")));
    }
    Ok(finish(model, cluster, weights, policy, &norm, &st))
}

fn finish(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    weights: &CostWeights,
    policy: &CandidatePolicy,
    norm: &Normalizer,
    st: &State,
) -> ShardingPlan {
    let tables = model
        .tables
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            let scheme = st.cand(t).scheme;
            let ranges = scheme.shard_ranges(spec).expect("candidate schemes are valid");
            TablePlan {
                table_id: spec.id.clone(),
                scheme,
                shards: ranges
                    .into_iter()
                    .zip(&st.place[t])
                    .map(|((rows, cols), &worker)| ShardPlacement { rows, cols, worker })
                    .collect(),
            }
        })
        .collect();
    let mut plan = ShardingPlan {
        num_workers: cluster.num_workers(),
        gpus_per_node: cluster.gpus_per_node,
        local_batch: model.local_batch,
        heuristic: policy.heuristic,
        weights: *weights,
        tables,
        workers: Vec::new(),
    };
    plan.workers = evaluate_plan(&plan, model, cluster, &policy.flags, norm).expect("planner output covers the model");
    plan
}

/// Per-worker totals of a plan. Objectives use `norm` and the plan's
/// weights; dense replica bytes are included in memory.
pub fn evaluate_plan(
    plan: &ShardingPlan,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    flags: &CompressionFlags,
    norm: &Normalizer,
) -> Result<Vec<WorkerSummary>, PlanError> {
    plan.validate(model)?;
    let w = plan.num_workers;
    let gb = plan.global_batch();
    let mut out = vec![WorkerSummary { memory_bytes: model.dense_param_bytes, ..Default::default() }; w];
    let mut add = |wk: usize, c: &ShardCost| {
        let o = &mut out[wk];
        o.load += c.load;
        o.comm_bytes += c.comm_bytes;
        o.inter_node_bytes += c.inter_node_bytes;
        o.fixed_latency += c.fixed_latency;
        o.memory_bytes += c.memory_bytes;
        o.objective += norm.scalar(c, &plan.weights);
    };
    for (tp, spec) in plan.tables.iter().zip(&model.tables) {
        let costs = shard_costs(spec, tp.scheme, cluster, gb, flags)?;
        if tp.scheme == Scheme::DataParallel {
            for wk in 0..w {
                add(wk, &costs[0]);
            }
        } else {
            for (sh, c) in tp.shards.iter().zip(&costs) {
                add(sh.worker, c);
            }
        }
    }
    Ok(out)
}

/// Builds a plan from a fixed scheme per table, placing shards greedily on
/// the least-loaded workers. Hierarchical tables go to the least-loaded node.
pub fn plan_with_schemes(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    weights: &CostWeights,
    flags: &CompressionFlags,
    schemes: &[Scheme],
) -> Result<ShardingPlan, PlanError> {
    if schemes.len() != model.tables.len() {
        return Err(PlanError::InvalidPlan(format!("{} schemes for {} tables", schemes.len(), model.tables.len())));
    }
    let w = cluster.num_workers();
    let g = cluster.gpus_per_node;
    let gb = global_batch(model, cluster);
    let raw: Vec<RawCands> = model
        .tables
        .iter()
        .zip(schemes)
        .map(|(t, &s)| Ok(vec![(s, shard_costs(t, s, cluster, gb, flags)?)]))
        .collect::<Result<_, PlanError>>()?;
    let norm = normalizer_for(&raw, w);
    let cands = into_cands(raw, &norm, weights);
    let n = cands.len();
    let mut st = State {
        w,
        cap: u64::MAX,
        cands,
        choice: vec![0; n],
        place: vec![Vec::new(); n],
        obj: vec![0.0; w],
        mem: vec![0; w],
    };
    for t in 0..n {
        if let Scheme::Hierarchical(_) = st.cand(t).scheme {
            let node = (0..w / g)
                .min_by(|&a, &b| {
                    let load = |nd: usize| st.obj[nd * g..(nd + 1) * g].iter().sum::<f64>();
                    load(a).total_cmp(&load(b)).then(a.cmp(&b))
                })
                .unwrap();
            st.place[t] = (0..g).map(|j| node * g + j).collect();
            st.recompute();
        } else {
            st.place_greedy(t);
        }
    }
    let policy = CandidatePolicy { flags: *flags, ..Default::default() };
    Ok(finish(model, cluster, weights, &policy, &norm, &st))
}

/// Two-level plan: tables are spread over nodes by largest differencing on
/// their normalized cost, then each table is split row-wise over its node's
/// GPUs with shard `j` on the node's GPU `j`. Tables with fewer rows than a
/// node has GPUs stay whole on the node's least-loaded GPU.
pub fn hierarchical_plan(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    weights: &CostWeights,
    policy: &CandidatePolicy,
) -> Result<ShardingPlan, PlanError> {
    if cluster.num_nodes <= 1 {
        return plan_4d(model, cluster, weights, policy);
    }
    weights.validate().map_err(PlanError::Infeasible)?;
    let w = cluster.num_workers();
    let g = cluster.gpus_per_node;
    let cap = dense_capacity(model, cluster)?;
    let gb = global_batch(model, cluster);
    let schemes: Vec<Scheme> = model
        .tables
        .iter()
        .map(|t| if t.num_rows >= g as u64 { Scheme::Hierarchical(g) } else { Scheme::TableWise })
        .collect();
    let raw: Vec<RawCands> = model
        .tables
        .iter()
        .zip(&schemes)
        .map(|(t, &s)| Ok(vec![(s, shard_costs(t, s, cluster, gb, &policy.flags)?)]))
        .collect::<Result<_, PlanError>>()?;
    let norm = normalizer_for(&raw, w);
    let cands = into_cands(raw, &norm, weights);
    let items: Vec<(usize, f64)> = cands.iter().enumerate().map(|(t, c)| (t, c[0].scalar.iter().sum())).collect();
    let nodes = karmarkar_karp_nodes(&items, cluster.num_nodes);

    let n = cands.len();
    let mut st =
        State { w, cap, cands, choice: vec![0; n], place: vec![Vec::new(); n], obj: vec![0.0; w], mem: vec![0; w] };
    for (t, &node) in nodes.iter().enumerate().take(n) {
        let base = node * g;
        st.place[t] = match st.cand(t).scheme {
            Scheme::Hierarchical(_) => (base..base + g).collect(),
            _ => vec![(base..base + g).min_by(|&a, &b| st.obj[a].total_cmp(&st.obj[b]).then(a.cmp(&b))).unwrap()],
        };
        st.recompute();
    }
    if let Some(wk) = (0..w).find(|&wk| st.mem[wk] > cap) {
        return Err(PlanError::Infeasible(format!(
            "worker {wk} needs {} bytes but holds {cap} under the two-level split",
            st.mem[wk]
        )));
    }
    Ok(finish(model, cluster, weights, policy, &norm, &st))
}

fn karmarkar_karp_nodes(items: &[(usize, f64)], nodes: usize) -> Vec<usize> {
    super::karmarkar_karp_partition(items, nodes)
}
