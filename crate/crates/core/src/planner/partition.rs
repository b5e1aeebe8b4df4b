//! Multiway number partitioning heuristics.
//!
//! Both functions return one bin index per input item, aligned with the input
//! order.

use std::cmp::Ordering;

use crate::PartitionCost;

fn desc<C: PartitionCost>(a: C, b: C) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Longest-processing-time greedy: items in descending cost (ties by id)
/// each go to the bin with the smallest running sum, ties to the lowest bin.
pub fn greedy_partition<C: PartitionCost>(items: &[(usize, C)], k: usize) -> Vec<usize> {
    assert!(k >= 1, "need at least one bin");
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| desc(items[a].1, items[b].1).then(items[a].0.cmp(&items[b].0)));
    let mut sums = vec![C::zero(); k];
    let mut out = vec![0; items.len()];
    for i in order {
        let mut best = 0;
        for b in 1..k {
            if sums[b] < sums[best] {
                best = b;
            }
        }
        sums[best] = sums[best] + items[i].1;
        out[i] = best;
    }
    out
}

/// One partial solution: `k` subsets, sums kept in descending order and
/// normalized so the smallest is zero.
struct Tuple<C> {
    sums: Vec<C>,
    members: Vec<Vec<usize>>,
    /// Smallest item id in the tuple, used to break priority ties.
    label: usize,
}

impl<C: PartitionCost> Tuple<C> {
    fn spread(&self) -> C {
        self.sums[0] - *self.sums.last().unwrap()
    }

    fn normalize(&mut self) {
        let mut idx: Vec<usize> = (0..self.sums.len()).collect();
        idx.sort_by(|&a, &b| desc(self.sums[a], self.sums[b]).then(a.cmp(&b)));
        let min = self.sums[*idx.last().unwrap()];
        self.sums = idx.iter().map(|&i| self.sums[i] - min).collect();
        let mut members = std::mem::take(&mut self.members);
        self.members = idx.iter().map(|&i| std::mem::take(&mut members[i])).collect();
    }
}

/// Largest differencing method generalized to k subsets.
///
/// Every item starts as a k-tuple holding it alone. The two tuples with the
/// largest spread are repeatedly merged by pairing the largest subset of one
/// with the smallest of the other, until one tuple remains. For k = 2 this is
/// the classic scheme of replacing the two largest numbers by their
/// difference. Bins in the result are ordered by final sum, largest first.
pub fn karmarkar_karp_partition<C: PartitionCost>(items: &[(usize, C)], k: usize) -> Vec<usize> {
    assert!(k >= 1, "need at least one bin");
    if items.is_empty() {
        return Vec::new();
    }
    let mut pool: Vec<Tuple<C>> = items
        .iter()
        .enumerate()
        .map(|(pos, &(id, c))| {
            let mut sums = vec![C::zero(); k];
            sums[0] = c;
            let mut members = vec![Vec::new(); k];
            members[0].push(pos);
            Tuple { sums, members, label: id }
        })
        .collect();

    // Larger spread first; equal spreads go to the smaller label.
    let ahead = |a: &Tuple<C>, b: &Tuple<C>| match a.spread().partial_cmp(&b.spread()) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a.label < b.label,
    };
    let take_top = |pool: &mut Vec<Tuple<C>>| {
        let mut best = 0;
        for i in 1..pool.len() {
            if ahead(&pool[i], &pool[best]) {
                best = i;
            }
        }
        pool.swap_remove(best)
    };

    while pool.len() > 1 {
        let a = take_top(&mut pool);
        let b = take_top(&mut pool);
        let mut sums = Vec::with_capacity(k);
        let mut members = Vec::with_capacity(k);
        let Tuple { sums: bs, members: mut bm, .. } = b;
        for (i, (sa, mut ma)) in a.sums.into_iter().zip(a.members).enumerate() {
            let j = k - 1 - i;
            sums.push(sa + bs[j]);
            ma.append(&mut bm[j]);
            members.push(ma);
        }
        let mut t = Tuple { sums, members, label: a.label.min(b.label) };
        t.normalize();
        pool.push(t);
    }

    let mut out = vec![0; items.len()];
    for (bin, m) in pool.pop().unwrap().members.iter().enumerate() {
        for &pos in m {
            out[pos] = bin;
        }
    }
    out
}

/// Per-bin sums of an assignment.
pub fn bin_sums<C: PartitionCost>(items: &[(usize, C)], assignment: &[usize], k: usize) -> Vec<C> {
    let mut sums = vec![C::zero(); k];
    for (&(_, c), &b) in items.iter().zip(assignment) {
        sums[b] = sums[b] + c;
    }
    sums
}

/// Largest bin sum minus smallest.
pub fn imbalance<C: PartitionCost>(items: &[(usize, C)], assignment: &[usize], k: usize) -> C {
    let sums = bin_sums(items, assignment, k);
    let mut lo = sums[0];
    let mut hi = sums[0];
    for &s in &sums[1..] {
        if s < lo {
            lo = s;
        }
        if s > hi {
            hi = s;
        }
    }
    hi - lo
}
