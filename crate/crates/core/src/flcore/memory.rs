//! Bounded server-side gradient memory.
//!
//! The server keeps at most `m` accumulated per-worker update columns `D[i]`
//! plus participation counters. Admission and eviction happen in `mem_red`
//! before local training; the columns themselves are written during the
//! server update, where the Gram matrix of `D` (the `A` of the server QP) is
//! maintained incrementally: pairs of untouched columns scale by `beta2^2`,
//! pairs touching an updated column are recomputed.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::qp::GramSystem;
use crate::vecops;

/// Relative drift above which the periodic Gram audit logs a warning.
const GRAM_DRIFT_WARN: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct MemoryState {
    columns: BTreeMap<usize, Vec<f64>>,
    counters: Vec<u64>,
    buf: BTreeSet<usize>,
    new_buf: BTreeSet<usize>,
    /// Gram entries keyed by `(i, j)` with `i <= j`, covering exactly the
    /// workers that currently have a column.
    gram: BTreeMap<(usize, usize), f64>,
}

fn key(i: usize, j: usize) -> (usize, usize) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl MemoryState {
    pub fn new(num_workers: usize) -> Self {
        Self {
            columns: BTreeMap::new(),
            counters: vec![0; num_workers],
            buf: BTreeSet::new(),
            new_buf: BTreeSet::new(),
            gram: BTreeMap::new(),
        }
    }

    pub fn buf(&self) -> &BTreeSet<usize> {
        &self.buf
    }

    pub fn new_buf(&self) -> &BTreeSet<usize> {
        &self.new_buf
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn column(&self, id: usize) -> &[f64] {
        &self.columns[&id]
    }

    pub fn column_ids(&self) -> Vec<usize> {
        self.columns.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn gram_entry(&self, i: usize, j: usize) -> Option<f64> {
        self.gram.get(&key(i, j)).copied()
    }

    pub fn clear_new_buf(&mut self) {
        self.new_buf.clear();
    }

    /// Apply one round of column updates (Eq. 7 semantics): newly admitted
    /// workers get their update verbatim, active buffered workers accumulate
    /// `beta2 * D[i] + d_i`, stragglers decay by `beta2`. The Gram cache is
    /// updated in the same pass.
    pub fn absorb_round(&mut self, active: &BTreeMap<usize, &[f64]>, beta2: f64) {
        let ids: Vec<usize> = self.buf.iter().copied().collect();
        for &i in &ids {
            match active.get(&i) {
                Some(d_i) => {
                    if self.new_buf.contains(&i) {
                        self.columns.insert(i, d_i.to_vec());
                    } else {
                        let col = self.columns.get_mut(&i).expect("buffered column exists");
                        vecops::momentum_step(col, beta2, d_i);
                    }
                }
                None => {
                    let col = self.columns.get_mut(&i).expect("buffered column exists");
                    vecops::scale(col, beta2);
                }
            }
        }

        let decay = beta2 * beta2;
        let mut touched: Vec<(usize, usize)> = Vec::new();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a..] {
                if active.contains_key(&i) || active.contains_key(&j) {
                    touched.push((i, j));
                } else {
                    *self.gram.get_mut(&(i, j)).expect("cached pair exists") *= decay;
                }
            }
        }
        let columns = &self.columns;
        let fresh: Vec<((usize, usize), f64)> = touched
            .par_iter()
            .map(|&(i, j)| ((i, j), vecops::dot(&columns[&i], &columns[&j])))
            .collect();
        for (k, v) in fresh {
            self.gram.insert(k, v);
        }
    }

    /// Dual system for the server QP: cached Gram plus `b_j = <m, D[j]>`,
    /// columns in ascending worker-id order.
    pub fn gram_system(&self, m: &[f64]) -> GramSystem {
        let ids: Vec<usize> = self.buf.iter().copied().collect();
        let c = ids.len();
        let mut a = vec![vec![0.0; c]; c];
        for (r, &i) in ids.iter().enumerate() {
            for (s, &j) in ids.iter().enumerate().skip(r) {
                let v = self.gram_entry(i, j).expect("cached pair exists");
                a[r][s] = v;
                a[s][r] = v;
            }
        }
        let b: Vec<f64> = ids
            .iter()
            .map(|&j| vecops::dot(m, &self.columns[&j]))
            .collect();
        GramSystem { a, b }
    }

    /// Max relative deviation of the cache from a fresh Gram recompute.
    pub fn gram_drift(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let ids: Vec<usize> = self.columns.keys().copied().collect();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a..] {
                let fresh = vecops::dot(&self.columns[&i], &self.columns[&j]);
                let cached = self.gram_entry(i, j).unwrap_or(f64::NAN);
                worst = worst.max((cached - fresh).abs() / (1.0 + fresh.abs()));
            }
        }
        worst
    }

    /// Recompute the cache from the columns; returns the drift that was
    /// present. Called periodically as a guard against accumulation error.
    pub fn refresh_gram(&mut self) -> f64 {
        let drift = self.gram_drift();
        if drift > GRAM_DRIFT_WARN {
            log::warn!("gram cache drifted by {drift:.3e}; rebuilding");
        }
        let ids: Vec<usize> = self.columns.keys().copied().collect();
        self.gram.clear();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a..] {
                self.gram
                    .insert((i, j), vecops::dot(&self.columns[&i], &self.columns[&j]));
            }
        }
        drift
    }
}

/// Memory admission/eviction for one round, applied before local training.
/// Active workers already buffered only bump their counter; new ones are
/// admitted, evicting (when the buffer is full) the non-active worker with
/// the smallest counter, ties broken toward the lowest id. The evicted
/// worker's counter resets to zero and its column and Gram row/column are
/// dropped. Requires `m >= |sampled|`, which guarantees a victim exists.
/// Returns the evicted ids.
pub fn mem_red(mem: &mut MemoryState, m: usize, sampled: &[usize]) -> Vec<usize> {
    let mut evicted = Vec::new();
    for &i in sampled {
        if mem.buf.contains(&i) {
            mem.counters[i] += 1;
            continue;
        }
        if mem.buf.len() == m {
            let victim = mem
                .buf
                .iter()
                .filter(|k| sampled.binary_search(k).is_err())
                .min_by_key(|&&k| (mem.counters[k], k))
                .copied()
                .expect("m >= S guarantees an eviction target outside the sample");
            mem.counters[victim] = 0;
            mem.buf.remove(&victim);
            mem.new_buf.remove(&victim);
            mem.columns.remove(&victim);
            mem.gram.retain(|&(a, b), _| a != victim && b != victim);
            evicted.push(victim);
        }
        mem.counters[i] += 1;
        mem.buf.insert(i);
        mem.new_buf.insert(i);
    }
    evicted
}
