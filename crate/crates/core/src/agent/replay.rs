//! Prioritized experience replay over a sum tree.

use std::sync::Arc;

use rand::Rng;

use crate::env::Observation;

/// Stored transition. Observations are shared with the neighbouring
/// transition of the same episode.
#[derive(Debug, Clone)]
pub struct Stored {
    pub obs: Arc<Observation>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub reward: f64,
    pub discount: f64,
    pub next_obs: Option<Arc<Observation>>,
    pub next_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerConfig {
    pub alpha: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub eps: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self { alpha: 0.6, beta0: 0.4, beta1: 1.0, eps: 1e-6 }
    }
}

/// Binary sum tree over `capacity` leaves.
#[derive(Debug, Clone)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = v;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u` in `[0, total)`.
    fn find(&self, mut u: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if u < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                u -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Stored>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
    pub per: PerConfig,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, per: PerConfig) -> Self {
        assert!(capacity > 0);
        Self { capacity, items: Vec::new(), next: 0, tree: SumTree::new(capacity), max_priority: 1.0, per }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Stored {
        &self.items[i]
    }

    /// New transitions enter with the largest priority seen so far.
    pub fn push(&mut self, t: Stored) {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.tree.set(slot, self.max_priority.powf(self.per.alpha));
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i).powf(1.0 / self.per.alpha.max(f64::MIN_POSITIVE))
    }

    /// Sampling probability of slot `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    /// Stratified proportional sampling with importance weights normalized
    /// by their maximum. `beta` is the current correction exponent.
    pub fn sample<R: Rng>(&self, n: usize, beta: f64, rng: &mut R) -> Sample {
        assert!(!self.items.is_empty());
        let total = self.tree.total();
        let seg = total / n as f64;
        let len = self.items.len() as f64;
        let mut indices = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for j in 0..n {
            let u = (j as f64 + rng.gen::<f64>()) * seg;
            let i = self.tree.find(u.min(total * (1.0 - 1e-12))).min(self.items.len() - 1);
            let p = self.tree.get(i) / total;
            indices.push(i);
            weights.push((len * p).powf(-beta));
        }
        let max = weights.iter().cloned().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max;
        }
        Sample { indices, weights }
    }

    /// Set priorities from absolute TD errors.
    pub fn update(&mut self, indices: &[usize], td_abs: &[f64]) {
        for (&i, &d) in indices.iter().zip(td_abs) {
            let p = d.abs() + self.per.eps;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(i, p.powf(self.per.alpha));
        }
    }

    pub fn beta(&self, progress: f64) -> f64 {
        let t = progress.clamp(0.0, 1.0);
        self.per.beta0 + (self.per.beta1 - self.per.beta0) * t
    }
}
