//! Multi-step transition accumulation and proportional prioritized replay.

use std::collections::VecDeque;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// One n-step experience record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    /// `R_t^(n) = Σ_k γ_t^(k) R_{t+k+1}`.
    pub n_step_return: f64,
    /// `γ_t^(n)`: product of the per-step discounts, 0 when a terminal
    /// occurred inside the window.
    pub n_step_discount: f64,
    pub bootstrap_state: Vec<f64>,
    pub steps: usize,
}

/// A single raw step waiting inside the n-step window.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingStep {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub discount: f64,
    pub next_state: Vec<f64>,
}

/// Sliding window that turns raw steps into n-step [`Transition`]s.
#[derive(Debug, Clone)]
pub struct NStepAccumulator {
    n: usize,
    window: VecDeque<PendingStep>,
    terminal: bool,
}

impl NStepAccumulator {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("n-step window must be at least 1".into()));
        }
        Ok(Self { n, window: VecDeque::with_capacity(n), terminal: false })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingStep> {
        self.window.iter()
    }

    pub fn awaiting_flush(&self) -> bool {
        self.terminal
    }

    /// Pushes `(S_t, A_t, R_{t+1}, γ_{t+1}, S_{t+1})`. Once the window holds
    /// `n` steps the oldest one is emitted, bootstrapping from the newest
    /// next state.
    pub fn push(
        &mut self,
        state: Vec<f64>,
        action: usize,
        reward: f64,
        discount: f64,
        next_state: Vec<f64>,
    ) -> Result<Option<Transition>> {
        if self.terminal {
            return Err(Error::Usage("push after a terminal step without flushing".into()));
        }
        self.terminal = discount == 0.0;
        self.window.push_back(PendingStep { state, action, reward, discount, next_state });
        if self.window.len() < self.n {
            return Ok(None);
        }
        let t = self.window_transition();
        self.window.pop_front();
        Ok(Some(t))
    }

    /// Emits every step still in the window after a terminal step.
    pub fn flush_terminal(&mut self) -> Result<Vec<Transition>> {
        if !self.window.is_empty() && !self.terminal {
            return Err(Error::Usage("flush requested mid-episode".into()));
        }
        let mut out = Vec::with_capacity(self.window.len());
        while !self.window.is_empty() {
            out.push(self.window_transition());
            self.window.pop_front();
        }
        self.terminal = false;
        Ok(out)
    }

    /// Drops pending steps (used when an episode is abandoned).
    pub fn clear(&mut self) {
        self.window.clear();
        self.terminal = false;
    }

    pub(crate) fn restore(&mut self, steps: Vec<PendingStep>, terminal: bool) {
        self.window = steps.into();
        self.terminal = terminal;
    }

    fn window_transition(&self) -> Transition {
        let first = &self.window[0];
        let last = &self.window[self.window.len() - 1];
        let mut ret = 0.0;
        let mut disc = 1.0;
        for step in &self.window {
            ret += disc * step.reward;
            disc *= step.discount;
        }
        Transition {
            state: first.state.clone(),
            action: first.action,
            n_step_return: ret,
            n_step_discount: disc,
            bootstrap_state: last.next_state.clone(),
            steps: self.window.len(),
        }
    }
}

/// Array-backed sum tree over a power-of-two number of leaves. Internal
/// nodes are recomputed from their children, never updated by deltas.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.leaves + leaf]
    }

    pub fn set(&mut self, leaf: usize, value: f64) {
        let mut i = self.leaves + leaf;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose prefix-sum interval `[P_{i-1}, P_i)` contains `mass`.
    pub fn find(&self, mass: f64) -> Result<usize> {
        let total = self.total();
        if !(mass >= 0.0 && mass < total) {
            return Err(Error::Range(format!("mass {mass} outside [0, {total})")));
        }
        let mut i = 1;
        let mut rest = mass;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            // Rounding in `rest` must never walk into an empty subtree.
            if rest < left || self.nodes[2 * i + 1] == 0.0 {
                i *= 2;
            } else {
                rest -= left;
                i = 2 * i + 1;
            }
        }
        Ok(i - self.leaves)
    }

    /// Maximum `|node - (left + right)|` over internal nodes.
    pub fn max_inconsistency(&self) -> f64 {
        (1..self.leaves)
            .map(|i| (self.nodes[i] - (self.nodes[2 * i] + self.nodes[2 * i + 1])).abs())
            .fold(0.0, f64::max)
    }
}

/// A sampled minibatch with importance-sampling corrections.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub is_weights: Vec<f64>,
}

pub const DEFAULT_PRIORITY_FLOOR: f64 = 1e-6;

/// Ring buffer of transitions with proportional prioritized sampling.
///
/// Leaf priorities are stored already exponentiated: updates write
/// `max(floor, loss^ω)` and inserts reuse the largest priority seen so far.
#[derive(Debug, Clone)]
pub struct PrioritizedBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    next: usize,
    tree: SumTree,
    max_priority_seen: f64,
    omega: f64,
    priority_floor: f64,
}

impl PrioritizedBuffer {
    pub fn new(capacity: usize, omega: f64, priority_floor: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if !(priority_floor > 0.0) {
            return Err(Error::Config("priority floor must be positive".into()));
        }
        if !(omega >= 0.0) {
            return Err(Error::Config("priority exponent must be non-negative".into()));
        }
        Ok(Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            tree: SumTree::new(capacity),
            max_priority_seen: 1.0,
            omega,
            priority_floor,
        })
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn max_priority_seen(&self) -> f64 {
        self.max_priority_seen
    }

    pub fn next_slot(&self) -> usize {
        self.next
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn priority(&self, index: usize) -> f64 {
        self.tree.get(index)
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.storage[index]
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.storage
    }

    /// Stores `t` at maximum priority, overwriting the oldest entry once full.
    pub fn insert(&mut self, t: Transition) -> usize {
        let index = self.next;
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[index] = t;
        }
        self.tree.set(index, self.max_priority_seen);
        self.next = (self.next + 1) % self.capacity;
        index
    }

    pub fn find(&self, mass: f64) -> Result<usize> {
        self.tree.find(mass)
    }

    /// Stratified proportional sample: the total mass is cut into
    /// `batch_size` equal strata with one uniform draw in each. Weights are
    /// `(N·P(i))^(-β)` divided by the batch maximum.
    pub fn sample(&self, batch_size: usize, beta: f64, rng: &mut Rng) -> Result<SampledBatch> {
        if batch_size == 0 || self.len() < batch_size {
            return Err(Error::NotReady { have: self.len(), need: batch_size.max(1) });
        }
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        let n = self.len() as f64;
        let mut indices = Vec::with_capacity(batch_size);
        let mut weights = Vec::with_capacity(batch_size);
        for k in 0..batch_size {
            let u: f64 = rng.random();
            let mass = ((k as f64 + u) * segment).min(total.next_down());
            let index = self.tree.find(mass)?.min(self.len() - 1);
            let prob = self.tree.get(index) / total;
            indices.push(index);
            weights.push((n * prob).powf(-beta));
        }
        let max = weights.iter().copied().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max;
        }
        Ok(SampledBatch { indices, is_weights: weights })
    }

    /// Uniform sample with replacement; all weights are 1.
    pub fn sample_uniform(&self, batch_size: usize, rng: &mut Rng) -> Result<SampledBatch> {
        if batch_size == 0 || self.len() < batch_size {
            return Err(Error::NotReady { have: self.len(), need: batch_size.max(1) });
        }
        let indices = (0..batch_size).map(|_| rng.random_range(0..self.len())).collect();
        Ok(SampledBatch { indices, is_weights: vec![1.0; batch_size] })
    }

    /// Sets each leaf to `max(floor, loss^ω)`.
    pub fn update_priorities(&mut self, indices: &[usize], losses: &[f64]) -> Result<()> {
        if indices.len() != losses.len() {
            return Err(Error::Dimension(format!("{} indices but {} losses", indices.len(), losses.len())));
        }
        for (&i, &loss) in indices.iter().zip(losses) {
            if !(loss >= 0.0) || !loss.is_finite() {
                return Err(Error::Numerical(format!("invalid priority loss {loss} for slot {i}")));
            }
            if i >= self.len() {
                return Err(Error::Range(format!("slot {i} beyond buffer size {}", self.len())));
            }
            let p = loss.powf(self.omega).max(self.priority_floor);
            self.tree.set(i, p);
            self.max_priority_seen = self.max_priority_seen.max(p);
        }
        Ok(())
    }

    pub(crate) fn restore(
        &mut self,
        storage: Vec<Transition>,
        priorities: &[f64],
        next: usize,
        max_priority_seen: f64,
    ) -> Result<()> {
        if storage.len() > self.capacity || storage.len() != priorities.len() || next >= self.capacity {
            return Err(Error::Checkpoint("replay buffer snapshot is inconsistent".into()));
        }
        self.tree = SumTree::new(self.capacity);
        for (i, &p) in priorities.iter().enumerate() {
            self.tree.set(i, p);
        }
        self.storage = storage;
        self.next = next;
        self.max_priority_seen = max_priority_seen;
        Ok(())
    }
}
