//! Transition storage with uniform or prioritized sampling.

use rand::Rng;

use super::sumtree::SumTree;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerParams {
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for PerParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            epsilon: 1e-6,
        }
    }
}

/// A sampled batch in flat row-major form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub terminals: Vec<bool>,
    /// Importance weights; all ones for uniform sampling.
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Ring buffer of transitions. Storage grows on demand up to `capacity`, then
/// the oldest slot is overwritten.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    width: usize,
    states: Vec<f64>,
    next_states: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    terminals: Vec<bool>,
    len: usize,
    next: usize,
    per: Option<(PerParams, SumTree, f64)>,
}

impl ReplayBuffer {
    pub fn uniform(capacity: usize, width: usize) -> Self {
        Self {
            capacity,
            width,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            len: 0,
            next: 0,
            per: None,
        }
    }

    pub fn prioritized(capacity: usize, width: usize, params: PerParams) -> Self {
        let mut b = Self::uniform(capacity, width);
        b.per = Some((params, SumTree::new(capacity), 1.0));
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_prioritized(&self) -> bool {
        self.per.is_some()
    }

    /// Stores a transition and returns its slot. New prioritized entries get
    /// the largest priority seen so far.
    pub fn push(&mut self, t: &Transition) -> usize {
        assert_eq!(t.state.len(), self.width);
        assert_eq!(t.next_state.len(), self.width);
        let slot = self.next;
        if self.len < self.capacity && slot == self.len {
            self.states.extend_from_slice(&t.state);
            self.next_states.extend_from_slice(&t.next_state);
            self.actions.push(t.action);
            self.rewards.push(t.reward);
            self.terminals.push(t.terminal);
            self.len += 1;
        } else {
            let w = self.width;
            self.states[slot * w..(slot + 1) * w].copy_from_slice(&t.state);
            self.next_states[slot * w..(slot + 1) * w].copy_from_slice(&t.next_state);
            self.actions[slot] = t.action;
            self.rewards[slot] = t.reward;
            self.terminals[slot] = t.terminal;
        }
        if let Some((params, tree, max_priority)) = &mut self.per {
            tree.set(slot, max_priority.powf(params.alpha));
        }
        self.next = (slot + 1) % self.capacity;
        slot
    }

    pub fn get(&self, i: usize) -> Transition {
        let w = self.width;
        Transition {
            state: self.states[i * w..(i + 1) * w].to_vec(),
            action: self.actions[i],
            reward: self.rewards[i],
            next_state: self.next_states[i * w..(i + 1) * w].to_vec(),
            terminal: self.terminals[i],
        }
    }

    /// Priority (after the exponent) of slot `i`.
    pub fn priority(&self, i: usize) -> Option<f64> {
        self.per.as_ref().map(|(_, tree, _)| tree.get(i))
    }

    /// Overrides the stored, already-exponentiated priority of a slot.
    pub fn set_raw_priority(&mut self, i: usize, p: f64) {
        if let Some((_, tree, _)) = &mut self.per {
            tree.set(i, p);
        }
    }

    pub fn tree(&self) -> Option<&SumTree> {
        self.per.as_ref().map(|(_, tree, _)| tree)
    }

    fn gather(&self, indices: Vec<usize>, weights: Vec<f64>) -> Batch {
        let w = self.width;
        let mut b = Batch {
            states: Vec::with_capacity(indices.len() * w),
            next_states: Vec::with_capacity(indices.len() * w),
            actions: Vec::with_capacity(indices.len()),
            rewards: Vec::with_capacity(indices.len()),
            terminals: Vec::with_capacity(indices.len()),
            indices: Vec::new(),
            weights,
        };
        for &i in &indices {
            b.states.extend_from_slice(&self.states[i * w..(i + 1) * w]);
            b.next_states.extend_from_slice(&self.next_states[i * w..(i + 1) * w]);
            b.actions.push(self.actions[i]);
            b.rewards.push(self.rewards[i]);
            b.terminals.push(self.terminals[i]);
        }
        b.indices = indices;
        b
    }

    /// Uniform sampling with replacement, or proportional sampling with
    /// importance weights `(N·P(i))^(−β)` normalized by their maximum.
    pub fn sample(&self, rng: &mut impl Rng, batch: usize, beta: f64) -> Result<Batch> {
        if self.len == 0 {
            return Err(Error::Empty("replay buffer is empty".into()));
        }
        match &self.per {
            None => {
                let idx = (0..batch).map(|_| rng.random_range(0..self.len)).collect();
                Ok(self.gather(idx, vec![1.0; batch]))
            }
            Some((_, tree, _)) => {
                let total = tree.total();
                let segment = total / batch as f64;
                let mut idx = Vec::with_capacity(batch);
                for k in 0..batch {
                    let mass = segment * (k as f64 + rng.random::<f64>());
                    idx.push(tree.find(mass)?);
                }
                let n = self.len as f64;
                let mut weights: Vec<f64> = idx.iter().map(|&i| (n * tree.get(i) / total).powf(-beta)).collect();
                let max = weights.iter().copied().fold(0.0, f64::max);
                weights.iter_mut().for_each(|w| *w /= max);
                Ok(self.gather(idx, weights))
            }
        }
    }

    /// Sets each sampled slot's priority to `|δ| + ε`.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) {
        if let Some((params, tree, max_priority)) = &mut self.per {
            for (&i, d) in indices.iter().zip(td_errors) {
                let p = d.abs() + params.epsilon;
                *max_priority = max_priority.max(p);
                tree.set(i, p.powf(params.alpha));
            }
        }
    }
}
