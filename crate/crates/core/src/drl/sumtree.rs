//! Binary sum tree over a fixed number of leaf slots.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SumTree {
    capacity: usize,
    /// Number of leaves rounded up to a power of two.
    leaves: usize,
    /// Heap layout: node `i` has children `2i` and `2i + 1`; leaves start at `leaves`.
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            capacity,
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    /// Sets leaf `i` and recomputes its ancestors from their children, so sums
    /// never accumulate drift.
    pub fn set(&mut self, i: usize, priority: f64) {
        assert!(i < self.capacity, "leaf {i} outside capacity {}", self.capacity);
        assert!(priority >= 0.0 && priority.is_finite(), "invalid priority {priority}");
        let mut n = self.leaves + i;
        self.nodes[n] = priority;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative range contains `mass ∈ [0, total)`.
    pub fn find(&self, mass: f64) -> Result<usize> {
        if !(self.total() > 0.0) {
            return Err(Error::Empty("sum tree has no mass".into()));
        }
        let mut mass = mass.clamp(0.0, self.total());
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        let mut leaf = n - self.leaves;
        // rounding at the right edge can land on an empty leaf
        while self.get(leaf) == 0.0 && leaf > 0 {
            leaf -= 1;
        }
        Ok(leaf)
    }

    /// Checks that every internal node equals the sum of its children.
    pub fn audit(&self) -> bool {
        (1..self.leaves).all(|n| self.nodes[n] == self.nodes[2 * n] + self.nodes[2 * n + 1])
    }
}
