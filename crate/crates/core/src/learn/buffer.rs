use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment interaction; `h` and `l` are the margins of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub h: f64,
    pub l: f64,
    pub next: Vec<f64>,
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            cursor: 0,
        })
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

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Indices of a uniform batch drawn without replacement.
    pub fn sample_indices<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        let n = batch.min(self.items.len());
        index::sample(rng, self.items.len(), n).into_vec()
    }

    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        self.sample_indices(batch, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}
