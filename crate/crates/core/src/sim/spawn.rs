//! Random arrivals: one Bernoulli draw per entry per tick, with a FIFO of
//! arrivals that could not be placed yet.

use std::collections::VecDeque;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// RNG stream used for arrivals. Policies draw from other streams, so the
/// arrival sequence of a seed is the same under every policy.
pub const SPAWN_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub entry: usize,
    /// Index drawn from the choice weights (exit ramp or turn).
    pub choice: usize,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct Spawner {
    probs: Vec<f64>,
    choice: Option<WeightedIndex<f64>>,
    n_choices: usize,
    rng: ChaCha8Rng,
    pending: Vec<VecDeque<Arrival>>,
    generated: usize,
}

impl Spawner {
    /// `rates` in vehicles per second per entry; `choice_weights` must have
    /// a positive sum.
    pub fn new(seed: u64, rates: &[f64], choice_weights: &[f64], dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SPAWN_STREAM);
        let n_choices = choice_weights.len();
        let choice = if n_choices > 1 { WeightedIndex::new(choice_weights.iter().copied()).ok() } else { None };
        Self {
            probs: rates.iter().map(|r| (r * dt).clamp(0.0, 1.0)).collect(),
            choice,
            n_choices,
            rng,
            pending: vec![VecDeque::new(); rates.len()],
            generated: 0,
        }
    }

    pub fn n_entries(&self) -> usize {
        self.probs.len()
    }

    pub fn n_choices(&self) -> usize {
        self.n_choices
    }

    /// Draw this tick's arrivals.
    pub fn tick(&mut self, t: f64) {
        for entry in 0..self.probs.len() {
            let p = self.probs[entry];
            if p > 0.0 && self.rng.gen_bool(p) {
                let choice = self.choice.as_ref().map_or(0, |w| w.sample(&mut self.rng));
                self.pending[entry].push_back(Arrival { entry, choice, t });
                self.generated += 1;
            }
        }
    }

    pub fn peek(&self, entry: usize) -> Option<&Arrival> {
        self.pending[entry].front()
    }

    /// Mark the front arrival of `entry` as placed.
    pub fn pop(&mut self, entry: usize) -> Option<Arrival> {
        self.pending[entry].pop_front()
    }

    /// Arrivals drawn so far, placed or not.
    pub fn generated(&self) -> usize {
        self.generated
    }

    pub fn waiting(&self) -> usize {
        self.pending.iter().map(VecDeque::len).sum()
    }
}
