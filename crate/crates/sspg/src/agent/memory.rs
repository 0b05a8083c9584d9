//! Bounded buffers: the short-term action memory that seeds reasoning
//! chains, and the experience replay buffer.

use std::collections::VecDeque;

use rand::Rng;

use crate::btpolicy::ActionBeliefBatch;
use crate::diffcore::Mat;

/// Ring of recently visited action beliefs. Chains seed from here so that
/// reasoning can start near already-plausible behavior; drawing is uniform,
/// and underfilled draws are padded with uniform cube samples.
#[derive(Debug, Clone)]
pub struct ShortTermActionMemory {
    capacity: usize,
    dim: usize,
    buf: VecDeque<Vec<f64>>,
}

impl ShortTermActionMemory {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        ShortTermActionMemory {
            capacity,
            dim,
            buf: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Store every row of a belief batch, evicting the oldest entries.
    pub fn push_batch(&mut self, batch: &Mat) {
        for i in 0..batch.rows() {
            if self.buf.len() == self.capacity {
                self.buf.pop_front();
            }
            self.buf.push_back(batch.row(i).to_vec());
        }
    }

    /// Draw exactly `m` beliefs: uniform picks from the buffer, padded with
    /// uniform-random cube samples while underfilled.
    pub fn draw(&self, m: usize, rng: &mut impl Rng) -> ActionBeliefBatch {
        let from_buffer = m.min(self.buf.len());
        let mut rows = Vec::with_capacity(m);
        for _ in 0..from_buffer {
            let idx = rng.random_range(0..self.buf.len());
            rows.push(self.buf[idx].clone());
        }
        for _ in from_buffer..m {
            rows.push((0..self.dim).map(|_| rng.random_range(-0.999999..0.999999)).collect());
        }
        ActionBeliefBatch::new(Mat::from_rows(&rows)).expect("cube samples are interior")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// FIFO experience buffer with uniform minibatch sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    buf: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            buf: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.buf[idx]
    }

    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..batch).map(|_| rng.random_range(0..self.buf.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn underfilled_draw_pads_with_cube_samples() {
        let mut mem = ShortTermActionMemory::new(8, 2);
        mem.push_batch(&Mat::from_vec(1, 2, vec![0.5, -0.5]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = mem.draw(4, &mut rng);
        assert_eq!(batch.chains(), 4);
        assert_eq!(batch.dim(), 2);
        assert!(batch.mat().data().iter().all(|v| v.abs() < 1.0));
        // The single stored belief fills exactly one slot.
        assert_eq!(batch.mat().row(0), &[0.5, -0.5]);
    }

    #[test]
    fn memory_evicts_oldest() {
        let mut mem = ShortTermActionMemory::new(3, 1);
        for v in [0.1, 0.2, 0.3, 0.4] {
            mem.push_batch(&Mat::scalar(v));
        }
        assert_eq!(mem.len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..64 {
            let b = mem.draw(2, &mut rng);
            for i in 0..2 {
                assert!(b.mat().get(i, 0) > 0.15, "evicted value resurfaced");
            }
        }
    }

    #[test]
    fn replay_is_fifo_at_capacity() {
        let mut rb = ReplayBuffer::new(2);
        for r in [1.0, 2.0, 3.0] {
            rb.push(Transition {
                state: vec![0.0],
                action: vec![0.0],
                reward: r,
                next_state: vec![0.0],
                done: true,
            });
        }
        assert_eq!(rb.len(), 2);
        assert_eq!(rb.get(0).reward, 2.0);
        assert_eq!(rb.get(1).reward, 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn buffers_respect_capacity_under_churn(ops in proptest::collection::vec(0u8..4, 1..200)) {
            let mut mem = ShortTermActionMemory::new(5, 1);
            let mut rb = ReplayBuffer::new(7);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for (i, op) in ops.iter().enumerate() {
                match op {
                    0 => mem.push_batch(&Mat::scalar((i as f64 * 0.01).sin() * 0.9)),
                    1 => {
                        let b = mem.draw(3, &mut rng);
                        prop_assert_eq!(b.chains(), 3);
                    }
                    2 => rb.push(Transition {
                        state: vec![0.0],
                        action: vec![0.1],
                        reward: i as f64,
                        next_state: vec![0.0],
                        done: true,
                    }),
                    _ => {
                        if !rb.is_empty() {
                            let idx = rb.sample_indices(4, &mut rng);
                            prop_assert!(idx.iter().all(|&j| j < rb.len()));
                        }
                    }
                }
                prop_assert!(mem.len() <= 5);
                prop_assert!(rb.len() <= 7);
            }
        }
    }
}
