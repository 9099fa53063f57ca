//! Mini-batches over a small pair set, reshuffled whenever it runs out.

use rand::seq::SliceRandom;
use rand::Rng;

/// Yields batches of at most `batch_size` distinct pairs, cycling through a
/// freshly shuffled order. A pass never ends on a single leftover pair
/// unless the whole set is one pair.
pub(crate) struct PairCycle {
    order: Vec<(usize, usize)>,
    cursor: usize,
    batch_size: usize,
}

impl PairCycle {
    pub(crate) fn new(pairs: &[(usize, usize)], batch_size: usize) -> Self {
        let cursor = pairs.len();
        Self { order: pairs.to_vec(), cursor, batch_size }
    }

    pub(crate) fn next_batch<R: Rng>(&mut self, rng: &mut R) -> &[(usize, usize)] {
        let n = self.order.len();
        if self.cursor >= n || (n - self.cursor == 1 && n > 1) {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + self.batch_size).min(n);
        &self.order[start..self.cursor]
    }
}

/// Optimizer steps in one epoch: one pass over the larger of the pair set
/// and the user pool, so the step budget does not shrink with the overlap.
pub(crate) fn steps_per_epoch(pairs: usize, pool: usize, batch_size: usize) -> usize {
    pairs.max(pool).div_ceil(batch_size).max(1)
}
