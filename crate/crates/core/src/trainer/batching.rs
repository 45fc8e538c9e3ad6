use rand::seq::SliceRandom;
use rand::Rng;

/// Batches per sorting window.
const WINDOW: usize = 20;

/// Shuffled length-bucketed batches of indices into `lens`.
///
/// Indices are shuffled, cut into windows of `WINDOW` batches, sorted by
/// length inside each window and split into batches; the batch order is
/// shuffled again. Every index appears exactly once.
pub fn make_batches<R: Rng + ?Sized>(lens: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(lens.len().div_ceil(batch_size));
    for window in order.chunks_mut(batch_size * WINDOW) {
        window.sort_by_key(|&i| lens[i]);
        batches.extend(window.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}
