use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the final short batch is kept.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batch_iter<'a, E>(
    examples: &'a [E],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<&'a E>> + 'a> {
    let batches = epoch_batches(examples.len(), batch_size, seed, epoch)?;
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &examples[i]).collect()))
}
