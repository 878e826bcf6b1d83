use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::Mode;

/// Shuffle stream for `(seed, epoch)`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn chunk(order: Vec<usize>, batch_size: usize, mode: Mode) -> Vec<Vec<usize>> {
    let bs = batch_size.max(1);
    order
        .chunks(bs)
        .filter(|c| mode == Mode::Eval || c.len() == bs)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Index batches over a fresh permutation of `0..n` keyed by `(seed, epoch)`.
/// Train mode drops the final partial batch.
pub fn batch_iter(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: Mode,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    chunk(order, batch_size, mode)
}

/// Like [`batch_iter`] but interleaves classes proportionally so every
/// batch of a multi-class dataset sees each class at close to its overall rate.
pub fn stratified_batches(
    labels: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: Mode,
) -> Vec<Vec<usize>> {
    let mut rng = epoch_rng(seed, epoch);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        keyed.extend(
            members
                .iter()
                .enumerate()
                .map(|(k, &i)| ((k as f64 + 0.5) / n, c, i)),
        );
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    chunk(order, batch_size, mode)
}

/// Sequential chunks for evaluation.
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let bs = batch_size.max(1);
    (0..n).step_by(bs).map(|s| s..(s + bs).min(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_drops_partial_eval_keeps() {
        let t = batch_iter(5, 2, 0, 0, Mode::Train);
        assert_eq!(t.len(), 2);
        assert_eq!(t.iter().map(Vec::len).sum::<usize>(), 4);
        let e = batch_iter(5, 2, 0, 0, Mode::Eval);
        assert_eq!(e.len(), 3);
        let mut all: Vec<usize> = e.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn keyed_by_seed_and_epoch() {
        assert_eq!(
            batch_iter(50, 8, 4, 2, Mode::Train),
            batch_iter(50, 8, 4, 2, Mode::Train)
        );
        assert_ne!(
            batch_iter(50, 8, 4, 2, Mode::Train),
            batch_iter(50, 8, 4, 3, Mode::Train)
        );
        assert_ne!(
            batch_iter(50, 8, 4, 2, Mode::Train),
            batch_iter(50, 8, 5, 2, Mode::Train)
        );
    }

    #[test]
    fn stratified_batches_mix_classes() {
        // 10% minority class
        let labels: Vec<usize> = (0..200).map(|i| usize::from(i % 10 == 0)).collect();
        let batches = stratified_batches(&labels, 20, 1, 0, Mode::Train);
        assert_eq!(batches.len(), 10);
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| labels[i] == 1).count(), 2);
        }
        assert_eq!(batches, stratified_batches(&labels, 20, 1, 0, Mode::Train));
    }

    #[test]
    fn eval_ranges_cover() {
        assert_eq!(eval_batches(5, 2), vec![0..2, 2..4, 4..5]);
    }
}
