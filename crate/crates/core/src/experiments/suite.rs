//! Seeded (source, target) pair sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ExperimentError;
use crate::tensor::Tensor;

/// Pairs of indices into a dataset. No image is used twice and the two
/// images of a pair always differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSuite {
    pub pairs: Vec<(usize, usize)>,
}

impl PairSuite {
    /// Shuffles the indices with `seed` and pairs them up in order. A
    /// candidate target identical to its source is set aside and the next
    /// index is tried; if that leaves too few pairs the shuffle is repeated
    /// (a bounded number of times) from the same generator.
    pub fn draw(images: &[Tensor], count: usize, seed: u64) -> Result<Self, ExperimentError> {
        if count == 0 {
            return Err(ExperimentError::Config("a pair suite needs at least one pair".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = 0;
        for _ in 0..64 {
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.shuffle(&mut rng);
            let pairs = greedy_pairs(images, &order, count);
            if pairs.len() == count {
                return Ok(Self { pairs });
            }
            best = best.max(pairs.len());
        }
        Err(ExperimentError::Config(format!(
            "{} images give only {best} distinct pairs, {count} requested",
            images.len()
        )))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The pairs as image references.
    pub fn resolve<'a>(&self, images: &'a [Tensor]) -> Vec<(&'a Tensor, &'a Tensor)> {
        self.pairs.iter().map(|&(s, t)| (&images[s], &images[t])).collect()
    }
}

fn greedy_pairs(images: &[Tensor], order: &[usize], count: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(count);
    let mut pending: Option<usize> = None;
    let mut deferred = Vec::new();
    for &i in order {
        match pending {
            None => pending = Some(i),
            Some(s) if images[s] == images[i] => deferred.push(i),
            Some(s) => {
                pairs.push((s, i));
                if pairs.len() == count {
                    break;
                }
                pending = deferred.pop();
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn images(n: usize) -> Vec<Tensor> {
        (0..n).map(|i| Tensor::full(&[1, 1, 1, 1], i as f64)).collect()
    }

    #[test]
    fn without_replacement_and_seeded() {
        let imgs = images(12);
        let s = PairSuite::draw(&imgs, 6, 3).unwrap();
        let used: HashSet<usize> = s.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        assert_eq!(used.len(), 12);
        assert_eq!(s, PairSuite::draw(&imgs, 6, 3).unwrap());
        assert_ne!(s, PairSuite::draw(&imgs, 6, 4).unwrap());
        assert!(PairSuite::draw(&imgs, 7, 3).is_err());
    }

    #[test]
    fn identical_images_never_pair() {
        let mut imgs = images(3);
        imgs.extend(images(3));
        for seed in 0..20 {
            let s = PairSuite::draw(&imgs, 3, seed).unwrap();
            assert!(s.pairs.iter().all(|&(a, b)| imgs[a] != imgs[b]));
        }
        let same = vec![Tensor::zeros(&[1, 1, 1, 1]); 4];
        assert!(PairSuite::draw(&same, 1, 0).is_err());
    }
}
