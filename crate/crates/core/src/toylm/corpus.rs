//! Synthetic integer-token corpora.
//!
//! Sequences come from a sparse first-order Markov chain: every token has a
//! handful of successors with geometrically decaying weights, so a small
//! model can drive perplexity far below the vocabulary size. Different
//! `seed`s give different transition tables, i.e. different "domains".

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensorio::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovCorpusSpec {
    /// Ids `0..alphabet` may occur; everything above never does.
    pub alphabet: usize,
    pub successors: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl MarkovCorpusSpec {
    pub fn new(alphabet: usize, seed: u64) -> Self {
        Self {
            alphabet,
            successors: 4,
            min_len: 16,
            max_len: 24,
            seed,
        }
    }
}

pub struct MarkovSource {
    spec: MarkovCorpusSpec,
    table: Vec<Vec<(u32, f64)>>,
}

impl MarkovSource {
    pub fn new(spec: MarkovCorpusSpec) -> Self {
        assert!(spec.alphabet >= 2 && spec.successors >= 1);
        assert!(spec.min_len >= 2 && spec.min_len <= spec.max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let ids: Vec<u32> = (0..spec.alphabet as u32).collect();
        let k = spec.successors.min(spec.alphabet);
        let table = (0..spec.alphabet)
            .map(|_| {
                let picks: Vec<u32> = ids.choose_multiple(&mut rng, k).copied().collect();
                let weights: Vec<f64> = (0..k).map(|i| 0.5f64.powi(i as i32)).collect();
                let total: f64 = weights.iter().sum();
                let mut cum = 0.0;
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(id, w)| {
                        cum += w / total;
                        (id, cum)
                    })
                    .collect()
            })
            .collect();
        Self { spec, table }
    }

    fn sequence(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let mut cur = rng.random_range(0..self.spec.alphabet as u32);
        let mut seq = Vec::with_capacity(len);
        seq.push(TokenId(cur));
        while seq.len() < len {
            let u: f64 = rng.random();
            let row = &self.table[cur as usize];
            cur = row
                .iter()
                .find(|(_, c)| u < *c)
                .unwrap_or(&row[row.len() - 1])
                .0;
            seq.push(TokenId(cur));
        }
        seq
    }

    /// `count` sequences drawn with a stream derived from `draw_seed`.
    pub fn generate(&self, count: usize, draw_seed: u64) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        (0..count).map(|_| self.sequence(&mut rng)).collect()
    }

    /// Like [`generate`](Self::generate) but skips any sequence in `exclude`.
    pub fn generate_disjoint(
        &self,
        count: usize,
        draw_seed: u64,
        exclude: &[Vec<TokenId>],
    ) -> Vec<Vec<TokenId>> {
        let seen: HashSet<&Vec<TokenId>> = exclude.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let s = self.sequence(&mut rng);
            if !seen.contains(&s) {
                out.push(s);
            }
        }
        out
    }
}

/// Draws a deterministic shuffle of `0..n` for one epoch.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn respects_alphabet_and_lengths() {
        let src = MarkovSource::new(MarkovCorpusSpec::new(100, 1));
        let corpus = src.generate(500, 2);
        assert_eq!(corpus.len(), 500);
        for s in &corpus {
            assert!((16..=24).contains(&s.len()));
            assert!(s.iter().all(|t| t.index() < 100));
        }
    }

    #[test]
    fn deterministic() {
        let a = MarkovSource::new(MarkovCorpusSpec::new(50, 3)).generate(20, 4);
        let b = MarkovSource::new(MarkovCorpusSpec::new(50, 3)).generate(20, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_generation() {
        let mut spec = MarkovCorpusSpec::new(3, 5);
        spec.min_len = 2;
        spec.max_len = 2;
        let src = MarkovSource::new(spec);
        let train = src.generate(5, 1);
        let held = src.generate_disjoint(5, 2, &train);
        assert!(held.iter().all(|s| !train.contains(s)));
    }

    #[test]
    fn epoch_orders_differ_but_are_permutations() {
        let a = epoch_order(100, 7, 0);
        let b = epoch_order(100, 7, 1);
        assert_ne!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(100, 7, 0));
    }
}
