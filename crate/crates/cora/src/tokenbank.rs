//! Class-keyed FIFO memory of segmentation tokens from labeled passes.
//!
//! The bank supplies the positive (same class) and negatives (other
//! classes) for the token-level contrastive loss. Entries are stored
//! detached: no gradient ever flows into a banked vector.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{SsegToken, TokenSource};
use crate::rng::subseed;

pub const DEFAULT_CAPACITY_PER_CLASS: usize = 64;
pub const DEFAULT_N_NEG: usize = 32;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("only labeled-source tokens may enter the bank")]
    SourceViolation,
}

#[derive(Debug, Clone, Default)]
pub struct TokenBank {
    per_class: BTreeMap<u8, VecDeque<Vec<f64>>>,
    capacity_per_class: usize,
}

impl TokenBank {
    pub fn new(capacity_per_class: usize) -> Self {
        assert!(capacity_per_class >= 1);
        Self {
            per_class: BTreeMap::new(),
            capacity_per_class,
        }
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(VecDeque::len).sum()
    }

    pub fn class_len(&self, class_id: u8) -> usize {
        self.per_class.get(&class_id).map_or(0, VecDeque::len)
    }

    pub fn clear(&mut self) {
        self.per_class.clear();
    }

    /// Append a labeled token; evicts the oldest entry of that class when
    /// the buffer is full.
    pub fn push(&mut self, token: &SsegToken) -> Result<(), BankError> {
        if token.source != TokenSource::Labeled {
            return Err(BankError::SourceViolation);
        }
        let buf = self.per_class.entry(token.class_id).or_default();
        if buf.len() == self.capacity_per_class {
            buf.pop_front();
        }
        buf.push_back(token.vec.clone());
        Ok(())
    }

    /// Seeded uniform positive from the query class (when present) and up
    /// to `n_neg` negatives drawn without replacement from all other
    /// classes. Empty results are not errors.
    pub fn sample(
        &self,
        class_id: u8,
        n_neg: usize,
        seed: u64,
    ) -> (Option<Vec<f64>>, Vec<Vec<f64>>) {
        assert!(n_neg >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0xba7c));

        let positive = self.per_class.get(&class_id).and_then(|buf| {
            if buf.is_empty() {
                None
            } else {
                Some(buf[rng.gen_range(0..buf.len())].clone())
            }
        });

        let mut pool: Vec<(u8, usize)> = Vec::new();
        for (&class, buf) in &self.per_class {
            if class == class_id {
                continue;
            }
            pool.extend((0..buf.len()).map(|i| (class, i)));
        }
        // partial Fisher-Yates for a without-replacement draw
        let take = n_neg.min(pool.len());
        for i in 0..take {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let negatives = pool[..take]
            .iter()
            .map(|&(class, i)| self.per_class[&class][i].clone())
            .collect();
        (positive, negatives)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn token(class_id: u8, tag: f64, source: TokenSource) -> SsegToken {
        SsegToken {
            vec: vec![tag, -tag],
            class_id,
            source,
        }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut bank = TokenBank::new(64);
        for i in 0..65 {
            bank.push(&token(1, i as f64, TokenSource::Labeled)).unwrap();
        }
        assert_eq!(bank.class_len(1), 64);
        // the first token (tag 0) was evicted
        let buf = &bank.per_class[&1];
        assert_eq!(buf[0][0], 1.0);
        assert_eq!(buf[63][0], 64.0);
    }

    #[test]
    fn unlabeled_tokens_are_rejected() {
        let mut bank = TokenBank::new(4);
        assert!(matches!(
            bank.push(&token(1, 0.5, TokenSource::Unlabeled)),
            Err(BankError::SourceViolation)
        ));
    }

    #[test]
    fn push_to_empty_bank() {
        let mut bank = TokenBank::new(4);
        bank.push(&token(3, 0.1, TokenSource::Labeled)).unwrap();
        assert_eq!(bank.total(), 1);
    }

    #[test]
    fn sample_same_class_only_gives_positive() {
        let mut bank = TokenBank::new(4);
        bank.push(&token(2, 0.3, TokenSource::Labeled)).unwrap();
        let (pos, negs) = bank.sample(2, 8, 5);
        assert!(pos.is_some());
        assert!(negs.is_empty());
    }

    #[test]
    fn sample_other_class_only_gives_negatives() {
        let mut bank = TokenBank::new(4);
        bank.push(&token(2, 0.3, TokenSource::Labeled)).unwrap();
        bank.push(&token(2, 0.4, TokenSource::Labeled)).unwrap();
        let (pos, negs) = bank.sample(3, 8, 5);
        assert!(pos.is_none());
        assert_eq!(negs.len(), 2);
    }

    #[test]
    fn negatives_never_match_query_class() {
        let mut bank = TokenBank::new(8);
        for class in 1..=4u8 {
            for i in 0..5 {
                bank.push(&token(class, class as f64 + i as f64 * 10.0, TokenSource::Labeled))
                    .unwrap();
            }
        }
        for seed in 0..50 {
            let (_, negs) = bank.sample(2, 6, seed);
            for v in &negs {
                // class 2 vectors all have fractional part encoding class 2
                assert_ne!(v[0].rem_euclid(10.0), 2.0);
            }
            // without replacement: no duplicate entries
            for i in 0..negs.len() {
                for j in i + 1..negs.len() {
                    assert_ne!(negs[i], negs[j]);
                }
            }
        }
    }

    #[test]
    fn positive_draws_are_uniform() {
        let mut bank = TokenBank::new(8);
        for i in 0..4 {
            bank.push(&token(1, i as f64, TokenSource::Labeled)).unwrap();
        }
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            let (pos, _) = bank.sample(1, 1, seed);
            counts[pos.unwrap()[0] as usize] += 1;
        }
        for &c in &counts {
            assert!(
                (2500i64 - c as i64).abs() <= 150,
                "draw counts {counts:?} outside 2500 +/- 150"
            );
        }
    }

    #[test]
    fn bank_is_order_deterministic() {
        let build = || {
            let mut bank = TokenBank::new(4);
            for (class, tag) in [(1u8, 0.1), (2, 0.2), (1, 0.3)] {
                bank.push(&token(class, tag, TokenSource::Labeled)).unwrap();
            }
            bank
        };
        let (a, b) = (build(), build());
        assert_eq!(a.sample(1, 4, 9), b.sample(1, 4, 9));
    }
}
