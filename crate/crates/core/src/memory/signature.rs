use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::WordId;

/// Bag-of-words appearance of a location: a multiset of word ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    counts: BTreeMap<WordId, u32>,
    len: usize,
}

impl Signature {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, word: WordId) {
        self.add(word, 1);
    }

    pub fn add(&mut self, word: WordId, multiplicity: u32) {
        if multiplicity == 0 {
            return;
        }
        *self.counts.entry(word).or_default() += multiplicity;
        self.len += multiplicity as usize;
    }

    /// Total number of words, counting repeats.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn multiplicity(&self, word: WordId) -> u32 {
        self.counts.get(&word).copied().unwrap_or(0)
    }

    pub fn contains(&self, word: WordId) -> bool {
        self.counts.contains_key(&word)
    }

    /// `(word, multiplicity)` pairs in increasing word order.
    pub fn iter(&self) -> impl Iterator<Item = (WordId, u32)> + '_ {
        self.counts.iter().map(|(&w, &m)| (w, m))
    }

    pub fn word_ids(&self) -> impl Iterator<Item = WordId> + '_ {
        self.counts.keys().copied()
    }

    /// Replaces word ids through `mapping`; unmapped ids are kept.
    pub fn remap(&self, mapping: &BTreeMap<WordId, WordId>) -> Signature {
        self.iter()
            .map(|(w, m)| (mapping.get(&w).copied().unwrap_or(w), m))
            .collect()
    }

    /// Drops every occurrence of `word`, returning its former multiplicity.
    pub fn remove_word(&mut self, word: WordId) -> u32 {
        let m = self.counts.remove(&word).unwrap_or(0);
        self.len -= m as usize;
        m
    }

    /// Number of matched word pairs: the multiset intersection size.
    pub fn matched_pairs(&self, other: &Signature) -> usize {
        let (small, large) = if self.distinct() <= other.distinct() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .counts
            .iter()
            .map(|(w, &m)| m.min(large.multiplicity(*w)) as usize)
            .sum()
    }
}

impl FromIterator<WordId> for Signature {
    fn from_iter<T: IntoIterator<Item = WordId>>(iter: T) -> Self {
        let mut s = Signature::new();
        for w in iter {
            s.push(w);
        }
        s
    }
}

impl FromIterator<(WordId, u32)> for Signature {
    fn from_iter<T: IntoIterator<Item = (WordId, u32)>>(iter: T) -> Self {
        let mut s = Signature::new();
        for (w, m) in iter {
            s.add(w, m);
        }
        s
    }
}

/// Similarity of two signatures: matched pairs divided by the size of the
/// larger signature. Empty signatures are similar to nothing.
pub fn similarity(a: &Signature, b: &Signature) -> f64 {
    let larger = a.len().max(b.len());
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    a.matched_pairs(b) as f64 / larger as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(words: &[WordId]) -> Signature {
        words.iter().copied().collect()
    }

    #[test]
    fn identical_nonempty_is_one() {
        let a = sig(&[1, 2, 2, 7]);
        assert_eq!(similarity(&a, &a), 1.0);
    }

    #[test]
    fn larger_signature_normalizes() {
        // 100 words vs 80 words sharing 40 pairs
        let a: Signature = (0..100).collect();
        let b: Signature = (60..140).collect();
        assert_eq!(a.matched_pairs(&b), 40);
        assert_eq!(similarity(&a, &b), 0.4);
        assert_eq!(similarity(&b, &a), 0.4);
    }

    #[test]
    fn empty_signatures() {
        let e = Signature::new();
        assert_eq!(similarity(&e, &e), 0.0);
        assert_eq!(similarity(&e, &sig(&[1])), 0.0);
    }

    #[test]
    fn multiplicities_count_pairs() {
        let a = sig(&[3, 3, 3, 4]);
        let b = sig(&[3, 3, 5]);
        assert_eq!(a.matched_pairs(&b), 2);
        assert_eq!(similarity(&a, &b), 0.5);
    }

    #[test]
    fn remap_and_remove() {
        let mut a = sig(&[1, 1, 2, 9]);
        let r = a.remap(&BTreeMap::from([(1, 9)]));
        assert_eq!(r.multiplicity(9), 3);
        assert_eq!(r.len(), 4);
        assert_eq!(a.remove_word(1), 2);
        assert_eq!(a.len(), 2);
    }

    /// Exhaustive pairing: greedily strike matching elements from a list copy.
    fn brute_pairs(a: &[WordId], b: &[WordId]) -> usize {
        let mut rest = b.to_vec();
        let mut pairs = 0;
        for w in a {
            if let Some(i) = rest.iter().position(|x| x == w) {
                rest.swap_remove(i);
                pairs += 1;
            }
        }
        pairs
    }

    proptest! {
        #[test]
        fn similarity_matches_brute_force(
            a in proptest::collection::vec(0u64..12, 0..30),
            b in proptest::collection::vec(0u64..12, 0..30),
        ) {
            let (sa, sb) = (sig(&a), sig(&b));
            let pairs = brute_pairs(&a, &b);
            prop_assert_eq!(sa.matched_pairs(&sb), pairs);
            let s = similarity(&sa, &sb);
            let expected = if a.is_empty() || b.is_empty() { 0.0 } else { pairs as f64 / a.len().max(b.len()) as f64 };
            prop_assert_eq!(s, expected);
            prop_assert_eq!(s, similarity(&sb, &sa));
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
