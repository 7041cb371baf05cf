//! Incremental visual vocabulary.
//!
//! Words are created online: a descriptor that does not pass the
//! nearest-neighbour distance-ratio test against the resident words becomes a
//! new word with itself as representative. Every resident word keeps a
//! reference count per location; words nobody references any more leave the
//! dictionary and travel to long-term memory with the location that released
//! them last.

pub mod index;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ingest::{Descriptor, DescriptorSet};
use crate::memory::Signature;
use crate::{LocationId, WordId};
use index::{linear_nearest2, ForestParams, KdForest, Nearest2};

#[derive(Debug, Error, PartialEq)]
pub enum DictionaryError {
    #[error("descriptor dimension {found} does not match dictionary dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("word {word} is not resident in the dictionary")]
    UnknownWord { word: WordId },
    #[error("word {word} holds no reference to location {location}")]
    MissingRef { word: WordId, location: LocationId },
    #[error("word {word} is already resident")]
    AlreadyResident { word: WordId },
}

/// A quantization cell represented by one immutable descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualWord {
    pub id: WordId,
    pub descriptor: Descriptor,
    refs: BTreeMap<LocationId, u32>,
}

impl VisualWord {
    pub fn new(id: WordId, descriptor: Descriptor) -> Self {
        Self {
            id,
            descriptor,
            refs: BTreeMap::new(),
        }
    }

    /// Referencing locations with their multiplicities.
    pub fn refs(&self) -> &BTreeMap<LocationId, u32> {
        &self.refs
    }

    pub fn is_orphan(&self) -> bool {
        self.refs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexParams {
    pub trees: usize,
    /// Leaf points examined per query before the search stops.
    pub checks: usize,
    pub leaf_size: usize,
    /// Below this many words the index is an exact linear scan.
    pub exact_below: usize,
    /// [`Dictionary::maintain_index`] rebuilds once unindexed or deleted
    /// words exceed this fraction of the forest.
    pub stale_fraction: f32,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            trees: 4,
            checks: 512,
            leaf_size: 8,
            exact_below: 5000,
            stale_fraction: 0.125,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dictionary {
    words: BTreeMap<WordId, VisualWord>,
    forest: Option<KdForest>,
    /// Resident words not covered by the forest.
    unindexed: BTreeSet<WordId>,
    dirty: bool,
    /// Words evicted from the forest since it was built.
    tombstones: usize,
    match_ratio: f32,
    next_id: WordId,
    dim: Option<usize>,
    params: IndexParams,
}

impl Dictionary {
    pub fn new(match_ratio: f32, params: IndexParams) -> Self {
        Self {
            words: BTreeMap::new(),
            forest: None,
            unindexed: BTreeSet::new(),
            dirty: false,
            tombstones: 0,
            match_ratio,
            next_id: 0,
            dim: None,
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: WordId) -> bool {
        self.words.contains_key(&word)
    }

    pub fn get(&self, word: WordId) -> Option<&VisualWord> {
        self.words.get(&word)
    }

    pub fn words(&self) -> impl Iterator<Item = &VisualWord> {
        self.words.values()
    }

    pub fn match_ratio(&self) -> f32 {
        self.match_ratio
    }

    /// Id the next created word will get.
    pub fn next_word_id(&self) -> WordId {
        self.next_id
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    fn check_dim(&mut self, d: &Descriptor) -> Result<(), DictionaryError> {
        match self.dim {
            Some(expected) if expected != d.dim() => Err(DictionaryError::DimensionMismatch {
                expected,
                found: d.dim(),
            }),
            Some(_) => Ok(()),
            None => {
                self.dim = Some(d.dim());
                Ok(())
            }
        }
    }

    /// Two nearest resident words with Euclidean (not squared) distances.
    pub fn nearest2(&self, query: &[f32]) -> Nearest2 {
        let mut best = match &self.forest {
            Some(forest) => forest.nearest2(query),
            None => Nearest2::default(),
        };
        best.merge(linear_nearest2(
            query,
            self.unindexed
                .iter()
                .map(|id| (*id, self.words[id].descriptor.values())),
        ));
        Nearest2 {
            first: best.first.map(|(id, d)| (id, d.sqrt())),
            second: best.second.map(|(id, d)| (id, d.sqrt())),
        }
    }

    /// Distance-ratio test: the nearest word is accepted when it coincides
    /// with the query, or when a second word exists and `d1 / d2` is below
    /// the match ratio.
    fn matching_word(&self, query: &[f32]) -> Option<WordId> {
        let n = self.nearest2(query);
        let (w1, d1) = n.first?;
        if d1 == 0.0 {
            return Some(w1);
        }
        let (_, d2) = n.second?;
        (d2 > 0.0 && d1 / d2 < self.match_ratio).then_some(w1)
    }

    fn insert_word(&mut self, word: VisualWord) {
        self.unindexed.insert(word.id);
        self.words.insert(word.id, word);
        self.dirty = true;
    }

    fn evict(&mut self, word: WordId) -> Option<VisualWord> {
        let w = self.words.remove(&word)?;
        if !self.unindexed.remove(&word) {
            if let Some(f) = self.forest.as_mut() {
                if f.remove(word) {
                    self.tombstones += 1;
                }
            }
        }
        self.dirty = true;
        Some(w)
    }

    /// Quantizes an image's descriptors for a fresh location and references
    /// the resulting words from it. Descriptors are matched against the words
    /// resident before this image; words created by the image itself are not
    /// candidates for its other descriptors.
    pub fn quantize(
        &mut self,
        set: &DescriptorSet,
        location: LocationId,
    ) -> Result<Signature, DictionaryError> {
        for d in &set.descriptors {
            self.check_dim(d)?;
        }
        let matches: Vec<Option<WordId>> = set
            .descriptors
            .iter()
            .map(|d| self.matching_word(d.values()))
            .collect();
        let mut signature = Signature::new();
        for (d, matched) in set.descriptors.iter().zip(matches) {
            let word = matched.unwrap_or_else(|| {
                let id = self.next_id;
                self.next_id += 1;
                self.insert_word(VisualWord::new(id, d.clone()));
                id
            });
            *self
                .words
                .get_mut(&word)
                .expect("resident")
                .refs
                .entry(location)
                .or_default() += 1;
            signature.push(word);
        }
        Ok(signature)
    }

    /// References every word of `signature` from `location`.
    pub fn add_refs(
        &mut self,
        location: LocationId,
        signature: &Signature,
    ) -> Result<(), DictionaryError> {
        if let Some(word) = signature.word_ids().find(|w| !self.words.contains_key(w)) {
            return Err(DictionaryError::UnknownWord { word });
        }
        for (w, m) in signature.iter() {
            *self
                .words
                .get_mut(&w)
                .expect("checked above")
                .refs
                .entry(location)
                .or_default() += m;
        }
        Ok(())
    }

    /// Drops the references `location` holds through `signature`. Words left
    /// without references are evicted and returned in id order.
    pub fn remove_location_refs(
        &mut self,
        location: LocationId,
        signature: &Signature,
    ) -> Result<Vec<VisualWord>, DictionaryError> {
        for (w, m) in signature.iter() {
            let word = self
                .words
                .get(&w)
                .ok_or(DictionaryError::UnknownWord { word: w })?;
            if word.refs.get(&location).copied().unwrap_or(0) < m {
                return Err(DictionaryError::MissingRef { word: w, location });
            }
        }
        let mut orphans = Vec::new();
        for (w, m) in signature.iter() {
            let word = self.words.get_mut(&w).expect("checked above");
            let count = word.refs.get_mut(&location).expect("checked above");
            *count -= m;
            if *count == 0 {
                word.refs.remove(&location);
            }
            if word.refs.is_empty() {
                orphans.push(self.evict(w).expect("resident"));
            }
        }
        Ok(orphans)
    }

    /// Moves the references of `from` onto `to` for the words of `signature`.
    pub fn move_refs(
        &mut self,
        from: LocationId,
        to: LocationId,
        signature: &Signature,
    ) -> Result<(), DictionaryError> {
        for (w, m) in signature.iter() {
            let word = self
                .words
                .get(&w)
                .ok_or(DictionaryError::UnknownWord { word: w })?;
            if word.refs.get(&from).copied().unwrap_or(0) < m {
                return Err(DictionaryError::MissingRef { word: w, location: from });
            }
        }
        for (w, m) in signature.iter() {
            let refs = &mut self.words.get_mut(&w).expect("checked above").refs;
            let count = refs.get_mut(&from).expect("checked above");
            *count -= m;
            if *count == 0 {
                refs.remove(&from);
            }
            *refs.entry(to).or_default() += m;
        }
        Ok(())
    }

    /// Brings words of a retrieved location back. A word still resident maps
    /// to itself; a word matching a resident word maps onto it and is
    /// dropped for good; any other word is reinserted under its own id.
    /// Reinserted words have no references until the caller adds them.
    pub fn reconcile_words(
        &mut self,
        old_words: Vec<VisualWord>,
    ) -> Result<BTreeMap<WordId, WordId>, DictionaryError> {
        for w in &old_words {
            if !self.words.contains_key(&w.id) {
                self.check_dim(&w.descriptor)?;
            }
        }
        let mut mapping = BTreeMap::new();
        for w in old_words {
            if mapping.contains_key(&w.id) {
                continue;
            }
            if self.words.contains_key(&w.id) {
                mapping.insert(w.id, w.id);
                continue;
            }
            match self.matching_word(w.descriptor.values()) {
                Some(resident) => {
                    mapping.insert(w.id, resident);
                }
                None => {
                    mapping.insert(w.id, w.id);
                    self.next_id = self.next_id.max(w.id + 1);
                    self.insert_word(VisualWord::new(w.id, w.descriptor));
                }
            }
        }
        Ok(mapping)
    }

    /// Rebuilds the forest when it has gone stale, or switches between the
    /// forest and the exact scan when the dictionary crosses `exact_below`.
    /// Returns whether a rebuild happened.
    pub fn maintain_index(&mut self) -> bool {
        if !self.dirty {
            return false;
        }
        let wants_forest = self.words.len() >= self.params.exact_below;
        let stale = match &self.forest {
            None => wants_forest,
            Some(f) => {
                let limit = (f.len() as f32 * self.params.stale_fraction) as usize;
                !wants_forest || self.unindexed.len() > limit || self.tombstones > limit
            }
        };
        if stale {
            self.rebuild_index();
        }
        stale
    }

    /// Rebuilds the search structure from the resident words.
    pub fn rebuild_index(&mut self) {
        self.dirty = false;
        self.tombstones = 0;
        if self.words.len() < self.params.exact_below || self.dim.is_none() {
            self.forest = None;
            self.unindexed = self.words.keys().copied().collect();
            return;
        }
        let params = ForestParams {
            trees: self.params.trees,
            checks: self.params.checks,
            leaf_size: self.params.leaf_size,
            seed: self.params.seed,
        };
        self.forest = Some(KdForest::build(
            self.dim.expect("checked above"),
            self.words
                .values()
                .map(|w| (w.id, w.descriptor.values())),
            &params,
        ));
        self.unindexed.clear();
    }

    /// Words currently searchable, by id.
    pub fn indexed_ids(&self) -> BTreeSet<WordId> {
        let mut ids: BTreeSet<WordId> = self.unindexed.clone();
        if let Some(f) = &self.forest {
            ids.extend(f.live_ids());
        }
        ids
    }

    pub fn uses_forest(&self) -> bool {
        self.forest.is_some()
    }

    /// Every `(word, location) -> multiplicity` reference.
    pub fn reference_multiset(&self) -> BTreeMap<(WordId, LocationId), u32> {
        self.words
            .values()
            .flat_map(|w| w.refs.iter().map(move |(&l, &m)| ((w.id, l), m)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(v: &[f32]) -> Descriptor {
        Descriptor::new(v.to_vec()).unwrap()
    }

    fn set(rows: &[&[f32]]) -> DescriptorSet {
        DescriptorSet::new(0, rows.iter().map(|r| desc(r)).collect(), 0.0)
    }

    fn dict() -> Dictionary {
        Dictionary::new(0.8, IndexParams::default())
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DescriptorSet {
        DescriptorSet::new(
            0,
            (0..n)
                .map(|_| desc(&(0..dim).map(|_| rng.random::<f32>()).collect::<Vec<_>>()))
                .collect(),
            0.0,
        )
    }

    #[test]
    fn empty_dictionary_creates_words() {
        let mut d = dict();
        let s = d
            .quantize(&set(&[&[0.0, 0.0], &[5.0, 5.0], &[-5.0, 3.0]]), 1)
            .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.distinct(), 3);
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn requantizing_same_set_reuses_words() {
        let mut d = dict();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = random_set(&mut rng, 20, 8);
        let a = d.quantize(&ds, 1).unwrap();
        let before = d.len();
        let b = d.quantize(&ds, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(d.len(), before);
        assert_eq!(d.get(a.word_ids().next().unwrap()).unwrap().refs().len(), 2);
    }

    #[test]
    fn single_word_dictionary_needs_exact_hit() {
        let mut d = dict();
        d.quantize(&set(&[&[0.0, 0.0]]), 1).unwrap();
        // no second neighbour: only a zero-distance hit matches
        let s = d.quantize(&set(&[&[0.1, 0.0]]), 2).unwrap();
        assert_eq!(d.len(), 2);
        assert!(s.contains(1));
        let s = d.quantize(&set(&[&[0.0, 0.0]]), 3).unwrap();
        assert!(s.contains(0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut d = dict();
        d.quantize(&set(&[&[0.0, 0.0]]), 1).unwrap();
        assert_eq!(
            d.quantize(&set(&[&[0.0, 0.0, 0.0]]), 2),
            Err(DictionaryError::DimensionMismatch { expected: 2, found: 3 })
        );
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn quantize_matches_linear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = dict();
        for loc in 0..30 {
            let ds = random_set(&mut rng, 10, 6);
            let snapshot: Vec<(WordId, Vec<f32>)> = d
                .words()
                .map(|w| (w.id, w.descriptor.values().to_vec()))
                .collect();
            let sig = d.quantize(&ds, loc).unwrap();
            assert_eq!(sig.len(), ds.len());
            for w in sig.word_ids() {
                assert!(d.contains(w));
            }
            // First descriptor: check against a brute-force scan of the
            // dictionary as it was before quantizing.
            let q = ds.descriptors[0].values();
            let mut dists: Vec<(f32, WordId)> = snapshot
                .iter()
                .map(|(id, v)| (crate::ingest::squared_distance(q, v).sqrt(), *id))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect_match = dists.len() >= 2 && dists[0].0 / dists[1].0 < 0.8;
            let created_first = snapshot.iter().map(|(id, _)| id + 1).max().unwrap_or(0);
            let expected = if expect_match || dists.first().is_some_and(|d| d.0 == 0.0) {
                dists[0].1
            } else {
                created_first
            };
            assert!(sig.contains(expected), "loc {loc}: expected word {expected}");
        }
    }

    #[test]
    fn orphans_on_last_reference() {
        let mut d = dict();
        let s1 = d.quantize(&set(&[&[0.0, 0.0], &[9.0, 9.0]]), 1).unwrap();
        let orphans = d.remove_location_refs(1, &s1).unwrap();
        assert_eq!(orphans.iter().map(|w| w.id).collect::<Vec<_>>(), vec![0, 1]);
        assert!(d.is_empty());
        assert!(d.indexed_ids().is_empty());
    }

    #[test]
    fn shared_word_survives() {
        let mut d = dict();
        let ds = set(&[&[0.0, 0.0], &[9.0, 9.0]]);
        let s1 = d.quantize(&ds, 1).unwrap();
        d.quantize(&ds, 2).unwrap();
        assert!(d.remove_location_refs(1, &s1).unwrap().is_empty());
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn missing_reference_is_reported() {
        let mut d = dict();
        let s1 = d.quantize(&set(&[&[0.0, 0.0]]), 1).unwrap();
        assert_eq!(
            d.remove_location_refs(2, &s1),
            Err(DictionaryError::MissingRef { word: 0, location: 2 })
        );
        assert_eq!(
            d.remove_location_refs(1, &Signature::from_iter([42u64])),
            Err(DictionaryError::UnknownWord { word: 42 })
        );
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn orphan_set_matches_reference_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = dict();
        let base = random_set(&mut rng, 40, 4);
        let mut sigs = BTreeMap::new();
        for loc in 0..12u64 {
            let picks: Vec<&[f32]> = (0..8)
                .map(|_| base.descriptors[rng.random_range(0..40)].values())
                .collect();
            sigs.insert(loc, d.quantize(&set(&picks), loc).unwrap());
        }
        let mut live: BTreeMap<u64, Signature> = sigs.clone();
        for loc in [3u64, 7, 0, 11, 5] {
            let sig = live.remove(&loc).unwrap();
            let orphans: BTreeSet<WordId> =
                d.remove_location_refs(loc, &sig).unwrap().into_iter().map(|w| w.id).collect();
            let still: BTreeSet<WordId> = live.values().flat_map(|s| s.word_ids()).collect();
            let expected: BTreeSet<WordId> = sig.word_ids().filter(|w| !still.contains(w)).collect();
            assert_eq!(orphans, expected);
            assert_eq!(d.indexed_ids(), d.words().map(|w| w.id).collect());
        }
    }

    #[test]
    fn reconcile_cases() {
        let mut d = dict();
        d.quantize(&set(&[&[0.0, 0.0], &[10.0, 0.0]]), 1).unwrap();
        let resident = d.get(0).unwrap().clone();
        let twin = VisualWord::new(50, desc(&[10.0, 0.0]));
        let far = VisualWord::new(60, desc(&[5.0, 5.0]));
        let mapping = d.reconcile_words(vec![resident, twin, far]).unwrap();
        assert_eq!(mapping[&0], 0);
        assert_eq!(mapping[&50], 1);
        assert_eq!(mapping[&60], 60);
        assert!(!d.contains(50));
        assert!(d.contains(60));
        assert_eq!(d.next_word_id(), 61);
    }

    #[test]
    fn reconcile_far_word_is_reinserted_by_linear_check() {
        let mut d = dict();
        d.quantize(&set(&[&[0.0, 0.0], &[1.0, 0.0]]), 1).unwrap();
        let q = [0.6f32, 0.0];
        // d1 = 0.4 (to word 1), d2 = 0.6 (to word 0): ratio 0.67 < 0.8 -> match
        let m = d.reconcile_words(vec![VisualWord::new(9, desc(&q))]).unwrap();
        assert_eq!(m[&9], 1);
        // d1 = 0.5, d2 = 0.5: ratio 1 -> no match, reinserted
        let m = d.reconcile_words(vec![VisualWord::new(10, desc(&[0.5, 0.0]))]).unwrap();
        assert_eq!(m[&10], 10);
        assert!(d.contains(10));
    }

    #[test]
    fn rebuild_keeps_exact_membership() {
        let mut d = Dictionary::new(
            0.8,
            IndexParams {
                exact_below: 10,
                ..IndexParams::default()
            },
        );
        d.rebuild_index();
        assert_eq!(d.nearest2(&[0.0, 0.0]), Nearest2::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = random_set(&mut rng, 64, 2);
        let s = d.quantize(&ds, 1).unwrap();
        d.rebuild_index();
        assert!(d.uses_forest());
        assert_eq!(d.indexed_ids(), d.words().map(|w| w.id).collect());
        let w = d.words().nth(5).unwrap().clone();
        assert_eq!(d.nearest2(w.descriptor.values()).first.unwrap().0, w.id);
        d.remove_location_refs(1, &s).unwrap();
        assert!(d.indexed_ids().is_empty());
    }
}
