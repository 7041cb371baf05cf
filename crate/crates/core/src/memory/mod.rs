//! Locations and the three memory tiers.
//!
//! New locations enter the short-term memory (STM), a fixed-size queue that
//! the filter does not look at. Locations leaving the STM join the working
//! memory (WM), the filter's state space. The long-term memory (LTM) lives in
//! the [`LtmStore`]; only ids of LTM locations stay in RAM, together with the
//! graph, which covers all three tiers.

mod signature;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::dictionary::{Dictionary, DictionaryError, VisualWord};
use crate::graph::LocationGraph;
use crate::ingest::{Descriptor, DescriptorSet};
use crate::store::{LtmStore, StoreError, StoredLocation, StoredWord};
use crate::{ImageId, LocationId, WordId};

pub use signature::{similarity, Signature};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("location {0} is not in working memory")]
    NotInWorkingMemory(LocationId),
    #[error("unknown location {0}")]
    UnknownLocation(LocationId),
    #[error("transfer requested but no long-term store is attached")]
    NoStore,
    #[error("memory invariant violated: {0}")]
    Invariant(String),
}

/// A node of the map.
#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub id: LocationId,
    pub signature: Signature,
    pub weight: u32,
    /// Images this location stands for, accumulated through merges.
    pub member_images: Vec<ImageId>,
    /// Iteration that created the location.
    pub created_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeKind {
    Rehearsal,
    LoopClosure,
}

/// One weight transfer: `into` gained `from`'s weight plus one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergeEvent {
    pub kind: MergeKind,
    pub into: LocationId,
    pub from: LocationId,
}

#[derive(Clone, Debug)]
pub struct MemoryConfig {
    pub stm_size: usize,
    pub t_rehearsal: f64,
    /// Graph radius of a hypothesis neighbourhood.
    pub neighborhood: usize,
    pub max_retrieved: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            stm_size: 25,
            t_rehearsal: 0.2,
            neighborhood: 4,
            max_retrieved: 2,
        }
    }
}

/// Which tier a live location is in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Stm,
    Wm,
    Ltm,
}

#[derive(Debug)]
pub struct Memory {
    config: MemoryConfig,
    dictionary: Dictionary,
    store: Option<LtmStore>,
    /// STM and WM locations.
    locations: BTreeMap<LocationId, Location>,
    stm: VecDeque<LocationId>,
    wm: BTreeSet<LocationId>,
    ltm: BTreeSet<LocationId>,
    graph: LocationGraph,
    merged_pending: BTreeSet<LocationId>,
    retrieved: BTreeSet<LocationId>,
    next_id: LocationId,
    last: Option<LocationId>,
    merges: Vec<MergeEvent>,
    created: u64,
    deleted: u64,
}

impl Memory {
    pub fn new(config: MemoryConfig, dictionary: Dictionary, store: Option<LtmStore>) -> Self {
        Self {
            config,
            dictionary,
            store,
            locations: BTreeMap::new(),
            stm: VecDeque::new(),
            wm: BTreeSet::new(),
            ltm: BTreeSet::new(),
            graph: LocationGraph::new(),
            merged_pending: BTreeSet::new(),
            retrieved: BTreeSet::new(),
            next_id: 0,
            last: None,
            merges: Vec::new(),
            created: 0,
            deleted: 0,
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn dictionary_mut(&mut self) -> &mut Dictionary {
        &mut self.dictionary
    }

    pub fn store(&self) -> Option<&LtmStore> {
        self.store.as_ref()
    }

    /// Detaches the store, e.g. to close it explicitly.
    pub fn take_store(&mut self) -> Option<LtmStore> {
        self.store.take()
    }

    pub fn graph(&self) -> &LocationGraph {
        &self.graph
    }

    pub fn location(&self, id: LocationId) -> Option<&Location> {
        self.locations.get(&id)
    }

    /// STM ids, oldest first.
    pub fn stm(&self) -> impl Iterator<Item = LocationId> + '_ {
        self.stm.iter().copied()
    }

    pub fn stm_len(&self) -> usize {
        self.stm.len()
    }

    pub fn wm(&self) -> &BTreeSet<LocationId> {
        &self.wm
    }

    pub fn ltm(&self) -> &BTreeSet<LocationId> {
        &self.ltm
    }

    pub fn tier(&self, id: LocationId) -> Option<Tier> {
        if self.wm.contains(&id) {
            Some(Tier::Wm)
        } else if self.ltm.contains(&id) {
            Some(Tier::Ltm)
        } else if self.locations.contains_key(&id) {
            Some(Tier::Stm)
        } else {
            None
        }
    }

    pub fn merged_pending(&self) -> &BTreeSet<LocationId> {
        &self.merged_pending
    }

    pub fn retrieved_this_iteration(&self) -> &BTreeSet<LocationId> {
        &self.retrieved
    }

    pub fn merges(&self) -> &[MergeEvent] {
        &self.merges
    }

    pub fn created_count(&self) -> u64 {
        self.created
    }

    pub fn deleted_count(&self) -> u64 {
        self.deleted
    }

    /// WM locations with their signatures, in id order.
    pub fn wm_signatures(&self) -> Vec<(LocationId, &Signature)> {
        self.wm
            .iter()
            .map(|id| (*id, &self.locations[id].signature))
            .collect()
    }

    /// Starts a new iteration: last iteration's retrievals become
    /// transferable again.
    pub fn begin_iteration(&mut self) {
        self.retrieved.clear();
    }

    /// Quantizes `set` into a fresh location linked to the previous one.
    pub fn create_location(
        &mut self,
        set: &DescriptorSet,
        iteration: u64,
    ) -> Result<LocationId, MemoryError> {
        let id = self.next_id;
        let signature = self.dictionary.quantize(set, id)?;
        self.next_id += 1;
        self.created += 1;
        self.locations.insert(
            id,
            Location {
                id,
                signature,
                weight: 0,
                member_images: vec![set.image_id],
                created_at: iteration,
            },
        );
        self.graph.add_node(id);
        if let Some(prev) = self.last {
            if self.graph.contains(prev) {
                self.graph.link(id, prev);
            }
        }
        self.last = Some(id);
        Ok(id)
    }

    /// Merges into `lt` the most recent STM location at least
    /// `t_rehearsal`-similar to it. `lt` takes over that location's
    /// signature, links and images; the other location is deleted.
    pub fn rehearse(&mut self, lt: LocationId) -> Result<Option<LocationId>, MemoryError> {
        let current = self
            .locations
            .get(&lt)
            .ok_or(MemoryError::UnknownLocation(lt))?;
        let found = self.stm.iter().rev().copied().find(|c| {
            *c != lt && similarity(&current.signature, &self.locations[c].signature) >= self.config.t_rehearsal
        });
        let Some(c) = found else {
            return Ok(None);
        };

        let old_sig = current.signature.clone();
        // The words of lt that only lt used were created for this frame.
        let orphans = self.dictionary.remove_location_refs(lt, &old_sig)?;
        self.dispose_orphans(orphans)?;
        let absorbed = self.locations.remove(&c).expect("STM member is resident");
        self.dictionary.move_refs(c, lt, &absorbed.signature)?;
        self.stm.retain(|&x| x != c);
        self.graph.absorb(c, lt);

        let target = self.locations.get_mut(&lt).expect("checked above");
        target.signature = absorbed.signature;
        target.weight += absorbed.weight + 1;
        let mut images = absorbed.member_images;
        images.append(&mut target.member_images);
        target.member_images = images;

        self.merges.push(MergeEvent {
            kind: MergeKind::Rehearsal,
            into: lt,
            from: c,
        });
        self.deleted += 1;
        Ok(Some(c))
    }

    /// Appends `id` to the STM and promotes the oldest member when over
    /// capacity.
    pub fn push_stm(&mut self, id: LocationId) -> Option<LocationId> {
        self.stm.push_back(id);
        self.promote_oldest()
    }

    /// Moves the oldest STM location to WM if the STM is over capacity.
    pub fn promote_oldest(&mut self) -> Option<LocationId> {
        if self.stm.len() <= self.config.stm_size {
            return None;
        }
        let id = self.stm.pop_front()?;
        self.wm.insert(id);
        Some(id)
    }

    /// Accepts a loop closure between `lt` and WM location `li`. `li` stays
    /// in WM until it leaves the neighbourhood of the top hypothesis.
    pub fn merge_loop_closure(&mut self, lt: LocationId, li: LocationId) -> Result<(), MemoryError> {
        if !self.wm.contains(&li) {
            return Err(MemoryError::NotInWorkingMemory(li));
        }
        if !self.locations.contains_key(&lt) {
            return Err(MemoryError::UnknownLocation(lt));
        }
        let (w, images) = {
            let l = &self.locations[&li];
            (l.weight, l.member_images.clone())
        };
        let target = self.locations.get_mut(&lt).expect("checked above");
        target.weight += w + 1;
        for img in images {
            if !target.member_images.contains(&img) {
                target.member_images.push(img);
            }
        }
        self.graph.copy_links(li, lt);
        self.merged_pending.insert(li);
        self.merges.push(MergeEvent {
            kind: MergeKind::LoopClosure,
            into: lt,
            from: li,
        });
        Ok(())
    }

    /// Deletes merged-pending locations that are no longer within the
    /// neighbourhood of `top`, the highest hypothesis (all of them when
    /// there is none).
    pub fn delete_stale_merged(
        &mut self,
        top: Option<LocationId>,
    ) -> Result<Vec<LocationId>, MemoryError> {
        let near: BTreeSet<LocationId> = match top {
            Some(t) => self
                .graph
                .within(t, self.config.neighborhood)
                .into_iter()
                .map(|(id, _)| id)
                .collect(),
            None => BTreeSet::new(),
        };
        let stale: Vec<LocationId> = self
            .merged_pending
            .iter()
            .copied()
            .filter(|id| !near.contains(id))
            .collect();
        for &id in &stale {
            self.merged_pending.remove(&id);
            self.wm.remove(&id);
            let loc = self.locations.remove(&id).expect("merged-pending is in WM");
            let orphans = self.dictionary.remove_location_refs(id, &loc.signature)?;
            self.dispose_orphans(orphans)?;
            self.graph.remove_node(id);
            self.deleted += 1;
        }
        Ok(stale)
    }

    /// Words dropped from the dictionary outside a transfer. Those some LTM
    /// location still uses are kept in the store's word table.
    fn dispose_orphans(&mut self, orphans: Vec<VisualWord>) -> Result<(), MemoryError> {
        let Some(store) = self.store.as_mut() else {
            return Ok(());
        };
        let keep: Vec<StoredWord> = orphans
            .into_iter()
            .filter(|w| store.is_word_referenced(w.id))
            .map(|w| StoredWord {
                id: w.id,
                descriptor: w.descriptor.into_inner(),
            })
            .collect();
        if !keep.is_empty() {
            store.persist_words(keep)?;
        }
        Ok(())
    }

    /// Locations that must stay in WM this iteration.
    fn transfer_protected(&self, top: Option<LocationId>) -> BTreeSet<LocationId> {
        let mut protected: BTreeSet<LocationId> =
            self.retrieved.union(&self.merged_pending).copied().collect();
        if let Some(t) = top {
            protected.extend(
                self.graph
                    .within(t, self.config.neighborhood)
                    .into_iter()
                    .map(|(id, _)| id),
            );
        }
        protected
    }

    /// Picks WM locations to move to LTM: lowest weight first, oldest first
    /// among equals, until the words they would take out of the dictionary
    /// reach `words_added`. At least one location is picked when any is
    /// eligible.
    pub fn select_transfer_victims(
        &self,
        words_added: usize,
        top: Option<LocationId>,
    ) -> Vec<LocationId> {
        let protected = self.transfer_protected(top);
        let mut eligible: Vec<(u32, LocationId)> = self
            .wm
            .iter()
            .filter(|id| !protected.contains(id))
            .map(|id| (self.locations[id].weight, *id))
            .collect();
        eligible.sort_unstable();

        let mut victims = Vec::new();
        let mut chosen = BTreeSet::new();
        let mut removed_words = 0usize;
        for (_, id) in eligible {
            chosen.insert(id);
            removed_words += self.locations[&id]
                .signature
                .word_ids()
                .filter(|w| {
                    self.dictionary
                        .get(*w)
                        .is_some_and(|word| word.refs().keys().all(|l| chosen.contains(l)))
                })
                .count();
            victims.push(id);
            if removed_words >= words_added {
                return victims;
            }
        }
        if removed_words < words_added {
            log::warn!(
                "transfer quota not met: {removed_words} of {words_added} words from {} locations",
                victims.len()
            );
        }
        victims
    }

    /// Moves `victims` from WM to the long-term store. Returns the number of
    /// words that left the dictionary.
    pub fn transfer(&mut self, victims: &[LocationId]) -> Result<usize, MemoryError> {
        if victims.is_empty() {
            return Ok(0);
        }
        if self.store.is_none() {
            return Err(MemoryError::NoStore);
        }
        for id in victims {
            if !self.wm.contains(id) {
                return Err(MemoryError::NotInWorkingMemory(*id));
            }
            if self.retrieved.contains(id) {
                return Err(MemoryError::Invariant(format!(
                    "location {id} was retrieved this iteration and cannot be transferred"
                )));
            }
        }
        let mut words = 0;
        for &id in victims {
            let loc = self.locations.remove(&id).expect("WM member is resident");
            self.wm.remove(&id);
            let orphans = self.dictionary.remove_location_refs(id, &loc.signature)?;
            words += orphans.len();
            let record = StoredLocation {
                id,
                weight: loc.weight,
                signature: loc.signature.iter().collect(),
                neighbor_links: self.graph.neighbors(id).collect(),
                member_images: loc.member_images,
                created_at: loc.created_at,
                orphaned_words: orphans
                    .into_iter()
                    .map(|w| StoredWord {
                        id: w.id,
                        descriptor: w.descriptor.into_inner(),
                    })
                    .collect(),
            };
            self.store.as_mut().expect("checked above").persist(record)?;
            self.ltm.insert(id);
        }
        Ok(words)
    }

    /// LTM locations to bring back around `top`: nearest first, at most
    /// `max_retrieved`.
    pub fn retrieval_candidates(&self, top: LocationId) -> Vec<LocationId> {
        self.graph
            .within(top, self.config.neighborhood)
            .into_iter()
            .filter(|(id, _)| self.ltm.contains(id))
            .take(self.config.max_retrieved)
            .map(|(id, _)| id)
            .collect()
    }

    /// Brings LTM neighbours of `top` back into WM. A location that cannot
    /// be read is skipped with a warning.
    pub fn retrieve(&mut self, top: LocationId) -> Result<Vec<LocationId>, MemoryError> {
        let mut retrieved = Vec::new();
        for id in self.retrieval_candidates(top) {
            match self.load_for_retrieval(id) {
                Ok((record, words)) => {
                    self.reinstate(record, words)?;
                    retrieved.push(id);
                }
                Err(e) => log::warn!("retrieval of location {id} skipped: {e}"),
            }
        }
        Ok(retrieved)
    }

    /// Reads a stored location and the descriptors of its words that are
    /// not resident.
    fn load_for_retrieval(
        &self,
        id: LocationId,
    ) -> Result<(StoredLocation, Vec<VisualWord>), MemoryError> {
        let store = self.store.as_ref().ok_or(MemoryError::NoStore)?;
        let record = store.fetch(id)?.ok_or(MemoryError::UnknownLocation(id))?;
        let carried: BTreeMap<WordId, &StoredWord> =
            record.orphaned_words.iter().map(|w| (w.id, w)).collect();
        let mut words = Vec::new();
        for &(w, _) in &record.signature {
            if self.dictionary.contains(w) {
                continue;
            }
            let stored = match carried.get(&w) {
                Some(s) => Some((*s).clone()),
                None => store.fetch_word(w)?,
            };
            match stored {
                Some(s) => {
                    let descriptor = Descriptor::new(s.descriptor).map_err(|e| {
                        MemoryError::Invariant(format!("stored word {w}: {e}"))
                    })?;
                    words.push(VisualWord::new(w, descriptor));
                }
                None => log::warn!("word {w} of location {id} is missing from the store"),
            }
        }
        Ok((record, words))
    }

    fn reinstate(
        &mut self,
        record: StoredLocation,
        words: Vec<VisualWord>,
    ) -> Result<(), MemoryError> {
        let id = record.id;
        let known: BTreeSet<WordId> = words.iter().map(|w| w.id).collect();
        let mapping = self.dictionary.reconcile_words(words)?;
        let store = self.store.as_mut().ok_or(MemoryError::NoStore)?;
        store.remove(id)?;
        let replaced: BTreeMap<WordId, WordId> = mapping
            .iter()
            .filter(|(old, new)| old != new)
            .map(|(&o, &n)| (o, n))
            .collect();
        if !replaced.is_empty() {
            store.rewrite_word_refs(&replaced)?;
            store.forget_words(&replaced.keys().copied().collect::<Vec<_>>())?;
        }
        let signature: Signature = record
            .signature
            .iter()
            .filter(|(w, _)| self.dictionary.contains(*w) || known.contains(w))
            .map(|&(w, m)| (mapping.get(&w).copied().unwrap_or(w), m))
            .collect();
        self.dictionary.add_refs(id, &signature)?;
        self.locations.insert(
            id,
            Location {
                id,
                signature,
                weight: record.weight,
                member_images: record.member_images,
                created_at: record.created_at,
            },
        );
        self.ltm.remove(&id);
        self.wm.insert(id);
        self.retrieved.insert(id);
        Ok(())
    }

    /// Verifies the structural invariants of the tiers, the graph and the
    /// dictionary references.
    pub fn check_invariants(&self) -> Result<(), MemoryError> {
        let fail = |msg: String| Err(MemoryError::Invariant(msg));
        if self.stm.len() > self.config.stm_size {
            return fail(format!("STM holds {} > {}", self.stm.len(), self.config.stm_size));
        }
        let stm: BTreeSet<LocationId> = self.stm.iter().copied().collect();
        if stm.len() != self.stm.len() {
            return fail("duplicate STM entry".into());
        }
        if let Some(id) = stm.intersection(&self.wm).next() {
            return fail(format!("location {id} in both STM and WM"));
        }
        let resident: BTreeSet<LocationId> = stm.union(&self.wm).copied().collect();
        if let Some(id) = resident.intersection(&self.ltm).next() {
            return fail(format!("location {id} both resident and in LTM"));
        }
        if resident.len() != self.locations.len() || !resident.iter().all(|id| self.locations.contains_key(id)) {
            return fail("resident locations differ from STM plus WM".into());
        }
        if let Some(store) = &self.store {
            let stored: BTreeSet<LocationId> = store.location_ids().collect();
            if stored != self.ltm {
                return fail("LTM ids differ from the store contents".into());
            }
        }
        let live = (resident.len() + self.ltm.len()) as u64;
        if self.created - self.deleted != live {
            return fail(format!(
                "created {} - deleted {} != live {live}",
                self.created, self.deleted
            ));
        }
        let nodes: BTreeSet<LocationId> = self.graph.nodes().collect();
        let all: BTreeSet<LocationId> = resident.union(&self.ltm).copied().collect();
        if nodes != all {
            return fail("graph nodes differ from live locations".into());
        }
        if !self.graph.is_symmetric() {
            return fail("asymmetric link".into());
        }
        if !self.retrieved.is_subset(&self.wm) || !self.merged_pending.is_subset(&self.wm) {
            return fail("retrieved or merged-pending location outside WM".into());
        }
        let mut expected: BTreeMap<(WordId, LocationId), u32> = BTreeMap::new();
        for loc in self.locations.values() {
            for (w, m) in loc.signature.iter() {
                expected.insert((w, loc.id), m);
            }
        }
        if expected != self.dictionary.reference_multiset() {
            return fail("signatures and word references disagree".into());
        }
        if let Some(w) = self.dictionary.words().find(|w| w.is_orphan()) {
            return fail(format!("resident word {} has no references", w.id));
        }
        let words: BTreeSet<WordId> = self.dictionary.words().map(|w| w.id).collect();
        if words != self.dictionary.indexed_ids() {
            return fail("index does not cover exactly the resident words".into());
        }
        Ok(())
    }
}
