//! Long-term memory database.
//!
//! A single append-only file: the header (`LGLT` magic, `u32` version) is
//! followed by frames `[u32 payload length][u32 crc32][payload]`, each payload
//! a sequence of length-prefixed bincode [`Op`]s. A frame is applied whole or
//! not at all, which makes multi-record rewrites atomic; a torn frame at the
//! tail is dropped when the file is reopened.
//!
//! Writes go through a bounded queue to a background thread. Until a write
//! reaches the file it stays in a pending table that reads consult first, so
//! a record can be fetched right after it was persisted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{ImageId, LocationId, WordId};

const MAGIC: &[u8; 4] = b"LGLT";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not an LTM database (bad magic)")]
    BadMagic,
    #[error("unsupported LTM database version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt record at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("background writer failed: {0}")]
    Writer(String),
    #[error("store is closed")]
    Closed,
}

/// A word that left the dictionary together with a location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredWord {
    pub id: WordId,
    pub descriptor: Vec<f32>,
}

/// A location as kept in long-term memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredLocation {
    pub id: LocationId,
    pub weight: u32,
    /// `(word, multiplicity)` pairs in increasing word order.
    pub signature: Vec<(WordId, u32)>,
    pub neighbor_links: Vec<LocationId>,
    pub member_images: Vec<ImageId>,
    pub created_at: u64,
    /// Words orphaned when this location was transferred.
    pub orphaned_words: Vec<StoredWord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Op {
    PutLocation(StoredLocation),
    DeleteLocation(LocationId),
    PutWord(StoredWord),
    DeleteWord(WordId),
}

#[derive(Clone, Debug)]
pub struct StoreOptions {
    pub queue_capacity: usize,
    /// Artificial delay before each batch is written, to simulate a slow disk.
    pub flush_delay: Duration,
    /// Call `fsync` after each batch.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            queue_capacity: 128,
            flush_delay: Duration::ZERO,
            sync: false,
        }
    }
}

enum Command {
    Write { seq: u64, ops: Vec<Op> },
    Flush(Sender<()>),
    Shutdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Key {
    Location(LocationId),
    Word(WordId),
}

impl Op {
    fn key(&self) -> Key {
        match self {
            Op::PutLocation(l) => Key::Location(l.id),
            Op::DeleteLocation(id) => Key::Location(*id),
            Op::PutWord(w) => Key::Word(w.id),
            Op::DeleteWord(id) => Key::Word(*id),
        }
    }
}

/// State shared with the writer thread.
#[derive(Default)]
struct Shared {
    /// Queued ops not yet on disk, with the sequence number that queued them.
    pending: HashMap<Key, (u64, Op)>,
    /// On-disk position of the latest op for each key.
    offsets: HashMap<Key, (u64, u32)>,
    error: Option<String>,
}

/// Enqueue latency statistics.
#[derive(Clone, Copy, Debug, Default)]
pub struct EnqueueStats {
    pub count: u64,
    pub max: Duration,
    pub total: Duration,
}

pub struct LtmStore {
    path: PathBuf,
    reader: File,
    shared: Arc<Mutex<Shared>>,
    tx: Option<Sender<Command>>,
    writer: Option<JoinHandle<()>>,
    seq: u64,
    locations: BTreeSet<LocationId>,
    words: BTreeSet<WordId>,
    /// Stored locations referencing each word.
    word_refs: BTreeMap<WordId, BTreeSet<LocationId>>,
    stats: EnqueueStats,
}

impl LtmStore {
    /// Opens (or creates) the database at `path`.
    pub fn open(path: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let len = file.metadata()?.len();
        if len == 0 {
            file.write_all(MAGIC)?;
            file.write_all(&VERSION.to_le_bytes())?;
            file.flush()?;
        } else {
            let mut header = [0u8; 8];
            file.seek(SeekFrom::Start(0))?;
            file.read_exact(&mut header).map_err(|_| StoreError::BadMagic)?;
            if &header[..4] != MAGIC {
                return Err(StoreError::BadMagic);
            }
            let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
            if version != VERSION {
                return Err(StoreError::UnsupportedVersion(version));
            }
        }

        let mut shared = Shared::default();
        let valid_end = replay(&file, &mut shared.offsets)?;
        if valid_end < file.metadata()?.len() {
            log::warn!(
                "{}: dropping torn tail after byte {valid_end}",
                path.display()
            );
            file.set_len(valid_end)?;
        }

        let reader = File::open(&path)?;
        let mut store = Self {
            path,
            reader,
            shared: Arc::new(Mutex::new(shared)),
            tx: None,
            writer: None,
            seq: 0,
            locations: BTreeSet::new(),
            words: BTreeSet::new(),
            word_refs: BTreeMap::new(),
            stats: EnqueueStats::default(),
        };
        let keys: Vec<Key> = store.shared.lock().expect("poisoned").offsets.keys().copied().collect();
        for key in keys {
            match key {
                Key::Location(id) => {
                    let loc = store.fetch(id)?.ok_or_else(|| StoreError::Corrupt {
                        offset: 0,
                        reason: format!("location {id} indexed but unreadable"),
                    })?;
                    store.index_location(&loc);
                    store.locations.insert(id);
                }
                Key::Word(id) => {
                    store.words.insert(id);
                }
            }
        }

        let (tx, rx) = bounded(options.queue_capacity.max(1));
        let shared = Arc::clone(&store.shared);
        let writer = std::thread::Builder::new()
            .name("ltm-writer".into())
            .spawn(move || writer_loop(file, rx, shared, options))?;
        store.tx = Some(tx);
        store.writer = Some(writer);
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn contains(&self, id: LocationId) -> bool {
        self.locations.contains(&id)
    }

    pub fn location_ids(&self) -> impl Iterator<Item = LocationId> + '_ {
        self.locations.iter().copied()
    }

    pub fn contains_word(&self, id: WordId) -> bool {
        self.words.contains(&id)
    }

    /// True when some stored location's signature uses `word`.
    pub fn is_word_referenced(&self, word: WordId) -> bool {
        self.word_refs.get(&word).is_some_and(|s| !s.is_empty())
    }

    pub fn enqueue_stats(&self) -> EnqueueStats {
        self.stats
    }

    fn index_location(&mut self, loc: &StoredLocation) {
        for &(w, _) in &loc.signature {
            self.word_refs.entry(w).or_default().insert(loc.id);
        }
    }

    fn unindex_location(&mut self, loc: &StoredLocation) {
        for &(w, _) in &loc.signature {
            if let Some(set) = self.word_refs.get_mut(&w) {
                set.remove(&loc.id);
                if set.is_empty() {
                    self.word_refs.remove(&w);
                }
            }
        }
    }

    fn check_writer(&self) -> Result<(), StoreError> {
        match &self.shared.lock().expect("poisoned").error {
            Some(e) => Err(StoreError::Writer(e.clone())),
            None => Ok(()),
        }
    }

    /// Queues a batch of ops, written to disk as one frame.
    fn enqueue(&mut self, ops: Vec<Op>) -> Result<u64, StoreError> {
        self.check_writer()?;
        if ops.is_empty() {
            return Ok(self.seq);
        }
        let tx = self.tx.as_ref().ok_or(StoreError::Closed)?;
        self.seq += 1;
        let seq = self.seq;
        {
            let mut shared = self.shared.lock().expect("poisoned");
            for op in &ops {
                shared.pending.insert(op.key(), (seq, op.clone()));
            }
        }
        let start = Instant::now();
        tx.send(Command::Write { seq, ops }).map_err(|_| StoreError::Closed)?;
        let waited = start.elapsed();
        self.stats.count += 1;
        self.stats.total += waited;
        self.stats.max = self.stats.max.max(waited);
        Ok(seq)
    }

    /// Queues a location (and the words it carries) for writing. Returns a
    /// ticket that grows with every write.
    pub fn persist(&mut self, loc: StoredLocation) -> Result<u64, StoreError> {
        let mut ops: Vec<Op> = loc
            .orphaned_words
            .iter()
            .cloned()
            .map(Op::PutWord)
            .collect();
        if self.locations.contains(&loc.id) {
            if let Some(old) = self.fetch(loc.id)? {
                self.unindex_location(&old);
            }
        }
        self.index_location(&loc);
        self.locations.insert(loc.id);
        self.words.extend(loc.orphaned_words.iter().map(|w| w.id));
        ops.push(Op::PutLocation(loc));
        self.enqueue(ops)
    }

    /// Stores a standalone word so locations referencing it can be retrieved.
    pub fn persist_words(&mut self, words: Vec<StoredWord>) -> Result<u64, StoreError> {
        self.words.extend(words.iter().map(|w| w.id));
        self.enqueue(words.into_iter().map(Op::PutWord).collect())
    }

    /// Drops a location from the store (it moved back to working memory).
    pub fn remove(&mut self, id: LocationId) -> Result<bool, StoreError> {
        if !self.locations.contains(&id) {
            return Ok(false);
        }
        if let Some(old) = self.fetch(id)? {
            self.unindex_location(&old);
        }
        self.locations.remove(&id);
        self.enqueue(vec![Op::DeleteLocation(id)])?;
        Ok(true)
    }

    /// Permanently forgets words (they were merged into resident words).
    pub fn forget_words(&mut self, ids: &[WordId]) -> Result<(), StoreError> {
        let ops = ids
            .iter()
            .filter(|id| self.words.remove(id))
            .map(|&id| Op::DeleteWord(id))
            .collect();
        self.enqueue(ops).map(|_| ())
    }

    fn read_op(&self, offset: u64, len: u32) -> Result<Op, StoreError> {
        let mut buf = vec![0u8; len as usize];
        self.reader.read_exact_at(&mut buf, offset)?;
        bincode::deserialize(&buf).map_err(|e| StoreError::Corrupt {
            offset,
            reason: e.to_string(),
        })
    }

    fn lookup(&self, key: Key) -> Result<Option<Op>, StoreError> {
        let position = {
            let shared = self.shared.lock().expect("poisoned");
            if let Some((_, op)) = shared.pending.get(&key) {
                return Ok(Some(op.clone()));
            }
            shared.offsets.get(&key).copied()
        };
        match position {
            Some((offset, len)) => self.read_op(offset, len).map(Some),
            None => Ok(None),
        }
    }

    /// Reads a stored location, including writes still in the queue.
    pub fn fetch(&self, id: LocationId) -> Result<Option<StoredLocation>, StoreError> {
        match self.lookup(Key::Location(id))? {
            Some(Op::PutLocation(loc)) => Ok(Some(loc)),
            _ => Ok(None),
        }
    }

    pub fn fetch_word(&self, id: WordId) -> Result<Option<StoredWord>, StoreError> {
        match self.lookup(Key::Word(id))? {
            Some(Op::PutWord(w)) => Ok(Some(w)),
            _ => Ok(None),
        }
    }

    /// Replaces word ids in every stored signature. All touched locations
    /// are written in a single frame. Returns the number of locations
    /// touched.
    pub fn rewrite_word_refs(
        &mut self,
        mapping: &BTreeMap<WordId, WordId>,
    ) -> Result<usize, StoreError> {
        let touched: BTreeSet<LocationId> = mapping
            .iter()
            .filter(|(old, new)| old != new)
            .filter_map(|(old, _)| self.word_refs.get(old))
            .flatten()
            .copied()
            .collect();
        let mut rewritten = Vec::with_capacity(touched.len());
        for &id in &touched {
            let loc = self.fetch(id)?.ok_or_else(|| StoreError::Corrupt {
                offset: 0,
                reason: format!("location {id} indexed but missing"),
            })?;
            rewritten.push(loc);
        }
        let mut ops = Vec::with_capacity(rewritten.len());
        for mut loc in rewritten {
            self.unindex_location(&loc);
            let mut merged: BTreeMap<WordId, u32> = BTreeMap::new();
            for &(w, m) in &loc.signature {
                *merged.entry(mapping.get(&w).copied().unwrap_or(w)).or_default() += m;
            }
            loc.signature = merged.into_iter().collect();
            self.index_location(&loc);
            ops.push(Op::PutLocation(loc));
        }
        self.enqueue(ops)?;
        Ok(touched.len())
    }

    /// Blocks until every queued write has reached the file.
    pub fn flush(&self) -> Result<(), StoreError> {
        let tx = self.tx.as_ref().ok_or(StoreError::Closed)?;
        let (done_tx, done_rx) = bounded(1);
        tx.send(Command::Flush(done_tx)).map_err(|_| StoreError::Closed)?;
        done_rx.recv().map_err(|_| StoreError::Closed)?;
        self.check_writer()
    }

    /// Number of writes not yet on disk.
    pub fn pending_len(&self) -> usize {
        self.shared.lock().expect("poisoned").pending.len()
    }

    /// Flushes and stops the writer.
    pub fn close(mut self) -> Result<(), StoreError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), StoreError> {
        if let Some(tx) = self.tx.take() {
            let _ = tx.send(Command::Shutdown);
        }
        if let Some(handle) = self.writer.take() {
            handle
                .join()
                .map_err(|_| StoreError::Writer("writer thread panicked".into()))?;
        }
        self.check_writer()
    }
}

impl Drop for LtmStore {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::error!("closing {}: {e}", self.path.display());
        }
    }
}

impl std::fmt::Debug for LtmStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LtmStore")
            .field("path", &self.path)
            .field("locations", &self.locations.len())
            .field("words", &self.words.len())
            .finish()
    }
}

/// Scans the frames, filling `offsets`. Returns the end of the last intact
/// frame.
fn replay(file: &File, offsets: &mut HashMap<Key, (u64, u32)>) -> Result<u64, StoreError> {
    let len = file.metadata()?.len();
    let mut pos = HEADER_LEN;
    loop {
        if pos + 8 > len {
            return Ok(pos);
        }
        let mut head = [0u8; 8];
        file.read_exact_at(&mut head, pos)?;
        let payload_len = u32::from_le_bytes(head[..4].try_into().expect("4 bytes")) as u64;
        let crc = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
        if pos + 8 + payload_len > len {
            return Ok(pos);
        }
        let mut payload = vec![0u8; payload_len as usize];
        file.read_exact_at(&mut payload, pos + 8)?;
        if crc32fast::hash(&payload) != crc {
            return Ok(pos);
        }
        let base = pos + 8;
        let mut at = 0usize;
        while at < payload.len() {
            if at + 4 > payload.len() {
                return Err(StoreError::Corrupt {
                    offset: base + at as u64,
                    reason: "op length overruns frame".into(),
                });
            }
            let op_len = u32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes"));
            let start = at + 4;
            let end = start + op_len as usize;
            let op: Op = payload
                .get(start..end)
                .and_then(|b| bincode::deserialize(b).ok())
                .ok_or_else(|| StoreError::Corrupt {
                    offset: base + start as u64,
                    reason: "undecodable op".into(),
                })?;
            match op {
                Op::PutLocation(_) | Op::PutWord(_) => {
                    offsets.insert(op.key(), (base + start as u64, op_len));
                }
                Op::DeleteLocation(_) | Op::DeleteWord(_) => {
                    offsets.remove(&op.key());
                }
            }
            at = end;
        }
        pos = base + payload_len;
    }
}

fn writer_loop(file: File, rx: Receiver<Command>, shared: Arc<Mutex<Shared>>, options: StoreOptions) {
    let mut end = match file.metadata() {
        Ok(m) => m.len(),
        Err(e) => {
            shared.lock().expect("poisoned").error = Some(e.to_string());
            return;
        }
    };
    let mut out = BufWriter::new(file);
    let mut failed = false;
    while let Ok(first) = rx.recv() {
        let mut batch = Vec::new();
        let mut waiters = Vec::new();
        let mut shutdown = false;
        let mut next = Some(first);
        while let Some(cmd) = next.take().or_else(|| rx.try_recv().ok()) {
            match cmd {
                Command::Write { seq, ops } => batch.push((seq, ops)),
                Command::Flush(done) => waiters.push(done),
                Command::Shutdown => {
                    shutdown = true;
                    break;
                }
            }
        }
        if !batch.is_empty() && !failed {
            if !options.flush_delay.is_zero() {
                std::thread::sleep(options.flush_delay);
            }
            match write_frames(&mut out, &mut end, &batch, options.sync) {
                Ok(positions) => {
                    let mut s = shared.lock().expect("poisoned");
                    for (seq, key, position) in positions {
                        match position {
                            Some(p) => s.offsets.insert(key, p),
                            None => s.offsets.remove(&key),
                        };
                        if s.pending.get(&key).is_some_and(|(q, _)| *q == seq) {
                            s.pending.remove(&key);
                        }
                    }
                }
                Err(e) => {
                    failed = true;
                    shared.lock().expect("poisoned").error = Some(e.to_string());
                }
            }
        }
        for w in waiters {
            let _ = w.send(());
        }
        if shutdown {
            break;
        }
    }
}

type Written = (u64, Key, Option<(u64, u32)>);

fn write_frames(
    out: &mut BufWriter<File>,
    end: &mut u64,
    batch: &[(u64, Vec<Op>)],
    sync: bool,
) -> io::Result<Vec<Written>> {
    let mut positions = Vec::new();
    for (seq, ops) in batch {
        let mut payload = Vec::new();
        let base = *end + 8;
        for op in ops {
            let bytes = bincode::serialize(op).map_err(io::Error::other)?;
            let start = payload.len() as u64 + 4;
            payload.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            payload.extend_from_slice(&bytes);
            let position = match op {
                Op::PutLocation(_) | Op::PutWord(_) => Some((base + start, bytes.len() as u32)),
                _ => None,
            };
            positions.push((*seq, op.key(), position));
        }
        out.write_all(&(payload.len() as u32).to_le_bytes())?;
        out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
        out.write_all(&payload)?;
        *end = base + payload.len() as u64;
    }
    out.flush()?;
    if sync {
        out.get_ref().sync_data()?;
    }
    Ok(positions)
}
