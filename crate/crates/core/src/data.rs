//! Session logs, MDP transitions, and the binary transition store.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{ItemId, StateWindow, PADDING};
use crate::error::{Error, Result};
use crate::files;
use crate::seed::Fnv1a;

pub const SESSION_HEADER: [&str; 4] = ["session_id", "timestamp", "item_id", "behavior"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Behavior {
    Click,
    Purchase,
    Skip,
}

impl Behavior {
    pub const ALL: [Behavior; 3] = [Behavior::Click, Behavior::Purchase, Behavior::Skip];

    fn code(self) -> u8 {
        match self {
            Behavior::Click => 0,
            Behavior::Purchase => 1,
            Behavior::Skip => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Behavior::ALL.into_iter().find(|b| b.code() == c)
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Behavior::Click => "click",
            Behavior::Purchase => "purchase",
            Behavior::Skip => "skip",
        })
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "click" => Ok(Behavior::Click),
            "purchase" => Ok(Behavior::Purchase),
            "skip" => Ok(Behavior::Skip),
            _ => Err(format!("unknown behavior {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionRecord {
    pub session_id: String,
    pub timestamp: i64,
    pub item_id: u64,
    pub behavior: Behavior,
}

/// Groups records by session in order of first appearance and stably sorts
/// each session by timestamp.
pub fn group_sessions(records: Vec<SessionRecord>) -> Vec<SessionRecord> {
    let mut order: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Vec<SessionRecord>> = Vec::new();
    for r in records {
        let next = groups.len();
        let g = *order.entry(r.session_id.clone()).or_insert(next);
        if g == next {
            groups.push(Vec::new());
        }
        groups[g].push(r);
    }
    groups
        .into_iter()
        .flat_map(|mut g| {
            g.sort_by_key(|r| r.timestamp);
            g
        })
        .collect()
}

pub fn read_sessions_csv<R: Read>(reader: R) -> Result<Vec<SessionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut rows = rdr.records();
    match rows.next() {
        None => return Ok(Vec::new()),
        Some(h) => {
            let h = h.map_err(|e| csv_error(e, 1))?;
            if h.iter().map(str::trim).ne(SESSION_HEADER) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {}", SESSION_HEADER.join(",")),
                });
            }
        }
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| csv_error(e, 0))?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { line, msg };
        if row.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", row.len())));
        }
        let field = |i: usize| row[i].trim();
        out.push(SessionRecord {
            session_id: field(0).to_string(),
            timestamp: field(1).parse().map_err(|e| bad(format!("timestamp {:?}: {e}", field(1))))?,
            item_id: field(2).parse().map_err(|e| bad(format!("item_id {:?}: {e}", field(2))))?,
            behavior: field(3).parse().map_err(bad)?,
        });
    }
    Ok(group_sessions(out))
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse { line, msg: e.to_string() }
}

pub fn load_sessions_csv(path: &Path) -> Result<Vec<SessionRecord>> {
    read_sessions_csv(files::read(path)?.as_slice())
}

pub fn write_sessions_csv<W: Write>(writer: W, records: &[SessionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Corrupt(format!("writing session csv: {e}"));
    w.write_record(SESSION_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.session_id.as_str(),
            &r.timestamp.to_string(),
            &r.item_id.to_string(),
            &r.behavior.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Corrupt(format!("writing session csv: {e}")))
}

pub fn save_sessions_csv(path: &Path, records: &[SessionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_sessions_csv(&mut buf, records)?;
    files::write_atomic(path, &buf)
}

/// Mapping from raw item ids to dense ids `1..=len`, assigned in ascending raw order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    raw: Vec<u64>,
    dense: HashMap<u64, ItemId>,
}

impl Vocabulary {
    pub fn build(records: &[SessionRecord]) -> Self {
        let mut raw: Vec<u64> = records.iter().map(|r| r.item_id).collect();
        raw.sort_unstable();
        raw.dedup();
        Self::from_raw(raw)
    }

    /// Raw id `i` maps to dense id `i` for `i` in `1..=n`.
    pub fn identity(n: usize) -> Self {
        Self::from_raw((1..=n as u64).collect())
    }

    fn from_raw(raw: Vec<u64>) -> Self {
        let dense = raw.iter().enumerate().map(|(i, &r)| (r, i as ItemId + 1)).collect();
        Vocabulary { raw, dense }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dense(&self, raw: u64) -> Option<ItemId> {
        self.dense.get(&raw).copied()
    }

    pub fn raw(&self, dense: ItemId) -> Option<u64> {
        (dense as usize).checked_sub(1).and_then(|i| self.raw.get(i)).copied()
    }

    /// Rewrites item ids to dense ids.
    pub fn apply(&self, records: &[SessionRecord]) -> Result<Vec<SessionRecord>> {
        records
            .iter()
            .map(|r| {
                let id = self
                    .dense(r.item_id)
                    .ok_or_else(|| Error::Contract(format!("item {} missing from vocabulary", r.item_id)))?;
                Ok(SessionRecord {
                    item_id: id as u64,
                    ..r.clone()
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("raw_id,dense_id\n");
        for (i, r) in self.raw.iter().enumerate() {
            s.push_str(&format!("{r},{}\n", i + 1));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "raw_id,dense_id")) => {}
            _ => return Err(Error::Parse { line: 1, msg: "expected header raw_id,dense_id".into() }),
        }
        let mut raw = Vec::new();
        for (i, line) in lines {
            let line_no = i as u64 + 1;
            let bad = |msg: String| Error::Parse { line: line_no, msg };
            let (r, d) = line.split_once(',').ok_or_else(|| bad("expected raw_id,dense_id".into()))?;
            let r: u64 = r.trim().parse().map_err(|e| bad(format!("raw_id: {e}")))?;
            let d: usize = d.trim().parse().map_err(|e| bad(format!("dense_id: {e}")))?;
            if d != raw.len() + 1 {
                return Err(bad(format!("dense ids must be consecutive from 1, found {d}")));
            }
            raw.push(r);
        }
        Ok(Self::from_raw(raw))
    }
}

/// Reward for each logged behavior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardMap {
    pub purchase: f64,
    pub click: f64,
    pub skip: f64,
}

impl Default for RewardMap {
    fn default() -> Self {
        RewardMap {
            purchase: 1.0,
            click: 0.2,
            skip: 0.0,
        }
    }
}

impl RewardMap {
    pub fn reward(&self, b: Behavior) -> f64 {
        match b {
            Behavior::Purchase => self.purchase,
            Behavior::Click => self.click,
            Behavior::Skip => self.skip,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: StateWindow,
    pub action: ItemId,
    pub reward: f64,
    pub next_state: StateWindow,
    pub terminal: bool,
    pub event: Behavior,
}

/// Options for converting sessions to transitions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionOptions {
    pub catalog_size: usize,
    pub window_len: usize,
    pub rewards: RewardMap,
    /// Whether skipped items enter the state window.
    pub include_skips_in_window: bool,
}

/// Immutable transition dataset with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionStore {
    window_len: usize,
    catalog_size: usize,
    seed: u64,
    config_hash: u64,
    transitions: Vec<Transition>,
}

impl TransitionStore {
    pub fn new(window_len: usize, catalog_size: usize, transitions: Vec<Transition>) -> Result<Self> {
        for t in &transitions {
            if t.state.len() != window_len || t.next_state.len() != window_len {
                return Err(Error::Contract(format!("window length differs from {window_len}")));
            }
            if t.action == PADDING || t.action as usize > catalog_size {
                return Err(Error::Contract(format!("action {} outside catalog 1..={catalog_size}", t.action)));
            }
            t.state.check_catalog(catalog_size)?;
            t.next_state.check_catalog(catalog_size)?;
        }
        Ok(TransitionStore {
            window_len,
            catalog_size,
            seed: 0,
            config_hash: 0,
            transitions,
        })
    }

    pub fn with_source(mut self, seed: u64, config_hash: u64) -> Self {
        self.seed = seed;
        self.config_hash = config_hash;
        self
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn catalog_size(&self) -> usize {
        self.catalog_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn count_event(&self, b: Behavior) -> usize {
        self.transitions.iter().filter(|t| t.event == b).count()
    }
}

/// One transition per event; records must already be grouped by session
/// and sorted (see [`group_sessions`]) with dense item ids.
pub fn sessions_to_transitions(records: &[SessionRecord], opts: &TransitionOptions) -> Result<TransitionStore> {
    let mut out = Vec::with_capacity(records.len());
    let mut i = 0;
    while i < records.len() {
        let sid = &records[i].session_id;
        let end = records[i..].iter().position(|r| &r.session_id != sid).map_or(records.len(), |p| i + p);
        let mut window = StateWindow::empty(opts.window_len);
        for (j, r) in records[i..end].iter().enumerate() {
            if r.item_id == 0 || r.item_id > opts.catalog_size as u64 {
                return Err(Error::Contract(format!(
                    "item id {} outside catalog 1..={}",
                    r.item_id, opts.catalog_size
                )));
            }
            let action = r.item_id as ItemId;
            let next = if r.behavior != Behavior::Skip || opts.include_skips_in_window {
                window.push_item(action)?
            } else {
                window.clone()
            };
            out.push(Transition {
                state: window,
                action,
                reward: opts.rewards.reward(r.behavior),
                next_state: next.clone(),
                terminal: i + j + 1 == end,
                event: r.behavior,
            });
            window = next;
        }
        i = end;
    }
    TransitionStore::new(opts.window_len, opts.catalog_size, out)
}

/// `b` uniform draws with replacement.
pub fn sample_minibatch<'a, R: Rng + ?Sized>(store: &'a TransitionStore, b: usize, rng: &mut R) -> Result<Vec<&'a Transition>> {
    if store.is_empty() {
        return Err(Error::Config("cannot sample from an empty transition store".into()));
    }
    if b == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok((0..b).map(|_| &store.transitions[rng.random_range(0..store.len())]).collect())
}

pub const STORE_MAGIC: &[u8; 4] = b"VPQT";
pub const STORE_VERSION: u32 = 1;
const STORE_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8 + 8;

fn record_len(window_len: usize) -> usize {
    8 * window_len + 14
}

pub fn encode_store(store: &TransitionStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(STORE_HEADER_LEN + store.len() * record_len(store.window_len) + 8);
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.window_len as u32).to_le_bytes());
    buf.extend_from_slice(&(store.catalog_size as u32).to_le_bytes());
    buf.extend_from_slice(&store.seed.to_le_bytes());
    buf.extend_from_slice(&store.config_hash.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for t in &store.transitions {
        for &i in t.state.items() {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        buf.extend_from_slice(&t.action.to_le_bytes());
        buf.extend_from_slice(&t.reward.to_le_bytes());
        for &i in t.next_state.items() {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        buf.push(t.terminal as u8);
        buf.push(t.event.code());
    }
    let mut h = Fnv1a::default();
    h.update(&buf);
    buf.extend_from_slice(&h.finish().to_le_bytes());
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Checks magic, version, and trailing hash, in that order.
pub fn decode_store(bytes: &[u8]) -> Result<TransitionStore> {
    if bytes.len() < 8 || &bytes[..4] != STORE_MAGIC {
        return Err(Error::Corrupt("not a transition store (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: STORE_VERSION,
        });
    }
    if bytes.len() < STORE_HEADER_LEN + 8 {
        return Err(Error::Corrupt("transition store truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let mut h = Fnv1a::default();
    h.update(body);
    if h.finish() != u64::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(Error::Corrupt("transition store hash mismatch (truncated or modified)".into()));
    }
    let mut c = Cursor { buf: body, pos: 8 };
    let window_len = c.u32() as usize;
    let catalog = c.u32() as usize;
    let seed = c.u64();
    let config_hash = c.u64();
    let count = c.u64() as usize;
    if window_len == 0 || count.checked_mul(record_len(window_len)) != Some(body.len() - STORE_HEADER_LEN) {
        return Err(Error::Corrupt("transition store length disagrees with its header".into()));
    }
    let window = |c: &mut Cursor| {
        let items = (0..window_len).map(|_| c.u32()).collect();
        StateWindow::from_items(items).map_err(|e| Error::Corrupt(e.to_string()))
    };
    let mut transitions = Vec::with_capacity(count);
    for _ in 0..count {
        let state = window(&mut c)?;
        let action = c.u32();
        let reward = c.f64();
        let next_state = window(&mut c)?;
        let terminal = match c.u8() {
            0 => false,
            1 => true,
            x => return Err(Error::Corrupt(format!("bad terminal flag {x}"))),
        };
        let event = Behavior::from_code(c.u8()).ok_or_else(|| Error::Corrupt("bad event code".into()))?;
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            terminal,
            event,
        });
    }
    Ok(TransitionStore::new(window_len, catalog, transitions)
        .map_err(|e| Error::Corrupt(e.to_string()))?
        .with_source(seed, config_hash))
}

pub fn save_store(path: &Path, store: &TransitionStore) -> Result<()> {
    files::write_atomic(path, &encode_store(store))
}

pub fn load_store(path: &Path) -> Result<TransitionStore> {
    decode_store(&files::read(path)?)
}
