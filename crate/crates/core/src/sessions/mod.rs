//! Multi-behavior session datasets: ingestion, filtering, prefix
//! augmentation, splitting and the on-disk formats.

mod synth;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{generate_synthetic, PlantedRule, Preset};
pub use vocab::Vocab;

use crate::error::{Error, Result};

/// One interaction: an item touched with a behavior at a timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item: String,
    pub behavior: String,
    pub ts: i64,
}

impl Event {
    pub fn new(item: impl Into<String>, behavior: impl Into<String>, ts: i64) -> Self {
        Event {
            item: item.into(),
            behavior: behavior.into(),
            ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub events: Vec<Event>,
}

/// A session after vocabulary lookup: `(item_index, behavior_index)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedSession {
    pub session_id: String,
    pub events: Vec<(usize, usize)>,
}

/// A training/evaluation example: recent history and the next interaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionExample {
    pub prefix: Vec<(usize, usize)>,
    pub target_item: usize,
    pub target_behavior: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Tsv,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(InputFormat::Jsonl),
            "tsv" => Ok(InputFormat::Tsv),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

// ----- parsing --------------------------------------------------------------

pub fn parse_sessions(
    path: &Path,
    format: InputFormat,
    behaviors: Option<&[String]>,
) -> Result<Vec<Session>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_sessions_from(std::io::BufReader::new(file), format, behaviors)
        .map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
}

/// Parses sessions from a reader. Events are stably sorted by timestamp and
/// consecutive repeats of the same `(item, behavior)` collapse to one event.
pub fn parse_sessions_from<R: BufRead>(
    reader: R,
    format: InputFormat,
    behaviors: Option<&[String]>,
) -> Result<Vec<Session>> {
    let allowed: Option<HashSet<&str>> = behaviors.map(|b| b.iter().map(String::as_str).collect());
    let check = |label: &str| -> Result<()> {
        match &allowed {
            Some(set) if !set.contains(label) => Err(Error::UnknownBehavior(label.to_string())),
            _ => Ok(()),
        }
    };

    let mut sessions: Vec<Session> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match format {
            InputFormat::Jsonl => {
                let session: Session = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                for ev in &session.events {
                    check(&ev.behavior)?;
                }
                sessions.push(session);
            }
            InputFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 4 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 4 tab-separated fields, got {}", fields.len()),
                    });
                }
                let ts: i64 = fields[3].trim().parse().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad timestamp `{}`: {e}", fields[3]),
                })?;
                check(fields[2])?;
                let ev = Event::new(fields[1], fields[2], ts);
                let slot = *by_id.entry(fields[0].to_string()).or_insert_with(|| {
                    sessions.push(Session {
                        session_id: fields[0].to_string(),
                        events: Vec::new(),
                    });
                    sessions.len() - 1
                });
                sessions[slot].events.push(ev);
            }
        }
    }
    for s in &mut sessions {
        normalize_events(&mut s.events);
    }
    Ok(sessions)
}

/// Stable sort by timestamp, then collapse consecutive duplicates.
pub fn normalize_events(events: &mut Vec<Event>) {
    events.sort_by_key(|e| e.ts);
    collapse_repeats(events);
}

fn collapse_repeats(events: &mut Vec<Event>) {
    events.dedup_by(|b, a| a.item == b.item && a.behavior == b.behavior);
}

pub fn write_sessions_jsonl(path: &Path, sessions: &[Session]) -> Result<()> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// TSV event lines `session_id<TAB>item<TAB>behavior<TAB>ts`.
pub fn sessions_to_tsv(sessions: &[Session]) -> String {
    let mut out = String::new();
    for s in sessions {
        for e in &s.events {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", s.session_id, e.item, e.behavior, e.ts);
        }
    }
    out
}

// ----- filtering ------------------------------------------------------------

/// Drops items seen fewer than `min_item_count` times and sessions shorter
/// than `min_session_len`, repeating both rules until nothing changes.
/// Returns the surviving sessions and their item vocabulary (first-seen
/// order, final occurrence counts).
pub fn preprocess_filter(
    sessions: Vec<Session>,
    min_session_len: usize,
    min_item_count: u64,
) -> Result<(Vec<Session>, Vocab)> {
    if min_session_len == 0 {
        return Err(Error::Config("min_session_len must be at least 1".into()));
    }
    let mut sessions = sessions;
    loop {
        let rare: HashSet<String> = item_counts(&sessions)
            .into_iter()
            .filter(|(_, c)| *c < min_item_count)
            .map(|(k, _)| k.to_string())
            .collect();
        let before: usize = sessions.iter().map(|s| s.events.len()).sum::<usize>() + sessions.len();
        for s in &mut sessions {
            s.events.retain(|e| !rare.contains(&e.item));
            collapse_repeats(&mut s.events);
        }
        sessions.retain(|s| s.events.len() >= min_session_len);
        let after: usize = sessions.iter().map(|s| s.events.len()).sum::<usize>() + sessions.len();
        if after == before {
            break;
        }
    }
    if sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab = item_vocab(&sessions)?;
    Ok((sessions, vocab))
}

fn item_counts(sessions: &[Session]) -> HashMap<&str, u64> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sessions {
        for e in &s.events {
            *counts.entry(e.item.as_str()).or_default() += 1;
        }
    }
    counts
}

/// Item vocabulary in first-seen order.
pub fn item_vocab(sessions: &[Session]) -> Result<Vocab> {
    let counts = item_counts(sessions);
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for s in sessions {
        for e in &s.events {
            if seen.insert(e.item.as_str()) {
                entries.push((e.item.clone(), counts[e.item.as_str()]));
            }
        }
    }
    Vocab::from_entries(entries)
}

/// Behavior vocabulary. With a declared list, that order is kept; otherwise
/// labels are ordered by descending frequency, then name, so the majority
/// behavior gets index 0.
pub fn behavior_vocab(sessions: &[Session], declared: Option<&[String]>) -> Result<Vocab> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sessions {
        for e in &s.events {
            *counts.entry(e.behavior.as_str()).or_default() += 1;
        }
    }
    match declared {
        Some(labels) => {
            if let Some(bad) = counts.keys().find(|k| !labels.iter().any(|l| l == *k)) {
                return Err(Error::UnknownBehavior(bad.to_string()));
            }
            Vocab::from_entries(labels.iter().map(|l| (l.clone(), counts.get(l.as_str()).copied().unwrap_or(0))))
        }
        None => {
            let mut entries: Vec<(String, u64)> =
                counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            Vocab::from_entries(entries)
        }
    }
}

/// Maps a session onto vocabulary indices; `None` if any event is unknown.
pub fn index_session(session: &Session, items: &Vocab, behaviors: &Vocab) -> Option<IndexedSession> {
    let events = session
        .events
        .iter()
        .map(|e| Some((items.index_of(&e.item)?, behaviors.index_of(&e.behavior)?)))
        .collect::<Option<Vec<_>>>()?;
    Some(IndexedSession {
        session_id: session.session_id.clone(),
        events,
    })
}

pub fn unindex_session(session: &IndexedSession, items: &Vocab, behaviors: &Vocab) -> Session {
    Session {
        session_id: session.session_id.clone(),
        events: session
            .events
            .iter()
            .enumerate()
            .map(|(t, &(i, b))| Event::new(items.id(i), behaviors.id(b), t as i64))
            .collect(),
    }
}

// ----- augmentation ---------------------------------------------------------

/// All-prefixes expansion: a session of length `L` yields `L - 1` examples,
/// each predicting event `t` from the (at most `max_len`) events before it.
pub fn augment_prefixes(sessions: &[IndexedSession], max_len: usize) -> Vec<SessionExample> {
    sessions
        .iter()
        .flat_map(|s| session_examples(&s.events, max_len))
        .collect()
}

fn session_examples(events: &[(usize, usize)], max_len: usize) -> impl Iterator<Item = SessionExample> + '_ {
    (1..events.len()).map(move |t| SessionExample {
        prefix: events[t.saturating_sub(max_len)..t].to_vec(),
        target_item: events[t].0,
        target_behavior: events[t].1,
    })
}

pub fn write_examples_jsonl(path: &Path, examples: &[SessionExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_examples_jsonl(path: &Path) -> Result<Vec<SessionExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

// ----- splitting ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Part sizes: floor of each share, then the remainder goes one by one to the
/// parts with the largest fractional share (earlier part on ties).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        // guard against 0.7 * 10 = 6.999...
        *s = (e + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            remaining -= 1;
        }
    }
    Ok(sizes)
}

/// Random seeded split at session granularity. Each part keeps input order.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<Split<T>> {
    let sizes = split_sizes(items.len(), ratios)?;
    let mut perm: Vec<usize> = (0..items.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut start = 0;
    for (p, &size) in sizes.iter().enumerate() {
        let mut idx = perm[start..start + size].to_vec();
        idx.sort_unstable();
        parts[p] = idx.into_iter().map(|i| items[i].clone()).collect();
        start += size;
    }
    let [train, valid, test] = parts;
    Ok(Split { train, valid, test })
}

/// Keeps the most recent `fraction` of sessions, ranked by their last
/// timestamp, preserving input order.
pub fn most_recent_fraction(sessions: Vec<Session>, fraction: f64) -> Result<Vec<Session>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {fraction} not in (0, 1]")));
    }
    let keep = ((sessions.len() as f64) * fraction).ceil() as usize;
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let last_ts = |s: &Session| s.events.iter().map(|e| e.ts).max().unwrap_or(i64::MIN);
    order.sort_by(|&a, &b| last_ts(&sessions[b]).cmp(&last_ts(&sessions[a])).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    let mut slots: Vec<Option<Session>> = sessions.into_iter().map(Some).collect();
    Ok(kept.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

// ----- end-to-end preparation -----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetOrder {
    /// Take the recent fraction first, then filter.
    #[default]
    FilterAfterSubset,
    SubsetAfterFilter,
}

impl FromStr for SubsetOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter_after_subset" => Ok(SubsetOrder::FilterAfterSubset),
            "subset_after_filter" => Ok(SubsetOrder::SubsetAfterFilter),
            other => Err(Error::Config(format!("unknown subset order `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub min_session_len: usize,
    pub min_item_count: u64,
    pub max_len: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub subset_fraction: Option<f64>,
    pub subset_order: SubsetOrder,
    pub behaviors: Option<Vec<String>>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            min_session_len: 3,
            min_item_count: 5,
            max_len: 8,
            ratios: [0.7, 0.1, 0.2],
            seed: 0,
            subset_fraction: None,
            subset_order: SubsetOrder::default(),
            behaviors: None,
        }
    }
}

/// Everything downstream stages need, indexed against the train vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub items: Vocab,
    pub behaviors: Vocab,
    pub train_sessions: Vec<IndexedSession>,
    pub train: Vec<SessionExample>,
    pub valid: Vec<SessionExample>,
    pub test: Vec<SessionExample>,
    /// Held-out examples dropped for referencing items unseen in training.
    pub dropped_unseen: usize,
}

/// Filter, split by session, rebuild the vocabulary on the train split and
/// augment every split. Held-out examples touching an item (or behavior)
/// outside the train vocabulary are dropped.
pub fn prepare(raw: Vec<Session>, opts: &PrepareOptions) -> Result<PreparedData> {
    let subset = |s: Vec<Session>| match opts.subset_fraction {
        Some(f) => most_recent_fraction(s, f),
        None => Ok(s),
    };
    let filtered = match opts.subset_order {
        SubsetOrder::FilterAfterSubset => {
            preprocess_filter(subset(raw)?, opts.min_session_len, opts.min_item_count)?.0
        }
        SubsetOrder::SubsetAfterFilter => {
            let (s, _) = preprocess_filter(raw, opts.min_session_len, opts.min_item_count)?;
            subset(s)?
        }
    };
    let split = split_dataset(&filtered, opts.ratios, opts.seed)?;
    let (train_raw, items) = preprocess_filter(split.train, opts.min_session_len, opts.min_item_count)?;
    let behaviors = behavior_vocab(&train_raw, opts.behaviors.as_deref())?;

    let train_sessions: Vec<IndexedSession> = train_raw
        .iter()
        .map(|s| index_session(s, &items, &behaviors).expect("train vocab covers train sessions"))
        .collect();
    let train = augment_prefixes(&train_sessions, opts.max_len);

    let mut dropped_unseen = 0;
    let mut held_out = |sessions: &[Session]| -> Vec<SessionExample> {
        let mut out = Vec::new();
        for s in sessions {
            let events: Vec<Option<(usize, usize)>> = s
                .events
                .iter()
                .map(|e| Some((items.index_of(&e.item)?, behaviors.index_of(&e.behavior)?)))
                .collect();
            for t in 1..events.len() {
                let window = &events[t.saturating_sub(opts.max_len)..=t];
                match window.iter().copied().collect::<Option<Vec<_>>>() {
                    Some(mut w) => {
                        let (target_item, target_behavior) = w.pop().unwrap();
                        out.push(SessionExample {
                            prefix: w,
                            target_item,
                            target_behavior,
                        });
                    }
                    None => dropped_unseen += 1,
                }
            }
        }
        out
    };
    let valid = held_out(&split.valid);
    let test = held_out(&split.test);

    Ok(PreparedData {
        items,
        behaviors,
        train_sessions,
        train,
        valid,
        test,
        dropped_unseen,
    })
}
