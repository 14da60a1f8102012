//! Continuous-time marked event sequences and the labeled query/corpus
//! collections built from them.
//!
//! Times are kept in raw units throughout. Model encoders apply a single
//! global rescale internally (see [`Dataset::time_scale`]).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single `(time, mark)` event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, usize)", into = "(f64, usize)")]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

impl Event {
    pub fn new(time: f64, mark: usize) -> Self {
        Self { time, mark }
    }
}

impl From<(f64, usize)> for Event {
    fn from((time, mark): (f64, usize)) -> Self {
        Self { time, mark }
    }
}

impl From<Event> for (f64, usize) {
    fn from(e: Event) -> Self {
        (e.time, e.mark)
    }
}

/// Ordered events observed on the window `[0, horizon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub id: String,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(id: impl Into<String>, horizon: f64, events: Vec<Event>) -> Self {
        Self {
            id: id.into(),
            horizon,
            events,
        }
    }

    /// Builds a sequence from parallel time and mark slices.
    pub fn from_parts(id: impl Into<String>, horizon: f64, times: &[f64], marks: &[usize]) -> Self {
        assert_eq!(times.len(), marks.len(), "times and marks differ in length");
        let events = times
            .iter()
            .zip(marks)
            .map(|(&t, &m)| Event::new(t, m))
            .collect();
        Self::new(id, horizon, events)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn marks(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.mark).collect()
    }

    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.time)
    }
}

/// Checks every sequence invariant: nonnegative, strictly increasing times
/// that stay below the horizon, and marks inside the vocabulary.
pub fn validate_sequence(seq: &EventSequence, num_marks: usize) -> Result<()> {
    let mut prev: Option<f64> = None;
    for (index, e) in seq.events.iter().enumerate() {
        if !(e.time >= 0.0) {
            return Err(Error::NegativeEventTime {
                id: seq.id.clone(),
                index,
                time: e.time,
            });
        }
        if let Some(p) = prev {
            if !(e.time > p) {
                return Err(Error::NonMonotonicTimes {
                    id: seq.id.clone(),
                    index,
                    time: e.time,
                    prev: p,
                });
            }
        }
        if !(e.time < seq.horizon) {
            return Err(Error::EventBeyondHorizon {
                id: seq.id.clone(),
                index,
                time: e.time,
                horizon: seq.horizon,
            });
        }
        if e.mark >= num_marks {
            return Err(Error::UnknownMark {
                mark: e.mark,
                num_marks,
            });
        }
        prev = Some(e.time);
    }
    Ok(())
}

/// Gaps `t_i - t_{i-1}` with the window start `t_0 = 0`.
pub fn inter_event_times(seq: &EventSequence) -> Vec<f64> {
    let mut prev = 0.0;
    seq.events
        .iter()
        .map(|e| {
            let gap = e.time - prev;
            prev = e.time;
            gap
        })
        .collect()
}

/// Binary relevance of a corpus sequence to a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Relevance {
    Relevant,
    NonRelevant,
}

impl TryFrom<i8> for Relevance {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, Self::Error> {
        match v {
            1 => Ok(Relevance::Relevant),
            -1 => Ok(Relevance::NonRelevant),
            other => Err(format!("relevance label must be +1 or -1, got {other}")),
        }
    }
}

impl From<Relevance> for i8 {
    fn from(r: Relevance) -> Self {
        match r {
            Relevance::Relevant => 1,
            Relevance::NonRelevant => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceLabel {
    pub query_id: String,
    pub corpus_id: String,
    pub label: Relevance,
}

/// Partition of query ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-query positive and negative corpus indices.
#[derive(Debug, Clone, Default)]
pub struct LabelIndex {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Queries, corpus, relevance labels and the query split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub queries: Vec<EventSequence>,
    pub corpus: Vec<EventSequence>,
    pub labels: Vec<RelevanceLabel>,
    pub splits: Splits,
    pub num_marks: usize,
    query_pos: HashMap<String, usize>,
    corpus_pos: HashMap<String, usize>,
    by_query: Vec<LabelIndex>,
}

impl Dataset {
    /// Assembles and validates a dataset. Unlabeled (query, corpus) pairs are
    /// treated as non-relevant.
    pub fn new(
        queries: Vec<EventSequence>,
        corpus: Vec<EventSequence>,
        labels: Vec<RelevanceLabel>,
        splits: Splits,
        num_marks: usize,
    ) -> Result<Self> {
        for s in queries.iter().chain(&corpus) {
            validate_sequence(s, num_marks)?;
        }
        let query_pos = index_ids(&queries)?;
        let corpus_pos = index_ids(&corpus)?;

        let mut seen = HashSet::new();
        let mut relevant: Vec<HashSet<usize>> = vec![HashSet::new(); queries.len()];
        for l in &labels {
            let q = *query_pos
                .get(&l.query_id)
                .ok_or_else(|| Error::UnknownId(l.query_id.clone()))?;
            let c = *corpus_pos
                .get(&l.corpus_id)
                .ok_or_else(|| Error::UnknownId(l.corpus_id.clone()))?;
            if !seen.insert((q, c)) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate label for ({}, {})",
                    l.query_id, l.corpus_id
                )));
            }
            if l.label == Relevance::Relevant {
                relevant[q].insert(c);
            }
        }
        let by_query = relevant
            .iter()
            .map(|rel| {
                let (positives, negatives) = (0..corpus.len()).partition(|c| rel.contains(c));
                LabelIndex {
                    positives,
                    negatives,
                }
            })
            .collect();

        let mut split_seen = HashSet::new();
        for id in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if !query_pos.contains_key(id) {
                return Err(Error::UnknownId(id.clone()));
            }
            if !split_seen.insert(id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "query {id} appears in two splits"
                )));
            }
        }
        if split_seen.len() != queries.len() {
            return Err(Error::InvalidConfig(
                "splits do not cover every query".to_string(),
            ));
        }

        Ok(Self {
            queries,
            corpus,
            labels,
            splits,
            num_marks,
            query_pos,
            corpus_pos,
            by_query,
        })
    }

    pub fn query_index(&self, id: &str) -> Option<usize> {
        self.query_pos.get(id).copied()
    }

    pub fn corpus_index(&self, id: &str) -> Option<usize> {
        self.corpus_pos.get(id).copied()
    }

    pub fn query(&self, id: &str) -> Option<&EventSequence> {
        self.query_index(id).map(|i| &self.queries[i])
    }

    /// Positive/negative corpus indices for the query at `query_idx`.
    pub fn label_index(&self, query_idx: usize) -> &LabelIndex {
        &self.by_query[query_idx]
    }

    pub fn is_relevant(&self, query_idx: usize, corpus_idx: usize) -> bool {
        self.by_query[query_idx]
            .positives
            .binary_search(&corpus_idx)
            .is_ok()
    }

    /// Query indices of a split, in split-file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .ids(split)
            .iter()
            .map(|id| self.query_pos[id])
            .collect()
    }

    /// Largest horizon over all sequences; encoders divide times by it.
    pub fn time_scale(&self) -> f64 {
        self.queries
            .iter()
            .chain(&self.corpus)
            .map(|s| s.horizon)
            .fold(0.0, f64::max)
    }

    /// Returns a copy with every query replaced through `f`, keeping labels.
    pub fn map_queries(&self, f: impl Fn(&EventSequence) -> EventSequence) -> Result<Self> {
        Dataset::new(
            self.queries.iter().map(f).collect(),
            self.corpus.clone(),
            self.labels.clone(),
            self.splits.clone(),
            self.num_marks,
        )
    }

    /// Writes `queries.jsonl`, `corpus.jsonl`, `labels.jsonl`, `splits.json`
    /// and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.corpus)?;
        write_jsonl(&dir.join("labels.jsonl"), &self.labels)?;
        std::fs::write(
            dir.join("splits.json"),
            serde_json::to_string_pretty(&self.splits)?,
        )?;
        let meta: BTreeMap<&str, usize> = [("num_marks", self.num_marks)].into();
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Loads a dataset directory written by [`Dataset::save`]. Without
    /// `meta.json` the mark vocabulary is inferred from the largest mark.
    pub fn load(dir: &Path) -> Result<Self> {
        let queries: Vec<EventSequence> = read_jsonl(&dir.join("queries.jsonl"))?;
        let corpus: Vec<EventSequence> = read_jsonl(&dir.join("corpus.jsonl"))?;
        let labels: Vec<RelevanceLabel> = read_jsonl(&dir.join("labels.jsonl"))?;
        let splits: Splits =
            serde_json::from_str(&std::fs::read_to_string(dir.join("splits.json"))?)?;
        let meta_path = dir.join("meta.json");
        let num_marks = if meta_path.exists() {
            let meta: BTreeMap<String, usize> =
                serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
            *meta
                .get("num_marks")
                .ok_or_else(|| Error::InvalidConfig("meta.json lacks num_marks".into()))?
        } else {
            queries
                .iter()
                .chain(&corpus)
                .flat_map(|s| s.events.iter().map(|e| e.mark + 1))
                .max()
                .unwrap_or(1)
        };
        Dataset::new(queries, corpus, labels, splits, num_marks)
    }
}

fn index_ids(seqs: &[EventSequence]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        if map.insert(s.id.clone(), i).is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate sequence id {}",
                s.id
            )));
        }
    }
    Ok(map)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON object per nonblank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
