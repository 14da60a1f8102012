//! Exhaustive and hashed top-K retrieval.
//!
//! Hashed retrieval is telescopic: the query's self-attention Fisher vector
//! is hashed, the union of its buckets forms the candidate set, and only
//! those candidates are scored by the (usually cross-attention) reranker.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, rank_by_score, Metrics, Protocol};
use crate::hashing::{build_index, candidates, HashConfig, HashIndex, HashNet, RandomHyperplanes};
use crate::model::RetrievalModel;
use crate::relevance::{fisher_vector, EvalQuery, FisherVector, Scorer};
use crate::seq::{read_jsonl, write_jsonl, Dataset, EventSequence, Split};

/// Serialized as `{"query_id", "ranked": [[id, score], ...], "comparisons"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<(String, f64)>,
    pub comparisons: usize,
}

/// Scores `corpus` against a prepared query, in input order.
pub fn score_all(scorer: &Scorer, query: &EvalQuery, corpus: &[&EventSequence]) -> Result<Vec<f64>> {
    corpus.par_iter().map(|c| scorer.score(query, c)).collect()
}

fn top_k(query_id: &str, corpus: &[&EventSequence], scores: &[f64], k: usize, comparisons: usize) -> RetrievalResult {
    let ids: Vec<&str> = corpus.iter().map(|c| c.id.as_str()).collect();
    let ranked = rank_by_score(&ids, scores)
        .into_iter()
        .take(k)
        .map(|i| (ids[i].to_string(), scores[i]))
        .collect();
    RetrievalResult {
        query_id: query_id.to_string(),
        ranked,
        comparisons,
    }
}

pub fn exhaustive_retrieve(
    scorer: &Scorer,
    query: &EventSequence,
    corpus: &[EventSequence],
    k: usize,
) -> Result<RetrievalResult> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let prepared = scorer.prepare(query)?;
    let refs: Vec<&EventSequence> = corpus.iter().collect();
    let scores = score_all(scorer, &prepared, &refs)?;
    Ok(top_k(&query.id, &refs, &scores, k, corpus.len()))
}

/// Maps a Fisher vector to a binary code.
#[derive(Debug, Clone, Copy)]
pub enum Coder<'a> {
    Trained(&'a HashNet),
    Random(&'a RandomHyperplanes),
}

impl Coder<'_> {
    pub fn code(&self, v: &[f64]) -> Result<Vec<i8>> {
        match self {
            Coder::Trained(net) => crate::hashing::compute_code(net, v),
            Coder::Random(rh) => rh.code(v),
        }
    }
}

/// Unconditioned Fisher vectors of every corpus sequence.
pub fn corpus_vectors(model: &RetrievalModel, corpus: &[EventSequence]) -> Result<Vec<FisherVector>> {
    corpus.par_iter().map(|c| fisher_vector(model, c, None)).collect()
}

/// Codes every vector and buckets them into `hash.tables` tables.
pub fn index_vectors(coder: Coder, vectors: &[FisherVector], hash: &HashConfig, seed: u64) -> Result<HashIndex> {
    let codes = vectors
        .par_iter()
        .map(|v| Ok((v.id.clone(), coder.code(&v.v)?)))
        .collect::<Result<Vec<_>>>()?;
    build_index(&codes, hash.tables, hash.bits_per_table, seed)
}

/// Hash-based candidate generation followed by reranking.
pub struct HashedRetriever<'a> {
    /// Self-attention scorer producing query vectors for hashing.
    pub hasher: &'a Scorer<'a>,
    pub reranker: &'a Scorer<'a>,
    pub coder: Coder<'a>,
    pub index: &'a HashIndex,
    corpus: HashMap<&'a str, &'a EventSequence>,
    all: Vec<&'a EventSequence>,
}

impl<'a> HashedRetriever<'a> {
    pub fn new(
        hasher: &'a Scorer<'a>,
        reranker: &'a Scorer<'a>,
        coder: Coder<'a>,
        index: &'a HashIndex,
        corpus: &'a [EventSequence],
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            hasher,
            reranker,
            coder,
            index,
            corpus: corpus.iter().map(|c| (c.id.as_str(), c)).collect(),
            all: corpus.iter().collect(),
        })
    }

    /// Candidate ids for `query`; `None` when its buckets are all empty.
    pub fn candidates(&self, query: &EventSequence) -> Result<Option<BTreeSet<String>>> {
        let prepared = self.hasher.prepare(query)?;
        let v = prepared
            .vector()
            .ok_or_else(|| Error::InvalidConfig("hashing needs a self-attention scorer with κ enabled".into()))?;
        let found = candidates(self.index, &self.coder.code(v)?)?;
        Ok((!found.is_empty()).then_some(found))
    }

    /// Candidate sequences, falling back to the whole corpus.
    pub fn candidate_set(&self, query: &EventSequence) -> Result<Vec<&'a EventSequence>> {
        match self.candidates(query)? {
            Some(ids) => ids
                .iter()
                .map(|id| {
                    self.corpus
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::UnknownId(id.clone()))
                })
                .collect(),
            None => Ok(self.all.clone()),
        }
    }

    pub fn retrieve(&self, query: &EventSequence, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        let pool = self.candidate_set(query)?;
        let prepared = self.reranker.prepare(query)?;
        let scores = score_all(self.reranker, &prepared, &pool)?;
        Ok(top_k(&query.id, &pool, &scores, k, pool.len()))
    }
}

/// Pooled metrics of an exhaustive scorer; corpus vectors should already be
/// cached for self-attention scorers.
pub fn evaluate_exhaustive(
    scorer: &Scorer,
    dataset: &Dataset,
    split: Split,
    protocol: &Protocol,
) -> Result<Metrics> {
    evaluate(dataset, split, protocol, |q, pool| {
        let prepared = scorer.prepare(&dataset.queries[q])?;
        let refs: Vec<&EventSequence> = pool.iter().map(|&c| &dataset.corpus[c]).collect();
        score_all(scorer, &prepared, &refs)
    })
}

/// Pooled metrics of telescopic retrieval plus its reduction factor. Pool
/// entries outside the candidate set rank last.
pub fn evaluate_hashed(
    retriever: &HashedRetriever,
    dataset: &Dataset,
    split: Split,
    protocol: &Protocol,
) -> Result<(Metrics, f64)> {
    let mut comparisons = Vec::new();
    let metrics = evaluate(dataset, split, protocol, |q, pool| {
        let query = &dataset.queries[q];
        let candidates: HashSet<&str> = retriever
            .candidate_set(query)?
            .into_iter()
            .map(|c| c.id.as_str())
            .collect();
        comparisons.push(candidates.len());
        let prepared = retriever.reranker.prepare(query)?;
        pool.par_iter()
            .map(|&c| {
                let seq = &dataset.corpus[c];
                if candidates.contains(seq.id.as_str()) {
                    retriever.reranker.score(&prepared, seq)
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            })
            .collect()
    })?;
    let mean = comparisons.iter().sum::<usize>() as f64 / comparisons.len() as f64;
    let reduction = 100.0 * (1.0 - mean / dataset.corpus.len() as f64);
    Ok((metrics, reduction))
}

/// `100 · (1 − mean comparisons / |corpus|)`.
pub fn reduction_factor(results: &[RetrievalResult], corpus_len: usize) -> f64 {
    if results.is_empty() || corpus_len == 0 {
        return 0.0;
    }
    let mean = results.iter().map(|r| r.comparisons as f64).sum::<f64>() / results.len() as f64;
    100.0 * (1.0 - mean / corpus_len as f64)
}

pub fn write_results(path: &Path, results: &[RetrievalResult]) -> Result<()> {
    write_jsonl(path, results)
}

pub fn read_results(path: &Path) -> Result<Vec<RetrievalResult>> {
    read_jsonl(path)
}
