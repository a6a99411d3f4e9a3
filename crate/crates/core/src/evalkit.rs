//! Ranking metrics, labeled evaluation sets and end-to-end evaluation of a
//! model checkpoint under static pruning.

mod synth;

pub use synth::{generate_synthetic, match_ratio, OverlapQuantile, SynthConfig, SynthData};

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward, Checkpoint, ModelParams, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::index::{DocId, InvertedIndex};
use crate::retrieval::{flops_metric, Bm25Index, Bm25Params, Searcher};
use crate::scalar::Scalar;
use crate::sparsevec::{l0_report, PruneConfig, SparseVec};
use crate::vocab::{tokenize, unigrams, SubwordId, SubwordVocab};

pub const MAX_POSITIVES: usize = 3;
pub const MAX_NEGATIVES: usize = 10;

/// Reciprocal rank of the first positive within the top `k`, else 0.
pub fn mrr_at_k(ranked: &[DocId], positives: &[DocId], k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|d| positives.contains(d))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Fraction of positives retrieved within the top `k`.
pub fn recall_at_k(ranked: &[DocId], positives: &[DocId], k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let top: HashSet<DocId> = ranked.iter().take(k).copied().collect();
    let hit = positives.iter().filter(|p| top.contains(p)).count();
    hit as f64 / positives.len() as f64
}

/// Expected recall@k of a uniformly random ranking over `num_docs` documents.
pub fn chance_recall_at_k(num_docs: usize, k: usize) -> f64 {
    if num_docs == 0 {
        return 0.0;
    }
    k.min(num_docs) as f64 / num_docs as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query_id: String,
    pub text: String,
    pub positives: Vec<String>,
    #[serde(default)]
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalDoc {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalSet {
    pub queries: Vec<EvalQuery>,
    pub docs: Vec<EvalDoc>,
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &'static str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                what,
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

impl EvalSet {
    pub fn new(queries: Vec<EvalQuery>, docs: Vec<EvalDoc>) -> Result<Self> {
        let set = Self { queries, docs };
        set.validate()?;
        Ok(set)
    }

    pub fn from_jsonl(queries: &str, docs: &str) -> Result<Self> {
        Self::new(parse_jsonl(queries, "eval queries")?, parse_jsonl(docs, "eval docs")?)
    }

    pub fn queries_jsonl(&self) -> String {
        to_jsonl(&self.queries)
    }

    pub fn docs_jsonl(&self) -> String {
        to_jsonl(&self.docs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidLabels(m));
        let mut doc_ids = HashSet::new();
        for d in &self.docs {
            if !doc_ids.insert(d.doc_id.as_str()) {
                return bad(format!("duplicate doc_id {}", d.doc_id));
            }
        }
        let mut query_ids = HashSet::new();
        for q in &self.queries {
            if !query_ids.insert(q.query_id.as_str()) {
                return bad(format!("duplicate query_id {}", q.query_id));
            }
            if q.positives.is_empty() || q.positives.len() > MAX_POSITIVES {
                return bad(format!("query {} has {} positives (1..={MAX_POSITIVES} allowed)", q.query_id, q.positives.len()));
            }
            if q.negatives.len() > MAX_NEGATIVES {
                return bad(format!("query {} has {} negatives (max {MAX_NEGATIVES})", q.query_id, q.negatives.len()));
            }
            for id in q.positives.iter().chain(&q.negatives) {
                if !doc_ids.contains(id.as_str()) {
                    return bad(format!("query {} labels unknown doc {id}", q.query_id));
                }
            }
            if let Some(both) = q.positives.iter().find(|p| q.negatives.contains(p)) {
                return bad(format!("query {} lists {both} as positive and negative", q.query_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub mrr_at_10: f64,
    pub r_at_10: f64,
    pub r_at_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub qk: usize,
    pub dk: usize,
    pub l0_q: f64,
    pub l0_d: f64,
    pub flops: f64,
    pub mrr_at_10: f64,
    pub r_at_10: f64,
    pub r_at_100: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_query: Vec<QueryMetrics>,
}

fn aggregate(qk: usize, dk: usize, l0_q: f64, l0_d: f64, flops: f64, per_query: Vec<QueryMetrics>) -> MetricReport {
    let n = per_query.len() as f64;
    let mean = |f: fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    MetricReport {
        qk,
        dk,
        l0_q,
        l0_d,
        flops,
        mrr_at_10: mean(|m| m.mrr_at_10),
        r_at_10: mean(|m| m.r_at_10),
        r_at_100: mean(|m| m.r_at_100),
        per_query,
    }
}

fn score_rankings(rankings: &[Vec<DocId>], positives: &[Vec<DocId>], ids: &[String]) -> Vec<QueryMetrics> {
    rankings
        .iter()
        .zip(positives)
        .zip(ids)
        .map(|((ranked, pos), id)| QueryMetrics {
            query_id: id.clone(),
            mrr_at_10: mrr_at_k(ranked, pos, 10),
            r_at_10: recall_at_k(ranked, pos, 10),
            r_at_100: recall_at_k(ranked, pos, 100),
        })
        .collect()
}

impl MetricReport {
    /// The same report without the per-query breakdown.
    pub fn summary(&self) -> Self {
        Self {
            per_query: Vec::new(),
            ..self.clone()
        }
    }
}

/// An evaluation set tokenized against a subword vocabulary, with labels
/// resolved to dense doc ids (the position in the collection).
#[derive(Debug, Clone)]
pub struct PreparedEval {
    pub query_ids: Vec<String>,
    pub query_tokens: Vec<Vec<SubwordId>>,
    pub doc_ids: Vec<String>,
    pub doc_tokens: Vec<Vec<SubwordId>>,
    pub positives: Vec<Vec<DocId>>,
    pub subvocab_hash: u64,
    pub max_len: usize,
}

impl PreparedEval {
    pub fn new(set: &EvalSet, subvocab: &SubwordVocab) -> Result<Self> {
        set.validate()?;
        if set.queries.is_empty() {
            return Err(Error::Empty("evaluation queries"));
        }
        if set.docs.is_empty() {
            return Err(Error::Empty("evaluation documents"));
        }
        let lookup: HashMap<&str, DocId> = set
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.as_str(), i as DocId))
            .collect();
        Ok(Self {
            query_ids: set.queries.iter().map(|q| q.query_id.clone()).collect(),
            query_tokens: set.queries.iter().map(|q| tokenize(&q.text, subvocab)).collect(),
            doc_ids: set.docs.iter().map(|d| d.doc_id.clone()).collect(),
            doc_tokens: set.docs.iter().map(|d| tokenize(&d.text, subvocab)).collect(),
            positives: set
                .queries
                .iter()
                .map(|q| q.positives.iter().map(|p| lookup[p.as_str()]).collect())
                .collect(),
            subvocab_hash: subvocab.content_hash(),
            max_len: DEFAULT_MAX_LEN,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    /// Encodes every query and document with `params`.
    pub fn encode<S: Scalar>(&self, params: &ModelParams<S>) -> Result<EncodedEval<'_, S>> {
        let enc = |toks: &Vec<SubwordId>| forward(toks, params, self.max_len).map(|c| c.pooled());
        let queries = self.query_tokens.par_iter().map(enc).collect::<Result<Vec<_>>>()?;
        let docs = self
            .doc_tokens
            .par_iter()
            .map(enc)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i as DocId, v))
            .collect();
        Ok(EncodedEval { prepared: self, queries, docs })
    }

    pub fn evaluate_params<S: Scalar>(&self, params: &ModelParams<S>, prune: PruneConfig) -> Result<MetricReport> {
        self.encode(params)?.report(prune)
    }
}

/// Encoded queries and documents of a [`PreparedEval`], reusable across
/// pruning configurations.
#[derive(Debug, Clone)]
pub struct EncodedEval<'a, S> {
    pub prepared: &'a PreparedEval,
    pub queries: Vec<SparseVec<S>>,
    pub docs: Vec<(DocId, SparseVec<S>)>,
}

impl<'a, S: Scalar> EncodedEval<'a, S> {
    pub fn build_index(&self, dk: usize) -> Result<InvertedIndex<S>> {
        InvertedIndex::build_sharded(&self.docs, dk, rayon::current_num_threads())
    }

    /// Prunes, indexes, searches and scores at one (qk, dk) setting.
    pub fn report(&self, prune: PruneConfig) -> Result<MetricReport> {
        let index = self.build_index(prune.dk)?;
        let rankings: Vec<Vec<DocId>> = self
            .queries
            .par_iter()
            .map_init(
                || Searcher::new(&index),
                |s, q| s.search(q, prune.qk, 100).map(|r| r.hits.into_iter().map(|(d, _)| d).collect()),
            )
            .collect::<Result<_>>()?;
        let per_query = score_rankings(&rankings, &self.prepared.positives, &self.prepared.query_ids);
        let doc_vecs: Vec<SparseVec<S>> = self.docs.iter().map(|(_, v)| v.clone()).collect();
        let l0 = l0_report(&self.queries, &doc_vecs, prune)?;
        let flops = flops_metric(&index, &self.queries, prune.qk)?;
        Ok(aggregate(prune.qk, prune.dk, l0.l0_q, l0.l0_d, flops, per_query))
    }

    pub fn grid(&self, cells: &[PruneConfig]) -> Result<Vec<MetricReport>> {
        cells.iter().map(|&c| self.report(c)).collect()
    }
}

fn check_hashes<S>(checkpoint: &Checkpoint<S>, prepared: &PreparedEval, uvocab_hash: u64) -> Result<()> {
    if checkpoint.subvocab_hash != prepared.subvocab_hash {
        return Err(Error::VocabMismatch {
            expected: checkpoint.subvocab_hash,
            found: prepared.subvocab_hash,
        });
    }
    if checkpoint.uvocab_hash != uvocab_hash {
        return Err(Error::VocabMismatch {
            expected: checkpoint.uvocab_hash,
            found: uvocab_hash,
        });
    }
    Ok(())
}

/// Evaluates a checkpoint on each pruning cell, encoding the collection once.
pub fn evaluate<S: Scalar>(
    checkpoint: &Checkpoint<S>,
    prepared: &PreparedEval,
    uvocab_hash: u64,
    cells: &[PruneConfig],
) -> Result<Vec<MetricReport>> {
    check_hashes(checkpoint, prepared, uvocab_hash)?;
    prepared.encode(&checkpoint.params)?.grid(cells)
}

/// BM25 baseline over the same labels. L0 columns count distinct words.
pub fn evaluate_bm25(set: &EvalSet, params: Bm25Params) -> Result<MetricReport> {
    set.validate()?;
    if set.queries.is_empty() {
        return Err(Error::Empty("evaluation queries"));
    }
    let corpus: Vec<(DocId, Vec<String>)> = set
        .docs
        .iter()
        .enumerate()
        .map(|(i, d)| (i as DocId, unigrams(&d.text).collect()))
        .collect();
    let lookup: HashMap<&str, DocId> = set
        .docs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.doc_id.as_str(), i as DocId))
        .collect();
    let index = Bm25Index::build(&corpus)?;
    let queries: Vec<Vec<String>> = set.queries.iter().map(|q| unigrams(&q.text).collect()).collect();
    let rankings: Vec<Vec<DocId>> = queries
        .par_iter()
        .map(|q| index.search(q, params, 100).map(|r| r.into_iter().map(|(d, _)| d).collect()))
        .collect::<Result<_>>()?;
    let positives: Vec<Vec<DocId>> = set
        .queries
        .iter()
        .map(|q| q.positives.iter().map(|p| lookup[p.as_str()]).collect())
        .collect();
    let ids: Vec<String> = set.queries.iter().map(|q| q.query_id.clone()).collect();
    let distinct = |w: &Vec<String>| w.iter().collect::<HashSet<_>>().len() as f64;
    let l0_q = queries.iter().map(distinct).sum::<f64>() / queries.len() as f64;
    let l0_d = corpus.iter().map(|(_, w)| distinct(w)).sum::<f64>() / corpus.len() as f64;
    let flops = index.flops_metric(&queries)?;
    Ok(aggregate(0, 0, l0_q, l0_d, flops, score_rankings(&rankings, &positives, &ids)))
}
