//! Exact top-k retrieval over the inverted index, the BM25 baseline and the
//! posting-traversal cost metric.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{DocId, InvertedIndex};
use crate::scalar::Scalar;
use crate::sparsevec::{prune, SparseVec};

/// Evaluation queries with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<S> {
    queries: Vec<(String, SparseVec<S>)>,
}

impl<S: Scalar> QuerySet<S> {
    pub fn new(queries: Vec<(String, SparseVec<S>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some((id, _)) = queries.iter().find(|(id, _)| !seen.insert(id.as_str())) {
            return Err(Error::InvalidParameter(format!("duplicate query id {id:?}")));
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, SparseVec<S>)> {
        self.queries.iter()
    }

    pub fn vectors(&self) -> Vec<SparseVec<S>> {
        self.queries.iter().map(|(_, v)| v.clone()).collect()
    }
}

/// Ranked hits, score descending with ties on ascending doc id.
pub type RankedList<S> = Vec<(DocId, S)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<S> {
    pub hits: RankedList<S>,
    /// Set when the pruned query had no terms.
    pub empty_query: bool,
}

pub fn rank_order<S: PartialOrd>(a: &(DocId, S), b: &(DocId, S)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Sorts by the ranking order and keeps the first `k`.
pub fn top_k<S: PartialOrd + Copy>(mut scored: Vec<(DocId, S)>, k: usize) -> RankedList<S> {
    if scored.len() > k && k > 0 {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored.truncate(k);
    scored
}

/// Reusable score accumulator sized to the index's doc id range.
pub struct Searcher<'a, S> {
    index: &'a InvertedIndex<S>,
    acc: Vec<S>,
    touched: Vec<DocId>,
}

impl<'a, S: Scalar> Searcher<'a, S> {
    pub fn new(index: &'a InvertedIndex<S>) -> Self {
        let size = index.max_doc().map_or(0, |d| d as usize + 1);
        Self {
            index,
            acc: vec![S::zero(); size],
            touched: Vec::new(),
        }
    }

    /// Exact top-`k` by inner product after pruning the query to `qk` terms.
    /// Terms are accumulated in ascending term order; zero scores are dropped.
    pub fn search(&mut self, query: &SparseVec<S>, qk: usize, k: usize) -> Result<SearchResult<S>> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        let q = prune(query, qk);
        if q.is_empty() {
            return Ok(SearchResult {
                hits: Vec::new(),
                empty_query: true,
            });
        }
        for &(t, qw) in q.entries() {
            for p in self.index.posting(t) {
                let slot = &mut self.acc[p.doc as usize];
                if *slot == S::zero() {
                    self.touched.push(p.doc);
                }
                *slot += qw * p.impact;
            }
        }
        let mut scored = Vec::with_capacity(self.touched.len());
        for &d in &self.touched {
            let s = std::mem::replace(&mut self.acc[d as usize], S::zero());
            if s > S::zero() {
                scored.push((d, s));
            }
        }
        self.touched.clear();
        Ok(SearchResult {
            hits: top_k(scored, k),
            empty_query: false,
        })
    }
}

pub fn search<S: Scalar>(index: &InvertedIndex<S>, query: &SparseVec<S>, qk: usize, k: usize) -> Result<SearchResult<S>> {
    Searcher::new(index).search(query, qk, k)
}

/// Total posting-list length traversed by the pruned queries, over
/// `|Q| * |D|`. Terms missing from the index contribute nothing.
pub fn flops_metric<S: Scalar>(index: &InvertedIndex<S>, queries: &[SparseVec<S>], qk: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if index.num_docs() == 0 {
        return Err(Error::Empty("document collection"));
    }
    let traversed: u64 = queries
        .iter()
        .flat_map(|q| prune(q, qk).entries().iter().map(|e| e.0).collect::<Vec<_>>())
        .map(|t| index.posting_len(t) as u64)
        .sum();
    Ok(traversed as f64 / (queries.len() as f64 * index.num_docs() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && (0.0..=1.0).contains(&self.b)) {
            return Err(Error::InvalidParameter(format!("BM25 needs k1 >= 0 and 0 <= b <= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Word-level inverted index with term frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    postings: BTreeMap<String, Vec<(DocId, u32)>>,
    doc_len: BTreeMap<DocId, u32>,
    total_len: u64,
}

impl Bm25Index {
    pub fn build(corpus: &[(DocId, Vec<String>)]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("BM25 corpus"));
        }
        let mut postings: BTreeMap<String, Vec<(DocId, u32)>> = BTreeMap::new();
        let mut doc_len = BTreeMap::new();
        let mut total_len = 0u64;
        for (doc, words) in corpus {
            if doc_len.insert(*doc, words.len() as u32).is_some() {
                return Err(Error::DuplicateDocId(*doc));
            }
            total_len += words.len() as u64;
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for w in words {
                *tf.entry(w.as_str()).or_insert(0) += 1;
            }
            for (w, c) in tf {
                postings.entry(w.to_string()).or_default().push((*doc, c));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|p| p.0);
        }
        Ok(Self {
            postings,
            doc_len,
            total_len,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.total_len as f64 / self.num_docs() as f64
    }

    pub fn df(&self, word: &str) -> usize {
        self.postings.get(word).map_or(0, Vec::len)
    }

    pub fn idf(&self, word: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.df(word) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Okapi BM25 over the distinct query words, exact top-k.
    pub fn search(&self, query: &[String], params: Bm25Params, k: usize) -> Result<RankedList<f64>> {
        params.validate()?;
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        let words: BTreeSet<&str> = query.iter().map(String::as_str).collect();
        let avg = self.avg_len();
        let mut scores: BTreeMap<DocId, f64> = BTreeMap::new();
        for w in words {
            let Some(list) = self.postings.get(w) else { continue };
            let idf = self.idf(w);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let len = self.doc_len[&doc] as f64;
                let norm = tf + params.k1 * (1.0 - params.b + params.b * len / avg);
                *scores.entry(doc).or_insert(0.0) += idf * tf * (params.k1 + 1.0) / norm;
            }
        }
        Ok(top_k(scores.into_iter().filter(|&(_, s)| s > 0.0).collect(), k))
    }

    /// The posting-traversal cost metric over the word-level index.
    pub fn flops_metric(&self, queries: &[Vec<String>]) -> Result<f64> {
        if queries.is_empty() {
            return Err(Error::Empty("query set"));
        }
        let traversed: u64 = queries
            .iter()
            .map(|q| {
                q.iter()
                    .map(String::as_str)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .map(|w| self.df(w) as u64)
                    .sum::<u64>()
            })
            .sum();
        Ok(traversed as f64 / (queries.len() as f64 * self.num_docs() as f64))
    }
}

pub fn bm25_search(corpus: &[(DocId, Vec<String>)], query: &[String], params: Bm25Params, k: usize) -> Result<RankedList<f64>> {
    Bm25Index::build(corpus)?.search(query, params, k)
}

pub fn flops_metric_bm25(corpus: &[(DocId, Vec<String>)], queries: &[Vec<String>]) -> Result<f64> {
    Bm25Index::build(corpus)?.flops_metric(queries)
}
