//! Document-at-a-time inverted index over pruned document vectors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparsevec::{prune, SparseVec};
use crate::vocab::TermId;

pub type DocId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posting<S> {
    pub doc: DocId,
    pub impact: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex<S> {
    /// Nonempty posting lists keyed by term, each sorted by doc id.
    lists: BTreeMap<TermId, Vec<Posting<S>>>,
    num_docs: usize,
    /// Document pruning size the index was built with (0 = unpruned).
    pub dk: usize,
    pub vocab_hash: u64,
    external_ids: BTreeMap<DocId, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostingStats {
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
}

fn invert<S: Scalar>(docs: &[(DocId, SparseVec<S>)], dk: usize) -> BTreeMap<TermId, Vec<Posting<S>>> {
    let mut lists: BTreeMap<TermId, Vec<Posting<S>>> = BTreeMap::new();
    for (doc, v) in docs {
        for &(t, w) in prune(v, dk).entries() {
            lists.entry(t).or_default().push(Posting { doc: *doc, impact: w });
        }
    }
    lists
}

fn merge_shards<S: Scalar>(shards: Vec<BTreeMap<TermId, Vec<Posting<S>>>>) -> BTreeMap<TermId, Vec<Posting<S>>> {
    let mut merged: BTreeMap<TermId, Vec<Posting<S>>> = BTreeMap::new();
    for shard in shards {
        for (t, list) in shard {
            merged.entry(t).or_default().extend(list);
        }
    }
    for list in merged.values_mut() {
        list.sort_unstable_by_key(|p| p.doc);
    }
    merged
}

fn check_unique(docs: &[(DocId, impl Sized)]) -> Result<()> {
    let mut ids: Vec<DocId> = docs.iter().map(|d| d.0).collect();
    ids.sort_unstable();
    match ids.windows(2).find(|w| w[0] == w[1]) {
        Some(w) => Err(Error::DuplicateDocId(w[0])),
        None => Ok(()),
    }
}

impl<S: Scalar> InvertedIndex<S> {
    /// Prunes each document to its `dk` highest-weight terms and inverts.
    pub fn build(docs: &[(DocId, SparseVec<S>)], dk: usize) -> Result<Self> {
        check_unique(docs)?;
        Ok(Self::from_lists(merge_shards(vec![invert(docs, dk)]), docs.len(), dk))
    }

    /// Same result as [`InvertedIndex::build`], sharded over `shards` chunks on
    /// the current rayon pool.
    pub fn build_sharded(docs: &[(DocId, SparseVec<S>)], dk: usize, shards: usize) -> Result<Self> {
        check_unique(docs)?;
        let chunk = docs.len().div_ceil(shards.max(1)).max(1);
        let parts: Vec<_> = docs.par_chunks(chunk).map(|c| invert(c, dk)).collect();
        Ok(Self::from_lists(merge_shards(parts), docs.len(), dk))
    }

    fn from_lists(lists: BTreeMap<TermId, Vec<Posting<S>>>, num_docs: usize, dk: usize) -> Self {
        Self {
            lists,
            num_docs,
            dk,
            vocab_hash: 0,
            external_ids: BTreeMap::new(),
        }
    }

    pub fn with_vocab_hash(mut self, hash: u64) -> Self {
        self.vocab_hash = hash;
        self
    }

    pub fn with_external_ids(mut self, ids: impl IntoIterator<Item = (DocId, String)>) -> Self {
        self.external_ids = ids.into_iter().collect();
        self
    }

    pub fn external_id(&self, doc: DocId) -> Option<&str> {
        self.external_ids.get(&doc).map(String::as_str)
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn num_terms(&self) -> usize {
        self.lists.len()
    }

    pub fn total_postings(&self) -> usize {
        self.lists.values().map(Vec::len).sum()
    }

    /// Postings for `term`, empty when the term is not indexed.
    pub fn posting(&self, term: TermId) -> &[Posting<S>] {
        self.lists.get(&term).map_or(&[], Vec::as_slice)
    }

    pub fn posting_len(&self, term: TermId) -> usize {
        self.lists.get(&term).map_or(0, Vec::len)
    }

    pub fn terms(&self) -> impl Iterator<Item = (TermId, &[Posting<S>])> {
        self.lists.iter().map(|(&t, l)| (t, l.as_slice()))
    }

    pub fn max_doc(&self) -> Option<DocId> {
        self.lists.values().filter_map(|l| l.last().map(|p| p.doc)).max()
    }

    /// Reassembles one document's indexed terms from the postings.
    pub fn document(&self, doc: DocId) -> SparseVec<S> {
        let entries = self
            .lists
            .iter()
            .filter_map(|(&t, l)| {
                l.binary_search_by_key(&doc, |p| p.doc)
                    .ok()
                    .map(|i| (t, l[i].impact))
            })
            .collect();
        SparseVec::from_entries(entries).expect("indexed impacts are positive")
    }

    pub fn posting_lengths(&self) -> Vec<usize> {
        self.lists.values().map(Vec::len).collect()
    }

    /// Population mean, variance and standard deviation of posting-list
    /// lengths over terms with at least one posting.
    pub fn posting_stats(&self) -> Result<PostingStats> {
        posting_stats_of(&self.posting_lengths())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(S::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_docs as u64).to_le_bytes());
        out.extend_from_slice(&(self.lists.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        out.extend_from_slice(&(self.dk as u64).to_le_bytes());
        for (&t, list) in &self.lists {
            out.extend_from_slice(&t.to_le_bytes());
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            let mut prev = 0;
            for p in list {
                out.extend_from_slice(&(p.doc - prev).to_le_bytes());
                prev = p.doc;
            }
            for p in list {
                p.impact.write_le(&mut out);
            }
        }
        out.extend_from_slice(&(self.external_ids.len() as u64).to_le_bytes());
        for (&doc, name) in &self.external_ids {
            out.extend_from_slice(&doc.to_le_bytes());
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format { what: "index", reason };
        let mut r = Reader::new(bytes, "index");
        if r.take(8)? != INDEX_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let width = r.u32()? as usize;
        if width != S::BYTES {
            return Err(bad(format!("scalar width {width} does not match {}", S::BYTES)));
        }
        let num_docs = r.u64()? as usize;
        let n_terms = r.u64()?;
        let vocab_hash = r.u64()?;
        let dk = r.u64()? as usize;
        let mut lists = BTreeMap::new();
        let mut last_term = None;
        for _ in 0..n_terms {
            let t = r.u32()?;
            if last_term.is_some_and(|prev| prev >= t) {
                return Err(bad("terms out of order".into()));
            }
            last_term = Some(t);
            let len = r.u32()? as usize;
            if len == 0 {
                return Err(bad(format!("empty posting list for term {t}")));
            }
            let mut docs = Vec::with_capacity(len);
            let mut acc: DocId = 0;
            for k in 0..len {
                let delta = r.u32()?;
                if k > 0 && delta == 0 {
                    return Err(bad(format!("doc ids not strictly increasing for term {t}")));
                }
                acc = acc.checked_add(delta).ok_or_else(|| bad("doc id overflow".into()))?;
                docs.push(acc);
            }
            let mut list = Vec::with_capacity(len);
            for doc in docs {
                let impact = S::read_le(r.take(S::BYTES)?);
                if !(impact.is_finite() && impact > S::zero()) {
                    return Err(bad(format!("non-positive impact for term {t}")));
                }
                list.push(Posting { doc, impact });
            }
            lists.insert(t, list);
        }
        let n_ext = r.u64()?;
        let mut external_ids = BTreeMap::new();
        for _ in 0..n_ext {
            let doc = r.u32()?;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|e| bad(e.to_string()))?;
            external_ids.insert(doc, name.to_string());
        }
        r.finish()?;
        Ok(Self {
            lists,
            num_docs,
            dk,
            vocab_hash,
            external_ids,
        })
    }
}

const INDEX_MAGIC: &[u8; 8] = b"LSRINDEX";
const INDEX_VERSION: u32 = 1;

pub fn posting_stats_of(lengths: &[usize]) -> Result<PostingStats> {
    if lengths.is_empty() {
        return Err(Error::Empty("index has no postings"));
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<usize>() as f64 / n;
    let variance = lengths.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(PostingStats {
        mean,
        variance,
        std: variance.sqrt(),
    })
}
