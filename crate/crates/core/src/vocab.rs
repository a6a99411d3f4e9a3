//! Subword tokenization, expanded unigram vocabulary construction and
//! masking plans for expanded-vocabulary MLM pretraining.
//!
//! The subword table is segmented greedily (longest match first, word-internal
//! pieces carry the `##` prefix). The expanded vocabulary `U` holds the most
//! frequent normalized unigrams of a corpus, each with its subword
//! decomposition so the MLM head rows can be built from the subword head.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digest::hash64;
use crate::error::{Error, Result};

pub type SubwordId = u32;
pub type TermId = u32;

pub const CONTINUATION: &str = "##";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

/// Fraction of expanded-vocabulary occurrences selected per title, in percent.
pub const MASK_PERCENT: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    lookup: HashMap<String, SubwordId>,
    pad: SubwordId,
    unk: SubwordId,
    mask: SubwordId,
    max_piece_chars: usize,
}

impl SubwordVocab {
    /// Builds from pieces listed in id order. `[PAD]`, `[UNK]` and `[MASK]`
    /// must be present.
    pub fn new<I, T>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let pieces: Vec<String> = pieces.into_iter().map(Into::into).collect();
        let mut lookup = HashMap::with_capacity(pieces.len());
        for (id, piece) in pieces.iter().enumerate() {
            if piece.is_empty() || piece.contains(['\t', '\n']) {
                return Err(Error::InvalidVocab(format!("bad subword {piece:?} at id {id}")));
            }
            if lookup.insert(piece.clone(), id as SubwordId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate subword {piece:?}")));
            }
        }
        let reserved = |name: &str| {
            lookup
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidVocab(format!("missing reserved token {name}")))
        };
        let (pad, unk, mask) = (reserved(PAD)?, reserved(UNK)?, reserved(MASK)?);
        let max_piece_chars = pieces
            .iter()
            .map(|p| p.strip_prefix(CONTINUATION).unwrap_or(p).chars().count())
            .max()
            .unwrap_or(0);
        Ok(Self {
            pieces,
            lookup,
            pad,
            unk,
            mask,
            max_piece_chars,
        })
    }

    /// Builds from `(piece, id)` entries in any order; ids must be dense.
    pub fn from_entries(entries: Vec<(String, SubwordId)>) -> Result<Self> {
        let n = entries.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        for (piece, id) in entries {
            let slot = slots
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidVocab(format!("id {id} out of dense range 0..{n}")))?;
            if slot.replace(piece).is_some() {
                return Err(Error::InvalidVocab(format!("id {id} assigned twice")));
            }
        }
        Self::new(slots.into_iter().map(|s| s.expect("dense ids fill every slot")))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pad_id(&self) -> SubwordId {
        self.pad
    }

    pub fn unk_id(&self) -> SubwordId {
        self.unk
    }

    pub fn mask_id(&self) -> SubwordId {
        self.mask
    }

    pub fn is_reserved(&self, id: SubwordId) -> bool {
        id == self.pad || id == self.unk || id == self.mask
    }

    pub fn id(&self, piece: &str) -> Option<SubwordId> {
        self.lookup.get(piece).copied()
    }

    pub fn piece(&self, id: SubwordId) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Ids usable as random replacements during masking.
    pub fn non_reserved_ids(&self) -> Vec<SubwordId> {
        (0..self.len() as SubwordId)
            .filter(|&id| !self.is_reserved(id))
            .collect()
    }

    /// Greedy longest-match segmentation of a single word. `None` when some
    /// span cannot be matched.
    pub fn segment_word(&self, word: &str) -> Option<Vec<SubwordId>> {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.is_empty() {
            return Some(Vec::new());
        }
        let byte_at = |ci: usize| chars.get(ci).map_or(word.len(), |&(b, _)| b);
        let mut out = Vec::new();
        let mut start = 0;
        let mut key = String::new();
        while start < chars.len() {
            let mut end = chars.len().min(start + self.max_piece_chars);
            let mut found = None;
            while end > start {
                key.clear();
                if start > 0 {
                    key.push_str(CONTINUATION);
                }
                key.push_str(&word[byte_at(start)..byte_at(end)]);
                if let Some(&id) = self.lookup.get(key.as_str()) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            out.push(found?);
            start = end;
        }
        Some(out)
    }

    /// Segments one normalized word, falling back to `[UNK]`.
    pub fn tokenize_word(&self, word: &str) -> Vec<SubwordId> {
        self.segment_word(word).unwrap_or_else(|| vec![self.unk])
    }

    /// Writes `piece<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, piece) in self.pieces.iter().enumerate() {
            let _ = writeln!(out, "{piece}\t{id}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: &str| Error::Parse {
                what: "subword vocab",
                line: i + 1,
                reason: reason.to_string(),
            };
            let (piece, id) = line.split_once('\t').ok_or_else(|| parse_err("expected piece<TAB>id"))?;
            let id = id.parse().map_err(|_| parse_err("bad id"))?;
            entries.push((piece.to_string(), id));
        }
        Self::from_entries(entries)
    }

    pub fn content_hash(&self) -> u64 {
        hash64(self.to_tsv().as_bytes())
    }
}

/// Lowercases and strips punctuation at both edges. May return an empty string.
pub fn normalize_unigram(raw: &str) -> String {
    raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Normalized whitespace unigrams of `text`, empty results dropped.
pub fn unigrams(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(normalize_unigram)
        .filter(|w| !w.is_empty())
}

/// Tokenizes text into subword ids, word by word.
pub fn tokenize(text: &str, vocab: &SubwordVocab) -> Vec<SubwordId> {
    unigrams(text)
        .flat_map(|w| vocab.tokenize_word(&w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedTerm {
    pub text: String,
    pub decomposition: Vec<SubwordId>,
    pub freq: u64,
}

/// The expanded output vocabulary `U`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedVocab {
    terms: Vec<ExpandedTerm>,
    lookup: HashMap<String, TermId>,
    /// Set when the corpus had fewer distinct unigrams than requested.
    pub short: bool,
}

impl ExpandedVocab {
    pub fn from_terms(terms: Vec<ExpandedTerm>, subvocab: &SubwordVocab) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(terms.len());
        for (id, term) in terms.iter().enumerate() {
            if term.decomposition.is_empty() {
                return Err(Error::InvalidVocab(format!("term {:?} has empty decomposition", term.text)));
            }
            if let Some(bad) = term.decomposition.iter().find(|&&s| s as usize >= subvocab.len()) {
                return Err(Error::InvalidVocab(format!(
                    "term {:?} references subword {bad} outside 0..{}",
                    term.text,
                    subvocab.len()
                )));
            }
            if lookup.insert(term.text.clone(), id as TermId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate term {:?}", term.text)));
            }
        }
        Ok(Self {
            terms,
            lookup,
            short: false,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[ExpandedTerm] {
        &self.terms
    }

    pub fn term(&self, id: TermId) -> Option<&ExpandedTerm> {
        self.terms.get(id as usize)
    }

    pub fn id(&self, unigram: &str) -> Option<TermId> {
        self.lookup.get(unigram).copied()
    }

    /// Writes `unigram<TAB>term_id<TAB>freq<TAB>subword ids` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, t) in self.terms.iter().enumerate() {
            let ids: Vec<String> = t.decomposition.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", t.text, id, t.freq, ids.join(" "));
        }
        out
    }

    pub fn from_tsv(text: &str, subvocab: &SubwordVocab) -> Result<Self> {
        let mut terms = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: &str| Error::Parse {
                what: "expanded vocab",
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err("expected 4 tab-separated fields"));
            }
            let id: usize = fields[1].parse().map_err(|_| parse_err("bad term id"))?;
            if id != terms.len() {
                return Err(parse_err("term ids must be dense and in order"));
            }
            let freq = fields[2].parse().map_err(|_| parse_err("bad frequency"))?;
            let decomposition = fields[3]
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| parse_err("bad subword id")))
                .collect::<Result<Vec<_>>>()?;
            terms.push(ExpandedTerm {
                text: fields[0].to_string(),
                decomposition,
                freq,
            });
        }
        Self::from_terms(terms, subvocab)
    }

    pub fn content_hash(&self) -> u64 {
        hash64(self.to_tsv().as_bytes())
    }
}

/// Unigram frequency table. Shards can be counted independently and merged
/// in any order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnigramCounts(pub HashMap<String, u64>);

impl UnigramCounts {
    pub fn from_titles<'a, I>(titles: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts = HashMap::new();
        for title in titles {
            for w in unigrams(title) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        Self(counts)
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (w, c) in other.0 {
            *self.0.entry(w).or_insert(0) += c;
        }
        self
    }

    /// The `size` most frequent unigrams; ties broken by the unigram string.
    pub fn top(&self, size: usize) -> Vec<(String, u64)> {
        let mut all: Vec<(String, u64)> = self.0.iter().map(|(w, &c)| (w.clone(), c)).collect();
        all.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(size);
        all
    }
}

pub fn build_expanded_vocab<'a, I>(corpus: I, subvocab: &SubwordVocab, size: usize) -> Result<ExpandedVocab>
where
    I: IntoIterator<Item = &'a str>,
{
    build_from_counts(&UnigramCounts::from_titles(corpus), subvocab, size)
}

pub fn build_from_counts(counts: &UnigramCounts, subvocab: &SubwordVocab, size: usize) -> Result<ExpandedVocab> {
    if size == 0 {
        return Err(Error::InvalidParameter("expanded vocabulary size must be >= 1".into()));
    }
    if counts.0.is_empty() {
        return Err(Error::Empty("corpus has no unigrams"));
    }
    let top = counts.top(size);
    let short = top.len() < size;
    let terms = top
        .into_iter()
        .map(|(text, freq)| ExpandedTerm {
            decomposition: subvocab.tokenize_word(&text),
            text,
            freq,
        })
        .collect();
    let mut vocab = ExpandedVocab::from_terms(terms, subvocab)?;
    vocab.short = short;
    Ok(vocab)
}

/// One occurrence of an expanded-vocabulary term in a tokenized title.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermOccurrence {
    pub span: Range<usize>,
    pub term: TermId,
}

/// A tokenized title annotated with the spans of its `U` terms.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotatedTitle {
    pub tokens: Vec<SubwordId>,
    pub occurrences: Vec<TermOccurrence>,
}

impl AnnotatedTitle {
    /// Tokenizes `text`, truncating to `max_len` subwords. Occurrences cut by
    /// truncation are dropped.
    pub fn new(text: &str, subvocab: &SubwordVocab, uvocab: &ExpandedVocab, max_len: usize) -> Self {
        let mut title = Self::default();
        for word in unigrams(text) {
            let pieces = subvocab.tokenize_word(&word);
            let start = title.tokens.len();
            if start + pieces.len() > max_len {
                let room = max_len - start;
                title.tokens.extend_from_slice(&pieces[..room]);
                break;
            }
            title.tokens.extend_from_slice(&pieces);
            if let Some(term) = uvocab.id(&word) {
                title.occurrences.push(TermOccurrence {
                    span: start..title.tokens.len(),
                    term,
                });
            }
        }
        title
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    Masked,
    Random,
    Unchanged,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedOccurrence {
    pub span: Range<usize>,
    pub action: MaskAction,
    pub label: TermId,
    /// Replacement ids for `Random`, one per position in `span`.
    pub replacement: Vec<SubwordId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    pub selected: Vec<MaskedOccurrence>,
}

/// Number of occurrences selected from a title with `n` term occurrences.
pub fn masked_count(n: usize) -> usize {
    (n * MASK_PERCENT / 100).max(1)
}

/// Chooses which term occurrences to corrupt. Exactly `masked_count(n)`
/// occurrences are drawn without replacement, then each is masked (80%),
/// replaced by random subwords (10%) or left unchanged (10%).
pub fn plan_masking<R: Rng + ?Sized>(title: &AnnotatedTitle, subvocab: &SubwordVocab, rng: &mut R) -> Result<MaskingPlan> {
    let n = title.occurrences.len();
    if n == 0 {
        return Err(Error::NoTermOccurrences);
    }
    let candidates = subvocab.non_reserved_ids();
    if candidates.is_empty() {
        return Err(Error::InvalidVocab("no non-reserved subwords for random replacement".into()));
    }
    let mut picked = sample(rng, n, masked_count(n)).into_vec();
    picked.sort_unstable();
    let selected = picked
        .into_iter()
        .map(|i| {
            let occ = &title.occurrences[i];
            let u: f64 = rng.gen();
            let action = if u < 0.8 {
                MaskAction::Masked
            } else if u < 0.9 {
                MaskAction::Random
            } else {
                MaskAction::Unchanged
            };
            let replacement = match action {
                MaskAction::Random => occ
                    .span
                    .clone()
                    .map(|_| candidates[rng.gen_range(0..candidates.len())])
                    .collect(),
                _ => Vec::new(),
            };
            MaskedOccurrence {
                span: occ.span.clone(),
                action,
                label: occ.term,
                replacement,
            }
        })
        .collect();
    Ok(MaskingPlan { selected })
}

impl MaskingPlan {
    /// Corrupted input tokens and per-position labels. Every position of a
    /// selected occurrence is labeled with the occurrence's term.
    pub fn apply(&self, tokens: &[SubwordId], mask_id: SubwordId) -> (Vec<SubwordId>, Vec<(usize, TermId)>) {
        let mut input = tokens.to_vec();
        let mut labels = Vec::new();
        for occ in &self.selected {
            for (k, pos) in occ.span.clone().enumerate() {
                match occ.action {
                    MaskAction::Masked => input[pos] = mask_id,
                    MaskAction::Random => input[pos] = occ.replacement[k],
                    MaskAction::Unchanged => {}
                }
                labels.push((pos, occ.label));
            }
        }
        (input, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> SubwordVocab {
        SubwordVocab::new([PAD, UNK, MASK, "lo", "##ve", "l", "##o", "a", "b", "c", "x"]).unwrap()
    }

    #[test]
    fn love_splits_into_two_pieces() {
        let v = vocab();
        assert_eq!(tokenize("love", &v), vec![v.id("lo").unwrap(), v.id("##ve").unwrap()]);
    }

    #[test]
    fn greedy_prefers_longest_prefix() {
        let v = vocab();
        // "lo" beats "l" + "##o"
        assert_eq!(v.segment_word("lo"), Some(vec![v.id("lo").unwrap()]));
    }

    #[test]
    fn empty_and_unknown() {
        let v = vocab();
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("zzz", &v), vec![v.unk_id()]);
        assert_eq!(tokenize("a zzz b", &v), vec![v.id("a").unwrap(), v.unk_id(), v.id("b").unwrap()]);
    }

    #[test]
    fn normalization_strips_edges_only() {
        assert_eq!(normalize_unigram("\"Hello,"), "hello");
        assert_eq!(normalize_unigram("e-mail!"), "e-mail");
        assert_eq!(normalize_unigram("..."), "");
    }

    #[test]
    fn missing_reserved_or_duplicate_rejected() {
        assert!(SubwordVocab::new(["a", "b"]).is_err());
        assert!(SubwordVocab::new([PAD, UNK, MASK, "a", "a"]).is_err());
        assert!(SubwordVocab::from_entries(vec![(PAD.into(), 0), (UNK.into(), 2)]).is_err());
    }

    #[test]
    fn expanded_vocab_frequency_and_ties() {
        let v = vocab();
        let u = build_expanded_vocab(["a b", "a c", "a"], &v, 2).unwrap();
        let got: Vec<(&str, u64)> = u.terms().iter().map(|t| (t.text.as_str(), t.freq)).collect();
        assert_eq!(got, vec![("a", 3), ("b", 1)]);
        assert!(!u.short);

        let modal = build_expanded_vocab(["c b c", "b c"], &v, 1).unwrap();
        assert_eq!(modal.terms()[0].text, "c");

        let tiny = build_expanded_vocab(["x"], &v, 5).unwrap();
        assert_eq!(tiny.len(), 1);
        assert!(tiny.short);
    }

    #[test]
    fn expanded_vocab_rejects_bad_requests() {
        let v = vocab();
        assert!(build_expanded_vocab(["a"], &v, 0).is_err());
        assert!(build_expanded_vocab(["   ", ""], &v, 3).is_err());
    }

    #[test]
    fn decompositions_roundtrip_through_tokenizer() {
        let v = vocab();
        let u = build_expanded_vocab(["love lo a zzz", "b love"], &v, 10).unwrap();
        for t in u.terms() {
            assert_eq!(tokenize(&t.text, &v), t.decomposition, "{}", t.text);
        }
    }

    #[test]
    fn shard_merge_is_order_independent() {
        let a = UnigramCounts::from_titles(["a b", "c"]);
        let b = UnigramCounts::from_titles(["a a", "d"]);
        assert_eq!(a.clone().merge(b.clone()), b.merge(a));
    }

    #[test]
    fn tsv_roundtrip() {
        let v = vocab();
        assert_eq!(SubwordVocab::from_tsv(&v.to_tsv()).unwrap(), v);
        let u = build_expanded_vocab(["love a b", "a"], &v, 3).unwrap();
        let back = ExpandedVocab::from_tsv(&u.to_tsv(), &v).unwrap();
        assert_eq!(back.to_tsv(), u.to_tsv());
    }

    fn title_with(n: usize) -> AnnotatedTitle {
        AnnotatedTitle {
            tokens: (0..2 * n as u32).map(|i| 3 + i % 8).collect(),
            occurrences: (0..n)
                .map(|i| TermOccurrence {
                    span: 2 * i..2 * i + 2,
                    term: i as TermId,
                })
                .collect(),
        }
    }

    #[test]
    fn selection_counts() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(plan_masking(&title_with(20), &v, &mut rng).unwrap().selected.len(), 3);
        assert_eq!(plan_masking(&title_with(4), &v, &mut rng).unwrap().selected.len(), 1);
        assert!(matches!(
            plan_masking(&title_with(0), &v, &mut rng),
            Err(Error::NoTermOccurrences)
        ));
    }

    #[test]
    fn masked_occurrence_covers_every_subword() {
        let v = vocab();
        let title = title_with(40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let plan = plan_masking(&title, &v, &mut rng).unwrap();
            let (input, labels) = plan.apply(&title.tokens, v.mask_id());
            for occ in &plan.selected {
                for pos in occ.span.clone() {
                    assert!(labels.contains(&(pos, occ.label)));
                    match occ.action {
                        MaskAction::Masked => assert_eq!(input[pos], v.mask_id()),
                        MaskAction::Unchanged => assert_eq!(input[pos], title.tokens[pos]),
                        MaskAction::Random => assert!(!v.is_reserved(input[pos])),
                    }
                }
            }
        }
    }

    #[test]
    fn annotation_drops_truncated_occurrences() {
        let v = vocab();
        let u = build_expanded_vocab(["love love a"], &v, 5).unwrap();
        let t = AnnotatedTitle::new("love love a", &v, &u, 3);
        assert_eq!(t.tokens.len(), 3);
        assert_eq!(t.occurrences.len(), 1);
        assert_eq!(t.occurrences[0].span, 0..2);
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let v = vocab();
        let title = title_with(30);
        let a = plan_masking(&title, &v, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = plan_masking(&title, &v, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }
}
