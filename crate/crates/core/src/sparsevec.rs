//! Sparse term-weight vectors over the expanded vocabulary, static top-k
//! pruning and L0 accounting.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocab::TermId;

/// Nonnegative sparse vector: strictly increasing term ids, strictly positive
/// finite weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec<S> {
    entries: Vec<(TermId, S)>,
}

impl<S: Scalar> SparseVec<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Accepts entries in any order; zeros are dropped. Rejects duplicates and
    /// negative or non-finite weights.
    pub fn from_entries(mut entries: Vec<(TermId, S)>) -> Result<Self> {
        entries.sort_unstable_by_key(|e| e.0);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParameter(format!("duplicate term {} in sparse vector", w[0].0)));
        }
        if let Some(&(t, w)) = entries.iter().find(|e| !e.1.is_finite() || e.1 < S::zero()) {
            return Err(Error::InvalidParameter(format!("term {t} has invalid weight {w}")));
        }
        entries.retain(|e| e.1 > S::zero());
        Ok(Self { entries })
    }

    /// Nonzero entries of a dense vector indexed by term id.
    pub fn from_dense(dense: &[S]) -> Result<Self> {
        let entries = dense
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != S::zero())
            .map(|(t, &w)| (t as TermId, w))
            .collect();
        Self::from_entries(entries)
    }

    pub fn to_dense(&self, dim: usize) -> Vec<S> {
        let mut out = vec![S::zero(); dim];
        for &(t, w) in &self.entries {
            out[t as usize] = w;
        }
        out
    }

    pub fn entries(&self) -> &[(TermId, S)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_term(&self) -> Option<TermId> {
        self.entries.last().map(|e| e.0)
    }

    pub fn get(&self, term: TermId) -> Option<S> {
        self.entries
            .binary_search_by_key(&term, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }
}

/// Inner product over shared terms, accumulated in ascending term order.
pub fn dot<S: Scalar>(a: &SparseVec<S>, b: &SparseVec<S>) -> S {
    let (a, b) = (a.entries(), b.entries());
    let (mut i, mut j) = (0, 0);
    let mut acc = S::zero();
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Orders entries by weight descending, ties by ascending term id.
pub(crate) fn by_weight_desc<S: Scalar>(a: &(TermId, S), b: &(TermId, S)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Keeps the `k` highest-weight entries (ties to the lowest term id).
/// `k == 0` means unpruned.
pub fn prune<S: Scalar>(v: &SparseVec<S>, k: usize) -> SparseVec<S> {
    if k == 0 || k >= v.nnz() {
        return v.clone();
    }
    let mut entries = v.entries.clone();
    entries.select_nth_unstable_by(k - 1, by_weight_desc);
    entries.truncate(k);
    entries.sort_unstable_by_key(|e| e.0);
    SparseVec { entries }
}

/// Maximum retained query and document terms (0 = unpruned).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneConfig {
    pub qk: usize,
    pub dk: usize,
}

impl PruneConfig {
    pub fn new(qk: usize, dk: usize) -> Self {
        Self { qk, dk }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub l0_q: f64,
    pub l0_d: f64,
}

pub fn mean_nnz_after_prune<S: Scalar>(vectors: &[SparseVec<S>], k: usize) -> Result<f64> {
    if vectors.is_empty() {
        return Err(Error::Empty("vector collection"));
    }
    let total: usize = vectors
        .iter()
        .map(|v| if k == 0 { v.nnz() } else { v.nnz().min(k) })
        .sum();
    Ok(total as f64 / vectors.len() as f64)
}

pub fn l0_report<S: Scalar>(queries: &[SparseVec<S>], docs: &[SparseVec<S>], cfg: PruneConfig) -> Result<PruneReport> {
    Ok(PruneReport {
        l0_q: mean_nnz_after_prune(queries, cfg.qk)?,
        l0_d: mean_nnz_after_prune(docs, cfg.dk)?,
    })
}

/// Formats with six significant digits, `%g` style.
pub fn format_weight(w: f64) -> String {
    let sci = format!("{w:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
        let mut out = String::new();
        if exp < 0 {
            out.push_str("0.");
            out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
            out.push_str(&digits);
        } else {
            let split = exp as usize + 1;
            out.push_str(&digits[..split]);
            out.push('.');
            out.push_str(&digits[split..]);
        }
        let trimmed = out.trim_end_matches('0').trim_end_matches('.');
        if trimmed.is_empty() {
            "0".to_string()
        } else {
            trimmed.to_string()
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

/// `id<TAB>term:weight term:weight ...`, terms ascending.
pub fn format_line<S: Scalar>(id: &str, v: &SparseVec<S>) -> String {
    let mut out = String::with_capacity(id.len() + 12 * v.nnz());
    out.push_str(id);
    out.push('\t');
    for (i, &(t, w)) in v.entries().iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{t}:{}", format_weight(w.as_f64()));
    }
    out
}

pub fn parse_line<S: Scalar>(line: &str, lineno: usize) -> Result<(String, SparseVec<S>)> {
    let err = |reason: String| Error::Parse {
        what: "sparse vector",
        line: lineno,
        reason,
    };
    let (id, rest) = line.split_once('\t').ok_or_else(|| err("expected id<TAB>terms".into()))?;
    let mut entries = Vec::new();
    for tok in rest.split(' ').filter(|s| !s.is_empty()) {
        let (t, w) = tok.split_once(':').ok_or_else(|| err(format!("bad entry {tok:?}")))?;
        let t: TermId = t.parse().map_err(|_| err(format!("bad term id {t:?}")))?;
        let w: f64 = w.parse().map_err(|_| err(format!("bad weight {w:?}")))?;
        if !(w.is_finite() && w > 0.0) {
            return Err(err(format!("weight must be finite and positive, got {w}")));
        }
        entries.push((t, S::lit(w)));
    }
    if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(err("terms must be strictly ascending".into()));
    }
    Ok((id.to_string(), SparseVec::from_entries(entries).map_err(|e| err(e.to_string()))?))
}

pub fn write_vectors<S: Scalar>(items: &[(String, SparseVec<S>)]) -> String {
    let mut out = String::new();
    for (id, v) in items {
        out.push_str(&format_line(id, v));
        out.push('\n');
    }
    out
}

pub fn read_vectors<S: Scalar>(text: &str) -> Result<Vec<(String, SparseVec<S>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(entries: &[(TermId, f64)]) -> SparseVec<f64> {
        SparseVec::from_entries(entries.to_vec()).unwrap()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&sv(&[(1, 1.0)]), &sv(&[(2, 5.0)])), 0.0);
        assert_eq!(dot(&sv(&[(1, 2.0), (3, 1.0)]), &sv(&[(3, 4.0)])), 4.0);
        let a = sv(&[(0, 3.0), (9, 4.0)]);
        assert_eq!(dot(&a, &a), 25.0);
    }

    #[test]
    fn prune_examples() {
        let v = sv(&[(0, 3.0), (1, 1.0), (2, 2.0)]);
        assert_eq!(prune(&v, 0), v);
        assert_eq!(prune(&v, 2), sv(&[(0, 3.0), (2, 2.0)]));
        assert_eq!(prune(&v, 3), v);
        assert_eq!(prune(&v, 9), v);
        assert_eq!(prune(&sv(&[(4, 2.0), (7, 2.0)]), 1), sv(&[(4, 2.0)]));
    }

    #[test]
    fn zeros_removed_and_invalid_rejected() {
        assert_eq!(sv(&[(1, 0.0), (2, 1.0)]).nnz(), 1);
        assert!(SparseVec::from_entries(vec![(1, -1.0f64)]).is_err());
        assert!(SparseVec::from_entries(vec![(1, f64::NAN)]).is_err());
        assert!(SparseVec::from_entries(vec![(1, 1.0f64), (1, 2.0)]).is_err());
    }

    #[test]
    fn l0_examples() {
        let ten = sv(&(0..10).map(|t| (t, 1.0 + t as f64)).collect::<Vec<_>>());
        let one = sv(&[(3, 1.0)]);
        let r = l0_report(&[one.clone(), ten.clone()], std::slice::from_ref(&ten), PruneConfig::new(5, 0)).unwrap();
        assert_eq!(r.l0_q, 3.0);
        assert_eq!(r.l0_d, 10.0);
        let r = l0_report(&[ten.clone(), ten.clone()], std::slice::from_ref(&one), PruneConfig::new(5, 5)).unwrap();
        assert_eq!(r.l0_q, 5.0);
        assert_eq!(r.l0_d, 1.0);
        let raw = l0_report(&[one.clone(), ten.clone()], &[one, ten], PruneConfig::default()).unwrap();
        assert_eq!((raw.l0_q, raw.l0_d), (5.5, 5.5));
        assert!(l0_report::<f64>(&[], &[sv(&[(1, 1.0)])], PruneConfig::default()).is_err());
    }

    #[test]
    fn weight_formatting() {
        assert_eq!(format_weight(1.0), "1");
        assert_eq!(format_weight(1.5), "1.5");
        assert_eq!(format_weight(0.000123456789), "0.000123457");
        assert_eq!(format_weight(123456.7), "123457");
        assert_eq!(format_weight(1234567.0), "1.23457e6");
        assert_eq!(format_weight(9.9999996), "10");
        assert_eq!(format_weight(1.0e-7), "1e-7");
    }

    #[test]
    fn text_line_roundtrip_is_byte_exact() {
        let v = sv(&[(2, 0.123456789), (10, 3.0), (11, 1e-9)]);
        let line = format_line("doc-1", &v);
        assert_eq!(line, "doc-1\t2:0.123457 10:3 11:1e-9");
        let (id, back) = parse_line::<f64>(&line, 1).unwrap();
        assert_eq!(id, "doc-1");
        assert_eq!(format_line(&id, &back), line);
        assert!(parse_line::<f64>("q\t3:1 2:1", 1).is_err());
        assert!(parse_line::<f64>("q\t3:0", 1).is_err());
        assert!(parse_line::<f64>("q\t3:inf", 1).is_err());
    }

    fn arb_vec() -> impl Strategy<Value = SparseVec<f64>> {
        proptest::collection::btree_map(0u32..60, 0.001f64..10.0, 0..30)
            .prop_map(|m| SparseVec::from_entries(m.into_iter().collect()).unwrap())
    }

    proptest! {
        #[test]
        fn prune_idempotent_and_sized(v in arb_vec(), k in 0usize..40) {
            let p = prune(&v, k);
            prop_assert_eq!(prune(&p, k), p.clone());
            if k > 0 {
                prop_assert_eq!(p.nnz(), k.min(v.nnz()));
            }
            prop_assert!(p.entries().windows(2).all(|w| w[0].0 < w[1].0));
        }

        #[test]
        fn pruning_never_raises_scores(q in arb_vec(), d in arb_vec(), qk in 0usize..20, dk in 0usize..20) {
            prop_assert!(dot(&prune(&q, qk), &prune(&d, dk)) <= dot(&q, &d));
        }

        #[test]
        fn dot_symmetric_and_additive(a in arb_vec(), b in arb_vec(), c in arb_vec()) {
            prop_assert_eq!(dot(&a, &b), dot(&b, &a));
            // split `a` into two disjoint halves by term parity
            let even = SparseVec::from_entries(a.entries().iter().copied().filter(|e| e.0 % 2 == 0).collect()).unwrap();
            let odd = SparseVec::from_entries(a.entries().iter().copied().filter(|e| e.0 % 2 == 1).collect()).unwrap();
            let whole = dot(&a, &c);
            prop_assert!((dot(&even, &c) + dot(&odd, &c) - whole).abs() <= 1e-9 * whole.max(1.0));
        }

        #[test]
        fn text_format_is_canonical(v in arb_vec()) {
            let line = format_line("x", &v);
            let (_, back) = parse_line::<f64>(&line, 1).unwrap();
            prop_assert_eq!(format_line("x", &back), line);
        }
    }
}
