//! Training objectives: in-batch negative (N-pair) ranking loss, FLOPS and
//! joint FLOPS sparsity regularizers, top-k logit masking and the masked-LM
//! cross-entropy over the expanded vocabulary.
//!
//! Losses take dense pooled vectors over the expanded vocabulary and return
//! dense gradients of the same shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::vocab::TermId;

/// Paired query and positive-document representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub queries: Vec<Vec<S>>,
    pub docs: Vec<Vec<S>>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(queries: Vec<Vec<S>>, docs: Vec<Vec<S>>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if queries.len() != docs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} queries but {} documents",
                queries.len(),
                docs.len()
            )));
        }
        let dim = queries[0].len();
        check_dim(&queries, dim)?;
        check_dim(&docs, dim)?;
        Ok(Self { queries, docs })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.queries[0].len()
    }
}

fn check_dim<S>(vectors: &[Vec<S>], dim: usize) -> Result<()> {
    match vectors.iter().position(|v| v.len() != dim) {
        Some(i) => Err(Error::DimensionMismatch(format!(
            "vector {i} has dimension {}, expected {dim}",
            vectors[i].len()
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub lambda_j: f64,
    /// Top-k masking of queries during training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_k: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_q: 0.0,
            lambda_d: 0.0,
            lambda_j: 0.0,
            q_k: None,
            d_k: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_q", self.lambda_q), ("lambda_d", self.lambda_d), ("lambda_j", self.lambda_j)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.q_k == Some(0) || self.d_k == Some(0) {
            return Err(Error::InvalidParameter("q_k and d_k must be >= 1 when set".into()));
        }
        Ok(())
    }
}

/// Loss value with gradients for each query and document vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad<S> {
    pub loss: S,
    pub grad_q: Vec<Vec<S>>,
    pub grad_d: Vec<Vec<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VecGrad<S> {
    pub loss: S,
    pub grad: Vec<Vec<S>>,
}

fn dense_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// In-batch negative loss: softmax over all documents of the batch, the
/// query's own positive counted once in the denominator.
pub fn npair_loss<S: Scalar>(batch: &Batch<S>) -> Result<PairGrad<S>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let dim = batch.dim();
    let inv_n = S::one() / S::from_usize_lossy(n);
    let mut loss = S::zero();
    let mut grad_q = vec![vec![S::zero(); dim]; n];
    let mut grad_d = vec![vec![S::zero(); dim]; n];
    let mut scores = vec![S::zero(); n];
    for (i, q) in batch.queries.iter().enumerate() {
        for (s, d) in scores.iter_mut().zip(&batch.docs) {
            *s = dense_dot(q, d);
        }
        let lse = log_sum_exp(&scores);
        loss += lse - scores[i];
        for (j, d) in batch.docs.iter().enumerate() {
            let p = (scores[j] - lse).exp();
            let coef = (if i == j { p - S::one() } else { p }) * inv_n;
            if coef == S::zero() {
                continue;
            }
            for k in 0..dim {
                grad_q[i][k] += coef * d[k];
                grad_d[j][k] += coef * q[k];
            }
        }
    }
    Ok(PairGrad {
        loss: loss * inv_n,
        grad_q,
        grad_d,
    })
}

fn mean_vector<S: Scalar>(vectors: &[Vec<S>]) -> Vec<S> {
    let dim = vectors[0].len();
    let mut mean = vec![S::zero(); dim];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let inv = S::one() / S::from_usize_lossy(vectors.len());
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// `mean(T) . mean(T)`.
pub fn flops_loss<S: Scalar>(vectors: &[Vec<S>]) -> Result<VecGrad<S>> {
    if vectors.is_empty() {
        return Err(Error::Empty("FLOPS batch"));
    }
    check_dim(vectors, vectors[0].len())?;
    let mean = mean_vector(vectors);
    let loss = dense_dot(&mean, &mean);
    let scale = S::lit(2.0) / S::from_usize_lossy(vectors.len());
    let row: Vec<S> = mean.iter().map(|&m| m * scale).collect();
    Ok(VecGrad {
        loss,
        grad: vec![row; vectors.len()],
    })
}

/// `mean(Q) . mean(D)`.
pub fn joint_flops_loss<S: Scalar>(q_vectors: &[Vec<S>], d_vectors: &[Vec<S>]) -> Result<PairGrad<S>> {
    if q_vectors.is_empty() || d_vectors.is_empty() {
        return Err(Error::Empty("joint FLOPS batch"));
    }
    let dim = q_vectors[0].len();
    check_dim(q_vectors, dim)?;
    check_dim(d_vectors, dim)?;
    let mean_q = mean_vector(q_vectors);
    let mean_d = mean_vector(d_vectors);
    let loss = dense_dot(&mean_q, &mean_d);
    let inv_q = S::one() / S::from_usize_lossy(q_vectors.len());
    let inv_d = S::one() / S::from_usize_lossy(d_vectors.len());
    let row_q: Vec<S> = mean_d.iter().map(|&m| m * inv_q).collect();
    let row_d: Vec<S> = mean_q.iter().map(|&m| m * inv_d).collect();
    Ok(PairGrad {
        loss,
        grad_q: vec![row_q; q_vectors.len()],
        grad_d: vec![row_d; d_vectors.len()],
    })
}

/// Keeps the `k` largest nonzero entries (ties to the lowest term id) and
/// zeroes the rest. Returns the masked vector.
pub fn topk_mask<S: Scalar>(v: &[S], k: usize) -> Vec<S> {
    let mut nonzero: Vec<(TermId, S)> = v
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != S::zero())
        .map(|(t, &x)| (t as TermId, x))
        .collect();
    if k >= nonzero.len() {
        return v.to_vec();
    }
    if k > 0 {
        nonzero.select_nth_unstable_by(k - 1, crate::sparsevec::by_weight_desc);
    }
    let mut out = vec![S::zero(); v.len()];
    for &(t, x) in &nonzero[..k] {
        out[t as usize] = x;
    }
    out
}

/// Mean cross-entropy of softmax(logits) against the label at each labeled
/// position.
pub fn mlm_pretrain_loss<S: Scalar>(logits: &[Vec<S>], labels: &[TermId]) -> Result<VecGrad<S>> {
    if logits.is_empty() {
        return Err(Error::Empty("masked positions"));
    }
    if logits.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let inv = S::one() / S::from_usize_lossy(logits.len());
    let mut loss = S::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        let label = label as usize;
        if label >= row.len() {
            return Err(Error::InvalidParameter(format!("label {label} outside {} logits", row.len())));
        }
        let lse = log_sum_exp(row);
        loss += lse - row[label];
        let mut g: Vec<S> = row.iter().map(|&x| (x - lse).exp() * inv).collect();
        g[label] -= inv;
        grad.push(g);
    }
    Ok(VecGrad { loss: loss * inv, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLoss<S> {
    pub loss: S,
    pub npair: S,
    pub flops_q: S,
    pub flops_d: S,
    pub jflops: S,
    /// Gradients with respect to the unmasked input vectors.
    pub grad_q: Vec<Vec<S>>,
    pub grad_d: Vec<Vec<S>>,
}

fn axpy<S: Scalar>(acc: &mut [Vec<S>], scale: S, g: &[Vec<S>]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x += scale * y;
        }
    }
}

/// `npair + lambda_q*flops(Q) + lambda_d*flops(D) + lambda_j*jflops(Q, D)`
/// on top-k-masked vectors when masking is configured. Masked-out entries
/// receive zero gradient.
pub fn total_finetune_loss<S: Scalar>(batch: &Batch<S>, config: &LossConfig) -> Result<FinetuneLoss<S>> {
    config.validate()?;
    let mask_all = |vs: &[Vec<S>], k: Option<usize>| -> Vec<Vec<S>> {
        match k {
            Some(k) => vs.iter().map(|v| topk_mask(v, k)).collect(),
            None => vs.to_vec(),
        }
    };
    let masked = Batch {
        queries: mask_all(&batch.queries, config.q_k),
        docs: mask_all(&batch.docs, config.d_k),
    };
    let np = npair_loss(&masked)?;
    let mut grad_q = np.grad_q;
    let mut grad_d = np.grad_d;
    let mut loss = np.loss;
    let zero = S::zero();
    let (mut flops_q, mut flops_d, mut jflops) = (zero, zero, zero);
    if config.lambda_q > 0.0 {
        let f = flops_loss(&masked.queries)?;
        let w = S::lit(config.lambda_q);
        flops_q = f.loss;
        loss += w * f.loss;
        axpy(&mut grad_q, w, &f.grad);
    }
    if config.lambda_d > 0.0 {
        let f = flops_loss(&masked.docs)?;
        let w = S::lit(config.lambda_d);
        flops_d = f.loss;
        loss += w * f.loss;
        axpy(&mut grad_d, w, &f.grad);
    }
    if config.lambda_j > 0.0 {
        let f = joint_flops_loss(&masked.queries, &masked.docs)?;
        let w = S::lit(config.lambda_j);
        jflops = f.loss;
        loss += w * f.loss;
        axpy(&mut grad_q, w, &f.grad_q);
        axpy(&mut grad_d, w, &f.grad_d);
    }
    for (g, m) in grad_q.iter_mut().zip(&masked.queries).chain(grad_d.iter_mut().zip(&masked.docs)) {
        for (x, &v) in g.iter_mut().zip(m) {
            if v == zero {
                *x = zero;
            }
        }
    }
    Ok(FinetuneLoss {
        loss,
        npair: np.loss,
        flops_q,
        flops_d,
        jflops,
        grad_q,
        grad_d,
    })
}
