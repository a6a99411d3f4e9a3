//! Toy sparse encoder: subword embeddings, one mean-context tanh layer and an
//! MLM head over the expanded vocabulary, max-pooled through `log(1 + relu)`.

use num_traits::{FromPrimitive, Num};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparsevec::SparseVec;
use crate::vocab::{ExpandedVocab, SubwordId};

/// Longest accepted input, in subword tokens.
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_subwords: usize,
    pub hidden: usize,
    pub n_terms: usize,
}

impl ModelDims {
    pub fn new(n_subwords: usize, hidden: usize, n_terms: usize) -> Self {
        Self {
            n_subwords,
            hidden,
            n_terms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subwords == 0 || self.hidden == 0 || self.n_terms == 0 {
            return Err(Error::InvalidParameter(format!("model dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        self.n_subwords * h + h * h + h + self.n_terms * h + self.n_terms
    }
}

/// Encoder parameters, all matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub dims: ModelDims,
    /// `n_subwords x hidden`
    pub embedding: Vec<S>,
    /// `hidden x hidden`
    pub mix: Vec<S>,
    pub mix_bias: Vec<S>,
    /// `n_terms x hidden`
    pub head_weight: Vec<S>,
    pub head_bias: Vec<S>,
}

/// Gradients share the parameter layout.
pub type ModelGrads<S> = ModelParams<S>;

pub const PARAM_GROUPS: [&str; 5] = ["embedding", "mix", "mix_bias", "head_weight", "head_bias"];

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(dims: ModelDims) -> Self {
        let h = dims.hidden;
        Self {
            dims,
            embedding: vec![S::zero(); dims.n_subwords * h],
            mix: vec![S::zero(); h * h],
            mix_bias: vec![S::zero(); h],
            head_weight: vec![S::zero(); dims.n_terms * h],
            head_bias: vec![S::zero(); dims.n_terms],
        }
    }

    pub fn groups(&self) -> [(&'static str, &[S]); 5] {
        [
            (PARAM_GROUPS[0], &self.embedding),
            (PARAM_GROUPS[1], &self.mix),
            (PARAM_GROUPS[2], &self.mix_bias),
            (PARAM_GROUPS[3], &self.head_weight),
            (PARAM_GROUPS[4], &self.head_bias),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Vec<S>); 5] {
        [
            (PARAM_GROUPS[0], &mut self.embedding),
            (PARAM_GROUPS[1], &mut self.mix),
            (PARAM_GROUPS[2], &mut self.mix_bias),
            (PARAM_GROUPS[3], &mut self.head_weight),
            (PARAM_GROUPS[4], &mut self.head_bias),
        ]
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.dims.validate()?;
        let expected = Self::zeros(self.dims);
        for ((name, got), (_, want)) in self.groups().iter().zip(expected.groups().iter()) {
            if got.len() != want.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {} values, expected {}",
                    got.len(),
                    want.len()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for (_, v) in self.groups_mut() {
            v.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Replaces the head with the mean-pooled rows of `base_head` (an MLM head
    /// over the subword vocabulary), keeping the body.
    pub fn with_emlm_head(base: &Self, uvocab: &ExpandedVocab) -> Result<Self> {
        if base.dims.n_terms != base.dims.n_subwords {
            return Err(Error::DimensionMismatch(format!(
                "base head has {} rows, expected one per subword ({})",
                base.dims.n_terms, base.dims.n_subwords
            )));
        }
        let (head_weight, head_bias) = init_emlm_head(&base.head_weight, &base.head_bias, base.dims.hidden, uvocab)?;
        Ok(Self {
            dims: ModelDims {
                n_terms: uvocab.len(),
                ..base.dims
            },
            embedding: base.embedding.clone(),
            mix: base.mix.clone(),
            mix_bias: base.mix_bias.clone(),
            head_weight,
            head_bias,
        })
    }
}

/// Uniform in `[-1/sqrt(h), 1/sqrt(h)]` for every parameter.
pub fn init_random<S: Scalar>(dims: ModelDims, seed: u64) -> Result<ModelParams<S>> {
    dims.validate()?;
    let bound = 1.0 / (dims.hidden as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(dims);
    for (_, group) in params.groups_mut() {
        for x in group.iter_mut() {
            *x = S::lit(rng.gen_range(-bound..=bound));
        }
    }
    Ok(params)
}

/// Builds expanded-vocabulary head rows: each row and bias is the arithmetic
/// mean of the rows and biases of the term's subwords.
///
/// Generic over any numeric field so the construction can also be evaluated
/// in exact rational arithmetic.
pub fn init_emlm_head<T>(base_weight: &[T], base_bias: &[T], hidden: usize, uvocab: &ExpandedVocab) -> Result<(Vec<T>, Vec<T>)>
where
    T: Num + Clone + FromPrimitive,
{
    if hidden == 0 || base_weight.len() != base_bias.len() * hidden {
        return Err(Error::DimensionMismatch(format!(
            "base head weight has {} values, expected {} x {hidden}",
            base_weight.len(),
            base_bias.len()
        )));
    }
    let mut weight = Vec::with_capacity(uvocab.len() * hidden);
    let mut bias = Vec::with_capacity(uvocab.len());
    for term in uvocab.terms() {
        let parts = &term.decomposition;
        if parts.is_empty() {
            return Err(Error::InvalidVocab(format!("term {:?} has empty decomposition", term.text)));
        }
        if let Some(bad) = parts.iter().find(|&&s| s as usize >= base_bias.len()) {
            return Err(Error::InvalidVocab(format!("subword {bad} outside base head")));
        }
        let n = T::from_usize(parts.len()).expect("count representable");
        let mut row = vec![T::zero(); hidden];
        let mut b = T::zero();
        for &s in parts {
            let s = s as usize;
            for (acc, w) in row.iter_mut().zip(&base_weight[s * hidden..(s + 1) * hidden]) {
                *acc = acc.clone() + w.clone();
            }
            b = b + base_bias[s].clone();
        }
        weight.extend(row.into_iter().map(|x| x / n.clone()));
        bias.push(b / n);
    }
    Ok((weight, bias))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<S> {
    /// `seq_len x n_terms`
    pub token_logits: Vec<S>,
    pub seq_len: usize,
    pub pooled: SparseVec<S>,
    pub truncated: bool,
}

/// Forward activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub tokens: Vec<SubwordId>,
    /// Context-layer inputs `e_i + mean(e)`, `seq_len x hidden`.
    pub inputs: Vec<S>,
    /// `tanh` outputs, `seq_len x hidden`.
    pub hidden: Vec<S>,
    /// Per-term maximum logit over positions.
    pub max_logit: Vec<S>,
    /// Position of the maximum (lowest index on ties).
    pub argmax: Vec<u32>,
    pub truncated: bool,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Pooled weights as a dense vector over the expanded vocabulary.
    pub fn pooled_dense(&self) -> Vec<S> {
        self.max_logit.iter().map(|&m| m.max(S::zero()).ln_1p()).collect()
    }

    pub fn pooled(&self) -> SparseVec<S> {
        SparseVec::from_dense(&self.pooled_dense()).expect("pooled weights are finite and nonnegative")
    }

    fn hidden_row(&self, i: usize, h: usize) -> &[S] {
        &self.hidden[i * h..(i + 1) * h]
    }
}

fn check_tokens<S: Scalar>(tokens: &[SubwordId], params: &ModelParams<S>) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= params.dims.n_subwords) {
        return Err(Error::InvalidParameter(format!(
            "token id {bad} outside subword vocabulary of {}",
            params.dims.n_subwords
        )));
    }
    Ok(())
}

#[inline]
fn dot_slice<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn context_layer<S: Scalar>(tokens: &[SubwordId], params: &ModelParams<S>) -> (Vec<S>, Vec<S>) {
    let h = params.dims.hidden;
    let len = tokens.len();
    let mut mean = vec![S::zero(); h];
    for &t in tokens {
        for (m, &e) in mean.iter_mut().zip(&params.embedding[t as usize * h..(t as usize + 1) * h]) {
            *m += e;
        }
    }
    let inv = S::one() / S::from_usize_lossy(len);
    mean.iter_mut().for_each(|m| *m *= inv);

    let mut inputs = Vec::with_capacity(len * h);
    for &t in tokens {
        let e = &params.embedding[t as usize * h..(t as usize + 1) * h];
        inputs.extend(e.iter().zip(&mean).map(|(&a, &b)| a + b));
    }
    let mut hidden = Vec::with_capacity(len * h);
    for x in inputs.chunks_exact(h) {
        for r in 0..h {
            let z = dot_slice(&params.mix[r * h..(r + 1) * h], x) + params.mix_bias[r];
            hidden.push(z.tanh());
        }
    }
    (inputs, hidden)
}

/// Runs the encoder up to pooling. Inputs longer than `max_len` are truncated.
pub fn forward<S: Scalar>(tokens: &[SubwordId], params: &ModelParams<S>, max_len: usize) -> Result<ForwardCache<S>> {
    check_tokens(tokens, params)?;
    let truncated = tokens.len() > max_len;
    let tokens = &tokens[..tokens.len().min(max_len)];
    let (inputs, hidden) = context_layer(tokens, params);
    let h = params.dims.hidden;
    let n_terms = params.dims.n_terms;
    let mut max_logit = Vec::with_capacity(n_terms);
    let mut argmax = Vec::with_capacity(n_terms);
    for t in 0..n_terms {
        let row = &params.head_weight[t * h..(t + 1) * h];
        let b = params.head_bias[t];
        let mut best = S::neg_infinity();
        let mut best_i = 0u32;
        for (i, hid) in hidden.chunks_exact(h).enumerate() {
            let logit = dot_slice(row, hid) + b;
            if logit > best {
                best = logit;
                best_i = i as u32;
            }
        }
        max_logit.push(best);
        argmax.push(best_i);
    }
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        inputs,
        hidden,
        max_logit,
        argmax,
        truncated,
    })
}

/// Runs only the context layer. The returned cache has no pooled logits, so
/// it supports [`logits_at`] and [`backward_logits`] but not pooling.
pub fn forward_context<S: Scalar>(tokens: &[SubwordId], params: &ModelParams<S>, max_len: usize) -> Result<ForwardCache<S>> {
    check_tokens(tokens, params)?;
    let truncated = tokens.len() > max_len;
    let tokens = &tokens[..tokens.len().min(max_len)];
    let (inputs, hidden) = context_layer(tokens, params);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        inputs,
        hidden,
        max_logit: Vec::new(),
        argmax: Vec::new(),
        truncated,
    })
}

/// Logits over the expanded vocabulary at one position.
pub fn logits_at<S: Scalar>(cache: &ForwardCache<S>, params: &ModelParams<S>, position: usize) -> Vec<S> {
    let h = params.dims.hidden;
    let hid = cache.hidden_row(position, h);
    params
        .head_weight
        .chunks_exact(h)
        .zip(&params.head_bias)
        .map(|(row, &b)| dot_slice(row, hid) + b)
        .collect()
}

pub fn encode<S: Scalar>(tokens: &[SubwordId], params: &ModelParams<S>) -> Result<EncoderOutput<S>> {
    let cache = forward(tokens, params, DEFAULT_MAX_LEN)?;
    let mut token_logits = Vec::with_capacity(cache.seq_len() * params.dims.n_terms);
    for i in 0..cache.seq_len() {
        token_logits.extend(logits_at(&cache, params, i));
    }
    Ok(EncoderOutput {
        token_logits,
        seq_len: cache.seq_len(),
        pooled: cache.pooled(),
        truncated: cache.truncated,
    })
}

/// Propagates `d_hidden` (`seq_len x hidden`) through the context layer and
/// embeddings, accumulating into `grads`.
fn backward_context<S: Scalar>(cache: &ForwardCache<S>, params: &ModelParams<S>, d_hidden: &[S], grads: &mut ModelGrads<S>) {
    let h = params.dims.hidden;
    let len = cache.seq_len();
    let mut d_inputs = vec![S::zero(); len * h];
    let mut dz = vec![S::zero(); h];
    for i in 0..len {
        let hid = &cache.hidden[i * h..(i + 1) * h];
        let dh = &d_hidden[i * h..(i + 1) * h];
        let mut any = false;
        for r in 0..h {
            dz[r] = dh[r] * (S::one() - hid[r] * hid[r]);
            any |= dz[r] != S::zero();
        }
        if !any {
            continue;
        }
        let x = &cache.inputs[i * h..(i + 1) * h];
        let dx = &mut d_inputs[i * h..(i + 1) * h];
        for (r, &g) in dz.iter().enumerate() {
            grads.mix_bias[r] += g;
            let mix_row = &params.mix[r * h..(r + 1) * h];
            let grad_row = &mut grads.mix[r * h..(r + 1) * h];
            for c in 0..h {
                grad_row[c] += g * x[c];
                dx[c] += mix_row[c] * g;
            }
        }
    }
    let mut d_mean = vec![S::zero(); h];
    for dx in d_inputs.chunks_exact(h) {
        for (m, &d) in d_mean.iter_mut().zip(dx) {
            *m += d;
        }
    }
    let inv = S::one() / S::from_usize_lossy(len);
    for (i, &t) in cache.tokens.iter().enumerate() {
        let row = &mut grads.embedding[t as usize * h..(t as usize + 1) * h];
        for c in 0..h {
            row[c] += d_inputs[i * h + c] + d_mean[c] * inv;
        }
    }
}

/// Accumulates gradients of `sum_t upstream[t] * pooled[t]`. Only terms with
/// a positive maximum logit carry gradient, routed to their argmax position.
pub fn backward_pooled<S: Scalar>(cache: &ForwardCache<S>, params: &ModelParams<S>, upstream: &[S], grads: &mut ModelGrads<S>) {
    let h = params.dims.hidden;
    let mut d_hidden = vec![S::zero(); cache.seq_len() * h];
    for (t, &g) in upstream.iter().enumerate() {
        let m = cache.max_logit[t];
        if g == S::zero() || m <= S::zero() {
            continue;
        }
        let delta = g / (S::one() + m);
        let i = cache.argmax[t] as usize;
        let hid = cache.hidden_row(i, h);
        let w = &params.head_weight[t * h..(t + 1) * h];
        let gw = &mut grads.head_weight[t * h..(t + 1) * h];
        let dh = &mut d_hidden[i * h..(i + 1) * h];
        for c in 0..h {
            gw[c] += delta * hid[c];
            dh[c] += delta * w[c];
        }
        grads.head_bias[t] += delta;
    }
    backward_context(cache, params, &d_hidden, grads);
}

/// Accumulates gradients given upstream gradients on full logit rows at
/// selected positions.
pub fn backward_logits<S: Scalar>(cache: &ForwardCache<S>, params: &ModelParams<S>, rows: &[(usize, Vec<S>)], grads: &mut ModelGrads<S>) {
    let h = params.dims.hidden;
    let mut d_hidden = vec![S::zero(); cache.seq_len() * h];
    for (pos, d_logits) in rows {
        let hid = cache.hidden_row(*pos, h);
        let dh = &mut d_hidden[pos * h..(pos + 1) * h];
        for (t, &g) in d_logits.iter().enumerate() {
            if g == S::zero() {
                continue;
            }
            let w = &params.head_weight[t * h..(t + 1) * h];
            let gw = &mut grads.head_weight[t * h..(t + 1) * h];
            for c in 0..h {
                gw[c] += g * hid[c];
                dh[c] += g * w[c];
            }
            grads.head_bias[t] += g;
        }
    }
    backward_context(cache, params, &d_hidden, grads);
}

/// Gradient of `sum_t upstream[t] * pooled[t]` with respect to every parameter.
pub fn encode_backward<S: Scalar>(tokens: &[SubwordId], params: &ModelParams<S>, upstream: &[S]) -> Result<ModelGrads<S>> {
    if upstream.len() != params.dims.n_terms {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            params.dims.n_terms
        )));
    }
    let cache = forward(tokens, params, DEFAULT_MAX_LEN)?;
    let mut grads = ModelParams::zeros(params.dims);
    backward_pooled(&cache, params, upstream, &mut grads);
    Ok(grads)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LSRCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus hashes of the vocabularies they were built against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ModelParams<S>,
    pub subvocab_hash: u64,
    pub uvocab_hash: u64,
}

impl<S: Scalar> Checkpoint<S> {
    /// Header (magic, version, scalar width, dims, vocab hashes) followed by
    /// the parameter groups, row-major little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.params.dims;
        let mut out = Vec::with_capacity(64 + d.param_count() * S::BYTES);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(S::BYTES as u32).to_le_bytes());
        for n in [d.n_subwords, d.hidden, d.n_terms] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.subvocab_hash.to_le_bytes());
        out.extend_from_slice(&self.uvocab_hash.to_le_bytes());
        for (_, group) in self.params.groups() {
            for &x in group {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "checkpoint",
            reason,
        };
        let mut r = crate::binio::Reader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let width = r.u32()? as usize;
        if width != S::BYTES {
            return Err(bad(format!("scalar width {width} does not match {}", S::BYTES)));
        }
        let dims = ModelDims::new(r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
        dims.validate()?;
        let subvocab_hash = r.u64()?;
        let uvocab_hash = r.u64()?;
        let mut params = ModelParams::zeros(dims);
        for (_, group) in params.groups_mut() {
            for x in group.iter_mut() {
                *x = S::read_le(r.take(S::BYTES)?);
            }
        }
        r.finish()?;
        Ok(Self {
            params,
            subvocab_hash,
            uvocab_hash,
        })
    }
}
