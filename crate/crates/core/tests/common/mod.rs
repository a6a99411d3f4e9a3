//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use lsrlab::encoder::{backward_logits, encode_backward, forward, init_random, logits_at, ForwardCache, ModelDims, DEFAULT_MAX_LEN};
use lsrlab::objectives::{flops_loss, joint_flops_loss, mlm_pretrain_loss, npair_loss, Batch};
use lsrlab::{ModelParams, SparseVec, TermId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for relative error, so that two vanishing gradients
/// compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], i: usize) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let up = f(x);
    x[i] = orig - FD_STEP;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Worst relative error between `grad` and central differences of `f` at `x`.
pub fn check_dense(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| rel_err(grad[i], central_diff(f, &mut x, i)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose perturbation moved a max-pooling argmax or crossed
    /// the ReLU kink, where the function is not differentiable.
    pub skipped: usize,
}

fn same_branch(a: &ForwardCache<f64>, b: &ForwardCache<f64>) -> bool {
    a.argmax == b.argmax
        && a.max_logit
            .iter()
            .zip(&b.max_logit)
            .all(|(x, y)| (*x > 0.0) == (*y > 0.0))
}

fn flat(p: &ModelParams<f64>) -> Vec<f64> {
    p.groups().iter().flat_map(|(_, g)| g.iter().copied()).collect()
}

fn unflat(template: &ModelParams<f64>, x: &[f64]) -> ModelParams<f64> {
    let mut p = template.clone();
    let mut off = 0;
    for (_, g) in p.groups_mut() {
        let n = g.len();
        g.copy_from_slice(&x[off..off + n]);
        off += n;
    }
    p
}

/// Central-difference check of every parameter of a scalar function of the
/// encoder, skipping perturbations that change the pooling branch.
pub fn check_params(
    params: &ModelParams<f64>,
    tokens: &[u32],
    loss: &dyn Fn(&ModelParams<f64>, &ForwardCache<f64>) -> f64,
    analytic: &ModelParams<f64>,
) -> GradCheck {
    let base = forward(tokens, params, DEFAULT_MAX_LEN).unwrap();
    let grad = flat(analytic);
    let mut x = flat(params);
    let mut out = GradCheck::default();
    for i in 0..x.len() {
        let orig = x[i];
        let eval = |v: f64, x: &mut Vec<f64>| {
            x[i] = v;
            let p = unflat(params, x);
            let c = forward(tokens, &p, DEFAULT_MAX_LEN).unwrap();
            (loss(&p, &c), same_branch(&base, &c))
        };
        let (up, b1) = eval(orig + FD_STEP, &mut x);
        let (down, b2) = eval(orig - FD_STEP, &mut x);
        x[i] = orig;
        if !(b1 && b2) {
            out.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        out.max_rel = out.max_rel.max(rel_err(grad[i], numeric));
        out.checked += 1;
    }
    out
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n_subwords: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(3..n_subwords as u32)).collect()
}

/// Nonnegative dense vectors with roughly `density` nonzeros.
pub fn random_pooled(rng: &mut ChaCha8Rng, n: usize, dim: usize, density: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.gen_bool(density) { rng.gen_range(0.05..2.0) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Worst relative errors for the encoder, N-pair, FLOPS, joint FLOPS and
/// masked-LM gradients at one seed (h=16, |U|=200).
pub fn gradient_suite(seed: u64) -> [(&'static str, GradCheck); 6] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims::new(40, 16, 200);
    let params = init_random::<f64>(dims, seed).unwrap();
    let len = rng.gen_range(3..12);
    let tokens = random_tokens(&mut rng, dims.n_subwords, len);

    let upstream: Vec<f64> = (0..dims.n_terms).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pooled_loss = |_: &ModelParams<f64>, c: &ForwardCache<f64>| {
        c.pooled_dense().iter().zip(&upstream).map(|(p, u)| p * u).sum::<f64>()
    };
    let enc_grad = encode_backward(&tokens, &params, &upstream).unwrap();
    let encoder = check_params(&params, &tokens, &pooled_loss, &enc_grad);

    let positions: Vec<usize> = (0..len).filter(|_| rng.gen_bool(0.5)).chain([0]).collect();
    let labels: Vec<TermId> = positions.iter().map(|_| rng.gen_range(0..dims.n_terms as u32)).collect();
    let mlm_of = |p: &ModelParams<f64>, c: &ForwardCache<f64>| {
        let rows: Vec<Vec<f64>> = positions.iter().map(|&i| logits_at(c, p, i)).collect();
        mlm_pretrain_loss(&rows, &labels).unwrap().loss
    };
    let cache = forward(&tokens, &params, DEFAULT_MAX_LEN).unwrap();
    let rows: Vec<Vec<f64>> = positions.iter().map(|&i| logits_at(&cache, &params, i)).collect();
    let row_grads = mlm_pretrain_loss(&rows, &labels).unwrap().grad;
    let mut mlm_grad = ModelParams::zeros(dims);
    let per: Vec<(usize, Vec<f64>)> = positions.iter().copied().zip(row_grads.clone()).collect();
    backward_logits(&cache, &params, &per, &mut mlm_grad);
    let mlm_encoder = check_params(&params, &tokens, &mlm_of, &mlm_grad);

    let flat_rows: Vec<f64> = rows.concat();
    let mlm_logits = {
        let n = dims.n_terms;
        let labels = labels.clone();
        let mut f = move |x: &[f64]| {
            let rows: Vec<Vec<f64>> = x.chunks(n).map(<[f64]>::to_vec).collect();
            mlm_pretrain_loss(&rows, &labels).unwrap().loss
        };
        GradCheck {
            max_rel: check_dense(&mut f, &flat_rows, &row_grads.concat()),
            checked: flat_rows.len(),
            skipped: 0,
        }
    };

    let b = 4;
    let dim = dims.n_terms;
    let qs = random_pooled(&mut rng, b, dim, 0.3);
    let ds = random_pooled(&mut rng, b, dim, 0.3);
    let joined: Vec<f64> = qs.concat().into_iter().chain(ds.concat()).collect();
    let split = |x: &[f64]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (q, d) = x.split_at(b * dim);
        (
            q.chunks(dim).map(<[f64]>::to_vec).collect(),
            d.chunks(dim).map(<[f64]>::to_vec).collect(),
        )
    };
    let pair_check = |f: &mut dyn FnMut(&[f64]) -> f64, gq: &[Vec<f64>], gd: &[Vec<f64>]| GradCheck {
        max_rel: check_dense(f, &joined, &[gq.concat(), gd.concat()].concat()),
        checked: joined.len(),
        skipped: 0,
    };

    let np = npair_loss(&Batch::new(qs.clone(), ds.clone()).unwrap()).unwrap();
    let npair = pair_check(
        &mut |x| {
            let (q, d) = split(x);
            npair_loss(&Batch::new(q, d).unwrap()).unwrap().loss
        },
        &np.grad_q,
        &np.grad_d,
    );

    let fl = flops_loss(&qs).unwrap();
    let flat_q = qs.concat();
    let flops = GradCheck {
        max_rel: check_dense(
            &mut |x| flops_loss(&x.chunks(dim).map(<[f64]>::to_vec).collect::<Vec<_>>()).unwrap().loss,
            &flat_q,
            &fl.grad.concat(),
        ),
        checked: flat_q.len(),
        skipped: 0,
    };

    let jf = joint_flops_loss(&qs, &ds).unwrap();
    let joint = pair_check(
        &mut |x| {
            let (q, d) = split(x);
            joint_flops_loss(&q, &d).unwrap().loss
        },
        &jf.grad_q,
        &jf.grad_d,
    );

    let mlm = GradCheck {
        max_rel: mlm_logits.max_rel.max(mlm_encoder.max_rel),
        checked: mlm_logits.checked + mlm_encoder.checked,
        skipped: mlm_encoder.skipped,
    };
    [
        ("encoder", encoder),
        ("npair", npair),
        ("flops", flops),
        ("joint_flops", joint),
        ("mlm_logits", mlm_logits),
        ("mlm", mlm),
    ]
}

/// Random sparse vector; weights on a 1/8 grid so exact ties are common.
pub fn random_sparse(rng: &mut ChaCha8Rng, dim: u32, max_nnz: usize) -> SparseVec<f64> {
    let nnz = rng.gen_range(0..=max_nnz);
    let mut terms: Vec<u32> = (0..nnz).map(|_| rng.gen_range(0..dim)).collect();
    terms.sort_unstable();
    terms.dedup();
    let entries = terms
        .into_iter()
        .map(|t| (t, rng.gen_range(1..=24) as f64 / 8.0))
        .collect();
    SparseVec::from_entries(entries).unwrap()
}

/// Top-`k` entries by weight, lowest term first on ties, returned in term order.
pub fn oracle_prune(v: &SparseVec<f64>, k: usize) -> Vec<(u32, f64)> {
    let mut e = v.entries().to_vec();
    if k == 0 || e.len() <= k {
        return e;
    }
    e.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    e.truncate(k);
    e.sort_by_key(|x| x.0);
    e
}

pub fn dense(entries: &[(u32, f64)], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for &(t, w) in entries {
        out[t as usize] = w;
    }
    out
}

/// Exhaustive ranking: every positive-score document, score descending and
/// doc id ascending on ties.
pub fn brute_force_rank(query: &[(u32, f64)], docs: &[Vec<f64>], k: usize) -> Vec<(u32, f64)> {
    let mut scored: Vec<(u32, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (i as u32, query.iter().map(|&(t, w)| w * d[t as usize]).sum::<f64>()))
        .filter(|&(_, s)| s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// The definitional double sum: over query-document pairs, the number of
/// terms active in both pruned vectors, averaged over all pairs.
pub fn definitional_flops(queries: &[SparseVec<f64>], docs: &[SparseVec<f64>], qk: usize, dk: usize) -> f64 {
    let pd: Vec<Vec<u32>> = docs.iter().map(|d| oracle_prune(d, dk).iter().map(|e| e.0).collect()).collect();
    let mut total: u64 = 0;
    for q in queries {
        let pq: Vec<u32> = oracle_prune(q, qk).iter().map(|e| e.0).collect();
        for d in &pd {
            total += pq.iter().filter(|t| d.binary_search(t).is_ok()).count() as u64;
        }
    }
    total as f64 / (queries.len() as f64 * docs.len() as f64)
}

/// Exact comparison of the generic head construction, run over big
/// rationals, against rational means of the subword rows. Returns the
/// number of expanded terms checked.
pub fn check_emlm_exact(base_weight: &[f64], base_bias: &[f64], hidden: usize, uvocab: &lsrlab::ExpandedVocab) -> usize {
    use lsrlab::encoder::init_emlm_head;
    use num_bigint::BigInt;
    use num_rational::BigRational;

    let exact = |x: f64| BigRational::from_float(x).expect("finite");
    let w: Vec<BigRational> = base_weight.iter().map(|&x| exact(x)).collect();
    let b: Vec<BigRational> = base_bias.iter().map(|&x| exact(x)).collect();
    let (hw, hb) = init_emlm_head(&w, &b, hidden, uvocab).unwrap();
    let (fw, fb) = init_emlm_head(base_weight, base_bias, hidden, uvocab).unwrap();
    for (t, term) in uvocab.terms().iter().enumerate() {
        let ids: Vec<usize> = term.decomposition.iter().map(|&i| i as usize).collect();
        let n = BigRational::from_integer(BigInt::from(ids.len()));
        for c in 0..hidden {
            let sum = ids.iter().fold(BigRational::from_integer(0.into()), |acc, &i| acc + &w[i * hidden + c]);
            assert_eq!(hw[t * hidden + c], sum / &n, "term {t} column {c}");
        }
        let bsum = ids.iter().fold(BigRational::from_integer(0.into()), |acc, &i| acc + &b[i]);
        assert_eq!(hb[t], bsum / &n, "term {t} bias");
        if ids.len() == 1 {
            let i = ids[0];
            assert_eq!(fw[t * hidden..(t + 1) * hidden], base_weight[i * hidden..(i + 1) * hidden]);
            assert_eq!(fb[t].to_bits(), base_bias[i].to_bits());
        }
    }
    uvocab.len()
}
