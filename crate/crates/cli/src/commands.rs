//! One function per subcommand. Each reads its inputs, runs a single
//! library operation and stages its outputs for an atomic commit.

use std::fmt::Write as _;
use std::path::Path;

use lsrlab::encoder::{forward, init_random, ModelDims};
use lsrlab::evalkit::{evaluate, evaluate_bm25, generate_synthetic, SynthConfig};
use lsrlab::retrieval::{flops_metric, Bm25Params, Searcher};
use lsrlab::sparsevec::{format_weight, read_vectors, write_vectors};
use lsrlab::trainer::{run_finetune, run_pretrain, TrainPair};
use lsrlab::vocab::{build_expanded_vocab, tokenize, AnnotatedTitle};
use lsrlab::{Checkpoint, DocId, Error, EvalSet, ExpandedVocab, InvertedIndex, MetricReport, ModelParams, PreparedEval, PruneConfig, SubwordVocab};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::Run;
use crate::config::ExperimentConfig;
use crate::*;

type Model = Checkpoint<f64>;

fn manifest_config(args: &impl Serialize, cfg: &ExperimentConfig) -> serde_json::Value {
    json!({ "args": args, "config": cfg })
}

fn load_subvocab(run: &mut Run, path: &Path) -> Result<SubwordVocab, CliError> {
    Ok(SubwordVocab::from_tsv(&run.input_text(path)?)?)
}

fn load_uvocab(run: &mut Run, path: &Path, subvocab: &SubwordVocab) -> Result<ExpandedVocab, CliError> {
    Ok(ExpandedVocab::from_tsv(&run.input_text(path)?, subvocab)?)
}

/// Loads a checkpoint and checks it against both vocabularies.
fn load_model(run: &mut Run, path: &Path, subvocab: &SubwordVocab, uvocab: &ExpandedVocab) -> Result<Model, CliError> {
    let ck = Model::from_bytes(&run.input(path)?)?;
    for (expected, found) in [
        (ck.subvocab_hash, subvocab.content_hash()),
        (ck.uvocab_hash, uvocab.content_hash()),
    ] {
        if expected != found {
            return Err(Error::VocabMismatch { expected, found }.into());
        }
    }
    let dims = ck.params.dims;
    if dims.n_subwords != subvocab.len() || dims.n_terms != uvocab.len() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint is {}x{} (subwords x terms), vocabularies are {}x{}",
            dims.n_subwords,
            dims.n_terms,
            subvocab.len(),
            uvocab.len()
        ))
        .into());
    }
    Ok(ck)
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    out
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, what: &'static str) -> Result<Vec<T>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Parse {
                    what,
                    line: i + 1,
                    reason: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

pub fn synth(a: &SynthArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let sc: SynthConfig = cfg.synth_config()?;
    let data = generate_synthetic(&sc)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let mut titles = data.titles().join("\n");
    titles.push('\n');
    let mut run = Run::new();
    run.output(&a.out_dir.join("subvocab.tsv"), data.subvocab.to_tsv().into_bytes());
    run.output(&a.out_dir.join("train.jsonl"), jsonl(&data.train));
    run.output(&a.out_dir.join("queries.jsonl"), data.eval.queries_jsonl().into_bytes());
    run.output(&a.out_dir.join("docs.jsonl"), data.eval.docs_jsonl().into_bytes());
    run.output(&a.out_dir.join("titles.txt"), titles.into_bytes());
    run.commit("synth", &manifest_config(a, cfg))
}

pub fn build_vocab(a: &BuildVocabArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut run = Run::new();
    let sv = load_subvocab(&mut run, &a.subvocab)?;
    let corpus = run.input_text(&a.corpus)?;
    let uv = build_expanded_vocab(corpus.lines(), &sv, a.size)?;
    if uv.short {
        eprintln!("warning: corpus has only {} distinct unigrams (requested {})", uv.len(), a.size);
    }
    run.output(&a.out, uv.to_tsv().into_bytes());
    run.commit("build-vocab", &manifest_config(a, cfg))
}

pub fn init_emlm(a: &InitEmlmArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut run = Run::new();
    let sv = load_subvocab(&mut run, &a.subvocab)?;
    let uv = load_uvocab(&mut run, &a.uvocab, &sv)?;
    let base = match &a.base {
        Some(path) => {
            let ck = Model::from_bytes(&run.input(path)?)?;
            if ck.subvocab_hash != sv.content_hash() {
                return Err(Error::VocabMismatch {
                    expected: ck.subvocab_hash,
                    found: sv.content_hash(),
                }
                .into());
            }
            ck.params
        }
        None => init_random(ModelDims::new(sv.len(), cfg.model.hidden, sv.len()), cfg.seed()?)?,
    };
    let params = ModelParams::with_emlm_head(&base, &uv)?;
    let ck = Model {
        params,
        subvocab_hash: sv.content_hash(),
        uvocab_hash: uv.content_hash(),
    };
    run.output(&a.out, ck.to_bytes());
    run.commit("init-emlm", &manifest_config(a, cfg))
}

pub fn pretrain(a: &PretrainArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let mut run = Run::new();
    let sv = load_subvocab(&mut run, &a.subvocab)?;
    let uv = load_uvocab(&mut run, &a.uvocab, &sv)?;
    let ck = load_model(&mut run, &a.init, &sv, &uv)?;
    let corpus = run.input_text(&a.corpus)?;
    let titles: Vec<AnnotatedTitle> = corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| AnnotatedTitle::new(l, &sv, &uv, tc.max_len))
        .collect();
    let out = run_pretrain(&titles, &sv, ck.params, &tc)?;
    if let Some(step) = out.diverged_at {
        return Err(CliError::Diverged(format!("pretraining loss became non-finite after step {step}")));
    }
    if out.skipped > 0 {
        eprintln!("skipped {} titles without expanded-vocabulary terms", out.skipped);
    }
    let trained = Model { params: out.last, ..ck };
    run.output(&a.out, trained.to_bytes());
    run.output(&a.log, jsonl(&out.log));
    run.commit("pretrain", &manifest_config(a, cfg))
}

#[derive(Deserialize)]
struct PairLine {
    query: String,
    doc: String,
}

pub fn finetune(a: &FinetuneArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let mut run = Run::new();
    let sv = load_subvocab(&mut run, &a.subvocab)?;
    let uv = load_uvocab(&mut run, &a.uvocab, &sv)?;
    let ck = load_model(&mut run, &a.init, &sv, &uv)?;
    let pairs: Vec<TrainPair> = parse_jsonl::<PairLine>(&run.input_text(&a.train)?, "training pairs")?
        .into_iter()
        .map(|p| TrainPair {
            query: tokenize(&p.query, &sv),
            doc: tokenize(&p.doc, &sv),
        })
        .collect();
    let validation = match (&a.valid_queries, &a.valid_docs) {
        (Some(q), Some(d)) => {
            let set = EvalSet::from_jsonl(&run.input_text(q)?, &run.input_text(d)?)?;
            let mut prepared = PreparedEval::new(&set, &sv)?;
            prepared.max_len = tc.max_len;
            Some(prepared)
        }
        _ => None,
    };
    let out = run_finetune(&pairs, ck.params.clone(), &tc, validation.as_ref())?;
    if let Some(step) = out.diverged_at {
        return Err(CliError::Diverged(format!("finetuning loss became non-finite after step {step}")));
    }
    let wrap = |params| Model { params, ..ck.clone() };
    run.output(&a.out, wrap(out.last).to_bytes());
    run.output(&a.log, jsonl(&out.log));
    if let (Some(path), Some(best)) = (&a.best_out, out.best) {
        eprintln!("best validation R@10 {:.4} at step {}", best.score, best.step);
        run.output(path, wrap(best.params).to_bytes());
    }
    if let Some(path) = &a.eval_log {
        run.output(path, jsonl(&out.evals));
    }
    run.commit("finetune", &manifest_config(a, cfg))
}

fn text_record(v: serde_json::Value, line: usize) -> Result<(String, String), CliError> {
    let bad = |reason: &str| -> CliError {
        Error::Parse {
            what: "encode input",
            line,
            reason: reason.into(),
        }
        .into()
    };
    let id = ["doc_id", "query_id", "id"]
        .iter()
        .find_map(|k| v.get(k).and_then(|x| x.as_str()))
        .ok_or_else(|| bad("missing doc_id, query_id or id"))?;
    let text = v.get("text").and_then(|x| x.as_str()).ok_or_else(|| bad("missing text"))?;
    Ok((id.to_string(), text.to_string()))
}

pub fn encode(a: &EncodeArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut run = Run::new();
    let sv = load_subvocab(&mut run, &a.subvocab)?;
    let uv = load_uvocab(&mut run, &a.uvocab, &sv)?;
    let ck = load_model(&mut run, &a.model, &sv, &uv)?;
    let records: Vec<(String, String)> = parse_jsonl::<serde_json::Value>(&run.input_text(&a.input)?, "encode input")?
        .into_iter()
        .enumerate()
        .map(|(i, v)| text_record(v, i + 1))
        .collect::<Result<_, _>>()?;
    let max_len = cfg.train.max_len;
    let vectors = records
        .par_iter()
        .map(|(id, text)| forward(&tokenize(text, &sv), &ck.params, max_len).map(|c| (id.clone(), c.pooled())))
        .collect::<Result<Vec<_>, _>>()?;
    run.output(&a.out, write_vectors(&vectors).into_bytes());
    run.commit("encode", &manifest_config(a, cfg))
}

pub fn index(a: &IndexArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut run = Run::new();
    let vectors = read_vectors::<f64>(&run.input_text(&a.vectors)?)?;
    let vocab_hash = match &a.uvocab {
        Some(p) => lsrlab::digest::hash64(run.input_text(p)?.as_bytes()),
        None => 0,
    };
    let docs: Vec<(DocId, _)> = vectors.iter().enumerate().map(|(i, (_, v))| (i as DocId, v.clone())).collect();
    let idx = InvertedIndex::build_sharded(&docs, cfg.prune.dk, rayon::current_num_threads())?
        .with_vocab_hash(vocab_hash)
        .with_external_ids(vectors.into_iter().enumerate().map(|(i, (id, _))| (i as DocId, id)));
    run.output(&a.out, idx.to_bytes());
    run.commit("index", &manifest_config(a, cfg))
}

pub fn search(a: &SearchArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut run = Run::new();
    let idx = InvertedIndex::<f64>::from_bytes(&run.input(&a.index)?)?;
    let queries = read_vectors::<f64>(&run.input_text(&a.queries)?)?;
    let qk = cfg.prune.qk;
    let results = queries
        .par_iter()
        .map_init(|| Searcher::new(&idx), |s, (_, q)| s.search(q, qk, a.k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::new();
    for ((qid, _), res) in queries.iter().zip(results) {
        if res.empty_query {
            eprintln!("warning: query {qid} is empty after pruning");
        }
        for (rank, (doc, score)) in res.hits.iter().enumerate() {
            let did = idx.external_id(*doc).map_or_else(|| doc.to_string(), str::to_string);
            let _ = writeln!(out, "{qid}\t{}\t{did}\t{}", rank + 1, format_weight(*score));
        }
    }
    run.output(&a.out, out.into_bytes());
    run.commit("search", &manifest_config(a, cfg))
}

pub fn flops(a: &FlopsArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut run = Run::new();
    let idx = InvertedIndex::<f64>::from_bytes(&run.input(&a.index)?)?;
    let queries: Vec<_> = read_vectors::<f64>(&run.input_text(&a.queries)?)?
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let value = flops_metric(&idx, &queries, cfg.prune.qk)?;
    let report = json!({
        "qk": cfg.prune.qk,
        "dk": idx.dk,
        "num_queries": queries.len(),
        "num_docs": idx.num_docs(),
        "flops": value,
    });
    let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
    match &a.out {
        Some(path) => {
            run.output(path, text.into_bytes());
            run.commit("flops", &manifest_config(a, cfg))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_grid(grid: &str) -> Result<Vec<PruneConfig>, CliError> {
    grid.split(',')
        .map(|cell| {
            let (q, d) = cell
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("grid cell {cell:?} is not qk:dk")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("grid cell {cell:?} is not qk:dk")))
            };
            Ok(PruneConfig::new(num(q)?, num(d)?))
        })
        .collect()
}

pub fn eval(a: &EvalArgs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let cells = parse_grid(&a.grid)?;
    let mut run = Run::new();
    let set = EvalSet::from_jsonl(&run.input_text(&a.queries)?, &run.input_text(&a.docs)?)?;
    let reports: Vec<MetricReport> = if a.bm25 {
        vec![evaluate_bm25(&set, Bm25Params::default())?]
    } else {
        let (m, s, u) = match (&a.model, &a.subvocab, &a.uvocab) {
            (Some(m), Some(s), Some(u)) => (m, s, u),
            _ => return Err(CliError::Usage("eval needs --model, --subvocab and --uvocab (or --bm25)".into())),
        };
        let sv = load_subvocab(&mut run, s)?;
        let uv = load_uvocab(&mut run, u, &sv)?;
        let ck = load_model(&mut run, m, &sv, &uv)?;
        let mut prepared = PreparedEval::new(&set, &sv)?;
        prepared.max_len = cfg.train.max_len;
        evaluate(&ck, &prepared, uv.content_hash(), &cells)?
    };
    let rows: Vec<MetricReport> = if a.per_query {
        reports
    } else {
        reports.iter().map(MetricReport::summary).collect()
    };
    let text = serde_json::to_string_pretty(&rows).expect("json") + "\n";
    run.output(&a.out, text.into_bytes());
    run.commit("eval", &manifest_config(a, cfg))
}
