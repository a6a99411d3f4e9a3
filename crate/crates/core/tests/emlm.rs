mod common;

use lsrlab::encoder::{init_random, ModelDims};
use lsrlab::evalkit::{generate_synthetic, SynthConfig};
use lsrlab::vocab::build_expanded_vocab;

#[test]
fn expanded_head_rows_are_exact_subword_means() {
    let cfg = SynthConfig {
        docs: 600,
        train_queries: 0,
        eval_queries: 50,
        seed: 12,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let sv = &data.subvocab;
    let uv = build_expanded_vocab(data.titles(), sv, 1_000).unwrap();
    let base = init_random::<f64>(ModelDims::new(sv.len(), 8, sv.len()), 3).unwrap();
    let singles = uv.terms().iter().filter(|t| t.decomposition.len() == 1).count();
    assert!(singles > 0 && singles < uv.len());
    assert_eq!(common::check_emlm_exact(&base.head_weight, &base.head_bias, 8, &uv), uv.len());
}
