// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;

use proptest::prelude::*;
use proxsae::metrics::{loss_recovered, HeadConfig, ToyHead};
use proxsae::storage::{HEADER_LEN, MAGIC};
use proxsae::{
    prox_abs_topk, prox_jump_relu, prox_oracle, prox_relu_soft, prox_topk, reconstruct,
    ActivationStore, Matrix, ProxSpec, RunConfig, SaeParams, SaeVariant, Vector,
};

fn vec_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, 1..=max_len)
}

proptest! {
    #[test]
    fn relu_matches_oracle(u in vec_strategy(64), lambda in 0.0f64..3.0) {
        let u = Vector::new(u).unwrap();
        let a = prox_relu_soft(&u, lambda).unwrap();
        let b = prox_oracle(&u, &ProxSpec::ReluSoft { lambda }).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn jump_relu_matches_oracle(u in vec_strategy(8), theta in 0.0f64..3.0) {
        let u = Vector::new(u).unwrap();
        let a = prox_jump_relu(&u, theta).unwrap();
        let b = prox_oracle(&u, &ProxSpec::JumpRelu { theta }).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn topk_variants_match_oracle(u in vec_strategy(8), k_frac in 0.0f64..1.0) {
        let k = 1 + ((u.len() - 1) as f64 * k_frac).round() as usize;
        let u = Vector::new(u).unwrap();
        prop_assert_eq!(prox_topk(&u, k).unwrap(), prox_oracle(&u, &ProxSpec::TopK { k }).unwrap());
        prop_assert_eq!(prox_abs_topk(&u, k).unwrap(), prox_oracle(&u, &ProxSpec::AbsTopK { k }).unwrap());
    }

    #[test]
    fn abs_topk_is_odd_and_topk_is_not(u in vec_strategy(16), k in 1usize..4) {
        let k = k.min(u.len());
        let u = Vector::new(u).unwrap();
        let neg = u.scaled(-1.0);
        prop_assert_eq!(prox_abs_topk(&neg, k).unwrap(), prox_abs_topk(&u, k).unwrap().scaled(-1.0));
        prop_assert!(prox_topk(&u, k).unwrap().as_slice().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn store_round_trips_through_f32(rows in 1usize..20, dim in 1usize..10, seed in any::<u64>()) {
        let mut rng = proxsae::Rng::from_seed(seed);
        let m = Matrix::new(rows, dim, rng.gaussian_vec(rows * dim)).unwrap();
        let store = ActivationStore::from_matrix(&m, proxsae::StoreMeta::synthetic("prop")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        store.write(&path).unwrap();
        let back = ActivationStore::read(&path).unwrap();
        prop_assert_eq!(&back, &store);
        for (a, b) in back.to_matrix().unwrap().as_slice().iter().zip(m.as_slice()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}

/// Bytes laid out by hand, as an external producer would write them.
fn foreign_store_bytes(rows: usize, dim: usize, meta: &str, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    assert_eq!(out.len(), HEADER_LEN);
    out.extend_from_slice(meta.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[test]
fn reads_store_written_by_another_producer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("foreign.bin");
    let meta = r#"{"model":"gpt2","layer":6,"source":"wikitext","tokens":10000}"#;
    let values = [1.0f32, -2.5, 0.125, 3.0, 0.0, -0.75];
    fs::write(&path, foreign_store_bytes(2, 3, meta, &values)).unwrap();
    let store = ActivationStore::read(&path).unwrap();
    assert_eq!((store.n_rows(), store.dim()), (2, 3));
    assert_eq!(store.row(1), &values[3..]);
    assert_eq!(store.meta.model, "gpt2");
    assert_eq!(store.meta.layer, Some(6));
    assert_eq!(store.meta.extra["tokens"], 10000);

    // rewriting keeps the unknown key
    let again = dir.path().join("again.bin");
    store.write(&again).unwrap();
    assert_eq!(
        ActivationStore::read(&again).unwrap().meta.extra["tokens"],
        10000
    );
}

#[test]
fn truncated_foreign_store_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.bin");
    let mut bytes = foreign_store_bytes(2, 3, "{}", &[0.0; 6]);
    bytes.truncate(bytes.len() - 4);
    fs::write(&path, bytes).unwrap();
    assert!(ActivationStore::read(&path).is_err());
}

#[test]
fn full_capacity_identity_sae_recovers_all_loss() {
    let spec = proxsae::SynthSpec {
        d: 16,
        p_true: 8,
        k_true: 2,
        n_samples: 2048,
        seed: 9,
        ..Default::default()
    };
    let (store, truth) = proxsae::generate(&spec).unwrap();
    let x = store.to_matrix().unwrap();
    let (labels, classes) = truth.dominant_concept_labels();
    let head = ToyHead::fit(&x, &labels, classes, &HeadConfig::default()).unwrap();
    let d = spec.d;
    let params = SaeParams::new(
        Matrix::identity(d),
        Matrix::identity(d),
        Vector::zeros(d),
        Vector::zeros(d),
    )
    .unwrap();
    let variant = SaeVariant::abs_topk(d);
    assert_eq!(
        reconstruct(&store.row_vec(0), &params, &variant).unwrap(),
        store.row_vec(0)
    );
    let report = loss_recovered(&x, &labels, &params, &variant, &head).unwrap();
    assert!(report.score >= 0.999, "{report:?}");
}

#[test]
fn readme_config_parses_to_defaults() {
    let readme =
        fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
    let end = start + readme[start..].find("```").unwrap();
    let cfg = RunConfig::from_toml(&readme[start..end]).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
