mod common;

use dpta::data::read_feature_csv;
use dpta::harness::{dump_embeddings, prepare, run_prepared, write_run, EmbeddingSource, RunResult};
use dpta::inference::dpta_predict;
use dpta::model::weights::load_checkpoint;

#[test]
fn saved_run_reloads_exactly() {
    let cfg = common::small();
    let prepared = prepare(&cfg).unwrap();
    let out = run_prepared(&cfg, &prepared).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &out, &prepared.stream.manifest()).unwrap();

    let r = RunResult::load(dir.path().join("results.json")).unwrap();
    assert_eq!(r, out.result);
    r.check_aggregates().unwrap();

    let ck = load_checkpoint(dir.path().join("weights.txt")).unwrap();
    assert_eq!(&ck, out.checkpoint.as_ref().unwrap());
    let test = prepared.stream.cumulative_test(4).unwrap();
    let mut correct = 0;
    for i in 0..test.len() {
        let (x, y) = test.sample(i);
        let d = dpta_predict(&ck.store, &ck.backbone, &ck.adapters, x, cfg.k).unwrap();
        correct += usize::from(d.predicted == y);
    }
    assert_eq!(correct, r.stages[3].correct);

    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest, prepared.stream.manifest());
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves, r.curves_csv());
}

#[test]
fn unsupported_results_version_is_rejected() {
    let cfg = common::small();
    let out = run_prepared(&cfg, &prepare(&cfg).unwrap()).unwrap();
    let text = out.result.to_json().unwrap().replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(RunResult::from_json(&text).is_err());
}

#[test]
fn embedding_dump_has_metadata_and_matches_extraction() {
    let cfg = common::small();
    let prepared = prepare(&cfg).unwrap();
    let ck = run_prepared(&cfg, &prepared).unwrap().checkpoint.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let n = dump_embeddings(&ck.backbone, &ck.adapters, &prepared.stream, EmbeddingSource::OwnAdapter, &path)
        .unwrap();
    let (data, meta) = read_feature_csv(std::fs::File::open(&path).unwrap()).unwrap();
    let meta = meta.unwrap();
    assert_eq!(n, data.len());
    assert_eq!(data.dim(), cfg.model.feature_dim);
    assert!(meta.iter().enumerate().all(|(i, m)| m.sample_id == i));

    let task2 = &prepared.stream.task(2).test;
    let first = meta.iter().position(|m| m.task_id == 2).unwrap();
    let expected = dpta::model::extract(&ck.backbone, task2.sample(0).0, Some(ck.adapters.get(2).unwrap())).unwrap();
    assert_eq!(data.sample(first).0, expected.as_slice());
    assert_eq!(data.sample(first).1, task2.sample(0).1);
}

#[test]
fn identity_adapter_dump_equals_raw_dump() {
    let cfg = common::small();
    let prepared = prepare(&cfg).unwrap();
    let mut reg = dpta::model::AdapterRegistry::new();
    let mut rng = dpta::numerics::RngState::new(3);
    for t in 1..=prepared.stream.num_tasks() {
        let mut a = dpta::model::init_adapter(t, &prepared.backbone, &[0, 1], 8, &mut rng).unwrap();
        a.freeze();
        reg.insert(a).unwrap();
    }
    let (raw, raw_meta) =
        dpta::harness::embed_test_sets(&prepared.backbone, &reg, &prepared.stream, EmbeddingSource::Raw).unwrap();
    let (own, own_meta) =
        dpta::harness::embed_test_sets(&prepared.backbone, &reg, &prepared.stream, EmbeddingSource::OwnAdapter)
            .unwrap();
    assert_eq!(raw, own);
    assert_eq!(raw_meta, own_meta);
    let total: usize = prepared.stream.tasks().iter().map(|t| t.test.len()).sum();
    assert_eq!(raw.len(), total);
}
