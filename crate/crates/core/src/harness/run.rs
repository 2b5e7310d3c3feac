//! The class-incremental loop for every arm.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::data::{generate_synthetic, load_feature_csv, split_b_m_inc_n, TaskStream};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::results::{
    combined_curves_csv, comparison_table, write_atomic, write_run_files, AdaptionRecord,
    ParamCounts, RunResult, RESULTS_VERSION,
};
use crate::inference::{
    predict_all, separation_report, Decision, DptaPredictor, NcmPredictor, Prediction,
    Predictor, StageEval,
};
use crate::model::weights::{save_checkpoint, Checkpoint};
use crate::model::{
    count_trainable_params, pretrain_backbone, Adapter, AdapterRegistry, Backbone,
};
use crate::numerics::{topk_indices, Matrix, RngState};
use crate::prototypes::{compute_aug_prototypes, compute_raw_prototypes, DualPrototypeStore, PrototypeMap};
use crate::training::{adapt_task, fit_classifier, AdaptOutcome, TemporaryHead};

/// Child-stream ids derived from the run seed.
const STREAM_DATA: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_ADAPT: u64 = 100;
const STREAM_FINETUNE: u64 = 1000;

/// Stream and frozen backbone shared by every arm of one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stream: TaskStream,
    pub backbone: Backbone,
    pub pretrain_accuracy: Option<f64>,
}

pub fn build_stream(cfg: &ExperimentConfig) -> Result<TaskStream> {
    match &cfg.csv {
        Some(src) => {
            let data = load_feature_csv(&src.path)?;
            let mut rng = RngState::derive(cfg.seed, STREAM_SPLIT);
            split_b_m_inc_n(&data, src.base_m, src.inc_n, src.pretrain_fraction, src.test_fraction, &mut rng)
        }
        None => {
            let mut rng = RngState::derive(cfg.seed, STREAM_DATA);
            Ok(generate_synthetic(&cfg.synthetic, &mut rng)?.stream)
        }
    }
}

/// Builds the stream and pretrains the backbone on its held-out classes.
/// Without pretraining classes the backbone keeps its random initialization.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let dims = cfg.model.dims(stream.input_dim());
    let mut rng = RngState::derive(cfg.seed, STREAM_PRETRAIN);
    if stream.pretrain().is_empty() {
        let mut backbone = Backbone::random(&dims, &mut rng)?;
        backbone.freeze();
        return Ok(Prepared { stream, backbone, pretrain_accuracy: None });
    }
    let out = pretrain_backbone(
        stream.pretrain(),
        &stream.incremental_classes(),
        &dims,
        &cfg.pretrain,
        &mut rng,
    )?;
    Ok(Prepared {
        stream,
        backbone: out.backbone,
        pretrain_accuracy: Some(out.train_accuracy),
    })
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    /// Trained state of the prototype-based arms.
    pub checkpoint: Option<Checkpoint>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

fn at_stage<T>(stage: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage, source: Box::new(other) },
    })
}

fn adapt_seeded(
    cfg: &ExperimentConfig,
    backbone: &Backbone,
    stream: &TaskStream,
    task: usize,
    registry: &AdapterRegistry,
) -> Result<AdaptOutcome> {
    let mut rng = RngState::derive(cfg.seed, STREAM_ADAPT + task as u64);
    adapt_task(backbone, &stream.task(task).train, task, &cfg.adapter, &cfg.train, registry, &mut rng)
}

fn adaption_record(task: usize, out: &AdaptOutcome) -> AdaptionRecord {
    AdaptionRecord {
        task,
        first_epoch_loss: out.epoch_losses.first().copied(),
        last_epoch_loss: out.epoch_losses.last().copied(),
        intra_class_before: out.intra_class_before,
        intra_class_after: out.intra_class_after,
    }
}

/// FNV-1a over the bit patterns of a set of prototypes.
fn digest(maps: &[&PrototypeMap], classes: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in maps {
        for c in classes {
            for v in std::iter::once(*c as u64).chain(m[c].iter().map(|v| v.to_bits())) {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
    }
    h
}

fn evaluate(
    stage: usize,
    predictor: &dyn Predictor,
    stream: &TaskStream,
    class_to_task: &BTreeMap<usize, usize>,
    oracle: bool,
) -> Result<StageEval> {
    let test = stream.cumulative_test(stage)?;
    let mut preds = predict_all(predictor, &test, 0)?;
    if oracle {
        preds = preds.into_iter().map(Prediction::into_oracle).collect();
    }
    StageEval::from_predictions(stage, &preds, class_to_task)
}

/// Runs one arm on an already prepared stream and backbone.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<RunOutput> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let start = Instant::now();
    let (stages, aux) = match cfg.method {
        Method::Dpta => run_dpta(&cfg, prepared)?,
        Method::SimpleCil | Method::TopkOracle => run_raw_ncm(&cfg, prepared)?,
        Method::AdapterCa | Method::AdapterEa => run_first_task(&cfg, prepared)?,
        Method::Finetune => run_finetune(&cfg, prepared)?,
    };
    let mut result = RunResult {
        format_version: RESULTS_VERSION,
        method: cfg.method,
        k: cfg.k,
        seed: cfg.seed,
        stages,
        mean_accuracy: 0.0,
        final_accuracy: 0.0,
        task_accuracy: Vec::new(),
        mean_task_accuracy: 0.0,
        task_gap: 0.0,
        params: aux.params,
        adaption: aux.adaption,
        separation: aux.separation,
        first_task_digests: aux.digests,
        class_to_task: prepared.stream.class_to_task(),
        stream_fingerprint: format!("{:016x}", prepared.stream.fingerprint()),
        pretrain_accuracy: prepared.pretrain_accuracy,
        wall_clock_secs: 0.0,
        config: cfg,
    };
    result.finalize();
    result.check_aggregates()?;
    result.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(RunOutput { result, checkpoint: aux.checkpoint })
}

struct Aux {
    params: ParamCounts,
    adaption: Vec<AdaptionRecord>,
    separation: Option<Vec<crate::inference::TaskSeparation>>,
    digests: Vec<u64>,
    checkpoint: Option<Checkpoint>,
}

fn adapter_params(backbone: &Backbone, adapters: &[&Adapter], stream: &TaskStream, tasks: usize) -> ParamCounts {
    let per_adapter = adapters.first().map_or(0, |a| count_trainable_params(Some(a), None));
    let h = backbone.feature_dim();
    let head_max = (1..=tasks)
        .map(|t| count_trainable_params(None, Some((h, stream.task(t).classes().len()))))
        .max()
        .unwrap_or(0);
    ParamCounts {
        backbone: backbone.num_params(),
        per_adapter,
        adapters_total: per_adapter * adapters.len(),
        temporary_head_max: head_max,
        trainable_total: per_adapter * adapters.len() + head_max * tasks,
    }
}

fn run_dpta(cfg: &ExperimentConfig, p: &Prepared) -> Result<(Vec<StageEval>, Aux)> {
    let stream = &p.stream;
    let backbone = &p.backbone;
    let class_to_task = stream.class_to_task();
    let mut registry = AdapterRegistry::new();
    let mut store = DualPrototypeStore::new();
    let mut stages = Vec::new();
    let mut adaption = Vec::new();
    let mut digests = Vec::new();
    let mut first_classes = Vec::new();
    for t in 1..=stream.num_tasks() {
        let eval = at_stage(t, (|| {
            let train = &stream.task(t).train;
            let raw = compute_raw_prototypes(backbone, train)?;
            let out = adapt_seeded(cfg, backbone, stream, t, &registry)?;
            let aug = compute_aug_prototypes(backbone, &out.adapter, train)?;
            adaption.push(adaption_record(t, &out));
            registry.insert(out.adapter)?;
            store.ingest_task(t, raw, aug)?;
            if t == 1 {
                first_classes = store.classes_of_task(1);
            }
            digests.push(digest(&[store.raw(), store.aug()], &first_classes));
            let predictor = DptaPredictor { store: &store, backbone, registry: &registry, k: cfg.k };
            evaluate(t, &predictor, stream, &class_to_task, false)
        })())?;
        stages.push(eval);
    }
    if digests.iter().any(|d| *d != digests[0]) {
        return Err(Error::Invariant("first-task prototypes changed after their stage".into()));
    }
    let separation = separation_report(backbone, &registry, &store, &stream.test_sets())?;
    let adapters: Vec<&Adapter> = registry.iter().collect();
    let params = adapter_params(backbone, &adapters, stream, stream.num_tasks());
    let checkpoint = Checkpoint { backbone: backbone.clone(), adapters: registry, store };
    Ok((
        stages,
        Aux { params, adaption, separation: Some(separation), digests, checkpoint: Some(checkpoint) },
    ))
}

fn run_raw_ncm(cfg: &ExperimentConfig, p: &Prepared) -> Result<(Vec<StageEval>, Aux)> {
    let stream = &p.stream;
    let backbone = &p.backbone;
    let class_to_task = stream.class_to_task();
    let oracle = cfg.method == Method::TopkOracle;
    let mut store = DualPrototypeStore::new();
    let mut stages = Vec::new();
    let mut digests = Vec::new();
    let mut first_classes = Vec::new();
    for t in 1..=stream.num_tasks() {
        let eval = at_stage(t, (|| {
            let raw = compute_raw_prototypes(backbone, &stream.task(t).train)?;
            store.ingest_task(t, raw.clone(), raw)?;
            if t == 1 {
                first_classes = store.classes_of_task(1);
            }
            digests.push(digest(&[store.raw()], &first_classes));
            let predictor = NcmPredictor { prototypes: store.raw(), backbone, adapter: None, k: cfg.k };
            evaluate(t, &predictor, stream, &class_to_task, oracle)
        })())?;
        stages.push(eval);
    }
    let params = ParamCounts {
        backbone: backbone.num_params(),
        per_adapter: 0,
        adapters_total: 0,
        temporary_head_max: 0,
        trainable_total: 0,
    };
    let checkpoint = Checkpoint { backbone: backbone.clone(), adapters: AdapterRegistry::new(), store };
    Ok((
        stages,
        Aux { params, adaption: Vec::new(), separation: None, digests, checkpoint: Some(checkpoint) },
    ))
}

fn run_first_task(cfg: &ExperimentConfig, p: &Prepared) -> Result<(Vec<StageEval>, Aux)> {
    let stream = &p.stream;
    let backbone = &p.backbone;
    let class_to_task = stream.class_to_task();
    let mut registry = AdapterRegistry::new();
    let mut store = DualPrototypeStore::new();
    let mut stages = Vec::new();
    let mut adaption = Vec::new();
    let mut digests = Vec::new();
    let mut first_classes = Vec::new();
    for t in 1..=stream.num_tasks() {
        let eval = at_stage(t, (|| {
            if t == 1 {
                let out = adapt_seeded(cfg, backbone, stream, 1, &registry)?;
                adaption.push(adaption_record(1, &out));
                registry.insert(out.adapter)?;
            }
            let adapter = registry.get(1)?;
            let train = &stream.task(t).train;
            let aug = compute_aug_prototypes(backbone, adapter, train)?;
            store.ingest_task(t, compute_raw_prototypes(backbone, train)?, aug)?;
            if t == 1 {
                first_classes = store.classes_of_task(1);
            }
            digests.push(digest(&[store.raw(), store.aug()], &first_classes));
            let predictor = NcmPredictor { prototypes: store.aug(), backbone, adapter: Some(adapter), k: cfg.k };
            evaluate(t, &predictor, stream, &class_to_task, false)
        })())?;
        stages.push(eval);
    }
    let adapters: Vec<&Adapter> = registry.iter().collect();
    let params = adapter_params(backbone, &adapters, stream, 1);
    let checkpoint = Checkpoint { backbone: backbone.clone(), adapters: registry, store };
    Ok((
        stages,
        Aux { params, adaption, separation: None, digests, checkpoint: Some(checkpoint) },
    ))
}

/// Linear-head classifier over the classes seen so far.
struct HeadPredictor<'a> {
    backbone: &'a Backbone,
    head: &'a TemporaryHead,
    /// `(class, head column)`, ascending class id.
    columns: Vec<(usize, usize)>,
    k: usize,
}

impl Predictor for HeadPredictor<'_> {
    fn decide(&self, x: &[f64]) -> Result<Decision> {
        let rep = self.backbone.forward(&Matrix::row_vector(x), None)?;
        let logits = self.head.logits(&rep)?;
        let scores: Vec<f64> = self.columns.iter().map(|&(_, col)| logits.get(0, col)).collect();
        let top = topk_indices(&scores, self.k.min(scores.len()))?;
        let topk_labels: Vec<usize> = top.iter().map(|&i| self.columns[i].0).collect();
        Ok(Decision { predicted: topk_labels[0], topk_labels, adapter_calls: 0 })
    }
}

fn run_finetune(cfg: &ExperimentConfig, p: &Prepared) -> Result<(Vec<StageEval>, Aux)> {
    let stream = &p.stream;
    let class_to_task = stream.class_to_task();
    let mut backbone = Backbone::from_blocks(p.backbone.blocks().to_vec(), false)?;
    let h = backbone.feature_dim();
    let mut head = TemporaryHead::zeros(h, 0);
    let mut column_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut stages = Vec::new();
    for t in 1..=stream.num_tasks() {
        let eval = at_stage(t, (|| {
            let train = &stream.task(t).train;
            let mut rng = RngState::derive(cfg.seed, STREAM_FINETUNE + t as u64);
            let new: Vec<usize> = train.class_set().iter().copied().collect();
            for &c in &new {
                let col = column_of.len();
                column_of.insert(c, col);
            }
            head.grow(new.len(), &mut rng);
            let targets: Vec<usize> = train.labels().iter().map(|y| column_of[y]).collect();
            fit_classifier(&mut backbone, &mut head, train, &targets, &cfg.train, &mut rng)?;
            let predictor = HeadPredictor {
                backbone: &backbone,
                head: &head,
                columns: column_of.iter().map(|(&c, &col)| (c, col)).collect(),
                k: cfg.k,
            };
            evaluate(t, &predictor, stream, &class_to_task, false)
        })())?;
        stages.push(eval);
    }
    let total = backbone.num_params() + head.weight.len() + head.bias.len();
    let params = ParamCounts {
        backbone: backbone.num_params(),
        per_adapter: 0,
        adapters_total: 0,
        temporary_head_max: head.weight.len() + head.bias.len(),
        trainable_total: total,
    };
    Ok((
        stages,
        Aux { params, adaption: Vec::new(), separation: None, digests: Vec::new(), checkpoint: None },
    ))
}

/// Sequential fine-tuning baseline.
pub fn finetune_sequential(cfg: &ExperimentConfig) -> Result<RunResult> {
    Ok(run_experiment(&cfg.with_method(Method::Finetune))?.result)
}

/// Writes results, curves, the stream manifest and (when present) the
/// weights file into `dir`.
pub fn write_run(dir: impl AsRef<Path>, out: &RunOutput, manifest: &str) -> Result<()> {
    let dir = dir.as_ref();
    write_run_files(dir, &out.result)?;
    write_atomic(dir.join("manifest.txt"), manifest.as_bytes())?;
    if let Some(ck) = &out.checkpoint {
        let tmp = dir.join("weights.txt.tmp");
        save_checkpoint(&tmp, ck)?;
        std::fs::rename(tmp, dir.join("weights.txt"))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub results: Vec<RunResult>,
    pub manifest: String,
    pub table: String,
}

/// Runs every ablation arm on one shared stream and backbone. With `out`,
/// writes one subdirectory per arm plus `comparison.md` and
/// `comparison.csv`.
pub fn run_ablation_suite(base: &ExperimentConfig, out: Option<&Path>) -> Result<AblationOutput> {
    let prepared = prepare(base)?;
    let manifest = prepared.stream.manifest();
    let mut results = Vec::new();
    for m in Method::ABLATION {
        let run = run_prepared(&base.with_method(m), &prepared)?;
        if let Some(dir) = out {
            write_run(dir.join(m.name()), &run, &manifest)?;
        }
        results.push(run.result);
    }
    let table = comparison_table(&results);
    if let Some(dir) = out {
        write_atomic(dir.join("comparison.md"), table.as_bytes())?;
        write_atomic(dir.join("comparison.csv"), combined_curves_csv(&results).as_bytes())?;
    }
    Ok(AblationOutput { results, manifest, table })
}
