//! Two-stage training: per-task ERM on each meta-source, then a single
//! shared adapter trained across all tasks with the combined objective
//! adapt + λ·preserve. Everything is a pure function of (data, config, seed).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::datasets::DomainDataset;
use crate::error::{CasaError, Result};
use crate::inference::evaluate_bundle;
use crate::meta_tasks::MetaTask;
use crate::models::{
    forward_logits, insert_bundle, AdapterParams, AdapterVars, BundleVars, CaFilmParams,
    MlpAdapterParams, MlpParams, MlpVars, ModelBundle, Trainable,
};
use crate::rng::{derive_seed, rng_from, tags};

/// Model selection and metrics cadence, in steps.
pub const CHECKPOINT_EVERY: u64 = 100;

// ---- configuration ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_adapter: f64,
    pub lr_classifier_finetune: f64,
    pub batch_size: usize,
    pub lambda_preserve: f64,
    pub steps_stage1: u64,
    pub steps_stage2: u64,
    pub finetune_classifier: bool,
    pub val_fraction: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr_stage1: 5e-5,
            lr_adapter: 1e-3,
            lr_classifier_finetune: 5e-5,
            batch_size: 32,
            lambda_preserve: 1.0,
            steps_stage1: 2000,
            steps_stage2: 2000,
            finetune_classifier: false,
            val_fraction: 0.2,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CasaError::Config(m));
        if !(self.lr_stage1 > 0.0 && self.lr_adapter > 0.0 && self.lr_classifier_finetune > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.lambda_preserve >= 0.0) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda_preserve));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction must be in (0,1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Network shapes. The extractor is a two-hidden-layer ReLU MLP ending at the
/// feature width C; the classifier is one linear layer C -> K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_width: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            hidden_dims: vec![32, 32],
            feature_width: 16,
        }
    }
}

impl ModelConfig {
    pub fn extractor_dims(&self, feature_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(feature_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.feature_width);
        dims
    }

    pub fn classifier_dims(&self, classes: usize) -> Vec<usize> {
        vec![self.feature_width, classes]
    }

    /// MLP-adapter shape for the ablations: one hidden layer of width 2C.
    pub fn mlp_adapter(&self, use_context: bool, rng: &mut ChaCha20Rng) -> MlpAdapterParams {
        let c = self.feature_width;
        let input = if use_context { 2 * c } else { c };
        MlpAdapterParams {
            mlp: MlpParams::glorot_init(&[input, 2 * c, c], rng),
            use_context,
        }
    }
}

// ---- Adam --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig) -> AdamHyper {
        AdamHyper {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentPair {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment accumulators for one parameter group, plus the group's
/// step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    slots: Vec<MomentPair>,
}

impl AdamState {
    pub fn for_tensors(tensors: &[&Tensor]) -> AdamState {
        AdamState {
            step: 0,
            slots: tensors
                .iter()
                .map(|t| MomentPair {
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over a parameter group. `params` and
/// `grads` must align with the state's slots.
pub fn adam_step(
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
) {
    assert_eq!(params.len(), state.slots.len(), "optimizer slot mismatch");
    assert_eq!(params.len(), grads.len(), "gradient group mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut state.slots) {
        assert_eq!(param.numel(), grad.len(), "parameter/gradient shape mismatch");
        let data = param.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            slot.m[i] = hyper.beta1 * slot.m[i] + (1.0 - hyper.beta1) * g;
            slot.v[i] = hyper.beta2 * slot.v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

// ---- batch sampling and the leakage audit -------------------------------------

/// Which part of training drew a batch; audit keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPurpose {
    Stage1,
    Stage2Adapt,
    Stage2Preserve,
}

/// Counts of training batches per (purpose, domain id). Proves which domains
/// fed the optimizer; the held-out test domain must never appear.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SamplerAudit {
    counts: BTreeMap<(BatchPurpose, u32), u64>,
}

impl SamplerAudit {
    fn record(&mut self, purpose: BatchPurpose, domain_id: u32) {
        *self.counts.entry((purpose, domain_id)).or_insert(0) += 1;
    }

    /// Batches that contained samples of this domain, over all purposes.
    pub fn batches_from_domain(&self, domain_id: u32) -> u64 {
        self.counts
            .iter()
            .filter(|((_, d), _)| *d == domain_id)
            .map(|(_, c)| *c)
            .sum()
    }

    pub fn domains_seen(&self) -> BTreeSet<u32> {
        self.counts.keys().map(|(_, d)| *d).collect()
    }

    pub fn total_batches(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn merge(&mut self, other: &SamplerAudit) {
        for (key, count) in &other.counts {
            *self.counts.entry(*key).or_insert(0) += count;
        }
    }
}

/// Epoch sampler over a pool of domains: shuffles all (domain, row) pairs per
/// epoch and hands out consecutive chunks; the final partial chunk of an
/// epoch is used as-is.
struct PooledSampler {
    items: Vec<(usize, usize)>, // (dataset index within the pool, row)
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha20Rng,
    batch_size: usize,
}

impl PooledSampler {
    fn new(datasets: &[DomainDataset], batch_size: usize, seed: u64) -> Result<PooledSampler> {
        let mut items = Vec::new();
        for (di, ds) in datasets.iter().enumerate() {
            for row in 0..ds.len() {
                items.push((di, row));
            }
        }
        if items.is_empty() {
            return Err(CasaError::EmptyBatch("sampler over empty pool".into()));
        }
        let order = (0..items.len()).collect();
        Ok(PooledSampler {
            items,
            order,
            pos: usize::MAX, // force a shuffle on first use
            rng: rng_from(seed),
            batch_size,
        })
    }

    fn next_batch(&mut self, datasets: &[DomainDataset]) -> (Tensor, Vec<usize>, BTreeSet<u32>) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let take = self.batch_size.min(self.order.len() - self.pos);
        let f = datasets[0].feature_dim();
        let mut data = Vec::with_capacity(take * f);
        let mut labels = Vec::with_capacity(take);
        let mut domains = BTreeSet::new();
        for k in 0..take {
            let (di, row) = self.items[self.order[self.pos + k]];
            let ds = &datasets[di];
            data.extend_from_slice(ds.row(row));
            labels.push(ds.labels[row]);
            domains.insert(ds.domain_id);
        }
        self.pos += take;
        let features = Tensor::matrix(take, f, data).expect("batch shape");
        (features, labels, domains)
    }
}

/// Domain-pure sampler for meta-target batches: cycles the target domains,
/// each with its own epoch sampler.
struct DomainCycler {
    samplers: Vec<PooledSampler>,
    cursor: usize,
}

impl DomainCycler {
    fn new(domains: &[DomainDataset], batch_size: usize, seed: u64) -> Result<DomainCycler> {
        let samplers = domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                PooledSampler::new(
                    std::slice::from_ref(d),
                    batch_size,
                    derive_seed(seed, i as u64 + 1),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DomainCycler {
            samplers,
            cursor: 0,
        })
    }

    fn next_batch(&mut self, domains: &[DomainDataset]) -> (Tensor, Vec<usize>, u32) {
        let i = self.cursor;
        self.cursor = (self.cursor + 1) % self.samplers.len();
        let (x, y, _) = self.samplers[i].next_batch(std::slice::from_ref(&domains[i]));
        (x, y, domains[i].domain_id)
    }
}

// ---- task data -----------------------------------------------------------------

/// One meta-task over the train portions of the training domains, plus the
/// matching held-out validation portions.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: MetaTask,
    pub source_val: Vec<DomainDataset>,
    pub target_val: Vec<DomainDataset>,
}

/// Concatenate datasets into one (features, labels) pool, in order.
pub fn pool_datasets(datasets: &[DomainDataset]) -> Result<(Tensor, Vec<usize>)> {
    let first = datasets
        .first()
        .ok_or_else(|| CasaError::EmptyBatch("pooling zero datasets".into()))?;
    let f = first.feature_dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for ds in datasets {
        if ds.feature_dim() != f {
            return Err(CasaError::DimensionMismatch {
                context: "pool_datasets".into(),
                left: vec![f],
                right: vec![ds.feature_dim()],
            });
        }
        data.extend_from_slice(ds.features.data());
        labels.extend_from_slice(&ds.labels);
    }
    Ok((Tensor::matrix(labels.len(), f, data)?, labels))
}

// ---- losses ----------------------------------------------------------------------

fn batch_cross_entropy(
    bundle: &ModelBundle,
    adapter: Option<&AdapterParams>,
    x: &Tensor,
    y: &[usize],
) -> Result<f64> {
    if x.rows() == 0 || y.is_empty() {
        return Err(CasaError::EmptyBatch("loss on empty batch".into()));
    }
    let mut graph = Graph::new();
    let xv = graph.constant(x.clone());
    let vars = insert_bundle(&mut graph, bundle, adapter, Trainable::none());
    let logits = forward_logits(&mut graph, &vars, xv)?;
    let loss = graph.softmax_cross_entropy(logits, y)?;
    Ok(graph.value(loss).item())
}

/// Cross-entropy of the adapted model on a meta-target batch, with μ from
/// this batch. The batch must come from a single meta-target domain.
pub fn adapt_loss(
    bundle: &ModelBundle,
    adapter: Option<&AdapterParams>,
    x: &Tensor,
    y: &[usize],
) -> Result<f64> {
    batch_cross_entropy(bundle, adapter, x, y)
}

/// Cross-entropy of the adapted model on a meta-source batch, with its own μ.
pub fn preserve_loss(
    bundle: &ModelBundle,
    adapter: Option<&AdapterParams>,
    x: &Tensor,
    y: &[usize],
) -> Result<f64> {
    batch_cross_entropy(bundle, adapter, x, y)
}

// ---- telemetry ---------------------------------------------------------------------

/// One metrics record, emitted at every checkpoint. Serialized as a JSONL
/// line by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: String,
    pub step: u64,
    pub task_id: Option<usize>,
    pub loss_adapt: Option<f64>,
    pub loss_preserve: Option<f64>,
    pub loss_total: Option<f64>,
    pub val_acc_source: Option<f64>,
    pub val_acc_target: Option<f64>,
}

/// Per-step losses of stage 2, kept for the trailing-mean diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub task_id: usize,
    pub adapt: Option<f64>,
    pub preserve: f64,
    pub total: f64,
}

// ---- stage 1 --------------------------------------------------------------------------

pub struct Stage1Result {
    pub bundle: ModelBundle,
    pub best_step: u64,
    pub best_val_acc: f64,
    pub records: Vec<TrainRecord>,
}

fn mlp_vars(vars: &MlpVars) -> Vec<Var> {
    vars.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
}

fn adapter_vars(vars: &AdapterVars) -> Vec<Var> {
    match vars {
        AdapterVars::CaFilm { matrix, bias } => vec![*matrix, *bias],
        AdapterVars::Mlp { mlp, .. } => mlp_vars(mlp),
    }
}

fn collect_grads<'g>(graph: &'g Graph, vars: &[Var]) -> Vec<&'g [f64]> {
    vars.iter()
        .map(|&v| graph.grad(v).expect("backward fills every leaf"))
        .collect()
}

fn bundle_trainable_vars(vars: &BundleVars, trainable: Trainable) -> Vec<Var> {
    let mut out = Vec::new();
    if trainable.extractor {
        out.extend(mlp_vars(&vars.extractor));
    }
    if trainable.classifier {
        out.extend(mlp_vars(&vars.classifier));
    }
    out
}

/// Train one meta-source model by ERM on the pooled meta-source. Returns the
/// parameters from the checkpoint with the best meta-source validation
/// accuracy. With `attach_adapter`, a per-task adapter (identity-initialized)
/// is trained jointly, at the adapter learning rate.
pub fn train_stage1(
    data: &TaskData,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    classes: usize,
    attach_adapter: bool,
    audit: &mut SamplerAudit,
) -> Result<Stage1Result> {
    cfg.validate()?;
    if data.task.source.is_empty() {
        return Err(CasaError::EmptyBatch(format!(
            "task {} has an empty meta-source",
            data.task.task_id
        )));
    }
    let task_id = data.task.task_id;
    let feature_dim = data.task.source[0].feature_dim();

    let mut init_rng = rng_from(derive_seed(
        cfg.seed,
        tags::with_index(tags::INIT_STAGE1, task_id as u64),
    ));
    let mut bundle = ModelBundle {
        task_id,
        extractor: MlpParams::glorot_init(&model_cfg.extractor_dims(feature_dim), &mut init_rng),
        classifier: MlpParams::glorot_init(&model_cfg.classifier_dims(classes), &mut init_rng),
        stage1_adapter: attach_adapter.then(|| AdapterParams::CaFilm(CaFilmParams::identity())),
    };

    let mut main_group: Vec<&Tensor> = bundle.extractor.tensors();
    main_group.extend(bundle.classifier.tensors());
    let mut main_adam = AdamState::for_tensors(&main_group);
    drop(main_group);
    let mut adapter_adam = bundle
        .stage1_adapter
        .as_ref()
        .map(|a| AdamState::for_tensors(&a.tensors()));
    let hyper = AdamHyper::from_config(cfg);

    let mut sampler = PooledSampler::new(
        &data.task.source,
        cfg.batch_size,
        derive_seed(cfg.seed, tags::with_index(tags::BATCH_STAGE1, task_id as u64)),
    )?;

    let (val_x, val_y) = pool_datasets(&data.source_val)?;
    let evaluate_now = |bundle: &ModelBundle| -> Result<f64> {
        evaluate_bundle(bundle, None, &val_x, &val_y, cfg.batch_size)
    };

    let mut best: Option<(f64, u64, ModelBundle)> = None;
    let mut records = Vec::new();

    let checkpoint = |step: u64,
                          bundle: &ModelBundle,
                          last_loss: Option<f64>,
                          best: &mut Option<(f64, u64, ModelBundle)>,
                          records: &mut Vec<TrainRecord>|
     -> Result<()> {
        let acc = evaluate_now(bundle)?;
        if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
            *best = Some((acc, step, bundle.clone()));
        }
        records.push(TrainRecord {
            stage: "stage1".into(),
            step,
            task_id: Some(task_id),
            loss_adapt: None,
            loss_preserve: None,
            loss_total: last_loss,
            val_acc_source: Some(acc),
            val_acc_target: None,
        });
        Ok(())
    };

    checkpoint(0, &bundle, None, &mut best, &mut records)?;

    let trainable = Trainable {
        extractor: true,
        classifier: true,
        adapter: attach_adapter,
    };
    for step in 1..=cfg.steps_stage1 {
        let (x, y, domains) = sampler.next_batch(&data.task.source);
        for d in &domains {
            audit.record(BatchPurpose::Stage1, *d);
        }

        let mut graph = Graph::new();
        let xv = graph.constant(x);
        let vars = insert_bundle(&mut graph, &bundle, None, trainable);
        let logits = forward_logits(&mut graph, &vars, xv)?;
        let loss = graph.softmax_cross_entropy(logits, &y)?;
        let loss_value = graph.value(loss).item();
        if !loss_value.is_finite() {
            return Err(CasaError::TrainingDiverged {
                step,
                message: format!("stage-1 loss {loss_value} on task {task_id}"),
            });
        }
        graph.backward(loss)?;

        let main_vars = bundle_trainable_vars(&vars, trainable);
        let grads = collect_grads(&graph, &main_vars);
        let mut main_params: Vec<&mut Tensor> = bundle.extractor.tensors_mut();
        main_params.extend(bundle.classifier.tensors_mut());
        adam_step(&mut main_adam, &hyper, cfg.lr_stage1, &mut main_params, &grads);

        if let (Some(state), Some(adapter_leaf)) = (adapter_adam.as_mut(), vars.adapter.as_ref()) {
            let avars = adapter_vars(adapter_leaf);
            let agrads = collect_grads(&graph, &avars);
            let adapter = bundle.stage1_adapter.as_mut().expect("attached adapter");
            let mut aparams = adapter.tensors_mut();
            adam_step(state, &hyper, cfg.lr_adapter, &mut aparams, &agrads);
        }

        if step % CHECKPOINT_EVERY == 0 || step == cfg.steps_stage1 {
            checkpoint(step, &bundle, Some(loss_value), &mut best, &mut records)?;
        }
    }

    let (best_val_acc, best_step, best_bundle) = best.expect("at least the step-0 checkpoint");
    Ok(Stage1Result {
        bundle: best_bundle,
        best_step,
        best_val_acc,
        records,
    })
}

// ---- stage 2 ---------------------------------------------------------------------------

pub struct Stage2Result {
    pub adapter: AdapterParams,
    pub bundles: Vec<ModelBundle>,
    pub best_step: u64,
    pub best_val_acc: f64,
    pub records: Vec<TrainRecord>,
    pub step_losses: Vec<StepLoss>,
}

/// Mean validation accuracy over every task's meta-source split and each
/// nonempty meta-target split (per-domain batches, then averaged per task).
fn stage2_validation(
    tasks: &[TaskData],
    bundles: &[ModelBundle],
    adapter: &AdapterParams,
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    let mut source_accs = Vec::new();
    let mut target_accs = Vec::new();
    for (data, bundle) in tasks.iter().zip(bundles) {
        let (sx, sy) = pool_datasets(&data.source_val)?;
        source_accs.push(evaluate_bundle(bundle, Some(adapter), &sx, &sy, batch_size)?);
        if !data.target_val.is_empty() {
            let mut per_domain = Vec::new();
            for ds in &data.target_val {
                per_domain.push(evaluate_bundle(
                    bundle,
                    Some(adapter),
                    &ds.features,
                    &ds.labels,
                    batch_size,
                )?);
            }
            target_accs.push(mean(&per_domain));
        }
    }
    let source_mean = mean(&source_accs);
    let target_mean = if target_accs.is_empty() {
        f64::NAN
    } else {
        mean(&target_accs)
    };
    let mut all = source_accs;
    all.extend(target_accs);
    Ok((mean(&all), source_mean, target_mean))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Train the shared adapter across all tasks (round-robin, one combined step
/// per task visit). Extractors stay frozen; classifiers update only in
/// fine-tune mode. Returns the checkpoint with the best mean validation
/// accuracy across all meta-source and meta-target splits.
pub fn train_stage2(
    tasks: &[TaskData],
    mut bundles: Vec<ModelBundle>,
    adapter_init: AdapterParams,
    cfg: &TrainConfig,
    audit: &mut SamplerAudit,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if tasks.len() != bundles.len() {
        return Err(CasaError::Config(format!(
            "{} tasks but {} bundles",
            tasks.len(),
            bundles.len()
        )));
    }
    if tasks.is_empty() {
        return Err(CasaError::Config("stage 2 with no tasks".into()));
    }
    if adapter_init.param_count() == 0 && !cfg.finetune_classifier {
        return Err(CasaError::Config("stage 2 has no trainable parameters".into()));
    }

    let mut adapter = adapter_init;
    let hyper = AdamHyper::from_config(cfg);
    let mut adapter_adam = AdamState::for_tensors(&adapter.tensors());
    let mut classifier_adams: Vec<AdamState> = bundles
        .iter()
        .map(|b| AdamState::for_tensors(&b.classifier.tensors()))
        .collect();

    let mut source_samplers = Vec::with_capacity(tasks.len());
    let mut target_cyclers: Vec<Option<DomainCycler>> = Vec::with_capacity(tasks.len());
    for data in tasks {
        let base = derive_seed(
            cfg.seed,
            tags::with_index(tags::BATCH_STAGE2, data.task.task_id as u64),
        );
        source_samplers.push(PooledSampler::new(
            &data.task.source,
            cfg.batch_size,
            derive_seed(base, 0),
        )?);
        target_cyclers.push(if data.task.is_preserve_only() {
            None
        } else {
            Some(DomainCycler::new(
                &data.task.target,
                cfg.batch_size,
                derive_seed(base, 1),
            )?)
        });
    }

    let trainable = Trainable::stage2(cfg.finetune_classifier);
    let mut best: Option<(f64, u64, AdapterParams, Vec<MlpParams>)> = None;
    let mut records = Vec::new();
    let mut step_losses: Vec<StepLoss> = Vec::new();

    let checkpoint = |step: u64,
                          adapter: &AdapterParams,
                          bundles: &[ModelBundle],
                          last: Option<&StepLoss>,
                          best: &mut Option<(f64, u64, AdapterParams, Vec<MlpParams>)>,
                          records: &mut Vec<TrainRecord>|
     -> Result<()> {
        let (overall, source_mean, target_mean) =
            stage2_validation(tasks, bundles, adapter, cfg.batch_size)?;
        if best.as_ref().map_or(true, |(b, _, _, _)| overall > *b) {
            let classifiers = bundles.iter().map(|b| b.classifier.clone()).collect();
            *best = Some((overall, step, adapter.clone(), classifiers));
        }
        records.push(TrainRecord {
            stage: "stage2".into(),
            step,
            task_id: last.map(|l| l.task_id),
            loss_adapt: last.and_then(|l| l.adapt),
            loss_preserve: last.map(|l| l.preserve),
            loss_total: last.map(|l| l.total),
            val_acc_source: Some(source_mean),
            val_acc_target: target_mean.is_finite().then_some(target_mean),
        });
        Ok(())
    };

    checkpoint(0, &adapter, &bundles, None, &mut best, &mut records)?;

    for step in 1..=cfg.steps_stage2 {
        let ti = ((step - 1) % tasks.len() as u64) as usize;
        let data = &tasks[ti];
        let bundle = &bundles[ti];

        let mut graph = Graph::new();
        let vars = insert_bundle(&mut graph, bundle, Some(&adapter), trainable);

        // Meta-target batch, domain-pure; skipped for full-mask tasks.
        let adapt_var = match target_cyclers[ti].as_mut() {
            Some(cycler) => {
                let (x, y, domain) = cycler.next_batch(&data.task.target);
                audit.record(BatchPurpose::Stage2Adapt, domain);
                let xv = graph.constant(x);
                let logits = forward_logits(&mut graph, &vars, xv)?;
                Some(graph.softmax_cross_entropy(logits, &y)?)
            }
            None => None,
        };

        // Meta-source batch from the pooled source.
        let (sx, sy, sdomains) = source_samplers[ti].next_batch(&data.task.source);
        for d in &sdomains {
            audit.record(BatchPurpose::Stage2Preserve, *d);
        }
        let sxv = graph.constant(sx);
        let source_logits = forward_logits(&mut graph, &vars, sxv)?;
        let preserve_var = graph.softmax_cross_entropy(source_logits, &sy)?;

        let scaled_preserve = graph.scale(preserve_var, cfg.lambda_preserve);
        let total_var = match adapt_var {
            Some(a) => graph.add(a, scaled_preserve)?,
            None => scaled_preserve,
        };

        let loss = StepLoss {
            step,
            task_id: data.task.task_id,
            adapt: adapt_var.map(|v| graph.value(v).item()),
            preserve: graph.value(preserve_var).item(),
            total: graph.value(total_var).item(),
        };
        if !loss.total.is_finite() {
            return Err(CasaError::TrainingDiverged {
                step,
                message: format!("stage-2 loss {} on task {}", loss.total, data.task.task_id),
            });
        }
        graph.backward(total_var)?;

        let avars = adapter_vars(vars.adapter.as_ref().expect("stage-2 adapter inserted"));
        let agrads = collect_grads(&graph, &avars);
        let mut aparams = adapter.tensors_mut();
        adam_step(&mut adapter_adam, &hyper, cfg.lr_adapter, &mut aparams, &agrads);

        if cfg.finetune_classifier {
            let cvars = mlp_vars(&vars.classifier);
            let cgrads = collect_grads(&graph, &cvars);
            let mut cparams = bundles[ti].classifier.tensors_mut();
            adam_step(
                &mut classifier_adams[ti],
                &hyper,
                cfg.lr_classifier_finetune,
                &mut cparams,
                &cgrads,
            );
        }

        step_losses.push(loss);
        if step % CHECKPOINT_EVERY == 0 || step == cfg.steps_stage2 {
            checkpoint(
                step,
                &adapter,
                &bundles,
                step_losses.last(),
                &mut best,
                &mut records,
            )?;
        }
    }

    let (best_val_acc, best_step, best_adapter, best_classifiers) =
        best.expect("at least the step-0 checkpoint");
    for (bundle, classifier) in bundles.iter_mut().zip(best_classifiers) {
        bundle.classifier = classifier;
    }
    Ok(Stage2Result {
        adapter: best_adapter,
        bundles,
        best_step,
        best_val_acc,
        records,
        step_losses,
    })
}
