//! Context-aware batched prediction and the probability-averaging ensemble.
//!
//! Prediction never sees labels: every forward path here takes features
//! only, and the context μ is recomputed from each test batch, which is the
//! only test-time information the method consumes.

use crate::autodiff::{Graph, Tensor};
use crate::datasets::DomainDataset;
use crate::error::{CasaError, Result};
use crate::models::{forward_adapted, insert_bundle, AdapterParams, ModelBundle, Trainable};

/// All per-task models of an experiment plus the one shared adapter.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    bundles: Vec<ModelBundle>,
    adapter: Option<AdapterParams>,
}

impl EnsembleModel {
    pub fn new(bundles: Vec<ModelBundle>, adapter: Option<AdapterParams>) -> Result<EnsembleModel> {
        if bundles.is_empty() {
            return Err(CasaError::EmptyBatch("ensemble with no models".into()));
        }
        let f = bundles[0].extractor.input_dim();
        let c = bundles[0].feature_width();
        let k = bundles[0].class_count();
        for b in &bundles {
            if b.extractor.input_dim() != f || b.feature_width() != c || b.class_count() != k {
                return Err(CasaError::Contract(format!(
                    "ensemble bundles disagree on dimensions (task {})",
                    b.task_id
                )));
            }
        }
        Ok(EnsembleModel { bundles, adapter })
    }

    pub fn bundles(&self) -> &[ModelBundle] {
        &self.bundles
    }

    pub fn adapter(&self) -> Option<&AdapterParams> {
        self.adapter.as_ref()
    }

    pub fn class_count(&self) -> usize {
        self.bundles[0].class_count()
    }

    pub fn feature_dim(&self) -> usize {
        self.bundles[0].extractor.input_dim()
    }
}

/// Probabilities of one (possibly adapted) model on a batch, with μ taken
/// from this batch. Labels are not an input.
pub fn predict_batch(
    bundle: &ModelBundle,
    adapter: Option<&AdapterParams>,
    x: &Tensor,
) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(CasaError::EmptyBatch("predict_batch on empty input".into()));
    }
    let mut graph = Graph::new();
    let xv = graph.constant(x.clone());
    let vars = insert_bundle(&mut graph, bundle, adapter, Trainable::none());
    let probs = forward_adapted(&mut graph, &vars, xv)?;
    Ok(graph.value(probs).clone())
}

/// Mean of per-model probability tensors (all [B×K]).
pub fn average_probs(per_model: &[Tensor]) -> Result<Tensor> {
    let first = per_model
        .first()
        .ok_or_else(|| CasaError::EmptyBatch("average over zero models".into()))?;
    let mut acc = vec![0.0; first.numel()];
    for probs in per_model {
        if probs.shape() != first.shape() {
            return Err(CasaError::DimensionMismatch {
                context: "average_probs".into(),
                left: first.shape().to_vec(),
                right: probs.shape().to_vec(),
            });
        }
        for (a, p) in acc.iter_mut().zip(probs.data()) {
            *a += p;
        }
    }
    let n = per_model.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape().to_vec(), acc)
}

/// Row-wise argmax; ties break to the lowest class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let (rows, cols) = (probs.rows(), probs.cols());
    (0..rows)
        .map(|r| {
            let mut best = 0;
            for c in 1..cols {
                if probs.at(r, c) > probs.at(r, best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Ensemble-mean probabilities on a batch.
pub fn ensemble_probs(model: &EnsembleModel, x: &Tensor) -> Result<Tensor> {
    let per_model: Vec<Tensor> = model
        .bundles
        .iter()
        .map(|b| predict_batch(b, model.adapter(), x))
        .collect::<Result<_>>()?;
    average_probs(&per_model)
}

/// Predicted labels: argmax of the mean probability vector per sample.
pub fn ensemble_predict(model: &EnsembleModel, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&ensemble_probs(model, x)?))
}

/// Accuracy of the ensemble on (features, labels), traversed in order in
/// consecutive batches; the last batch may be smaller. Labels are consumed
/// here only, for scoring.
pub fn accuracy_on(
    model: &EnsembleModel,
    features: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(CasaError::Contract("batch_size must be >= 1".into()));
    }
    let n = features.rows();
    if n != labels.len() {
        return Err(CasaError::DimensionMismatch {
            context: "accuracy_on labels".into(),
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(CasaError::EmptyBatch("accuracy over zero samples".into()));
    }
    let k = model.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(CasaError::LabelOutOfRange {
            label: bad,
            classes: k,
            sample: labels.iter().position(|&l| l == bad).unwrap_or(0),
        });
    }
    let f = features.cols();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let chunk =
            Tensor::matrix(end - start, f, features.data()[start * f..end * f].to_vec())?;
        let predicted = ensemble_predict(model, &chunk)?;
        for (p, &y) in predicted.iter().zip(&labels[start..end]) {
            if *p == y {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy of the ensemble on one domain dataset.
pub fn evaluate(model: &EnsembleModel, dataset: &DomainDataset, batch_size: usize) -> Result<f64> {
    accuracy_on(model, &dataset.features, &dataset.labels, batch_size)
}

/// Accuracy of a single (possibly adapted) model; an ensemble of one.
pub fn evaluate_bundle(
    bundle: &ModelBundle,
    adapter: Option<&AdapterParams>,
    features: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let model = EnsembleModel::new(vec![bundle.clone()], adapter.cloned())?;
    accuracy_on(&model, features, labels, batch_size)
}
