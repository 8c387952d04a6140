//! Synthetic multi-domain classification data with controllable shift,
//! CSV persistence, and holdout splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::Tensor;
use crate::error::{CasaError, Result};
use crate::rng::{derive_seed, rng_from, tags, GENERATOR_NAME};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Labeled feature vectors from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: u32,
    /// [N×F] feature matrix.
    pub features: Tensor,
    /// Class indices, length N.
    pub labels: Vec<usize>,
    pub name: String,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.feature_dim();
        &self.features.data()[i * f..(i + 1) * f]
    }

    /// Copy the given sample indices into a batch (features, labels).
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let features = Tensor::matrix(indices.len(), f, data).expect("gather shape");
        (features, labels)
    }
}

/// How successive domains are shifted relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Each domain adds a fixed random offset of norm `shift_magnitude`.
    MeanShift,
    /// Domain j rotates class prototypes by j·shift_magnitude radians in the
    /// first two feature coordinates.
    Rotation,
    /// The label depends on the feature vector relative to the domain mean,
    /// so no domain-blind rule can generalize across domains.
    ContextCoupled,
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShiftMode::MeanShift => "mean_shift",
            ShiftMode::Rotation => "rotation",
            ShiftMode::ContextCoupled => "context_coupled",
        };
        f.write_str(s)
    }
}

/// Recipe for one synthetic multi-domain dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub samples_per_domain: usize,
    pub shift_mode: ShiftMode,
    pub shift_magnitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CasaError::InvalidSpec(msg));
        if self.num_domains < 2 {
            return fail(format!("num_domains must be >= 2, got {}", self.num_domains));
        }
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.feature_dim < 2 {
            return fail(format!("feature_dim must be >= 2, got {}", self.feature_dim));
        }
        if self.samples_per_domain < self.classes {
            return fail(format!(
                "samples_per_domain {} must cover all {} classes",
                self.samples_per_domain, self.classes
            ));
        }
        if !(self.noise_std >= 0.0) {
            return fail(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.shift_magnitude >= 0.0) {
            return fail(format!(
                "shift_magnitude must be >= 0, got {}",
                self.shift_magnitude
            ));
        }
        Ok(())
    }
}

/// Ground truth of a `context_coupled` construction, reconstructible from the
/// spec alone. Used by oracle checks, never by the training pipeline.
#[derive(Debug, Clone)]
pub struct ContextCoupledTruth {
    /// Global unit direction defining the label rule.
    pub direction: Vec<f64>,
    /// Per-domain means m_j.
    pub domain_means: Vec<Vec<f64>>,
}

impl ContextCoupledTruth {
    /// The construction's own label rule: the quantile bucket of the
    /// projection of (x - m_j) onto the global direction.
    pub fn bayes_label(&self, x: &[f64], domain_mean: &[f64], noise_std: f64, classes: usize) -> usize {
        let t: f64 = x
            .iter()
            .zip(domain_mean)
            .zip(&self.direction)
            .map(|((xv, mv), wv)| (xv - mv) * wv)
            .sum();
        projection_bucket(t, noise_std, classes)
    }
}

fn projection_bucket(t: f64, noise_std: f64, classes: usize) -> usize {
    if noise_std == 0.0 {
        return 0;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let u = normal.cdf(t / noise_std);
    ((u * classes as f64).floor() as usize).min(classes - 1)
}

fn sample_unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_noise(rng: &mut impl Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            n * std
        })
        .collect()
}

/// Class prototypes shared across domains (mean_shift and rotation modes).
fn class_prototypes(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    const PROTOTYPE_SCALE: f64 = 2.0;
    let mut rng = rng_from(derive_seed(spec.seed, tags::DATA_PROTOTYPES));
    (0..spec.classes)
        .map(|_| {
            sample_unit_vector(&mut rng, spec.feature_dim)
                .into_iter()
                .map(|v| v * PROTOTYPE_SCALE)
                .collect()
        })
        .collect()
}

fn domain_offsets(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = rng_from(derive_seed(spec.seed, tags::DATA_OFFSETS));
    (0..spec.num_domains)
        .map(|_| {
            sample_unit_vector(&mut rng, spec.feature_dim)
                .into_iter()
                .map(|v| v * spec.shift_magnitude)
                .collect()
        })
        .collect()
}

/// Reconstruct the ground truth of a `context_coupled` spec.
///
/// Domain means are built as m_j = shift·(a_j·w + b_j·v_j) with v_j ⊥ w and
/// a_j² + b_j² = 1, where the signed projections a_j are a deterministic
/// low-discrepancy sequence with |a_j| ≥ 0.45 and pairwise gaps bounded away
/// from zero. Every domain therefore sits far from any fixed decision
/// threshold along w, which is what makes the label rule unlearnable without
/// the domain mean.
pub fn context_coupled_truth(spec: &SyntheticSpec) -> Result<ContextCoupledTruth> {
    spec.validate()?;
    if spec.shift_mode != ShiftMode::ContextCoupled {
        return Err(CasaError::InvalidSpec(format!(
            "context_coupled_truth requires context_coupled mode, got {}",
            spec.shift_mode
        )));
    }
    let mut dir_rng = rng_from(derive_seed(spec.seed, tags::DATA_DIRECTION));
    let direction = sample_unit_vector(&mut dir_rng, spec.feature_dim);

    let mut mean_rng = rng_from(derive_seed(spec.seed, tags::DATA_OFFSETS));
    let golden = 0.618_033_988_749_894_9_f64;
    // Per-domain off-direction axes, kept mutually orthogonal while the
    // feature dimension allows it so one domain's mean position reveals
    // nothing about another's.
    let mut taken: Vec<Vec<f64>> = vec![direction.clone()];
    let mut domain_means = Vec::with_capacity(spec.num_domains);
    for j in 0..spec.num_domains {
        let along = 0.45 + 0.5 * ((j as f64 * golden).fract());
        let signed = if j % 2 == 0 { along } else { -along };
        let across = (1.0 - signed * signed).sqrt();
        let ortho = loop {
            let raw = sample_unit_vector(&mut mean_rng, spec.feature_dim);
            let mut v = raw;
            for basis in &taken {
                let dot: f64 = v.iter().zip(basis).map(|(a, b)| a * b).sum();
                for (vv, bv) in v.iter_mut().zip(basis) {
                    *vv -= dot * bv;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
            }
        };
        if taken.len() < spec.feature_dim - 1 {
            taken.push(ortho.clone());
        }
        domain_means.push(
            direction
                .iter()
                .zip(&ortho)
                .map(|(w, v)| spec.shift_magnitude * (signed * w + across * v))
                .collect(),
        );
    }

    Ok(ContextCoupledTruth {
        direction,
        domain_means,
    })
}

/// Generate one dataset per domain. Pure function of the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    match spec.shift_mode {
        ShiftMode::MeanShift => generate_prototype_based(spec, false),
        ShiftMode::Rotation => generate_prototype_based(spec, true),
        ShiftMode::ContextCoupled => generate_context_coupled(spec),
    }
}

fn generate_prototype_based(spec: &SyntheticSpec, rotate: bool) -> Result<Vec<DomainDataset>> {
    let prototypes = class_prototypes(spec);
    let offsets = if rotate { Vec::new() } else { domain_offsets(spec) };
    let f = spec.feature_dim;

    let mut out = Vec::with_capacity(spec.num_domains);
    for j in 0..spec.num_domains {
        let mut rng = rng_from(derive_seed(
            spec.seed,
            tags::with_index(tags::DATA_SAMPLES, j as u64),
        ));
        let mut data = Vec::with_capacity(spec.samples_per_domain * f);
        let mut labels = Vec::with_capacity(spec.samples_per_domain);
        let angle = j as f64 * spec.shift_magnitude;
        let (sin, cos) = angle.sin_cos();
        for n in 0..spec.samples_per_domain {
            let class = n % spec.classes;
            let mut x = prototypes[class].clone();
            if rotate {
                let (x0, x1) = (x[0], x[1]);
                x[0] = cos * x0 - sin * x1;
                x[1] = sin * x0 + cos * x1;
            } else {
                for (xv, ov) in x.iter_mut().zip(&offsets[j]) {
                    *xv += ov;
                }
            }
            for (xv, nv) in x.iter_mut().zip(sample_noise(&mut rng, f, spec.noise_std)) {
                *xv += nv;
            }
            data.extend_from_slice(&x);
            labels.push(class);
        }
        out.push(DomainDataset {
            domain_id: j as u32,
            features: Tensor::matrix(spec.samples_per_domain, f, data)?,
            labels,
            name: format!("domain{j}"),
        });
    }
    Ok(out)
}

/// Labels depend on the position of x relative to the domain mean m_j along a
/// global direction w, so the optimal rule needs the domain mean. Samples are
/// drawn by inverse-CDF within the label's quantile bucket, which keeps the
/// marginal feature distribution N(m_j, noise_std²·I) and guarantees every
/// class appears.
fn generate_context_coupled(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    let truth = context_coupled_truth(spec)?;
    let f = spec.feature_dim;
    let k = spec.classes;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");

    let mut out = Vec::with_capacity(spec.num_domains);
    for (j, mean) in truth.domain_means.iter().enumerate() {
        let mut rng = rng_from(derive_seed(
            spec.seed,
            tags::with_index(tags::DATA_SAMPLES, j as u64),
        ));
        let mut data = Vec::with_capacity(spec.samples_per_domain * f);
        let mut labels = Vec::with_capacity(spec.samples_per_domain);
        for n in 0..spec.samples_per_domain {
            let class = n % k;
            // Projection value confined to the class's quantile bucket.
            let r: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            let u = (class as f64 + r) / k as f64;
            let t = spec.noise_std * normal.inverse_cdf(u);
            // Isotropic noise with its w-component replaced by t.
            let raw = sample_noise(&mut rng, f, spec.noise_std);
            let along: f64 = raw.iter().zip(&truth.direction).map(|(a, b)| a * b).sum();
            let x: Vec<f64> = mean
                .iter()
                .zip(&raw)
                .zip(&truth.direction)
                .map(|((m, e), w)| m + e - along * w + t * w)
                .collect();
            data.extend_from_slice(&x);
            labels.push(class);
        }
        out.push(DomainDataset {
            domain_id: j as u32,
            features: Tensor::matrix(spec.samples_per_domain, f, data)?,
            labels,
            name: format!("domain{j}"),
        });
    }
    Ok(out)
}

// ---- persistence -----------------------------------------------------------

/// Sidecar metadata stored next to each dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub generator: String,
    pub classes: usize,
    pub feature_dim: usize,
    pub num_domains: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spec: Option<SyntheticSpec>,
}

impl DatasetMeta {
    pub fn for_generated(spec: &SyntheticSpec) -> DatasetMeta {
        DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            generator: GENERATOR_NAME.to_string(),
            classes: spec.classes,
            feature_dim: spec.feature_dim,
            num_domains: spec.num_domains,
            spec: Some(spec.clone()),
        }
    }
}

pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Write datasets as CSV (`domain,label,f0..f{F-1}`, LF endings) plus the
/// metadata sidecar. Floats use the shortest representation that parses back
/// to the same bits, so a save/load round trip is lossless.
pub fn save_csv(datasets: &[DomainDataset], meta: &DatasetMeta, path: &Path) -> Result<()> {
    if datasets.is_empty() {
        return Err(CasaError::EmptyBatch("save_csv: no datasets".into()));
    }
    let f = datasets[0].feature_dim();
    if datasets.iter().any(|d| d.feature_dim() != f) {
        return Err(CasaError::Format {
            path: path.display().to_string(),
            message: "datasets disagree on feature dimension".into(),
        });
    }
    let mut body = String::new();
    body.push_str("domain,label");
    for i in 0..f {
        body.push_str(&format!(",f{i}"));
    }
    body.push('\n');
    for ds in datasets {
        for (i, &label) in ds.labels.iter().enumerate() {
            body.push_str(&format!("{},{}", ds.domain_id, label));
            for v in ds.row(i) {
                body.push_str(&format!(",{v}"));
            }
            body.push('\n');
        }
    }
    fs::File::create(path)
        .and_then(|mut file| file.write_all(body.as_bytes()))
        .map_err(|e| CasaError::io(path, e))?;

    let meta_file = meta_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| CasaError::json(&meta_file, e))?;
    fs::write(&meta_file, json).map_err(|e| CasaError::io(&meta_file, e))?;
    Ok(())
}

/// Load datasets and their sidecar metadata. Labels are validated against the
/// metadata's class count; malformed rows report their 1-based line number.
pub fn load_csv(path: &Path) -> Result<(Vec<DomainDataset>, DatasetMeta)> {
    let meta_file = meta_path(path);
    let meta_text = fs::read_to_string(&meta_file).map_err(|e| CasaError::io(&meta_file, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| CasaError::json(&meta_file, e))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(CasaError::CheckpointVersion {
            found: meta.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }

    let text = fs::read_to_string(path).map_err(|e| CasaError::io(path, e))?;
    let path_str = path.display().to_string();
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| CasaError::Format {
        path: path_str.clone(),
        message: "empty file: header line required".into(),
    })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3 || columns[0] != "domain" || columns[1] != "label" {
        return Err(CasaError::Format {
            path: path_str.clone(),
            message: format!("bad header {header:?}: expected domain,label,f0,..."),
        });
    }
    let f = columns.len() - 2;
    if f != meta.feature_dim {
        return Err(CasaError::Format {
            path: path_str.clone(),
            message: format!(
                "header has {} feature columns but metadata says {}",
                f, meta.feature_dim
            ),
        });
    }

    let mut by_domain: BTreeMap<u32, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| CasaError::Parse {
            path: path_str.clone(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != f + 2 {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                f + 2,
                fields.len()
            )));
        }
        let domain: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad domain id {:?}", fields[0])))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad label {:?}", fields[1])))?;
        if label >= meta.classes {
            return Err(parse_err(format!(
                "label {} out of range for {} classes",
                label, meta.classes
            )));
        }
        let entry = by_domain.entry(domain).or_default();
        for field in &fields[2..] {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("bad feature value {field:?}")))?;
            entry.0.push(v);
        }
        entry.1.push(label);
    }

    if by_domain.is_empty() {
        return Err(CasaError::Format {
            path: path_str,
            message: "no data rows".into(),
        });
    }

    let mut out = Vec::with_capacity(by_domain.len());
    for (domain_id, (data, labels)) in by_domain {
        let features = Tensor::matrix(labels.len(), f, data)?;
        out.push(DomainDataset {
            domain_id,
            features,
            labels,
            name: format!("domain{domain_id}"),
        });
    }
    Ok((out, meta))
}

// ---- splits ----------------------------------------------------------------

/// Deterministic shuffled holdout split. The validation side gets
/// round(fraction·N) samples, clamped to [1, N-1].
pub fn split_holdout(
    dataset: &DomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    let n = dataset.len();
    if n < 2 {
        return Err(CasaError::Split(format!(
            "cannot split {} samples of {}",
            n, dataset.name
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CasaError::Split(format!(
            "fraction must be in (0, 1), got {fraction}"
        )));
    }
    let val_n = ((fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive_seed(
        seed,
        tags::with_index(tags::SPLIT, dataset.domain_id as u64),
    ));
    indices.shuffle(&mut rng);

    let (val_idx, train_idx) = indices.split_at(val_n);
    let make = |idx: &[usize], suffix: &str| {
        let (features, labels) = dataset.gather(idx);
        DomainDataset {
            domain_id: dataset.domain_id,
            features,
            labels,
            name: format!("{}/{}", dataset.name, suffix),
        }
    };
    Ok((make(train_idx, "train"), make(val_idx, "val")))
}
