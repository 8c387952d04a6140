//! The three networks of the pipeline: per-task feature extractor and
//! classifier MLPs, plus the shared context-aware modulation adapter.
//!
//! The adapter's contract: for feature z and batch-mean context μ, each
//! dimension c is modulated as z'_c = γ_c·z_c + β_c where
//! (γ_c, β_c)ᵀ = A·(z_c, μ_c)ᵀ + b with one 2×2 matrix A and one length-2
//! vector b shared across dimensions — six scalars in total. A = 0,
//! b = (1, 0) is an exact identity.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{CasaError, Result};

// ---- parameter containers --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// [in×out]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
}

/// Fully connected ReLU network: ReLU between layers, none after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LinearLayer>,
}

impl MlpParams {
    /// Glorot-uniform weights (±sqrt(6/(fan_in+fan_out))), zero biases.
    pub fn glorot_init(dims: &[usize], rng: &mut impl Rng) -> MlpParams {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                LinearLayer {
                    weight: Tensor::matrix(fan_in, fan_out, weight).expect("init shape"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros(dims: &[usize]) -> MlpParams {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer {
                weight: Tensor::zeros(vec![w[0], w[1]]),
                bias: Tensor::zeros(vec![w[1]]),
            })
            .collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("nonempty").weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// The shared self-adaptation module: 2×2 matrix A and length-2 vector b.
///
/// Row 0 of A (with b[0]) produces γ, row 1 (with b[1]) produces β; column 0
/// weights the feature value, column 1 the context mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaFilmParams {
    pub matrix: Tensor,
    pub bias: Tensor,
}

impl CaFilmParams {
    /// Exact identity configuration: γ ≡ 1, β ≡ 0.
    pub fn identity() -> CaFilmParams {
        CaFilmParams {
            matrix: Tensor::zeros(vec![2, 2]),
            bias: Tensor::vector(vec![1.0, 0.0]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.matrix.numel() + self.bias.numel()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.matrix, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.matrix, &mut self.bias]
    }
}

/// MLP stand-in for the modulation adapter (ablation baseline). With context
/// the input is the per-row concatenation [z ; μ] (dim 2C), without it just z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpAdapterParams {
    pub mlp: MlpParams,
    pub use_context: bool,
}

/// Any of the self-adaptation module variants used by the pipeline and its
/// ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterParams {
    CaFilm(CaFilmParams),
    Mlp(MlpAdapterParams),
}

impl AdapterParams {
    pub fn param_count(&self) -> usize {
        match self {
            AdapterParams::CaFilm(p) => p.param_count(),
            AdapterParams::Mlp(p) => p.mlp.param_count(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            AdapterParams::CaFilm(p) => p.tensors(),
            AdapterParams::Mlp(p) => p.mlp.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AdapterParams::CaFilm(p) => p.tensors_mut(),
            AdapterParams::Mlp(p) => p.mlp.tensors_mut(),
        }
    }
}

/// One meta-task's trained networks. The shared stage-2 adapter lives in the
/// experiment (exactly one instance) and is passed alongside the bundle;
/// `stage1_adapter` is only populated by the adapter-in-stage-1 ablation,
/// which trains one adapter per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub task_id: usize,
    pub extractor: MlpParams,
    pub classifier: MlpParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage1_adapter: Option<AdapterParams>,
}

impl ModelBundle {
    pub fn feature_width(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.output_dim()
    }
}

// ---- graph-level forward passes ---------------------------------------------

/// Leaf variables for an MLP's parameters within one graph.
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

/// Insert MLP parameters as graph leaves. `trainable` controls whether
/// gradients will be accumulated for them.
pub fn insert_mlp(graph: &mut Graph, params: &MlpParams, trainable: bool) -> MlpVars {
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let mut w = l.weight.clone();
            let mut b = l.bias.clone();
            w.set_requires_grad(trainable);
            b.set_requires_grad(trainable);
            (graph.leaf(w), graph.leaf(b))
        })
        .collect();
    MlpVars { layers }
}

/// Forward an MLP: x·W + b per layer, ReLU between layers, none after last.
pub fn mlp_forward(graph: &mut Graph, vars: &MlpVars, x: Var) -> Result<Var> {
    let mut h = x;
    let last = vars.layers.len() - 1;
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        let lin = graph.matmul(h, w)?;
        h = graph.add_row(lin, b)?;
        if i < last {
            h = graph.relu(h);
        }
    }
    Ok(h)
}

/// Feature extractor pass: X [B×F] -> Z [B×C].
pub fn extract_features(graph: &mut Graph, extractor: &MlpVars, x: Var) -> Result<Var> {
    mlp_forward(graph, extractor, x)
}

/// Classifier pass: Z [B×C] -> logits [B×K].
pub fn classify(graph: &mut Graph, classifier: &MlpVars, z: Var) -> Result<Var> {
    mlp_forward(graph, classifier, z)
}

/// Mini-batch context: the column mean of the pre-adapter features.
pub fn batch_context(graph: &mut Graph, z: Var) -> Result<Var> {
    graph.mean_rows(z)
}

/// Adapter parameter leaves within one graph.
pub enum AdapterVars {
    CaFilm { matrix: Var, bias: Var },
    Mlp { mlp: MlpVars, use_context: bool },
}

pub fn insert_adapter(graph: &mut Graph, params: &AdapterParams, trainable: bool) -> AdapterVars {
    match params {
        AdapterParams::CaFilm(p) => {
            let mut m = p.matrix.clone();
            let mut b = p.bias.clone();
            m.set_requires_grad(trainable);
            b.set_requires_grad(trainable);
            AdapterVars::CaFilm {
                matrix: graph.leaf(m),
                bias: graph.leaf(b),
            }
        }
        AdapterParams::Mlp(p) => AdapterVars::Mlp {
            mlp: insert_mlp(graph, &p.mlp, trainable),
            use_context: p.use_context,
        },
    }
}

/// CaFiLM modulation: z'_c = γ_c·z_c + β_c with (γ_c, β_c)ᵀ = A·(z_c, μ_c)ᵀ + b.
///
/// γ = A₀₀·Z + A₀₁·μ + b₀ and β = A₁₀·Z + A₁₁·μ + b₁, all broadcast over the
/// batch; differentiable in A, b, Z and μ.
pub fn cafilm_forward(graph: &mut Graph, matrix: Var, bias: Var, z: Var, mu: Var) -> Result<Var> {
    let z_shape = graph.value(z).shape().to_vec();
    if z_shape.len() != 2 {
        return Err(CasaError::Contract(format!(
            "cafilm_forward: features must be 2-D, got {z_shape:?}"
        )));
    }
    let (rows, cols) = (z_shape[0], z_shape[1]);
    let mu_shape = graph.value(mu).shape().to_vec();
    if mu_shape != [cols] {
        return Err(CasaError::DimensionMismatch {
            context: "cafilm_forward context".into(),
            left: z_shape,
            right: mu_shape,
        });
    }
    let a_zz = graph.pick(matrix, 0)?; // weight of z in γ
    let a_zm = graph.pick(matrix, 1)?; // weight of μ in γ
    let a_bz = graph.pick(matrix, 2)?; // weight of z in β
    let a_bm = graph.pick(matrix, 3)?; // weight of μ in β
    let b_gamma = graph.pick(bias, 0)?;
    let b_beta = graph.pick(bias, 1)?;

    let mu_mat = graph.broadcast_row(mu, rows)?;

    let gamma = {
        let from_z = graph.mul_scalar(z, a_zz)?;
        let from_mu = graph.mul_scalar(mu_mat, a_zm)?;
        let sum = graph.add(from_z, from_mu)?;
        graph.add_scalar(sum, b_gamma)?
    };
    let beta = {
        let from_z = graph.mul_scalar(z, a_bz)?;
        let from_mu = graph.mul_scalar(mu_mat, a_bm)?;
        let sum = graph.add(from_z, from_mu)?;
        graph.add_scalar(sum, b_beta)?
    };
    let modulated = graph.hadamard(gamma, z)?;
    graph.add(modulated, beta)
}

/// MLP adapter pass (ablation baseline): input [z ; μ] when context is used,
/// plain z otherwise; output has the feature dimension C.
pub fn mlp_adapter_forward(
    graph: &mut Graph,
    mlp: &MlpVars,
    use_context: bool,
    z: Var,
    mu: Option<Var>,
) -> Result<Var> {
    let input = if use_context {
        let mu = mu.ok_or_else(|| {
            CasaError::Contract("mlp_adapter_forward: context required but missing".into())
        })?;
        let rows = graph.value(z).rows();
        let mu_mat = graph.broadcast_row(mu, rows)?;
        graph.concat_cols(z, mu_mat)?
    } else {
        z
    };
    mlp_forward(graph, mlp, input)
}

/// Dispatch over the adapter variants.
pub fn adapter_forward(graph: &mut Graph, vars: &AdapterVars, z: Var, mu: Var) -> Result<Var> {
    match vars {
        AdapterVars::CaFilm { matrix, bias } => cafilm_forward(graph, *matrix, *bias, z, mu),
        AdapterVars::Mlp { mlp, use_context } => {
            mlp_adapter_forward(graph, mlp, *use_context, z, Some(mu))
        }
    }
}

/// Leaf variables for a bundle plus (optionally) an adapter.
pub struct BundleVars {
    pub extractor: MlpVars,
    pub classifier: MlpVars,
    pub adapter: Option<AdapterVars>,
}

/// Which parameter groups receive gradients when a bundle is inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub extractor: bool,
    pub classifier: bool,
    pub adapter: bool,
}

impl Trainable {
    pub fn none() -> Trainable {
        Trainable {
            extractor: false,
            classifier: false,
            adapter: false,
        }
    }

    /// Stage-1 ERM: extractor and classifier.
    pub fn stage1() -> Trainable {
        Trainable {
            extractor: true,
            classifier: true,
            adapter: false,
        }
    }

    /// Stage-2: adapter always, classifier only in fine-tune mode, the
    /// extractor never.
    pub fn stage2(finetune_classifier: bool) -> Trainable {
        Trainable {
            extractor: false,
            classifier: finetune_classifier,
            adapter: true,
        }
    }
}

/// Insert a bundle's parameters, with the shared adapter when one applies.
/// The stage-2 `adapter` argument overrides any per-task stage-1 adapter.
pub fn insert_bundle(
    graph: &mut Graph,
    bundle: &ModelBundle,
    adapter: Option<&AdapterParams>,
    trainable: Trainable,
) -> BundleVars {
    let adapter_vars = match (adapter, &bundle.stage1_adapter) {
        (Some(shared), _) => Some(insert_adapter(graph, shared, trainable.adapter)),
        (None, Some(own)) => Some(insert_adapter(graph, own, trainable.adapter)),
        (None, None) => None,
    };
    BundleVars {
        extractor: insert_mlp(graph, &bundle.extractor, trainable.extractor),
        classifier: insert_mlp(graph, &bundle.classifier, trainable.classifier),
        adapter: adapter_vars,
    }
}

/// Logits of the (possibly adapted) model: h(g(f(X), μ)) with μ the batch
/// mean of the pre-adapter features. Without an adapter this is plain h∘f.
pub fn forward_logits(graph: &mut Graph, vars: &BundleVars, x: Var) -> Result<Var> {
    let z = extract_features(graph, &vars.extractor, x)?;
    let adapted = match &vars.adapter {
        Some(adapter) => {
            let mu = batch_context(graph, z)?;
            adapter_forward(graph, adapter, z, mu)?
        }
        None => z,
    };
    classify(graph, &vars.classifier, adapted)
}

/// Probabilities of the adapted model: softmax over [`forward_logits`].
pub fn forward_adapted(graph: &mut Graph, vars: &BundleVars, x: Var) -> Result<Var> {
    let logits = forward_logits(graph, vars, x)?;
    graph.softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GRAD_CHECK_EPS};
    use crate::rng::rng_from;

    fn feature_batch() -> Tensor {
        Tensor::matrix(
            3,
            4,
            vec![
                0.5, -1.0, 2.0, 0.1, //
                1.5, 0.3, -0.7, 0.9, //
                -0.2, 0.8, 1.1, -1.3,
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_mlp_maps_everything_to_zero() {
        let mlp = MlpParams::zeros(&[4, 3]);
        let mut g = Graph::new();
        let x = g.constant(feature_batch());
        let vars = insert_mlp(&mut g, &mlp, false);
        let z = mlp_forward(&mut g, &vars, x).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_reproduces_positive_input() {
        let mut mlp = MlpParams::zeros(&[3, 3]);
        for i in 0..3 {
            mlp.layers[0].weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = insert_mlp(&mut g, &mlp, false);
        let z = mlp_forward(&mut g, &vars, xv).unwrap();
        assert_eq!(g.value(z).data(), x.data());
    }

    #[test]
    fn mlp_matches_hand_rolled_linear_algebra() {
        let mut rng = rng_from(11);
        let mlp = MlpParams::glorot_init(&[4, 5, 3], &mut rng);
        let x = feature_batch();

        // Hand-rolled forward with plain loops.
        let mut h: Vec<Vec<f64>> = (0..3).map(|i| x.data()[i * 4..(i + 1) * 4].to_vec()).collect();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            h = h
                .iter()
                .map(|row| {
                    (0..fan_out)
                        .map(|o| {
                            let mut acc = layer.bias.data()[o];
                            for i in 0..fan_in {
                                acc += row[i] * layer.weight.data()[i * fan_out + o];
                            }
                            if li == 0 && acc < 0.0 {
                                0.0
                            } else {
                                acc
                            }
                        })
                        .collect()
                })
                .collect();
        }

        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = insert_mlp(&mut g, &mlp, false);
        let z = mlp_forward(&mut g, &vars, xv).unwrap();
        for (row, expect) in h.iter().enumerate() {
            for (col, &e) in expect.iter().enumerate() {
                assert!((g.value(z).at(row, col) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_context_is_row_permutation_invariant() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap());
        let mu = batch_context(&mut g, z).unwrap();
        assert_eq!(g.value(mu).data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 2, vec![3.0, 5.0, 1.0, 3.0]).unwrap());
        let mu = batch_context(&mut g, z).unwrap();
        assert_eq!(g.value(mu).data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![7.0, 9.0]).unwrap());
        let mu = batch_context(&mut g, z).unwrap();
        assert_eq!(g.value(mu).data(), &[7.0, 9.0]);
    }

    #[test]
    fn cafilm_identity_is_an_exact_fixed_point() {
        let adapter = CaFilmParams::identity();
        let z = Tensor::matrix(2, 3, vec![-3.0, 0.5, 2.0, 1.0, -0.25, 4.0]).unwrap();
        let mu = Tensor::vector(vec![-1.0, 0.125, 3.0]);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let muv = g.constant(mu);
        let m = g.constant(adapter.matrix.clone());
        let b = g.constant(adapter.bias.clone());
        let out = cafilm_forward(&mut g, m, b, zv, muv).unwrap();
        // Bitwise equality, negative values included.
        assert_eq!(g.value(out).data(), z.data());
    }

    #[test]
    fn cafilm_can_swap_in_the_context_as_gain() {
        // A = [[0,1],[0,0]], b = 0: γ_c = μ_c, β_c = 0, so z' = μ ∘ z.
        let matrix = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let bias = Tensor::vector(vec![0.0, 0.0]);
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let mu = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let m = g.constant(matrix);
        let b = g.constant(bias);
        let out = cafilm_forward(&mut g, m, b, z, mu).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, -3.0]);
    }

    #[test]
    fn cafilm_gradients_match_finite_differences() {
        let matrix = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let bias = Tensor::vector(vec![0.9, -0.1]);
        let z = Tensor::matrix(3, 2, vec![0.5, -1.2, 0.8, 0.3, -0.6, 1.4]).unwrap();
        let mu = Tensor::vector(vec![0.2, -0.5]);
        let err = grad_check(
            |g, vars| {
                let out = cafilm_forward(g, vars[0], vars[1], vars[2], vars[3])?;
                Ok(g.sum(out))
            },
            &[matrix, bias, z, mu],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "cafilm grad rel err {err}");
    }

    #[test]
    fn classifier_zero_params_give_uniform_probabilities() {
        let classifier = MlpParams::zeros(&[4, 3]);
        let mut g = Graph::new();
        let z = g.constant(feature_batch());
        let vars = insert_mlp(&mut g, &classifier, false);
        let logits = classify(&mut g, &vars, z).unwrap();
        let probs = g.softmax(logits).unwrap();
        for &p in g.value(probs).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_adapted_identity_equals_unadapted_bitwise() {
        let mut rng = rng_from(5);
        let bundle = ModelBundle {
            task_id: 0,
            extractor: MlpParams::glorot_init(&[4, 8, 6], &mut rng),
            classifier: MlpParams::glorot_init(&[6, 3], &mut rng),
            stage1_adapter: None,
        };
        let adapter = AdapterParams::CaFilm(CaFilmParams::identity());
        let x = feature_batch();

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = insert_bundle(&mut g, &bundle, Some(&adapter), Trainable::none());
        let adapted = forward_adapted(&mut g, &vars, xv).unwrap();

        let mut g2 = Graph::new();
        let xv2 = g2.constant(x);
        let raw_vars = insert_bundle(&mut g2, &bundle, None, Trainable::none());
        let raw = forward_adapted(&mut g2, &raw_vars, xv2).unwrap();

        assert_eq!(g.value(adapted).data(), g2.value(raw).data());
    }

    #[test]
    fn forward_adapted_rows_sum_to_one() {
        let mut rng = rng_from(17);
        let bundle = ModelBundle {
            task_id: 0,
            extractor: MlpParams::glorot_init(&[4, 8, 6], &mut rng),
            classifier: MlpParams::glorot_init(&[6, 3], &mut rng),
            stage1_adapter: None,
        };
        let adapter = AdapterParams::CaFilm(CaFilmParams {
            matrix: Tensor::matrix(2, 2, vec![0.1, -0.3, 0.2, 0.05]).unwrap(),
            bias: Tensor::vector(vec![1.1, -0.2]),
        });
        let mut g = Graph::new();
        let x = g.constant(feature_batch());
        let vars = insert_bundle(&mut g, &bundle, Some(&adapter), Trainable::none());
        let probs = forward_adapted(&mut g, &vars, x).unwrap();
        let t = g.value(probs);
        for row in 0..t.rows() {
            let sum: f64 = (0..t.cols()).map(|c| t.at(row, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_adapted_is_invariant_to_row_duplication() {
        // Duplicating every row leaves μ unchanged, so per-row outputs agree.
        let mut rng = rng_from(23);
        let bundle = ModelBundle {
            task_id: 0,
            extractor: MlpParams::glorot_init(&[4, 8, 6], &mut rng),
            classifier: MlpParams::glorot_init(&[6, 3], &mut rng),
            stage1_adapter: None,
        };
        let adapter = AdapterParams::CaFilm(CaFilmParams {
            matrix: Tensor::matrix(2, 2, vec![0.2, -0.1, 0.3, 0.4]).unwrap(),
            bias: Tensor::vector(vec![0.8, 0.1]),
        });
        let x = feature_batch();
        let doubled = {
            let mut rows = Vec::new();
            for i in 0..3 {
                rows.push(x.data()[i * 4..(i + 1) * 4].to_vec());
            }
            let mut twice = rows.clone();
            twice.extend(rows);
            Tensor::from_rows(&twice).unwrap()
        };

        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = insert_bundle(&mut g, &bundle, Some(&adapter), Trainable::none());
        let single = forward_adapted(&mut g, &vars, xv).unwrap();

        let mut g2 = Graph::new();
        let xv2 = g2.constant(doubled);
        let vars2 = insert_bundle(&mut g2, &bundle, Some(&adapter), Trainable::none());
        let double = forward_adapted(&mut g2, &vars2, xv2).unwrap();

        let a = g.value(single);
        let b = g2.value(double);
        for row in 0..3 {
            for col in 0..3 {
                let diff = (a.at(row, col) - b.at(row, col)).abs();
                assert!(diff < 1e-12, "row {row} col {col} differs by {diff}");
                let diff2 = (a.at(row, col) - b.at(row + 3, col)).abs();
                assert!(diff2 < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_has_exactly_six_parameters() {
        let adapter = CaFilmParams::identity();
        assert_eq!(adapter.param_count(), 6);
        let mut perturbed = adapter.clone();
        perturbed.matrix.data_mut()[2] = 0.5;
        perturbed.bias.data_mut()[1] = -0.25;
        assert_eq!(perturbed.param_count(), 6);
        assert_eq!(AdapterParams::CaFilm(perturbed).param_count(), 6);
    }

    #[test]
    fn mlp_adapter_input_dims_follow_context_flag() {
        let c = 6;
        let with_ctx = MlpAdapterParams {
            mlp: MlpParams::zeros(&[2 * c, c]),
            use_context: true,
        };
        let without_ctx = MlpAdapterParams {
            mlp: MlpParams::zeros(&[c, c]),
            use_context: false,
        };
        assert_eq!(with_ctx.mlp.input_dim(), 12);
        assert_eq!(without_ctx.mlp.input_dim(), 6);

        let z = Tensor::matrix(2, c, vec![0.5; 12]).unwrap();
        for params in [with_ctx, without_ctx] {
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let mu = batch_context(&mut g, zv).unwrap();
            let vars = insert_mlp(&mut g, &params.mlp, false);
            let out = mlp_adapter_forward(&mut g, &vars, params.use_context, zv, Some(mu)).unwrap();
            // Zero-weight adapter maps everything to zero, at dimension C.
            assert_eq!(g.value(out).shape(), &[2, c]);
            assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mlp_adapter_matches_hand_rolled_pass() {
        let mut rng = rng_from(31);
        let c = 3;
        let params = MlpAdapterParams {
            mlp: MlpParams::glorot_init(&[2 * c, c], &mut rng),
            use_context: true,
        };
        let z = Tensor::matrix(2, c, vec![0.4, -0.9, 1.2, 0.0, 0.7, -0.3]).unwrap();
        let mu = [0.2, -0.1, 0.45];

        let layer = &params.mlp.layers[0];
        let mut expected = Vec::new();
        for row in 0..2 {
            let mut input: Vec<f64> = z.data()[row * c..(row + 1) * c].to_vec();
            input.extend_from_slice(&mu);
            for o in 0..c {
                let mut acc = layer.bias.data()[o];
                for (i, v) in input.iter().enumerate() {
                    acc += v * layer.weight.data()[i * c + o];
                }
                expected.push(acc);
            }
        }

        let mut g = Graph::new();
        let zv = g.constant(z);
        let muv = g.constant(Tensor::vector(mu.to_vec()));
        let vars = insert_mlp(&mut g, &params.mlp, false);
        let out = mlp_adapter_forward(&mut g, &vars, true, zv, Some(muv)).unwrap();
        for (got, want) in g.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
