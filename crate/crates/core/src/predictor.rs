//! The anchor-weight predictor: an explicit per-anchor weight vector composed
//! with a small MLP, trained by mini-batch gradient descent on a
//! reconstruction loss against full-benchmark mean scores.
//!
//! Gradients are derived by hand for this fixed architecture; there is no
//! generic autodiff. Everything is seeded and single-threaded, so training is
//! bitwise reproducible.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::matrix::{shuffled_indices, ScoreMatrix, Split};
use crate::metrics;

/// Training objective. `L2Norm` is the literal form (1/M) * ||e||_2;
/// `Mse` is the conventional (1/M) * ||e||_2^2 alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    L2Norm,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden width of the MLP; 0 disables the MLP entirely and aggregates
    /// by plain summation of the weighted anchor scores.
    pub hidden: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 6e-4,
            epochs: 500,
            batch_size: 256,
            hidden: 256,
            seed: 0,
            loss: LossKind::L2Norm,
        }
    }
}

/// One affine layer, weight stored row-major as (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// The aggregation function applied to the weighted anchor scores.
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// Four affine layers k -> h -> h -> h -> 1 with rectifiers on the
    /// first three and an identity output.
    Mlp(Vec<DenseLayer>),
    /// Degenerate aggregation: the sum of the weighted anchor scores.
    IdentitySum,
}

/// A trained (or hand-built) anchor-score estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPredictor {
    anchor_indices: Vec<usize>,
    anchor_item_ids: Vec<String>,
    anchor_weights: Array1<f64>,
    arch: Architecture,
    hyperparams: Hyperparams,
}

/// Summary of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_train_loss: f64,
    pub per_epoch_loss: Vec<f64>,
    /// Accuracy-scale MAE (%) on the validation split; NaN when the split
    /// is empty.
    pub validation_mae: f64,
    pub wall_time_seconds: f64,
}

/// Gradients of the loss with respect to every parameter, mirroring the
/// predictor's parameter layout.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub anchor_weights: Array1<f64>,
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl WeightPredictor {
    /// Validate and assemble a predictor from explicit parts.
    pub fn from_parts(
        anchor_indices: Vec<usize>,
        anchor_item_ids: Vec<String>,
        anchor_weights: Array1<f64>,
        arch: Architecture,
        hyperparams: Hyperparams,
    ) -> Result<Self> {
        let k = anchor_indices.len();
        if anchor_weights.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: anchor_weights.len(),
            });
        }
        if anchor_item_ids.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: anchor_item_ids.len(),
            });
        }
        if let Architecture::Mlp(layers) = &arch {
            if layers.len() != 4 {
                return Err(Error::InvalidArgument(format!(
                    "MLP must have 4 layers, got {}",
                    layers.len()
                )));
            }
            let mut prev = k;
            for (i, layer) in layers.iter().enumerate() {
                let (out, inp) = layer.weight.dim();
                if inp != prev {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i} expects input {prev}, weight has {inp}"
                    )));
                }
                if layer.bias.len() != out {
                    return Err(Error::DimensionMismatch {
                        expected: out,
                        got: layer.bias.len(),
                    });
                }
                prev = out;
            }
            if prev != 1 {
                return Err(Error::InvalidArgument(format!(
                    "final layer must output 1 value, outputs {prev}"
                )));
            }
        }
        for w in anchor_weights.iter() {
            if !w.is_finite() {
                return Err(Error::InvalidArgument("non-finite anchor weight".into()));
            }
        }
        Ok(Self {
            anchor_indices,
            anchor_item_ids,
            anchor_weights,
            arch,
            hyperparams,
        })
    }

    /// Fresh seeded initialization: anchor weights 1/k, layer weights uniform
    /// with fan-in scaling, biases zero.
    pub fn init(matrix: &ScoreMatrix, anchors: &AnchorSet, hp: &Hyperparams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        Self::init_with_rng(matrix, anchors, hp, &mut rng)
    }

    fn init_with_rng(
        matrix: &ScoreMatrix,
        anchors: &AnchorSet,
        hp: &Hyperparams,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = matrix.n_items();
        for &i in anchors.indices() {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: i,
                    len: n,
                });
            }
        }
        let k = anchors.k();
        let anchor_item_ids = anchors
            .indices()
            .iter()
            .map(|&i| matrix.item_ids()[i].clone())
            .collect();
        let anchor_weights = Array1::from_elem(k, 1.0 / k as f64);
        let arch = if hp.hidden == 0 {
            Architecture::IdentitySum
        } else {
            let h = hp.hidden;
            let dims = [(h, k), (h, h), (h, h), (1, h)];
            let layers = dims
                .iter()
                .map(|&(out, inp)| {
                    let bound = 1.0 / (inp as f64).sqrt();
                    let weight =
                        Array2::from_shape_fn((out, inp), |_| rng.random_range(-bound..bound));
                    DenseLayer {
                        weight,
                        bias: Array1::zeros(out),
                    }
                })
                .collect();
            Architecture::Mlp(layers)
        };
        Self::from_parts(
            anchors.indices().to_vec(),
            anchor_item_ids,
            anchor_weights,
            arch,
            *hp,
        )
    }

    pub fn k(&self) -> usize {
        self.anchor_indices.len()
    }

    pub fn anchor_indices(&self) -> &[usize] {
        &self.anchor_indices
    }

    pub fn anchor_item_ids(&self) -> &[String] {
        &self.anchor_item_ids
    }

    pub fn anchor_weights(&self) -> ArrayView1<'_, f64> {
        self.anchor_weights.view()
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    /// Estimate the mean score of one model from its anchor scores.
    /// The output is unbounded; clamping happens only at reporting.
    pub fn forward(&self, anchor_scores: ArrayView1<'_, f64>) -> Result<f64> {
        if anchor_scores.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: anchor_scores.len(),
            });
        }
        for &v in anchor_scores.iter() {
            if !v.is_finite() {
                return Err(Error::InvalidArgument("non-finite anchor score".into()));
            }
        }
        let x = anchor_scores.insert_axis(Axis(0)).to_owned();
        let (out, _) = self.forward_batch(&x);
        Ok(out[0])
    }

    /// Batch forward pass; returns outputs and the activation cache needed
    /// for backprop. `inputs` is (B, k).
    fn forward_batch(&self, inputs: &Array2<f64>) -> (Array1<f64>, ForwardCache) {
        let weighted = inputs * &self.anchor_weights; // broadcast over rows
        match &self.arch {
            Architecture::IdentitySum => {
                let out = weighted.sum_axis(Axis(1));
                (
                    out,
                    ForwardCache {
                        weighted,
                        pre: Vec::new(),
                        act: Vec::new(),
                    },
                )
            }
            Architecture::Mlp(layers) => {
                let mut pre = Vec::with_capacity(4);
                let mut act = Vec::with_capacity(3);
                let mut a = weighted.clone();
                for (i, layer) in layers.iter().enumerate() {
                    let mut p = a.dot(&layer.weight.t());
                    p += &layer.bias;
                    if i < layers.len() - 1 {
                        let r = p.mapv(|v| v.max(0.0));
                        pre.push(p);
                        a = r.clone();
                        act.push(r);
                    } else {
                        pre.push(p.clone());
                        a = p;
                    }
                }
                let out = a.column(0).to_owned();
                (
                    out,
                    ForwardCache {
                        weighted,
                        pre,
                        act,
                    },
                )
            }
        }
    }

    /// Backpropagate `d_out` (gradient of the loss w.r.t. each output) to all
    /// parameters and to the raw anchor-score inputs.
    fn backward_batch(
        &self,
        inputs: &Array2<f64>,
        cache: &ForwardCache,
        d_out: &Array1<f64>,
    ) -> (ParamGrads, Array2<f64>) {
        let d_weighted = match &self.arch {
            Architecture::IdentitySum => {
                let b = inputs.nrows();
                let k = self.k();
                let mut dw = Array2::zeros((b, k));
                for r in 0..b {
                    for c in 0..k {
                        dw[(r, c)] = d_out[r];
                    }
                }
                return self.finish_backward(inputs, dw, Vec::new());
            }
            Architecture::Mlp(layers) => {
                let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(4);
                // output layer
                let d_out2 = d_out.view().insert_axis(Axis(1)).to_owned(); // (B,1)
                let grad_w4 = d_out2.t().dot(&cache.act[2]); // (1,h)
                let grad_b4 = d_out2.sum_axis(Axis(0)); // (1)
                let mut d_act = d_out2.dot(&layers[3].weight); // (B,h)
                layer_grads.push((grad_w4, grad_b4));

                for l in (0..3).rev() {
                    let relu_mask = cache.pre[l].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let d_pre = &d_act * &relu_mask; // (B,h)
                    let below: &Array2<f64> = if l == 0 {
                        &cache.weighted
                    } else {
                        &cache.act[l - 1]
                    };
                    let grad_w = d_pre.t().dot(below);
                    let grad_b = d_pre.sum_axis(Axis(0));
                    layer_grads.push((grad_w, grad_b));
                    d_act = d_pre.dot(&layers[l].weight);
                }
                layer_grads.reverse();
                (d_act, layer_grads)
            }
        };
        let (d_weighted, layer_grads) = d_weighted;
        self.finish_backward(inputs, d_weighted, layer_grads)
    }

    fn finish_backward(
        &self,
        inputs: &Array2<f64>,
        d_weighted: Array2<f64>,
        layer_grads: Vec<(Array2<f64>, Array1<f64>)>,
    ) -> (ParamGrads, Array2<f64>) {
        // weighted = inputs ⊙ W: split the gradient between W and the inputs
        let grad_anchor = (&d_weighted * inputs).sum_axis(Axis(0));
        let d_inputs = &d_weighted * &self.anchor_weights;
        (
            ParamGrads {
                anchor_weights: grad_anchor,
                layers: layer_grads,
            },
            d_inputs,
        )
    }

    /// Loss value and its gradients (parameters and inputs) over the given
    /// models with the predictor's configured loss.
    pub fn loss_gradients(
        &self,
        matrix: &ScoreMatrix,
        split: Split,
    ) -> Result<(f64, ParamGrads, Array2<f64>)> {
        let rows = matrix.models_in(split);
        if rows.is_empty() {
            return Err(Error::EmptySplit {
                split: split_name(split),
            });
        }
        let inputs = gather_inputs(matrix, &self.anchor_indices, &rows);
        let targets = gather_targets(matrix, &rows);
        let (out, cache) = self.forward_batch(&inputs);
        let e = &out - &targets;
        let (loss, d_out) = loss_and_grad(&e, self.hyperparams.loss);
        let (grads, d_inputs) = self.backward_batch(&inputs, &cache, &d_out);
        Ok((loss, grads, d_inputs))
    }

    /// Loss over a model subset without gradients.
    pub fn loss_on(&self, matrix: &ScoreMatrix, split: Split) -> Result<f64> {
        let rows = matrix.models_in(split);
        if rows.is_empty() {
            return Err(Error::EmptySplit {
                split: split_name(split),
            });
        }
        let inputs = gather_inputs(matrix, &self.anchor_indices, &rows);
        let targets = gather_targets(matrix, &rows);
        let (out, _) = self.forward_batch(&inputs);
        let e = &out - &targets;
        Ok(loss_and_grad(&e, self.hyperparams.loss).0)
    }

    /// Unclamped estimates for the given models, in row order.
    pub fn predict_rows(&self, matrix: &ScoreMatrix, rows: &[usize]) -> Array1<f64> {
        let inputs = gather_inputs(matrix, &self.anchor_indices, rows);
        self.forward_batch(&inputs).0
    }

    /// Unclamped outputs for an explicit (B, k) anchor-score design matrix.
    pub fn forward_rows(&self, inputs: &Array2<f64>) -> Array1<f64> {
        self.forward_batch(inputs).0
    }

    /// Mutable per-anchor weights, for gradient probes and experiments.
    pub fn anchor_weights_mut(&mut self) -> &mut Array1<f64> {
        &mut self.anchor_weights
    }

    /// Mutable weight matrix of one MLP layer. Panics on the degenerate
    /// summation architecture.
    pub fn layer_weight_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        match &mut self.arch {
            Architecture::Mlp(layers) => &mut layers[layer].weight,
            Architecture::IdentitySum => panic!("no layers in the summation architecture"),
        }
    }

    /// Mutable bias vector of one MLP layer. Panics on the degenerate
    /// summation architecture.
    pub fn layer_bias_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        match &mut self.arch {
            Architecture::Mlp(layers) => &mut layers[layer].bias,
            Architecture::IdentitySum => panic!("no layers in the summation architecture"),
        }
    }

    /// Smallest |pre-activation| over every rectifier unit and model in the
    /// split. Finite-difference gradient checks need this clearance to be
    /// larger than the probe step, otherwise the probe crosses a kink.
    pub fn rectifier_clearance(&self, matrix: &ScoreMatrix, split: Split) -> f64 {
        let rows = matrix.models_in(split);
        let inputs = gather_inputs(matrix, &self.anchor_indices, &rows);
        let (_, cache) = self.forward_batch(&inputs);
        let mut clearance = f64::INFINITY;
        for (l, pre) in cache.pre.iter().enumerate() {
            if l == cache.pre.len() - 1 {
                continue; // identity output has no kink
            }
            for &v in pre.iter() {
                clearance = clearance.min(v.abs());
            }
        }
        clearance
    }

    /// Shift hidden biases minimally so every rectifier pre-activation on the
    /// split is at least `margin` away from zero. Gradient-check tooling:
    /// a finite-difference probe at a random configuration must not cross a
    /// rectifier kink, and a small deterministic bias offset per unit moves
    /// the kink out of the probe's window without changing the layer weights.
    pub fn nudge_rectifiers_off_kinks(&mut self, matrix: &ScoreMatrix, split: Split, margin: f64) {
        let rows = matrix.models_in(split);
        let inputs = gather_inputs(matrix, &self.anchor_indices, &rows);
        let weighted = &inputs * &self.anchor_weights;
        let layer_count = match &self.arch {
            Architecture::IdentitySum => return,
            Architecture::Mlp(layers) => layers.len(),
        };
        let mut a = weighted;
        for l in 0..layer_count - 1 {
            let (weight, bias_len) = match &self.arch {
                Architecture::Mlp(layers) => (layers[l].weight.clone(), layers[l].bias.len()),
                Architecture::IdentitySum => unreachable!(),
            };
            let mut pre = a.dot(&weight.t());
            if let Architecture::Mlp(layers) = &self.arch {
                pre += &layers[l].bias;
            }
            for unit in 0..bias_len {
                let values: Vec<f64> = pre.column(unit).to_vec();
                let clearance =
                    |delta: f64| values.iter().fold(f64::INFINITY, |m, v| m.min((v + delta).abs()));
                if clearance(0.0) >= margin {
                    continue;
                }
                let mut chosen = None;
                let mut step_mult = 1usize;
                while chosen.is_none() && step_mult <= 200 {
                    for delta in [margin * 2.0 * step_mult as f64, -(margin * 2.0 * step_mult as f64)] {
                        if clearance(delta) >= margin {
                            chosen = Some(delta);
                            break;
                        }
                    }
                    step_mult += 1;
                }
                if let Some(delta) = chosen {
                    if let Architecture::Mlp(layers) = &mut self.arch {
                        layers[l].bias[unit] += delta;
                    }
                    for v in pre.column_mut(unit).iter_mut() {
                        *v += delta;
                    }
                }
            }
            a = pre.mapv(|v| v.max(0.0));
        }
    }

    /// Clone this predictor for a swapped anchor: the input column at
    /// `removed_pos` is dropped, a fresh seeded column is appended for the
    /// new anchor, and its weight restarts at 1/k.
    pub fn with_swapped_anchor(
        &self,
        removed_pos: usize,
        added_item: usize,
        added_item_id: String,
        seed: u64,
    ) -> Result<Self> {
        let k = self.k();
        if removed_pos >= k {
            return Err(Error::IndexOutOfRange {
                what: "anchor position",
                index: removed_pos,
                len: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = self.anchor_indices.clone();
        indices.remove(removed_pos);
        indices.push(added_item);
        let mut ids = self.anchor_item_ids.clone();
        ids.remove(removed_pos);
        ids.push(added_item_id);

        let mut weights: Vec<f64> = self.anchor_weights.to_vec();
        weights.remove(removed_pos);
        weights.push(1.0 / k as f64);

        let arch = match &self.arch {
            Architecture::IdentitySum => Architecture::IdentitySum,
            Architecture::Mlp(layers) => {
                let mut new_layers = layers.clone();
                let first = &layers[0].weight;
                let (h, _) = first.dim();
                let bound = 1.0 / (k as f64).sqrt();
                let mut w = Array2::zeros((h, k));
                let mut dst = 0;
                for src in 0..k {
                    if src == removed_pos {
                        continue;
                    }
                    w.column_mut(dst).assign(&first.column(src));
                    dst += 1;
                }
                for r in 0..h {
                    w[(r, k - 1)] = rng.random_range(-bound..bound);
                }
                new_layers[0].weight = w;
                Architecture::Mlp(new_layers)
            }
        };
        Self::from_parts(indices, ids, Array1::from_vec(weights), arch, self.hyperparams)
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = match &self.arch {
            Architecture::IdentitySum => Vec::new(),
            Architecture::Mlp(layers) => layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        let file = PredictorFile {
            architecture: match &self.arch {
                Architecture::IdentitySum => "identity-sum".into(),
                Architecture::Mlp(_) => "mlp".into(),
            },
            anchor_indices: self.anchor_indices.clone(),
            anchor_item_ids: self.anchor_item_ids.clone(),
            anchor_weights: self.anchor_weights.to_vec(),
            layers,
            hyperparams: self.hyperparams,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: PredictorFile = serde_json::from_str(json)?;
        let arch = if file.architecture == "identity-sum" {
            Architecture::IdentitySum
        } else if file.architecture == "mlp" {
            let layers = file
                .layers
                .iter()
                .map(|l| {
                    Array2::from_shape_vec((l.rows, l.cols), l.weight.clone())
                        .map(|weight| DenseLayer {
                            weight,
                            bias: Array1::from_vec(l.bias.clone()),
                        })
                        .map_err(|e| Error::InvalidArgument(format!("bad layer shape: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Architecture::Mlp(layers)
        } else {
            return Err(Error::InvalidArgument(format!(
                "unknown architecture `{}`",
                file.architecture
            )));
        };
        Self::from_parts(
            file.anchor_indices,
            file.anchor_item_ids,
            Array1::from_vec(file.anchor_weights),
            arch,
            file.hyperparams,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PredictorFile {
    architecture: String,
    anchor_indices: Vec<usize>,
    anchor_item_ids: Vec<String>,
    anchor_weights: Vec<f64>,
    layers: Vec<LayerFile>,
    hyperparams: Hyperparams,
}

struct ForwardCache {
    weighted: Array2<f64>,
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
}

/// Loss and d(loss)/d(output) for residual vector `e` over B models.
fn loss_and_grad(e: &Array1<f64>, kind: LossKind) -> (f64, Array1<f64>) {
    let b = e.len() as f64;
    match kind {
        LossKind::L2Norm => {
            let norm = e.dot(e).sqrt();
            let loss = norm / b;
            // subgradient 0 at the minimum
            let grad = if norm > 0.0 {
                e.mapv(|v| v / (b * norm))
            } else {
                Array1::zeros(e.len())
            };
            (loss, grad)
        }
        LossKind::Mse => {
            let loss = e.dot(e) / b;
            let grad = e.mapv(|v| 2.0 * v / b);
            (loss, grad)
        }
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

/// Gather the anchor-score design matrix for the given models.
pub(crate) fn gather_inputs(
    matrix: &ScoreMatrix,
    anchor_indices: &[usize],
    rows: &[usize],
) -> Array2<f64> {
    let scores = matrix.scores();
    Array2::from_shape_fn((rows.len(), anchor_indices.len()), |(r, c)| {
        scores[(rows[r], anchor_indices[c])]
    })
}

fn gather_targets(matrix: &ScoreMatrix, rows: &[usize]) -> Array1<f64> {
    let truths = matrix.true_scores();
    Array1::from_iter(rows.iter().map(|&r| truths[r]))
}

/// Adam with bias correction over the predictor's parameter layout.
struct Adam {
    m: ParamGrads,
    v: ParamGrads,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &WeightPredictor) -> Self {
        let zero_like = |g: &WeightPredictor| ParamGrads {
            anchor_weights: Array1::zeros(g.k()),
            layers: match &g.arch {
                Architecture::IdentitySum => Vec::new(),
                Architecture::Mlp(layers) => layers
                    .iter()
                    .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                    .collect(),
            },
        };
        Self {
            m: zero_like(p),
            v: zero_like(p),
            t: 0,
        }
    }

    fn step(&mut self, p: &mut WeightPredictor, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);

        update_tensor1(
            &mut p.anchor_weights,
            &grads.anchor_weights,
            &mut self.m.anchor_weights,
            &mut self.v.anchor_weights,
            lr,
            bc1,
            bc2,
        );
        if let Architecture::Mlp(layers) = &mut p.arch {
            for (i, layer) in layers.iter_mut().enumerate() {
                update_tensor2(
                    &mut layer.weight,
                    &grads.layers[i].0,
                    &mut self.m.layers[i].0,
                    &mut self.v.layers[i].0,
                    lr,
                    bc1,
                    bc2,
                );
                update_tensor1(
                    &mut layer.bias,
                    &grads.layers[i].1,
                    &mut self.m.layers[i].1,
                    &mut self.v.layers[i].1,
                    lr,
                    bc1,
                    bc2,
                );
            }
        }
    }
}

fn update_tensor1(
    p: &mut Array1<f64>,
    g: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = Adam::BETA1 * m[i] + (1.0 - Adam::BETA1) * g[i];
        v[i] = Adam::BETA2 * v[i] + (1.0 - Adam::BETA2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + Adam::EPS);
    }
}

fn update_tensor2(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for ((i, j), val) in g.indexed_iter() {
        m[(i, j)] = Adam::BETA1 * m[(i, j)] + (1.0 - Adam::BETA1) * val;
        v[(i, j)] = Adam::BETA2 * v[(i, j)] + (1.0 - Adam::BETA2) * val * val;
        p[(i, j)] -= lr * (m[(i, j)] / bc1) / ((v[(i, j)] / bc2).sqrt() + Adam::EPS);
    }
}

/// Train a fresh seeded predictor on the training split.
/// Targets are the true mean scores over all n items of each training model.
pub fn train(
    matrix: &ScoreMatrix,
    anchors: &AnchorSet,
    hp: &Hyperparams,
) -> Result<(WeightPredictor, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let predictor = WeightPredictor::init_with_rng(matrix, anchors, hp, &mut rng)?;
    fit(predictor, matrix, hp, rng)
}

/// Continue training from existing parameters (warm start).
pub fn train_warm(
    start: WeightPredictor,
    matrix: &ScoreMatrix,
    hp: &Hyperparams,
) -> Result<(WeightPredictor, TrainReport)> {
    let mut start = start;
    start.hyperparams = *hp;
    let rng = ChaCha8Rng::seed_from_u64(hp.seed);
    fit(start, matrix, hp, rng)
}

fn fit(
    mut predictor: WeightPredictor,
    matrix: &ScoreMatrix,
    hp: &Hyperparams,
    mut rng: ChaCha8Rng,
) -> Result<(WeightPredictor, TrainReport)> {
    let started = Instant::now();
    let train_rows = matrix.models_in(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::EmptySplit { split: "train" });
    }
    if hp.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let inputs = gather_inputs(matrix, &predictor.anchor_indices, &train_rows);
    let targets = gather_targets(matrix, &train_rows);
    let m = train_rows.len();

    let mut adam = Adam::new(&predictor);
    let mut per_epoch_loss = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let order = shuffled_indices(m, &mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let xb = gather_rows_of(&inputs, chunk);
            let yb = Array1::from_iter(chunk.iter().map(|&i| targets[i]));
            let (out, cache) = predictor.forward_batch(&xb);
            let e = &out - &yb;
            let (_, d_out) = loss_and_grad(&e, hp.loss);
            if d_out.iter().all(|&g| g == 0.0) {
                continue;
            }
            let (grads, _) = predictor.backward_batch(&xb, &cache, &d_out);
            adam.step(&mut predictor, &grads, hp.learning_rate);
        }
        let (full_out, _) = predictor.forward_batch(&inputs);
        let e = &full_out - &targets;
        let (loss, _) = loss_and_grad(&e, hp.loss);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        per_epoch_loss.push(loss);
    }

    let final_train_loss = per_epoch_loss.last().copied().unwrap_or_else(|| {
        let (out, _) = predictor.forward_batch(&inputs);
        let e = &out - &targets;
        loss_and_grad(&e, hp.loss).0
    });

    let val_rows = matrix.models_in(Split::Validation);
    let validation_mae = if val_rows.is_empty() {
        f64::NAN
    } else {
        let est: Vec<f64> = predictor
            .predict_rows(matrix, &val_rows)
            .iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        let truths = matrix.true_scores();
        let tv: Vec<f64> = val_rows.iter().map(|&r| truths[r]).collect();
        metrics::mae(&tv, &est)?
    };

    let report = TrainReport {
        final_train_loss,
        per_epoch_loss,
        validation_mae,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((predictor, report))
}

fn gather_rows_of(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let n = a.ncols();
    Array2::from_shape_fn((rows.len(), n), |(r, c)| a[(rows[r], c)])
}

/// Per-model calibration residuals e_j = f(anchor scores of j) - true score.
/// Positive residuals mean the estimator overestimates model j.
pub fn residuals(
    predictor: &WeightPredictor,
    matrix: &ScoreMatrix,
    split: Split,
) -> Result<Array1<f64>> {
    let rows = matrix.models_in(split);
    if rows.is_empty() {
        return Err(Error::EmptySplit {
            split: split_name(split),
        });
    }
    let out = predictor.predict_rows(matrix, &rows);
    let truths = matrix.true_scores();
    Ok(Array1::from_iter(
        rows.iter().zip(out.iter()).map(|(&r, &o)| o - truths[r]),
    ))
}

/// Exact backpropagated gradient of the configured loss with respect to every
/// model's anchor-score inputs: one row per model in the split, one column per
/// anchor.
pub fn input_gradient(
    predictor: &WeightPredictor,
    matrix: &ScoreMatrix,
    split: Split,
) -> Result<Array2<f64>> {
    let (_, _, d_inputs) = predictor.loss_gradients(matrix, split)?;
    Ok(d_inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::InitMethod;
    use crate::matrix::{generate_synthetic, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn zero_mlp(k: usize, h: usize) -> Architecture {
        let dims = [(h, k), (h, h), (h, h), (1, h)];
        Architecture::Mlp(
            dims.iter()
                .map(|&(out, inp)| DenseLayer {
                    weight: Array2::zeros((out, inp)),
                    bias: Array1::zeros(out),
                })
                .collect(),
        )
    }

    fn hp(hidden: usize, epochs: usize, seed: u64) -> Hyperparams {
        Hyperparams {
            hidden,
            epochs,
            seed,
            ..Hyperparams::default()
        }
    }

    fn small_matrix() -> ScoreMatrix {
        generate_synthetic(&SyntheticSpec {
            m: 24,
            c: 3,
            n: 9,
            flip_prob: 0.1,
            difficulty_spread: 0.7,
            seed: 42,
        })
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let p = WeightPredictor::from_parts(
            vec![0, 1, 2],
            vec!["a".into(), "b".into(), "c".into()],
            array![0.3, -0.2, 0.5],
            zero_mlp(3, 4),
            hp(4, 1, 0),
        )
        .unwrap();
        assert_eq!(p.forward(array![1.0, -1.0, 1.0].view()).unwrap(), 0.0);
        assert_eq!(p.forward(array![-1.0, -1.0, -1.0].view()).unwrap(), 0.0);
    }

    #[test]
    fn zero_anchor_weights_make_output_input_independent() {
        let matrix = small_matrix();
        let anchors = AnchorSet::new(vec![0, 2, 4], 9, InitMethod::Random).unwrap();
        let seeded = WeightPredictor::init(&matrix, &anchors, &hp(8, 1, 7)).unwrap();
        let p = WeightPredictor::from_parts(
            seeded.anchor_indices().to_vec(),
            seeded.anchor_item_ids().to_vec(),
            Array1::zeros(3),
            seeded.architecture().clone(),
            *seeded.hyperparams(),
        )
        .unwrap();
        let a = p.forward(array![1.0, 1.0, 1.0].view()).unwrap();
        let b = p.forward(array![-1.0, 1.0, -1.0].view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_sum_full_budget_reproduces_true_scores_exactly() {
        // n = 8 items (power of two keeps 1/k arithmetic exact)
        let matrix = generate_synthetic(&SyntheticSpec {
            m: 16,
            c: 4,
            n: 8,
            flip_prob: 0.2,
            difficulty_spread: 0.8,
            seed: 5,
        })
        .unwrap();
        let n = matrix.n_items();
        let p = WeightPredictor::from_parts(
            (0..n).collect(),
            matrix.item_ids().to_vec(),
            Array1::from_elem(n, 1.0 / n as f64),
            Architecture::IdentitySum,
            hp(0, 1, 0),
        )
        .unwrap();
        for i in 0..matrix.n_models() {
            let est = p.forward(matrix.row(i)).unwrap();
            assert_eq!(est, matrix.true_score(i).unwrap());
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = WeightPredictor::from_parts(
            vec![0, 1],
            vec!["a".into(), "b".into()],
            array![0.5, 0.5],
            Architecture::IdentitySum,
            hp(0, 1, 0),
        )
        .unwrap();
        assert!(p.forward(array![1.0].view()).is_err());
        assert!(p.forward(array![1.0, f64::NAN].view()).is_err());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let matrix = small_matrix()
            .assign_splits(&crate::matrix::SplitSpec::random(4, 4, 3))
            .unwrap();
        let anchors = AnchorSet::new(vec![1, 3, 5], 9, InitMethod::Random).unwrap();
        let h = hp(8, 30, 11);
        let (p1, r1) = train(&matrix, &anchors, &h).unwrap();
        let (p2, r2) = train(&matrix, &anchors, &h).unwrap();
        assert_eq!(p1.to_json().unwrap(), p2.to_json().unwrap());
        assert_eq!(r1.per_epoch_loss, r2.per_epoch_loss);
    }

    #[test]
    fn constant_targets_reach_small_loss() {
        // every row has exactly two +1 of four items: true score 0 for all
        let mut rows = Vec::new();
        let base = [
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0, 1.0],
            [-1.0, 1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0, 1.0],
            [-1.0, -1.0, 1.0, 1.0],
        ];
        for r in 0..32 {
            rows.extend_from_slice(&base[r % base.len()]);
        }
        let matrix = ScoreMatrix::new(
            Array2::from_shape_vec((32, 4), rows).unwrap(),
            (0..32).map(|i| format!("m{i}")).collect(),
            (0..4).map(|j| format!("i{j}")).collect(),
        )
        .unwrap();
        let anchors = AnchorSet::new(vec![0, 2], 4, InitMethod::Random).unwrap();
        let (_, report) = train(&matrix, &anchors, &hp(8, 200, 1)).unwrap();
        assert!(
            report.final_train_loss <= 1e-3,
            "loss {} after 200 epochs",
            report.final_train_loss
        );
    }

    #[test]
    fn serialized_predictor_reproduces_forward_bitwise() {
        let matrix = small_matrix();
        let anchors = AnchorSet::new(vec![0, 4, 8], 9, InitMethod::Random).unwrap();
        let (p, _) = train(&matrix, &anchors, &hp(8, 20, 2)).unwrap();
        let json = p.to_json().unwrap();
        let q = WeightPredictor::from_json(&json).unwrap();
        for i in 0..matrix.n_models() {
            let x = matrix.anchor_scores(i, p.anchor_indices());
            let a = p.forward(x.view()).unwrap();
            let b = q.forward(x.view()).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_residuals_give_zero_input_gradient() {
        // identity-sum predictor with full budget fits exactly: e = 0
        let matrix = generate_synthetic(&SyntheticSpec {
            m: 10,
            c: 2,
            n: 8,
            flip_prob: 0.0,
            difficulty_spread: 0.5,
            seed: 1,
        })
        .unwrap();
        let n = matrix.n_items();
        let p = WeightPredictor::from_parts(
            (0..n).collect(),
            matrix.item_ids().to_vec(),
            Array1::from_elem(n, 1.0 / n as f64),
            Architecture::IdentitySum,
            hp(0, 1, 0),
        )
        .unwrap();
        let g = input_gradient(&p, &matrix, Split::Train).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let r = residuals(&p, &matrix, Split::Train).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_sign_convention() {
        // constant-zero predictor on a model with true accuracy 0.75
        // (mean score 0.5): residual = 0 - 0.5 = -0.5
        let matrix = ScoreMatrix::new(
            Array2::from_shape_vec((1, 4), vec![1.0, 1.0, 1.0, -1.0]).unwrap(),
            vec!["m0".into()],
            (0..4).map(|j| format!("i{j}")).collect(),
        )
        .unwrap();
        let p = WeightPredictor::from_parts(
            vec![0, 1],
            vec!["i0".into(), "i1".into()],
            array![0.0, 0.0],
            Architecture::IdentitySum,
            hp(0, 1, 0),
        )
        .unwrap();
        let r = residuals(&p, &matrix, Split::Train).unwrap();
        assert_abs_diff_eq!(r[0], -0.5, epsilon = 1e-15);
    }

    /// Central finite differences of the loss with respect to one parameter.
    fn fd_param_grad(
        p: &WeightPredictor,
        matrix: &ScoreMatrix,
        mutate: &dyn Fn(&mut WeightPredictor, f64),
        step: f64,
    ) -> f64 {
        let mut plus = p.clone();
        mutate(&mut plus, step);
        let mut minus = p.clone();
        mutate(&mut minus, -step);
        let lp = plus.loss_on(matrix, Split::Train).unwrap();
        let lm = minus.loss_on(matrix, Split::Train).unwrap();
        (lp - lm) / (2.0 * step)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let matrix = small_matrix();
        for (seed, hidden, k) in [(3u64, 4usize, 3usize), (9, 6, 4)] {
            let anchors =
                AnchorSet::new((0..k).collect(), matrix.n_items(), InitMethod::Random).unwrap();
            let mut h = hp(hidden, 1, seed);
            for loss in [LossKind::L2Norm, LossKind::Mse] {
                h.loss = loss;
                let mut p = WeightPredictor::init(&matrix, &anchors, &h).unwrap();
                p.nudge_rectifiers_off_kinks(&matrix, Split::Train, 2e-3);
                let p = p;
                let (_, grads, d_inputs) = p.loss_gradients(&matrix, Split::Train).unwrap();
                let step = 1e-4;

                // anchor weights
                for i in 0..k {
                    let fd = fd_param_grad(
                        &p,
                        &matrix,
                        &|q: &mut WeightPredictor, d: f64| q.anchor_weights[i] += d,
                        step,
                    );
                    assert!(
                        rel_err(fd, grads.anchor_weights[i]) < 1e-4,
                        "W[{i}] fd={fd} analytic={}",
                        grads.anchor_weights[i]
                    );
                }

                // a sample of layer weights and biases
                if let Architecture::Mlp(layers) = p.architecture() {
                    for (l, layer) in layers.iter().enumerate() {
                        let (rows, cols) = layer.weight.dim();
                        for &(r, c) in &[(0usize, 0usize), (rows - 1, cols - 1)] {
                            let fd = fd_param_grad(
                                &p,
                                &matrix,
                                &|q: &mut WeightPredictor, d: f64| {
                                    if let Architecture::Mlp(ls) = &mut q.arch {
                                        ls[l].weight[(r, c)] += d;
                                    }
                                },
                                step,
                            );
                            let analytic = grads.layers[l].0[(r, c)];
                            assert!(
                                rel_err(fd, analytic) < 1e-4,
                                "layer {l} w[{r},{c}] fd={fd} analytic={analytic}"
                            );
                        }
                        let fd = fd_param_grad(
                            &p,
                            &matrix,
                            &|q: &mut WeightPredictor, d: f64| {
                                if let Architecture::Mlp(ls) = &mut q.arch {
                                    ls[l].bias[0] += d;
                                }
                            },
                            step,
                        );
                        let analytic = grads.layers[l].1[0];
                        assert!(
                            rel_err(fd, analytic) < 1e-4,
                            "layer {l} bias fd={fd} analytic={analytic}"
                        );
                    }
                }

                // input gradients via a perturbed copy of the matrix
                let rows = matrix.models_in(Split::Train);
                for &(mi, ai) in &[(0usize, 0usize), (rows.len() - 1, k - 1)] {
                    let item = p.anchor_indices()[ai];
                    let base = matrix.scores().to_owned();
                    let mut plus = base.clone();
                    plus[(rows[mi], item)] += step;
                    let mut minus = base.clone();
                    minus[(rows[mi], item)] -= step;
                    // bypass the ±1 invariant: evaluate the loss directly
                    let eval = |scores: &Array2<f64>| {
                        let inputs = Array2::from_shape_fn((rows.len(), k), |(r, c)| {
                            scores[(rows[r], p.anchor_indices()[c])]
                        });
                        // targets stay fixed: gradient is w.r.t. anchor inputs only
                        let targets = Array1::from_iter(
                            rows.iter().map(|&r| matrix.true_scores()[r]),
                        );
                        let (out, _) = p.forward_batch(&inputs);
                        let e = &out - &targets;
                        loss_and_grad(&e, loss).0
                    };
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                    let analytic = d_inputs[(mi, ai)];
                    assert!(
                        rel_err(fd, analytic) < 1e-4,
                        "input grad model {mi} anchor {ai}: fd={fd} analytic={analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn linear_network_input_gradient_matches_closed_form() {
        // Make the MLP exactly affine over the input range by pushing every
        // pre-activation positive with large biases. Then
        // f(x) = v^T (x ⊙ W) + const with v = W4 W3 W2 W1 (matrix product),
        // and dL/dx_{j,i} = chain_j * v_i * W_i.
        let matrix = small_matrix();
        let k = 3;
        let h = 4;
        let anchors = AnchorSet::new(vec![0, 1, 2], 9, InitMethod::Random).unwrap();
        let mut params = hp(h, 1, 21);
        params.loss = LossKind::L2Norm;
        let seeded = WeightPredictor::init(&matrix, &anchors, &params).unwrap();
        let mut layers = match seeded.architecture() {
            Architecture::Mlp(l) => l.clone(),
            _ => unreachable!(),
        };
        for layer in layers.iter_mut().take(3) {
            layer.bias.fill(10.0); // inputs are within ±1 ⇒ always active
        }
        let p = WeightPredictor::from_parts(
            seeded.anchor_indices().to_vec(),
            seeded.anchor_item_ids().to_vec(),
            seeded.anchor_weights().to_owned(),
            Architecture::Mlp(layers.clone()),
            params,
        )
        .unwrap();

        // effective linear map v^T = W4 W3 W2 W1
        let v = layers[3]
            .weight
            .dot(&layers[2].weight)
            .dot(&layers[1].weight)
            .dot(&layers[0].weight); // (1,k)

        let rows = matrix.models_in(Split::Train);
        let m = rows.len() as f64;
        let e = residuals(&p, &matrix, Split::Train).unwrap();
        let norm = e.dot(&e).sqrt();
        let g = input_gradient(&p, &matrix, Split::Train).unwrap();
        for (j, &ej) in e.iter().enumerate() {
            for i in 0..k {
                let expected = ej / (m * norm) * v[(0, i)] * p.anchor_weights()[i];
                assert_abs_diff_eq!(g[(j, i)], expected, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn noiseless_planted_training_hits_half_point_mae() {
        // anchors = one item per prototype: targets are an exact linear
        // function of the anchor columns (oracle: least-squares residual 0)
        let matrix = generate_synthetic(&SyntheticSpec {
            m: 300,
            c: 5,
            n: 100,
            flip_prob: 0.0,
            difficulty_spread: 0.8,
            seed: 31,
        })
        .unwrap()
        .assign_splits(&crate::matrix::SplitSpec::random(60, 60, 1))
        .unwrap();
        let anchors = AnchorSet::new(vec![0, 1, 2, 3, 4], 100, InitMethod::Kmeans).unwrap();

        // independent oracle: exact linear fit on anchor columns has zero residual
        let train_rows = matrix.models_in(Split::Train);
        let a = crate::linalg::gather_columns(matrix.scores(), &[0, 1, 2, 3, 4]);
        let a_train = crate::linalg::gather_rows(a.view(), &train_rows);
        let y_train = Array1::from_iter(train_rows.iter().map(|&r| matrix.true_scores()[r]));
        let resid = crate::linalg::projection_residual_norm(a_train.view(), y_train.view());
        assert!(resid < 1e-9, "oracle residual {resid}");

        let mut h = hp(32, 800, 0);
        h.learning_rate = 3e-3;
        h.batch_size = 32;
        let (_, report) = train(&matrix, &anchors, &h).unwrap();
        assert!(
            report.validation_mae <= 0.5,
            "validation MAE {} above 0.5 accuracy points",
            report.validation_mae
        );

        // residual mean near zero after convergence
        let (p, _) = train(&matrix, &anchors, &h).unwrap();
        let r = residuals(&p, &matrix, Split::Train).unwrap();
        let mean = r.sum() / r.len() as f64;
        assert!(mean.abs() <= 1e-3, "train residual mean {mean}");
    }

    #[test]
    fn smoothed_training_loss_is_nonincreasing_on_planted_data() {
        let matrix = generate_synthetic(&SyntheticSpec {
            m: 200,
            c: 4,
            n: 40,
            flip_prob: 0.0,
            difficulty_spread: 0.8,
            seed: 8,
        })
        .unwrap()
        .assign_splits(&crate::matrix::SplitSpec::random(30, 30, 2))
        .unwrap();
        let anchors = AnchorSet::new(vec![0, 1, 2, 3], 40, InitMethod::Kmeans).unwrap();
        let (_, report) = train(&matrix, &anchors, &hp(16, 120, 4)).unwrap();
        let losses = &report.per_epoch_loss;
        let ma: Vec<f64> = losses
            .windows(10)
            .map(|w| w.iter().sum::<f64>() / 10.0)
            .collect();
        for t in 20..ma.len() - 1 {
            assert!(
                ma[t + 1] <= ma[t] * (1.0 + 1e-9) + 1e-12,
                "moving average rose at epoch {}: {} -> {}",
                t,
                ma[t],
                ma[t + 1]
            );
        }
    }

    #[test]
    fn diverged_training_reports_error() {
        let matrix = small_matrix();
        let anchors = AnchorSet::new(vec![0, 1], 9, InitMethod::Random).unwrap();
        let mut h = hp(4, 50, 0);
        h.learning_rate = f64::INFINITY;
        let result = train(&matrix, &anchors, &h);
        assert!(matches!(result, Err(Error::TrainingDiverged { .. })));
    }
}
