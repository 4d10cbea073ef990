//! Small fully connected networks with exact gradients and exact
//! Hessian-vector products (forward-over-reverse, Pearlmutter's R-operator).
//!
//! Parameters live in one flat `f64` vector: every weight matrix in layer
//! order (each row-major, shape `out × in`), followed by every bias vector
//! in layer order when biases are enabled.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::objective::{Evaluation, Objective};
use crate::spectral::SymmetricOperator;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|x| x.max(0.0)),
        }
    }

    /// Multiplies `x` in place by `σ′(z)`; the ReLU kink counts as inactive.
    fn mul_derivative(self, x: &mut Array2<f64>, z: &Array2<f64>) {
        if self == Activation::Relu {
            Zip::from(x).and(z).for_each(|x, &z| {
                if z <= 0.0 {
                    *x = 0.0;
                }
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over samples and output coordinates of `(f(x) − y)²`.
    Mse,
    /// Mean over samples of softmax cross-entropy.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `h₀ … h_d`; `h₀` is the input dimension.
    pub layer_widths: Vec<usize>,
    /// One activation per hidden layer (`d − 1` entries). The output layer is affine.
    pub activations: Vec<Activation>,
    pub loss: LossKind,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub seed: u64,
}

impl MlpSpec {
    /// 784 → 32 → 32 → 32 → 32 → 10, ReLU, cross-entropy, no biases
    /// (28,480 parameters).
    pub fn fmnist_default(seed: u64) -> Self {
        Self {
            layer_widths: vec![784, 32, 32, 32, 32, 10],
            activations: vec![Activation::Relu; 4],
            loss: LossKind::CrossEntropy,
            bias: false,
            seed,
        }
    }

    pub fn depth(&self) -> usize {
        self.layer_widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.depth();
        if d < 1 {
            return Err(Error::InvalidInput("an MLP needs at least one layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        if self.activations.len() != d - 1 {
            return Err(Error::InvalidInput(format!(
                "{} hidden layers need {} activations, got {}",
                d - 1,
                d - 1,
                self.activations.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w_offset: usize,
    b_offset: Option<usize>,
}

/// Regression or classification targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Matrix(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Matrix(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `samples × h₀`.
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Targets) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("inputs must be finite".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward-pass intermediates.
struct Cache {
    /// `a[0]` is the input, `a[l]` the activation after layer `l`.
    a: Vec<Array2<f64>>,
    /// `z[l - 1]` is the pre-activation of layer `l`.
    z: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerLayout>,
    n_params: usize,
}

/// Per-layer 0/1 ReLU activation patterns, `samples × h_l` for each hidden layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReluMasks {
    pub layers: Vec<Array2<u8>>,
}

impl ReluMasks {
    /// Number of units whose state differs.
    pub fn differences(&self, other: &ReluMasks) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum()
    }

    pub fn all_active(&self) -> bool {
        self.layers.iter().all(|m| m.iter().all(|&x| x == 1))
    }
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.depth();
        let mut layers = Vec::with_capacity(d);
        let mut offset = 0;
        for l in 0..d {
            let (fan_in, fan_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            layers.push(LayerLayout {
                fan_in,
                fan_out,
                w_offset: offset,
                b_offset: None,
            });
            offset += fan_in * fan_out;
        }
        if spec.bias {
            for layer in &mut layers {
                layer.b_offset = Some(offset);
                offset += layer.fan_out;
            }
        }
        Ok(Self {
            spec,
            layers,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 < self.layers.len() {
            self.spec.activations[layer]
        } else {
            Activation::Identity
        }
    }

    /// He-uniform weights for ReLU layers, Glorot-uniform otherwise, zero biases.
    /// Deterministic in `spec.seed`.
    pub fn init_params(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let mut params = vec![0.0; self.n_params];
        for (l, layer) in self.layers.iter().enumerate() {
            let limit = match self.activation(l) {
                Activation::Relu => (6.0 / layer.fan_in as f64).sqrt(),
                Activation::Identity => (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt(),
            };
            let n = layer.fan_in * layer.fan_out;
            for w in &mut params[layer.w_offset..layer.w_offset + n] {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    /// Splits a flat vector into `(weights, biases)` views of layer `l`.
    fn views<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, Option<&'a [f64]>) {
        let layer = self.layers[l];
        let n = layer.fan_in * layer.fan_out;
        let w = ArrayView2::from_shape(
            (layer.fan_out, layer.fan_in),
            &params[layer.w_offset..layer.w_offset + n],
        )
        .expect("layout sized from spec");
        let b = layer.b_offset.map(|o| &params[o..o + layer.fan_out]);
        (w, b)
    }

    fn check(&self, params: &[f64], batch: &Batch) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        if batch.inputs.ncols() != self.spec.layer_widths[0] {
            return Err(Error::ShapeMismatch(format!(
                "input width {} but the network expects {}",
                batch.inputs.ncols(),
                self.spec.layer_widths[0]
            )));
        }
        let out = *self.spec.layer_widths.last().unwrap();
        match &batch.targets {
            Targets::Labels(labels) => {
                if let Some(bad) = labels.iter().find(|&&y| y >= out) {
                    return Err(Error::ShapeMismatch(format!(
                        "label {bad} out of range for {out} outputs"
                    )));
                }
            }
            Targets::Matrix(m) => {
                if m.ncols() != out {
                    return Err(Error::ShapeMismatch(format!(
                        "target width {} but the network has {out} outputs",
                        m.ncols()
                    )));
                }
                if self.spec.loss == LossKind::CrossEntropy {
                    return Err(Error::ShapeMismatch(
                        "cross-entropy needs class labels".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn forward_cache(&self, params: &[f64], inputs: &Array2<f64>) -> Cache {
        let d = self.layers.len();
        let mut a = Vec::with_capacity(d + 1);
        let mut z = Vec::with_capacity(d);
        a.push(inputs.clone());
        for l in 0..d {
            let (w, b) = self.views(params, l);
            let mut zl = a[l].dot(&w.t());
            if let Some(b) = b {
                zl += &ArrayView2::from_shape((1, b.len()), b).unwrap();
            }
            a.push(self.activation(l).apply(&zl));
            z.push(zl);
        }
        Cache { a, z }
    }

    /// Network outputs, `samples × h_d`.
    pub fn outputs(&self, params: &[f64], batch: &Batch) -> Result<Array2<f64>> {
        self.check(params, batch)?;
        Ok(self.forward_cache(params, &batch.inputs).a.pop().unwrap())
    }

    /// Outputs and batch-mean loss.
    pub fn forward(&self, params: &[f64], batch: &Batch) -> Result<(Array2<f64>, f64)> {
        let out = self.outputs(params, batch)?;
        let loss = self.output_loss(&out, &batch.targets).0;
        Ok((out, loss))
    }

    /// Loss and `∂L/∂(outputs)`.
    fn output_loss(&self, out: &Array2<f64>, targets: &Targets) -> (f64, Array2<f64>) {
        let n = out.nrows() as f64;
        match self.spec.loss {
            LossKind::CrossEntropy => {
                let Targets::Labels(labels) = targets else {
                    unreachable!("checked in Mlp::check")
                };
                let p = softmax_rows(out);
                let mut loss = 0.0;
                for (i, row) in out.outer_iter().enumerate() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    loss += lse - row[labels[i]];
                }
                let mut delta = p;
                for (i, &y) in labels.iter().enumerate() {
                    delta[[i, y]] -= 1.0;
                }
                delta /= n;
                (loss / n, delta)
            }
            LossKind::Mse => {
                let y = dense_targets(targets, out.ncols());
                let diff = out - &y;
                let scale = n * out.ncols() as f64;
                let loss = diff.iter().map(|x| x * x).sum::<f64>() / scale;
                (loss, diff * (2.0 / scale))
            }
        }
    }

    fn backward(&self, params: &[f64], cache: &Cache, mut delta: Array2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_params];
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let gw = delta.t().dot(&cache.a[l]);
            write_matrix(&mut grad[layer.w_offset..], &gw);
            if let Some(o) = layer.b_offset {
                let gb = delta.sum_axis(Axis(0));
                grad[o..o + layer.fan_out].copy_from_slice(gb.as_slice().unwrap());
            }
            if l > 0 {
                let (w, _) = self.views(params, l);
                let mut next = delta.dot(&w);
                self.activation(l - 1).mul_derivative(&mut next, &cache.z[l - 1]);
                delta = next;
            }
        }
        grad
    }

    /// Batch-mean loss and its exact gradient.
    pub fn loss_and_gradient(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.check(params, batch)?;
        let cache = self.forward_cache(params, &batch.inputs);
        let (loss, delta) = self.output_loss(cache.a.last().unwrap(), &batch.targets);
        Ok((loss, self.backward(params, &cache, delta)))
    }

    /// Loss, gradient and training accuracy from a single forward pass.
    pub fn loss_gradient_accuracy(
        &self,
        params: &[f64],
        batch: &Batch,
    ) -> Result<(f64, Vec<f64>, f64)> {
        self.check(params, batch)?;
        let cache = self.forward_cache(params, &batch.inputs);
        let out = cache.a.last().unwrap();
        let acc = accuracy_of(out, &batch.targets);
        let (loss, delta) = self.output_loss(out, &batch.targets);
        Ok((loss, self.backward(params, &cache, delta), acc))
    }

    pub fn gradient(&self, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        self.loss_and_gradient(params, batch).map(|(_, g)| g)
    }

    /// Prepares an operator `v ↦ H(θ)v` that reuses one forward/backward pass.
    pub fn hessian_at<'a>(&'a self, params: &'a [f64], batch: &'a Batch) -> Result<MlpHessian<'a>> {
        self.check(params, batch)?;
        let cache = self.forward_cache(params, &batch.inputs);
        let out = cache.a.last().unwrap();
        let probs = match self.spec.loss {
            LossKind::CrossEntropy => Some(softmax_rows(out)),
            LossKind::Mse => None,
        };
        let (_, delta_out) = self.output_loss(out, &batch.targets);
        // Output-layer-down deltas of the plain backward pass.
        let mut deltas = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut delta = delta_out;
        for l in (0..self.layers.len()).rev() {
            if l > 0 {
                let (w, _) = self.views(params, l);
                let mut next = delta.dot(&w);
                self.activation(l - 1).mul_derivative(&mut next, &cache.z[l - 1]);
                deltas[l] = delta;
                delta = next;
            } else {
                deltas[0] = std::mem::replace(&mut delta, Array2::zeros((0, 0)));
            }
        }
        Ok(MlpHessian {
            mlp: self,
            params,
            cache,
            deltas,
            probs,
        })
    }

    /// Exact Hessian-vector product `H(θ)v`.
    pub fn hvp(&self, params: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_params {
            return Err(Error::ShapeMismatch(format!(
                "direction has {} entries, expected {}",
                v.len(),
                self.n_params
            )));
        }
        let h = self.hessian_at(params, batch)?;
        let mut out = vec![0.0; self.n_params];
        h.apply(v, &mut out);
        Ok(out)
    }

    /// Fraction of samples whose arg-max output equals the label.
    pub fn accuracy(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        let out = self.outputs(params, batch)?;
        Ok(accuracy_of(&out, &batch.targets))
    }

    /// ReLU activation patterns per hidden layer; identity layers report all ones.
    pub fn relu_masks(&self, params: &[f64], batch: &Batch) -> Result<ReluMasks> {
        self.check(params, batch)?;
        let cache = self.forward_cache(params, &batch.inputs);
        let layers = (0..self.layers.len() - 1)
            .map(|l| match self.activation(l) {
                Activation::Relu => cache.z[l].mapv(|x| u8::from(x > 0.0)),
                Activation::Identity => cache.z[l].mapv(|_| 1),
            })
            .collect();
        Ok(ReluMasks { layers })
    }

    /// Smallest `|pre-activation|` over ReLU units; masks are constant under
    /// perturbations that move no pre-activation by more than this.
    pub fn min_preactivation_margin(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        self.check(params, batch)?;
        let cache = self.forward_cache(params, &batch.inputs);
        Ok((0..self.layers.len() - 1)
            .filter(|&l| self.activation(l) == Activation::Relu)
            .flat_map(|l| cache.z[l].iter().map(|x| x.abs()).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min))
    }

    /// Explicit Hessian of a single-output identity network, assembled from
    /// the path expansion `f(x) = Σ_paths (Π weights on path) · source`, where a
    /// source is an input coordinate or a bias entry.
    pub fn som_linear_hessian(&self, params: &[f64], batch: &Batch) -> Result<DMatrix<f64>> {
        if self.spec.activations.iter().any(|a| *a != Activation::Identity) {
            return Err(Error::Unsupported(
                "path expansion needs identity activations".into(),
            ));
        }
        if *self.spec.layer_widths.last().unwrap() != 1 {
            return Err(Error::Unsupported("path expansion needs a single output".into()));
        }
        if self.n_params > crate::dln_general::MAX_DENSE_DIM {
            return Err(Error::Unsupported(format!(
                "explicit Hessian capped at {} parameters",
                crate::dln_general::MAX_DENSE_DIM
            )));
        }
        self.check(params, batch)?;
        let p = self.n_params;
        let paths = self.enumerate_paths();
        let (d1, d2) = self.scalar_output_loss_derivs(params, batch);
        let inputs = &batch.inputs;
        let n = batch.len();
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut jac = vec![0.0; p];
        for s in 0..n {
            // J = ∂f/∂θ and the second-order term z'(f) ∂²f/∂θ∂θ for sample s.
            jac.iter_mut().for_each(|x| *x = 0.0);
            for path in &paths {
                let scale = match path.source {
                    Source::Input(i) => inputs[[s, i]],
                    Source::Bias(_) => 1.0,
                };
                // Factors on the path: weights, plus the bias itself. An input
                // source contributes a constant scale instead.
                let mut factors: Vec<(usize, f64)> =
                    path.weights.iter().map(|&i| (i, params[i])).collect();
                if let Source::Bias(idx) = path.source {
                    factors.push((idx, params[idx]));
                }
                for (a, &(ia, _)) in factors.iter().enumerate() {
                    let others: f64 = factors
                        .iter()
                        .enumerate()
                        .filter(|(b, _)| *b != a)
                        .map(|(_, f)| f.1)
                        .product();
                    jac[ia] += others * scale;
                    for (b, &(ib, _)) in factors.iter().enumerate() {
                        if b == a {
                            continue;
                        }
                        let rest: f64 = factors
                            .iter()
                            .enumerate()
                            .filter(|(c, _)| *c != a && *c != b)
                            .map(|(_, f)| f.1)
                            .product();
                        h[(ia, ib)] += d1[s] * rest * scale;
                    }
                }
            }
            for a in 0..p {
                if jac[a] == 0.0 {
                    continue;
                }
                for b in 0..p {
                    h[(a, b)] += d2[s] * jac[a] * jac[b];
                }
            }
        }
        Ok(h)
    }

    /// Per-sample `∂ℓ/∂f` and `∂²ℓ/∂f²` (batch mean folded in) for a scalar output.
    fn scalar_output_loss_derivs(&self, params: &[f64], batch: &Batch) -> (Vec<f64>, Vec<f64>) {
        let cache = self.forward_cache(params, &batch.inputs);
        let out = cache.a.last().unwrap();
        let n = out.nrows() as f64;
        match self.spec.loss {
            LossKind::Mse => {
                let y = dense_targets(&batch.targets, 1);
                let d1 = (0..out.nrows()).map(|i| 2.0 * (out[[i, 0]] - y[[i, 0]]) / n).collect();
                (d1, vec![2.0 / n; out.nrows()])
            }
            // Softmax over a single logit is constant.
            LossKind::CrossEntropy => (vec![0.0; out.nrows()], vec![0.0; out.nrows()]),
        }
    }

    fn enumerate_paths(&self) -> Vec<Path> {
        // Walk backward from the single output unit.
        let d = self.layers.len();
        let mut paths = Vec::new();
        let mut stack: Vec<(usize, usize, Vec<usize>)> = vec![(d, 0, Vec::new())];
        while let Some((layer, unit, weights)) = stack.pop() {
            // `unit` is an output unit of layer `layer` (1-based); its bias is a source.
            let lay = self.layers[layer - 1];
            if let Some(o) = lay.b_offset {
                paths.push(Path {
                    weights: weights.clone(),
                    source: Source::Bias(o + unit),
                });
            }
            for k in 0..lay.fan_in {
                let mut w = weights.clone();
                w.push(lay.w_offset + unit * lay.fan_in + k);
                if layer == 1 {
                    paths.push(Path {
                        weights: w,
                        source: Source::Input(k),
                    });
                } else {
                    stack.push((layer - 1, k, w));
                }
            }
        }
        paths
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Input(usize),
    /// Flat parameter index of the bias.
    Bias(usize),
}

#[derive(Debug, Clone)]
struct Path {
    weights: Vec<usize>,
    source: Source,
}

/// `v ↦ H(θ)v` at a fixed `θ`, with the forward and backward passes cached.
pub struct MlpHessian<'a> {
    mlp: &'a Mlp,
    params: &'a [f64],
    cache: Cache,
    /// `deltas[l]` = `∂L/∂z` of layer `l` (0-based).
    deltas: Vec<Array2<f64>>,
    probs: Option<Array2<f64>>,
}

impl SymmetricOperator for MlpHessian<'_> {
    fn dim(&self) -> usize {
        self.mlp.n_params
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let mlp = self.mlp;
        let d = mlp.layers.len();
        let cache = &self.cache;
        let n = cache.a[0].nrows();

        // R-forward: directional derivatives of pre-activations and activations.
        let mut ra: Vec<Option<Array2<f64>>> = vec![None];
        let mut rz: Vec<Array2<f64>> = Vec::with_capacity(d);
        for l in 0..d {
            let (w, _) = mlp.views(self.params, l);
            let (vw, vb) = mlp.views(v, l);
            let mut r = cache.a[l].dot(&vw.t());
            if let Some(prev) = &ra[l] {
                r += &prev.dot(&w.t());
            }
            if let Some(vb) = vb {
                r += &ArrayView2::from_shape((1, vb.len()), vb).unwrap();
            }
            let mut next = r.clone();
            mlp.activation(l).mul_derivative(&mut next, &cache.z[l]);
            ra.push(Some(next));
            rz.push(r);
        }

        // Output-loss curvature applied to R(z_d).
        let rz_out = &rz[d - 1];
        let mut rdelta = match &self.probs {
            Some(p) => {
                let mut r = p * rz_out;
                let pr = r.sum_axis(Axis(1));
                Zip::from(r.rows_mut()).and(p.rows()).and(&pr).for_each(|mut row, prow, &s| {
                    row.scaled_add(-s, &prow);
                });
                r / n as f64
            }
            None => rz_out * (2.0 / (n * rz_out.ncols()) as f64),
        };

        // R-backward.
        for l in (0..d).rev() {
            let layer = mlp.layers[l];
            let mut gw = rdelta.t().dot(&cache.a[l]);
            if let Some(prev) = &ra[l] {
                gw += &self.deltas[l].t().dot(prev);
            }
            write_matrix(&mut out[layer.w_offset..], &gw);
            if let Some(o) = layer.b_offset {
                let gb: Array1<f64> = rdelta.sum_axis(Axis(0));
                out[o..o + layer.fan_out].copy_from_slice(gb.as_slice().unwrap());
            }
            if l > 0 {
                let (w, _) = mlp.views(self.params, l);
                let (vw, _) = mlp.views(v, l);
                let mut next = rdelta.dot(&w) + self.deltas[l].dot(&vw);
                mlp.activation(l - 1).mul_derivative(&mut next, &cache.z[l - 1]);
                rdelta = next;
            }
        }
    }
}

/// Loss, gradient and HVP of an [`Mlp`] on a fixed batch.
#[derive(Debug, Clone, Copy)]
pub struct MlpObjective<'a> {
    pub mlp: &'a Mlp,
    pub batch: &'a Batch,
}

impl<'a> MlpObjective<'a> {
    pub fn new(mlp: &'a Mlp, batch: &'a Batch) -> Result<Self> {
        mlp.check(&vec![0.0; mlp.n_params], batch)?;
        Ok(Self { mlp, batch })
    }
}

impl Objective for MlpObjective<'_> {
    fn dim(&self) -> usize {
        self.mlp.n_params
    }

    fn loss(&self, params: &[f64]) -> f64 {
        self.mlp.forward(params, self.batch).expect("shapes checked").1
    }

    fn loss_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        self.mlp
            .loss_and_gradient(params, self.batch)
            .expect("shapes checked")
    }

    fn hessian_operator<'b>(&'b self, params: &'b [f64]) -> Box<dyn SymmetricOperator + 'b> {
        Box::new(self.mlp.hessian_at(params, self.batch).expect("shapes checked"))
    }

    fn accuracy(&self, params: &[f64]) -> Option<f64> {
        self.mlp.accuracy(params, self.batch).ok()
    }

    fn evaluate(&self, params: &[f64]) -> Evaluation {
        let (loss, gradient, accuracy) = self
            .mlp
            .loss_gradient_accuracy(params, self.batch)
            .expect("shapes checked");
        Evaluation {
            loss,
            gradient,
            accuracy: Some(accuracy),
        }
    }
}

fn write_matrix(dst: &mut [f64], m: &Array2<f64>) {
    let n = m.len();
    match m.as_slice() {
        Some(src) => dst[..n].copy_from_slice(src),
        None => {
            for (d, s) in dst[..n].iter_mut().zip(m.iter()) {
                *d = *s;
            }
        }
    }
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn dense_targets(targets: &Targets, width: usize) -> Array2<f64> {
    match targets {
        Targets::Matrix(m) => m.clone(),
        Targets::Labels(labels) => {
            let mut y = Array2::zeros((labels.len(), width));
            for (i, &l) in labels.iter().enumerate() {
                y[[i, l]] = 1.0;
            }
            y
        }
    }
}

fn accuracy_of(out: &Array2<f64>, targets: &Targets) -> f64 {
    let hits = match targets {
        Targets::Labels(l) => out
            .outer_iter()
            .zip(l)
            .filter(|(row, &y)| argmax(row.iter()) == y)
            .count(),
        Targets::Matrix(m) => out
            .outer_iter()
            .zip(m.outer_iter())
            .filter(|(row, t)| argmax(row.iter()) == argmax(t.iter()))
            .count(),
    };
    hits as f64 / out.nrows().max(1) as f64
}

fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in it.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Copies rows `range` of a batch.
pub fn slice_batch(batch: &Batch, range: std::ops::Range<usize>) -> Batch {
    let inputs = batch.inputs.slice(s![range.clone(), ..]).to_owned();
    let targets = match &batch.targets {
        Targets::Labels(l) => Targets::Labels(l[range].to_vec()),
        Targets::Matrix(m) => Targets::Matrix(m.slice(s![range, ..]).to_owned()),
    };
    Batch { inputs, targets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dln_exact::{self, Dln2State};
    use crate::linalg;
    use crate::PolyLoss;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn spec(widths: &[usize], act: Activation, loss: LossKind, bias: bool, seed: u64) -> MlpSpec {
        MlpSpec {
            layer_widths: widths.to_vec(),
            activations: vec![act; widths.len() - 2],
            loss,
            bias,
            seed,
        }
    }

    fn random_batch(widths: &[usize], loss: LossKind, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h0, hd) = (widths[0], *widths.last().unwrap());
        let inputs = Array2::from_shape_fn((n, h0), |_| rng.sample(StandardNormal));
        let targets = match loss {
            LossKind::CrossEntropy => Targets::Labels((0..n).map(|_| rng.random_range(0..hd)).collect()),
            LossKind::Mse => Targets::Matrix(Array2::from_shape_fn((n, hd), |_| rng.sample(StandardNormal))),
        };
        Batch::new(inputs, targets).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn with_random_biases(mlp: &Mlp, seed: u64) -> Vec<f64> {
        let mut p = mlp.init_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mlp.layers {
            if let Some(o) = layer.b_offset {
                for b in &mut p[o..o + layer.fan_out] {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
        }
        p
    }

    #[test]
    fn appendix_architecture_has_28480_parameters() {
        let mlp = Mlp::new(MlpSpec::fmnist_default(0)).unwrap();
        assert_eq!(mlp.num_params(), 28_480);
        let mut with_bias = MlpSpec::fmnist_default(0);
        with_bias.bias = true;
        assert_eq!(Mlp::new(with_bias).unwrap().num_params(), 28_480 + 4 * 32 + 10);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(&[3, 4, 2], Activation::Relu, LossKind::Mse, false, 0);
        s.activations.clear();
        assert!(Mlp::new(s).is_err());
        let mut s = spec(&[3, 1], Activation::Relu, LossKind::Mse, false, 0);
        s.layer_widths.pop();
        assert!(Mlp::new(s).is_err());
    }

    #[test]
    fn identity_layers_pass_inputs_through() {
        let mlp = Mlp::new(spec(&[3, 3, 3], Activation::Identity, LossKind::Mse, true, 0)).unwrap();
        let mut p = vec![0.0; mlp.num_params()];
        for l in 0..2 {
            for i in 0..3 {
                p[l * 9 + i * 3 + i] = 1.0;
            }
        }
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]];
        let batch = Batch::new(x.clone(), Targets::Matrix(x.clone())).unwrap();
        let (out, loss) = mlp.forward(&p, &batch).unwrap();
        assert_eq!(out, x);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn one_hidden_layer_identity_net_is_an_affine_map() {
        let mlp = Mlp::new(spec(&[3, 4, 2], Activation::Identity, LossKind::Mse, true, 1)).unwrap();
        let p = with_random_biases(&mlp, 9);
        let batch = random_batch(&[3, 4, 2], LossKind::Mse, 5, 2);
        let w1 = DMatrix::from_row_slice(4, 3, &p[0..12]);
        let w2 = DMatrix::from_row_slice(2, 4, &p[12..20]);
        let b1 = nalgebra::DVector::from_row_slice(&p[20..24]);
        let b2 = nalgebra::DVector::from_row_slice(&p[24..26]);
        let out = mlp.outputs(&p, &batch).unwrap();
        for (s, row) in batch.inputs.outer_iter().enumerate() {
            let x = nalgebra::DVector::from_iterator(3, row.iter().copied());
            let y = &w2 * &w1 * x + (&w2 * &b1 + &b2);
            for c in 0..2 {
                assert!((out[[s, c]] - y[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let mlp = Mlp::new(spec(&[4, 5, 7], Activation::Relu, LossKind::CrossEntropy, false, 0)).unwrap();
        let p = vec![0.0; mlp.num_params()];
        let batch = random_batch(&[4, 5, 7], LossKind::CrossEntropy, 6, 0);
        let (_, loss) = mlp.forward(&p, &batch).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let mlp = Mlp::new(spec(&[1, 2], Activation::Relu, LossKind::CrossEntropy, false, 0)).unwrap();
        let batch = Batch::new(array![[1.0]], Targets::Labels(vec![0])).unwrap();
        let (_, loss) = mlp.forward(&[1000.0, -1000.0], &batch).unwrap();
        assert_eq!(loss, 0.0);
        let (_, loss) = mlp.forward(&[-1000.0, 1000.0], &batch).unwrap();
        assert!((loss - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn shape_errors() {
        let mlp = Mlp::new(spec(&[3, 4, 2], Activation::Relu, LossKind::CrossEntropy, false, 0)).unwrap();
        let batch = random_batch(&[3, 4, 2], LossKind::CrossEntropy, 3, 0);
        assert!(matches!(mlp.forward(&[0.0; 3], &batch), Err(Error::ShapeMismatch(_))));
        let wide = random_batch(&[5, 4, 2], LossKind::CrossEntropy, 3, 0);
        assert!(mlp.forward(&mlp.init_params(), &wide).is_err());
        let bad = Batch::new(array![[0.0, 0.0, 0.0]], Targets::Labels(vec![2])).unwrap();
        assert!(mlp.forward(&mlp.init_params(), &bad).is_err());
        assert!(Batch::new(array![[f64::NAN]], Targets::Labels(vec![0])).is_err());
        assert!(Batch::new(array![[0.0]], Targets::Labels(vec![0, 1])).is_err());
    }

    #[test]
    fn zero_loss_interpolant_has_zero_gradient() {
        let mlp = Mlp::new(spec(&[3, 4, 2], Activation::Relu, LossKind::Mse, true, 3)).unwrap();
        let p = with_random_biases(&mlp, 1);
        let mut batch = random_batch(&[3, 4, 2], LossKind::Mse, 6, 4);
        batch.targets = Targets::Matrix(mlp.outputs(&p, &batch).unwrap());
        let g = mlp.gradient(&p, &batch).unwrap();
        assert!(linalg::norm(&g) < 1e-10);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let w = [4, 6, 3];
        let mlp = Mlp::new(spec(&w, Activation::Relu, LossKind::CrossEntropy, true, 5)).unwrap();
        let p = with_random_biases(&mlp, 2);
        let batch = random_batch(&w, LossKind::CrossEntropy, 7, 5);
        let Targets::Labels(l) = &batch.targets else { unreachable!() };
        let doubled = Batch::new(
            ndarray::concatenate(Axis(0), &[batch.inputs.view(), batch.inputs.view()]).unwrap(),
            Targets::Labels([l.clone(), l.clone()].concat()),
        )
        .unwrap();
        let g1 = mlp.gradient(&p, &batch).unwrap();
        let g2 = mlp.gradient(&p, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central differences with `h = 1e-6 · max(1, |θᵢ|)`.
    fn fd_gradient(mlp: &Mlp, p: &[f64], batch: &Batch) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let h = 1e-6 * p[i].abs().max(1.0);
                let mut q = p.to_vec();
                q[i] += h;
                let lp = mlp.forward(&q, batch).unwrap().1;
                q[i] -= 2.0 * h;
                let lm = mlp.forward(&q, batch).unwrap().1;
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (act, loss) in [
            (Activation::Relu, LossKind::CrossEntropy),
            (Activation::Identity, LossKind::Mse),
            (Activation::Relu, LossKind::Mse),
            (Activation::Identity, LossKind::CrossEntropy),
        ] {
            let w = [5, 6, 4, 3];
            let mlp = Mlp::new(spec(&w, act, loss, true, 7)).unwrap();
            let p = with_random_biases(&mlp, 3);
            let batch = random_batch(&w, loss, 8, 6);
            let g = mlp.gradient(&p, &batch).unwrap();
            let fd = fd_gradient(&mlp, &p, &batch);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "{act:?}/{loss:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        for (act, loss) in [
            (Activation::Relu, LossKind::CrossEntropy),
            (Activation::Identity, LossKind::Mse),
            (Activation::Relu, LossKind::Mse),
            (Activation::Identity, LossKind::CrossEntropy),
        ] {
            let w = [5, 6, 4, 3];
            let mlp = Mlp::new(spec(&w, act, loss, true, 8)).unwrap();
            let p = with_random_biases(&mlp, 4);
            let batch = random_batch(&w, loss, 8, 7);
            let mut v = random_vec(mlp.num_params(), 1);
            linalg::normalize(&mut v);
            let hv = mlp.hvp(&p, &batch, &v).unwrap();
            let h = 1e-5;
            let shift = |s: f64| -> Vec<f64> { p.iter().zip(&v).map(|(a, b)| a + s * h * b).collect() };
            let gp = mlp.gradient(&shift(1.0), &batch).unwrap();
            let gm = mlp.gradient(&shift(-1.0), &batch).unwrap();
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let err: Vec<f64> = hv.iter().zip(&fd).map(|(a, b)| a - b).collect();
            assert!(linalg::norm(&err) <= 1e-4 * linalg::norm(&hv), "{act:?}/{loss:?}");
        }
    }

    #[test]
    fn hvp_is_symmetric_and_linear() {
        let w = [4, 5, 5, 3];
        let mlp = Mlp::new(spec(&w, Activation::Relu, LossKind::CrossEntropy, true, 2)).unwrap();
        let p = with_random_biases(&mlp, 5);
        let batch = random_batch(&w, LossKind::CrossEntropy, 9, 8);
        let n = mlp.num_params();
        let (u, v) = (random_vec(n, 10), random_vec(n, 11));
        let hu = mlp.hvp(&p, &batch, &u).unwrap();
        let hv = mlp.hvp(&p, &batch, &v).unwrap();
        assert!((linalg::dot(&u, &hv) - linalg::dot(&v, &hu)).abs() < 1e-10);
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let hmix = mlp.hvp(&p, &batch, &mix).unwrap();
        for i in 0..n {
            assert!((hmix[i] - (2.0 * hu[i] - 0.5 * hv[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn path_expansion_matches_hvp_columns() {
        for (widths, bias) in [(vec![3, 4, 1], true), (vec![2, 3, 2, 1], true), (vec![3, 2, 1], false)] {
            let mlp = Mlp::new(spec(&widths, Activation::Identity, LossKind::Mse, bias, 4)).unwrap();
            let p = with_random_biases(&mlp, 6);
            let batch = random_batch(&widths, LossKind::Mse, 5, 9);
            let h = mlp.som_linear_hessian(&p, &batch).unwrap();
            let n = mlp.num_params();
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                let col = mlp.hvp(&p, &batch, &e).unwrap();
                for i in 0..n {
                    assert!((col[i] - h[(i, j)]).abs() < 1e-8, "{widths:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn depth_one_hessian_is_gauss_newton() {
        let w = [3, 1];
        let mlp = Mlp::new(spec(&w, Activation::Identity, LossKind::Mse, false, 0)).unwrap();
        let batch = random_batch(&w, LossKind::Mse, 6, 3);
        let h = mlp.som_linear_hessian(&mlp.init_params(), &batch).unwrap();
        let x = DMatrix::from_row_slice(6, 3, batch.inputs.as_slice().unwrap());
        let gn = x.transpose() * &x * (2.0 / 6.0);
        assert!((h - gn).amax() < 1e-12);
    }

    #[test]
    fn single_path_net_is_the_two_parameter_dln() {
        let w = [1, 1, 1];
        let mlp = Mlp::new(spec(&w, Activation::Identity, LossKind::Mse, false, 0)).unwrap();
        let batch = Batch::new(array![[1.0]], Targets::Matrix(array![[0.0]])).unwrap();
        let (t1, t2) = (-0.7, 1.9);
        let h = mlp.som_linear_hessian(&[t1, t2], &batch).unwrap();
        let d = dln_exact::hessian(&Dln2State::new(t1, t2), &PolyLoss::quadratic());
        for i in 0..2 {
            for j in 0..2 {
                assert!((h[(i, j)] - d[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn path_expansion_refuses_nonlinear_nets() {
        let w = [2, 2, 1];
        let mlp = Mlp::new(spec(&w, Activation::Relu, LossKind::Mse, false, 0)).unwrap();
        let batch = random_batch(&w, LossKind::Mse, 2, 0);
        assert!(matches!(
            mlp.som_linear_hessian(&mlp.init_params(), &batch),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn masks_follow_preactivation_signs() {
        let w = [2, 2, 1];
        let mlp = Mlp::new(spec(&w, Activation::Relu, LossKind::Mse, false, 0)).unwrap();
        // First layer is the identity, so masks mirror input signs.
        let p = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let x = array![[1.0, 2.0], [-1.0, 3.0]];
        let pos = Batch::new(x.clone(), Targets::Matrix(array![[0.0], [0.0]])).unwrap();
        let neg = Batch::new(-x, Targets::Matrix(array![[0.0], [0.0]])).unwrap();
        let mp = mlp.relu_masks(&p, &pos).unwrap();
        let mn = mlp.relu_masks(&p, &neg).unwrap();
        assert_eq!(mp.layers[0], array![[1, 1], [0, 1]]);
        assert_eq!(mn.layers[0], array![[0, 0], [1, 0]]);
        assert_eq!(mp.differences(&mn), 4);
        let all = Batch::new(array![[1.0, 1.0]], Targets::Matrix(array![[0.0]])).unwrap();
        assert!(mlp.relu_masks(&p, &all).unwrap().all_active());
    }

    #[test]
    fn masks_survive_small_steps() {
        let w = [4, 6, 6, 3];
        let mlp = Mlp::new(spec(&w, Activation::Relu, LossKind::CrossEntropy, false, 1)).unwrap();
        let batch = random_batch(&w, LossKind::CrossEntropy, 10, 1);
        let mut p = mlp.init_params();
        let m0 = mlp.relu_masks(&p, &batch).unwrap();
        for _ in 0..2 {
            let g = mlp.gradient(&p, &batch).unwrap();
            let margin = mlp.min_preactivation_margin(&p, &batch).unwrap();
            // A step this small moves no pre-activation past zero.
            let eta = 1e-3 * margin / linalg::norm(&g).max(1.0);
            linalg::axpy(-eta, &g, &mut p);
        }
        assert_eq!(mlp.relu_masks(&p, &batch).unwrap().differences(&m0), 0);
    }

    #[test]
    fn initialization_is_deterministic() {
        let s = MlpSpec::fmnist_default(42);
        let a = Mlp::new(s.clone()).unwrap().init_params();
        let b = Mlp::new(s).unwrap().init_params();
        assert_eq!(a, b);
        let c = Mlp::new(MlpSpec::fmnist_default(43)).unwrap().init_params();
        assert_ne!(a, c);
        let limit = (6.0f64 / 784.0).sqrt();
        assert!(a[..784 * 32].iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn objective_wrapper_agrees() {
        let w = [3, 4, 2];
        let mlp = Mlp::new(spec(&w, Activation::Relu, LossKind::CrossEntropy, true, 1)).unwrap();
        let batch = random_batch(&w, LossKind::CrossEntropy, 5, 1);
        let obj = MlpObjective::new(&mlp, &batch).unwrap();
        let p = with_random_biases(&mlp, 1);
        let v = random_vec(obj.dim(), 3);
        assert_eq!(obj.hvp(&p, &v), mlp.hvp(&p, &batch, &v).unwrap());
        assert_eq!(obj.loss_and_gradient(&p), mlp.loss_and_gradient(&p, &batch).unwrap());
        assert!(obj.accuracy(&p).is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn hvp_linearity(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let w = [3, 4, 3];
            let mlp = Mlp::new(spec(&w, Activation::Relu, LossKind::Mse, true, seed)).unwrap();
            let p = with_random_biases(&mlp, seed);
            let batch = random_batch(&w, LossKind::Mse, 4, seed);
            let n = mlp.num_params();
            let (u, v) = (random_vec(n, seed + 1), random_vec(n, seed + 2));
            let hu = mlp.hvp(&p, &batch, &u).unwrap();
            let hv = mlp.hvp(&p, &batch, &v).unwrap();
            let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let hm = mlp.hvp(&p, &batch, &mix).unwrap();
            for i in 0..n {
                prop_assert!((hm[i] - a * hu[i] - b * hv[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn linear_nets_agree_with_path_expansion(seed in 0u64..10_000) {
            let w = [2, 3, 1];
            let mlp = Mlp::new(spec(&w, Activation::Identity, LossKind::Mse, true, seed)).unwrap();
            let p = with_random_biases(&mlp, seed);
            let batch = random_batch(&w, LossKind::Mse, 3, seed);
            let h = mlp.som_linear_hessian(&p, &batch).unwrap();
            let v = random_vec(mlp.num_params(), seed);
            let hv = mlp.hvp(&p, &batch, &v).unwrap();
            let dense = &h * nalgebra::DVector::from_row_slice(&v);
            for i in 0..v.len() {
                prop_assert!((hv[i] - dense[i]).abs() < 1e-8);
            }
        }
    }
}
