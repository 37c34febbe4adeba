//! Fully-connected embedding network with hand-written forward and backward
//! passes. Hidden layers use ReLU; the last layer is linear and its output is
//! L2-normalized onto the unit hypersphere.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, NORM_EPS};

/// One affine layer, `weights` is `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense { weights: Matrix::zeros(fan_out, fan_in), bias: vec![0.0; fan_out] }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp")]
pub struct MlpParams {
    layers: Vec<Dense>,
}

#[derive(Deserialize)]
struct RawMlp {
    layers: Vec<Dense>,
}

impl TryFrom<RawMlp> for MlpParams {
    type Error = Error;

    fn try_from(raw: RawMlp) -> Result<Self> {
        MlpParams::from_layers(raw.layers)
    }
}

/// Gradients share the parameter layout.
pub type MlpGrads = MlpParams;

/// Intermediate values of one forward pass, enough to backpropagate exactly.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    /// `inputs[k]` is the input fed to layer `k` (B x fan_in).
    inputs: Vec<Matrix>,
    /// `pre[k]` is the affine output of layer `k` before activation.
    pre: Vec<Matrix>,
    /// Norm of each pre-normalization feature row.
    norms: Vec<f64>,
    embeddings: Matrix,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.embeddings.rows()
    }

    /// Pre-normalization features (last layer output).
    pub fn features(&self) -> &Matrix {
        self.pre.last().expect("tape has at least one layer")
    }

    pub fn feature_norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

impl MlpParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "need at least 2 layer sizes (input and output), got {}",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&d| d == 0) {
            return Err(Error::config(format!("layer size at position {pos} is zero")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Dense::zeros(fan_in, fan_out);
                for x in layer.weights.as_mut_slice() {
                    *x = rng.gen_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() || l.fan_in() == 0 || l.fan_out() == 0 {
                return Err(Error::config(format!("layer {k} has inconsistent shapes")));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::config(format!("layer {k} has non-finite entries")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::config(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    k + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(MlpParams { layers })
    }

    pub fn zeros_like(&self) -> MlpGrads {
        MlpParams {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::fan_out));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Every parameter tensor in a fixed order (w0, b0, w1, b1, ...).
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTape)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::contract(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut current = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Matrix::zeros(current.rows(), layer.fan_out());
            for (i, x) in current.iter_rows().enumerate() {
                let out = z.row_mut(i);
                for (o, (w, b)) in out.iter_mut().zip(layer.weights.iter_rows().zip(&layer.bias)) {
                    *o = dot(w, x) + b;
                }
            }
            let next = if k + 1 < n_layers {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        let feature = current;
        let mut norms = Vec::with_capacity(feature.rows());
        let mut embeddings = Matrix::zeros(feature.rows(), feature.cols());
        for (i, v) in feature.iter_rows().enumerate() {
            let n = dot(v, v).sqrt();
            let d = n.max(NORM_EPS);
            norms.push(n);
            embeddings.row_mut(i).iter_mut().zip(v).for_each(|(e, x)| *e = x / d);
        }
        let tape = ForwardTape { inputs, pre, norms, embeddings: embeddings.clone() };
        Ok((embeddings, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch).map(|(e, _)| e)
    }

    /// Parameter gradients of a scalar loss, given its gradient with respect to
    /// the normalized embeddings.
    pub fn backward(&self, tape: &ForwardTape, grad_embeddings: &Matrix) -> Result<MlpGrads> {
        let e = &tape.embeddings;
        if grad_embeddings.rows() != e.rows() || grad_embeddings.cols() != e.cols() {
            return Err(Error::contract(format!(
                "embedding gradient is {}x{}, forward output was {}x{}",
                grad_embeddings.rows(),
                grad_embeddings.cols(),
                e.rows(),
                e.cols()
            )));
        }
        // Through e = z / max(|z|, eps).
        let mut delta = Matrix::zeros(e.rows(), e.cols());
        for i in 0..e.rows() {
            let g = grad_embeddings.row(i);
            let n = tape.norms[i];
            let out = delta.row_mut(i);
            if n > NORM_EPS {
                let eg = dot(e.row(i), g);
                for ((d, gj), ej) in out.iter_mut().zip(g).zip(e.row(i)) {
                    *d = (gj - ej * eg) / n;
                }
            } else {
                for (d, gj) in out.iter_mut().zip(g) {
                    *d = gj / NORM_EPS;
                }
            }
        }

        let mut grads = self.zeros_like();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &tape.inputs[k];
            let g = &mut grads.layers[k];
            for i in 0..input.rows() {
                let d = delta.row(i);
                let x = input.row(i);
                for (o, &dz) in d.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    g.bias[o] += dz;
                    for (w, xi) in g.weights.row_mut(o).iter_mut().zip(x) {
                        *w += dz * xi;
                    }
                }
            }
            if k == 0 {
                break;
            }
            // Into the previous layer's pre-activation through ReLU.
            let prev_pre = &tape.pre[k - 1];
            let mut next = Matrix::zeros(input.rows(), layer.fan_in());
            for i in 0..input.rows() {
                let d = delta.row(i);
                let out = next.row_mut(i);
                for (o, &dz) in d.iter().enumerate() {
                    if dz != 0.0 {
                        for (acc, w) in out.iter_mut().zip(layer.weights.row(o)) {
                            *acc += dz * w;
                        }
                    }
                }
                for (acc, z) in out.iter_mut().zip(prev_pre.row(i)) {
                    if *z <= 0.0 {
                        *acc = 0.0;
                    }
                }
            }
            delta = next;
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use rand::Rng;
    use proptest::prelude::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = MlpParams::init(&[2, 8, 4], 7).unwrap();
        let b = MlpParams::init(&[2, 8, 4], 7).unwrap();
        let c = MlpParams::init(&[2, 8, 4], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].weights, c.layers[0].weights);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(a.layers[0].weights.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(MlpParams::init(&[2], 1), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[], 1), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[2, 0, 3], 1), Err(Error::Config(_))));
    }

    #[test]
    fn identity_layer_normalizes() {
        let p = MlpParams::from_layers(vec![Dense { weights: Matrix::identity(2), bias: vec![0.0; 2] }])
            .unwrap();
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let (e, tape) = p.forward(&x).unwrap();
        assert_eq!(tape.features().row(0), &[3.0, 4.0]);
        assert!((e[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((e[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_feature_does_not_nan() {
        let p = MlpParams::from_layers(vec![Dense::zeros(2, 3)]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let (e, tape) = p.forward(&x).unwrap();
        assert!(e.as_slice().iter().all(|v| *v == 0.0));
        let g = p.backward(&tape, &Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let p = MlpParams::init(&[2, 4, 3], 1).unwrap();
        let (_, tape) = p.forward(&random_batch(5, 2, 1)).unwrap();
        assert!(matches!(p.backward(&tape, &Matrix::zeros(5, 2)), Err(Error::Contract(_))));
        assert!(matches!(p.backward(&tape, &Matrix::zeros(4, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = MlpParams::init(&[2, 4, 3], 1).unwrap();
        assert!(p.forward(&random_batch(2, 3, 0)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = MlpParams::init(&[3, 6, 4], 2).unwrap();
        let (_, tape) = p.forward(&random_batch(4, 3, 3)).unwrap();
        let g = p.backward(&tape, &Matrix::zeros(4, 4)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = MlpParams::init(&[3, 6, 4], 2).unwrap();
        let (_, tape) = p.forward(&random_batch(4, 3, 3)).unwrap();
        let up = random_batch(4, 4, 9);
        let mut up3 = up.clone();
        up3.scale(-2.5);
        let g1 = p.backward(&tape, &up).unwrap();
        let g3 = p.backward(&tape, &up3).unwrap();
        for (a, b) in g1.tensors().iter().zip(g3.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x * -2.5 - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    /// Central differences of `loss(forward(params))` over every parameter.
    fn numeric_param_grad(
        p: &MlpParams,
        batch: &Matrix,
        loss: &dyn Fn(&Matrix) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let mut out = Vec::new();
        let mut q = p.clone();
        let n_tensors = q.tensors().len();
        for t in 0..n_tensors {
            let len = q.tensors()[t].len();
            for i in 0..len {
                let orig = q.tensors()[t][i];
                q.tensors_mut()[t][i] = orig + h;
                let lp = loss(&q.embed(batch).unwrap());
                q.tensors_mut()[t][i] = orig - h;
                let lm = loss(&q.embed(batch).unwrap());
                q.tensors_mut()[t][i] = orig;
                out.push((lp - lm) / (2.0 * h));
            }
        }
        out
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm(&diff) / norm(a).max(norm(b)).max(1e-12)
    }

    fn has_relu_kink(p: &MlpParams, batch: &Matrix) -> bool {
        let (_, tape) = p.forward(batch).unwrap();
        let hidden = &tape.pre_activations()[..tape.pre_activations().len() - 1];
        hidden.iter().any(|m| m.as_slice().iter().any(|z| z.abs() < 1e-4))
    }

    fn check_gradients(seed: u64, loss_weights: &Matrix, quadratic: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = seed;
        loop {
            let d_in = rng.gen_range(1..=6);
            let hidden = rng.gen_range(1..=10);
            let n = loss_weights.cols();
            let b = loss_weights.rows();
            let mut p = MlpParams::init(&[d_in, hidden, n], s).unwrap();
            for l in &mut p.layers {
                for x in &mut l.bias {
                    *x = rng.gen_range(-0.5..0.5);
                }
            }
            let batch = random_batch(b, d_in, s ^ 0xabc);
            s += 1000;
            if has_relu_kink(&p, &batch) {
                continue;
            }
            let loss = |e: &Matrix| -> f64 {
                e.as_slice()
                    .iter()
                    .zip(loss_weights.as_slice())
                    .map(|(x, w)| if quadratic { w * x * x } else { w * x })
                    .sum()
            };
            let (e, tape) = p.forward(&batch).unwrap();
            let mut upstream = loss_weights.clone();
            if quadratic {
                for (u, x) in upstream.as_mut_slice().iter_mut().zip(e.as_slice()) {
                    *u *= 2.0 * x;
                }
            }
            let analytic = p.backward(&tape, &upstream).unwrap();
            let flat: Vec<f64> = analytic.tensors().concat();
            let numeric = numeric_param_grad(&p, &batch, &loss, 1e-6);
            return relative_error(&flat, &numeric);
        }
    }

    #[test]
    fn sum_of_embeddings_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let ones = Matrix::from_vec(3, 4, vec![1.0; 12]).unwrap();
            let err = check_gradients(seed, &ones, false);
            assert!(err < 1e-6, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn smooth_scalar_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let w = random_batch(4, 5, 100 + seed);
            let err = check_gradients(seed, &w, seed % 2 == 0);
            assert!(err < 1e-6, "seed {seed}: relative error {err}");
        }
    }

    /// Full Jacobian of the embeddings w.r.t. the inputs, via the first layer.
    #[test]
    fn input_jacobian_matches_finite_differences() {
        for seed in 0..5u64 {
            let p = MlpParams::init(&[3, 7, 4], seed).unwrap();
            let x = random_batch(1, 3, seed + 50);
            if has_relu_kink(&p, &x) {
                continue;
            }
            // Treat the input as a bias shift: d e / d x = (d e / d b0) * W0.
            for out in 0..4 {
                let mut up = Matrix::zeros(1, 4);
                up[(0, out)] = 1.0;
                let (_, tape) = p.forward(&x).unwrap();
                let g = p.backward(&tape, &up).unwrap();
                let db0 = &g.layers[0].bias;
                for j in 0..3 {
                    let analytic: f64 =
                        (0..7).map(|o| db0[o] * p.layers[0].weights[(o, j)]).sum();
                    let h = 1e-6;
                    let mut xp = x.clone();
                    xp[(0, j)] += h;
                    let mut xm = x.clone();
                    xm[(0, j)] -= h;
                    let num = (p.embed(&xp).unwrap()[(0, out)] - p.embed(&xm).unwrap()[(0, out)])
                        / (2.0 * h);
                    assert!(
                        (analytic - num).abs() <= 1e-6 * analytic.abs().max(num.abs()).max(1e-3),
                        "seed {seed} out {out} in {j}: {analytic} vs {num}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn embeddings_are_unit_norm(seed in 0u64..1000, rows in 1usize..8) {
            let p = MlpParams::init(&[2, 8, 4], seed).unwrap();
            let x = random_batch(rows, 2, seed + 1);
            let (e, tape) = p.forward(&x).unwrap();
            for (r, n) in e.iter_rows().zip(tape.feature_norms()) {
                // all-dead ReLU layers give the zero feature, which maps to zero
                if *n > NORM_EPS {
                    prop_assert!((norm(r) - 1.0).abs() < 1e-9);
                }
            }
            prop_assert_eq!(e, p.embed(&x).unwrap());
        }
    }
}
