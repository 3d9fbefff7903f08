//! Multilayer perceptron scores, the supervised potential and Adam.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("input has {got} columns, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient entry at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    /// One activation per hidden layer; the output layer is linear.
    pub activations: Vec<Activation>,
    pub layers: Vec<Layer>,
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `outputs[0]` is the input batch; `outputs[l + 1]` is layer `l`'s output.
    pub outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn scores(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds the input")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self, NetError> {
        let mut mlp = Mlp::zeros(dims, activation)?;
        for layer in &mut mlp.layers {
            let (fan_in, fan_out) = layer.weights.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weights.mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        Ok(mlp)
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self, NetError> {
        if dims.len() < 2 {
            return Err(NetError::TooFewLayers);
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            activations: vec![activation; dims.len() - 2],
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two layers")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        let mut cache = self.forward_cache(x)?;
        Ok(cache.outputs.pop().expect("cache holds the input"))
    }

    pub fn forward_cache(&self, x: ArrayView2<f64>) -> Result<ForwardCache, NetError> {
        if x.ncols() != self.input_dim() {
            return Err(NetError::InputDim {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = outputs[l].dot(&layer.weights);
            z += &layer.bias;
            if let Some(act) = self.activations.get(l) {
                z.mapv_inplace(|v| act.apply(v));
            }
            outputs.push(z);
        }
        Ok(ForwardCache { outputs })
    }

    /// Gradient of a loss with respect to all parameters, given the loss
    /// gradient `d_scores` with respect to the output scores. Parameters
    /// are flattened layer by layer, weights (row-major) then bias.
    pub fn backward(&self, cache: &ForwardCache, d_scores: &Array2<f64>) -> Result<Vec<f64>, NetError> {
        if d_scores.dim() != cache.scores().dim() {
            return Err(NetError::Shape(format!(
                "score gradient {:?} vs scores {:?}",
                d_scores.dim(),
                cache.scores().dim()
            )));
        }
        let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = d_scores.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.outputs[l];
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.layers[l].weights.t());
                let act = self.activations[l - 1];
                prev.zip_mut_with(input, |d, &a| *d *= act.derivative(a));
                delta = prev;
            }
            per_layer.push((dw, db));
        }
        per_layer.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (dw, db) in per_layer {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        Ok(flat)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            flat.extend(l.weights.iter());
            flat.extend(l.bias.iter());
        }
        flat
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.n_params() {
            return Err(NetError::Shape(format!(
                "{} parameters for a network with {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// Exactly one true class per pattern (softmax).
    #[default]
    OneLabel,
    /// Independent classes (sigmoid).
    MultiLabel,
}

/// Softmax, stabilised by subtracting the maximum score.
pub fn prob_one_label(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn prob_multi_label(f: &[f64]) -> Vec<f64> {
    f.iter().map(|&v| sigmoid(v)).collect()
}

pub fn log_sum_exp(f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Supervised potential value; assignments excluded by the one-label
/// constraint are flagged rather than given an infinite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phi0 {
    Finite(f64),
    Excluded,
}

impl Phi0 {
    pub fn value(self) -> Option<f64> {
        match self {
            Phi0::Finite(v) => Some(v),
            Phi0::Excluded => None,
        }
    }
}

pub fn phi0(y: &[bool], f: &[f64], mode: SupervisionMode) -> Phi0 {
    if mode == SupervisionMode::OneLabel && y.iter().filter(|&&b| b).count() >= 2 {
        return Phi0::Excluded;
    }
    Phi0::Finite(y.iter().zip(f).filter(|(&b, _)| b).map(|(_, &v)| v).sum())
}

/// Row-wise model expectation of y under p₀: softmax or sigmoid of the scores.
pub fn expected_y(scores: &Array2<f64>, mode: SupervisionMode) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let p = match mode {
            SupervisionMode::OneLabel => prob_one_label(row.as_slice().expect("standard layout")),
            SupervisionMode::MultiLabel => prob_multi_label(row.as_slice().expect("standard layout")),
        };
        row.assign(&Array1::from(p));
    }
    out
}

/// −Σ log p₀(y|f) over the rows of a batch.
pub fn neg_log_p0(scores: &Array2<f64>, targets: &Array2<f64>, mode: SupervisionMode) -> f64 {
    let mut total = 0.0;
    for (f, y) in scores.rows().into_iter().zip(targets.rows()) {
        match mode {
            SupervisionMode::OneLabel => {
                let f = f.as_slice().expect("standard layout");
                total += log_sum_exp(f) - f.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            }
            SupervisionMode::MultiLabel => {
                for (&fi, &yi) in f.iter().zip(y) {
                    total += softplus(fi) - yi * fi;
                }
            }
        }
    }
    total
}

/// Gradient of log p₀ with respect to the weights:
/// Σ_i (∂f_i/∂w)(y_i − E[y_i]). Ascent direction.
pub fn grad_w_supervised(
    mlp: &Mlp,
    x: ArrayView2<f64>,
    targets: &Array2<f64>,
    expected: &Array2<f64>,
) -> Result<Vec<f64>, NetError> {
    if targets.dim() != expected.dim() || targets.nrows() != x.nrows() {
        return Err(NetError::Shape(format!(
            "targets {:?}, expectation {:?}, batch of {}",
            targets.dim(),
            expected.dim(),
            x.nrows()
        )));
    }
    let cache = mlp.forward_cache(x)?;
    mlp.backward(&cache, &(targets - expected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One descent step on `params` for the loss gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NetError> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NetError::Shape(format!(
                "adam state of {} for {} parameters / {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient(i));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Descent step applied to a network's parameters.
    pub fn step_mlp(&mut self, mlp: &mut Mlp, grad: &[f64]) -> Result<(), NetError> {
        let mut p = mlp.params();
        self.step(&mut p, grad)?;
        mlp.set_params(&p)
    }
}

/// Selects rows of a matrix.
pub fn select_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.slice_mut(s![k, ..]).assign(&m.row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut mlp = Mlp::zeros(&[3, 4, 2], Activation::Sigmoid).unwrap();
        mlp.layers[1].bias = array![0.5, -1.0];
        let f = mlp.forward(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(f, array![[0.5, -1.0], [0.5, -1.0]]);
    }

    #[test]
    fn identity_single_layer() {
        let mut mlp = Mlp::zeros(&[2, 2], Activation::Relu).unwrap();
        mlp.layers[0].weights = Array2::eye(2);
        let x = array![[0.3, -0.7]];
        assert_eq!(mlp.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[4, 5, 3], Activation::Sigmoid, &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64 / 10.0);
        assert_eq!(mlp.forward(x.view()).unwrap(), mlp.forward(x.view()).unwrap());
        assert_eq!(mlp.forward(x.view()).unwrap().dim(), (6, 3));
        assert_eq!(
            mlp.forward(Array2::zeros((1, 3)).view()),
            Err(NetError::InputDim { expected: 4, got: 3 })
        );
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[10, 20], Activation::Sigmoid, &mut rng).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(mlp.layers[0].weights.iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn softmax_values() {
        assert_eq!(prob_one_label(&[0.0, 0.0, 0.0]), vec![1.0 / 3.0; 3]);
        let p = prob_one_label(&[1.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.7310585786300049, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.2689414213699951, epsilon = 1e-15);
        let shifted = prob_one_label(&[101.0, 100.0]);
        assert_abs_diff_eq!(shifted[0], p[0], epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(prob_multi_label(&[0.0]), vec![0.5]);
        assert_abs_diff_eq!(prob_multi_label(&[50.0])[0], 1.0, epsilon = 1e-12);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn phi0_cases() {
        let f = [0.3, 1.5, -2.0];
        assert_eq!(
            phi0(&[false, true, false], &f, SupervisionMode::OneLabel),
            Phi0::Finite(1.5)
        );
        assert_eq!(
            phi0(&[true, true, false], &f, SupervisionMode::OneLabel),
            Phi0::Excluded
        );
        assert_eq!(phi0(&[false; 3], &f, SupervisionMode::MultiLabel), Phi0::Finite(0.0));
    }

    #[test]
    fn gradient_vanishes_at_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Sigmoid, &mut rng).unwrap();
        let x = array![[0.1, 0.2, 0.3]];
        let y = array![[0.25, 0.75]];
        let g = grad_w_supervised(&mlp, x.view(), &y, &y).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_behaviour() {
        let mut st = AdamState::new(1, AdamConfig::default());
        let mut p = [1.0];
        st.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p[0], 1.0);

        let mut st = AdamState::new(1, AdamConfig::default());
        let mut p = [0.0];
        for _ in 0..100 {
            let before = p[0];
            st.step(&mut p, &[2.5]).unwrap();
            assert_abs_diff_eq!(before - p[0], 1e-3, epsilon = 1e-9);
        }

        let mut st = AdamState::new(
            1,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        let mut w = [3.0];
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let g = 2.0 * w[0];
            st.step(&mut w, &[g]).unwrap();
            assert!(w[0].abs() < prev);
            prev = w[0].abs();
        }
        assert_eq!(st.step(&mut w, &[f64::NAN]), Err(NetError::NonFiniteGradient(0)));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mlp = Mlp::new(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let p = mlp.params();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        let copy = mlp.clone();
        mlp.set_params(&p).unwrap();
        assert_eq!(mlp, copy);
    }
}
