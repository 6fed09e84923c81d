//! A rectifier MLP with a cosine-normalized, bias-free output layer, and the
//! SGD-with-momentum update used to train it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Added to every vector norm in the cosine head.
pub const NORM_EPS: f64 = 1e-12;

/// Fully connected rectifier layer; `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Network parameters. The same type doubles as the gradient and momentum
/// buffer container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub hidden: Vec<Dense>,
    /// Cosine head, row-major `K × d`; no bias.
    pub head: Vec<f64>,
    pub num_classes: usize,
    pub scale: f64,
}

/// Activations kept by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of
    /// hidden layer `l`; the last entry feeds the cosine head.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl Cache {
    pub fn features(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `z_j = s · ⟨W_j/‖W_j‖, h/‖h‖⟩`, with [`NORM_EPS`] added to each norm.
pub fn normalized_logits(hidden: &[f64], weights: &[f64], scale: f64) -> Result<Vec<f64>> {
    let d = hidden.len();
    if d == 0 || !weights.len().is_multiple_of(d) {
        return invalid(format!(
            "head weights of length {} do not tile feature dimension {d}",
            weights.len()
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return invalid(format!("logit scale must be > 0, got {scale}"));
    }
    let h_norm = norm(hidden) + NORM_EPS;
    Ok(weights
        .chunks(d)
        .map(|w| scale * dot(w, hidden) / ((norm(w) + NORM_EPS) * h_norm))
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Network {
    /// He-normal hidden layers with zero bias and a standard-normal head.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_widths: &[usize],
        num_classes: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_widths.contains(&0) {
            return invalid("network dimensions must be positive");
        }
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        let mut fan_in = input_dim;
        for &width in hidden_widths {
            let mut layer = Dense::zeros(fan_in, width);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = normal.sample(rng));
            hidden.push(layer);
            fan_in = width;
        }
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let head = (0..num_classes * fan_in)
            .map(|_| normal.sample(rng))
            .collect();
        Ok(Self {
            hidden,
            head,
            num_classes,
            scale,
        })
    }

    /// A network with no hidden layers and the given head.
    pub fn linear(head: Vec<f64>, num_classes: usize, scale: f64) -> Result<Self> {
        if num_classes == 0 || head.is_empty() || !head.len().is_multiple_of(num_classes) {
            return invalid("head size must be a positive multiple of the class count");
        }
        Ok(Self {
            hidden: Vec::new(),
            head,
            num_classes,
            scale,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map(|l| l.inputs)
            .unwrap_or(self.feature_dim())
    }

    pub fn feature_dim(&self) -> usize {
        self.head.len() / self.num_classes
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self
                .hidden
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            head: vec![0.0; self.head.len()],
            num_classes: self.num_classes,
            scale: self.scale,
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.hidden.len() + 1);
        for layer in &self.hidden {
            out.push(&layer.weights);
            out.push(&layer.bias);
        }
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.hidden.len() + 1);
        for layer in &mut self.hidden {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Cache)> {
        if x.len() != self.input_dim() {
            return invalid(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            ));
        }
        let mut activations = vec![x.to_vec()];
        let mut pre_activations = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let input = activations.last().expect("input activation");
            let pre: Vec<f64> = layer
                .weights
                .chunks(layer.inputs)
                .zip(&layer.bias)
                .map(|(row, b)| dot(row, input) + b)
                .collect();
            activations.push(pre.iter().map(|&v| v.max(0.0)).collect());
            pre_activations.push(pre);
        }
        let logits = normalized_logits(
            activations.last().expect("feature activation"),
            &self.head,
            self.scale,
        )?;
        Ok((
            logits,
            Cache {
                activations,
                pre_activations,
            },
        ))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let (z, _) = self.forward(x)?;
        Ok(argmax(&z))
    }

    /// Parameter gradients of a scalar loss with `∂L/∂z = grad_logits`.
    pub fn backward(&self, cache: &Cache, grad_logits: &[f64]) -> Result<Network> {
        let mut grads = self.zeros_like();
        self.accumulate_backward(cache, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients for one example into `grads`.
    pub fn accumulate_backward(
        &self,
        cache: &Cache,
        grad_logits: &[f64],
        grads: &mut Network,
    ) -> Result<()> {
        if grad_logits.len() != self.num_classes {
            return invalid(format!(
                "{} logit gradients for {} classes",
                grad_logits.len(),
                self.num_classes
            ));
        }
        if cache.activations.len() != self.hidden.len() + 1 {
            return invalid("activation cache does not match this network");
        }
        let h = cache.features();
        let d = h.len();
        let s = self.scale;
        let h_raw = norm(h);
        let h_norm = h_raw + NORM_EPS;

        // Cosine head, quotient rule on both norms.
        let mut grad_h = vec![0.0; d];
        for (j, &g) in grad_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = &self.head[j * d..(j + 1) * d];
            let w_raw = norm(w);
            let w_norm = w_raw + NORM_EPS;
            let c = dot(w, h);
            let base = s / (h_norm * w_norm);
            let h_coef = if h_raw > 0.0 {
                s * c / (h_norm * h_norm * w_norm * h_raw)
            } else {
                0.0
            };
            let w_coef = if w_raw > 0.0 {
                s * c / (h_norm * w_norm * w_norm * w_raw)
            } else {
                0.0
            };
            let gw = &mut grads.head[j * d..(j + 1) * d];
            for i in 0..d {
                grad_h[i] += g * (base * w[i] - h_coef * h[i]);
                gw[i] += g * (base * h[i] - w_coef * w[i]);
            }
        }

        let mut upstream = grad_h;
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let pre = &cache.pre_activations[l];
            let input = &cache.activations[l];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(pre)
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
            let gl = &mut grads.hidden[l];
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gl.bias[o] += dv;
                let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += dv * a;
                }
            }
            if l > 0 {
                let mut next = vec![0.0; layer.inputs];
                for (o, &dv) in delta.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += dv * w;
                    }
                }
                upstream = next;
            }
        }
        Ok(())
    }

    /// `self += factor · other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Network, factor: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Network,
}

impl OptimizerState {
    pub fn new(params: &Network, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }
}

/// `v ← μv + (g + λθ)`, `θ ← θ − lr·v`.
///
/// Rejects the step without touching any state if a gradient is not finite.
pub fn sgd_update(
    params: &mut Network,
    grads: &Network,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return invalid(format!("learning rate must be >= 0, got {lr}"));
    }
    if grads.num_params() != params.num_params()
        || state.velocity.num_params() != params.num_params()
    {
        return invalid("gradient or momentum shapes do not match the parameters");
    }
    if !grads.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite gradient, update rejected".to_string(),
        ));
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((theta, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.velocity.tensors_mut())
    {
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + (gi + wd * *t);
            *t -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::reference_normalized_logits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aligned_and_orthogonal() {
        let w = [0.3, -1.2, 2.0, 0.0, 0.0, 5.0];
        let h = [0.3, -1.2, 2.0];
        let z = normalized_logits(&h, &w, 10.0).unwrap();
        assert!((z[0] - 10.0).abs() < 1e-10);
        let h2 = [0.0, 0.0, 0.0];
        assert_eq!(normalized_logits(&h2, &w, 10.0).unwrap(), vec![0.0, 0.0]);
        let z = normalized_logits(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 10.0).unwrap();
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn cosine_matches_compensated_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let d = rng.random_range(1..20);
            let k = rng.random_range(2..8);
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..d * k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = normalized_logits(&h, &w, 10.0).unwrap();
            let r = reference_normalized_logits(&h, &w, 10.0);
            for (a, b) in z.iter().zip(&r) {
                assert!(a.abs() <= 10.0 + 1e-12);
                // relative to the logit scale
                assert!((a - b).abs() <= 1e-12 * 10.0, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_network_examples() {
        let net = Network::linear(vec![1.0], 1, 10.0).unwrap();
        let (z, _) = net.forward(&[1.0]).unwrap();
        assert!((z[0] - 10.0).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::init(4, &[8], 3, 10.0, &mut rng).unwrap();
        net.hidden[0].weights.iter_mut().for_each(|w| *w = 0.0);
        let (z, _) = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(5, &[6, 4], 3, 10.0, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, -0.2, 0.3, 0.4, -0.5]).unwrap();
        let g = net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_example_doubles_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::init(3, &[5], 2, 10.0, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.5, -1.0, 2.0]).unwrap();
        let once = net.backward(&cache, &[0.3, -0.3]).unwrap();
        let mut twice = net.zeros_like();
        net.accumulate_backward(&cache, &[0.3, -0.3], &mut twice)
            .unwrap();
        net.accumulate_backward(&cache, &[0.3, -0.3], &mut twice)
            .unwrap();
        for (a, b) in once.to_flat().iter().zip(twice.to_flat()) {
            assert_eq!(2.0 * a, b);
        }
    }

    fn scalar_net(theta: f64) -> Network {
        Network::linear(vec![theta], 1, 1.0).unwrap()
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = scalar_net(1.0);
        let g = scalar_net(0.5);
        let mut st = OptimizerState::new(&p, 0.0, 0.0);
        sgd_update(&mut p, &g, &mut st, 0.1).unwrap();
        assert!((p.head[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_still_accumulates_momentum() {
        let mut p = scalar_net(1.0);
        let g = scalar_net(2.0);
        let mut st = OptimizerState::new(&p, 0.9, 0.0);
        sgd_update(&mut p, &g, &mut st, 0.0).unwrap();
        sgd_update(&mut p, &g, &mut st, 0.0).unwrap();
        assert_eq!(p.head[0], 1.0);
        assert!((st.velocity.head[0] - 3.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_matches_simulation() {
        // brute-force simulation of the recurrence
        let (mut theta, mut v) = (0.0f64, 0.0f64);
        for _ in 0..2 {
            v = 0.9 * v + 1.0;
            theta -= 0.1 * v;
        }
        assert!((theta + 0.29).abs() < 1e-15);

        let mut p = scalar_net(0.0);
        let g = scalar_net(1.0);
        let mut st = OptimizerState::new(&p, 0.9, 0.0);
        sgd_update(&mut p, &g, &mut st, 0.1).unwrap();
        sgd_update(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p.head[0], theta);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar_net(1.0);
        let g = scalar_net(f64::NAN);
        let mut st = OptimizerState::new(&p, 0.9, 0.0);
        assert!(sgd_update(&mut p, &g, &mut st, 0.1).is_err());
        assert_eq!(p.head[0], 1.0);
        assert_eq!(st.velocity.head[0], 0.0);
    }
}
