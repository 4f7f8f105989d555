use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// A named collection of trainable tensors with matching gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    name: String,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    grads: Vec<Tensor>,
    frozen: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            names: Vec::new(),
            tensors: Vec::new(),
            grads: Vec::new(),
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.grads.push(Tensor::zeros(tensor.shape()));
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| dim_err(format!("group `{}` has no tensor `{name}`", self.name)))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| dim_err(format!("group `{}` has no tensor `{name}`", self.name)))?;
        if value.shape() != self.tensors[i].shape() {
            return Err(dim_err(format!(
                "`{}.{name}` has shape {:?}, got {:?}",
                self.name,
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Mutable access to raw values; used by finite-difference checks.
    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        self.tensors[index].data_mut()
    }

    /// Adds the gradients recorded for this group. Frozen groups ignore the call.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        for (index, g) in grads.for_group(&self.name) {
            self.grads[index].add_assign(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Bitwise fingerprint of all values, for freeze checks.
    pub fn bit_snapshot(&self) -> Vec<u64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(group: &ParamGroup, config: AdamConfig) -> Self {
        let zeros = || group.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; clears the group's gradients afterwards.
    ///
    /// Stepping a frozen group is a logged no-op.
    pub fn step(&mut self, group: &mut ParamGroup) -> Result<()> {
        if group.frozen {
            log::warn!("adam step on frozen group `{}` ignored", group.name);
            return Ok(());
        }
        if self.first.len() != group.len() {
            return Err(Error::Contract(format!(
                "optimizer state has {} slots, group `{}` has {}",
                self.first.len(),
                group.name,
                group.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..group.len() {
            let g = group.grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = group.tensors[i].data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        group.zero_grad();
        Ok(())
    }
}

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
///
/// For a matrix `[rows, cols]` fan_in is `rows` and fan_out is `cols`; a vector
/// uses its length for both.
pub fn glorot_init(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    glorot_with(shape, &mut rng)
}

pub(crate) fn glorot_with(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [r, c] => (*r, *c),
        other => {
            let c = other[other.len() - 1];
            (other.iter().product::<usize>() / c, c)
        }
    };
    let bound = glorot_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group_with(values: Vec<f64>) -> ParamGroup {
        let mut g = ParamGroup::new("g");
        g.push("w", Tensor::vector(values));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut g = group_with(vec![0.3, -0.7]);
        let before = g.bit_snapshot();
        let mut adam = AdamState::new(&g, AdamConfig::default());
        adam.step(&mut g).unwrap();
        assert_eq!(g.bit_snapshot(), before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let mut g = group_with(vec![0.5, -1.5]);
        g.grads[0] = Tensor::vector(vec![0.2, -3.0]);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(&g, cfg);
        adam.step(&mut g).unwrap();
        // First step: m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        let expect = [
            0.5 - 1e-3 * 0.2 / (0.2 + 1e-8),
            -1.5 - 1e-3 * -3.0 / (3.0 + 1e-8),
        ];
        for (a, b) in g.tensors()[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(g.grads()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_step_matches_hand_formula() {
        let mut g = group_with(vec![1.0, 2.0]);
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut adam = AdamState::new(&g, cfg);
        let g1 = [0.4, -0.1];
        let g2 = [-0.2, 0.3];
        g.grads[0] = Tensor::vector(g1.to_vec());
        adam.step(&mut g).unwrap();
        g.grads[0] = Tensor::vector(g2.to_vec());
        adam.step(&mut g).unwrap();
        for j in 0..2 {
            let mut p = [1.0, 2.0][j];
            let (mut m, mut v) = (0.0, 0.0);
            for (t, gr) in [g1[j], g2[j]].into_iter().enumerate() {
                m = 0.9 * m + 0.1 * gr;
                v = 0.999 * v + 0.001 * gr * gr;
                let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
                p -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((g.tensors()[0].data()[j] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut g = group_with(vec![0.0, 0.0]);
        let mut adam = AdamState::new(&g, AdamConfig::default());
        let mut prev = g.tensors()[0].data().to_vec();
        for _ in 0..50 {
            g.grads[0] = Tensor::vector(vec![0.7, -0.01]);
            adam.step(&mut g).unwrap();
            let now = g.tensors()[0].data().to_vec();
            assert!(now[0] < prev[0]);
            assert!(now[1] > prev[1]);
            prev = now;
        }
    }

    #[test]
    fn frozen_group_step_is_noop() {
        let mut g = group_with(vec![1.0, 2.0]);
        g.grads[0] = Tensor::vector(vec![1.0, 1.0]);
        g.freeze();
        let before = g.bit_snapshot();
        let mut adam = AdamState::new(&g, AdamConfig::default());
        adam.step(&mut g).unwrap();
        assert_eq!(g.bit_snapshot(), before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn glorot_is_deterministic_and_bounded() {
        let a = glorot_init(&[40, 30], 7);
        let b = glorot_init(&[40, 30], 7);
        assert_eq!(a, b);
        let bound = glorot_bound(40, 30);
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        assert_ne!(a, glorot_init(&[40, 30], 8));
    }

    #[test]
    fn glorot_mean_is_centred() {
        let t = glorot_init(&[100_000], 11);
        let bound = glorot_bound(100_000, 100_000);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        // Uniform(-b, b) has variance b²/3.
        let sigma = bound / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} vs 3σ {}", 3.0 * sigma);
    }
}
