//! Small fully connected regression model and a seeded synthetic task for
//! end-to-end training runs.
//!
//! Parameters are one flat fp32 vector; layer `l` stores its weight matrix
//! (row-major, `out x in`) followed by its bias. Each layer is one block of
//! the flattened parameter order.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config("model needs at least an input and an output layer of non-zero width".into()));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Element count of each layer block.
    pub fn blocks(&self) -> Vec<u64> {
        self.dims.windows(2).map(|w| (w[1] * (w[0] + 1)) as u64).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().sum::<u64>() as usize
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights, zero biases.
    pub fn init(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::with_capacity(self.param_count());
        for w in self.dims.windows(2) {
            let bound = 1.0 / libm::sqrtf(w[0] as f32);
            p.extend((0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)));
            p.extend(core::iter::repeat_n(0.0f32, w[1]));
        }
        p
    }

    /// Activations per layer (input first); hidden layers use tanh, the last is linear.
    fn forward_all(&self, params: &[f32], x: &[f32], batch: usize) -> Vec<Vec<f32>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_out * (fan_in + 1);
            let input = acts.last().unwrap();
            let mut out = vec![0.0f32; batch * fan_out];
            for s in 0..batch {
                let xi = &input[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let mut acc = b[o];
                    for (a, c) in row.iter().zip(xi) {
                        acc += a * c;
                    }
                    out[s * fan_out + o] = if l + 1 < layers { libm::tanhf(acc) } else { acc };
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn predict(&self, params: &[f32], x: &[f32], batch: usize) -> Vec<f32> {
        self.forward_all(params, x, batch).pop().unwrap()
    }

    /// Mean squared error over batch and outputs.
    pub fn loss(&self, params: &[f32], x: &[f32], target: &[f32], batch: usize) -> f32 {
        let y = self.predict(params, x, batch);
        mse(&y, target)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, params: &[f32], x: &[f32], target: &[f32], batch: usize) -> (f32, Vec<f32>) {
        assert_eq!(params.len(), self.param_count());
        assert_eq!(x.len(), batch * self.input_dim());
        assert_eq!(target.len(), batch * self.output_dim());
        let acts = self.forward_all(params, x, batch);
        let y = acts.last().unwrap();
        let loss = mse(y, target);
        let scale = 2.0 / y.len() as f32;
        let mut delta: Vec<f32> = y.iter().zip(target).map(|(a, t)| scale * (a - t)).collect();

        let mut grad = vec![0.0f32; params.len()];
        let layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.dims.windows(2) {
            offsets.push(off);
            off += w[1] * (w[0] + 1);
        }
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let base = offsets[l];
            let input = &acts[l];
            {
                let (gw, gb) = grad[base..base + fan_out * (fan_in + 1)].split_at_mut(fan_in * fan_out);
                for s in 0..batch {
                    let xi = &input[s * fan_in..(s + 1) * fan_in];
                    for o in 0..fan_out {
                        let d = delta[s * fan_out + o];
                        gb[o] += d;
                        for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xi) {
                            *g += d * a;
                        }
                    }
                }
            }
            if l > 0 {
                let w = &params[base..base + fan_in * fan_out];
                let mut prev = vec![0.0f32; batch * fan_in];
                for s in 0..batch {
                    for o in 0..fan_out {
                        let d = delta[s * fan_out + o];
                        for (p, a) in prev[s * fan_in..(s + 1) * fan_in].iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *p += d * a;
                        }
                    }
                    // tanh' = 1 - tanh^2, using the stored activation
                    for (p, h) in prev[s * fan_in..(s + 1) * fan_in].iter_mut().zip(&input[s * fan_in..(s + 1) * fan_in]) {
                        *p *= 1.0 - h * h;
                    }
                }
                delta = prev;
            }
        }
        (loss, grad)
    }
}

fn mse(y: &[f32], t: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (a, b) in y.iter().zip(t) {
        let d = a - b;
        acc += d * d;
    }
    acc / y.len() as f32
}

/// Teacher-student regression: targets come from a fixed random network of
/// the same shape plus uniform label noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub model: Mlp,
    teacher: Vec<f32>,
    pub batch: usize,
    pub noise: f32,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(model: Mlp, batch: usize, noise: f32, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut teacher = model.init(seed ^ 0x0074_6561_6368_6572);
        // Larger teacher weights give the student a non-trivial target.
        teacher.iter_mut().for_each(|w| *w *= 2.0);
        Ok(Self { model, teacher, batch, noise, seed })
    }

    /// Inputs and targets for a step; identical for identical `(seed, step)`.
    pub fn batch(&self, step: u64) -> (Vec<f32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step);
        let x: Vec<f32> = (0..self.batch * self.model.input_dim()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut t = self.model.predict(&self.teacher, &x, self.batch);
        if self.noise > 0.0 {
            t.iter_mut().for_each(|v| *v += rng.gen_range(-self.noise..self.noise));
        }
        (x, t)
    }

    /// Loss on a fixed held-out batch.
    pub fn eval_loss(&self, params: &[f32]) -> f32 {
        let (x, t) = self.batch(u64::MAX);
        self.model.loss(params, &x, &t, self.batch)
    }
}
