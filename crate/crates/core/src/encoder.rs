//! Prompted features: frozen backbone features pushed through a small
//! trainable residual adapter, `normalize(f + B·tanh(A·f))`.
//!
//! One adapter block serves the image side and one the text side. `A` (the
//! down projection, `rank × dim`) starts from `Normal(0, 0.02²)` and `B` (the
//! up projection, `dim × rank`) starts at zero, so freshly initialized
//! prompted features equal the normalized frozen features exactly.
//!
//! Text features average the `M` template features of a class first and
//! apply the adapter once to that mean.

#![allow(clippy::needless_range_loop)]

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, norm};

pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Incremental,
}

/// One residual adapter `x ↦ x + up·tanh(down·x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBlock {
    pub dim: usize,
    pub rank: usize,
    /// `rank × dim`, row-major.
    pub down: Vec<f64>,
    /// `dim × rank`, row-major.
    pub up: Vec<f64>,
    pub trainable: bool,
}

impl AdapterBlock {
    fn init(dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let down = (0..rank * dim).map(|_| normal.sample(rng)).collect();
        Self {
            dim,
            rank,
            down,
            up: vec![0.0; dim * rank],
            trainable: true,
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dim.hash(&mut h);
        self.rank.hash(&mut h);
        for v in self.down.iter().chain(&self.up) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Runs the block and keeps what the backward pass needs.
    pub fn forward(&self, input: &[f64]) -> Result<AdapterForward> {
        if input.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: input.len(),
            });
        }
        let hidden: Vec<f64> = self
            .down
            .chunks_exact(self.dim)
            .map(|row| linalg::dot(row, input).tanh())
            .collect();
        let raw: Vec<f64> = input
            .iter()
            .zip(self.up.chunks_exact(self.rank))
            .map(|(x, row)| x + linalg::dot(row, &hidden))
            .collect();
        let output = linalg::normalize(&raw)?;
        Ok(AdapterForward {
            input: input.to_vec(),
            hidden,
            raw,
            output,
        })
    }
}

/// Cached activations of one [`AdapterBlock::forward`] call.
#[derive(Clone, Debug)]
pub struct AdapterForward {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub raw: Vec<f64>,
    /// Unit-norm prompted feature.
    pub output: Vec<f64>,
}

impl AdapterForward {
    /// Accumulates into `grad` the parameter gradient for an upstream
    /// gradient on the normalized output.
    pub fn backward(&self, block: &AdapterBlock, upstream: &[f64], grad: &mut BlockGrad) {
        let g_raw = linalg::normalize_vjp(&self.raw, upstream);
        let (dim, rank) = (block.dim, block.rank);
        let mut g_hidden = vec![0.0; rank];
        for i in 0..dim {
            let gi = g_raw[i];
            if gi == 0.0 {
                continue;
            }
            let up_row = &block.up[i * rank..(i + 1) * rank];
            let grad_row = &mut grad.up[i * rank..(i + 1) * rank];
            for k in 0..rank {
                grad_row[k] += gi * self.hidden[k];
                g_hidden[k] += gi * up_row[k];
            }
        }
        for k in 0..rank {
            let g_pre = g_hidden[k] * (1.0 - self.hidden[k] * self.hidden[k]);
            if g_pre == 0.0 {
                continue;
            }
            linalg::axpy(&mut grad.down[k * dim..(k + 1) * dim], g_pre, &self.input);
        }
    }
}

/// Gradient with the same layout as an [`AdapterBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrad {
    pub down: Vec<f64>,
    pub up: Vec<f64>,
}

impl BlockGrad {
    pub fn zeros_like(block: &AdapterBlock) -> Self {
        Self {
            down: vec![0.0; block.down.len()],
            up: vec![0.0; block.up.len()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.down.iter().chain(&self.up)
    }

    pub fn scale(&mut self, s: f64) {
        self.down
            .iter_mut()
            .chain(self.up.iter_mut())
            .for_each(|v| *v *= s);
    }

    pub fn add_scaled(&mut self, other: &BlockGrad, s: f64) {
        linalg::axpy(&mut self.down, s, &other.down);
        linalg::axpy(&mut self.up, s, &other.up);
    }
}

/// Trainable stand-ins for the vision and text prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub vision: AdapterBlock,
    pub text: AdapterBlock,
}

/// Seeded initialization; identical seeds give bit-identical parameters.
pub fn init_params(d_img: usize, d_txt: usize, rank: usize, seed: u64) -> Result<AdapterParams> {
    if d_img == 0 || d_txt == 0 || rank == 0 {
        return Err(Error::InvalidConfig(
            "adapter dims and rank must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vision = AdapterBlock::init(d_img, rank, &mut rng);
    let text = AdapterBlock::init(d_txt, rank, &mut rng);
    Ok(AdapterParams { vision, text })
}

impl AdapterParams {
    /// Base: both blocks train. Incremental: the vision block is frozen.
    pub fn set_phase(&mut self, phase: Phase) {
        self.vision.trainable = phase == Phase::Base;
        self.text.trainable = true;
    }

    pub fn with_phase(mut self, phase: Phase) -> Self {
        self.set_phase(phase);
        self
    }

    pub fn trainable_count(&self) -> usize {
        [&self.vision, &self.text]
            .into_iter()
            .filter(|b| b.trainable)
            .map(AdapterBlock::scalar_count)
            .sum()
    }
}

/// `normalize(f + B_v·tanh(A_v·f))`.
pub fn encode_image(feature: &[f64], params: &AdapterParams) -> Result<Vec<f64>> {
    Ok(params.vision.forward(feature)?.output)
}

/// Mean of the class's template features.
pub fn mean_template<T: AsRef<[f64]>>(templates: &[T]) -> Result<Vec<f64>> {
    let first = templates.first().ok_or(Error::Empty("text templates"))?;
    let dim = first.as_ref().len();
    for t in templates {
        if t.as_ref().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: t.as_ref().len(),
            });
        }
    }
    Ok(linalg::mean_of(templates.iter().map(|t| t.as_ref()), dim).expect("non-empty"))
}

/// `normalize(ḡ + B_t·tanh(A_t·ḡ))` with `ḡ` the template mean.
pub fn encode_text<T: AsRef<[f64]>>(templates: &[T], params: &AdapterParams) -> Result<Vec<f64>> {
    let mean = mean_template(templates)?;
    Ok(params.text.forward(&mean)?.output)
}

/// Unit-normalized frozen feature; the regularization target for a prompted feature.
pub fn frozen_target(feature: &[f64]) -> Result<Vec<f64>> {
    if norm(feature) == 0.0 {
        return Err(Error::ZeroNorm);
    }
    linalg::normalize(feature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randomize(params: &mut AdapterParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in [&mut params.vision, &mut params.text] {
            b.down
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
            b.up.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_up_projection() {
        let a = init_params(8, 6, 4, 42).unwrap();
        let b = init_params(8, 6, 4, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.vision.up.iter().chain(&a.text.up).all(|v| *v == 0.0));
        assert!(a.vision.down.iter().any(|v| *v != 0.0));
        assert_ne!(a, init_params(8, 6, 4, 43).unwrap());
    }

    #[test]
    fn init_sample_std_is_near_point_zero_two() {
        let p = init_params(512, 512, 16, 1).unwrap();
        let all: Vec<f64> = p.vision.down.iter().chain(&p.text.down).copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((var.sqrt() - INIT_STD).abs() < 0.001);
    }

    #[test]
    fn vision_block_scalar_count() {
        let p = init_params(512, 512, 4, 0).unwrap();
        assert_eq!(p.vision.scalar_count(), 2 * 4 * 512);
    }

    #[test]
    fn fresh_params_give_normalized_frozen_features() {
        let p = init_params(3, 2, 4, 9).unwrap();
        let f = [3.0, 0.0, 4.0];
        let out = encode_image(&f, &p).unwrap();
        assert_eq!(out, frozen_target(&f).unwrap());
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[2] - 0.8).abs() < 1e-15);
        let g = [[2.0, 0.0]];
        assert_eq!(encode_text(&g, &p).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn two_templates_average_then_normalize() {
        let p = init_params(2, 2, 4, 9).unwrap();
        let out = encode_text(&[[1.0, 0.0], [0.0, 1.0]], &p).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-15 && (out[1] - h).abs() < 1e-15);
    }

    #[test]
    fn empty_templates_rejected() {
        let p = init_params(2, 2, 4, 9).unwrap();
        let none: [[f64; 2]; 0] = [];
        assert!(matches!(encode_text(&none, &p), Err(Error::Empty(_))));
        assert!(matches!(
            encode_image(&[1.0], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    // Closed form evaluated with explicit loops over the matrix layout.
    fn closed_form(block: &AdapterBlock, f: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; block.rank];
        for k in 0..block.rank {
            let mut s = 0.0;
            for i in 0..block.dim {
                s += block.down[k * block.dim + i] * f[i];
            }
            t[k] = s.tanh();
        }
        let mut out = f.to_vec();
        for i in 0..block.dim {
            for k in 0..block.rank {
                out[i] += block.up[i * block.rank + k] * t[k];
            }
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter().map(|v| v / n).collect()
    }

    #[test]
    fn random_params_match_closed_form() {
        let mut p = init_params(5, 4, 3, 0).unwrap();
        randomize(&mut p, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let f: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = encode_image(&f, &p).unwrap();
            let want = closed_form(&p.vision, &f);
            assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-14));
            assert!((norm(&out) - 1.0).abs() < 1e-14);

            let templates: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mean: Vec<f64> = (0..4)
                .map(|i| templates.iter().map(|t| t[i]).sum::<f64>() / 3.0)
                .collect();
            let out = encode_text(&templates, &p).unwrap();
            let want = closed_form(&p.text, &mean);
            assert!(out.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn phase_flags_and_counts() {
        let mut p = init_params(512, 512, 4, 0).unwrap();
        assert_eq!(p.trainable_count(), 8192);
        p.set_phase(Phase::Incremental);
        assert!(!p.vision.trainable && p.text.trainable);
        assert_eq!(p.trainable_count(), 4096);
        let again = p.clone().with_phase(Phase::Incremental);
        assert_eq!(again, p);
        p.set_phase(Phase::Base);
        assert!(p.vision.trainable && p.text.trainable);
    }

    #[test]
    fn incremental_count_below_base_for_any_dims() {
        for (di, dt, r) in [(1, 1, 1), (768, 512, 4), (3, 900, 2)] {
            let p = init_params(di, dt, r, 0).unwrap();
            let base = p.trainable_count();
            let inc = p.with_phase(Phase::Incremental).trainable_count();
            assert!(inc < base);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = init_params(4, 4, 2, 0).unwrap();
        randomize(&mut p, 5);
        let f = [0.3, -0.7, 0.2, 0.9];
        let w = [0.5, -1.0, 0.25, 0.1];
        let fwd = p.vision.forward(&f).unwrap();
        let mut g = BlockGrad::zeros_like(&p.vision);
        fwd.backward(&p.vision, &w, &mut g);
        let objective = |b: &AdapterBlock| linalg::dot(&b.forward(&f).unwrap().output, &w);
        let h = 1e-6;
        for idx in 0..p.vision.down.len() {
            let mut b = p.vision.clone();
            b.down[idx] += h;
            let up = objective(&b);
            b.down[idx] -= 2.0 * h;
            let dn = objective(&b);
            assert!(((up - dn) / (2.0 * h) - g.down[idx]).abs() < 1e-8);
        }
        for idx in 0..p.vision.up.len() {
            let mut b = p.vision.clone();
            b.up[idx] += h;
            let up = objective(&b);
            b.up[idx] -= 2.0 * h;
            let dn = objective(&b);
            assert!(((up - dn) / (2.0 * h) - g.up[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn fingerprint_tracks_bits() {
        let p = init_params(4, 4, 2, 0).unwrap();
        let mut q = p.clone();
        assert_eq!(p.vision.fingerprint(), q.vision.fingerprint());
        q.vision.up[0] = 1e-300;
        assert_ne!(p.vision.fingerprint(), q.vision.fingerprint());
    }
}
