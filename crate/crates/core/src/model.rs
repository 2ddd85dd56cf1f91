//! The local next-location model and its differentiation machinery.
//!
//! Two fixed architectures implement [`Model`]:
//!
//! * [`Mlp`]: `input(2W) -> dense(H, tanh) -> dense(L) -> softmax cross-entropy`
//! * [`LinearSoftmax`]: `input(2W) -> dense(L) -> softmax cross-entropy`
//!
//! Besides the ordinary parameter gradient, each model provides the gradient of
//! the squared gradient-matching objective `||param_grad(x', q) - g||^2` with
//! respect to the dummy input `x'` and dummy label distribution `q`. This is a
//! second-order quantity (a derivative of a derivative); both architectures
//! hand-roll the reverse pass over the first-order backward graph.
//!
//! Parameter layout for the MLP is `[W1 (H x 2W), b1 (H), W2 (L x H), b2 (L)]`,
//! all row-major; the linear model uses `[W (L x 2W), b (L)]`.

use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! flat_vector {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }

        impl $name {
            pub fn zeros(n: usize) -> Self {
                $name(vec![0.0; n])
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }
    };
}

flat_vector!(ParamVector);
flat_vector!(GradVector);

/// The attacker's dummy sample: input coordinates and free label logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DummyState {
    /// Normalized window coordinates `(lat, lon)` per point, length `2W`.
    pub x: Vec<f64>,
    /// Label logits; the dummy label is `softmax(y)`.
    pub y: Vec<f64>,
}

/// Value and input-side gradients of the squared matching objective.
#[derive(Debug, Clone)]
pub struct MatchingGrad {
    /// `||param_grad(x, q) - g_true||^2`
    pub value: f64,
    pub dx: Vec<f64>,
    /// Gradient with respect to the label distribution `q`.
    pub dq: Vec<f64>,
}

pub trait Model: Send + Sync {
    fn input_len(&self) -> usize;
    fn classes(&self) -> usize;
    fn param_len(&self) -> usize;

    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamVector;

    fn forward_unchecked(&self, params: &[f64], x: &[f64]) -> Vec<f64>;
    fn param_grad_unchecked(&self, params: &[f64], x: &[f64], y: &[f64]) -> GradVector;
    fn matching_grad_unchecked(&self, params: &[f64], x: &[f64], q: &[f64], target: &[f64]) -> MatchingGrad;

    /// The slice of a gradient that belongs to the output-layer bias.
    fn output_bias<'a>(&self, g: &'a [f64]) -> &'a [f64] {
        &g[g.len() - self.classes()..]
    }

    fn check_shapes(&self, params: &[f64], x: &[f64]) -> Result<()> {
        expect_len(self.param_len(), params.len())?;
        expect_len(self.input_len(), x.len())
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(params, x)?;
        Ok(self.forward_unchecked(params, x))
    }

    /// Gradient of the cross-entropy loss with respect to every parameter.
    fn param_grad(&self, params: &[f64], x: &[f64], y: &[f64]) -> Result<GradVector> {
        self.check_shapes(params, x)?;
        check_distribution(y, self.classes())?;
        Ok(self.param_grad_unchecked(params, x, y))
    }

    fn matching_grad(&self, params: &[f64], x: &[f64], q: &[f64], target: &[f64]) -> Result<MatchingGrad> {
        self.check_shapes(params, x)?;
        expect_len(self.classes(), q.len())?;
        expect_len(self.param_len(), target.len())?;
        Ok(self.matching_grad_unchecked(params, x, q, target))
    }
}

fn expect_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}

fn check_distribution(y: &[f64], classes: usize) -> Result<()> {
    expect_len(classes, y.len())?;
    let sum: f64 = y.iter().sum();
    if y.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("label must be a probability vector"));
    }
    Ok(())
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy `-sum_c y_c log softmax(logits)_c`.
pub fn loss(logits: &[f64], y: &[f64]) -> Result<f64> {
    check_distribution(y, logits.len())?;
    let lse = log_sum_exp(logits);
    Ok(y.iter()
        .zip(logits)
        .filter(|(yc, _)| **yc > 0.0)
        .map(|(yc, z)| yc * (lse - z))
        .sum())
}

/// Euclidean distance between two gradients.
pub fn matching_objective(g_dummy: &[f64], g_true: &[f64]) -> Result<f64> {
    expect_len(g_true.len(), g_dummy.len())?;
    Ok(g_dummy
        .iter()
        .zip(g_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Gradient of the squared matching objective with respect to the dummy
/// input and the dummy label logits (label = `softmax(dummy.y)`).
pub fn input_grad_of_matching(
    model: &dyn Model,
    params: &[f64],
    dummy: &DummyState,
    g_true: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = softmax(&dummy.y);
    let m = model.matching_grad(params, &dummy.x, &q, g_true)?;
    Ok((m.dx, softmax_vjp(&q, &m.dq)))
}

/// Pulls a gradient with respect to `softmax(z)` back to `z`.
pub fn softmax_vjp(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
    p.iter().zip(upstream).map(|(pi, ui)| pi * (ui - dot)).collect()
}

/// Label of a batch-1 gradient: the class whose output-bias gradient
/// `p_c - y_c` is smallest (the only negative entry for a one-hot label).
/// Only meaningful for gradients of a single example.
pub fn infer_label_analytic(model: &dyn Model, g_true: &[f64]) -> usize {
    argmin(model.output_bias(g_true))
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn gaussian(rng: &mut dyn rand::RngCore, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

/// Window length, hidden width and class count of the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub window: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(window: usize, hidden: usize, classes: usize) -> Result<Self> {
        if window < 1 || hidden < 1 || classes < 2 {
            return Err(Error::invalid(format!(
                "model needs W >= 1, H >= 1, L >= 2 (got {window}, {hidden}, {classes})"
            )));
        }
        Ok(ModelSpec {
            window,
            hidden,
            classes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub spec: ModelSpec,
}

struct MlpOffsets {
    d: usize,
    h: usize,
    l: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Mlp {
    pub fn new(spec: ModelSpec) -> Self {
        Mlp { spec }
    }

    fn offsets(&self) -> MlpOffsets {
        let d = 2 * self.spec.window;
        let h = self.spec.hidden;
        let l = self.spec.classes;
        MlpOffsets {
            d,
            h,
            l,
            b1: h * d,
            w2: h * d + h,
            b2: h * d + h + l * h,
        }
    }

    fn hidden(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let o = self.offsets();
        (0..o.h)
            .map(|j| {
                let row = &params[j * o.d..(j + 1) * o.d];
                let z = params[o.b1 + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                z.tanh()
            })
            .collect()
    }

    fn logits(&self, params: &[f64], h: &[f64]) -> Vec<f64> {
        let o = self.offsets();
        (0..o.l)
            .map(|c| {
                let row = &params[o.w2 + c * o.h..o.w2 + (c + 1) * o.h];
                params[o.b2 + c] + row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

impl Model for Mlp {
    fn input_len(&self) -> usize {
        2 * self.spec.window
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn param_len(&self) -> usize {
        let o = self.offsets();
        o.b2 + o.l
    }

    /// Glorot-scaled Gaussian weights, zero biases.
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamVector {
        let o = self.offsets();
        let mut p = vec![0.0; self.param_len()];
        let s1 = (1.0 / o.d as f64).sqrt();
        let s2 = (1.0 / o.h as f64).sqrt();
        for v in &mut p[..o.b1] {
            *v = gaussian(rng, s1);
        }
        for v in &mut p[o.w2..o.b2] {
            *v = gaussian(rng, s2);
        }
        ParamVector(p)
    }

    fn forward_unchecked(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let h = self.hidden(params, x);
        self.logits(params, &h)
    }

    fn param_grad_unchecked(&self, params: &[f64], x: &[f64], y: &[f64]) -> GradVector {
        let o = self.offsets();
        let h = self.hidden(params, x);
        let p = softmax(&self.logits(params, &h));
        let r: Vec<f64> = p.iter().zip(y).map(|(a, b)| a - b).collect();
        let mut g = vec![0.0; self.param_len()];
        let mut dh = vec![0.0; o.h];
        for c in 0..o.l {
            g[o.b2 + c] = r[c];
            for j in 0..o.h {
                g[o.w2 + c * o.h + j] = r[c] * h[j];
                dh[j] += params[o.w2 + c * o.h + j] * r[c];
            }
        }
        for j in 0..o.h {
            let delta = (1.0 - h[j] * h[j]) * dh[j];
            g[o.b1 + j] = delta;
            for k in 0..o.d {
                g[j * o.d + k] = delta * x[k];
            }
        }
        GradVector(g)
    }

    fn matching_grad_unchecked(&self, params: &[f64], x: &[f64], q: &[f64], target: &[f64]) -> MatchingGrad {
        let o = self.offsets();
        let w2 = |c: usize, j: usize| params[o.w2 + c * o.h + j];

        // forward through the first-order backward pass
        let h = self.hidden(params, x);
        let p = softmax(&self.logits(params, &h));
        let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
        let dh: Vec<f64> = (0..o.h)
            .map(|j| (0..o.l).map(|c| w2(c, j) * r[c]).sum())
            .collect();
        let sech2: Vec<f64> = h.iter().map(|v| 1.0 - v * v).collect();
        let delta: Vec<f64> = (0..o.h).map(|j| sech2[j] * dh[j]).collect();

        let mut value = 0.0;
        let mut bar_x = vec![0.0; o.d];
        let mut bar_delta = vec![0.0; o.h];
        let mut bar_h = vec![0.0; o.h];
        let mut bar_r = vec![0.0; o.l];

        // gW1 = delta x^T, gb1 = delta
        for j in 0..o.h {
            let rb = delta[j] - target[o.b1 + j];
            value += rb * rb;
            bar_delta[j] += 2.0 * rb;
            for k in 0..o.d {
                let rw = delta[j] * x[k] - target[j * o.d + k];
                value += rw * rw;
                bar_delta[j] += 2.0 * rw * x[k];
                bar_x[k] += 2.0 * rw * delta[j];
            }
        }
        // gW2 = r h^T, gb2 = r
        for c in 0..o.l {
            let rb = r[c] - target[o.b2 + c];
            value += rb * rb;
            bar_r[c] += 2.0 * rb;
            for j in 0..o.h {
                let rw = r[c] * h[j] - target[o.w2 + c * o.h + j];
                value += rw * rw;
                bar_r[c] += 2.0 * rw * h[j];
                bar_h[j] += 2.0 * rw * r[c];
            }
        }
        // delta = sech2 * dh, dh = W2^T r
        for j in 0..o.h {
            let bar_dh = bar_delta[j] * sech2[j];
            bar_h[j] += bar_delta[j] * dh[j] * (-2.0 * h[j]);
            for c in 0..o.l {
                bar_r[c] += w2(c, j) * bar_dh;
            }
        }
        // r = p - q, p = softmax(z2), z2 = W2 h + b2
        let bar_z2 = softmax_vjp(&p, &bar_r);
        for j in 0..o.h {
            bar_h[j] += (0..o.l).map(|c| w2(c, j) * bar_z2[c]).sum::<f64>();
        }
        // h = tanh(z1), z1 = W1 x + b1
        for j in 0..o.h {
            let bar_z1 = bar_h[j] * sech2[j];
            for k in 0..o.d {
                bar_x[k] += params[j * o.d + k] * bar_z1;
            }
        }
        MatchingGrad {
            value,
            dx: bar_x,
            dq: bar_r.iter().map(|v| -v).collect(),
        }
    }
}

/// Single dense layer straight into softmax; its batch-1 gradients admit a
/// closed-form input recovery, which makes it a useful oracle model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSoftmax {
    pub window: usize,
    pub classes: usize,
}

impl LinearSoftmax {
    pub fn new(window: usize, classes: usize) -> Result<Self> {
        ModelSpec::new(window, 1, classes)?;
        Ok(LinearSoftmax { window, classes })
    }

    fn d(&self) -> usize {
        2 * self.window
    }

    /// Input recovered directly from a batch-1 gradient: every weight row is
    /// its bias entry times the input, so divide the row with the largest
    /// bias entry.
    pub fn closed_form_input(&self, g: &[f64]) -> Vec<f64> {
        let d = self.d();
        let gb = &g[self.classes * d..];
        let c = (0..self.classes)
            .max_by(|&a, &b| gb[a].abs().total_cmp(&gb[b].abs()))
            .unwrap_or(0);
        g[c * d..(c + 1) * d].iter().map(|w| w / gb[c]).collect()
    }
}

impl Model for LinearSoftmax {
    fn input_len(&self) -> usize {
        self.d()
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn param_len(&self) -> usize {
        self.classes * self.d() + self.classes
    }

    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamVector {
        let s = (1.0 / self.d() as f64).sqrt();
        let mut p = vec![0.0; self.param_len()];
        for v in &mut p[..self.classes * self.d()] {
            *v = gaussian(rng, s);
        }
        ParamVector(p)
    }

    fn forward_unchecked(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.d();
        (0..self.classes)
            .map(|c| {
                params[self.classes * d + c]
                    + params[c * d..(c + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn param_grad_unchecked(&self, params: &[f64], x: &[f64], y: &[f64]) -> GradVector {
        let d = self.d();
        let p = softmax(&self.forward_unchecked(params, x));
        let mut g = vec![0.0; self.param_len()];
        for c in 0..self.classes {
            let r = p[c] - y[c];
            g[self.classes * d + c] = r;
            for k in 0..d {
                g[c * d + k] = r * x[k];
            }
        }
        GradVector(g)
    }

    fn matching_grad_unchecked(&self, params: &[f64], x: &[f64], q: &[f64], target: &[f64]) -> MatchingGrad {
        let d = self.d();
        let l = self.classes;
        let p = softmax(&self.forward_unchecked(params, x));
        let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
        let mut value = 0.0;
        let mut bar_x = vec![0.0; d];
        let mut bar_r = vec![0.0; l];
        for c in 0..l {
            let rb = r[c] - target[l * d + c];
            value += rb * rb;
            bar_r[c] += 2.0 * rb;
            for k in 0..d {
                let rw = r[c] * x[k] - target[c * d + k];
                value += rw * rw;
                bar_r[c] += 2.0 * rw * x[k];
                bar_x[k] += 2.0 * rw * r[c];
            }
        }
        let bar_z = softmax_vjp(&p, &bar_r);
        for c in 0..l {
            for k in 0..d {
                bar_x[k] += params[c * d + k] * bar_z[c];
            }
        }
        MatchingGrad {
            value,
            dx: bar_x,
            dq: bar_r.iter().map(|v| -v).collect(),
        }
    }
}

/// Magic bytes of the parameter checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLPARAM1";

/// Writes a checkpoint: the 8-byte magic, then `W`, `H`, `L` and the value
/// count as little-endian `u64`, then the values as little-endian `f64`.
pub fn write_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    for v in [spec.window, spec.hidden, spec.classes, params.len()] {
        f.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in params.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelSpec, ParamVector)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || Error::Format(format!("{}: not a parameter checkpoint", path.display()));
    if bytes.len() < 40 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let spec = ModelSpec::new(word(0), word(1), word(2))?;
    let n = word(3);
    if bytes.len() != 40 + 8 * n || n != Mlp::new(spec).param_len() {
        return Err(bad());
    }
    let params = bytes[40..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((spec, ParamVector(params)))
}

/// Draws `n` standard normal values.
pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Mlp, Vec<f64>) {
        // W=1 (2 inputs), H=1, L=2: W1=[[1,0]], b1=0, W2=[[2],[0]], b2=0
        let m = Mlp::new(ModelSpec::new(1, 1, 2).unwrap());
        (m, vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn toy_forward_by_hand() {
        let (m, p) = toy();
        let z = m.forward(&p, &[0.5, 0.0]).unwrap();
        assert!((z[0] - 2.0 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((z[0] - 0.924_234).abs() < 1e-6);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let m = Mlp::new(ModelSpec::new(3, 4, 5).unwrap());
        let z = m.forward(&vec![0.0; m.param_len()], &[0.3; 6]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let m = Mlp::new(ModelSpec::new(3, 4, 5).unwrap());
        assert!(matches!(m.forward(&[0.0; 3], &[0.0; 6]), Err(Error::Shape { .. })));
        let p = vec![0.0; m.param_len()];
        assert!(matches!(m.forward(&p, &[0.0; 5]), Err(Error::Shape { .. })));
        assert!(m.param_grad(&p, &[0.0; 6], &[0.5, 0.6, 0.0, 0.0, 0.0]).is_err());
        assert!(ModelSpec::new(0, 1, 2).is_err());
        assert!(ModelSpec::new(1, 1, 1).is_err());
    }

    #[test]
    fn permuting_output_rows_permutes_logits() {
        let m = Mlp::new(ModelSpec::new(2, 3, 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = m.init_params(&mut rng);
        for v in p.iter_mut() {
            *v += 0.1;
        }
        let x = [0.1, -0.4, 0.3, 0.9];
        let z = m.forward(&p, &x).unwrap();
        let o = m.offsets();
        let mut swapped = p.clone();
        for j in 0..o.h {
            swapped.swap(o.w2 + j, o.w2 + 3 * o.h + j);
        }
        swapped.swap(o.b2, o.b2 + 3);
        let zs = m.forward(&swapped, &x).unwrap();
        assert_eq!(z[0], zs[3]);
        assert_eq!(z[3], zs[0]);
        assert_eq!(z[1], zs[1]);
    }

    #[test]
    fn loss_uniform_and_entropy() {
        let l = loss(&[0.7; 4], &one_hot(2, 4)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let z = [0.3, -1.0, 2.0];
        let y = softmax(&z);
        let h: f64 = -y.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((loss(&z, &y).unwrap() - h).abs() < 1e-12);
        assert!(loss(&z, &[0.5, 0.5, 0.5]).is_err());
        assert!(loss(&z, &[1.5, -0.5, 0.0]).is_err());
        // large logits stay finite
        assert!(loss(&[1000.0, -1000.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn output_bias_grad_is_residual() {
        let m = Mlp::new(ModelSpec::new(2, 3, 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = m.init_params(&mut rng);
        let x = [0.2, 0.1, -0.5, 0.4];
        let probs = softmax(&m.forward(&p, &x).unwrap());
        let g = m.param_grad(&p, &x, &probs).unwrap();
        assert!(m.output_bias(&g).iter().all(|v| v.abs() < 1e-15));
        let g = m.param_grad(&p, &x, &one_hot(1, 4)).unwrap();
        for (c, v) in m.output_bias(&g).iter().enumerate() {
            let want = probs[c] - if c == 1 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_objective_cases() {
        assert_eq!(matching_objective(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(matching_objective(&[3.0, 4.0, 0.0], &[0.0; 3]).unwrap(), 5.0);
        assert!(matching_objective(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn label_from_bias_gradient() {
        let m = LinearSoftmax::new(1, 3).unwrap();
        let mut g = vec![0.0; m.param_len()];
        let n = g.len();
        g[n - 3..].copy_from_slice(&[0.2, -0.8, 0.6]);
        assert_eq!(infer_label_analytic(&m, &g), 1);
    }

    #[test]
    fn closed_form_recovers_linear_input() {
        let m = LinearSoftmax::new(3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = m.init_params(&mut rng);
        let x = [0.3, -0.2, 0.9, 0.1, -0.7, 0.5];
        let g = m.param_grad(&p, &x, &one_hot(4, 5)).unwrap();
        let rec = m.closed_form_input(&g);
        for (a, b) in rec.iter().zip(x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = ModelSpec::new(2, 3, 4).unwrap();
        let m = Mlp::new(spec);
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        write_checkpoint(&path, &spec, &p).unwrap();
        let (s2, p2) = read_checkpoint(&path).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(p2, p);
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
