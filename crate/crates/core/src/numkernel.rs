//! Dense numeric kernel: affine layers, activations, softmax and seeded
//! dropout, each with an exact analytic gradient.
//!
//! Everything runs in `f64`. Matrices are row-major with shape
//! `[out, in]`, so a weight row is contiguous and `W·x` is a sequence of
//! dot products.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A parameter array together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::dims(
                "ParamTensor::from_values",
                shape,
                &[values.len()],
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    /// Simultaneous access to values and gradient, for optimizer updates.
    pub fn values_and_grad_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.values, &mut self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Deterministic random stream: a ChaCha8 generator identified by a seed and
/// a stream id, positioned at a word offset.
///
/// Sub-streams obtained through [`RngState::fork`] are independent of each
/// other and of the parent's position.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position in the stream, counted in 32-bit words consumed.
    pub fn position(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn set_position(&mut self, position: u64) {
        self.rng.set_word_pos(position as u128);
    }

    /// Child stream keyed by `tag`. Forking the same parent with the same tag
    /// always yields the same child, regardless of how much of the parent
    /// has been consumed.
    pub fn fork(&self, tag: u64) -> RngState {
        let stream = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngState::with_stream(self.seed, stream)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dot product with a fixed four-lane summation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `W·x + b` for a `[out, in]` weight tensor.
pub fn linear_forward(x: &[f64], w: &ParamTensor, b: &ParamTensor) -> Result<Vec<f64>> {
    let (rows, cols) = matrix_dims(w)?;
    if x.len() != cols {
        return Err(Error::dims("linear_forward input", &[x.len()], w.shape()));
    }
    if b.shape() != [rows] {
        return Err(Error::dims("linear_forward bias", b.shape(), w.shape()));
    }
    Ok(w.values()
        .chunks_exact(cols)
        .zip(b.values())
        .map(|(row, bias)| dot(row, x) + bias)
        .collect())
}

/// Gradients of `W·x + b` given the upstream gradient of its output.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    /// Row-major `[out, in]`, the outer product `upstream ⊗ x`.
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub dx: Vec<f64>,
}

pub fn linear_backward(x: &[f64], w: &ParamTensor, upstream: &[f64]) -> Result<LinearGrads> {
    let (rows, cols) = matrix_dims(w)?;
    if x.len() != cols {
        return Err(Error::dims("linear_backward input", &[x.len()], w.shape()));
    }
    if upstream.len() != rows {
        return Err(Error::dims(
            "linear_backward upstream",
            &[upstream.len()],
            w.shape(),
        ));
    }
    let mut dw = vec![0.0; rows * cols];
    let mut dx = vec![0.0; cols];
    for ((&u, w_row), dw_row) in upstream
        .iter()
        .zip(w.values().chunks_exact(cols))
        .zip(dw.chunks_exact_mut(cols))
    {
        axpy(u, x, dw_row);
        axpy(u, w_row, &mut dx);
    }
    Ok(LinearGrads {
        dw,
        db: upstream.to_vec(),
        dx,
    })
}

fn matrix_dims(w: &ParamTensor) -> Result<(usize, usize)> {
    match *w.shape() {
        [rows, cols] => Ok((rows, cols)),
        _ => Err(Error::InvalidArgument(format!(
            "expected a rank-2 weight tensor, got shape {:?}",
            w.shape()
        ))),
    }
}

/// Affine layer `x ↦ W·x + b` whose backward pass accumulates into the
/// parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: ParamTensor::zeros(&[out_dim, in_dim]),
            bias: ParamTensor::zeros(&[out_dim]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in layer.weight.values_mut() {
            *w = rng.uniform_in(-bound, bound);
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim(), "affine input width");
        self.weight
            .values()
            .chunks_exact(self.in_dim())
            .zip(self.bias.values())
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates `upstream ⊗ x` and `upstream` into the gradients and
    /// returns `Wᵀ·upstream` when `want_dx` is set.
    pub fn backward(&mut self, x: &[f64], upstream: &[f64], want_dx: bool) -> Option<Vec<f64>> {
        let cols = self.in_dim();
        assert_eq!(upstream.len(), self.out_dim(), "affine upstream width");
        let mut dx = want_dx.then(|| vec![0.0; cols]);
        let (w, dw) = self.weight.values_and_grad_mut();
        for ((&u, w_row), dw_row) in upstream
            .iter()
            .zip(w.chunks_exact(cols))
            .zip(dw.chunks_exact_mut(cols))
        {
            if u == 0.0 {
                continue;
            }
            axpy(u, x, dw_row);
            if let Some(dx) = dx.as_mut() {
                axpy(u, w_row, dx);
            }
        }
        for (db, u) in self.bias.grad_mut().iter_mut().zip(upstream) {
            *db += u;
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Gradient w.r.t. the logits given `p = softmax(z)` and `dp = ∂L/∂p`:
/// `p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// ReLU subgradient, taken as 0 at the origin.
pub fn relu_backward(pre_activation: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre_activation
        .iter()
        .zip(upstream)
        .map(|(&a, &u)| if a > 0.0 { u } else { 0.0 })
        .collect()
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1 − rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> ParamTensor {
        ParamTensor::from_values(&[rows, cols], v.to_vec()).unwrap()
    }

    fn vector(v: &[f64]) -> ParamTensor {
        ParamTensor::from_values(&[v.len()], v.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut RngState, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn linear_identity() {
        let w = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = vector(&[0.0, 0.0]);
        assert_eq!(linear_forward(&[3.0, 4.0], &w, &b).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn linear_hand_product() {
        let w = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = vector(&[0.0, 0.0]);
        assert_eq!(linear_forward(&[1.0, 1.0], &w, &b).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let w = ParamTensor::zeros(&[2, 3]);
        let b = ParamTensor::zeros(&[2]);
        let err = linear_forward(&[1.0, 1.0], &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn linear_backward_zero_upstream() {
        let w = mat(2, 2, &[0.3, -0.2, 0.5, 0.9]);
        let g = linear_backward(&[1.0, 2.0], &w, &[0.0, 0.0]).unwrap();
        assert!(g.dw.iter().chain(&g.db).chain(&g.dx).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_backward_hand_case() {
        let w = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = linear_backward(&[1.0, 2.0], &w, &[1.0, 0.0]).unwrap();
        assert_eq!(g.dx, vec![1.0, 0.0]);
        assert_eq!(g.dw, vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(g.db, vec![1.0, 0.0]);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = RngState::new(11);
        let h = 1e-5;
        for _ in 0..20 {
            let (rows, cols) = (3, 4);
            let w = mat(rows, cols, &random_vec(&mut rng, rows * cols));
            let b = vector(&random_vec(&mut rng, rows));
            let x = random_vec(&mut rng, cols);
            let up = random_vec(&mut rng, rows);
            // scalar objective ⟨up, W·x + b⟩
            let objective = |w: &ParamTensor, b: &ParamTensor, x: &[f64]| -> f64 {
                dot(&linear_forward(x, w, b).unwrap(), &up)
            };
            let g = linear_backward(&x, &w, &up).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..w.len() {
                let mut wp = w.clone();
                wp.values_mut()[k] += h;
                let mut wm = w.clone();
                wm.values_mut()[k] -= h;
                let num = (objective(&wp, &b, &x) - objective(&wm, &b, &x)) / (2.0 * h);
                worst = worst.max(rel_err(g.dw[k], num));
            }
            for k in 0..cols {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let num = (objective(&w, &b, &xp) - objective(&w, &b, &xm)) / (2.0 * h);
                worst = worst.max(rel_err(g.dx[k], num));
            }
            for k in 0..rows {
                let mut bp = b.clone();
                bp.values_mut()[k] += h;
                let mut bm = b.clone();
                bm.values_mut()[k] -= h;
                let num = (objective(&w, &bp, &x) - objective(&w, &bm, &x)) / (2.0 * h);
                worst = worst.max(rel_err(g.db[k], num));
            }
            assert!(worst <= 1e-8, "worst relative error {worst}");
        }
    }

    #[test]
    fn affine_backward_agrees_with_free_function() {
        let mut rng = RngState::new(3);
        let mut layer = Affine::glorot(5, 3, &mut rng);
        let x = random_vec(&mut rng, 5);
        let up = random_vec(&mut rng, 3);
        let dx = layer.backward(&x, &up, true).unwrap();
        let g = linear_backward(&x, &layer.weight, &up).unwrap();
        assert_eq!(layer.weight.grad(), g.dw.as_slice());
        assert_eq!(layer.bias.grad(), g.db.as_slice());
        for (a, b) in dx.iter().zip(&g.dx) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            layer.forward(&x),
            linear_forward(&x, &layer.weight, &layer.bias).unwrap()
        );
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut rng = RngState::new(5);
        for _ in 0..200 {
            let z = random_vec(&mut rng, 7);
            let p = softmax(&z).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(p.iter().all(|&v| v > 0.0));
            let c = rng.uniform_in(-50.0, 50.0);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = RngState::new(17);
        let h = 1e-5;
        for _ in 0..50 {
            let z = random_vec(&mut rng, 5);
            let dp = random_vec(&mut rng, 5);
            let objective = |z: &[f64]| dot(&softmax(z).unwrap(), &dp);
            let analytic = softmax_backward(&softmax(&z).unwrap(), &dp);
            for k in 0..z.len() {
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                let num = (objective(&zp) - objective(&zm)) / (2.0 * h);
                // gradients here can be close to zero, so compare absolutely too
                assert!(
                    rel_err(analytic[k], num) <= 1e-6 || (analytic[k] - num).abs() < 1e-10,
                    "k={k}: {} vs {num}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_zero() {
        let mut rng = RngState::new(23);
        let h = 1e-5;
        let x: Vec<f64> = random_vec(&mut rng, 64)
            .into_iter()
            .filter(|v| v.abs() > 1e-3)
            .collect();
        let up = random_vec(&mut rng, x.len());
        let analytic = relu_backward(&x, &up);
        for k in 0..x.len() {
            let f = |v: f64| relu(&[v])[0] * up[k];
            let num = (f(x[k] + h) - f(x[k] - h)) / (2.0 * h);
            assert!((analytic[k] - num).abs() <= 1e-6 * analytic[k].abs().max(1e-8));
        }
        assert_eq!(relu_backward(&[0.0], &[1.0]), vec![0.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = RngState::new(1);
        assert_eq!(dropout_mask(16, 0.0, &mut rng).unwrap(), vec![1.0; 16]);
    }

    #[test]
    fn dropout_is_reproducible_at_same_position() {
        let mut a = RngState::new(99);
        a.set_position(40);
        let mut b = RngState::new(99);
        b.set_position(40);
        assert_eq!(
            dropout_mask(100, 0.3, &mut a).unwrap(),
            dropout_mask(100, 0.3, &mut b).unwrap()
        );
    }

    #[test]
    fn dropout_large_sample_statistics() {
        let mut rng = RngState::new(2024);
        let mask = dropout_mask(100_000, 0.5, &mut rng).unwrap();
        let nonzero: Vec<f64> = mask.iter().copied().filter(|&v| v != 0.0).collect();
        let frac = nonzero.len() as f64 / mask.len() as f64;
        assert!((frac - 0.5).abs() <= 0.01, "nonzero fraction {frac}");
        assert!(nonzero.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = RngState::new(0);
        assert!(dropout_mask(4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn forks_are_position_independent_and_distinct() {
        let mut parent = RngState::new(7);
        let before = parent.fork(3).uniform();
        parent.uniform();
        parent.uniform();
        assert_eq!(parent.fork(3).uniform(), before);
        assert_ne!(parent.fork(4).uniform(), before);
    }

    #[test]
    fn kernels_are_pure() {
        let mut rng = RngState::new(8);
        let w = mat(3, 3, &random_vec(&mut rng, 9));
        let b = vector(&random_vec(&mut rng, 3));
        let x = random_vec(&mut rng, 3);
        let first = linear_forward(&x, &w, &b).unwrap();
        let second = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(
            first.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
