//! Adaptive Morlet wavelet coefficients with learned scale and translation.
//!
//! The scale `a` and translation `b` are produced per time step from the
//! input-gate output by small tanh projections. A raw tanh admits `a = 0`
//! (division by zero) and `a < 0` (a diverging envelope), so the scale is
//! stabilized to `a = eps + (1 - eps) * |tanh(.)|` with `eps = 0.05`,
//! keeping `a` in `[eps, 1]` while remaining differentiable away from the
//! tanh zero crossing.
//!
//! Coefficients are indexed over `j` frequency octaves and `k` time
//! shifts: with `arg = (t + b) / 2^j - k`,
//! `psi[j,k] = exp(i * (omega0 / a) * arg) * exp(-arg^2 / a)`,
//! carried as separate real and imaginary tensors.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::init;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Lower bound for the stabilized scale parameter.
pub const SCALE_FLOOR: f64 = 0.05;

/// Projection weights for the adaptive scale and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletParams {
    /// `[1, D]` scale projection.
    pub w_a: Tensor,
    /// `[1]` scale bias.
    pub b_a: Tensor,
    /// `[1, D]` translation projection.
    pub w_b: Tensor,
    /// `[1]` translation bias.
    pub b_b: Tensor,
    /// Wavelet center frequency.
    pub omega0: f64,
}

impl WaveletParams {
    /// Random projections in `[-1/sqrt(D), 1/sqrt(D)]`, zero biases.
    pub fn init<R: Rng>(d: usize, omega0: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        WaveletParams {
            w_a: init::uniform(vec![1, d], bound, rng),
            b_a: Tensor::zeros(vec![1]),
            w_b: init::uniform(vec![1, d], bound, rng),
            b_b: Tensor::zeros(vec![1]),
            omega0,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.w_a.shape() != [1, d] || self.w_b.shape() != [1, d] {
            return Err(CoreError::dim(
                "WaveletParams",
                format!("[1, {d}]"),
                format!("{:?}/{:?}", self.w_a.shape(), self.w_b.shape()),
            ));
        }
        if self.omega0 <= 0.0 {
            return Err(CoreError::Config(format!("omega0 must be positive, got {}", self.omega0)));
        }
        Ok(())
    }

    /// Registers the projections on a tape under `prefix`.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<WaveletNodes> {
        Ok(WaveletNodes {
            w_a: tape.param(&format!("{prefix}.w_a"), self.w_a.clone())?,
            b_a: tape.param(&format!("{prefix}.b_a"), self.b_a.clone())?,
            w_b: tape.param(&format!("{prefix}.w_b"), self.w_b.clone())?,
            b_b: tape.param(&format!("{prefix}.b_b"), self.b_b.clone())?,
            omega0: self.omega0,
        })
    }
}

/// Tape handles for registered [`WaveletParams`].
#[derive(Debug, Clone, Copy)]
pub struct WaveletNodes {
    pub w_a: NodeId,
    pub b_a: NodeId,
    pub w_b: NodeId,
    pub b_b: NodeId,
    pub omega0: f64,
}

/// Real and imaginary coefficient tensors, both `[J, K]`.
#[derive(Debug, Clone)]
pub struct WaveletCoeffs {
    pub re: Tensor,
    pub im: Tensor,
}

/// Tape handles for the coefficient pair.
#[derive(Debug, Clone, Copy)]
pub struct WaveletCoeffNodes {
    pub re: NodeId,
    pub im: NodeId,
}

/// Learns `(a, b)` from the input-gate output `ig` (`[D]`).
///
/// Returns scalar nodes with `a` stabilized into `[SCALE_FLOOR, 1]` and
/// `b = tanh(W_b ig + b_b)` in `(-1, 1)`.
pub fn adapt_params(tape: &mut Tape, ig: NodeId, wp: &WaveletNodes) -> Result<(NodeId, NodeId)> {
    if !tape.value(ig).all_finite() {
        return Err(CoreError::NonFinite("adapt_params input"));
    }
    let za = tape.matvec(wp.w_a, ig)?;
    let za = tape.add(za, wp.b_a)?;
    let raw_a = tape.tanh(za)?;
    let abs_a = tape.abs(raw_a)?;
    let scaled = tape.scale(abs_a, 1.0 - SCALE_FLOOR)?;
    let a = tape.offset(scaled, SCALE_FLOOR)?;

    let zb = tape.matvec(wp.w_b, ig)?;
    let zb = tape.add(zb, wp.b_b)?;
    let b = tape.tanh(zb)?;
    Ok((a, b))
}

/// Builds the `[J, K]` Morlet coefficients at time index `t`.
///
/// `a` and `b` are scalar nodes; `t` is the zero-based index of the
/// current input within the sequence. Fails if `a` has not been
/// stabilized above [`SCALE_FLOOR`].
pub fn morlet_coefficients(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    t: f64,
    omega0: f64,
    j_dim: usize,
    k_dim: usize,
) -> Result<WaveletCoeffNodes> {
    if j_dim == 0 || k_dim == 0 {
        return Err(CoreError::Config(format!("J and K must be >= 1, got J={j_dim} K={k_dim}")));
    }
    let a_val = tape.value(a).scalar_value()?;
    if a_val < SCALE_FLOOR - 1e-12 {
        return Err(CoreError::Contract(format!(
            "scale a = {a_val} below floor {SCALE_FLOOR}; stabilization must precede"
        )));
    }

    // arg[j,k] = (t + b) / 2^j - k, affine in the scalar b.
    let n = j_dim * k_dim;
    let mut coeff = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for j in 0..j_dim {
        let pow = (2.0f64).powi(j as i32);
        for k in 0..k_dim {
            coeff.push(1.0 / pow);
            offsets.push(t / pow - k as f64);
        }
    }
    let coeff = tape.leaf(Tensor::new(vec![n, 1], coeff)?);
    let offsets = tape.leaf(Tensor::new(vec![n], offsets)?);
    let scaled_b = tape.matvec(coeff, b)?;
    let arg = tape.add(scaled_b, offsets)?;

    let inv_a = tape.recip(a)?;
    let arg_sq = tape.square(arg)?;
    let decay_in = tape.mul_scalar(arg_sq, inv_a)?;
    let decay_in = tape.scale(decay_in, -1.0)?;
    let envelope = tape.exp(decay_in)?;

    let theta = tape.mul_scalar(arg, inv_a)?;
    let theta = tape.scale(theta, omega0)?;
    let cos_t = tape.cos(theta)?;
    let sin_t = tape.sin(theta)?;

    let re = tape.mul(cos_t, envelope)?;
    let im = tape.mul(sin_t, envelope)?;
    Ok(WaveletCoeffNodes {
        re: tape.reshape(re, vec![j_dim, k_dim])?,
        im: tape.reshape(im, vec![j_dim, k_dim])?,
    })
}
