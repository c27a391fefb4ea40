//! The adaptive time-frequency memory cell.
//!
//! One step combines:
//! - a joint forget gate: three sigmoid gates over the state (D),
//!   frequency (J) and time (K) dimensions, merged by a 3-way outer
//!   product into `F in [0,1]^{D x J x K}`;
//! - an input gate `ig = sigmoid(.) * tanh(.)` as in an LSTM;
//! - a wavelet-modulated update `C = F o A_prev + ig (x) psi`, where
//!   `psi` are the Morlet coefficients at the current time index (with
//!   learned or fixed scale/translation) and `A_prev` is the carried
//!   amplitude, so `F o A_prev` is real and the only complex term is the
//!   injection;
//! - amplitude extraction `A = |C|`, which re-enters real arithmetic
//!   (the phase is diagnostic only and never fed forward);
//! - a projection `c~ = sum_{k,j} (W_c^{k,j} A[:,j,k] + b_c^{k,j})` and
//!   the usual output gate `h = o * tanh(c~)`.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::init;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::wavelet::{
    adapt_params, morlet_coefficients, WaveletCoeffNodes, WaveletCoeffs, WaveletNodes,
    WaveletParams, SCALE_FLOOR,
};

/// Initial value of the three forget-gate biases.
///
/// The joint forget gate multiplies three sigmoids, so zero biases give
/// retention 0.125 per entry and the carried amplitude vanishes within a
/// few steps; over one-cycle packets (around 100 steps) nothing survives
/// to the sequence end and training stalls. Saturating the gates towards
/// keep-everything at initialization restores gradient flow across the
/// whole sequence, the cubed-gate analogue of the usual LSTM positive
/// forget-bias initialization.
pub const FORGET_BIAS_INIT: f64 = 5.0;

/// Dimensions and flags of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConfig {
    /// State dimension D.
    pub d: usize,
    /// Time-domain dimension K.
    pub k: usize,
    /// Frequency-domain dimension J.
    pub j: usize,
    /// Width of each input vector (6 waveform channels by default).
    pub input_dim: usize,
    /// Learn the wavelet scale/translation instead of using fixed values.
    pub adaptive: bool,
    /// Wavelet center frequency.
    pub omega0: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig {
            d: 32,
            k: 4,
            j: 4,
            input_dim: 6,
            adaptive: true,
            omega0: 16.0,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.j == 0 || self.input_dim == 0 {
            return Err(CoreError::Config(format!(
                "cell dimensions must be >= 1, got D={} K={} J={} input={}",
                self.d, self.k, self.j, self.input_dim
            )));
        }
        if self.omega0 <= 0.0 {
            return Err(CoreError::Config(format!("omega0 must be positive, got {}", self.omega0)));
        }
        Ok(())
    }
}

/// All trainable tensors of one cell, plus the fixed wavelet parameters
/// used when the adaptive path is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub w_ste: Tensor,
    pub u_ste: Tensor,
    pub b_ste: Tensor,
    pub w_tim: Tensor,
    pub u_tim: Tensor,
    pub b_tim: Tensor,
    pub w_fre: Tensor,
    pub u_fre: Tensor,
    pub b_fre: Tensor,
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_g: Tensor,
    pub u_g: Tensor,
    pub b_g: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
    pub wavelet: WaveletParams,
    /// `[K, J, D, D]`: one D x D matrix per (k, j) slice.
    pub w_c: Tensor,
    /// `[K, J, D]`: one bias vector per (k, j) slice.
    pub b_c: Tensor,
    pub fixed_a: f64,
    pub fixed_b: f64,
}

impl CellParams {
    /// Uniform `[-1/sqrt(D), 1/sqrt(D)]` weights, zero biases except the
    /// three forget-gate biases (see [`FORGET_BIAS_INIT`]), fixed wavelet
    /// parameters `a = 1`, `b = 0`.
    pub fn init<R: Rng>(cfg: &CellConfig, rng: &mut R) -> Self {
        let (d, k, j, n) = (cfg.d, cfg.k, cfg.j, cfg.input_dim);
        let bound = 1.0 / (d as f64).sqrt();
        CellParams {
            w_ste: init::uniform(vec![d, n], bound, rng),
            u_ste: init::uniform(vec![d, d], bound, rng),
            b_ste: Tensor::full(vec![d], FORGET_BIAS_INIT),
            w_tim: init::uniform(vec![k, n], bound, rng),
            u_tim: init::uniform(vec![k, d], bound, rng),
            b_tim: Tensor::full(vec![k], FORGET_BIAS_INIT),
            w_fre: init::uniform(vec![j, n], bound, rng),
            u_fre: init::uniform(vec![j, d], bound, rng),
            b_fre: Tensor::full(vec![j], FORGET_BIAS_INIT),
            w_i: init::uniform(vec![d, n], bound, rng),
            u_i: init::uniform(vec![d, d], bound, rng),
            b_i: Tensor::zeros(vec![d]),
            w_g: init::uniform(vec![d, n], bound, rng),
            u_g: init::uniform(vec![d, d], bound, rng),
            b_g: Tensor::zeros(vec![d]),
            w_o: init::uniform(vec![d, n], bound, rng),
            u_o: init::uniform(vec![d, d], bound, rng),
            b_o: Tensor::zeros(vec![d]),
            wavelet: WaveletParams::init(d, cfg.omega0, rng),
            w_c: init::uniform(vec![k, j, d, d], bound, rng),
            b_c: Tensor::zeros(vec![k, j, d]),
            fixed_a: 1.0,
            fixed_b: 0.0,
        }
    }

    pub fn validate(&self, cfg: &CellConfig) -> Result<()> {
        cfg.validate()?;
        let (d, k, j, n) = (cfg.d, cfg.k, cfg.j, cfg.input_dim);
        let checks: [(&str, &Tensor, Vec<usize>); 20] = [
            ("w_ste", &self.w_ste, vec![d, n]),
            ("u_ste", &self.u_ste, vec![d, d]),
            ("b_ste", &self.b_ste, vec![d]),
            ("w_tim", &self.w_tim, vec![k, n]),
            ("u_tim", &self.u_tim, vec![k, d]),
            ("b_tim", &self.b_tim, vec![k]),
            ("w_fre", &self.w_fre, vec![j, n]),
            ("u_fre", &self.u_fre, vec![j, d]),
            ("b_fre", &self.b_fre, vec![j]),
            ("w_i", &self.w_i, vec![d, n]),
            ("u_i", &self.u_i, vec![d, d]),
            ("b_i", &self.b_i, vec![d]),
            ("w_g", &self.w_g, vec![d, n]),
            ("u_g", &self.u_g, vec![d, d]),
            ("b_g", &self.b_g, vec![d]),
            ("w_o", &self.w_o, vec![d, n]),
            ("u_o", &self.u_o, vec![d, d]),
            ("b_o", &self.b_o, vec![d]),
            ("w_c", &self.w_c, vec![k, j, d, d]),
            ("b_c", &self.b_c, vec![k, j, d]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want {
                return Err(CoreError::dim("CellParams", format!("{name} {want:?}"), format!("{:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(CoreError::NonFinite("CellParams"));
            }
        }
        self.wavelet.validate(d)?;
        if !cfg.adaptive && self.fixed_a < SCALE_FLOOR {
            return Err(CoreError::Config(format!(
                "fixed scale {} below floor {SCALE_FLOOR}",
                self.fixed_a
            )));
        }
        Ok(())
    }

    /// Registers every trainable tensor on the tape under `prefix`.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<CellNodes> {
        let p = |tape: &mut Tape, name: &str, t: &Tensor| tape.param(&format!("{prefix}.{name}"), t.clone());
        Ok(CellNodes {
            w_ste: p(tape, "w_ste", &self.w_ste)?,
            u_ste: p(tape, "u_ste", &self.u_ste)?,
            b_ste: p(tape, "b_ste", &self.b_ste)?,
            w_tim: p(tape, "w_tim", &self.w_tim)?,
            u_tim: p(tape, "u_tim", &self.u_tim)?,
            b_tim: p(tape, "b_tim", &self.b_tim)?,
            w_fre: p(tape, "w_fre", &self.w_fre)?,
            u_fre: p(tape, "u_fre", &self.u_fre)?,
            b_fre: p(tape, "b_fre", &self.b_fre)?,
            w_i: p(tape, "w_i", &self.w_i)?,
            u_i: p(tape, "u_i", &self.u_i)?,
            b_i: p(tape, "b_i", &self.b_i)?,
            w_g: p(tape, "w_g", &self.w_g)?,
            u_g: p(tape, "u_g", &self.u_g)?,
            b_g: p(tape, "b_g", &self.b_g)?,
            w_o: p(tape, "w_o", &self.w_o)?,
            u_o: p(tape, "u_o", &self.u_o)?,
            b_o: p(tape, "b_o", &self.b_o)?,
            wavelet: self.wavelet.register(tape, &format!("{prefix}.wavelet"))?,
            w_c: p(tape, "w_c", &self.w_c)?,
            b_c: p(tape, "b_c", &self.b_c)?,
            fixed_a: self.fixed_a,
            fixed_b: self.fixed_b,
        })
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        for (name, t) in self.named_tensors() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        let prefix = prefix.to_string();
        for (name, t) in self.named_tensors_mut() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub(crate) fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_ste", &self.w_ste),
            ("u_ste", &self.u_ste),
            ("b_ste", &self.b_ste),
            ("w_tim", &self.w_tim),
            ("u_tim", &self.u_tim),
            ("b_tim", &self.b_tim),
            ("w_fre", &self.w_fre),
            ("u_fre", &self.u_fre),
            ("b_fre", &self.b_fre),
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("b_i", &self.b_i),
            ("w_g", &self.w_g),
            ("u_g", &self.u_g),
            ("b_g", &self.b_g),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
            ("b_o", &self.b_o),
            ("wavelet.w_a", &self.wavelet.w_a),
            ("wavelet.b_a", &self.wavelet.b_a),
            ("wavelet.w_b", &self.wavelet.w_b),
            ("wavelet.b_b", &self.wavelet.b_b),
            ("w_c", &self.w_c),
            ("b_c", &self.b_c),
        ]
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_ste", &mut self.w_ste),
            ("u_ste", &mut self.u_ste),
            ("b_ste", &mut self.b_ste),
            ("w_tim", &mut self.w_tim),
            ("u_tim", &mut self.u_tim),
            ("b_tim", &mut self.b_tim),
            ("w_fre", &mut self.w_fre),
            ("u_fre", &mut self.u_fre),
            ("b_fre", &mut self.b_fre),
            ("w_i", &mut self.w_i),
            ("u_i", &mut self.u_i),
            ("b_i", &mut self.b_i),
            ("w_g", &mut self.w_g),
            ("u_g", &mut self.u_g),
            ("b_g", &mut self.b_g),
            ("w_o", &mut self.w_o),
            ("u_o", &mut self.u_o),
            ("b_o", &mut self.b_o),
            ("wavelet.w_a", &mut self.wavelet.w_a),
            ("wavelet.b_a", &mut self.wavelet.b_a),
            ("wavelet.w_b", &mut self.wavelet.w_b),
            ("wavelet.b_b", &mut self.wavelet.b_b),
            ("w_c", &mut self.w_c),
            ("b_c", &mut self.b_c),
        ]
    }
}

/// Tape handles for registered [`CellParams`].
#[derive(Debug, Clone, Copy)]
pub struct CellNodes {
    pub w_ste: NodeId,
    pub u_ste: NodeId,
    pub b_ste: NodeId,
    pub w_tim: NodeId,
    pub u_tim: NodeId,
    pub b_tim: NodeId,
    pub w_fre: NodeId,
    pub u_fre: NodeId,
    pub b_fre: NodeId,
    pub w_i: NodeId,
    pub u_i: NodeId,
    pub b_i: NodeId,
    pub w_g: NodeId,
    pub u_g: NodeId,
    pub b_g: NodeId,
    pub w_o: NodeId,
    pub u_o: NodeId,
    pub b_o: NodeId,
    pub wavelet: WaveletNodes,
    pub w_c: NodeId,
    pub b_c: NodeId,
    pub fixed_a: f64,
    pub fixed_b: f64,
}

/// Recurrent state carried between steps: the amplitude tensor and the
/// hidden vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    /// `[D, J, K]`, nonnegative.
    pub amplitude: Tensor,
    /// `[D]`.
    pub hidden: Tensor,
}

impl CellState {
    /// The zero initial state.
    pub fn zeros(cfg: &CellConfig) -> Self {
        CellState {
            amplitude: Tensor::zeros(vec![cfg.d, cfg.j, cfg.k]),
            hidden: Tensor::zeros(vec![cfg.d]),
        }
    }

    pub fn validate(&self, cfg: &CellConfig) -> Result<()> {
        if self.amplitude.shape() != [cfg.d, cfg.j, cfg.k] || self.hidden.shape() != [cfg.d] {
            return Err(CoreError::dim(
                "CellState",
                format!("A [{},{},{}], h [{}]", cfg.d, cfg.j, cfg.k, cfg.d),
                format!("{:?}, {:?}", self.amplitude.shape(), self.hidden.shape()),
            ));
        }
        if !self.amplitude.all_finite() || !self.hidden.all_finite() {
            return Err(CoreError::NonFinite("CellState"));
        }
        if self.amplitude.data().iter().any(|&v| v < 0.0) {
            return Err(CoreError::Invariant("carried amplitude has negative entries".into()));
        }
        Ok(())
    }

    /// Inserts the state as (non-parameter) leaves.
    pub fn leaf(&self, tape: &mut Tape) -> CellStateNodes {
        CellStateNodes {
            amplitude: tape.leaf(self.amplitude.clone()),
            hidden: tape.leaf(self.hidden.clone()),
        }
    }
}

/// Tape handles for the carried state.
#[derive(Debug, Clone, Copy)]
pub struct CellStateNodes {
    pub amplitude: NodeId,
    pub hidden: NodeId,
}

/// Tape handles for every intermediate of one step.
#[derive(Debug, Clone, Copy)]
pub struct CellStepNodes {
    /// Joint forget gate `F` (`[D, J, K]`).
    pub forget: NodeId,
    /// Input gate output `ig` (`[D]`).
    pub input_gate: NodeId,
    /// Wavelet scale `a` (`[1]`).
    pub scale: NodeId,
    /// Wavelet translation `b` (`[1]`).
    pub shift: NodeId,
    /// Morlet coefficients (`[J, K]` each part).
    pub psi: WaveletCoeffNodes,
    /// Updated state, real part (`[D, J, K]`).
    pub c_re: NodeId,
    /// Updated state, imaginary part (`[D, J, K]`).
    pub c_im: NodeId,
    /// Amplitude `A = |C|` (`[D, J, K]`).
    pub amplitude: NodeId,
    /// Projection `c~` (`[D]`).
    pub projected: NodeId,
    /// Output gate `o` (`[D]`).
    pub output_gate: NodeId,
    /// Hidden state `h` (`[D]`).
    pub hidden: NodeId,
}

/// Materialized intermediates of one step, for inspection and tests.
#[derive(Debug, Clone)]
pub struct CellTrace {
    pub forget: Tensor,
    pub input_gate: Tensor,
    pub scale: f64,
    pub shift: f64,
    pub psi: WaveletCoeffs,
    pub c_re: Tensor,
    pub c_im: Tensor,
    pub amplitude: Tensor,
    pub phase: Tensor,
    pub projected: Tensor,
    pub output_gate: Tensor,
    pub hidden: Tensor,
}

impl CellTrace {
    pub fn from_nodes(tape: &Tape, nodes: &CellStepNodes) -> Result<Self> {
        let c_re = tape.value(nodes.c_re).clone();
        let c_im = tape.value(nodes.c_im).clone();
        let phase = phase(&c_re, &c_im)?;
        Ok(CellTrace {
            forget: tape.value(nodes.forget).clone(),
            input_gate: tape.value(nodes.input_gate).clone(),
            scale: tape.value(nodes.scale).scalar_value()?,
            shift: tape.value(nodes.shift).scalar_value()?,
            psi: WaveletCoeffs {
                re: tape.value(nodes.psi.re).clone(),
                im: tape.value(nodes.psi.im).clone(),
            },
            c_re,
            c_im,
            amplitude: tape.value(nodes.amplitude).clone(),
            phase,
            projected: tape.value(nodes.projected).clone(),
            output_gate: tape.value(nodes.output_gate).clone(),
            hidden: tape.value(nodes.hidden).clone(),
        })
    }
}

fn gate_preact(
    tape: &mut Tape,
    w: NodeId,
    x: NodeId,
    u: NodeId,
    h: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    tape.affine2(w, x, u, h, b)
}

/// Joint forget gate: `F = f_ste (x) f_fre (x) f_tim` in `[0,1]^{D x J x K}`.
pub fn joint_forget(tape: &mut Tape, x: NodeId, h_prev: NodeId, p: &CellNodes) -> Result<NodeId> {
    let ste = gate_preact(tape, p.w_ste, x, p.u_ste, h_prev, p.b_ste)?;
    let ste = tape.sigmoid(ste)?;
    let tim = gate_preact(tape, p.w_tim, x, p.u_tim, h_prev, p.b_tim)?;
    let tim = tape.sigmoid(tim)?;
    let fre = gate_preact(tape, p.w_fre, x, p.u_fre, h_prev, p.b_fre)?;
    let fre = tape.sigmoid(fre)?;
    tape.outer3(ste, fre, tim)
}

/// Input gate: `ig = sigmoid(W_i x + U_i h + b_i) * tanh(W_g x + U_g h + b_g)`.
pub fn input_gate(tape: &mut Tape, x: NodeId, h_prev: NodeId, p: &CellNodes) -> Result<NodeId> {
    let i = gate_preact(tape, p.w_i, x, p.u_i, h_prev, p.b_i)?;
    let i = tape.sigmoid(i)?;
    let g = gate_preact(tape, p.w_g, x, p.u_g, h_prev, p.b_g)?;
    let g = tape.tanh(g)?;
    tape.mul(i, g)
}

/// State update: `C = F o A_prev + ig (x) psi`, `A = |C|`.
///
/// Returns `(C_re, C_im, A)`. The carried amplitude must be nonnegative.
pub fn cell_update(
    tape: &mut Tape,
    forget: NodeId,
    amp_prev: NodeId,
    ig: NodeId,
    psi: &WaveletCoeffNodes,
) -> Result<(NodeId, NodeId, NodeId)> {
    if tape.value(amp_prev).data().iter().any(|&v| v < 0.0) {
        return Err(CoreError::Invariant("carried amplitude has negative entries".into()));
    }
    let fc = tape.mul(forget, amp_prev)?;
    let inj_re = tape.outer_vec_mat(ig, psi.re)?;
    let c_re = tape.add(fc, inj_re)?;
    let c_im = tape.outer_vec_mat(ig, psi.im)?;
    let re_sq = tape.square(c_re)?;
    let im_sq = tape.square(c_im)?;
    let mag_sq = tape.add(re_sq, im_sq)?;
    let amp = tape.sqrt(mag_sq)?;
    Ok((c_re, c_im, amp))
}

/// Elementwise `arctan(Re / Im)` of the updated state, in
/// `[-pi/2, pi/2]`. Entries with `Im == 0` take the limit value
/// `sign(Re) * pi/2`. Diagnostic only; never fed forward.
pub fn phase(c_re: &Tensor, c_im: &Tensor) -> Result<Tensor> {
    if c_re.shape() != c_im.shape() {
        return Err(CoreError::dim(
            "phase",
            format!("{:?}", c_re.shape()),
            format!("{:?}", c_im.shape()),
        ));
    }
    let data = c_re
        .data()
        .iter()
        .zip(c_im.data())
        .map(|(&re, &im)| {
            if im == 0.0 {
                if re == 0.0 {
                    0.0
                } else {
                    re.signum() * std::f64::consts::FRAC_PI_2
                }
            } else {
                (re / im).atan()
            }
        })
        .collect();
    Tensor::new(c_re.shape().to_vec(), data)
}

/// Projection to the state dimension:
/// `c~ = sum_{k,j} (W_c^{k,j} A[:,j,k] + b_c^{k,j})`.
pub fn project(tape: &mut Tape, amp: NodeId, p: &CellNodes) -> Result<NodeId> {
    tape.project_kj(p.w_c, amp, p.b_c)
}

fn expect_shape(tape: &Tape, id: NodeId, want: &[usize], what: &'static str) -> Result<()> {
    if tape.value(id).shape() != want {
        return Err(CoreError::dim(what, format!("{want:?}"), format!("{:?}", tape.value(id).shape())));
    }
    Ok(())
}

/// One full cell step at time index `t`.
pub fn cell_step(
    tape: &mut Tape,
    x: NodeId,
    state_prev: &CellStateNodes,
    t: f64,
    p: &CellNodes,
    cfg: &CellConfig,
) -> Result<(CellStateNodes, CellStepNodes)> {
    expect_shape(tape, x, &[cfg.input_dim], "cell_step input")?;
    expect_shape(tape, state_prev.amplitude, &[cfg.d, cfg.j, cfg.k], "cell_step state A")?;
    expect_shape(tape, state_prev.hidden, &[cfg.d], "cell_step state h")?;

    let forget = joint_forget(tape, x, state_prev.hidden, p)?;
    let ig = input_gate(tape, x, state_prev.hidden, p)?;
    let (scale, shift) = if cfg.adaptive {
        adapt_params(tape, ig, &p.wavelet)?
    } else {
        (
            tape.leaf(Tensor::scalar(p.fixed_a)),
            tape.leaf(Tensor::scalar(p.fixed_b)),
        )
    };
    let psi = morlet_coefficients(tape, scale, shift, t, cfg.omega0, cfg.j, cfg.k)?;
    let (c_re, c_im, amplitude) = cell_update(tape, forget, state_prev.amplitude, ig, &psi)?;
    let projected = project(tape, amplitude, p)?;

    let o = gate_preact(tape, p.w_o, x, p.u_o, state_prev.hidden, p.b_o)?;
    let output_gate = tape.sigmoid(o)?;
    let squashed = tape.tanh(projected)?;
    let hidden = tape.mul(output_gate, squashed)?;

    expect_shape(tape, forget, &[cfg.d, cfg.j, cfg.k], "cell_step F")?;
    expect_shape(tape, ig, &[cfg.d], "cell_step ig")?;
    expect_shape(tape, psi.re, &[cfg.j, cfg.k], "cell_step psi")?;
    expect_shape(tape, amplitude, &[cfg.d, cfg.j, cfg.k], "cell_step A")?;
    expect_shape(tape, projected, &[cfg.d], "cell_step c~")?;
    expect_shape(tape, hidden, &[cfg.d], "cell_step h")?;

    Ok((
        CellStateNodes { amplitude, hidden },
        CellStepNodes {
            forget,
            input_gate: ig,
            scale,
            shift,
            psi,
            c_re,
            c_im,
            amplitude,
            projected,
            output_gate,
            hidden,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn tiny_cfg(d: usize, k: usize, j: usize, input_dim: usize) -> CellConfig {
        CellConfig {
            d,
            k,
            j,
            input_dim,
            adaptive: true,
            omega0: 16.0,
        }
    }

    fn zero_params(cfg: &CellConfig) -> CellParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = CellParams::init(cfg, &mut rng);
        for (_, t) in p.named_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        p
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn joint_forget_zero_params_gives_eighth() {
        let cfg = tiny_cfg(2, 2, 2, 3);
        let p = zero_params(&cfg);
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, "c").unwrap();
        let x = tape.leaf(Tensor::vector(&[0.7, -0.3, 0.1]));
        let h = tape.leaf(Tensor::zeros(vec![2]));
        let f = joint_forget(&mut tape, x, h, &nodes).unwrap();
        for &v in tape.value(f).data() {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_forget_saturated_state_gate_gives_quarter() {
        let cfg = tiny_cfg(2, 2, 2, 3);
        let mut p = zero_params(&cfg);
        for v in p.b_ste.data_mut() {
            *v = 50.0;
        }
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, "c").unwrap();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let h = tape.leaf(Tensor::zeros(vec![2]));
        let f = joint_forget(&mut tape, x, h, &nodes).unwrap();
        for &v in tape.value(f).data() {
            assert!((v - 0.25).abs() < 1e-12, "v={v}");
        }
    }

    #[test]
    fn joint_forget_matches_broadcast_oracle() {
        let cfg = tiny_cfg(2, 2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CellParams::init(&cfg, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, "c").unwrap();
        let xn = tape.leaf(Tensor::vector(&x));
        let hn = tape.leaf(Tensor::vector(&h));
        let f = joint_forget(&mut tape, xn, hn, &nodes).unwrap();

        let preact = |w: &Tensor, u: &Tensor, b: &Tensor, row: usize| {
            let mut s = b.data()[row];
            for (c, &xv) in x.iter().enumerate() {
                s += w.at2(row, c) * xv;
            }
            for (c, &hv) in h.iter().enumerate() {
                s += u.at2(row, c) * hv;
            }
            s
        };
        for d in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let ste = sigmoid(preact(&p.w_ste, &p.u_ste, &p.b_ste, d));
                    let fre = sigmoid(preact(&p.w_fre, &p.u_fre, &p.b_fre, j));
                    let tim = sigmoid(preact(&p.w_tim, &p.u_tim, &p.b_tim, k));
                    let want = ste * fre * tim;
                    let got = tape.value(f).at3(d, j, k);
                    assert!((got - want).abs() < 1e-14, "[{d},{j},{k}] {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn input_gate_zero_params_is_zero() {
        let cfg = tiny_cfg(3, 2, 2, 2);
        let p = zero_params(&cfg);
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, "c").unwrap();
        let x = tape.leaf(Tensor::vector(&[0.4, 0.9]));
        let h = tape.leaf(Tensor::zeros(vec![3]));
        let ig = input_gate(&mut tape, x, h, &nodes).unwrap();
        assert_eq!(tape.value(ig).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn input_gate_saturates_to_one() {
        let cfg = tiny_cfg(2, 2, 2, 2);
        let mut p = zero_params(&cfg);
        for v in p.b_i.data_mut() {
            *v = 50.0;
        }
        for v in p.b_g.data_mut() {
            *v = 50.0;
        }
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, "c").unwrap();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        let h = tape.leaf(Tensor::zeros(vec![2]));
        let ig = input_gate(&mut tape, x, h, &nodes).unwrap();
        for &v in tape.value(ig).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gate_matches_sigma_tanh_oracle() {
        let cfg = tiny_cfg(2, 2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = CellParams::init(&cfg, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let nodes = p.register(&mut tape, "c").unwrap();
        let xn = tape.leaf(Tensor::vector(&x));
        let hn = tape.leaf(Tensor::vector(&h));
        let ig = input_gate(&mut tape, xn, hn, &nodes).unwrap();

        for d in 0..2 {
            let mut zi = p.b_i.data()[d];
            let mut zg = p.b_g.data()[d];
            for (c, &xv) in x.iter().enumerate() {
                zi += p.w_i.at2(d, c) * xv;
                zg += p.w_g.at2(d, c) * xv;
            }
            for (c, &hv) in h.iter().enumerate() {
                zi += p.u_i.at2(d, c) * hv;
                zg += p.u_g.at2(d, c) * hv;
            }
            let want = sigmoid(zi) * zg.tanh();
            let got = tape.value(ig).data()[d];
            assert!((got - want).abs() < 1e-14);
            assert!(got > -1.0 && got < 1.0);
        }
    }

    fn leaf_psi(tape: &mut Tape, re: Tensor, im: Tensor) -> WaveletCoeffNodes {
        WaveletCoeffNodes {
            re: tape.leaf(re),
            im: tape.leaf(im),
        }
    }

    #[test]
    fn cell_update_zero_injection_keeps_gated_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let forget_t = Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let amp_t = Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        let forget = tape.leaf(forget_t.clone());
        let amp_prev = tape.leaf(amp_t.clone());
        let ig = tape.leaf(Tensor::zeros(vec![2]));
        let psi = leaf_psi(
            &mut tape,
            Tensor::full(vec![2, 2], 0.3),
            Tensor::full(vec![2, 2], -0.4),
        );
        let (_, _, amp) = cell_update(&mut tape, forget, amp_prev, ig, &psi).unwrap();
        for i in 0..8 {
            assert_eq!(tape.value(amp).data()[i], forget_t.data()[i] * amp_t.data()[i]);
        }
    }

    #[test]
    fn cell_update_zero_state_real_psi_gives_abs_injection() {
        let mut tape = Tape::new();
        let forget = tape.leaf(Tensor::full(vec![2, 2, 2], 0.5));
        let amp_prev = tape.leaf(Tensor::zeros(vec![2, 2, 2]));
        let ig = tape.leaf(Tensor::vector(&[0.8, -0.6]));
        let psi_re = Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let psi = leaf_psi(&mut tape, psi_re.clone(), Tensor::zeros(vec![2, 2]));
        let (_, _, amp) = cell_update(&mut tape, forget, amp_prev, ig, &psi).unwrap();
        let ig_v = [0.8, -0.6];
        for d in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let want = (ig_v[d] * psi_re.at2(j, k)).abs();
                    assert_eq!(tape.value(amp).at3(d, j, k), want);
                }
            }
        }
    }

    #[test]
    fn cell_update_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut tape = Tape::new();
        let forget_t = Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let amp_t = Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.random_range(0.0..1.5)).collect()).unwrap();
        let ig_t = Tensor::vector(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let re_t = Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let im_t = Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let forget = tape.leaf(forget_t.clone());
        let amp_prev = tape.leaf(amp_t.clone());
        let ig = tape.leaf(ig_t.clone());
        let psi = leaf_psi(&mut tape, re_t.clone(), im_t.clone());
        let (c_re, c_im, amp) = cell_update(&mut tape, forget, amp_prev, ig, &psi).unwrap();

        for d in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let fc = forget_t.at3(d, j, k) * amp_t.at3(d, j, k);
                    let re = fc + ig_t.data()[d] * re_t.at2(j, k);
                    let im = ig_t.data()[d] * im_t.at2(j, k);
                    let want = (re * re + im * im).sqrt();
                    assert!((tape.value(c_re).at3(d, j, k) - re).abs() < 1e-15);
                    assert!((tape.value(c_im).at3(d, j, k) - im).abs() < 1e-15);
                    assert!((tape.value(amp).at3(d, j, k) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cell_update_rejects_negative_carried_amplitude() {
        let mut tape = Tape::new();
        let forget = tape.leaf(Tensor::full(vec![1, 1, 1], 0.5));
        let amp_prev = tape.leaf(Tensor::full(vec![1, 1, 1], -0.1));
        let ig = tape.leaf(Tensor::vector(&[0.0]));
        let psi = leaf_psi(&mut tape, Tensor::zeros(vec![1, 1]), Tensor::zeros(vec![1, 1]));
        assert!(matches!(
            cell_update(&mut tape, forget, amp_prev, ig, &psi),
            Err(CoreError::Invariant(_))
        ));
    }

    #[test]
    fn phase_conventions() {
        let re = Tensor::vector(&[0.0, 1.0, 1.0, -2.0, 0.0]);
        let im = Tensor::vector(&[1.0, 1.0, 0.0, 0.0, 0.0]);
        let ph = phase(&re, &im).unwrap();
        let pi_2 = std::f64::consts::FRAC_PI_2;
        assert_eq!(ph.data()[0], 0.0);
        assert!((ph.data()[1] - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert_eq!(ph.data()[2], pi_2);
        assert_eq!(ph.data()[3], -pi_2);
        assert_eq!(ph.data()[4], 0.0);
        assert!(ph.data().iter().all(|v| v.abs() <= pi_2));
    }

    #[test]
    fn project_identity_weights_sum_slices() {
        // W_c^{k,j} = I, b_c = 0, A = 1 everywhere, K = J = 2: each (k,j)
        // adds the ones vector, so c~ = 4 * ones.
        let (d, k, j) = (2, 2, 2);
        let mut w = Tensor::zeros(vec![k, j, d, d]);
        for kk in 0..k {
            for jj in 0..j {
                for p in 0..d {
                    let base = ((kk * j + jj) * d + p) * d;
                    w.data_mut()[base + p] = 1.0;
                }
            }
        }
        let cfg = tiny_cfg(d, k, j, 2);
        let mut params = zero_params(&cfg);
        params.w_c = w;
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, "c").unwrap();
        let amp = tape.leaf(Tensor::full(vec![d, j, k], 1.0));
        let out = project(&mut tape, amp, &nodes).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 4.0]);
    }

    #[test]
    fn project_zero_weights_sum_biases() {
        let cfg = tiny_cfg(2, 2, 2, 2);
        let mut params = zero_params(&cfg);
        params.b_c = Tensor::new(vec![2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, "c").unwrap();
        let amp = tape.leaf(Tensor::full(vec![2, 2, 2], 3.0));
        let out = project(&mut tape, amp, &nodes).unwrap();
        // Sum of b_c over (k,j) per output dim: (1+3+5+7, 2+4+6+8).
        assert_eq!(tape.value(out).data(), &[16.0, 20.0]);
    }

    #[test]
    fn project_matches_double_loop_oracle() {
        let (d, k, j) = (2, 2, 2);
        let cfg = tiny_cfg(d, k, j, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = CellParams::init(&cfg, &mut rng);
        let amp_t = Tensor::new(vec![d, j, k], (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, "c").unwrap();
        let amp = tape.leaf(amp_t.clone());
        let out = project(&mut tape, amp, &nodes).unwrap();

        let mut want = vec![0.0; d];
        for kk in 0..k {
            for jj in 0..j {
                for p in 0..d {
                    let mut acc = params.b_c.data()[(kk * j + jj) * d + p];
                    for dd in 0..d {
                        acc += params.w_c.data()[((kk * j + jj) * d + p) * d + dd] * amp_t.at3(dd, jj, kk);
                    }
                    want[p] += acc;
                }
            }
        }
        for p in 0..d {
            assert!((tape.value(out).data()[p] - want[p]).abs() < 1e-14);
        }
    }

    #[test]
    fn cell_step_all_zero_gives_zero_hidden() {
        let cfg = tiny_cfg(3, 2, 2, 4);
        let params = zero_params(&cfg);
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, "c").unwrap();
        let state = CellState::zeros(&cfg).leaf(&mut tape);
        let x = tape.leaf(Tensor::zeros(vec![4]));
        let (next, _) = cell_step(&mut tape, x, &state, 0.0, &nodes, &cfg).unwrap();
        assert_eq!(tape.value(next.hidden).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_adaptive_step_uses_fixed_wavelet_parameters() {
        let mut cfg = tiny_cfg(2, 2, 2, 3);
        cfg.adaptive = false;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = CellParams::init(&cfg, &mut rng);
        assert_eq!(params.fixed_a, 1.0);
        assert_eq!(params.fixed_b, 0.0);

        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, "c").unwrap();
        let state = CellState::zeros(&cfg).leaf(&mut tape);
        let x = tape.leaf(Tensor::vector(&[0.2, -0.7, 0.5]));
        let (_, step) = cell_step(&mut tape, x, &state, 3.0, &nodes, &cfg).unwrap();
        let trace = CellTrace::from_nodes(&tape, &step).unwrap();
        assert_eq!(trace.scale, 1.0);
        assert_eq!(trace.shift, 0.0);
        // psi must equal the fixed-parameter coefficients at t = 3.
        for j in 0..2 {
            for k in 0..2 {
                let arg = 3.0 / (2.0f64).powi(j as i32) - k as f64;
                let env = (-arg * arg).exp();
                assert!((trace.psi.re.at2(j, k) - (16.0 * arg).cos() * env).abs() < 1e-12);
                assert!((trace.psi.im.at2(j, k) - (16.0 * arg).sin() * env).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cell_step_rejects_wrong_input_width() {
        let cfg = tiny_cfg(2, 2, 2, 3);
        let params = zero_params(&cfg);
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, "c").unwrap();
        let state = CellState::zeros(&cfg).leaf(&mut tape);
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(cell_step(&mut tape, x, &state, 0.0, &nodes, &cfg).is_err());
    }

    #[test]
    fn single_step_gradients_match_finite_differences() {
        let cfg = tiny_cfg(4, 2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let params = CellParams::init(&cfg, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let amp0 = Tensor::new(
            vec![4, 2, 2],
            (0..16).map(|_| rng.random_range(0.0..0.5)).collect(),
        )
        .unwrap();
        let h0: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();

        let mut flat = BTreeMap::new();
        params.visit("cell", &mut |name, t| {
            flat.insert(name, t.clone());
        });

        let report = crate::gradcheck::finite_diff_check(
            |tape, ps| {
                let mut restored = params.clone();
                restored.visit_mut("cell", &mut |name, t| {
                    *t = ps[&name].clone();
                });
                let nodes = restored.register(tape, "cell").unwrap();
                let state = CellStateNodes {
                    amplitude: tape.leaf(amp0.clone()),
                    hidden: tape.leaf(Tensor::vector(&h0)),
                };
                let xn = tape.leaf(Tensor::vector(&x));
                let (next, _) = cell_step(tape, xn, &state, 1.0, &nodes, &cfg)?;
                let sh = tape.sum_all(next.hidden)?;
                let sa = tape.sum_all(next.amplitude)?;
                tape.add(sh, sa)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(
            report.passes(1e-4, 1e-7),
            "rel={} abs={}",
            report.max_rel_error,
            report.max_abs_error
        );
    }

    #[test]
    fn amplitude_stays_nonnegative_and_hidden_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..200 {
            let cfg = tiny_cfg(
                rng.random_range(1..5),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..5),
            );
            let params = CellParams::init(&cfg, &mut rng);
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape, "c").unwrap();
            let mut state = CellState::zeros(&cfg).leaf(&mut tape);
            for t in 0..3 {
                let x: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let xn = tape.leaf(Tensor::vector(&x));
                let (next, _) = cell_step(&mut tape, xn, &state, t as f64, &nodes, &cfg).unwrap();
                assert!(tape.value(next.amplitude).data().iter().all(|&v| v >= 0.0));
                assert!(tape.value(next.hidden).data().iter().all(|&v| v > -1.0 && v < 1.0));
                state = next;
            }
        }
    }

    #[test]
    fn saturated_forget_with_zero_input_gate_preserves_amplitude() {
        // ig = sigmoid(-50) * tanh(0) = 0 exactly; forget gates saturate
        // towards 1, so the carried amplitude must persist.
        let cfg = tiny_cfg(2, 2, 2, 3);
        let mut params = zero_params(&cfg);
        for b in [&mut params.b_ste, &mut params.b_tim, &mut params.b_fre] {
            for v in b.data_mut() {
                *v = 50.0;
            }
        }
        for v in params.b_i.data_mut() {
            *v = -50.0;
        }
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape, "c").unwrap();
        let amp0 = Tensor::new(vec![2, 2, 2], (1..=8).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut state = CellStateNodes {
            amplitude: tape.leaf(amp0.clone()),
            hidden: tape.leaf(Tensor::zeros(vec![2])),
        };
        for t in 0..5 {
            let x = tape.leaf(Tensor::zeros(vec![3]));
            let (next, _) = cell_step(&mut tape, x, &state, t as f64, &nodes, &cfg).unwrap();
            for i in 0..8 {
                let drift = (tape.value(next.amplitude).data()[i] - amp0.data()[i]).abs();
                assert!(drift < 1e-9, "t={t} i={i} drift={drift}");
            }
            state = next;
        }
    }
}
