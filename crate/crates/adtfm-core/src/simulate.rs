//! Physics-based synthetic waveform generation.
//!
//! The transient model is a series R-L-C loop driven by the zero-sequence
//! voltage `U_m sin(wt + phi)`. In the underdamped regime
//! (`R0 < 2 sqrt(L0/C)`) the capacitive current is a decaying free
//! oscillation at `omega_f` superposed on the steady power-frequency
//! component:
//!
//! `i_C(t) = I_Cm [ (w_f/w sin(phi) sin(w_f t) - cos(phi) cos(w_f t)) e^{-dt}
//!                  + cos(wt + phi) ]`
//!
//! The steady term carries the inception angle `phi` so that
//! `i_C(0) = 0` holds identically (current continuity at the fault
//! instant); see [`capacitive_current_as_printed`] for the uncorrected
//! variant kept for comparison. The arc-suppression-coil current is
//! `i_L(t) = I_Lm [ cos(phi) e^{-t/tau_L} - cos(wt + phi) ]`, also zero
//! at the inception instant.
//!
//! Fault records superpose class-dependent voltage sags, harmonic
//! distortion, and these transient currents on clean 120-degree-shifted
//! sinusoids; templates mimic typical incipient-fault morphology
//! qualitatively and make no claim of full physical fidelity.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, FaultClass, Phase, PhaseSet, WaveformRecord, CHANNELS};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Series-loop parameters of the transient circuit model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitParams {
    /// Loop resistance, ohms.
    pub r0: f64,
    /// Loop inductance, henries.
    pub l0: f64,
    /// Phase-to-ground capacitance, farads.
    pub c: f64,
    /// Zero-sequence voltage amplitude, volts (or per-unit).
    pub u_m: f64,
    /// Power angular frequency, rad/s.
    pub omega: f64,
    /// Fault inception angle, radians.
    pub phi: f64,
    /// Free-oscillation angular frequency, rad/s.
    pub omega_f: f64,
    /// Inductive branch time constant, seconds.
    pub tau_l: f64,
    /// Inductive current amplitude, amps.
    pub i_lm: f64,
}

impl Default for CircuitParams {
    fn default() -> Self {
        let u_m = 1.0;
        let omega = TAU * 50.0;
        let l0 = 0.1;
        CircuitParams {
            r0: 50.0,
            l0,
            c: 10e-6,
            u_m,
            omega,
            phi: 0.0,
            omega_f: TAU * 1000.0,
            tau_l: 0.05,
            i_lm: u_m / (omega * l0),
        }
    }
}

impl CircuitParams {
    /// Attenuation coefficient of the free oscillation, `R0 / (2 L0)`.
    pub fn delta(&self) -> f64 {
        self.r0 / (2.0 * self.l0)
    }

    /// Steady capacitive current amplitude, `U_m * omega * C`.
    pub fn i_cm(&self) -> f64 {
        self.u_m * self.omega * self.c
    }

    /// True when `R0 < 2 sqrt(L0 / C)`, the oscillatory regime.
    pub fn is_underdamped(&self) -> bool {
        self.r0 < 2.0 * (self.l0 / self.c).sqrt()
    }

    /// Damped natural frequency of the loop, `sqrt(1/(L0 C) - delta^2)`.
    ///
    /// Parameter sets whose `omega_f` equals this value make the closed
    /// form consistent with the loop differential equation.
    pub fn natural_frequency(&self) -> f64 {
        (1.0 / (self.l0 * self.c) - self.delta() * self.delta()).sqrt()
    }
}

/// Transient capacitive current at `t` seconds after fault inception
/// (corrected steady-state term; zero at `t = 0` for every `phi`).
pub fn capacitive_current(cp: &CircuitParams, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(CoreError::Contract(format!("time must be >= 0, got {t}")));
    }
    if !cp.is_underdamped() {
        return Err(CoreError::Contract(format!(
            "aperiodic regime: R0 = {} >= 2 sqrt(L0/C) = {}; only the oscillatory regime is modeled",
            cp.r0,
            2.0 * (cp.l0 / cp.c).sqrt()
        )));
    }
    let (sin_phi, cos_phi) = cp.phi.sin_cos();
    let transient =
        (cp.omega_f / cp.omega * sin_phi * (cp.omega_f * t).sin() - cos_phi * (cp.omega_f * t).cos())
            * (-t * cp.delta()).exp();
    let steady = (cp.omega * t + cp.phi).cos();
    Ok(cp.i_cm() * (transient + steady))
}

/// The capacitive-current expression with its two misprints left in
/// (`cos(w)` as a constant factor and a steady term at `omega_f`).
/// Kept only to document the difference; `i_C(0) = 0` fails here.
pub fn capacitive_current_as_printed(cp: &CircuitParams, t: f64) -> f64 {
    let transient = (cp.omega_f / cp.omega * cp.phi.sin() * (cp.omega_f * t).sin()
        - cp.omega.cos() * (cp.omega_f * t).cos())
        * (-t * cp.delta()).exp();
    let steady = (cp.omega_f * t).cos();
    cp.i_cm() * (transient + steady)
}

/// Arc-suppression-coil current at `t` seconds after fault inception:
/// decaying DC component plus the steady AC component.
pub fn inductive_current(cp: &CircuitParams, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(CoreError::Contract(format!("time must be >= 0, got {t}")));
    }
    if cp.tau_l <= 0.0 {
        return Err(CoreError::Config(format!("tau_L must be positive, got {}", cp.tau_l)));
    }
    let dc = cp.phi.cos() * (-t / cp.tau_l).exp();
    let ac = (cp.omega * t + cp.phi).cos();
    Ok(cp.i_lm * (dc - ac))
}

/// What to synthesize for one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultSpec {
    pub class: FaultClass,
    pub fault_phases: PhaseSet,
    /// Sample index of fault inception.
    pub start_sample: usize,
    /// Fault duration in cycles (sub-cycle faults stay <= 1).
    pub duration_cycles: f64,
    /// Voltage sag depth on faulted phases, fraction of amplitude.
    pub sag_depth: f64,
    /// Gaussian noise standard deviation, per-unit.
    pub noise_std: f64,
}

impl FaultSpec {
    /// Class template: typical phase count, duration, and sag depth.
    pub fn template(class: FaultClass) -> Self {
        let (phases, duration_cycles, sag_depth): (&[Phase], f64, f64) = match class {
            FaultClass::Sif => (&[Phase::A], 0.4, 0.40),
            FaultClass::Mif => (&[Phase::A], 2.5, 0.40),
            FaultClass::Sgf => (&[Phase::A], 1.6, 0.45),
            FaultClass::Hrgf => (&[Phase::A], 1.2, 0.12),
            FaultClass::Ipsf => (&[Phase::A, Phase::B], 1.3, 0.30),
            FaultClass::Tgf => (&[Phase::A, Phase::B], 1.3, 0.55),
            FaultClass::Mtf => (&[Phase::A, Phase::B, Phase::C], 2.0, 0.0),
            FaultClass::Normal => (&[], 0.0, 0.0),
        };
        FaultSpec {
            class,
            fault_phases: PhaseSet::from_phases(phases),
            start_sample: 10,
            duration_cycles,
            sag_depth,
            noise_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class.is_normal() != self.fault_phases.is_empty() {
            return Err(CoreError::Invariant(
                "fault_phases must be empty exactly for Normal".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.sag_depth) {
            return Err(CoreError::Config(format!("sagDepth must be in [0, 1), got {}", self.sag_depth)));
        }
        if self.noise_std < 0.0 {
            return Err(CoreError::Config("noiseStd must be >= 0".into()));
        }
        match self.class {
            FaultClass::Sif if self.duration_cycles > 1.0 => Err(CoreError::Config(format!(
                "sub-cycle faults must last <= 1 cycle, got {}",
                self.duration_cycles
            ))),
            FaultClass::Mif if !(self.duration_cycles > 1.0 && self.duration_cycles <= 4.0) => {
                Err(CoreError::Config(format!(
                    "multi-cycle faults must last in (1, 4] cycles, got {}",
                    self.duration_cycles
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Relative strength of the injected transient current per class.
fn transient_gain(class: FaultClass) -> f64 {
    match class {
        FaultClass::Hrgf => 0.25,
        FaultClass::Mtf => 0.0,
        _ => 1.0,
    }
}

const PHASE_ANGLES: [f64; 3] = [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0];
const LOAD_CURRENT: f64 = 0.8;
const LOAD_ANGLE: f64 = 0.3;

/// Synthesizes one labeled record of `cycles` cycles at
/// `samples_per_cycle` samples each. Identical seeds give bit-identical
/// records.
pub fn synth_record(
    spec: &FaultSpec,
    cp: &CircuitParams,
    samples_per_cycle: usize,
    cycles: usize,
    seed: u64,
    id: &str,
) -> Result<WaveformRecord> {
    spec.validate()?;
    if samples_per_cycle == 0 || cycles == 0 {
        return Err(CoreError::Config("samplesPerCycle and cycles must be >= 1".into()));
    }
    if !spec.class.is_normal() && !cp.is_underdamped() {
        return Err(CoreError::Contract(
            "fault synthesis requires underdamped circuit parameters".into(),
        ));
    }

    let total = samples_per_cycle * cycles;
    let dt = TAU / cp.omega / samples_per_cycle as f64;
    let fault_len = (spec.duration_cycles * samples_per_cycle as f64).round() as usize;
    let fault_end = (spec.start_sample + fault_len).min(total);
    let in_window = |i: usize| !spec.class.is_normal() && i >= spec.start_sample && i < fault_end;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| CoreError::Config(e.to_string()))?;
    let t0 = spec.start_sample as f64 * dt;
    let gain = transient_gain(spec.class);

    let mut data = vec![0.0; total * CHANNELS];
    for i in 0..total {
        let t = i as f64 * dt;
        let row = &mut data[i * CHANNELS..(i + 1) * CHANNELS];
        for p in Phase::ALL {
            let angle = cp.omega * t + PHASE_ANGLES[p.index()];
            let mut v = cp.u_m * angle.sin();
            let mut cur = LOAD_CURRENT * cp.u_m * (angle - LOAD_ANGLE).sin();

            if in_window(i) && spec.fault_phases.contains(p) {
                v *= 1.0 - spec.sag_depth;
                if spec.class == FaultClass::Mtf {
                    // Transformer faults distort rather than sag.
                    v += cp.u_m * (0.20 * (5.0 * angle).sin() + 0.10 * (2.0 * angle).sin());
                    cur += cp.u_m * 0.15 * (5.0 * angle).sin();
                } else {
                    let mut fault_cp = *cp;
                    fault_cp.phi = (cp.omega * t0 + PHASE_ANGLES[p.index()]).rem_euclid(TAU);
                    let tau = t - t0;
                    let mut inj = capacitive_current(&fault_cp, tau)? + inductive_current(&fault_cp, tau)?;
                    // Interphase faults circulate between the two phases.
                    if spec.class == FaultClass::Ipsf && p != spec.fault_phases.iter().next().expect("non-empty") {
                        inj = -inj;
                    }
                    cur += gain * inj;
                }
            }
            if spec.noise_std > 0.0 {
                v += cp.u_m * noise.sample(&mut rng);
                cur += cp.u_m * noise.sample(&mut rng);
            }
            row[p.voltage_col()] = v;
            row[p.current_col()] = cur;
        }
    }

    let record = WaveformRecord {
        id: id.to_string(),
        samples: Tensor::new(vec![total, CHANNELS], data)?,
        sample_rate_hint: samples_per_cycle,
        label: spec.class,
        fault_phases: spec.fault_phases,
    };
    record.validate()?;
    Ok(record)
}

/// Synthesizes a labeled dataset with randomized inception offsets, sag
/// depths, durations, and faulted phases per record.
///
/// Inception always falls inside the first cycle so that packetization
/// (which keeps the first cycle) retains the fault signature.
pub fn synth_dataset(
    class_counts: &BTreeMap<FaultClass, usize>,
    cp: &CircuitParams,
    samples_per_cycle: usize,
    cycles: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for class in FaultClass::ALL {
        let Some(&count) = class_counts.get(&class) else {
            continue;
        };
        for i in 0..count {
            let mut spec = FaultSpec::template(class);
            spec.noise_std = noise_std;
            if !class.is_normal() {
                spec.start_sample = master.random_range(samples_per_cycle / 20..samples_per_cycle / 3);
                spec.sag_depth = if spec.sag_depth > 0.0 {
                    (spec.sag_depth + master.random_range(-0.03..0.03)).clamp(0.0, 0.95)
                } else {
                    0.0
                };
                let jitter = master.random_range(0.9..1.1);
                spec.duration_cycles = match class {
                    FaultClass::Sif => (spec.duration_cycles * jitter).min(1.0),
                    FaultClass::Mif => (spec.duration_cycles * jitter).clamp(1.01, 4.0),
                    _ => spec.duration_cycles * jitter,
                };
                spec.fault_phases = random_phases(spec.fault_phases.len(), &mut master);
            }
            let record_seed = master.random::<u64>();
            records.push(synth_record(
                &spec,
                cp,
                samples_per_cycle,
                cycles,
                record_seed,
                &format!("{}-{:04}", class.name(), i),
            )?);
        }
    }
    Dataset::from_records(records, samples_per_cycle)
}

fn random_phases<R: Rng>(n: usize, rng: &mut R) -> PhaseSet {
    let mut all = Phase::ALL;
    // Fisher-Yates over the three phases, then take the first n.
    for i in (1..all.len()).rev() {
        let j = rng.random_range(0..=i);
        all.swap(i, j);
    }
    PhaseSet::from_phases(&all[..n.min(3)])
}
