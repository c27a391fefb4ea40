//! Dataset augmentation: phase switching and temporal sliding.
//!
//! Phase switching moves a fault onto different phases without changing
//! its class: single-phase faults swap the faulted (V, I) column pair
//! with each healthy phase's pair; multi-phase faults use the two
//! non-identity cyclic rotations of (A, B, C), which preserve the
//! three-phase sequence order. Temporal sliding cuts overlapping
//! fixed-length windows at a constant stride. Neither operator ever
//! changes a label.

use crate::data::{Dataset, Phase, WaveformRecord, CHANNELS};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Sliding-window parameters: window length `H` and stride `T_step`,
/// both in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlideConfig {
    pub window: usize,
    pub stride: usize,
}

impl SlideConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(CoreError::Config(format!(
                "window and stride must be >= 1, got H={} T={}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// Applies a phase permutation to all six columns and the annotation.
fn permute_phases(r: &WaveformRecord, suffix: &str, map: impl Fn(Phase) -> Phase) -> WaveformRecord {
    let t = r.len();
    let mut data = vec![0.0; t * CHANNELS];
    for i in 0..t {
        let row = r.samples.row(i);
        let out = &mut data[i * CHANNELS..(i + 1) * CHANNELS];
        for p in Phase::ALL {
            let q = map(p);
            out[q.voltage_col()] = row[p.voltage_col()];
            out[q.current_col()] = row[p.current_col()];
        }
    }
    WaveformRecord {
        id: format!("{}::{suffix}", r.id),
        samples: Tensor::new(vec![t, CHANNELS], data).expect("same element count"),
        sample_rate_hint: r.sample_rate_hint,
        label: r.label,
        fault_phases: r.fault_phases.map(map),
    }
}

fn rotate_forward(p: Phase) -> Phase {
    match p {
        Phase::A => Phase::B,
        Phase::B => Phase::C,
        Phase::C => Phase::A,
    }
}

/// Produces exactly two phase-switched variants of a fault record.
///
/// Single-phase faults swap the faulted pair with each of the two
/// healthy phases; multi-phase faults apply the two non-identity cyclic
/// rotations. The original record is not included in the output.
pub fn phase_switch(r: &WaveformRecord) -> Result<Vec<WaveformRecord>> {
    r.validate()?;
    if r.label.is_normal() {
        return Err(CoreError::Contract(
            "phase switching is undefined for Normal records".into(),
        ));
    }
    if r.fault_phases.len() == 1 {
        let faulted = r.fault_phases.iter().next().expect("one faulted phase");
        let healthy: Vec<Phase> = Phase::ALL
            .into_iter()
            .filter(|p| !r.fault_phases.contains(*p))
            .collect();
        Ok(healthy
            .into_iter()
            .map(|target| {
                let swap = move |p: Phase| {
                    if p == faulted {
                        target
                    } else if p == target {
                        faulted
                    } else {
                        p
                    }
                };
                permute_phases(r, &format!("ps{}", target.letter()), swap)
            })
            .collect())
    } else {
        let rot2 = |p: Phase| rotate_forward(rotate_forward(p));
        Ok(vec![
            permute_phases(r, "rot1", rotate_forward),
            permute_phases(r, "rot2", rot2),
        ])
    }
}

/// Cuts windows of length `H` starting at `0, T_step, 2*T_step, ...`.
///
/// Produces `floor((len - H) / T_step) + 1` windows, each keeping the
/// source label and fault-phase annotation.
pub fn temporal_slide(r: &WaveformRecord, sc: &SlideConfig) -> Result<Vec<WaveformRecord>> {
    sc.validate()?;
    let len = r.len();
    if sc.window > len {
        return Err(CoreError::Contract(format!(
            "window {} exceeds record {:?} length {len}",
            sc.window, r.id
        )));
    }
    let count = (len - sc.window) / sc.stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * sc.stride;
        let mut data = Vec::with_capacity(sc.window * CHANNELS);
        for t in start..start + sc.window {
            data.extend_from_slice(r.samples.row(t));
        }
        out.push(WaveformRecord {
            id: format!("{}::w{w}", r.id),
            samples: Tensor::new(vec![sc.window, CHANNELS], data)?,
            sample_rate_hint: r.sample_rate_hint,
            label: r.label,
            fault_phases: r.fault_phases,
        });
    }
    Ok(out)
}

/// Cuts exactly `count` windows of length `window`, deriving the stride
/// as `floor((len - H) / (count - 1))` and truncating any surplus.
pub fn slide_exact_count(
    r: &WaveformRecord,
    window: usize,
    count: usize,
) -> Result<Vec<WaveformRecord>> {
    if count == 0 {
        return Err(CoreError::Config("window count must be >= 1".into()));
    }
    let len = r.len();
    if window > len {
        return Err(CoreError::Contract(format!(
            "window {window} exceeds record {:?} length {len}",
            r.id
        )));
    }
    if count == 1 {
        return temporal_slide(r, &SlideConfig { window, stride: len.max(window) });
    }
    if len - window < count - 1 {
        return Err(CoreError::Contract(format!(
            "record {:?} ({len} samples) cannot yield {count} distinct windows of {window}",
            r.id
        )));
    }
    let stride = (len - window) / (count - 1);
    let mut windows = temporal_slide(r, &SlideConfig { window, stride })?;
    windows.truncate(count);
    Ok(windows)
}

enum WindowRule {
    Stride(SlideConfig),
    ExactCount { window: usize, count: usize },
}

fn augment_with(ds: &Dataset, rule: &WindowRule, enable_phase: bool) -> Result<Dataset> {
    // (source id, transform tag, window index) keys give the output order.
    let mut keyed: Vec<(String, String, usize, WaveformRecord)> = Vec::new();
    for r in &ds.records {
        let mut variants: Vec<(String, WaveformRecord)> = vec![("orig".to_string(), r.clone())];
        if enable_phase && !r.label.is_normal() {
            for v in phase_switch(r)? {
                let tag = v.id.rsplit("::").next().expect("suffix present").to_string();
                variants.push((tag, v));
            }
        }
        for (tag, variant) in variants {
            let windows = match rule {
                WindowRule::Stride(sc) => temporal_slide(&variant, sc)?,
                WindowRule::ExactCount { window, count } => {
                    slide_exact_count(&variant, *window, *count)?
                }
            };
            for (w, rec) in windows.into_iter().enumerate() {
                keyed.push((r.id.clone(), tag.clone(), w, rec));
            }
        }
    }
    keyed.sort_by(|a, b| (&a.0, &a.1, a.2).cmp(&(&b.0, &b.1, b.2)));
    let records = keyed.into_iter().map(|(_, _, _, rec)| rec).collect();
    Dataset::from_records(records, ds.samples_per_cycle)
}

/// Expands a dataset: every record is windowed, and fault records are
/// additionally phase-switched first when `enable_phase` is set (Normal
/// records only slide). Output order is deterministic by
/// (source id, transform tag, window index).
pub fn augment_dataset(ds: &Dataset, sc: &SlideConfig, enable_phase: bool) -> Result<Dataset> {
    sc.validate()?;
    augment_with(ds, &WindowRule::Stride(*sc), enable_phase)
}

/// Like [`augment_dataset`] but cuts exactly `count` windows per record
/// (the stride is derived per record from its length).
pub fn augment_dataset_exact(
    ds: &Dataset,
    window: usize,
    count: usize,
    enable_phase: bool,
) -> Result<Dataset> {
    augment_with(ds, &WindowRule::ExactCount { window, count }, enable_phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FaultClass, PhaseSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, label: FaultClass, phases: &[Phase], len: usize, seed: u64) -> WaveformRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..len * CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        WaveformRecord {
            id: id.to_string(),
            samples: Tensor::new(vec![len, CHANNELS], data).unwrap(),
            sample_rate_hint: 100,
            label,
            fault_phases: PhaseSet::from_phases(phases),
        }
    }

    #[test]
    fn single_phase_switch_moves_fault_to_each_healthy_phase() {
        let r = record("sgf", FaultClass::Sgf, &[Phase::A], 8, 1);
        let out = phase_switch(&r).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].fault_phases, PhaseSet::single(Phase::B));
        assert_eq!(out[1].fault_phases, PhaseSet::single(Phase::C));
        for v in &out {
            assert_eq!(v.label, FaultClass::Sgf);
        }
        // The phase-B variant's Vb/Ib columns are bit-equal to the input's Va/Ia.
        for t in 0..8 {
            let src = r.samples.row(t);
            let dst = out[0].samples.row(t);
            assert_eq!(dst[Phase::B.voltage_col()], src[Phase::A.voltage_col()]);
            assert_eq!(dst[Phase::B.current_col()], src[Phase::A.current_col()]);
            assert_eq!(dst[Phase::A.voltage_col()], src[Phase::B.voltage_col()]);
            assert_eq!(dst[Phase::A.current_col()], src[Phase::B.current_col()]);
            // Phase C untouched.
            assert_eq!(dst[Phase::C.voltage_col()], src[Phase::C.voltage_col()]);
            assert_eq!(dst[Phase::C.current_col()], src[Phase::C.current_col()]);
        }
    }

    #[test]
    fn two_phase_fault_rotates_cyclically() {
        let r = record("tgf", FaultClass::Tgf, &[Phase::A, Phase::B], 5, 2);
        let out = phase_switch(&r).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].fault_phases, PhaseSet::from_phases(&[Phase::B, Phase::C]));
        assert_eq!(out[1].fault_phases, PhaseSet::from_phases(&[Phase::C, Phase::A]));
    }

    #[test]
    fn phase_switch_round_trips_bit_exactly() {
        // Single-phase: swapping twice is the identity.
        let r = record("sgf", FaultClass::Sgf, &[Phase::A], 6, 3);
        let to_b = &phase_switch(&r).unwrap()[0];
        let back = phase_switch(to_b)
            .unwrap()
            .into_iter()
            .find(|v| v.fault_phases == r.fault_phases)
            .unwrap();
        assert_eq!(back.samples, r.samples);

        // Multi-phase: rot2 of a rot1 output is the identity rotation.
        let m = record("tgf", FaultClass::Tgf, &[Phase::A, Phase::B], 6, 4);
        let rot1 = &phase_switch(&m).unwrap()[0];
        let back = phase_switch(rot1)
            .unwrap()
            .into_iter()
            .find(|v| v.fault_phases == m.fault_phases)
            .unwrap();
        assert_eq!(back.samples, m.samples);
    }

    #[test]
    fn phase_switch_rejects_normal_records() {
        let r = record("n", FaultClass::Normal, &[], 4, 5);
        assert!(matches!(phase_switch(&r), Err(CoreError::Contract(_))));
    }

    #[test]
    fn slide_count_matches_formula() {
        let r = record("x", FaultClass::Sgf, &[Phase::A], 400, 6);
        let out = temporal_slide(&r, &SlideConfig { window: 100, stride: 50 }).unwrap();
        assert_eq!(out.len(), 7);
    }

    #[test]
    fn full_length_window_is_the_record_itself() {
        let r = record("x", FaultClass::Sgf, &[Phase::B], 37, 7);
        let out = temporal_slide(&r, &SlideConfig { window: 37, stride: 5 }).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].samples, r.samples);
        assert_eq!(out[0].label, r.label);
        assert_eq!(out[0].fault_phases, r.fault_phases);
    }

    #[test]
    fn windows_match_slice_oracle() {
        let r = record("x", FaultClass::Mif, &[Phase::C], 60, 8);
        let sc = SlideConfig { window: 25, stride: 10 };
        let out = temporal_slide(&r, &sc).unwrap();
        for (w, win) in out.iter().enumerate() {
            for t in 0..sc.window {
                assert_eq!(win.samples.row(t), r.samples.row(w * sc.stride + t));
            }
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let r = record("x", FaultClass::Sgf, &[Phase::A], 10, 9);
        assert!(temporal_slide(&r, &SlideConfig { window: 11, stride: 1 }).is_err());
    }

    proptest! {
        #[test]
        fn slide_count_formula_holds(len in 1usize..300, window in 1usize..300, stride in 1usize..40) {
            prop_assume!(window <= len);
            let r = record("p", FaultClass::Sgf, &[Phase::A], len, 10);
            let out = temporal_slide(&r, &SlideConfig { window, stride }).unwrap();
            // Enumeration oracle: count the valid start offsets directly.
            let expected = (0..)
                .map(|w| w * stride)
                .take_while(|start| start + window <= len)
                .count();
            prop_assert_eq!(out.len(), expected);
            prop_assert_eq!(out.len(), (len - window) / stride + 1);
        }
    }

    #[test]
    fn exact_count_yields_requested_windows() {
        let r = record("x", FaultClass::Ipsf, &[Phase::A, Phase::B], 200, 11);
        for n in [1usize, 2, 3, 6] {
            let out = slide_exact_count(&r, 100, n).unwrap();
            assert_eq!(out.len(), n);
        }
        assert!(slide_exact_count(&r, 200, 2).is_err());
    }

    #[test]
    fn factor_six_pipeline_counts() {
        // Fault records: 3 phase versions x 2 windows; Normal: 6 windows.
        // Lengths chosen so one (H, T) pair produces both counts.
        let mut records = Vec::new();
        for i in 0..4 {
            records.push(record(&format!("f{i}"), FaultClass::Ipsf, &[Phase::A, Phase::B], 150, 20 + i));
        }
        for i in 0..3 {
            records.push(record(&format!("n{i}"), FaultClass::Normal, &[], 350, 30 + i));
        }
        let ds = Dataset::from_records(records, 100).unwrap();
        let out = augment_dataset(&ds, &SlideConfig { window: 100, stride: 50 }, true).unwrap();
        // 4 * 3 * 2 + 3 * 6 = 42.
        assert_eq!(out.len(), 42);
        let faults = out.records.iter().filter(|r| r.label == FaultClass::Ipsf).count();
        assert_eq!(faults, 24);
    }

    #[test]
    fn augmentation_is_deterministic_and_label_preserving() {
        let mut records = Vec::new();
        records.push(record("a", FaultClass::Sgf, &[Phase::B], 50, 40));
        records.push(record("b", FaultClass::Normal, &[], 50, 41));
        let ds = Dataset::from_records(records, 10).unwrap();
        let sc = SlideConfig { window: 20, stride: 10 };
        let once = augment_dataset(&ds, &sc, true).unwrap();
        let twice = augment_dataset(&ds, &sc, true).unwrap();
        assert_eq!(once, twice);
        for r in &once.records {
            let src = if r.id.starts_with("a") { FaultClass::Sgf } else { FaultClass::Normal };
            assert_eq!(r.label, src);
        }
    }

    #[test]
    fn empty_dataset_stays_empty() {
        let ds = Dataset::from_records(vec![], 10).unwrap();
        let out = augment_dataset(&ds, &SlideConfig { window: 5, stride: 2 }, true).unwrap();
        assert!(out.is_empty());
    }
}
