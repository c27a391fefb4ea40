//! Dataset file format, packetization, normalization, and splits.
//!
//! The on-disk format is a UTF-8 CSV with the exact header
//! `record_id,label,fault_phases,sample_index,va,vb,vc,ia,ib,ic`.
//! Rows of one record are contiguous with 0-based, consecutive
//! `sample_index`; `fault_phases` is a string over `{A,B,C}` (empty for
//! Normal records). Floats are written in shortest round-trip decimal
//! form, so a save/load cycle is the identity.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Waveform channel count: three voltages followed by three currents.
pub const CHANNELS: usize = 6;

const HEADER: [&str; 10] = [
    "record_id",
    "label",
    "fault_phases",
    "sample_index",
    "va",
    "vb",
    "vc",
    "ia",
    "ib",
    "ic",
];

/// Fault class labels across both dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultClass {
    /// Sub-cycle incipient fault.
    Sif,
    /// Multi-cycle incipient fault.
    Mif,
    /// Single-phase grounding fault.
    Sgf,
    /// High-resistance grounding fault.
    Hrgf,
    /// Inter-phase short-circuit fault.
    Ipsf,
    /// Two-phase ground fault.
    Tgf,
    /// Main transformer fault.
    Mtf,
    /// No fault.
    Normal,
}

impl FaultClass {
    pub const ALL: [FaultClass; 8] = [
        FaultClass::Sif,
        FaultClass::Mif,
        FaultClass::Sgf,
        FaultClass::Hrgf,
        FaultClass::Ipsf,
        FaultClass::Tgf,
        FaultClass::Mtf,
        FaultClass::Normal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultClass::Sif => "SIF",
            FaultClass::Mif => "MIF",
            FaultClass::Sgf => "SGF",
            FaultClass::Hrgf => "HRGF",
            FaultClass::Ipsf => "IPSF",
            FaultClass::Tgf => "TGF",
            FaultClass::Mtf => "MTF",
            FaultClass::Normal => "Normal",
        }
    }

    pub fn is_normal(self) -> bool {
        self == FaultClass::Normal
    }
}

impl FromStr for FaultClass {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        FaultClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::parse(None, format!("unknown fault class {s:?}")))
    }
}

impl std::fmt::Display for FaultClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the three phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column of this phase's voltage channel.
    pub fn voltage_col(self) -> usize {
        self.index()
    }

    /// Column of this phase's current channel.
    pub fn current_col(self) -> usize {
        3 + self.index()
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
        }
    }
}

/// Subset of `{A, B, C}` marking the faulted phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub fn empty() -> Self {
        PhaseSet(0)
    }

    pub fn single(p: Phase) -> Self {
        PhaseSet(1 << p.index())
    }

    pub fn from_phases(phases: &[Phase]) -> Self {
        let mut s = PhaseSet(0);
        for &p in phases {
            s.0 |= 1 << p.index();
        }
        s
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Set with each member mapped through `f`.
    pub fn map(self, f: impl Fn(Phase) -> Phase) -> Self {
        let mut out = PhaseSet(0);
        for p in self.iter() {
            out.0 |= 1 << f(p).index();
        }
        out
    }
}

impl FromStr for PhaseSet {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = PhaseSet(0);
        for ch in s.chars() {
            let p = match ch {
                'A' => Phase::A,
                'B' => Phase::B,
                'C' => Phase::C,
                other => {
                    return Err(CoreError::parse(None, format!("invalid phase character {other:?}")))
                }
            };
            if set.contains(p) {
                return Err(CoreError::parse(None, format!("duplicate phase {ch:?}")));
            }
            set.0 |= 1 << p.index();
        }
        Ok(set)
    }
}

impl std::fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

/// One labeled waveform: a `[T, 6]` sample matrix (Va, Vb, Vc, Ia, Ib,
/// Ic) plus the fault class and faulted-phase annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformRecord {
    pub id: String,
    pub samples: Tensor,
    /// Samples per cycle for this record (82 or 100 in the source data).
    pub sample_rate_hint: usize,
    pub label: FaultClass,
    pub fault_phases: PhaseSet,
}

impl WaveformRecord {
    /// Number of samples T.
    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // shape dimensions are positive by construction
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.shape().len() != 2 || self.samples.shape()[1] != CHANNELS {
            return Err(CoreError::dim(
                "WaveformRecord",
                format!("[T, {CHANNELS}]"),
                format!("{:?}", self.samples.shape()),
            ));
        }
        if !self.samples.all_finite() {
            return Err(CoreError::NonFinite("WaveformRecord samples"));
        }
        if self.label.is_normal() != self.fault_phases.is_empty() {
            return Err(CoreError::Invariant(format!(
                "record {:?}: fault_phases must be empty iff label is Normal",
                self.id
            )));
        }
        Ok(())
    }
}

/// A labeled collection of records sharing one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<WaveformRecord>,
    /// Class names present, in the canonical class order.
    pub class_names: Vec<String>,
    pub samples_per_cycle: usize,
}

impl Dataset {
    /// Builds a dataset, validating records and deriving `class_names`
    /// from the labels present (in canonical class order). Every record's
    /// `sample_rate_hint` is set to the shared cycle length.
    pub fn from_records(mut records: Vec<WaveformRecord>, samples_per_cycle: usize) -> Result<Self> {
        if samples_per_cycle == 0 {
            return Err(CoreError::Config("samplesPerCycle must be >= 1".into()));
        }
        let mut present = BTreeSet::new();
        for r in &mut records {
            r.validate()?;
            r.sample_rate_hint = samples_per_cycle;
            present.insert(r.label);
        }
        let class_names = FaultClass::ALL
            .into_iter()
            .filter(|c| present.contains(c))
            .map(|c| c.name().to_string())
            .collect();
        Ok(Dataset {
            records,
            class_names,
            samples_per_cycle,
        })
    }

    /// Index of a class within `class_names`.
    pub fn label_index(&self, class: FaultClass) -> Option<usize> {
        self.class_names.iter().position(|n| n == class.name())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One model input: exactly one cycle of data plus its label index.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    /// `[samplesPerCycle, 6]`.
    pub data: Tensor,
    /// Index into the dataset's `class_names`.
    pub label: usize,
    pub record_id: String,
}

/// Loads a dataset CSV, inferring `samplesPerCycle` as the shortest
/// record length. Use [`load_csv_with_cycle`] to pin it explicitly.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_csv_impl(path.as_ref(), None)
}

/// Loads a dataset CSV with a known cycle length.
pub fn load_csv_with_cycle(path: impl AsRef<Path>, samples_per_cycle: usize) -> Result<Dataset> {
    load_csv_impl(path.as_ref(), Some(samples_per_cycle))
}

fn load_csv_impl(path: &Path, samples_per_cycle: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CoreError::parse(None, format!("{}: {e}", path.display())))?;

    {
        let headers = reader
            .headers()
            .map_err(|e| CoreError::parse(Some(1), e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        for want in HEADER {
            if !got.contains(&want) {
                return Err(CoreError::parse(Some(1), format!("missing column {want:?}")));
            }
        }
        if got != HEADER {
            return Err(CoreError::parse(
                Some(1),
                format!("header must be exactly {:?}, got {:?}", HEADER.join(","), got.join(",")),
            ));
        }
    }

    struct Partial {
        id: String,
        label: FaultClass,
        phases: PhaseSet,
        rows: Vec<[f64; CHANNELS]>,
    }

    let mut finished: Vec<WaveformRecord> = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    let mut current: Option<Partial> = None;

    let mut finish = |p: Partial| -> Result<()> {
        let t = p.rows.len();
        let mut data = Vec::with_capacity(t * CHANNELS);
        for row in &p.rows {
            data.extend_from_slice(row);
        }
        finished.push(WaveformRecord {
            id: p.id,
            samples: Tensor::new(vec![t, CHANNELS], data)?,
            sample_rate_hint: 0, // patched below once the cycle length is known
            label: p.label,
            fault_phases: p.phases,
        });
        Ok(())
    };

    for record in reader.records() {
        let record = record.map_err(|e| {
            CoreError::parse(e.position().map(|p| p.line()), e.to_string())
        })?;
        let line = record.position().map(|p| p.line());
        if record.len() != HEADER.len() {
            return Err(CoreError::parse(
                line,
                format!("expected {} fields, got {}", HEADER.len(), record.len()),
            ));
        }
        let field = |i: usize| record.get(i).unwrap_or_default();
        let id = field(0).to_string();
        let label: FaultClass = field(1)
            .parse()
            .map_err(|_| CoreError::parse(line, format!("unknown fault class {:?}", field(1))))?;
        let phases: PhaseSet = field(2)
            .parse()
            .map_err(|e: CoreError| CoreError::parse(line, e.to_string()))?;
        let sample_index: usize = field(3)
            .parse()
            .map_err(|_| CoreError::parse(line, format!("bad sample_index {:?}", field(3))))?;
        let mut values = [0.0; CHANNELS];
        for (c, v) in values.iter_mut().enumerate() {
            let raw = field(4 + c);
            *v = raw.parse().map_err(|_| {
                CoreError::parse(line, format!("bad value {raw:?} in column {:?}", HEADER[4 + c]))
            })?;
        }

        let start_new = match &current {
            None => true,
            Some(p) => p.id != id,
        };
        if start_new {
            if let Some(p) = current.take() {
                finish(p)?;
            }
            if !seen_ids.insert(id.clone()) {
                return Err(CoreError::parse(
                    line,
                    format!("record_id {id:?} reappears after other records; rows must be contiguous"),
                ));
            }
            if sample_index != 0 {
                return Err(CoreError::parse(
                    line,
                    format!("record {id:?} must start at sample_index 0, got {sample_index}"),
                ));
            }
            current = Some(Partial {
                id,
                label,
                phases,
                rows: vec![values],
            });
        } else {
            let p = current.as_mut().expect("current record exists");
            if sample_index != p.rows.len() {
                return Err(CoreError::parse(
                    line,
                    format!(
                        "record {:?}: expected sample_index {}, got {sample_index}",
                        p.id,
                        p.rows.len()
                    ),
                ));
            }
            if label != p.label || phases != p.phases {
                return Err(CoreError::parse(
                    line,
                    format!("record {:?}: label/fault_phases change mid-record", p.id),
                ));
            }
            p.rows.push(values);
        }
    }
    if let Some(p) = current.take() {
        finish(p)?;
    }

    let spc = match samples_per_cycle {
        Some(v) => v,
        None => finished
            .iter()
            .map(|r| r.len())
            .min()
            .ok_or_else(|| CoreError::parse(None, "dataset file has no records"))?,
    };
    for r in &mut finished {
        r.sample_rate_hint = spc;
    }
    Dataset::from_records(finished, spc)
}

/// Writes a dataset in the documented CSV format.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())
        .map_err(|e| CoreError::parse(None, e.to_string()))?;
    writer
        .write_record(HEADER)
        .map_err(|e| CoreError::parse(None, e.to_string()))?;
    for r in &ds.records {
        for t in 0..r.len() {
            let row = r.samples.row(t);
            let mut fields: Vec<String> = Vec::with_capacity(HEADER.len());
            fields.push(r.id.clone());
            fields.push(r.label.name().to_string());
            fields.push(r.fault_phases.to_string());
            fields.push(t.to_string());
            for v in row {
                fields.push(format!("{v}"));
            }
            writer
                .write_record(&fields)
                .map_err(|e| CoreError::parse(None, e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Cuts each record down to its first cycle.
pub fn to_packets(ds: &Dataset) -> Result<Vec<Packet>> {
    to_packets_with_classes(ds, &ds.class_names)
}

/// Packetizes against an external ordered class list (for evaluating a
/// file against the classes a trained model knows).
pub fn to_packets_with_classes(ds: &Dataset, class_names: &[String]) -> Result<Vec<Packet>> {
    let spc = ds.samples_per_cycle;
    let mut packets = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        if r.len() < spc {
            return Err(CoreError::Contract(format!(
                "record {:?} has {} samples, shorter than one cycle ({spc})",
                r.id,
                r.len()
            )));
        }
        let mut data = Vec::with_capacity(spc * CHANNELS);
        for t in 0..spc {
            data.extend_from_slice(r.samples.row(t));
        }
        packets.push(Packet {
            data: Tensor::new(vec![spc, CHANNELS], data)?,
            label: class_names
                .iter()
                .position(|n| n == r.label.name())
                .ok_or_else(|| {
                    CoreError::Contract(format!("label {} not in the class list {class_names:?}", r.label))
                })?,
            record_id: r.id.clone(),
        });
    }
    Ok(packets)
}

/// Per-channel statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
    /// Channels whose variance was zero; their divisor is 1.
    pub constant_channels: [bool; CHANNELS],
}

/// Fits per-channel z-score statistics on `ds` and applies them.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, NormStats)> {
    if ds.is_empty() {
        return Err(CoreError::Contract("cannot normalize an empty dataset".into()));
    }
    let mut count = 0usize;
    let mut sum = [0.0; CHANNELS];
    let mut sum_sq = [0.0; CHANNELS];
    for r in &ds.records {
        for t in 0..r.len() {
            for (c, &v) in r.samples.row(t).iter().enumerate() {
                sum[c] += v;
                sum_sq[c] += v * v;
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mut stats = NormStats {
        mean: [0.0; CHANNELS],
        std: [1.0; CHANNELS],
        constant_channels: [false; CHANNELS],
    };
    for c in 0..CHANNELS {
        stats.mean[c] = sum[c] / n;
        let var = (sum_sq[c] / n - stats.mean[c] * stats.mean[c]).max(0.0);
        let sd = var.sqrt();
        if sd == 0.0 {
            stats.constant_channels[c] = true;
            stats.std[c] = 1.0;
        } else {
            stats.std[c] = sd;
        }
    }
    Ok((apply_normalization(ds, &stats)?, stats))
}

/// Applies previously fitted statistics (for test splits and inference).
pub fn apply_normalization(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let records = ds
        .records
        .iter()
        .map(|r| {
            let t = r.len();
            let mut data = Vec::with_capacity(t * CHANNELS);
            for i in 0..t {
                for (c, &v) in r.samples.row(i).iter().enumerate() {
                    data.push((v - stats.mean[c]) / stats.std[c]);
                }
            }
            Ok(WaveformRecord {
                id: r.id.clone(),
                samples: Tensor::new(vec![t, CHANNELS], data)?,
                sample_rate_hint: r.sample_rate_hint,
                label: r.label,
                fault_phases: r.fault_phases,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        records,
        class_names: ds.class_names.clone(),
        samples_per_cycle: ds.samples_per_cycle,
    })
}

/// Stratified train/test split. Every class keeps at least one record on
/// each side, so classes with a single record are rejected.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(CoreError::Config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx: Vec<usize> = Vec::new();
    let mut test_idx: Vec<usize> = Vec::new();

    for class in FaultClass::ALL {
        let mut indices: Vec<usize> = ds
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 2 {
            return Err(CoreError::Contract(format!(
                "class {} has a single record; stratified split needs >= 2",
                class.name()
            )));
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        let n_train = ((ratio * n as f64).floor() as usize).clamp(1, n - 1);
        train_idx.extend_from_slice(&indices[..n_train]);
        test_idx.extend_from_slice(&indices[n_train..]);
    }

    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        records: idx.iter().map(|&i| ds.records[i].clone()).collect(),
        class_names: ds.class_names.clone(),
        samples_per_cycle: ds.samples_per_cycle,
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}
