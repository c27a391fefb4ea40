//! Stacked recurrent classifier with attention pooling.
//!
//! Layer 0 consumes the input sequence; every further layer consumes the
//! hidden sequence of the layer below. The top layer's hidden states are
//! pooled either by attention (softmax-weighted sum against a trained
//! context vector) or by taking the last hidden state, then classified
//! by a dense layer plus softmax.
//!
//! Ablation variants select the cell behavior:
//!
//! | variant     | adaptive wavelet | attention |
//! |-------------|------------------|-----------|
//! | `TFM`       | no (a=1, b=0)    | no        |
//! | `AD-TFM`    | yes              | no        |
//! | `TFM-AT`    | no               | yes       |
//! | `AD-TFM-AT` | yes              | yes       |
//!
//! A plain `LSTM` baseline (standard cell, last-hidden pooling) is also
//! available behind the same interface.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cell::{cell_step, CellConfig, CellNodes, CellParams, CellState, CellStateNodes};
use crate::error::{CoreError, Result};
use crate::init;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Model variant selecting the cell type and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Tfm,
    AdTfm,
    TfmAt,
    AdTfmAt,
    Lstm,
}

impl Variant {
    pub fn adaptive(self) -> bool {
        matches!(self, Variant::AdTfm | Variant::AdTfmAt)
    }

    pub fn attention(self) -> bool {
        matches!(self, Variant::TfmAt | Variant::AdTfmAt)
    }

    pub fn is_lstm(self) -> bool {
        matches!(self, Variant::Lstm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tfm => "TFM",
            Variant::AdTfm => "AD-TFM",
            Variant::TfmAt => "TFM-AT",
            Variant::AdTfmAt => "AD-TFM-AT",
            Variant::Lstm => "LSTM",
        }
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TFM" => Ok(Variant::Tfm),
            "AD-TFM" => Ok(Variant::AdTfm),
            "TFM-AT" => Ok(Variant::TfmAt),
            "AD-TFM-AT" => Ok(Variant::AdTfmAt),
            "LSTM" => Ok(Variant::Lstm),
            other => Err(CoreError::Config(format!(
                "unknown variant {other:?}; expected TFM, AD-TFM, TFM-AT, AD-TFM-AT or LSTM"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full model configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d: usize,
    pub k: usize,
    pub j: usize,
    pub omega0: f64,
    pub input_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Defaults: D=32, K=4, J=4, omega0=16, 6 input channels, 2 layers.
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            d: 32,
            k: 4,
            j: 4,
            omega0: 16.0,
            input_dim: 6,
            num_layers: 2,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CoreError::Config(format!(
                "numClasses must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_layers == 0 {
            return Err(CoreError::Config("numLayers must be >= 1".into()));
        }
        self.cell_config(0).validate()
    }

    /// The cell configuration for a given layer; layers above the first
    /// consume D-dimensional hidden vectors.
    pub fn cell_config(&self, layer: usize) -> CellConfig {
        CellConfig {
            d: self.d,
            k: self.k,
            j: self.j,
            input_dim: if layer == 0 { self.input_dim } else { self.d },
            adaptive: self.variant.adaptive(),
            omega0: self.omega0,
        }
    }
}

/// Attention projection, bias, and trained context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[D, D]`.
    pub w: Tensor,
    /// `[D]`.
    pub b: Tensor,
    /// `[D]` context vector, randomly initialized and trained.
    pub u_w: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut u_w = init::uniform(vec![d], 0.1, rng);
        if u_w.data().iter().all(|&v| v == 0.0) {
            u_w.data_mut()[0] = 0.05;
        }
        AttentionParams {
            w: init::uniform(vec![d, d], bound, rng),
            b: Tensor::zeros(vec![d]),
            u_w,
        }
    }

    fn register(&self, tape: &mut Tape) -> Result<AttentionNodes> {
        Ok(AttentionNodes {
            w: tape.param("attn.w", self.w.clone())?,
            b: tape.param("attn.b", self.b.clone())?,
            u_w: tape.param("attn.u_w", self.u_w.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub u_w: NodeId,
}

/// Standard LSTM cell parameters for the baseline variant.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_g: Tensor,
    pub u_g: Tensor,
    pub b_g: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    pub fn init<R: Rng>(d: usize, input_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let w = |rng: &mut R| init::uniform(vec![d, input_dim], bound, rng);
        let u = |rng: &mut R| init::uniform(vec![d, d], bound, rng);
        LstmParams {
            w_f: w(rng),
            u_f: u(rng),
            b_f: Tensor::zeros(vec![d]),
            w_i: w(rng),
            u_i: u(rng),
            b_i: Tensor::zeros(vec![d]),
            w_g: w(rng),
            u_g: u(rng),
            b_g: Tensor::zeros(vec![d]),
            w_o: w(rng),
            u_o: u(rng),
            b_o: Tensor::zeros(vec![d]),
        }
    }

    pub(crate) fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_f", &self.w_f),
            ("u_f", &self.u_f),
            ("b_f", &self.b_f),
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("b_i", &self.b_i),
            ("w_g", &self.w_g),
            ("u_g", &self.u_g),
            ("b_g", &self.b_g),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
            ("b_o", &self.b_o),
        ]
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_f", &mut self.w_f),
            ("u_f", &mut self.u_f),
            ("b_f", &mut self.b_f),
            ("w_i", &mut self.w_i),
            ("u_i", &mut self.u_i),
            ("b_i", &mut self.b_i),
            ("w_g", &mut self.w_g),
            ("u_g", &mut self.u_g),
            ("b_g", &mut self.b_g),
            ("w_o", &mut self.w_o),
            ("u_o", &mut self.u_o),
            ("b_o", &mut self.b_o),
        ]
    }

    fn register(&self, tape: &mut Tape, prefix: &str) -> Result<LstmNodes> {
        let mut ids = Vec::with_capacity(12);
        for (name, t) in self.named_tensors() {
            ids.push(tape.param(&format!("{prefix}.{name}"), t.clone())?);
        }
        Ok(LstmNodes {
            w_f: ids[0],
            u_f: ids[1],
            b_f: ids[2],
            w_i: ids[3],
            u_i: ids[4],
            b_i: ids[5],
            w_g: ids[6],
            u_g: ids[7],
            b_g: ids[8],
            w_o: ids[9],
            u_o: ids[10],
            b_o: ids[11],
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    w_f: NodeId,
    u_f: NodeId,
    b_f: NodeId,
    w_i: NodeId,
    u_i: NodeId,
    b_i: NodeId,
    w_g: NodeId,
    u_g: NodeId,
    b_g: NodeId,
    w_o: NodeId,
    u_o: NodeId,
    b_o: NodeId,
}

/// One recurrent layer: either the time-frequency cell or a plain LSTM.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Cell(CellParams),
    Lstm(LstmParams),
}

#[derive(Debug, Clone, Copy)]
enum LayerNodes {
    Cell(CellNodes),
    Lstm(LstmNodes),
}

#[derive(Clone, Copy)]
enum LayerStateNodes {
    Cell(CellStateNodes),
    Lstm { c: NodeId, h: NodeId },
}

/// All trainable state of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    pub attention: AttentionParams,
    /// `[numClasses, D]` classifier head.
    pub head_w: Tensor,
    /// `[numClasses]` classifier bias.
    pub head_b: Tensor,
}

/// Builds a freshly initialized model for the given configuration.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..config.num_layers)
        .map(|l| {
            if config.variant.is_lstm() {
                let input = if l == 0 { config.input_dim } else { config.d };
                LayerParams::Lstm(LstmParams::init(config.d, input, &mut rng))
            } else {
                LayerParams::Cell(CellParams::init(&config.cell_config(l), &mut rng))
            }
        })
        .collect();
    let attention = AttentionParams::init(config.d, &mut rng);
    let bound = 1.0 / (config.d as f64).sqrt();
    let head_w = init::uniform(vec![config.num_classes, config.d], bound, &mut rng);
    let head_b = Tensor::zeros(vec![config.num_classes]);
    Ok(ModelParams {
        config,
        layers,
        attention,
        head_w,
        head_b,
    })
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.num_layers {
            return Err(CoreError::dim("ModelParams", self.config.num_layers, self.layers.len()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Cell(c) => c.validate(&self.config.cell_config(l))?,
                LayerParams::Lstm(_) => {
                    if !self.config.variant.is_lstm() {
                        return Err(CoreError::Config("LSTM layer in non-LSTM model".into()));
                    }
                }
            }
        }
        if self.head_w.shape() != [self.config.num_classes, self.config.d] {
            return Err(CoreError::dim(
                "ModelParams head",
                format!("[{}, {}]", self.config.num_classes, self.config.d),
                format!("{:?}", self.head_w.shape()),
            ));
        }
        Ok(())
    }

    /// Calls `f` with every trainable tensor and its canonical name.
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = format!("layer{l}");
            match layer {
                LayerParams::Cell(c) => c.visit(&prefix, f),
                LayerParams::Lstm(p) => {
                    for (name, t) in p.named_tensors() {
                        f(format!("{prefix}.{name}"), t);
                    }
                }
            }
        }
        f("attn.w".to_string(), &self.attention.w);
        f("attn.b".to_string(), &self.attention.b);
        f("attn.u_w".to_string(), &self.attention.u_w);
        f("head.w".to_string(), &self.head_w);
        f("head.b".to_string(), &self.head_b);
    }

    /// Mutable counterpart of [`ModelParams::visit`].
    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer{l}");
            match layer {
                LayerParams::Cell(c) => c.visit_mut(&prefix, f),
                LayerParams::Lstm(p) => {
                    for (name, t) in p.named_tensors_mut() {
                        f(format!("{prefix}.{name}"), t);
                    }
                }
            }
        }
        f("attn.w".to_string(), &mut self.attention.w);
        f("attn.b".to_string(), &mut self.attention.b);
        f("attn.u_w".to_string(), &mut self.attention.u_w);
        f("head.w".to_string(), &mut self.head_w);
        f("head.b".to_string(), &mut self.head_b);
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Registers every tensor on the tape under the canonical names.
    pub fn register(&self, tape: &mut Tape) -> Result<ModelNodes> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prefix = format!("layer{l}");
            layers.push(match layer {
                LayerParams::Cell(c) => LayerNodes::Cell(c.register(tape, &prefix)?),
                LayerParams::Lstm(p) => LayerNodes::Lstm(p.register(tape, &prefix)?),
            });
        }
        Ok(ModelNodes {
            layers,
            attention: self.attention.register(tape)?,
            head_w: tape.param("head.w", self.head_w.clone())?,
            head_b: tape.param("head.b", self.head_b.clone())?,
        })
    }
}

/// Tape handles for a registered model.
pub struct ModelNodes {
    layers: Vec<LayerNodes>,
    attention: AttentionNodes,
    head_w: NodeId,
    head_b: NodeId,
}

/// Per-step attention scores `u_i^T u_w` with `u_i = tanh(W h_i + b)`.
pub fn attention_scores(
    tape: &mut Tape,
    hidden_seq: &[NodeId],
    ap: &AttentionNodes,
) -> Result<Vec<NodeId>> {
    let mut scores = Vec::with_capacity(hidden_seq.len());
    for &h in hidden_seq {
        let proj = tape.matvec(ap.w, h)?;
        let proj = tape.add(proj, ap.b)?;
        let u = tape.tanh(proj)?;
        scores.push(tape.dot(u, ap.u_w)?);
    }
    Ok(scores)
}

/// Weighted sum of the hidden states by an `[T]` weight vector node.
pub fn attention_pool(tape: &mut Tape, hidden_seq: &[NodeId], alpha: NodeId) -> Result<NodeId> {
    let mut pooled: Option<NodeId> = None;
    for (i, &h) in hidden_seq.iter().enumerate() {
        let w = tape.pick(alpha, i)?;
        let term = tape.mul_scalar(h, w)?;
        pooled = Some(match pooled {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    pooled.ok_or_else(|| CoreError::Contract("attention over empty sequence".into()))
}

/// Attention pooling: returns the pooled vector `s` and the weights `alpha`.
pub fn attention(
    tape: &mut Tape,
    hidden_seq: &[NodeId],
    ap: &AttentionNodes,
) -> Result<(NodeId, NodeId)> {
    if hidden_seq.is_empty() {
        return Err(CoreError::Contract("attention over empty sequence".into()));
    }
    let scores = attention_scores(tape, hidden_seq, ap)?;
    let stacked = tape.stack(&scores)?;
    let alpha = tape.softmax(stacked)?;
    let pooled = attention_pool(tape, hidden_seq, alpha)?;
    Ok((pooled, alpha))
}

fn lstm_step(
    tape: &mut Tape,
    x: NodeId,
    c_prev: NodeId,
    h_prev: NodeId,
    p: &LstmNodes,
) -> Result<(NodeId, NodeId)> {
    let pre = |tape: &mut Tape, w, u, b| -> Result<NodeId> { tape.affine2(w, x, u, h_prev, b) };
    let f = pre(tape, p.w_f, p.u_f, p.b_f)?;
    let f = tape.sigmoid(f)?;
    let i = pre(tape, p.w_i, p.u_i, p.b_i)?;
    let i = tape.sigmoid(i)?;
    let g = pre(tape, p.w_g, p.u_g, p.b_g)?;
    let g = tape.tanh(g)?;
    let o = pre(tape, p.w_o, p.u_o, p.b_o)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let ct = tape.tanh(c)?;
    let h = tape.mul(o, ct)?;
    Ok((c, h))
}

/// Everything the forward pass produces on the tape.
pub struct ForwardNodes {
    /// Class probabilities (`[numClasses]`).
    pub probs: NodeId,
    /// Pre-softmax logits.
    pub logits: NodeId,
    /// Pooling weights over time (`[T]`); one-hot on the last step when
    /// attention is disabled.
    pub alpha: NodeId,
    /// Pooled feature vector (`[D]`).
    pub pooled: NodeId,
    /// Top-layer hidden state per step.
    pub hidden_seq: Vec<NodeId>,
}

/// Runs the stacked model over an input sequence of shape `[T, input_dim]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ModelNodes,
    config: &ModelConfig,
    x: &Tensor,
) -> Result<ForwardNodes> {
    if x.shape().len() != 2 || x.shape()[1] != config.input_dim {
        return Err(CoreError::dim(
            "forward input",
            format!("[T, {}]", config.input_dim),
            format!("{:?}", x.shape()),
        ));
    }
    let steps = x.shape()[0];

    let mut seq: Vec<NodeId> = (0..steps)
        .map(|t| tape.leaf(Tensor::vector(x.row(t))))
        .collect();

    for (l, layer) in nodes.layers.iter().enumerate() {
        let cfg = config.cell_config(l);
        let mut state = match layer {
            LayerNodes::Cell(_) => LayerStateNodes::Cell(CellState::zeros(&cfg).leaf(tape)),
            LayerNodes::Lstm(_) => LayerStateNodes::Lstm {
                c: tape.leaf(Tensor::zeros(vec![cfg.d])),
                h: tape.leaf(Tensor::zeros(vec![cfg.d])),
            },
        };
        let mut hidden = Vec::with_capacity(steps);
        for (t, &xt) in seq.iter().enumerate() {
            state = match (layer, state) {
                (LayerNodes::Cell(cn), LayerStateNodes::Cell(st)) => {
                    let (next, _) = cell_step(tape, xt, &st, t as f64, cn, &cfg)?;
                    LayerStateNodes::Cell(next)
                }
                (LayerNodes::Lstm(ln), LayerStateNodes::Lstm { c, h }) => {
                    let (c2, h2) = lstm_step(tape, xt, c, h, ln)?;
                    LayerStateNodes::Lstm { c: c2, h: h2 }
                }
                _ => unreachable!("layer kind and state kind always agree"),
            };
            hidden.push(match state {
                LayerStateNodes::Cell(st) => st.hidden,
                LayerStateNodes::Lstm { h, .. } => h,
            });
        }
        seq = hidden;
    }

    let (pooled, alpha) = if config.variant.attention() {
        attention(tape, &seq, &nodes.attention)?
    } else {
        let mut onehot = vec![0.0; steps];
        onehot[steps - 1] = 1.0;
        (*seq.last().expect("T >= 1"), tape.leaf(Tensor::vector(&onehot)))
    };

    let logits = tape.matvec(nodes.head_w, pooled)?;
    let logits = tape.add(logits, nodes.head_b)?;
    let probs = tape.softmax(logits)?;
    Ok(ForwardNodes {
        probs,
        logits,
        alpha,
        pooled,
        hidden_seq: seq,
    })
}

/// Classifier output for one input sequence.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub attn_weights: Vec<f64>,
    pub predicted_class: usize,
}

/// Index of the largest probability (first index on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs inference over one input sequence of shape `[T, input_dim]`.
pub fn forward(mp: &ModelParams, x: &Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let nodes = mp.register(&mut tape)?;
    let fwd = forward_on_tape(&mut tape, &nodes, &mp.config, x)?;
    let probabilities = tape.value(fwd.probs).data().to_vec();
    let attn_weights = tape.value(fwd.alpha).data().to_vec();
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::Invariant(format!("probabilities sum to {total}")));
    }
    Ok(Prediction {
        predicted_class: argmax(&probabilities),
        probabilities,
        attn_weights,
    })
}
