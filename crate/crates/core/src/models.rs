//! The four detector architectures, their assembly from layers, forward
//! inference, and checkpoint serialization.
//!
//! Every architecture maps a day of hourly features `[T, F]` to per-hour
//! occupancy probabilities. The shared pieces are a Bi-LSTM branch and a
//! transformer branch (learned input projection, fixed sinusoidal positional
//! encoding, one or more encoder blocks); the variants differ in how the two
//! are wired together before the sigmoid classification head.

use crate::layers::{
    bilstm_forward, encoder_block, linear, positional_encoding, temporal_attention,
    BiLstmParams, EncoderBlockParams, LinearParams, TemporalAttentionParams,
};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown variant `{0}`; valid variants: hybrid_concat, bilstm_then_transformer, transformer_then_bilstm, bilstm_attention")]
    UnknownVariant(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match configured [{t}, {f}]")]
    InputShape { got: Vec<usize>, t: usize, f: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version `{0}` (this build reads {CHECKPOINT_VERSION})")]
    Version(String),
    #[error("checkpoint parameter mismatch: {0}")]
    ParamMismatch(String),
}

// ── Config ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Bi-LSTM and transformer branches run side by side on the input and
    /// their per-timestep features are concatenated before the head.
    HybridConcat,
    /// Bi-LSTM output (adapted to the encoder width) feeds the transformer.
    BilstmThenTransformer,
    /// Transformer output feeds the Bi-LSTM.
    TransformerThenBilstm,
    /// Bi-LSTM followed by additive temporal attention.
    BilstmAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::HybridConcat,
        Variant::BilstmThenTransformer,
        Variant::TransformerThenBilstm,
        Variant::BilstmAttention,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::HybridConcat => "hybrid_concat",
            Variant::BilstmThenTransformer => "bilstm_then_transformer",
            Variant::TransformerThenBilstm => "transformer_then_bilstm",
            Variant::BilstmAttention => "bilstm_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, ModelError> {
        Variant::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyperparameters. Parameter shapes, and therefore the
/// parameter count, are a pure function of this config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// F: meter features per hour.
    pub input_features: usize,
    /// T: timesteps per sample (hours per day).
    pub seq_len: usize,
    /// H: LSTM hidden size per direction.
    pub lstm_hidden: usize,
    /// F': encoder width.
    pub trans_width: usize,
    /// U: attention heads.
    pub heads: usize,
    /// d_k: per-head projection width.
    pub head_dim: usize,
    /// d_ff: feed-forward hidden width.
    pub ffn_width: usize,
    pub encoder_blocks: usize,
    pub seed: u64,
    /// Drop probability applied to the pre-head representation during
    /// training; disabled when unset.
    pub dropout: Option<f64>,
}

impl ModelConfig {
    pub fn defaults(variant: Variant) -> Self {
        ModelConfig {
            variant,
            input_features: 9,
            seq_len: 24,
            lstm_hidden: 64,
            trans_width: 64,
            heads: 4,
            head_dim: 16,
            ffn_width: 128,
            encoder_blocks: 1,
            seed: 0,
            dropout: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("input_features", self.input_features),
            ("seq_len", self.seq_len),
            ("lstm_hidden", self.lstm_hidden),
            ("trans_width", self.trans_width),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_width", self.ffn_width),
            ("encoder_blocks", self.encoder_blocks),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::InvalidConfig(format!(
                    "dropout must lie in [0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

// ── Architecture wiring ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) enum Arch<P> {
    HybridConcat {
        bilstm: BiLstmParams<P>,
        input_proj: LinearParams<P>,
        encoders: Vec<EncoderBlockParams<P>>,
        head: LinearParams<P>,
    },
    BilstmThenTransformer {
        bilstm: BiLstmParams<P>,
        adapter: LinearParams<P>,
        encoders: Vec<EncoderBlockParams<P>>,
        head: LinearParams<P>,
    },
    TransformerThenBilstm {
        input_proj: LinearParams<P>,
        encoders: Vec<EncoderBlockParams<P>>,
        bilstm: BiLstmParams<P>,
        head: LinearParams<P>,
    },
    BilstmAttention {
        bilstm: BiLstmParams<P>,
        attention: TemporalAttentionParams<P>,
        head: LinearParams<P>,
    },
}

impl Arch<Tensor> {
    /// Deterministic seeded initialization; the draw order is fixed by the
    /// construction order below.
    fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let f = config.input_features;
        let h = config.lstm_hidden;
        let fp = config.trans_width;
        let encoders = |rng: &mut ChaCha8Rng| {
            (0..config.encoder_blocks)
                .map(|_| {
                    EncoderBlockParams::init(
                        rng,
                        fp,
                        config.heads,
                        config.head_dim,
                        config.ffn_width,
                    )
                })
                .collect::<Vec<_>>()
        };
        match config.variant {
            Variant::HybridConcat => Arch::HybridConcat {
                bilstm: BiLstmParams::init(rng, f, h),
                input_proj: LinearParams::init(rng, f, fp),
                encoders: encoders(rng),
                head: LinearParams::init(rng, 2 * h + fp, 1),
            },
            Variant::BilstmThenTransformer => Arch::BilstmThenTransformer {
                bilstm: BiLstmParams::init(rng, f, h),
                adapter: LinearParams::init(rng, 2 * h, fp),
                encoders: encoders(rng),
                head: LinearParams::init(rng, fp, 1),
            },
            Variant::TransformerThenBilstm => Arch::TransformerThenBilstm {
                input_proj: LinearParams::init(rng, f, fp),
                encoders: encoders(rng),
                bilstm: BiLstmParams::init(rng, fp, h),
                head: LinearParams::init(rng, 2 * h, 1),
            },
            Variant::BilstmAttention => Arch::BilstmAttention {
                bilstm: BiLstmParams::init(rng, f, h),
                attention: TemporalAttentionParams::init(rng, 2 * h),
                head: LinearParams::init(rng, 4 * h, 1),
            },
        }
    }
}

impl<P> Arch<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Arch<Q> {
        match self {
            Arch::HybridConcat {
                bilstm,
                input_proj,
                encoders,
                head,
            } => Arch::HybridConcat {
                bilstm: bilstm.map(f),
                input_proj: input_proj.map(f),
                encoders: encoders.iter().map(|e| e.map(f)).collect(),
                head: head.map(f),
            },
            Arch::BilstmThenTransformer {
                bilstm,
                adapter,
                encoders,
                head,
            } => Arch::BilstmThenTransformer {
                bilstm: bilstm.map(f),
                adapter: adapter.map(f),
                encoders: encoders.iter().map(|e| e.map(f)).collect(),
                head: head.map(f),
            },
            Arch::TransformerThenBilstm {
                input_proj,
                encoders,
                bilstm,
                head,
            } => Arch::TransformerThenBilstm {
                input_proj: input_proj.map(f),
                encoders: encoders.iter().map(|e| e.map(f)).collect(),
                bilstm: bilstm.map(f),
                head: head.map(f),
            },
            Arch::BilstmAttention {
                bilstm,
                attention,
                head,
            } => Arch::BilstmAttention {
                bilstm: bilstm.map(f),
                attention: attention.map(f),
                head: head.map(f),
            },
        }
    }

    /// Field traversal in the same canonical order as [`Arch::map`].
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        match self {
            Arch::HybridConcat {
                bilstm,
                input_proj,
                encoders,
                head,
            } => {
                bilstm.visit("bilstm", f);
                input_proj.visit("input_proj", f);
                for (i, e) in encoders.iter().enumerate() {
                    e.visit(&format!("encoder{i}"), f);
                }
                head.visit("head", f);
            }
            Arch::BilstmThenTransformer {
                bilstm,
                adapter,
                encoders,
                head,
            } => {
                bilstm.visit("bilstm", f);
                adapter.visit("adapter", f);
                for (i, e) in encoders.iter().enumerate() {
                    e.visit(&format!("encoder{i}"), f);
                }
                head.visit("head", f);
            }
            Arch::TransformerThenBilstm {
                input_proj,
                encoders,
                bilstm,
                head,
            } => {
                input_proj.visit("input_proj", f);
                for (i, e) in encoders.iter().enumerate() {
                    e.visit(&format!("encoder{i}"), f);
                }
                bilstm.visit("bilstm", f);
                head.visit("head", f);
            }
            Arch::BilstmAttention {
                bilstm,
                attention,
                head,
            } => {
                bilstm.visit("bilstm", f);
                attention.visit("attention", f);
                head.visit("head", f);
            }
        }
    }
}

// ── Model ───────────────────────────────────────────────────────────────

/// A built detector: config, named parameters in canonical order, and the
/// architecture wiring (indices into the parameter list).
///
/// Immutable during forward inference; training mutates parameters through
/// [`Model::params_mut`] and requires exclusive access.
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    arch: Arch<usize>,
}

impl Model {
    /// Builds a model with seeded deterministic initialization.
    pub fn build(config: &ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let arch = Arch::init(config, &mut rng);

        let mut names = Vec::new();
        let mut params = Vec::new();
        arch.visit(&mut |name, tensor: &Tensor| {
            names.push(name);
            params.push(tensor.clone());
        });
        let mut counter = 0usize;
        let arch = arch.map(&mut |_| {
            let i = counter;
            counter += 1;
            i
        });
        Ok(Model {
            config: config.clone(),
            names,
            params,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter_mut())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.params[i])
    }

    /// Registers every parameter on `tape` (in canonical order) and returns
    /// the wiring with node ids in place of tensors.
    pub(crate) fn register(&self, tape: &mut Tape, requires_grad: bool) -> ArchIds {
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        self.wire(&ids)
    }

    /// Wiring over caller-provided node ids, one per parameter in canonical
    /// order.
    pub(crate) fn wire(&self, ids: &[NodeId]) -> ArchIds {
        assert_eq!(ids.len(), self.params.len());
        ArchIds {
            arch: self.arch.map(&mut |&i| ids[i]),
            ids: ids.to_vec(),
        }
    }

    /// Builds the forward graph from an already-registered input node to the
    /// `[T, 1]` per-timestep probability column.
    ///
    /// `dropout_rng` enables the config's dropout on the pre-head
    /// representation; pass `None` for inference.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        wired: &ArchIds,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, TensorError> {
        let t_len = self.config.seq_len;
        let h = self.config.lstm_hidden;
        let fp = self.config.trans_width;

        let transformer_branch = |tape: &mut Tape,
                                  input: NodeId,
                                  proj: &LinearParams<NodeId>,
                                  encoders: &[EncoderBlockParams<NodeId>]|
         -> Result<NodeId, TensorError> {
            let projected = linear(tape, input, proj)?;
            let pe = tape.leaf(positional_encoding(t_len, fp), false);
            let mut state = tape.add(projected, pe)?;
            for block in encoders {
                state = encoder_block(tape, state, block)?;
            }
            Ok(state)
        };

        let (rep, head) = match &wired.arch {
            Arch::HybridConcat {
                bilstm,
                input_proj,
                encoders,
                head,
            } => {
                let h_rnn = bilstm_forward(tape, x, h, bilstm)?;
                let h_trans = transformer_branch(tape, x, input_proj, encoders)?;
                (tape.concat_last(&[h_rnn, h_trans])?, head)
            }
            Arch::BilstmThenTransformer {
                bilstm,
                adapter,
                encoders,
                head,
            } => {
                let h_rnn = bilstm_forward(tape, x, h, bilstm)?;
                (transformer_branch(tape, h_rnn, adapter, encoders)?, head)
            }
            Arch::TransformerThenBilstm {
                input_proj,
                encoders,
                bilstm,
                head,
            } => {
                let h_trans = transformer_branch(tape, x, input_proj, encoders)?;
                (bilstm_forward(tape, h_trans, h, bilstm)?, head)
            }
            Arch::BilstmAttention {
                bilstm,
                attention,
                head,
            } => {
                let h_rnn = bilstm_forward(tape, x, h, bilstm)?;
                (temporal_attention(tape, h_rnn, attention)?, head)
            }
        };

        let rep = match (self.config.dropout, dropout_rng) {
            (Some(p), Some(rng)) if p > 0.0 => {
                let shape = tape.value(rep).shape().to_vec();
                let keep = 1.0 - p;
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.leaf(Tensor::new(shape, mask)?, false);
                tape.mul(rep, m)?
            }
            _ => rep,
        };
        let logits = linear(tape, rep, head)?;
        Ok(tape.sigmoid(logits))
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape() != [self.config.seq_len, self.config.input_features] {
            return Err(ModelError::InputShape {
                got: x.shape().to_vec(),
                t: self.config.seq_len,
                f: self.config.input_features,
            });
        }
        Ok(())
    }

    /// Per-timestep occupancy probabilities for one day, shape `[T]`,
    /// every entry strictly inside (0, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let wired = self.register(&mut tape, false);
        let x_id = tape.leaf(x.clone(), false);
        let probs = self.forward_on_tape(&mut tape, x_id, &wired, None)?;
        let out = tape.value(probs);
        Ok(Tensor::new(vec![self.config.seq_len], out.data().to_vec())?)
    }

    /// Hard labels: `1` where the probability reaches `threshold`.
    pub fn predict(&self, x: &Tensor, threshold: f64) -> Result<Vec<u8>, ModelError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "threshold must lie in (0, 1), got {threshold}"
            )));
        }
        let probs = self.forward(x)?;
        Ok(probs
            .data()
            .iter()
            .map(|&p| u8::from(p >= threshold))
            .collect())
    }
}

/// A model's parameters registered on a tape: flat node ids in canonical
/// order plus the architecture wiring over those ids.
pub(crate) struct ArchIds {
    pub ids: Vec<NodeId>,
    arch: Arch<NodeId>,
}

// ── Checkpoint format ───────────────────────────────────────────────────

pub const CHECKPOINT_VERSION: &str = "v1";
const CHECKPOINT_MAGIC: &str = "occudet-checkpoint";

/// Training metadata carried in a checkpoint header.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
}

impl Model {
    /// Writes a versioned checkpoint: a plain-text header (format name,
    /// version, config, optional training metadata, tensor count) followed by
    /// one record per parameter (a `tensor <name> <rank> <extents...>` line,
    /// then the little-endian f64 payload). Loading reproduces forward
    /// outputs bit-identically.
    pub fn save(&self, path: &Path, meta: Option<&TrainingMeta>) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        let c = &self.config;
        writeln!(w, "variant = {}", c.variant)?;
        writeln!(w, "input_features = {}", c.input_features)?;
        writeln!(w, "seq_len = {}", c.seq_len)?;
        writeln!(w, "lstm_hidden = {}", c.lstm_hidden)?;
        writeln!(w, "trans_width = {}", c.trans_width)?;
        writeln!(w, "heads = {}", c.heads)?;
        writeln!(w, "head_dim = {}", c.head_dim)?;
        writeln!(w, "ffn_width = {}", c.ffn_width)?;
        writeln!(w, "encoder_blocks = {}", c.encoder_blocks)?;
        writeln!(w, "seed = {}", c.seed)?;
        match c.dropout {
            Some(p) => writeln!(w, "dropout = {p}")?,
            None => writeln!(w, "dropout = none")?,
        }
        if let Some(meta) = meta {
            writeln!(w, "epochs = {}", meta.epochs)?;
            writeln!(w, "final_loss = {}", meta.final_loss)?;
        }
        writeln!(w, "tensors {}", self.params.len())?;
        for (name, tensor) in self.params() {
            write!(w, "tensor {name} {}", tensor.rank())?;
            for d in tensor.shape() {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
            for v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            writeln!(w)?;
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`]. The header config is
    /// rebuilt into a model skeleton; every stored tensor must match the
    /// skeleton's canonical name, order and shape, or the file is rejected
    /// without producing a partial model.
    pub fn load(path: &Path) -> Result<(Model, Option<TrainingMeta>), ModelError> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);

        let magic = read_line(&mut r)?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(ModelError::Corrupt("missing checkpoint magic".into()));
        }
        let version = parts.next().unwrap_or("").to_string();
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(version));
        }

        let mut fields = std::collections::HashMap::new();
        let tensor_count = loop {
            let line = read_line(&mut r)?;
            if let Some(rest) = line.strip_prefix("tensors ") {
                break rest
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| ModelError::Corrupt("bad tensor count".into()))?;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| ModelError::Corrupt(format!("bad header line `{line}`")))?;
            fields.insert(key.to_string(), value.to_string());
        };

        let get = |key: &str| -> Result<String, ModelError> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| ModelError::Corrupt(format!("missing header field `{key}`")))
        };
        let get_usize = |key: &str| -> Result<usize, ModelError> {
            get(key)?
                .parse()
                .map_err(|_| ModelError::Corrupt(format!("bad value for `{key}`")))
        };
        let config = ModelConfig {
            variant: Variant::parse(&get("variant")?)?,
            input_features: get_usize("input_features")?,
            seq_len: get_usize("seq_len")?,
            lstm_hidden: get_usize("lstm_hidden")?,
            trans_width: get_usize("trans_width")?,
            heads: get_usize("heads")?,
            head_dim: get_usize("head_dim")?,
            ffn_width: get_usize("ffn_width")?,
            encoder_blocks: get_usize("encoder_blocks")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| ModelError::Corrupt("bad value for `seed`".into()))?,
            dropout: match get("dropout")?.as_str() {
                "none" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| ModelError::Corrupt("bad value for `dropout`".into()))?,
                ),
            },
        };
        let meta = match (fields.get("epochs"), fields.get("final_loss")) {
            (Some(e), Some(l)) => Some(TrainingMeta {
                epochs: e
                    .parse()
                    .map_err(|_| ModelError::Corrupt("bad value for `epochs`".into()))?,
                final_loss: l
                    .parse()
                    .map_err(|_| ModelError::Corrupt("bad value for `final_loss`".into()))?,
            }),
            _ => None,
        };

        let mut model = Model::build(&config)?;
        if tensor_count != model.params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "file stores {tensor_count} tensors, {} expects {}",
                config.variant,
                model.params.len()
            )));
        }
        for i in 0..model.params.len() {
            let header = read_line(&mut r)?;
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(ModelError::Corrupt(format!(
                    "expected tensor record, got `{header}`"
                )));
            }
            let name = parts
                .next()
                .ok_or_else(|| ModelError::Corrupt("tensor record missing name".into()))?;
            if name != model.names[i] {
                return Err(ModelError::ParamMismatch(format!(
                    "expected `{}` at position {i}, found `{name}`",
                    model.names[i]
                )));
            }
            let rank: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ModelError::Corrupt(format!("bad rank for `{name}`")))?;
            let shape: Vec<usize> = parts
                .map(|s| {
                    s.parse()
                        .map_err(|_| ModelError::Corrupt(format!("bad extent for `{name}`")))
                })
                .collect::<Result<_, _>>()?;
            if shape.len() != rank || shape != model.params[i].shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "`{name}` has shape {shape:?}, expected {:?}",
                    model.params[i].shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes).map_err(|_| {
                ModelError::Corrupt(format!("unexpected end of file in `{name}` payload"))
            })?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            model.params[i] = Tensor::new(shape, data)?;
            let sep = read_line(&mut r)?;
            if !sep.is_empty() {
                return Err(ModelError::Corrupt(format!(
                    "missing separator after `{name}` payload"
                )));
            }
        }
        if read_line(&mut r)? != "end" {
            return Err(ModelError::Corrupt("missing end marker".into()));
        }
        Ok((model, meta))
    }
}

fn read_line(r: &mut impl BufRead) -> Result<String, ModelError> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Err(ModelError::Corrupt("unexpected end of file".into()));
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
    }
    String::from_utf8(buf).map_err(|_| ModelError::Corrupt("non-utf8 header line".into()))
}
