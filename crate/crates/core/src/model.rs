//! The trimmed skip-thought model: embedding table, GRU encoder, connection
//! layer, conditional-GRU decoder(s) and an untied prediction layer.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{
    cond_gru_step_projected, cond_projection, run_bidirectional, run_bidirectional_values,
    run_sequence, CondGruNodes, CondGruParams, GruNodes, GruParams, HiddenSequence,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Pool, Tensor};
use crate::training::vocab::{BOS, EOS, PAD};

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Uni,
    Bi,
}
str_enum!(EncoderKind { Uni => "uni", Bi => "bi" });

/// How encoder states become the sentence vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    /// Final hidden state.
    Plain,
    /// `[mean over steps ; max over steps]`.
    AvgMax,
}
str_enum!(Connection { Plain => "plain", AvgMax => "avg_max" });

impl Connection {
    /// Applies the connection to a recorded state sequence.
    pub fn apply(self, seq: &HiddenSequence) -> Result<Tensor> {
        match self {
            Connection::Plain => Ok(seq.last.clone()),
            Connection::AvgMax => {
                let mean = seq.states.pool_rows(Pool::Mean)?;
                let max = seq.states.pool_rows(Pool::Max)?;
                mean.concat_cols(&max)
            }
        }
    }

    fn apply_nodes(self, g: &mut Graph, states: &[NodeId], last: NodeId) -> Result<NodeId> {
        match self {
            Connection::Plain => Ok(last),
            Connection::AvgMax => {
                let stacked = g.stack_rows(states)?;
                let mean = g.pool_rows(Pool::Mean, stacked)?;
                let max = g.pool_rows(Pool::Max, stacked)?;
                g.concat_cols(mean, max)
            }
        }
    }
}

/// Which neighbouring sentences the decoders reconstruct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// One decoder, next sentence only.
    Next,
    /// Separate decoders for the next and the previous sentence.
    Both,
}
str_enum!(Targets { Next => "next", Both => "both" });

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_kind: EncoderKind,
    /// Total size for `uni`, per direction for `bi`.
    pub encoder_dim: usize,
    pub connection: Connection,
    pub decoder_dim: usize,
    pub targets: Targets,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 20_000,
            embed_dim: 300,
            encoder_kind: EncoderKind::Uni,
            encoder_dim: 600,
            connection: Connection::Plain,
            decoder_dim: 600,
            targets: Targets::Next,
        }
    }
}

impl ModelConfig {
    /// Bidirectional 300+300 encoder with mean+max connection.
    pub fn bi_avg_max() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::Bi,
            encoder_dim: 300,
            connection: Connection::AvgMax,
            ..Self::default()
        }
    }

    pub fn encoder_output_dim(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::Uni => self.encoder_dim,
            EncoderKind::Bi => 2 * self.encoder_dim,
        }
    }

    /// Dimension of the sentence vector fed to the decoder.
    pub fn sentence_dim(&self) -> usize {
        match self.connection {
            Connection::Plain => self.encoder_output_dim(),
            Connection::AvgMax => 2 * self.encoder_output_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_dim", self.encoder_dim),
            ("decoder_dim", self.decoder_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::Config(
                "vocab_size must cover the reserved tokens".into(),
            ));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 7] = [
        "vocab_size",
        "embed_dim",
        "encoder_kind",
        "encoder_dim",
        "connection",
        "decoder_dim",
        "targets",
    ];

    /// `(key, value)` pairs in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.vocab_size.to_string(),
            self.embed_dim.to_string(),
            self.encoder_kind.to_string(),
            self.encoder_dim.to_string(),
            self.connection.to_string(),
            self.decoder_dim.to_string(),
            self.targets.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// Sets one field from text. Returns `Ok(false)` for keys that are not
    /// model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, value: &str) -> Result<usize> {
            value.parse().map_err(|_| {
                Error::Config(format!(
                    "{key}: expected a non-negative integer, got {value:?}"
                ))
            })
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "encoder_kind" => self.encoder_kind = value.parse()?,
            "encoder_dim" => self.encoder_dim = num(key, value)?,
            "connection" => self.connection = value.parse()?,
            "decoder_dim" => self.decoder_dim = num(key, value)?,
            "targets" => self.targets = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// One `key=value` line per field.
    pub fn to_kv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Inverse of [`Self::to_kv`]; every field must be present exactly once.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::Config(format!("duplicate config key {k:?}")));
            }
            if !cfg.set(k, v.trim())? {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            seen.push(k);
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!("missing config key {missing:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter totals per model part (no biases anywhere).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub rnns: usize,
    pub embedding: usize,
    pub prediction: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.rnns + self.embedding + self.prediction
    }
}

impl fmt::Display for ParamCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rnns={} embedding={} prediction={}",
            self.rnns, self.embedding, self.prediction
        )
    }
}

fn gru_count(d: usize, e: usize) -> usize {
    2 * d * d + 2 * d * e + d * e + d * d
}

fn cond_gru_count(d: usize, e: usize, z: usize) -> usize {
    gru_count(d, e) + 2 * d * z + d * z
}

/// Closed-form parameter counts for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> ParamCounts {
    let e = cfg.embed_dim;
    let encoder = match cfg.encoder_kind {
        EncoderKind::Uni => gru_count(cfg.encoder_dim, e),
        EncoderKind::Bi => 2 * gru_count(cfg.encoder_dim, e),
    };
    let decoders = match cfg.targets {
        Targets::Next => 1,
        Targets::Both => 2,
    };
    ParamCounts {
        rnns: encoder + decoders * cond_gru_count(cfg.decoder_dim, e, cfg.sentence_dim()),
        embedding: cfg.vocab_size * e,
        prediction: cfg.decoder_dim * cfg.vocab_size,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams {
    Uni(GruParams),
    Bi { fwd: GruParams, bwd: GruParams },
}

/// All trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `V x e`
    pub embedding: Tensor,
    pub encoder: EncoderParams,
    pub decoder_next: CondGruParams,
    pub decoder_prev: Option<CondGruParams>,
    /// `d_dec x V`
    pub prediction: Tensor,
}

const GRU_NAMES: [&str; 4] = ["W_h", "W_x", "W", "U"];
const COND_NAMES: [&str; 6] = ["W_h", "W_x", "W", "U", "W_z", "U_z"];

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, Tensor::zeros)
    }

    /// Every entry drawn from `U[-range, range]`.
    pub fn uniform(cfg: &ModelConfig, range: f64, rng: &mut impl Rng) -> Self {
        Self::build(cfg, |rows, cols| {
            Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-range..=range))
        })
    }

    fn build(cfg: &ModelConfig, mut make: impl FnMut(usize, usize) -> Tensor) -> Self {
        fn gru(make: &mut impl FnMut(usize, usize) -> Tensor, h: usize, e: usize) -> GruParams {
            GruParams {
                w_h: make(2 * h, h),
                w_x: make(2 * h, e),
                w: make(h, e),
                u: make(h, h),
            }
        }
        fn cond(
            make: &mut impl FnMut(usize, usize) -> Tensor,
            h: usize,
            e: usize,
            z: usize,
        ) -> CondGruParams {
            CondGruParams {
                gru: gru(make, h, e),
                w_z: make(2 * h, z),
                u_z: make(h, z),
            }
        }
        let (e, dd, z) = (cfg.embed_dim, cfg.decoder_dim, cfg.sentence_dim());
        let embedding = make(cfg.vocab_size, e);
        let encoder = match cfg.encoder_kind {
            EncoderKind::Uni => EncoderParams::Uni(gru(&mut make, cfg.encoder_dim, e)),
            EncoderKind::Bi => EncoderParams::Bi {
                fwd: gru(&mut make, cfg.encoder_dim, e),
                bwd: gru(&mut make, cfg.encoder_dim, e),
            },
        };
        let decoder_next = cond(&mut make, dd, e, z);
        let decoder_prev = match cfg.targets {
            Targets::Next => None,
            Targets::Both => Some(cond(&mut make, dd, e, z)),
        };
        ModelParams {
            embedding,
            encoder,
            decoder_next,
            decoder_prev,
            prediction: make(dd, cfg.vocab_size),
        }
    }

    /// Stable names and tensors; the order matches [`ModelParams::tensors_mut`]
    /// and [`BoundModel::ids`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        match &self.encoder {
            EncoderParams::Uni(p) => {
                for (n, t) in GRU_NAMES.iter().zip(p.tensors()) {
                    out.push((format!("encoder.{n}"), t));
                }
            }
            EncoderParams::Bi { fwd, bwd } => {
                for (dir, p) in [("fwd", fwd), ("bwd", bwd)] {
                    for (n, t) in GRU_NAMES.iter().zip(p.tensors()) {
                        out.push((format!("encoder.{dir}.{n}"), t));
                    }
                }
            }
        }
        for (n, t) in COND_NAMES.iter().zip(self.decoder_next.tensors()) {
            out.push((format!("decoder_next.{n}"), t));
        }
        if let Some(p) = &self.decoder_prev {
            for (n, t) in COND_NAMES.iter().zip(p.tensors()) {
                out.push((format!("decoder_prev.{n}"), t));
            }
        }
        out.push(("prediction".to_string(), &self.prediction));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        match &mut self.encoder {
            EncoderParams::Uni(p) => out.extend(p.tensors_mut()),
            EncoderParams::Bi { fwd, bwd } => {
                out.extend(fwd.tensors_mut());
                out.extend(bwd.tensors_mut());
            }
        }
        out.extend(self.decoder_next.tensors_mut());
        if let Some(p) = &mut self.decoder_prev {
            out.extend(p.tensors_mut());
        }
        out.push(&mut self.prediction);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Reassembles parameters from named tensors, checking every shape
    /// against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: HashMap<String, Tensor>) -> Result<Self> {
        let template = Self::zeros(cfg);
        let names: Vec<(String, (usize, usize))> = template
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let mut out = template;
        for ((name, shape), slot) in names.iter().zip(out.tensors_mut()) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::ShapeInconsistency(format!("missing tensor {name}")))?;
            if t.shape() != *shape {
                return Err(Error::ShapeInconsistency(format!(
                    "{name} is {:?}, config requires {:?}",
                    t.shape(),
                    shape
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::ShapeInconsistency(format!(
                "unexpected tensor {extra}"
            )));
        }
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let embedding = g.leaf(self.embedding.clone());
        let encoder = match &self.encoder {
            EncoderParams::Uni(p) => BoundEncoder::Uni(p.bind(g)),
            EncoderParams::Bi { fwd, bwd } => BoundEncoder::Bi {
                fwd: fwd.bind(g),
                bwd: bwd.bind(g),
            },
        };
        let decoder_next = self.decoder_next.bind(g);
        let decoder_prev = self.decoder_prev.as_ref().map(|p| p.bind(g));
        let prediction = g.leaf(self.prediction.clone());
        BoundModel {
            embedding,
            encoder,
            decoder_next,
            decoder_prev,
            prediction,
        }
    }

    fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundEncoder {
    Uni(GruNodes),
    Bi { fwd: GruNodes, bwd: GruNodes },
}

/// [`ModelParams`] as graph leaves.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embedding: NodeId,
    pub encoder: BoundEncoder,
    pub decoder_next: CondGruNodes,
    pub decoder_prev: Option<CondGruNodes>,
    pub prediction: NodeId,
}

impl BoundModel {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        match &self.encoder {
            BoundEncoder::Uni(p) => out.extend(p.ids()),
            BoundEncoder::Bi { fwd, bwd } => {
                out.extend(fwd.ids());
                out.extend(bwd.ids());
            }
        }
        out.extend(self.decoder_next.ids());
        if let Some(p) = &self.decoder_prev {
            out.extend(p.ids());
        }
        out.push(self.prediction);
        out
    }

    /// Inverse of [`Self::ids`] for a model shaped by `cfg`.
    pub fn from_ids(cfg: &ModelConfig, ids: &[NodeId]) -> Result<Self> {
        let per_gru = 4;
        let encoders = match cfg.encoder_kind {
            EncoderKind::Uni => 1,
            EncoderKind::Bi => 2,
        };
        let decoders = match cfg.targets {
            Targets::Next => 1,
            Targets::Both => 2,
        };
        let expected = 2 + encoders * per_gru + decoders * (per_gru + 2);
        if ids.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "bound_model_from_ids",
                left: (ids.len(), 1),
                right: (expected, 1),
            });
        }
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let gru = |next: &mut dyn FnMut() -> NodeId| GruNodes {
            w_h: next(),
            w_x: next(),
            w: next(),
            u: next(),
        };
        let encoder = match cfg.encoder_kind {
            EncoderKind::Uni => BoundEncoder::Uni(gru(&mut next)),
            EncoderKind::Bi => BoundEncoder::Bi {
                fwd: gru(&mut next),
                bwd: gru(&mut next),
            },
        };
        let cond = |next: &mut dyn FnMut() -> NodeId| CondGruNodes {
            gru: gru(next),
            w_z: next(),
            u_z: next(),
        };
        let decoder_next = cond(&mut next);
        let decoder_prev = (cfg.targets == Targets::Both).then(|| cond(&mut next));
        Ok(BoundModel {
            embedding,
            encoder,
            decoder_next,
            decoder_prev,
            prediction: next(),
        })
    }
}

/// Sentence representation produced by encoder + connection.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceVector(pub Tensor);

impl SentenceVector {
    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// One encoder input position.
#[derive(Clone, Debug, PartialEq)]
pub enum WordInput {
    Token(u32),
    /// Explicit embedding row, e.g. from vocabulary expansion.
    Vector(Tensor),
}

fn check_id(id: u32, vocab: usize) -> Result<()> {
    if id as usize >= vocab {
        return Err(Error::IdOutOfRange {
            id: id as usize,
            size: vocab,
        });
    }
    Ok(())
}

fn strip_pad(inputs: &[WordInput]) -> Vec<&WordInput> {
    inputs
        .iter()
        .filter(|w| **w != WordInput::Token(PAD))
        .collect()
}

/// Runs the encoder over embedded inputs, returning per-step states.
pub fn encoder_states(params: &ModelParams, inputs: &[WordInput]) -> Result<HiddenSequence> {
    let v = params.vocab_size();
    let e = params.embedding.cols();
    let kept = strip_pad(inputs);
    if kept.is_empty() {
        return Err(Error::Empty("encode"));
    }
    let mut rows = Vec::with_capacity(kept.len());
    for w in kept {
        match w {
            WordInput::Token(id) => {
                check_id(*id, v)?;
                rows.push(params.embedding.row_tensor(*id as usize));
            }
            WordInput::Vector(t) => {
                if t.shape() != (1, e) {
                    return Err(Error::ShapeMismatch {
                        op: "encode",
                        left: t.shape(),
                        right: (1, e),
                    });
                }
                rows.push(t.clone());
            }
        }
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let xs = Tensor::stack_rows(&refs)?;
    match &params.encoder {
        EncoderParams::Uni(p) => p.run_sequence(&xs, None),
        EncoderParams::Bi { fwd, bwd } => run_bidirectional_values(fwd, bwd, &xs),
    }
}

/// Encodes token ids. PAD positions are skipped.
pub fn encode(params: &ModelParams, cfg: &ModelConfig, ids: &[u32]) -> Result<SentenceVector> {
    let inputs: Vec<WordInput> = ids.iter().map(|&id| WordInput::Token(id)).collect();
    encode_inputs(params, cfg, &inputs)
}

pub fn encode_inputs(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &[WordInput],
) -> Result<SentenceVector> {
    let seq = encoder_states(params, inputs)?;
    Ok(SentenceVector(cfg.connection.apply(&seq)?))
}

/// Graph version of [`encode`]; returns the sentence-vector node.
pub fn encode_nodes(
    g: &mut Graph,
    bm: &BoundModel,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Result<NodeId> {
    let v = g.value(bm.embedding).rows();
    let ids: Vec<u32> = ids.iter().copied().filter(|&id| id != PAD).collect();
    if ids.is_empty() {
        return Err(Error::Empty("encode"));
    }
    let mut xs = Vec::with_capacity(ids.len());
    for &id in &ids {
        check_id(id, v)?;
        xs.push(g.gather_rows(bm.embedding, &[id as usize])?);
    }
    let (states, last) = match &bm.encoder {
        BoundEncoder::Uni(p) => {
            let s = run_sequence(g, p, &xs, None)?;
            let last = *s.last().expect("non-empty");
            (s, last)
        }
        BoundEncoder::Bi { fwd, bwd } => {
            let bi = run_bidirectional(g, fwd, bwd, &xs)?;
            (bi.states, bi.last)
        }
    };
    cfg.connection.apply_nodes(g, &states, last)
}

/// Teacher-forced negative log-likelihood of `target` (+ EOS) under one
/// decoder. Inputs are `BOS, w¹..wⁿ`; predictions are `w¹..wⁿ, EOS`.
/// Returns the summed loss node and the number of predicted tokens.
pub fn decoder_nll(
    g: &mut Graph,
    bm: &BoundModel,
    decoder: &CondGruNodes,
    z: NodeId,
    target: &[u32],
) -> Result<(NodeId, usize)> {
    let v = g.value(bm.embedding).rows();
    let words: Vec<u32> = target.iter().copied().filter(|&id| id != PAD).collect();
    if words.is_empty() {
        return Err(Error::Empty("target sentence"));
    }
    for &id in &words {
        check_id(id, v)?;
    }
    let proj = cond_projection(g, decoder, z)?;
    let d = g.value(decoder.gru.u).rows();
    let mut h = g.leaf(Tensor::zeros(1, d));
    let mut input = BOS;
    let mut terms = Vec::with_capacity(words.len() + 1);
    for &next in words.iter().chain(std::iter::once(&EOS)) {
        let x = g.gather_rows(bm.embedding, &[input as usize])?;
        h = cond_gru_step_projected(g, decoder, h, x, proj)?;
        let logits = g.matmul(h, bm.prediction)?;
        terms.push(g.softmax_cross_entropy(logits, next as usize)?);
        input = next;
    }
    Ok((g.add_scalars(&terms)?, terms.len()))
}

/// Builds the full training objective for one example. `prev` is only
/// used when the config has a previous-sentence decoder.
pub fn example_objective(
    g: &mut Graph,
    bm: &BoundModel,
    cfg: &ModelConfig,
    source: &[u32],
    next: &[u32],
    prev: Option<&[u32]>,
) -> Result<(NodeId, usize)> {
    let z = encode_nodes(g, bm, cfg, source)?;
    let (mut loss, mut count) = decoder_nll(g, bm, &bm.decoder_next, z, next)?;
    if let (Some(dec), Some(prev)) = (bm.decoder_prev, prev) {
        let (l, c) = decoder_nll(g, bm, &dec, z, prev)?;
        loss = g.add(loss, l)?;
        count += c;
    }
    Ok((loss, count))
}

/// Summed loss, predicted-token count and per-tensor gradients for one
/// example. Gradients follow [`ModelParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct ExampleGradients {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<Tensor>,
}

pub fn example_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    source: &[u32],
    next: &[u32],
    prev: Option<&[u32]>,
) -> Result<ExampleGradients> {
    let mut g = Graph::new();
    let bm = params.bind(&mut g);
    let (loss, tokens) = example_objective(&mut g, &bm, cfg, source, next, prev)?;
    let grads = g.backward(loss)?;
    let grads = bm
        .ids()
        .iter()
        .map(|&id| grads.get_or_zeros(id, g.value(id)))
        .collect();
    Ok(ExampleGradients {
        loss: g.value(loss).get(0, 0),
        tokens,
        grads,
    })
}

/// Mean nats per predicted token for `source → target`.
pub fn next_sentence_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    source: &[u32],
    target: &[u32],
) -> Result<f64> {
    let mut g = Graph::new();
    let bm = params.bind(&mut g);
    let z = encode_nodes(&mut g, &bm, cfg, source)?;
    let (loss, count) = decoder_nll(&mut g, &bm, &bm.decoder_next, z, target)?;
    Ok(g.value(loss).get(0, 0) / count as f64)
}

/// Mean nats per predicted token over the next (and, with two decoders,
/// previous) sentence.
pub fn skip_thought_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    source: &[u32],
    next: &[u32],
    prev: Option<&[u32]>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bm = params.bind(&mut g);
    let (loss, count) = example_objective(&mut g, &bm, cfg, source, next, prev)?;
    Ok(g.value(loss).get(0, 0) / count as f64)
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy generation from the next-sentence decoder. Stops at EOS or after
/// `max_len` tokens; BOS/EOS are not included in the output.
pub fn greedy_decode(params: &ModelParams, z: &SentenceVector, max_len: usize) -> Result<Vec<u32>> {
    let dec = &params.decoder_next;
    let proj = dec.project(z.tensor())?;
    let mut h = Tensor::zeros(1, dec.hidden_dim());
    let mut input = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let x = params.embedding.row_tensor(input as usize);
        h = dec.step_projected(&h, &x, &proj)?;
        let logits = h.matmul(&params.prediction)?;
        let next = argmax(logits.data()) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        input = next;
    }
    Ok(out)
}
