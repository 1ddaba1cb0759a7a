//! Corpus pipeline, optimizer and the epoch loop.

pub mod adam;
pub mod checkpoint;
pub mod corpus;
pub mod vocab;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{example_gradients, ModelConfig, ModelParams, Targets};
use crate::numerics::Tensor;

pub use adam::{clip_gradients, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use corpus::{make_pairs, pad_clip, split_documents, Padded, PaddedBatch, SentencePair};
pub use vocab::{build_vocab, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Half-width of the uniform initializer.
    pub init_range: f64,
    /// Worker threads per batch. 1 is fully deterministic.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_len: 30,
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
            init_range: 0.1,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 || self.shards == 0 {
            return Err(Error::Config(
                "batch_size, max_len and shards must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0 && self.init_range >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and init_range non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Summed loss and gradients over a batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<Tensor>,
}

fn add_into(acc: &mut BatchResult, other: BatchResult) -> Result<()> {
    acc.loss += other.loss;
    acc.tokens += other.tokens;
    for (a, b) in acc.grads.iter_mut().zip(&other.grads) {
        a.add_assign(b)?;
    }
    Ok(())
}

fn rows_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &PaddedBatch,
    rows: std::ops::Range<usize>,
) -> Result<BatchResult> {
    let mut acc = BatchResult {
        loss: 0.0,
        tokens: 0,
        grads: params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect(),
    };
    for i in rows {
        let prev = match cfg.targets {
            Targets::Both => batch.previous[i].as_ref().map(|p| p.ids.as_slice()),
            Targets::Next => None,
        };
        let ex = example_gradients(
            params,
            cfg,
            &batch.sources[i].ids,
            &batch.targets[i].ids,
            prev,
        )?;
        add_into(
            &mut acc,
            BatchResult {
                loss: ex.loss,
                tokens: ex.tokens,
                grads: ex.grads,
            },
        )?;
    }
    Ok(acc)
}

/// Summed (unnormalized) loss and gradients of a padded batch. PAD
/// positions contribute nothing. With `shards > 1` contiguous slices run on
/// separate threads and are reduced in slice order.
pub fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &PaddedBatch,
    shards: usize,
) -> Result<BatchResult> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let shards = shards.clamp(1, n);
    if shards == 1 {
        return rows_gradients(params, cfg, batch, 0..n);
    }
    let chunk = n.div_ceil(shards);
    let parts: Vec<Result<BatchResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || rows_gradients(params, cfg, batch, start..(start + chunk).min(n)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard worker panicked"))
            .collect()
    });
    let mut parts = parts.into_iter();
    let mut acc = parts.next().expect("at least one shard")?;
    for p in parts {
        add_into(&mut acc, p?)?;
    }
    Ok(acc)
}

/// Mean nats per predicted token over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub history: Vec<EpochLoss>,
}

/// Fresh uniform initialization drawn from `tc.seed`.
pub fn init_params(cfg: &ModelConfig, tc: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    Ok(ModelParams::uniform(cfg, tc.init_range, &mut rng))
}

/// Trains from a fresh initialization.
pub fn train(cfg: &ModelConfig, pairs: &[SentencePair], tc: &TrainConfig) -> Result<TrainOutcome> {
    let params = init_params(cfg, tc)?;
    train_from(cfg, params, None, pairs, tc)
}

/// Trains starting from `params`. Without an optimizer state Adam starts
/// at step 0.
pub fn train_from(
    cfg: &ModelConfig,
    mut params: ModelParams,
    adam: Option<AdamState>,
    pairs: &[SentencePair],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut adam = match adam {
        Some(a) => a,
        None => AdamState::new(tc.adam, params.named_tensors().into_iter().map(|(_, t)| t)),
    };
    // separate stream from the initializer
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch_pairs: Vec<&SentencePair> = idx.iter().map(|&i| &pairs[i]).collect();
            let batch = PaddedBatch::new(&batch_pairs, tc.max_len);
            let mut res = batch_gradients(&params, cfg, &batch, tc.shards)?;
            if !res.loss.is_finite() || !res.grads.iter().all(Tensor::is_finite) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += res.loss;
            tokens += res.tokens;
            let inv = 1.0 / batch.len() as f64;
            for g in &mut res.grads {
                *g = g.scale(inv);
            }
            clip_gradients(&mut res.grads);
            adam.update(&mut params.tensors_mut(), &res.grads)?;
            debug!(
                "epoch {epoch} batch {b}: {:.6} nats/token",
                res.loss / res.tokens as f64
            );
        }
        let loss = total / tokens as f64;
        info!("epoch {epoch}: {loss:.6} nats/token");
        history.push(EpochLoss {
            epoch,
            loss,
            tokens,
        });
    }
    Ok(TrainOutcome {
        params,
        adam,
        history,
    })
}

/// Fraction of target tokens reproduced at the same position by greedy
/// decoding from each source.
pub fn greedy_token_match(
    params: &ModelParams,
    cfg: &ModelConfig,
    pairs: &[SentencePair],
    max_len: usize,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in pairs {
        let z = crate::model::encode(params, cfg, &p.source)?;
        let out = crate::model::greedy_decode(params, &z, max_len)?;
        hit += p.target.iter().zip(&out).filter(|(a, b)| a == b).count();
        total += p.target.len();
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(hit as f64 / total as f64)
}
