//! Supervised fine-tuning: answer-only cross-entropy, token-weighted over a
//! batch, with the frozen bases checked after every epoch.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_prompt, CueMask, QARecord, Split};
use crate::error::{Error, Result};
use crate::model::{encode_example, ModelGrads, TinyLM, Token};
use crate::numerics::{seeded_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(alias = "adam")]
    AdaptiveMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dropout on the expert inputs.
    pub dropout: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 3,
            batch_size: 4,
            dropout: 0.0,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoment,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::validation("TrainConfig.learning_rate", "must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("TrainConfig.epochs", "epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("TrainConfig.dropout", "must lie in [0, 1)"));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::validation("TrainConfig.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain gradient descent or Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Contract("gradient layout does not match parameters".into()));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.iter_mut().zip(g.iter()).for_each(|(p, g)| *p -= self.lr * g);
                }
            }
            OptimizerKind::AdaptiveMoment => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                        p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// A tokenized training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: Vec<Token>,
    pub mask: Vec<bool>,
}

/// `None` when the encoded record exceeds `max_len`.
pub fn encode_record(record: &QARecord, mask: CueMask, max_len: usize) -> Result<Option<Example>> {
    let prompt = assemble_prompt(record, mask)?;
    let (tokens, mask) = encode_example(&prompt, &record.answer);
    Ok((tokens.len() <= max_len).then_some(Example { tokens, mask }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Token-weighted mean loss over the batch, before the update.
    pub loss: f64,
    pub scored_tokens: usize,
    pub skipped_overlong: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_mean_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub skipped_overlong: usize,
    /// SHA-256 of every parameter after training.
    pub checksum: String,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{l}", i + 1);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (e, (l, t)) in self.epoch_mean_losses.iter().zip(&self.epoch_seconds).enumerate() {
            let _ = writeln!(s, "epoch {}: mean loss {l:.6} ({t:.1} s)", e + 1);
        }
        let _ = writeln!(s, "steps: {}", self.step_losses.len());
        let _ = writeln!(s, "skipped overlong records: {}", self.skipped_overlong);
        let _ = writeln!(s, "parameter checksum: {}", self.checksum);
        s
    }
}

/// Owns a model and its optimizer state for the duration of training.
pub struct Trainer {
    model: TinyLM,
    config: TrainConfig,
    optimizer: Optimizer,
    rng: Rng,
    base_snapshot: Vec<Vec<u64>>,
}

impl Trainer {
    pub fn new(model: TinyLM, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mc = model.config();
        if model.trainable_count() != mc.expected_trainable() || model.frozen_count() != mc.expected_frozen() {
            return Err(Error::Contract(format!(
                "parameter census {}/{} differs from closed form {}/{}",
                model.trainable_count(),
                model.frozen_count(),
                mc.expected_trainable(),
                mc.expected_frozen()
            )));
        }
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            rng: seeded_rng(config.seed),
            base_snapshot: model.base_snapshot(),
            model,
            config,
        })
    }

    pub fn model(&self) -> &TinyLM {
        &self.model
    }

    pub fn into_model(self) -> TinyLM {
        self.model
    }

    /// Errors if any frozen base weight changed since construction.
    pub fn check_frozen(&self) -> Result<()> {
        if self.model.base_snapshot() != self.base_snapshot {
            return Err(Error::Contract("a frozen base weight changed during training".into()));
        }
        Ok(())
    }

    /// One optimizer update on pre-encoded examples.
    pub fn step_examples(&mut self, batch: &[&Example]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let mut grads = ModelGrads::zeros_like(&self.model);
        let mut total_tokens = 0;
        let mut total_loss = 0.0;
        let rate = self.config.dropout;
        for ex in batch {
            let dropout = (rate > 0.0).then_some((rate, &mut self.rng));
            let (loss, n, g) = self.model.loss_and_grads(&ex.tokens, &ex.mask, dropout)?;
            grads.accumulate(&g, n as f64);
            total_loss += loss * n as f64;
            total_tokens += n;
        }
        let inv = 1.0 / total_tokens as f64;
        let mut scale = inv;
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.global_norm() * inv;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        let scaled: Vec<Vec<f64>> = grads
            .slices()
            .iter()
            .map(|s| s.iter().map(|g| g * scale).collect())
            .collect();
        let refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
        self.optimizer.step(self.model.trainable_params_mut(), &refs)?;
        Ok(StepOutcome {
            loss: total_loss * inv,
            scored_tokens: total_tokens,
            skipped_overlong: 0,
        })
    }

    /// Encode `batch` under `mask` and apply one update. Overlong records
    /// are skipped; a batch with nothing left is an error.
    pub fn sft_step(&mut self, batch: &[&QARecord], mask: CueMask) -> Result<StepOutcome> {
        let max_len = self.model.config().max_seq_len;
        let mut examples = Vec::with_capacity(batch.len());
        for r in batch {
            if let Some(ex) = encode_record(r, mask, max_len)? {
                examples.push(ex);
            }
        }
        let skipped = batch.len() - examples.len();
        if examples.is_empty() {
            return Err(Error::Degenerate(format!("all {} records in the batch are overlong", batch.len())));
        }
        let refs: Vec<&Example> = examples.iter().collect();
        let mut out = self.step_examples(&refs)?;
        out.skipped_overlong = skipped;
        Ok(out)
    }

    /// Train on the `train` split of `corpus`. `on_epoch(epoch, model)` runs
    /// after each epoch's frozen-base check (epochs count from 1).
    pub fn train(
        &mut self,
        corpus: &[QARecord],
        mask: CueMask,
        mut on_epoch: impl FnMut(usize, &TinyLM) -> Result<()>,
    ) -> Result<TrainLog> {
        let max_len = self.model.config().max_seq_len;
        let mut examples = Vec::new();
        let mut log = TrainLog::default();
        for r in corpus.iter().filter(|r| r.split == Split::Train) {
            match encode_record(r, mask, max_len)? {
                Some(ex) => examples.push(ex),
                None => log.skipped_overlong += 1,
            }
        }
        if examples.is_empty() {
            return Err(Error::Degenerate("no trainable records in the train split".into()));
        }
        if log.skipped_overlong > 0 {
            log::warn!("skipped {} overlong records", log.skipped_overlong);
        }
        let mut shuffle_rng = seeded_rng(self.config.seed.wrapping_add(0x5eed));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 1..=self.config.epochs {
            let start = Instant::now();
            order.shuffle(&mut shuffle_rng);
            let (mut sum, mut tokens) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
                let out = self.step_examples(&batch)?;
                sum += out.loss * out.scored_tokens as f64;
                tokens += out.scored_tokens;
                log.step_losses.push(out.loss);
                if log.step_losses.len() % 100 == 0 {
                    log::debug!("step {}: loss {:.4}", log.step_losses.len(), out.loss);
                }
            }
            self.check_frozen()?;
            log.epoch_mean_losses.push(sum / tokens as f64);
            log.epoch_seconds.push(start.elapsed().as_secs_f64());
            log::info!(
                "epoch {epoch}: mean loss {:.4} in {:.1} s",
                sum / tokens as f64,
                start.elapsed().as_secs_f64()
            );
            on_epoch(epoch, &self.model)?;
        }
        log.checksum = self.model.checksum();
        Ok(log)
    }
}

/// Train a fresh trainer over `corpus` and return the model with its log.
pub fn train(model: TinyLM, corpus: &[QARecord], config: &TrainConfig, mask: CueMask) -> Result<(TinyLM, TrainLog)> {
    let mut t = Trainer::new(model, config.clone())?;
    let log = t.train(corpus, mask, |_, _| Ok(()))?;
    Ok((t.into_model(), log))
}
