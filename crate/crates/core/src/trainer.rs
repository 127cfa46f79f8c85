//! Two-pass training of the context vectors.
//!
//! Each mini-batch runs a class pass and a domain pass against the same
//! context. The class gradient and the reversed domain gradient are masked by
//! layout and folded into one SGD step:
//!
//! ```text
//! v <- v - lr * (mask_class * g_cls + mask_domain * grl(g_dom, lambda))
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecord, FeatureStore};
use crate::encoder::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::objective::{batch_pass, combined_loss, grl_backward, PassExample, DEFAULT_TEMPERATURE};
use crate::prompt::{Layout, PassKind, PromptContext, TokenTable};
use crate::rng::{purpose, KeyedStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `lambda_max * (2 / (1 + exp(-10 p)) - 1)`.
    DannRamp,
}

pub fn lambda_at(schedule: Schedule, lambda_max: f64, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::invalid(format!("training progress {progress} is outside [0, 1]")));
    }
    Ok(match schedule {
        Schedule::Constant => lambda_max,
        Schedule::DannRamp => lambda_max * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub layout: Layout,
    pub m: usize,
    /// Token embedding width.
    pub d: usize,
    /// Feature width; must match the feature store.
    pub dim: usize,
    pub temperature: f64,
    pub lambda_max: f64,
    pub schedule: Schedule,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout_domain: String,
    /// Seed of the frozen encoder; `None` reuses `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_seed: Option<u64>,
    /// Seed of the frozen token table; `None` reuses `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layout: Layout::Dfp,
            m: 16,
            d: 64,
            dim: 64,
            temperature: DEFAULT_TEMPERATURE,
            lambda_max: 1.0,
            schedule: Schedule::Constant,
            lr: 0.05,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            holdout_domain: "domain_0".to_string(),
            encoder_seed: None,
            token_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.lambda_max >= 0.0) || !self.lambda_max.is_finite() {
            return Err(Error::invalid(format!("lambda_max must be >= 0, got {}", self.lambda_max)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.m < 2 || self.d == 0 || self.dim == 0 {
            return Err(Error::invalid("m must be >= 2 and d, dim must be positive"));
        }
        self.layout.check_token_count(self.m)
    }

    pub fn resolved_encoder_seed(&self) -> u64 {
        self.encoder_seed.unwrap_or(self.seed)
    }

    pub fn resolved_token_seed(&self) -> u64 {
        self.token_seed.unwrap_or(self.seed)
    }

    /// The frozen encoder and token table this config trains against.
    pub fn frozen_model(&self, store: &FeatureStore) -> Result<(FrozenTextEncoder, TokenTable)> {
        if store.dim() != self.dim {
            return Err(Error::invalid(format!(
                "config feature width {} does not match store width {}",
                self.dim,
                store.dim()
            )));
        }
        let encoder = FrozenTextEncoder::new(self.m + 1, self.d, self.dim, self.resolved_encoder_seed())?;
        let tokens = TokenTable::generate(
            store.class_names(),
            store.domain_names(),
            self.d,
            self.resolved_token_seed(),
        )?;
        Ok((encoder, tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub class_loss: f64,
    pub domain_loss: f64,
    /// `class_loss - lambda * domain_loss`.
    pub combined_loss: f64,
    pub lambda: f64,
    pub clamp_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedRun {
    pub final_context: PromptContext,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub encoder_seed: u64,
    pub token_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub context: PromptContext,
    pub class_loss: f64,
    pub domain_loss: f64,
    /// `-lr * mask_class * g_cls`; rows outside the class mask are exactly zero.
    pub class_delta: DMatrix<f64>,
    /// `-lr * mask_domain * grl(g_dom)`; rows outside the domain mask are exactly zero.
    pub domain_delta: DMatrix<f64>,
    pub clamp_events: usize,
}

/// One joint update from a batch of unit-norm source-domain features.
///
/// `domain_candidates` are the source domain ids competing in the domain pass.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    context: &PromptContext,
    batch: &[&FeatureRecord],
    tokens: &TokenTable,
    encoder: &FrozenTextEncoder,
    domain_candidates: &[usize],
    temperature: f64,
    lambda: f64,
    lr: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step needs a non-empty batch"));
    }
    let class_candidates: Vec<usize> = (0..tokens.count(PassKind::ClassPass)).collect();
    let class_examples: Vec<PassExample<'_>> = batch
        .iter()
        .map(|r| PassExample {
            feature: &r.feature,
            label: r.class_id,
        })
        .collect();
    let domain_examples: Vec<PassExample<'_>> = batch
        .iter()
        .map(|r| PassExample {
            feature: &r.feature,
            label: r.domain_id,
        })
        .collect();
    let class = batch_pass(
        context,
        tokens,
        encoder,
        &class_examples,
        PassKind::ClassPass,
        &class_candidates,
        temperature,
    )?;
    let domain = batch_pass(
        context,
        tokens,
        encoder,
        &domain_examples,
        PassKind::DomainPass,
        domain_candidates,
        temperature,
    )?;
    let reversed = grl_backward(&domain.grad_context, lambda);

    let class_mask = context.mask(PassKind::ClassPass);
    let domain_mask = context.mask(PassKind::DomainPass);
    let (m, d) = (context.m(), context.d());
    let mut next = context.clone();
    let mut class_delta = DMatrix::zeros(m, d);
    let mut domain_delta = DMatrix::zeros(m, d);
    let values = next.values_mut();
    for i in 0..m {
        for j in 0..d {
            let step = match (class_mask[i], domain_mask[i]) {
                (true, true) => class.grad_context[(i, j)] + reversed[(i, j)],
                (true, false) => class.grad_context[(i, j)],
                (false, true) => reversed[(i, j)],
                (false, false) => continue,
            };
            if class_mask[i] {
                class_delta[(i, j)] = -lr * class.grad_context[(i, j)];
            }
            if domain_mask[i] {
                domain_delta[(i, j)] = -lr * reversed[(i, j)];
            }
            values[(i, j)] -= lr * step;
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("context diverged to a non-finite value"));
    }
    Ok(StepOutcome {
        context: next,
        class_loss: class.loss,
        domain_loss: domain.loss,
        class_delta,
        domain_delta,
        clamp_events: class.clamp_events + domain.clamp_events,
    })
}

/// What an observer sees after each step of [`train_observed`].
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    pub before: &'a PromptContext,
    pub outcome: &'a StepOutcome,
}

/// Source records (holdout removed), re-normalized in 64-bit, plus the sorted
/// source domain ids.
pub(crate) fn source_records(
    config: &TrainConfig,
    store: &FeatureStore,
) -> Result<(Vec<FeatureRecord>, Vec<usize>)> {
    let held = store.domain_id(&config.holdout_domain).ok_or_else(|| {
        Error::invalid(format!("unknown holdout domain {:?}", config.holdout_domain))
    })?;
    let records: Vec<FeatureRecord> = store
        .records()
        .iter()
        .filter(|r| r.domain_id != held)
        .map(|r| FeatureRecord {
            feature: unit(&r.feature),
            ..r.clone()
        })
        .collect();
    let mut domains: Vec<usize> = records.iter().map(|r| r.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();
    if domains.len() < 2 {
        return Err(Error::Setup(format!(
            "training needs at least 2 source domains after holding out {:?}, found {}",
            config.holdout_domain,
            domains.len()
        )));
    }
    for &p in &domains {
        for k in 0..store.class_names().len() {
            if !records.iter().any(|r| r.class_id == k && r.domain_id == p) {
                return Err(Error::Setup(format!(
                    "source domain {:?} has no record of class {:?}",
                    store.domain_names()[p],
                    store.class_names()[k]
                )));
            }
        }
    }
    Ok((records, domains))
}

pub(crate) fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

pub fn train(config: &TrainConfig, store: &FeatureStore) -> Result<TrainedRun> {
    config.validate()?;
    let (encoder, tokens) = config.frozen_model(store)?;
    train_with(config, store, &encoder, &tokens, |_| Ok(()))
}

/// [`train`] with a callback after every step; an error from the callback
/// aborts training.
pub fn train_observed<F>(config: &TrainConfig, store: &FeatureStore, observer: F) -> Result<TrainedRun>
where
    F: FnMut(&StepEvent<'_>) -> Result<()>,
{
    config.validate()?;
    let (encoder, tokens) = config.frozen_model(store)?;
    train_with(config, store, &encoder, &tokens, observer)
}

/// Training against an explicit frozen encoder and token table.
pub fn train_with<F>(
    config: &TrainConfig,
    store: &FeatureStore,
    encoder: &FrozenTextEncoder,
    tokens: &TokenTable,
    mut observer: F,
) -> Result<TrainedRun>
where
    F: FnMut(&StepEvent<'_>) -> Result<()>,
{
    config.validate()?;
    let (records, domains) = source_records(config, store)?;
    let mut context = PromptContext::new(config.m, config.d, config.layout, config.seed)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lambda = lambda_at(
            config.schedule,
            config.lambda_max,
            epoch as f64 / config.epochs as f64,
        )?;
        KeyedStream::new(config.seed, purpose::EPOCH_SHUFFLE, epoch as u64).shuffle(&mut order);
        let (mut class_sum, mut domain_sum, mut clamps) = (0.0, 0.0, 0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&FeatureRecord> = chunk.iter().map(|i| &records[*i]).collect();
            let outcome = train_step(
                &context,
                &batch,
                tokens,
                encoder,
                &domains,
                config.temperature,
                lambda,
                config.lr,
            )?;
            observer(&StepEvent {
                epoch,
                step,
                lambda,
                before: &context,
                outcome: &outcome,
            })?;
            class_sum += outcome.class_loss * batch.len() as f64;
            domain_sum += outcome.domain_loss * batch.len() as f64;
            clamps += outcome.clamp_events;
            context = outcome.context;
        }
        let n = records.len() as f64;
        let (class_loss, domain_loss) = (class_sum / n, domain_sum / n);
        history.push(EpochRecord {
            class_loss,
            domain_loss,
            combined_loss: combined_loss(class_loss, domain_loss, lambda),
            lambda,
            clamp_events: clamps,
        });
    }

    Ok(TrainedRun {
        final_context: context,
        config: config.clone(),
        history,
        encoder_seed: config.resolved_encoder_seed(),
        token_seed: config.resolved_token_seed(),
    })
}
