//! Pulling the protocol toward a reference language: a KL penalty against
//! a trained language model, and direct co-training on captions.

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::agents::{
    hard_symbols, sum_scalars, Agents, DecodeMode, LanguageModel, Rollout, Sender,
};
use crate::autograd::{Tensor, Var};
use crate::data::{CaptionRecord, Pool};
use crate::error::{Error, Result};
use crate::estimators::{relaxed_step, StepOutput};
use crate::game::{round_graph, GameInstance};
use crate::nn::{Adam, AdamConfig, Grads, Graph};
use crate::par::{self, map_slice, Exec};
use crate::rng::{NoiseKey, Purpose, Streams};

pub const DEFAULT_KL_WEIGHT: f64 = 0.1;
pub const DEFAULT_LM_FRACTION: f64 = 0.5;
pub const DEFAULT_CAPTION_FRACTION: f64 = 0.25;

/// Weights and data split of a grounded run.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingConfig {
    pub kl_weight: f64,
    pub caption_weight: f64,
    /// Share of the training pool whose captions train the language model.
    pub lm_fraction: f64,
    /// Share of the training pool whose captions train the sender directly.
    pub caption_fraction: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            kl_weight: DEFAULT_KL_WEIGHT,
            caption_weight: 1.0,
            lm_fraction: DEFAULT_LM_FRACTION,
            caption_fraction: DEFAULT_CAPTION_FRACTION,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kl_weight", self.kl_weight),
            ("caption_weight", self.caption_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("lm_fraction", self.lm_fraction),
            ("caption_fraction", self.caption_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Splits pool indices into a reference part holding `fraction` of the
/// images and the remaining game part.
pub fn split_reference<R: Rng>(
    pool: &Pool,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut parts = pool.split_indices(&[fraction, 1.0 - fraction], rng);
    let game = parts.pop().unwrap_or_default();
    let reference = parts.pop().unwrap_or_default();
    (reference, game)
}

fn check_vocab(sender: &Sender, lm: &LanguageModel) -> Result<()> {
    if lm.vocab.size < sender.vocab.size {
        return Err(Error::Config(format!(
            "language model vocabulary {} smaller than sender vocabulary {}",
            lm.vocab.size, sender.vocab.size
        )));
    }
    Ok(())
}

/// `sum_i [log q(w_i) - log p(w_i)]` over the rollout's tokens, EOS included.
/// On straight-through rollouts the lm terms see the one-hot tokens, so
/// gradients reach the sender through both sums.
pub fn kl_from_rollout(g: &mut Graph, lm: &LanguageModel, rollout: &Rollout) -> Result<Var> {
    let (_, lm_terms) = lm.score(g, &rollout.symbols)?;
    let q = sum_scalars(g, &rollout.token_log_probs)?;
    let p = sum_scalars(g, &lm_terms)?;
    g.sub(q, p)
}

/// Single-message estimate of `KL(q(.|t) || p)` on a straight-through sample.
pub fn kl_penalty_sample<R: Rng>(agents: &Agents, features: &[f64], rng: &mut R) -> Result<f64> {
    let lm = agents
        .lm
        .as_ref()
        .ok_or_else(|| Error::Config("KL penalty needs a language model".into()))?;
    check_vocab(&agents.sender, lm)?;
    let mut g = Graph::inference(&agents.store);
    let f = g.constant(Tensor::vector(features.to_vec()));
    let rollout = agents
        .sender
        .generate(&mut g, f, DecodeMode::StraightThrough, rng)?;
    let kl = kl_from_rollout(&mut g, lm, &rollout)?;
    Ok(g.item(kl))
}

/// Batch mean of `hinge + kl_weight * KL` with one message per instance
/// serving both terms. With `kl_weight == 0` the KL term is not computed.
pub fn grounded_game_loss(
    agents: &Agents,
    batch: &[GameInstance],
    kl_weight: f64,
    mode: DecodeMode,
    noise: NoiseKey,
    exec: Exec,
) -> Result<f64> {
    if !kl_weight.is_finite() || kl_weight < 0.0 {
        return Err(Error::Config(format!("kl weight {kl_weight}")));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let lm = if kl_weight > 0.0 {
        let lm = agents
            .lm
            .as_ref()
            .ok_or_else(|| Error::Config("KL penalty needs a language model".into()))?;
        check_vocab(&agents.sender, lm)?;
        Some(lm)
    } else {
        None
    };
    let losses = par::map_slice(exec, batch, |i, inst| -> Result<f64> {
        let mut g = Graph::inference(&agents.store);
        let rg = round_graph(&mut g, agents, inst, mode, &mut noise.rng(i as u64))?;
        let mut loss = g.item(rg.loss);
        if let Some(lm) = lm {
            let kl = kl_from_rollout(&mut g, lm, &rg.rollout)?;
            loss += kl_weight * g.item(kl);
        }
        Ok(loss)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Cuts a caption to the sender's maximum length.
pub fn fit_caption(caption: &[usize], max_len: usize) -> &[usize] {
    if caption.len() > max_len {
        warn!("caption of {} tokens truncated to {max_len}", caption.len());
        &caption[..max_len]
    } else {
        caption
    }
}

/// Teacher-forced negative log-likelihood of `caption` (EOS included)
/// under the sender conditioned on `features`.
pub fn caption_loss(
    g: &mut Graph,
    sender: &Sender,
    features: Var,
    caption: &[usize],
) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::EmptyMessage);
    }
    let tokens = fit_caption(caption, sender.vocab.max_len);
    let lp = sender.sequence_log_prob(g, features, tokens)?;
    g.scale(lp, -1.0)
}

/// An image paired with a reference caption.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionExample {
    pub features: Vec<f64>,
    pub tokens: Vec<usize>,
}

/// Pairs each image of `indices` with a caption of its concept. When a
/// concept has several captions one is chosen at random.
pub fn caption_examples<R: Rng>(
    pool: &Pool,
    indices: &[usize],
    captions: &[CaptionRecord],
    rng: &mut R,
) -> Result<Vec<CaptionExample>> {
    let mut by_concept: Vec<Vec<&CaptionRecord>> = Vec::new();
    for c in captions {
        if by_concept.len() <= c.concept {
            by_concept.resize(c.concept + 1, Vec::new());
        }
        by_concept[c.concept].push(c);
    }
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = &pool.images[i];
        let Some(choice) = by_concept.get(img.concept).and_then(|v| v.choose(rng)) else {
            continue;
        };
        out.push(CaptionExample {
            features: img.features.clone(),
            tokens: choice.tokens.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Config("no captioned images".into()));
    }
    Ok(out)
}

/// Gradient of `mean caption NLL + caption_weight * mean game loss`, the
/// game term through straight-through messages. The game term is skipped
/// entirely when the weight is zero.
pub fn direct_grounding_step(
    agents: &Agents,
    captions: &[CaptionExample],
    game: &[GameInstance],
    caption_weight: f64,
    noise: NoiseKey,
    exec: Exec,
) -> Result<StepOutput> {
    if !caption_weight.is_finite() || caption_weight < 0.0 {
        return Err(Error::Config(format!("caption weight {caption_weight}")));
    }
    if captions.is_empty() {
        return Err(Error::Config("empty caption batch".into()));
    }
    let n = captions.len() as f64;
    let parts = map_slice(exec, captions, |_, ex| -> Result<(Grads, f64)> {
        let mut g = agents.game_graph();
        let f = g.constant(Tensor::vector(ex.features.clone()));
        let nll = caption_loss(&mut g, &agents.sender, f, &ex.tokens)?;
        let scaled = g.scale(nll, 1.0 / n)?;
        Ok((g.backward(scaled)?, g.item(nll)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let caption_nll = parts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut grads = Grads::new(agents.store.len());
    for (g, _) in &parts {
        grads.add_assign(g);
    }
    let mut out = if caption_weight > 0.0 {
        let mut step = relaxed_step(agents, game, DecodeMode::StraightThrough, 0.0, noise, exec)?;
        step.grads.scale(caption_weight);
        step.grads.add_assign(&grads);
        step
    } else {
        StepOutput {
            grads,
            baseline_grads: None,
            sender_lr_scale: 1.0,
            metrics: Default::default(),
            signals: Vec::new(),
        }
    };
    out.metrics.caption_nll = Some(caption_nll);
    Ok(out)
}

/// Per-token perplexity of `corpus` under the language model.
pub fn lm_perplexity(
    agents: &Agents,
    lm: &LanguageModel,
    corpus: &[Vec<usize>],
    exec: Exec,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let parts = map_slice(exec, corpus, |_, m| -> Result<(f64, usize)> {
        let mut g = Graph::inference(&agents.store);
        let lp = lm.log_prob(&mut g, &hard_symbols(m))?;
        Ok((-g.item(lp), m.len()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let nll: f64 = parts.iter().map(|p| p.0).sum();
    let tokens: usize = parts.iter().map(|p| p.1).sum();
    Ok((nll / tokens as f64).exp().max(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::with_lr(1e-2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmReport {
    /// Training-corpus perplexity after each epoch.
    pub epoch_perplexity: Vec<f64>,
}

impl LmReport {
    pub fn final_perplexity(&self) -> f64 {
        self.epoch_perplexity.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits the language model to `corpus` by teacher-forced maximum
/// likelihood. Only `lm.` parameters change.
pub fn lm_train(
    agents: &mut Agents,
    corpus: &[Vec<usize>],
    cfg: &LmTrainConfig,
    streams: Streams,
    exec: Exec,
) -> Result<LmReport> {
    if corpus.is_empty() {
        return Err(Error::Config("empty language-model corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("lm batch size must be positive".into()));
    }
    let lm = agents
        .lm
        .clone()
        .ok_or_else(|| Error::Config("agents were built without a language model".into()))?;
    for m in corpus {
        if m.is_empty() {
            return Err(Error::EmptyMessage);
        }
        for &t in m {
            lm.vocab.check(t)?;
        }
    }
    let lm_ids = lm.param_ids(&agents.store);
    let mut adam = Adam::new(cfg.adam, &agents.store);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = LmReport {
        epoch_perplexity: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut streams.stream(Purpose::Lm, epoch as u64, 0));
        for chunk in order.chunks(cfg.batch_size) {
            let tokens: usize = chunk.iter().map(|&i| corpus[i].len()).sum();
            let store = &agents.store;
            let parts = par::map_slice(exec, chunk, |_, &i| -> Result<Grads> {
                let mut g = Graph::new(store);
                let lp = lm.log_prob(&mut g, &hard_symbols(&corpus[i]))?;
                let l = g.scale(lp, -1.0 / tokens as f64)?;
                g.backward(l)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut grads = Grads::new(agents.store.len());
            for p in &parts {
                grads.add_assign(p);
            }
            grads.retain(|id| lm_ids.contains(&id));
            adam.step(&mut agents.store, &grads)?;
        }
        report
            .epoch_perplexity
            .push(lm_perplexity(agents, &lm, corpus, exec)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
