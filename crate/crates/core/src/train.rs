//! Training loop, evaluation schedule, early stopping and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agents, Architecture, DecodeMode};
use crate::analysis::{
    encoder_perplexity, labelled_messages, length_stats, omission_score, paraphrase_stats,
    write_message_log, EvalReport, MessageSample,
};
use crate::config::{GroundingMode, RunConfig};
use crate::data::{load_captions, load_features, pool_from_features, CaptionRecord, Pool, World};
use crate::error::{Error, Result};
use crate::estimators::{
    acute_angle_fraction, reinforce_step, relaxed_step, BaselineKind, EstimatorKind, ProbeConfig,
    ProbeReport, ReinforceState, StepOutput,
};
use crate::game::{make_batch, play_round, GameInstance};
use crate::grounding::{
    caption_examples, direct_grounding_step, lm_train, split_reference, CaptionExample, LmReport,
    LmTrainConfig,
};
use crate::nn::{Adam, AdamConfig, Graph, ParamStore};
use crate::par::{self, Exec};
use crate::rng::{NoiseKey, Purpose, Streams};

pub const CHECKPOINT_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "update,train_loss,train_success,success_greedy,success_sample,success_relaxed,perplexity,mean_length,signal_variance,lm_perplexity";

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Plain,
    Grounded(GroundingMode),
}

/// One evaluation row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: u64,
    pub train_loss: f64,
    pub train_success: f64,
    pub success_greedy: f64,
    pub success_sample: f64,
    pub success_relaxed: Option<f64>,
    pub perplexity: f64,
    pub mean_length: f64,
    pub signal_variance: Option<f64>,
    pub lm_perplexity: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.train_loss,
            self.train_success,
            self.success_greedy,
            self.success_sample,
            opt(self.success_relaxed),
            self.perplexity,
            self.mean_length,
            opt(self.signal_variance),
            opt(self.lm_perplexity)
        )
    }

    /// Held-out success under `mode`.
    pub fn success(&self, mode: DecodeMode) -> f64 {
        match mode {
            DecodeMode::Greedy => self.success_greedy,
            DecodeMode::Sample => self.success_sample,
            _ => self.success_relaxed.unwrap_or(f64::NAN),
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// First evaluated update whose `mode` success reaches `threshold`.
pub fn updates_to_success(rows: &[MetricsRow], threshold: f64, mode: DecodeMode) -> Option<u64> {
    rows.iter()
        .find(|r| r.success(mode) >= threshold)
        .map(|r| r.update)
}

/// First evaluated update reaching 80% of the run's final success.
pub fn convergence_update(rows: &[MetricsRow], mode: DecodeMode) -> Option<u64> {
    let last = rows.last()?.success(mode);
    updates_to_success(rows, 0.8 * last, mode)
}

/// Images, reference captions and evaluation rounds of a run.
#[derive(Clone, Debug)]
pub struct Data {
    pub world: World,
    pub train: Pool,
    pub heldout: Pool,
    /// Images the game is played on.
    pub game: Pool,
    pub lm_corpus: Vec<Vec<usize>>,
    pub captions: Vec<CaptionExample>,
    pub eval_rounds: Vec<GameInstance>,
}

fn synthetic_captions(world: &World, pool: &Pool, cfg: &RunConfig) -> Result<Vec<CaptionRecord>> {
    pool.concepts()
        .into_iter()
        .map(|c| world.caption_for(c, &cfg.vocab()))
        .collect()
}

impl Data {
    pub fn build(cfg: &RunConfig, kind: RunKind) -> Result<Self> {
        let world = World::build(cfg.world_spec())?;
        let ds = Streams::new(cfg.world_seed);
        let (train, heldout) = match &cfg.features {
            None => (
                Pool::generate(
                    &world,
                    cfg.train_per_concept,
                    &mut ds.stream(Purpose::Pool, 0, 0),
                )?,
                Pool::generate(
                    &world,
                    cfg.heldout_per_concept,
                    &mut ds.stream(Purpose::Pool, 1, 0),
                )?,
            ),
            Some(path) => {
                let all = pool_from_features(&load_features(path)?)?;
                let parts = all.split_indices(
                    &[1.0 - cfg.heldout_fraction, cfg.heldout_fraction],
                    &mut ds.stream(Purpose::Pool, 2, 0),
                );
                (all.subset(&parts[0])?, all.subset(&parts[1])?)
            }
        };
        let captions = match &cfg.captions {
            Some(path) => load_captions(path, &cfg.vocab())?,
            None => synthetic_captions(&world, &train, cfg)?,
        };
        let mut game = train.clone();
        let mut lm_corpus = Vec::new();
        let mut caption_set = Vec::new();
        match kind {
            RunKind::Plain => {}
            RunKind::Grounded(GroundingMode::Kl) => {
                let mut r = ds.stream(Purpose::Caption, 0, 0);
                let (reference, _) = split_reference(&train, cfg.lm_fraction, &mut r);
                lm_corpus = caption_examples(&train, &reference, &captions, &mut r)?
                    .into_iter()
                    .map(|c| c.tokens)
                    .collect();
            }
            RunKind::Grounded(GroundingMode::Direct) => {
                let mut r = ds.stream(Purpose::Caption, 1, 0);
                let (reference, rest) = split_reference(&train, cfg.caption_fraction, &mut r);
                caption_set = caption_examples(&train, &reference, &captions, &mut r)?;
                game = train.subset(&rest)?;
            }
        }
        if heldout.concepts().len() <= cfg.distractors || game.concepts().len() <= cfg.distractors {
            return Err(Error::Config(format!(
                "{} distractors need more distinct concepts in every pool",
                cfg.distractors
            )));
        }
        let eval_rounds = make_batch(
            &heldout,
            cfg.eval_rounds,
            cfg.distractors,
            &mut ds.stream(Purpose::EvalBatch, 0, 0),
        )?;
        Ok(Self {
            world,
            train,
            heldout,
            game,
            lm_corpus,
            captions: caption_set,
            eval_rounds,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Running {
    loss: f64,
    success: f64,
    steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Tracker {
    best: f64,
    evals_since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    Plateau,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub kind: RunKind,
    pub arch: Architecture,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub reinforce: Option<ReinforceState>,
    pub update: u64,
    pub history: Vec<MetricsRow>,
    pub stopped: Option<StopReason>,
    running: Running,
    tracker: Tracker,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let version: serde_json::Value = serde_json::from_str(&text)?;
        let found = version.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(version)?)
    }
}

/// Outcome of one evaluation pass over the fixed held-out rounds.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub row: MetricsRow,
    /// Decode-mode message of every round's target.
    pub messages: Vec<MessageSample>,
}

pub struct Experiment {
    pub cfg: RunConfig,
    pub kind: RunKind,
    pub data: Data,
    pub agents: Agents,
    pub update: u64,
    pub history: Vec<MetricsRow>,
    pub stopped: Option<StopReason>,
    pub lm_report: Option<LmReport>,
    optimizer: Adam,
    reinforce: Option<ReinforceState>,
    sender_mask: Vec<bool>,
    running: Running,
    tracker: Tracker,
    streams: Streams,
}

impl Experiment {
    pub fn new(cfg: RunConfig, kind: RunKind) -> Result<Self> {
        cfg.validate()?;
        if let RunKind::Grounded(mode) = kind {
            match (mode, cfg.estimator) {
                (GroundingMode::Kl, EstimatorKind::Reinforce) if cfg.kl_weight > 0.0 => {
                    return Err(Error::Config("the KL penalty is trained through ST-GS or GS; use --estimator st-gs or gs".into()));
                }
                (GroundingMode::Direct, e) if e != EstimatorKind::StGumbelSoftmax => {
                    return Err(Error::Config(
                        "direct grounding trains the game term with st-gs".into(),
                    ));
                }
                _ => {}
            }
        }
        let data = Data::build(&cfg, kind)?;
        let streams = Streams::new(cfg.seed);
        let with_lm = kind == RunKind::Grounded(GroundingMode::Kl);
        let arch = cfg.architecture(data.train.feature_dim(), with_lm);
        let mut agents = Agents::new(arch, &mut streams.stream(Purpose::Init, 0, 0));
        let lm_report = if with_lm {
            let lm_cfg = LmTrainConfig {
                epochs: cfg.lm_epochs,
                batch_size: cfg.lm_batch_size,
                adam: AdamConfig::with_lr(cfg.lm_lr),
            };
            let report = lm_train(&mut agents, &data.lm_corpus, &lm_cfg, streams, cfg.exec())?;
            info!(
                "language model per-token perplexity {:.4}",
                report.final_perplexity()
            );
            Some(report)
        } else {
            None
        };
        let optimizer = Adam::new(cfg.adam(), &agents.store);
        let reinforce = (cfg.estimator == EstimatorKind::Reinforce).then(|| {
            let mut s = ReinforceState::new(
                cfg.baseline,
                &agents.store,
                AdamConfig::with_lr(cfg.baseline_lr),
            );
            s.decay = cfg.baseline_decay;
            s.variance_floor = cfg.variance_floor;
            s.adapt_lr = cfg.adapt_lr;
            s
        });
        Ok(Self::assemble(
            cfg, kind, data, agents, optimizer, reinforce, lm_report, streams,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: RunConfig,
        kind: RunKind,
        data: Data,
        agents: Agents,
        optimizer: Adam,
        reinforce: Option<ReinforceState>,
        lm_report: Option<LmReport>,
        streams: Streams,
    ) -> Self {
        let mut sender_mask = vec![false; agents.store.len()];
        for id in agents.sender.param_ids(&agents.store) {
            sender_mask[id.0] = true;
        }
        Self {
            cfg,
            kind,
            data,
            agents,
            update: 0,
            history: Vec::new(),
            stopped: None,
            lm_report,
            optimizer,
            reinforce,
            sender_mask,
            running: Running::default(),
            tracker: Tracker::default(),
            streams,
        }
    }

    pub fn exec(&self) -> Exec {
        self.cfg.exec()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            kind: self.kind,
            arch: self.agents.arch.clone(),
            params: self.agents.store.clone(),
            optimizer: self.optimizer.clone(),
            reinforce: self.reinforce.clone(),
            update: self.update,
            history: self.history.clone(),
            stopped: self.stopped,
            running: self.running.clone(),
            tracker: self.tracker.clone(),
        }
    }

    /// Rebuilds a run from a checkpoint; continuing it reproduces the
    /// uninterrupted run exactly.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let data = Data::build(&ck.config, ck.kind)?;
        let streams = Streams::new(ck.config.seed);
        let mut agents = Agents::new(ck.arch.clone(), &mut streams.stream(Purpose::Init, 0, 0));
        if agents.store.len() != ck.params.len()
            || agents
                .store
                .iter()
                .zip(ck.params.iter())
                .any(|(a, b)| a.name != b.name || a.tensor.shape() != b.tensor.shape())
        {
            return Err(Error::Config(
                "checkpoint parameters do not match the architecture".into(),
            ));
        }
        agents.store = ck.params;
        let mut exp = Self::assemble(
            ck.config,
            ck.kind,
            data,
            agents,
            ck.optimizer,
            ck.reinforce,
            None,
            streams,
        );
        exp.update = ck.update;
        exp.history = ck.history;
        exp.stopped = ck.stopped;
        exp.running = ck.running;
        exp.tracker = ck.tracker;
        Ok(exp)
    }

    /// One parameter update.
    pub fn step(&mut self) -> Result<StepOutput> {
        let cfg = &self.cfg;
        let exec = cfg.exec();
        let u = self.update;
        let batch = make_batch(
            &self.data.game,
            cfg.batch_size,
            cfg.distractors,
            &mut self.streams.stream(Purpose::TrainBatch, u, 0),
        )?;
        let noise = NoiseKey::new(self.streams, Purpose::TrainNoise, u);
        let out = match (self.kind, cfg.estimator) {
            (RunKind::Grounded(GroundingMode::Direct), _) => {
                let mut r = self.streams.stream(Purpose::Caption, u, 0);
                let captions: Vec<CaptionExample> = (0..cfg.batch_size)
                    .map(|_| {
                        self.data.captions[r.random_range(0..self.data.captions.len())].clone()
                    })
                    .collect();
                direct_grounding_step(
                    &self.agents,
                    &captions,
                    &batch,
                    cfg.caption_weight,
                    noise,
                    exec,
                )?
            }
            (_, EstimatorKind::Reinforce) => {
                let state = self.reinforce.as_mut().expect("reinforce state");
                reinforce_step(state, &self.agents, &batch, noise, exec)?
            }
            (kind, e) => {
                let beta = if kind == RunKind::Grounded(GroundingMode::Kl) {
                    cfg.kl_weight
                } else {
                    0.0
                };
                relaxed_step(&self.agents, &batch, e.train_mode(), beta, noise, exec)?
            }
        };
        if !out.metrics.loss.is_finite() && !out.signals.is_empty() {
            return Err(Error::NonFinite(format!("training loss at update {u}")));
        }
        let scale = out.sender_lr_scale;
        let mask = &self.sender_mask;
        self.optimizer
            .step_scaled(&mut self.agents.store, &out.grads, |id| {
                if mask[id.0] {
                    scale
                } else {
                    1.0
                }
            })?;
        if let (Some(state), Some(bg)) = (self.reinforce.as_mut(), out.baseline_grads.as_ref()) {
            if let Some(opt) = state.baseline_optimizer.as_mut() {
                opt.step(&mut self.agents.store, bg)?;
            }
        }
        self.running.loss += out.metrics.loss;
        self.running.success += out.metrics.success;
        self.running.steps += 1;
        self.update += 1;
        Ok(out)
    }

    /// Plays every held-out round greedily, by sampling, and (for
    /// relaxation-trained runs) with relaxed messages under the same noise.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let exec = self.exec();
        let agents = &self.agents;
        let noise = NoiseKey::new(self.streams, Purpose::EvalNoise, 0);
        let relaxed = self.cfg.estimator != EstimatorKind::Reinforce;
        let rounds = par::map_slice(exec, &self.data.eval_rounds, |i, inst| -> Result<_> {
            let greedy = play_round(agents, inst, DecodeMode::Greedy, &mut noise.rng(i as u64))?;
            let sample = play_round(agents, inst, DecodeMode::Sample, &mut noise.rng(i as u64))?;
            let relax = if relaxed {
                Some(
                    play_round(agents, inst, DecodeMode::Relaxed, &mut noise.rng(i as u64))?
                        .success,
                )
            } else {
                None
            };
            Ok((greedy, sample, relax))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let n = rounds.len() as f64;
        let success_greedy = rounds.iter().filter(|r| r.0.success).count() as f64 / n;
        let success_sample = rounds.iter().filter(|r| r.1.success).count() as f64 / n;
        let success_relaxed =
            relaxed.then(|| rounds.iter().filter(|r| r.2 == Some(true)).count() as f64 / n);
        let sampled: Vec<MessageSample> = rounds
            .iter()
            .zip(&self.data.eval_rounds)
            .map(|(r, inst)| MessageSample {
                concept: inst.target_concept(),
                tokens: r.1.message.tokens.clone(),
                log_prob: r.1.message.total_log_prob,
            })
            .collect();
        let perplexity = crate::analysis::perplexity_of(&sampled);
        let messages: Vec<MessageSample> = match self.cfg.decode {
            DecodeMode::Sample => sampled,
            _ => rounds
                .iter()
                .zip(&self.data.eval_rounds)
                .map(|(r, inst)| MessageSample {
                    concept: inst.target_concept(),
                    tokens: r.0.message.tokens.clone(),
                    log_prob: r.0.message.total_log_prob,
                })
                .collect(),
        };
        let mean_length = messages.iter().map(|m| m.tokens.len() as f64).sum::<f64>() / n;
        let lm_perplexity = match &agents.lm {
            Some(lm) => {
                let corpus: Vec<Vec<usize>> = messages.iter().map(|m| m.tokens.clone()).collect();
                Some(crate::grounding::lm_perplexity(agents, lm, &corpus, exec)?)
            }
            None => None,
        };
        let (train_loss, train_success) = if self.running.steps > 0 {
            let s = self.running.steps as f64;
            (self.running.loss / s, self.running.success / s)
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(Evaluation {
            row: MetricsRow {
                update: self.update,
                train_loss,
                train_success,
                success_greedy,
                success_sample,
                success_relaxed,
                perplexity,
                mean_length,
                signal_variance: self.reinforce.as_ref().map(|s| s.signal_variance),
                lm_perplexity,
            },
            messages,
        })
    }

    fn record(&mut self, row: MetricsRow) {
        let s = row.success(self.cfg.decode);
        if s > self.tracker.best {
            self.tracker.best = s;
            self.tracker.evals_since_best = 0;
        } else {
            self.tracker.evals_since_best += 1;
        }
        self.running = Running::default();
        if s >= self.cfg.early_stop_success {
            self.stopped = Some(StopReason::Threshold);
        } else if self.tracker.evals_since_best >= self.cfg.plateau_evals {
            self.stopped = Some(StopReason::Plateau);
        } else if self.update >= self.cfg.max_updates {
            self.stopped = Some(StopReason::Budget);
        }
        self.history.push(row);
    }

    /// Trains until early stop or the update budget. With `out`, writes the
    /// config echo, metrics CSV, periodic checkpoints and the final
    /// message log there.
    pub fn run(&mut self, out: Option<&Path>) -> Result<RunSummary> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.txt"), self.cfg.to_text())?;
            if let Some(r) = &self.lm_report {
                let mut s = String::from("epoch,perplexity\n");
                for (i, p) in r.epoch_perplexity.iter().enumerate() {
                    let _ = writeln!(s, "{},{p}", i + 1);
                }
                fs::write(dir.join("lm_metrics.csv"), s)?;
            }
        }
        while self.stopped.is_none() {
            if self.update >= self.cfg.max_updates {
                self.stopped = Some(StopReason::Budget);
                break;
            }
            if let Err(e) = self.step() {
                if matches!(e, Error::NonFinite(_) | Error::NonFiniteGradient(_)) {
                    warn!(
                        "aborting at update {}: {e}; last checkpoint kept",
                        self.update
                    );
                }
                return Err(e);
            }
            let due = self.update.is_multiple_of(self.cfg.eval_interval)
                || self.update >= self.cfg.max_updates;
            if due {
                let ev = self.evaluate()?;
                info!(
                    "update {} loss {:.4} success greedy {:.3} sample {:.3}",
                    ev.row.update, ev.row.train_loss, ev.row.success_greedy, ev.row.success_sample
                );
                self.record(ev.row);
                if let Some(dir) = out {
                    fs::write(dir.join("metrics.csv"), metrics_csv(&self.history))?;
                }
            }
            if let Some(dir) = out {
                let ci = self.cfg.checkpoint_interval;
                if ci > 0 && self.update.is_multiple_of(ci) {
                    self.checkpoint().save(&dir.join("checkpoint.json"))?;
                }
            }
        }
        let final_eval = self.evaluate()?;
        if let Some(dir) = out {
            fs::write(dir.join("metrics.csv"), metrics_csv(&self.history))?;
            self.checkpoint().save(&dir.join("checkpoint.json"))?;
            write_message_log(&dir.join("messages.txt"), &final_eval.messages)?;
        }
        Ok(RunSummary {
            updates: self.update,
            stopped: self.stopped.unwrap_or(StopReason::Budget),
            final_row: self.history.last().cloned().unwrap_or(final_eval.row),
        })
    }

    /// Decode-mode messages for every held-out image.
    pub fn heldout_messages(&self, mode: DecodeMode) -> Result<Vec<MessageSample>> {
        let images: Vec<(usize, &[f64])> = self
            .data
            .heldout
            .images
            .iter()
            .map(|i| (i.concept, i.features.as_slice()))
            .collect();
        let noise = NoiseKey::new(self.streams, Purpose::Analysis, 0);
        crate::analysis::generate_messages(&self.agents, &images, mode, noise, self.exec())
    }

    /// Prefix purity of the held-out protocol for every attribute.
    pub fn purity_table(
        &self,
        mode: DecodeMode,
        max_prefix: usize,
    ) -> Result<Vec<(usize, usize, f64)>> {
        let labelled = labelled_messages(&self.data.world, &self.heldout_messages(mode)?);
        let mut out = Vec::new();
        for len in 1..=max_prefix {
            for attr in 0..self.data.world.spec.n_attributes {
                out.push((
                    len,
                    attr,
                    crate::analysis::prefix_purity(&labelled, len, attr)?,
                ));
            }
        }
        Ok(out)
    }

    /// Per-token perplexity of `messages` under the language model.
    pub fn lm_perplexity_of(&self, messages: &[Vec<usize>]) -> Result<Option<f64>> {
        match &self.agents.lm {
            Some(lm) => Ok(Some(crate::grounding::lm_perplexity(
                &self.agents,
                lm,
                messages,
                self.exec(),
            )?)),
            None => Ok(None),
        }
    }

    /// Log-probability of `tokens` under the sender for `features`.
    pub fn sender_log_prob(&self, features: &[f64], tokens: &[usize]) -> Result<f64> {
        let mut g = Graph::inference(&self.agents.store);
        let f = g.constant(crate::autograd::Tensor::vector(features.to_vec()));
        let lp = self.agents.sender.sequence_log_prob(&mut g, f, tokens)?;
        Ok(g.item(lp))
    }

    /// Full analysis of the current protocol on held-out data.
    pub fn report(&self, paraphrase_samples: usize) -> Result<EvalReport> {
        let exec = self.exec();
        let ev = self.evaluate()?;
        let mode = self.cfg.decode;
        let held = self.heldout_messages(mode)?;
        let tokens: Vec<Vec<usize>> = held.iter().map(|m| m.tokens.clone()).collect();
        let (mean_length, length_p50, length_p90, unique_messages) = length_stats(&tokens);
        let encoder_perplexity = encoder_perplexity(
            &self.agents,
            &self.data.heldout,
            self.cfg.eval_rounds,
            &mut self.streams.stream(Purpose::Analysis, 1, 0),
            NoiseKey::new(self.streams, Purpose::Analysis, 2),
            exec,
        )?;
        let eos = self.agents.sender.vocab.eos();
        let omissions = par::map_slice(
            exec,
            &self.data.eval_rounds,
            |i, inst| -> Result<Option<f64>> {
                let m = &ev.messages[i].tokens;
                if m.iter().all(|&t| t == eos) {
                    return Ok(None);
                }
                omission_score(&self.agents, m, inst).map(Some)
            },
        )
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let omissions: Vec<f64> = omissions.into_iter().flatten().collect();
        let mean_omission = if omissions.is_empty() {
            0.0
        } else {
            omissions.iter().sum::<f64>() / omissions.len() as f64
        };
        let paraphrases_per_concept = paraphrase_stats(
            &self.agents,
            &self.data.heldout,
            paraphrase_samples,
            NoiseKey::new(self.streams, Purpose::Analysis, 3),
            exec,
        )?;
        let purity = self.purity_table(mode, self.cfg.max_len.min(3))?;
        Ok(EvalReport {
            success_greedy: ev.row.success_greedy,
            success_sample: ev.row.success_sample,
            success_relaxed: ev.row.success_relaxed,
            encoder_perplexity,
            mean_length,
            length_p50,
            length_p90,
            unique_messages,
            mean_omission,
            paraphrases_per_concept,
            purity,
            lm_perplexity: ev.row.lm_perplexity,
        })
    }

    /// Acute-angle statistics of the ST-GS direction against the discrete
    /// objective on training batches.
    pub fn probe(&self, n_probes: usize, eps: f64, mode: DecodeMode) -> Result<ProbeReport> {
        let cfg = ProbeConfig {
            n_probes,
            eps,
            batch_size: self.cfg.batch_size,
            distractors: self.cfg.distractors,
            mode,
        };
        acute_angle_fraction(
            &self.agents,
            &self.data.game,
            &cfg,
            self.streams,
            self.exec(),
        )
    }

    pub fn baseline_kind(&self) -> Option<BaselineKind> {
        self.reinforce.as_ref().map(|s| s.kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub updates: u64,
    pub stopped: StopReason,
    pub final_row: MetricsRow,
}

/// Output directory of one point of a learning-rate sweep.
pub fn sweep_dir(root: &Path, lr: f64) -> PathBuf {
    root.join(format!("lr_{lr:e}"))
}

/// Learning rates `1e-5, 1e-4, ..., 1e-1`.
pub fn sweep_grid() -> Vec<f64> {
    (0..5).map(|i| 10f64.powi(i - 5)).collect()
}
