//! Gradient estimators for the sender: REINFORCE with baseline and
//! variance-scaled learning rate, the (straight-through) Gumbel-softmax
//! path, and the central-difference pseudogradient probe.

use serde::{Deserialize, Serialize};

use crate::agents::{Agents, DecodeMode};
use crate::autograd::Tensor;
use crate::data::Pool;
use crate::error::{Error, Result};
use crate::game::{make_batch, round_graph, GameInstance, RoundGraph};
use crate::grounding::kl_from_rollout;
use crate::nn::{Adam, AdamConfig, Grads, Graph, ParamStore};
use crate::par::{self, Exec};
use crate::rng::{NoiseKey, Purpose, Streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Reinforce,
    #[serde(rename = "gs")]
    GumbelSoftmax,
    #[serde(rename = "st-gs")]
    StGumbelSoftmax,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::GumbelSoftmax => "gs",
            EstimatorKind::StGumbelSoftmax => "st-gs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reinforce" => Ok(EstimatorKind::Reinforce),
            "gs" => Ok(EstimatorKind::GumbelSoftmax),
            "st-gs" => Ok(EstimatorKind::StGumbelSoftmax),
            other => Err(Error::Config(format!(
                "unknown estimator `{other}` (reinforce, gs, st-gs)"
            ))),
        }
    }

    /// How the sender emits tokens during training.
    pub fn train_mode(&self) -> DecodeMode {
        match self {
            EstimatorKind::Reinforce => DecodeMode::Sample,
            EstimatorKind::GumbelSoftmax => DecodeMode::Relaxed,
            EstimatorKind::StGumbelSoftmax => DecodeMode::StraightThrough,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    None,
    MovingAverage,
    /// Learned regression from target features; needs an MLP in the agents.
    InputDependent,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineKind::None),
            "moving_average" => Ok(BaselineKind::MovingAverage),
            "input" | "input_dependent" => Ok(BaselineKind::InputDependent),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::MovingAverage => "moving_average",
            BaselineKind::InputDependent => "input_dependent",
        }
    }
}

/// Running statistics of the REINFORCE learning signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceState {
    pub kind: BaselineKind,
    pub baseline: f64,
    pub signal_variance: f64,
    pub initialized: bool,
    pub decay: f64,
    pub variance_floor: f64,
    pub adapt_lr: bool,
    pub baseline_optimizer: Option<Adam>,
}

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

impl ReinforceState {
    pub fn new(kind: BaselineKind, store: &ParamStore, baseline_adam: AdamConfig) -> Self {
        Self {
            kind,
            baseline: 0.0,
            signal_variance: 1.0,
            initialized: false,
            decay: DEFAULT_DECAY,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            adapt_lr: true,
            baseline_optimizer: (kind == BaselineKind::InputDependent)
                .then(|| Adam::new(baseline_adam, store)),
        }
    }

    /// Multiplier on the sender learning rate: `1 / max(sd, floor)`.
    pub fn lr_scale(&self) -> f64 {
        if !self.adapt_lr {
            return 1.0;
        }
        1.0 / self.signal_variance.sqrt().max(self.variance_floor)
    }

    /// Seeds the statistics from the first batch so that the very first
    /// update is centered and scaled.
    fn prime(&mut self, signals: &[f64], centered: &[f64]) {
        if self.initialized {
            return;
        }
        let n = signals.len() as f64;
        if self.kind == BaselineKind::MovingAverage {
            self.baseline = signals.iter().sum::<f64>() / n;
        }
        let mean_c = centered.iter().sum::<f64>() / n;
        let c: Vec<f64> = centered.iter().map(|x| x - mean_c).collect();
        self.signal_variance = c.iter().map(|x| x * x).sum::<f64>() / n;
        self.initialized = true;
    }

    /// Folds a batch of learning signals into the running statistics.
    fn update(&mut self, signals: &[f64], centered: &[f64]) {
        let n = signals.len() as f64;
        let rho = self.decay;
        let mean_c = centered.iter().sum::<f64>() / n;
        let var_c = centered
            .iter()
            .map(|x| (x - mean_c) * (x - mean_c))
            .sum::<f64>()
            / n;
        self.signal_variance = rho * self.signal_variance + (1.0 - rho) * var_c;
        self.baseline = rho * self.baseline + (1.0 - rho) * signals.iter().sum::<f64>() / n;
    }
}

/// Batch summary of one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub success: f64,
    pub mean_length: f64,
    pub kl: Option<f64>,
    pub caption_nll: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Gradients of sender, receiver and temperature parameters.
    pub grads: Grads,
    /// Gradients of the input-dependent baseline, when it is in use.
    pub baseline_grads: Option<Grads>,
    /// Multiplier for sender learning rates.
    pub sender_lr_scale: f64,
    pub metrics: StepMetrics,
    /// Per-instance learning signals (hinge losses).
    pub signals: Vec<f64>,
}

fn reduce(parts: impl IntoIterator<Item = Grads>, n: usize) -> Grads {
    let mut total = Grads::new(n);
    for g in parts {
        total.add_assign(&g);
    }
    total
}

fn summarize(rounds: &[(f64, bool, usize)], kl: Option<f64>) -> StepMetrics {
    let n = rounds.len() as f64;
    StepMetrics {
        loss: rounds.iter().map(|r| r.0).sum::<f64>() / n,
        success: rounds.iter().filter(|r| r.1).count() as f64 / n,
        mean_length: rounds.iter().map(|r| r.2 as f64).sum::<f64>() / n,
        kl,
        caption_nll: None,
    }
}

/// Score-function gradient of the batch-mean hinge loss. Receiver
/// gradients come from ordinary backpropagation on the same rounds.
pub fn reinforce_step(
    state: &mut ReinforceState,
    agents: &Agents,
    batch: &[GameInstance],
    noise: NoiseKey,
    exec: Exec,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let b = batch.len() as f64;
    let forwards = par::map_slice(exec, batch, |i, inst| -> Result<(Graph<'_>, RoundGraph)> {
        let mut g = agents.game_graph();
        let rg = round_graph(
            &mut g,
            agents,
            inst,
            DecodeMode::Sample,
            &mut noise.rng(i as u64),
        )?;
        Ok((g, rg))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let signals: Vec<f64> = forwards.iter().map(|(g, rg)| g.item(rg.loss)).collect();
    if let Some(bad) = signals.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("learning signal {bad}")));
    }
    let references: Vec<f64> = match state.kind {
        BaselineKind::None => vec![0.0; batch.len()],
        BaselineKind::MovingAverage => {
            state.prime(&signals, &signals);
            vec![state.baseline; batch.len()]
        }
        BaselineKind::InputDependent => {
            let mlp = agents.baseline.as_ref().ok_or_else(|| {
                Error::Config("input-dependent baseline needs a baseline network".into())
            })?;
            batch
                .iter()
                .map(|inst| {
                    let mut g = Graph::inference(&agents.store);
                    let f = g.constant(Tensor::vector(inst.target().to_vec()));
                    let y = mlp.forward(&mut g, f)?;
                    Ok(g.item(y))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let centered: Vec<f64> = signals
        .iter()
        .zip(&references)
        .map(|(l, r)| l - r)
        .collect();
    if state.kind != BaselineKind::MovingAverage {
        state.prime(&signals, &centered);
    }
    let sender_lr_scale = state.lr_scale();

    let rounds: Vec<(f64, bool, usize)> = forwards
        .iter()
        .zip(batch)
        .map(|((g, rg), inst)| {
            (
                g.item(rg.loss),
                rg.success(g, inst),
                rg.rollout.message.len(),
            )
        })
        .collect();
    let grads = par::map_vec(exec, forwards, |i, (mut g, rg)| -> Result<Grads> {
        let logq = rg.rollout.log_prob(&mut g)?;
        let game = g.scale(rg.loss, 1.0 / b)?;
        let score = g.scale(logq, centered[i] / b)?;
        let total = g.add(game, score)?;
        g.backward(total)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let grads = reduce(grads, agents.store.len());

    let baseline_grads = if state.kind == BaselineKind::InputDependent {
        let mlp = agents.baseline.as_ref().expect("checked above");
        let parts = par::map_slice(exec, batch, |i, inst| -> Result<Grads> {
            let mut g = Graph::new(&agents.store);
            let f = g.constant(Tensor::vector(inst.target().to_vec()));
            let y = mlp.forward(&mut g, f)?;
            let err = g.add_const(y, -signals[i])?;
            let sq = g.mul(err, err)?;
            let s = g.sum(sq)?;
            let l = g.scale(s, 1.0 / b)?;
            g.backward(l)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Some(reduce(parts, agents.store.len()))
    } else {
        None
    };

    state.update(&signals, &centered);
    Ok(StepOutput {
        grads,
        baseline_grads,
        sender_lr_scale,
        metrics: summarize(&rounds, None),
        signals,
    })
}

/// Backpropagation through relaxed or straight-through messages, with an
/// optional KL penalty toward the language model weighted by `kl_weight`.
pub fn relaxed_step(
    agents: &Agents,
    batch: &[GameInstance],
    mode: DecodeMode,
    kl_weight: f64,
    noise: NoiseKey,
    exec: Exec,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if !matches!(mode, DecodeMode::Relaxed | DecodeMode::StraightThrough) {
        return Err(Error::Config(format!(
            "{} messages are not differentiable",
            mode.name()
        )));
    }
    if !(kl_weight >= 0.0 && kl_weight.is_finite()) {
        return Err(Error::Config(format!("kl weight {kl_weight}")));
    }
    let lm = if kl_weight > 0.0 {
        Some(
            agents
                .lm
                .as_ref()
                .ok_or_else(|| Error::Config("KL penalty needs a language model".into()))?,
        )
    } else {
        None
    };
    let b = batch.len() as f64;
    let parts = par::map_slice(
        exec,
        batch,
        |i, inst| -> Result<(Grads, (f64, bool, usize), f64)> {
            let mut g = agents.game_graph();
            let rg = round_graph(&mut g, agents, inst, mode, &mut noise.rng(i as u64))?;
            let round = (
                g.item(rg.loss),
                rg.success(&g, inst),
                rg.rollout.message.len(),
            );
            let (objective, kl) = match lm {
                Some(lm) => {
                    let kl = kl_from_rollout(&mut g, lm, &rg.rollout)?;
                    let weighted = g.scale(kl, kl_weight)?;
                    (g.add(rg.loss, weighted)?, g.item(kl))
                }
                None => (rg.loss, 0.0),
            };
            let scaled = g.scale(objective, 1.0 / b)?;
            Ok((g.backward(scaled)?, round, kl))
        },
    )
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let rounds: Vec<_> = parts.iter().map(|p| p.1).collect();
    let kl = lm.map(|_| parts.iter().map(|p| p.2).sum::<f64>() / b);
    let signals = rounds.iter().map(|r| r.0).collect();
    let grads = reduce(parts.into_iter().map(|p| p.0), agents.store.len());
    Ok(StepOutput {
        grads,
        baseline_grads: None,
        sender_lr_scale: 1.0,
        metrics: summarize(&rounds, kl),
        signals,
    })
}

/// Central difference `(J(u + eps d) - J(u - eps d)) / (2 eps)`, an estimate
/// of `d . grad J(u)`. `objective` must be deterministic in the parameters
/// (fixed batch, replayed noise).
pub fn pseudograd_dot<F>(
    objective: F,
    store: &ParamStore,
    direction: &[f64],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    Ok(pseudograd_dot_with(|s| Ok((objective(s)?, ())), store, direction, eps)?.0)
}

/// [`pseudograd_dot`] for an objective that also reports side data; returns
/// the estimate with the side data at `u + eps d` and `u - eps d`.
pub fn pseudograd_dot_with<F, T>(
    objective: F,
    store: &ParamStore,
    direction: &[f64],
    eps: f64,
) -> Result<(f64, T, T)>
where
    F: Fn(&ParamStore) -> Result<(f64, T)>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("probe step {eps}")));
    }
    let u = store.flatten();
    if direction.len() != u.len() {
        return Err(Error::Shape {
            op: "pseudograd_dot",
            detail: format!(
                "direction of {} for {} parameters",
                direction.len(),
                u.len()
            ),
        });
    }
    let shifted = |sign: f64| -> Result<(f64, T)> {
        let mut s = store.clone();
        let v: Vec<f64> = u
            .iter()
            .zip(direction)
            .map(|(x, d)| x + sign * (eps * d))
            .collect();
        s.assign_flat(&v)?;
        let (j, side) = objective(&s)?;
        if !j.is_finite() {
            return Err(Error::NonFinite(format!("probe objective {j}")));
        }
        Ok((j, side))
    };
    let (plus, side_plus) = shifted(1.0)?;
    let (minus, side_minus) = shifted(-1.0)?;
    Ok(((plus - minus) / (2.0 * eps), side_plus, side_minus))
}

/// Settings for [`acute_angle_fraction`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub n_probes: usize,
    pub eps: f64,
    pub batch_size: usize,
    pub distractors: usize,
    /// `StraightThrough` probes the ST-GS direction against the discrete
    /// objective; `Relaxed` is the fully differentiable control.
    pub mode: DecodeMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub probe: usize,
    pub dot: f64,
    /// The two perturbed evaluations emitted structurally different messages,
    /// so the difference straddles a jump of the objective.
    pub crossed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// Probes whose estimator direction was exactly zero (every margin met);
    /// they carry no angle and are left out of `fraction`.
    pub degenerate: usize,
    pub fraction: f64,
    /// Fraction among nondegenerate probes that did not cross a jump.
    pub smooth_fraction: f64,
}

/// Mean hinge loss of `batch` under `mode` with replayed noise.
pub fn batch_objective(
    agents: &Agents,
    store: &ParamStore,
    batch: &[GameInstance],
    mode: DecodeMode,
    noise: NoiseKey,
    exec: Exec,
) -> Result<f64> {
    Ok(batch_objective_messages(agents, store, batch, mode, noise, exec)?.0)
}

/// [`batch_objective`] together with the emitted token sequences.
pub fn batch_objective_messages(
    agents: &Agents,
    store: &ParamStore,
    batch: &[GameInstance],
    mode: DecodeMode,
    noise: NoiseKey,
    exec: Exec,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let rounds = par::map_slice(exec, batch, |i, inst| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::inference(store);
        let rg = round_graph(&mut g, agents, inst, mode, &mut noise.rng(i as u64))?;
        Ok((g.item(rg.loss), rg.rollout.message.tokens))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let loss = rounds.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
    Ok((loss, rounds.into_iter().map(|r| r.1).collect()))
}

/// Whether two rollouts of the same batch differ in a way that makes the
/// objective jump. Relaxed rollouts only jump where their length changes.
fn structure_changed(mode: DecodeMode, a: &[Vec<usize>], b: &[Vec<usize>]) -> bool {
    match mode {
        DecodeMode::Relaxed => a.iter().zip(b).any(|(x, y)| x.len() != y.len()),
        _ => a != b,
    }
}

/// For each probe: draws a batch, takes the estimator's gradient on it,
/// scales it to a unit direction `d`, and measures `d . grad J` by central
/// differences with the same batch and Gumbel noise. Returns the fraction
/// of positive products among probes with a nonzero direction.
pub fn acute_angle_fraction(
    agents: &Agents,
    pool: &Pool,
    cfg: &ProbeConfig,
    streams: Streams,
    exec: Exec,
) -> Result<ProbeReport> {
    let mut rows = Vec::with_capacity(cfg.n_probes);
    let mut degenerate = 0;
    let mut zero_direction = Vec::new();
    for p in 0..cfg.n_probes {
        let batch = make_batch(
            pool,
            cfg.batch_size,
            cfg.distractors,
            &mut streams.stream(Purpose::Probe, p as u64, 0),
        )?;
        let noise = NoiseKey::new(streams, Purpose::ProbeNoise, p as u64);
        let step = relaxed_step(agents, &batch, cfg.mode, 0.0, noise, exec)?;
        let mut direction = step.grads.flatten(&agents.store);
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            degenerate += 1;
            zero_direction.push(p);
            rows.push(ProbeRow {
                probe: p,
                dot: 0.0,
                crossed: false,
            });
            continue;
        }
        direction.iter_mut().for_each(|x| *x /= norm);
        let (dot, plus, minus) = pseudograd_dot_with(
            |s| batch_objective_messages(agents, s, &batch, cfg.mode, noise, exec),
            &agents.store,
            &direction,
            cfg.eps,
        )?;
        rows.push(ProbeRow {
            probe: p,
            dot,
            crossed: structure_changed(cfg.mode, &plus, &minus),
        });
    }
    let acute = |rows: &[&ProbeRow]| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().filter(|r| r.dot > 0.0).count() as f64 / rows.len() as f64
        }
    };
    let valid: Vec<&ProbeRow> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| !zero_direction.contains(i))
        .map(|(_, r)| r)
        .collect();
    let smooth: Vec<&ProbeRow> = valid.iter().copied().filter(|r| !r.crossed).collect();
    Ok(ProbeReport {
        fraction: acute(&valid),
        smooth_fraction: acute(&smooth),
        rows,
        degenerate,
    })
}

#[cfg(test)]
mod tests;
