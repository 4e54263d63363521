//! The referential game: batches, the hinge objective and success
//! accounting.

use rand::seq::index::sample;
use rand::Rng;

use crate::agents::{score_images, Agents, DecodeMode, Message, Rollout, Symbol};
use crate::autograd::math::softmax;
use crate::autograd::{Tensor, Var};
use crate::data::Pool;
use crate::error::{Error, Result};
use crate::nn::Graph;

/// One target among `K` distractors, in shuffled candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct GameInstance {
    pub candidates: Vec<Vec<f64>>,
    pub concepts: Vec<usize>,
    pub target_index: usize,
}

impl GameInstance {
    pub fn target(&self) -> &[f64] {
        &self.candidates[self.target_index]
    }

    pub fn target_concept(&self) -> usize {
        self.concepts[self.target_index]
    }

    pub fn distractors(&self) -> impl Iterator<Item = &[f64]> {
        self.candidates
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.target_index)
            .map(|(_, c)| c.as_slice())
    }

    pub fn n_distractors(&self) -> usize {
        self.candidates.len() - 1
    }

    pub fn candidate_matrix(&self) -> Tensor {
        let d = self.candidates[0].len();
        Tensor::matrix(self.candidates.len(), d, self.candidates.concat())
            .expect("nonempty candidates")
    }
}

/// Samples `batch_size` games. Distractors come from `k` distinct concepts,
/// all different from the target's; the target's position is uniform.
pub fn make_batch<R: Rng>(
    pool: &Pool,
    batch_size: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<GameInstance>> {
    let concepts = pool.concepts();
    if k == 0 || concepts.len() <= k {
        return Err(Error::Config(format!(
            "{} distractors need more than {k} concepts, pool has {}",
            k,
            concepts.len()
        )));
    }
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let target = rng.random_range(0..pool.len());
        let tc = pool.images[target].concept;
        let tpos = concepts.binary_search(&tc).expect("pool concept");
        let mut picks: Vec<usize> = sample(rng, concepts.len() - 1, k)
            .into_iter()
            .map(|i| concepts[if i >= tpos { i + 1 } else { i }])
            .map(|c| {
                let members = pool.of_concept(c);
                members[rng.random_range(0..members.len())]
            })
            .collect();
        let target_index = rng.random_range(0..=k);
        picks.insert(target_index, target);
        batch.push(GameInstance {
            candidates: picks
                .iter()
                .map(|&i| pool.images[i].features.clone())
                .collect(),
            concepts: picks.iter().map(|&i| pool.images[i].concept).collect(),
            target_index,
        });
    }
    Ok(batch)
}

/// `sum_k max(0, 1 - s_t + s_k)` over distractor scores.
pub fn hinge_loss(g: &mut Graph, scores: Var, target_index: usize) -> Result<Var> {
    let n = g.value(scores).len();
    if n < 2 || target_index >= n {
        return Err(Error::Shape {
            op: "hinge_loss",
            detail: format!("target {target_index} among {n} scores"),
        });
    }
    let st = g.slice(scores, target_index, 1)?;
    let mut parts = Vec::with_capacity(2);
    if target_index > 0 {
        parts.push(g.slice(scores, 0, target_index)?);
    }
    if target_index + 1 < n {
        parts.push(g.slice(scores, target_index + 1, n - target_index - 1)?);
    }
    let others = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts)?
    };
    let margins = g.sub_scalar(others, st)?;
    let shifted = g.add_const(margins, 1.0)?;
    let clipped = g.relu_hinge(shifted)?;
    g.sum(clipped)
}

/// Plain-number hinge loss with the same summation order as
/// [`hinge_loss`].
pub fn hinge_value(scores: &[f64], target_index: usize) -> f64 {
    let st = scores[target_index];
    scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_index)
        .map(|(_, s)| {
            let m = (s - st) + 1.0;
            if m > 0.0 || m.is_nan() {
                m
            } else {
                0.0
            }
        })
        .sum()
}

/// True when the target strictly outscores every other candidate.
pub fn strict_success(scores: &[f64], target_index: usize) -> bool {
    let st = scores[target_index];
    scores
        .iter()
        .enumerate()
        .all(|(i, &s)| i == target_index || st > s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub loss: f64,
    pub success: bool,
    pub message: Message,
    pub image_probabilities: Vec<f64>,
}

/// Graph nodes of one played round.
#[derive(Clone, Debug)]
pub struct RoundGraph {
    pub rollout: Rollout,
    pub scores: Var,
    pub loss: Var,
}

impl RoundGraph {
    pub fn success(&self, g: &Graph, instance: &GameInstance) -> bool {
        strict_success(g.values(self.scores), instance.target_index)
    }
}

/// Receiver scores of every candidate for a symbol sequence.
pub fn receiver_scores(
    g: &mut Graph,
    agents: &Agents,
    symbols: &[Symbol],
    instance: &GameInstance,
) -> Result<Var> {
    let interp = agents.receiver.read(g, symbols)?;
    let cands = g.constant(instance.candidate_matrix());
    score_images(g, interp, cands)
}

/// Sender, receiver and hinge loss on one graph.
pub fn round_graph<R: Rng>(
    g: &mut Graph,
    agents: &Agents,
    instance: &GameInstance,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<RoundGraph> {
    let f = g.constant(Tensor::vector(instance.target().to_vec()));
    let rollout = agents.sender.generate(g, f, mode, rng)?;
    let scores = receiver_scores(g, agents, &rollout.symbols, instance)?;
    let loss = hinge_loss(g, scores, instance.target_index)?;
    Ok(RoundGraph {
        rollout,
        scores,
        loss,
    })
}

/// One round without gradients.
pub fn play_round<R: Rng>(
    agents: &Agents,
    instance: &GameInstance,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<RoundOutcome> {
    let mut g = Graph::inference(&agents.store);
    let rg = round_graph(&mut g, agents, instance, mode, rng)?;
    let scores = g.values(rg.scores);
    Ok(RoundOutcome {
        loss: g.item(rg.loss),
        success: strict_success(scores, instance.target_index),
        image_probabilities: softmax(scores),
        message: rg.rollout.message,
    })
}
