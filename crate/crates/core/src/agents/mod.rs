//! Sender, receiver and the reference language model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{glorot, AffineMap, EmbeddingTable, Graph, LstmCell, Mlp, ParamId, ParamStore};
use crate::sampling::{
    gumbel_argmax, relax_log_probs, GumbelNoise, StepSample, TemperatureNet, TemperatureSource,
};

/// `size` ordinary symbols `0..size`, then EOS at id `size`. START is not a
/// token id: it is a learned input vector that can never be emitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub max_len: usize,
}

impl Vocabulary {
    pub fn new(size: usize, max_len: usize) -> Self {
        Self { size, max_len }
    }

    pub fn eos(&self) -> usize {
        self.size
    }

    /// Number of outcomes of each step's softmax.
    pub fn outputs(&self) -> usize {
        self.size + 1
    }

    pub fn check(&self, token: usize) -> Result<()> {
        if token > self.size {
            return Err(Error::TokenOutOfRange {
                token,
                size: self.outputs(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Sample,
    Greedy,
    Relaxed,
    StraightThrough,
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Sample => "sample",
            DecodeMode::Greedy => "greedy",
            DecodeMode::Relaxed => "relaxed",
            DecodeMode::StraightThrough => "straight_through",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub tokens: Vec<usize>,
    pub steps: Vec<StepSample>,
    pub total_log_prob: f64,
}

impl Message {
    /// A message known only by its tokens.
    pub fn from_tokens(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            steps: Vec::new(),
            total_log_prob: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// What the receiver or language model consumes at one position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Symbol {
    Hard(usize),
    /// A probability vector on the tape: relaxed, or an exact one-hot with a
    /// straight-through backward pass.
    Soft(Var),
}

pub fn hard_symbols(tokens: &[usize]) -> Vec<Symbol> {
    tokens.iter().map(|&t| Symbol::Hard(t)).collect()
}

/// A message together with the graph nodes that produced it.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub message: Message,
    pub symbols: Vec<Symbol>,
    /// Per-step log-softmax vectors over all outcomes.
    pub step_log_probs: Vec<Var>,
    /// Per-step log-probability of the emitted token (scalars).
    pub token_log_probs: Vec<Var>,
}

impl Rollout {
    /// `sum_i log q(w_i | ...)` as a graph node.
    pub fn log_prob(&self, g: &mut Graph) -> Result<Var> {
        sum_scalars(g, &self.token_log_probs)
    }
}

pub(crate) fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return Ok(g.scalar(0.0));
    };
    let mut acc = first;
    for &t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `log p[token]` as a scalar node.
fn pick(g: &mut Graph, log_probs: Var, token: usize) -> Result<Var> {
    let s = g.slice(log_probs, token, 1)?;
    g.sum(s)
}

fn embed_symbol(g: &mut Graph, table: &EmbeddingTable, s: Symbol) -> Result<Var> {
    match s {
        Symbol::Hard(t) => table.hard(g, t),
        Symbol::Soft(v) => table.soft(g, v),
    }
}

fn symbol_log_prob(g: &mut Graph, log_probs: Var, s: Symbol, vocab: &Vocabulary) -> Result<Var> {
    match s {
        Symbol::Hard(t) => {
            vocab.check(t)?;
            pick(g, log_probs, t)
        }
        Symbol::Soft(v) => g.dot(v, log_probs),
    }
}

#[derive(Clone, Debug)]
pub struct Sender {
    pub vocab: Vocabulary,
    pub embed: EmbeddingTable,
    pub start: ParamId,
    pub cell: LstmCell,
    pub output: AffineMap,
    pub init_h: AffineMap,
    pub init_c: AffineMap,
    pub temperature: TemperatureSource,
    pub feature_dim: usize,
}

impl Sender {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: Vocabulary,
        feature_dim: usize,
        embed_dim: usize,
        hidden_dim: usize,
        temperature: TemperatureChoice,
        rng: &mut R,
    ) -> Self {
        let embed = EmbeddingTable::new(store, "sender.embed", vocab.outputs(), embed_dim, rng);
        let start = store.add("sender.start", glorot(rng, vec![embed_dim], embed_dim, 1));
        let cell = LstmCell::new(store, "sender.lstm", embed_dim, hidden_dim, rng);
        let output = AffineMap::new(store, "sender.output", hidden_dim, vocab.outputs(), rng);
        let init_h = AffineMap::new(store, "sender.init_h", feature_dim, hidden_dim, rng);
        let init_c = AffineMap::new(store, "sender.init_c", feature_dim, hidden_dim, rng);
        let temperature = match temperature {
            TemperatureChoice::Fixed(tau) => TemperatureSource::Fixed(tau),
            TemperatureChoice::Learned { tau0, hidden } => TemperatureSource::Learned(
                TemperatureNet::new(store, "sender.temperature", hidden_dim, hidden, tau0, rng),
            ),
        };
        Self {
            vocab,
            embed,
            start,
            cell,
            output,
            init_h,
            init_c,
            temperature,
            feature_dim,
        }
    }

    fn initial_state(&self, g: &mut Graph, features: Var) -> Result<(Var, Var)> {
        if g.shape(features) != [self.feature_dim] {
            return shape_err(
                "sender_generate",
                format!(
                    "features {:?}, expected [{}]",
                    g.shape(features),
                    self.feature_dim
                ),
            );
        }
        let h = self.init_h.forward(g, features)?;
        let c = self.init_c.forward(g, features)?;
        Ok((h, c))
    }

    /// Generates one message for `features`. The sender never sees the
    /// other candidates.
    pub fn generate<R: Rng>(
        &self,
        g: &mut Graph,
        features: Var,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<Rollout> {
        let (mut h, mut c) = self.initial_state(g, features)?;
        let mut input = g.param(self.start);
        let eos = self.vocab.eos();
        let mut out = Rollout {
            message: Message::from_tokens(Vec::new()),
            symbols: Vec::new(),
            step_log_probs: Vec::new(),
            token_log_probs: Vec::new(),
        };
        for _ in 0..self.vocab.max_len {
            (h, c) = self.cell.step(g, input, h, c)?;
            let logits = self.output.forward(g, h)?;
            let lp = g.log_softmax_rows(logits)?;
            let (step, symbol, token_lp) = match mode {
                DecodeMode::Greedy => {
                    let token = argmax(g.values(lp));
                    let step = StepSample {
                        token,
                        relaxed: None,
                        log_prob: g.values(lp)[token],
                        noise: None,
                    };
                    (step, Symbol::Hard(token), pick(g, lp, token)?)
                }
                DecodeMode::Sample => {
                    let noise = GumbelNoise::draw(rng, self.vocab.outputs());
                    let token = gumbel_argmax(g.values(lp), &noise);
                    let step = StepSample {
                        token,
                        relaxed: None,
                        log_prob: g.values(lp)[token],
                        noise: Some(noise),
                    };
                    (step, Symbol::Hard(token), pick(g, lp, token)?)
                }
                DecodeMode::Relaxed | DecodeMode::StraightThrough => {
                    let noise = GumbelNoise::draw(rng, self.vocab.outputs());
                    let inv = self.temperature.inverse(g, h)?;
                    let relaxed = relax_log_probs(g, lp, inv, &noise)?;
                    let emitted = if mode == DecodeMode::StraightThrough {
                        g.straight_through(relaxed)?
                    } else {
                        relaxed
                    };
                    let token = argmax(g.values(relaxed));
                    let step = StepSample {
                        token,
                        relaxed: Some(g.values(relaxed).to_vec()),
                        log_prob: g.values(lp)[token],
                        noise: Some(noise),
                    };
                    let token_lp = if mode == DecodeMode::StraightThrough {
                        g.dot(emitted, lp)?
                    } else {
                        pick(g, lp, token)?
                    };
                    (step, Symbol::Soft(emitted), token_lp)
                }
            };
            let token = step.token;
            out.message.total_log_prob += step.log_prob;
            out.message.tokens.push(token);
            out.message.steps.push(step);
            out.symbols.push(symbol);
            out.step_log_probs.push(lp);
            out.token_log_probs.push(token_lp);
            if token == eos {
                break;
            }
            input = embed_symbol(g, &self.embed, symbol)?;
        }
        Ok(out)
    }

    /// Teacher-forced log-softmax vectors for a given token sequence.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        features: Var,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        let (mut h, mut c) = self.initial_state(g, features)?;
        let mut input = g.param(self.start);
        let mut steps = Vec::with_capacity(tokens.len());
        for &t in tokens {
            self.vocab.check(t)?;
            (h, c) = self.cell.step(g, input, h, c)?;
            let logits = self.output.forward(g, h)?;
            steps.push(g.log_softmax_rows(logits)?);
            input = self.embed.hard(g, t)?;
        }
        Ok(steps)
    }

    /// `log q(tokens | features)` by teacher forcing.
    pub fn sequence_log_prob(&self, g: &mut Graph, features: Var, tokens: &[usize]) -> Result<Var> {
        let steps = self.teacher_forced(g, features, tokens)?;
        let terms = steps
            .iter()
            .zip(tokens)
            .map(|(&lp, &t)| pick(g, lp, t))
            .collect::<Result<Vec<_>>>()?;
        sum_scalars(g, &terms)
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.with_prefix("sender.").collect()
    }
}

/// How the sender's relaxation temperature is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TemperatureChoice {
    Fixed(f64),
    Learned { tau0: f64, hidden: Option<usize> },
}

#[derive(Clone, Debug)]
pub struct Receiver {
    pub vocab: Vocabulary,
    pub embed: EmbeddingTable,
    pub cell: LstmCell,
    pub output: AffineMap,
}

impl Receiver {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: Vocabulary,
        feature_dim: usize,
        embed_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let embed = EmbeddingTable::new(store, "receiver.embed", vocab.outputs(), embed_dim, rng);
        let cell = LstmCell::new(store, "receiver.lstm", embed_dim, hidden_dim, rng);
        let output = AffineMap::new(store, "receiver.output", hidden_dim, feature_dim, rng);
        Self {
            vocab,
            embed,
            cell,
            output,
        }
    }

    /// Reads every symbol, EOS included, from zero state and returns the
    /// affine image of the last hidden state.
    pub fn read(&self, g: &mut Graph, symbols: &[Symbol]) -> Result<Var> {
        if symbols.is_empty() {
            return Err(Error::EmptyMessage);
        }
        let hd = self.cell.hidden_size;
        let mut h = g.constant(Tensor::zeros(vec![hd]));
        let mut c = g.constant(Tensor::zeros(vec![hd]));
        for &s in symbols {
            let x = embed_symbol(g, &self.embed, s)?;
            (h, c) = self.cell.step(g, x, h, c)?;
        }
        self.output.forward(g, h)
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.with_prefix("receiver.").collect()
    }
}

/// Scores `f(v) . g` for each candidate row.
pub fn score_images(g: &mut Graph, interpretation: Var, candidates: Var) -> Result<Var> {
    let (cs, is) = (
        g.shape(candidates).to_vec(),
        g.shape(interpretation).to_vec(),
    );
    if cs.len() != 2 || is != [cs[1]] {
        return shape_err(
            "score_images",
            format!("candidates {cs:?} against interpretation {is:?}"),
        );
    }
    g.matmul(candidates, interpretation)
}

/// Token-sequence language model over the protocol vocabulary.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub vocab: Vocabulary,
    pub embed: EmbeddingTable,
    pub start: ParamId,
    pub cell: LstmCell,
    pub output: AffineMap,
}

impl LanguageModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: Vocabulary,
        embed_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let embed = EmbeddingTable::new(store, "lm.embed", vocab.outputs(), embed_dim, rng);
        let start = store.add("lm.start", glorot(rng, vec![embed_dim], embed_dim, 1));
        let cell = LstmCell::new(store, "lm.lstm", embed_dim, hidden_dim, rng);
        let output = AffineMap::new(store, "lm.output", hidden_dim, vocab.outputs(), rng);
        Self {
            vocab,
            embed,
            start,
            cell,
            output,
        }
    }

    /// Teacher-forced per-step log-softmax vectors and per-symbol
    /// log-probabilities.
    pub fn score(&self, g: &mut Graph, symbols: &[Symbol]) -> Result<(Vec<Var>, Vec<Var>)> {
        let hd = self.cell.hidden_size;
        let mut h = g.constant(Tensor::zeros(vec![hd]));
        let mut c = g.constant(Tensor::zeros(vec![hd]));
        let mut input = g.param(self.start);
        let mut steps = Vec::with_capacity(symbols.len());
        let mut terms = Vec::with_capacity(symbols.len());
        for &s in symbols {
            (h, c) = self.cell.step(g, input, h, c)?;
            let logits = self.output.forward(g, h)?;
            let lp = g.log_softmax_rows(logits)?;
            terms.push(symbol_log_prob(g, lp, s, &self.vocab)?);
            steps.push(lp);
            input = embed_symbol(g, &self.embed, s)?;
        }
        Ok((steps, terms))
    }

    /// `sum_i log p(w_i | w_<i)` including the EOS term.
    pub fn log_prob(&self, g: &mut Graph, symbols: &[Symbol]) -> Result<Var> {
        let (_, terms) = self.score(g, symbols)?;
        sum_scalars(g, &terms)
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.with_prefix("lm.").collect()
    }
}

/// `log p(tokens)` under the language model.
pub fn lm_log_prob(store: &ParamStore, lm: &LanguageModel, tokens: &[usize]) -> Result<f64> {
    let mut g = Graph::inference(store);
    let lp = lm.log_prob(&mut g, &hard_symbols(tokens))?;
    Ok(g.item(lp))
}

/// Architecture of every trainable component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub temperature: TemperatureChoice,
    /// Hidden widths of the input-dependent baseline, when enabled.
    pub baseline: Option<Vec<usize>>,
    pub language_model: bool,
}

/// All agents with their parameters in one named store.
#[derive(Clone, Debug)]
pub struct Agents {
    pub arch: Architecture,
    pub store: ParamStore,
    pub sender: Sender,
    pub receiver: Receiver,
    pub lm: Option<LanguageModel>,
    pub baseline: Option<Mlp>,
}

impl Agents {
    /// Builds and initializes every component; construction order fixes
    /// parameter ids and rng consumption.
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let sender = Sender::new(
            &mut store,
            arch.vocab,
            arch.feature_dim,
            arch.embed_dim,
            arch.hidden_dim,
            arch.temperature,
            rng,
        );
        let receiver = Receiver::new(
            &mut store,
            arch.vocab,
            arch.feature_dim,
            arch.embed_dim,
            arch.hidden_dim,
            rng,
        );
        let lm = arch.language_model.then(|| {
            LanguageModel::new(&mut store, arch.vocab, arch.embed_dim, arch.hidden_dim, rng)
        });
        let baseline = arch.baseline.as_ref().map(|hidden| {
            let mut sizes = vec![arch.feature_dim];
            sizes.extend(hidden);
            sizes.push(1);
            Mlp::new(&mut store, "baseline", &sizes, rng)
        });
        Self {
            arch,
            store,
            sender,
            receiver,
            lm,
            baseline,
        }
    }

    /// Parameters trained by the game objective.
    pub fn game_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.sender.param_ids(&self.store);
        ids.extend(self.receiver.param_ids(&self.store));
        ids
    }

    /// Parameters that never receive game gradients.
    pub fn non_game_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| {
                let n = self.store.name(*id);
                n.starts_with("lm.") || n.starts_with("baseline.")
            })
            .collect()
    }

    /// A trainable graph where only sender and receiver parameters receive
    /// gradients.
    pub fn game_graph(&self) -> Graph<'_> {
        Graph::new(&self.store).freeze(self.non_game_param_ids())
    }
}
