//! Protocol evaluation: success rates, encoder perplexity, omission
//! scores, prefix purity and paraphrase counts.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::agents::{hard_symbols, Agents, DecodeMode};
use crate::autograd::math::softmax;
use crate::autograd::Tensor;
use crate::data::{Pool, World};
use crate::error::{Error, Result};
use crate::game::{play_round, receiver_scores, GameInstance};
use crate::nn::Graph;
use crate::par::{self, Exec};
use crate::rng::NoiseKey;

/// Fraction of `rounds` the receiver wins (strict argmax, ties lose).
pub fn eval_success(
    agents: &Agents,
    rounds: &[GameInstance],
    mode: DecodeMode,
    noise: NoiseKey,
    exec: Exec,
) -> Result<f64> {
    if rounds.is_empty() {
        return Ok(0.0);
    }
    let wins = par::map_slice(exec, rounds, |i, inst| -> Result<bool> {
        Ok(play_round(agents, inst, mode, &mut noise.rng(i as u64))?.success)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(wins.iter().filter(|w| **w).count() as f64 / rounds.len() as f64)
}

/// A generated message with its per-token log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageSample {
    pub concept: usize,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// One message per feature vector in `images`, using `mode`.
pub fn generate_messages(
    agents: &Agents,
    images: &[(usize, &[f64])],
    mode: DecodeMode,
    noise: NoiseKey,
    exec: Exec,
) -> Result<Vec<MessageSample>> {
    par::map_slice(
        exec,
        images,
        |i, (concept, features)| -> Result<MessageSample> {
            let mut g = Graph::inference(&agents.store);
            let f = g.constant(Tensor::vector(features.to_vec()));
            let r = agents
                .sender
                .generate(&mut g, f, mode, &mut noise.rng(i as u64))?;
            Ok(MessageSample {
                concept: *concept,
                tokens: r.message.tokens,
                log_prob: r.message.total_log_prob,
            })
        },
    )
    .into_iter()
    .collect()
}

/// Per-token perplexity from sampled messages: `exp(-sum log q / tokens)`.
pub fn perplexity_of(samples: &[MessageSample]) -> f64 {
    let tokens: usize = samples.iter().map(|s| s.tokens.len()).sum();
    if tokens == 0 {
        return 1.0;
    }
    let nll: f64 = -samples.iter().map(|s| s.log_prob).sum::<f64>();
    (nll / tokens as f64).exp().max(1.0)
}

/// Per-token perplexity of the sender's own samples over `n_messages`
/// images drawn uniformly from `pool`.
pub fn encoder_perplexity<R: Rng>(
    agents: &Agents,
    pool: &Pool,
    n_messages: usize,
    pick: &mut R,
    noise: NoiseKey,
    exec: Exec,
) -> Result<f64> {
    if n_messages == 0 {
        return Err(Error::Config(
            "encoder perplexity needs at least one message".into(),
        ));
    }
    let images: Vec<(usize, &[f64])> = (0..n_messages)
        .map(|_| {
            let img = &pool.images[pick.random_range(0..pool.len())];
            (img.concept, img.features.as_slice())
        })
        .collect();
    let samples = generate_messages(agents, &images, DecodeMode::Sample, noise, exec)?;
    Ok(perplexity_of(&samples))
}

fn target_probability(agents: &Agents, tokens: &[usize], instance: &GameInstance) -> Result<f64> {
    let mut g = Graph::inference(&agents.store);
    let s = receiver_scores(&mut g, agents, &hard_symbols(tokens), instance)?;
    Ok(softmax(g.values(s))[instance.target_index])
}

/// Largest drop in the target's probability caused by deleting one
/// non-EOS token. Deleting the only token leaves a lone EOS.
pub fn omission_score(agents: &Agents, tokens: &[usize], instance: &GameInstance) -> Result<f64> {
    let eos = agents.receiver.vocab.eos();
    let positions: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != eos).collect();
    if positions.is_empty() {
        return Err(Error::EmptyMessage);
    }
    let full = target_probability(agents, tokens, instance)?;
    let mut best = f64::NEG_INFINITY;
    for i in positions {
        let mut reduced = tokens.to_vec();
        reduced.remove(i);
        if reduced.is_empty() {
            reduced.push(eos);
        }
        best = best.max(full - target_probability(agents, &reduced, instance)?);
    }
    Ok(best)
}

/// Weighted mean over prefix groups of the modal value frequency of
/// attribute `attribute`.
pub fn prefix_purity(
    messages: &[(Vec<usize>, Vec<usize>)],
    prefix_len: usize,
    attribute: usize,
) -> Result<f64> {
    if prefix_len == 0 {
        return Err(Error::Config("prefix length must be at least 1".into()));
    }
    if messages.is_empty() {
        return Err(Error::Config(
            "prefix purity of an empty message set".into(),
        ));
    }
    let mut groups: BTreeMap<&[usize], BTreeMap<usize, usize>> = BTreeMap::new();
    for (tokens, attrs) in messages {
        let value = *attrs
            .get(attribute)
            .ok_or_else(|| Error::Config(format!("attribute {attribute} out of range")))?;
        let prefix = &tokens[..prefix_len.min(tokens.len())];
        *groups.entry(prefix).or_default().entry(value).or_default() += 1;
    }
    let modal: usize = groups
        .values()
        .map(|g| g.values().copied().max().unwrap_or(0))
        .sum();
    Ok(modal as f64 / messages.len() as f64)
}

/// The attribute with the highest purity at `prefix_len`, and that purity.
pub fn best_aligned_purity(
    messages: &[(Vec<usize>, Vec<usize>)],
    prefix_len: usize,
    n_attributes: usize,
) -> Result<(usize, f64)> {
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..n_attributes {
        let p = prefix_purity(messages, prefix_len, a)?;
        if p > best.1 {
            best = (a, p);
        }
    }
    Ok(best)
}

/// Mean number of distinct sampled messages per concept, drawing
/// `samples_per_concept` messages from the pool images of each concept.
pub fn paraphrase_stats(
    agents: &Agents,
    pool: &Pool,
    samples_per_concept: usize,
    noise: NoiseKey,
    exec: Exec,
) -> Result<f64> {
    if samples_per_concept < 2 {
        return Err(Error::Config(
            "paraphrase statistics need at least two samples per concept".into(),
        ));
    }
    let concepts = pool.concepts();
    let mut images: Vec<(usize, &[f64])> = Vec::with_capacity(concepts.len() * samples_per_concept);
    for &c in &concepts {
        let idx = pool.of_concept(c);
        for j in 0..samples_per_concept {
            let img = &pool.images[idx[j % idx.len()]];
            images.push((c, img.features.as_slice()));
        }
    }
    let samples = generate_messages(agents, &images, DecodeMode::Sample, noise, exec)?;
    let distinct: usize = samples
        .chunks(samples_per_concept)
        .map(|chunk| {
            chunk
                .iter()
                .map(|s| &s.tokens)
                .collect::<HashSet<_>>()
                .len()
        })
        .sum();
    Ok(distinct as f64 / concepts.len() as f64)
}

/// Summary statistics of a protocol on held-out data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub success_greedy: f64,
    pub success_sample: f64,
    pub success_relaxed: Option<f64>,
    pub encoder_perplexity: f64,
    pub mean_length: f64,
    pub length_p50: f64,
    pub length_p90: f64,
    pub unique_messages: usize,
    pub mean_omission: f64,
    pub paraphrases_per_concept: f64,
    /// (prefix length, attribute, purity)
    pub purity: Vec<(usize, usize, f64)>,
    pub lm_perplexity: Option<f64>,
}

impl EvalReport {
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("success_greedy".to_string(), self.success_greedy),
            ("success_sample".to_string(), self.success_sample),
        ];
        if let Some(r) = self.success_relaxed {
            out.push(("success_relaxed".into(), r));
        }
        out.extend([
            ("encoder_perplexity".to_string(), self.encoder_perplexity),
            ("mean_length".to_string(), self.mean_length),
            ("length_p50".to_string(), self.length_p50),
            ("length_p90".to_string(), self.length_p90),
            ("unique_messages".to_string(), self.unique_messages as f64),
            ("mean_omission".to_string(), self.mean_omission),
            (
                "paraphrases_per_concept".to_string(),
                self.paraphrases_per_concept,
            ),
        ]);
        for &(len, attr, p) in &self.purity {
            out.push((format!("purity_prefix{len}_attr{attr}"), p));
        }
        if let Some(p) = self.lm_perplexity {
            out.push(("lm_perplexity".into(), p));
        }
        out
    }

    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// `metric,value` CSV, one row per metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Checks the documented ranges of every field.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("success_greedy", self.success_greedy)?;
        unit("success_sample", self.success_sample)?;
        if let Some(r) = self.success_relaxed {
            unit("success_relaxed", r)?;
        }
        for &(_, _, p) in &self.purity {
            unit("purity", p)?;
        }
        if self.encoder_perplexity < 1.0 {
            return Err(Error::Config(format!(
                "encoder perplexity {} below 1",
                self.encoder_perplexity
            )));
        }
        Ok(())
    }
}

fn percentile(sorted: &[usize], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1] as f64
}

/// Length and uniqueness statistics of a message set.
pub fn length_stats(messages: &[Vec<usize>]) -> (f64, f64, f64, usize) {
    let mut lens: Vec<usize> = messages.iter().map(Vec::len).collect();
    lens.sort_unstable();
    let mean = if lens.is_empty() {
        0.0
    } else {
        lens.iter().sum::<usize>() as f64 / lens.len() as f64
    };
    let unique = messages.iter().collect::<HashSet<_>>().len();
    (mean, percentile(&lens, 0.5), percentile(&lens, 0.9), unique)
}

/// Greedy messages paired with the attribute vectors of their concepts.
pub fn labelled_messages(
    world: &World,
    samples: &[MessageSample],
) -> Vec<(Vec<usize>, Vec<usize>)> {
    samples
        .iter()
        .map(|s| (s.tokens.clone(), world.concept(s.concept).attributes))
        .collect()
}

/// Message log lines `<concept>,<t1 t2 ...>`.
pub fn write_message_log(path: &Path, samples: &[MessageSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let toks: Vec<String> = s.tokens.iter().map(usize::to_string).collect();
        writeln!(out, "{},{}", s.concept, toks.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_message_log(path: &Path) -> Result<Vec<(usize, Vec<usize>)>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let (c, rest) = line
            .split_once(',')
            .ok_or_else(|| bad("missing comma".into()))?;
        let concept = c.trim().parse().map_err(|e| bad(format!("concept: {e}")))?;
        let tokens = rest
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("token `{t}`: {e}"))))
            .collect::<Result<Vec<usize>>>()?;
        out.push((concept, tokens));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
