use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agents::{Architecture, Symbol, TemperatureChoice, Vocabulary};
use crate::data::WorldSpec;
use crate::game::make_batch;
use crate::nn::ParamStore;
use crate::rng::{Purpose, Streams};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn agents(size: usize, max_len: usize, dim: usize, seed: u64) -> Agents {
    Agents::new(
        Architecture {
            vocab: Vocabulary::new(size, max_len),
            feature_dim: dim,
            embed_dim: 4,
            hidden_dim: 6,
            temperature: TemperatureChoice::Fixed(1.2),
            baseline: None,
            language_model: false,
        },
        &mut rng(seed),
    )
}

fn world() -> World {
    World::build(WorldSpec {
        n_attributes: 2,
        values_per_attribute: 3,
        feature_dim: 8,
        noise: 0.1,
        seed: 1,
    })
    .unwrap()
}

fn pool(w: &World) -> Pool {
    Pool::generate(w, 4, &mut rng(2)).unwrap()
}

fn zero(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.with_prefix(prefix).collect();
    for id in ids {
        store.get_mut(id).values_mut().fill(0.0);
    }
}

fn key(major: u64) -> NoiseKey {
    NoiseKey::new(Streams::new(5), Purpose::Test, major)
}

#[test]
fn hand_wired_receiver_always_wins() {
    let w = world();
    let p = pool(&w);
    let mut a = agents(6, 3, 8, 1);
    zero(&mut a.store, "receiver.output");
    let rounds: Vec<GameInstance> = make_batch(&p, 200, 4, &mut rng(3))
        .unwrap()
        .into_iter()
        .filter(|r| r.target_concept() == 0)
        .collect();
    let target = rounds[0].target().to_vec();
    let rounds: Vec<GameInstance> = rounds
        .into_iter()
        .filter(|r| r.target() == target.as_slice())
        .collect();
    assert!(!rounds.is_empty());
    let bias = a.store.id("receiver.output.bias").unwrap();
    a.store.get_mut(bias).values_mut().copy_from_slice(&target);
    for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
        assert_eq!(
            eval_success(&a, &rounds, mode, key(0), Exec::Parallel).unwrap(),
            1.0
        );
    }
}

#[test]
fn success_is_deterministic_per_stream() {
    let w = world();
    let p = pool(&w);
    let a = agents(6, 3, 8, 2);
    let rounds = make_batch(&p, 300, 3, &mut rng(4)).unwrap();
    let s1 = eval_success(&a, &rounds, DecodeMode::Sample, key(1), Exec::Parallel).unwrap();
    let s2 = eval_success(&a, &rounds, DecodeMode::Sample, key(1), Exec::Sequential).unwrap();
    assert_eq!(s1, s2);
    let g1 = eval_success(&a, &rounds, DecodeMode::Greedy, key(1), Exec::Parallel).unwrap();
    let g2 = eval_success(&a, &rounds, DecodeMode::Greedy, key(9), Exec::Parallel).unwrap();
    assert_eq!(g1, g2);
    assert!((0.0..=1.0).contains(&s1));
}

#[test]
fn perplexity_of_forced_and_uniform_senders() {
    let w = world();
    let p = pool(&w);
    let mut a = agents(9, 4, 8, 3);
    zero(&mut a.store, "sender.output");
    let uniform = encoder_perplexity(&a, &p, 200, &mut rng(1), key(2), Exec::Parallel).unwrap();
    assert!((uniform - 10.0).abs() < 0.1, "{uniform}");
    let bias = a.store.id("sender.output.bias").unwrap();
    a.store.get_mut(bias).values_mut()[2] = 40.0;
    let forced = encoder_perplexity(&a, &p, 200, &mut rng(1), key(2), Exec::Parallel).unwrap();
    assert!((1.0..=1.0 + 1e-6).contains(&forced), "{forced}");
    assert!(encoder_perplexity(&a, &p, 0, &mut rng(1), key(2), Exec::Parallel).is_err());
}

#[test]
fn perplexity_approaches_enumerated_value() {
    let w = world();
    let p = pool(&w);
    let a = agents(2, 2, 8, 4);
    let img = &p.images[0];
    // Expected per-token perplexity exp(E[-log q] / E[len]) from the
    // enumerated message distribution of one image.
    let mut ent = 0.0;
    let mut len = 0.0;
    for m in [
        vec![2],
        vec![0, 0],
        vec![0, 1],
        vec![0, 2],
        vec![1, 0],
        vec![1, 1],
        vec![1, 2],
    ] {
        let mut g = Graph::inference(&a.store);
        let f = g.constant(Tensor::vector(img.features.clone()));
        let lq = a.sender.sequence_log_prob(&mut g, f, &m).unwrap();
        let q = g.item(lq).exp();
        ent -= q * g.item(lq);
        len += q * m.len() as f64;
    }
    let exact = (ent / len).exp();
    let single = Pool::new(vec![img.clone()]).unwrap();
    let est = encoder_perplexity(&a, &single, 40_000, &mut rng(1), key(3), Exec::Parallel).unwrap();
    assert!((est - exact).abs() / exact < 0.01, "{est} vs {exact}");
}

/// Receiver read through soft one-hot symbols, messages rebuilt by
/// filtering, and probabilities by an explicit exp-normalize loop.
fn brute_force_omission(a: &Agents, tokens: &[usize], inst: &GameInstance) -> f64 {
    let eos = a.receiver.vocab.eos();
    let prob = |msg: &[usize]| -> f64 {
        let mut g = Graph::inference(&a.store);
        let syms: Vec<Symbol> = msg
            .iter()
            .map(|&t| Symbol::Soft(g.constant(Tensor::one_hot(a.receiver.vocab.outputs(), t))))
            .collect();
        let s = receiver_scores(&mut g, a, &syms, inst).unwrap();
        softmax(g.values(s))[inst.target_index]
    };
    let base = prob(tokens);
    let mut scores = Vec::new();
    for skip in 0..tokens.len() {
        if tokens[skip] == eos {
            continue;
        }
        let kept: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter_map(|(j, &t)| (j != skip).then_some(t))
            .collect();
        let kept = if kept.is_empty() { vec![eos] } else { kept };
        scores.push(base - prob(&kept));
    }
    scores.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn omission_matches_brute_force() {
    let w = world();
    let p = pool(&w);
    let a = agents(5, 4, 8, 6);
    let mut r = rng(7);
    let rounds = make_batch(&p, 1000, 3, &mut r).unwrap();
    let eos = a.receiver.vocab.eos();
    for inst in &rounds {
        let n = r.random_range(1..=4usize);
        let mut tokens: Vec<usize> = (0..n).map(|_| r.random_range(0..5)).collect();
        if n < 4 && r.random_bool(0.7) {
            tokens.push(eos);
        }
        let main = omission_score(&a, &tokens, inst).unwrap();
        assert_eq!(main, brute_force_omission(&a, &tokens, inst), "{tokens:?}");
    }
}

#[test]
fn omission_examples() {
    let w = world();
    let p = pool(&w);
    let mut a = agents(5, 4, 8, 8);
    let inst = &make_batch(&p, 1, 3, &mut rng(1)).unwrap()[0];
    let eos = a.receiver.vocab.eos();
    let single = omission_score(&a, &[3, eos], inst).unwrap();
    let expected = {
        let pr = |m: &[usize]| {
            let mut g = Graph::inference(&a.store);
            let s = receiver_scores(&mut g, &a, &hard_symbols(m), inst).unwrap();
            softmax(g.values(s))[inst.target_index]
        };
        pr(&[3, eos]) - pr(&[eos])
    };
    assert_eq!(single, expected);
    assert!(omission_score(&a, &[eos], inst).is_err());
    let w_id = a.store.id("receiver.output.weight").unwrap();
    a.store.get_mut(w_id).values_mut().fill(0.0);
    assert_eq!(omission_score(&a, &[1, 2, 0, eos], inst).unwrap(), 0.0);
}

#[test]
fn purity_examples() {
    let perfect: Vec<(Vec<usize>, Vec<usize>)> = (0..60)
        .map(|i| (vec![i % 3, 7, i % 5], vec![i % 3, i % 4]))
        .collect();
    assert_eq!(prefix_purity(&perfect, 1, 0).unwrap(), 1.0);
    assert_eq!(best_aligned_purity(&perfect, 1, 2).unwrap(), (0, 1.0));

    let mut r = rng(9);
    let random: Vec<(Vec<usize>, Vec<usize>)> = (0..100_000)
        .map(|_| {
            let m = (0..3).map(|_| r.random_range(0..20)).collect();
            (m, vec![r.random_range(0..4usize)])
        })
        .collect();
    let null = prefix_purity(&random, 1, 0).unwrap();
    assert!((null - 0.25).abs() < 0.05, "{null}");
    let mut last = 0.0;
    for len in 1..=3 {
        let p = prefix_purity(&random, len, 0).unwrap();
        assert!(p >= last && (0.0..=1.0).contains(&p));
        last = p;
    }
    assert!(prefix_purity(&random, 0, 0).is_err());
    assert!(prefix_purity(&[], 1, 0).is_err());
    assert!(prefix_purity(&random[..3], 1, 5).is_err());
}

#[test]
fn paraphrase_examples() {
    let w = world();
    let p = pool(&w);
    let mut a = agents(50, 4, 8, 10);
    assert!(paraphrase_stats(&a, &p, 1, key(0), Exec::Parallel).is_err());
    let spc = 12;
    let noisy = paraphrase_stats(&a, &p, spc, key(4), Exec::Parallel).unwrap();
    // Set oracle on the same draws.
    let mut images = Vec::new();
    for c in p.concepts() {
        let idx = p.of_concept(c);
        for j in 0..spc {
            images.push((c, p.images[idx[j % idx.len()]].features.as_slice()));
        }
    }
    let samples =
        generate_messages(&a, &images, DecodeMode::Sample, key(4), Exec::Sequential).unwrap();
    let mut total = 0;
    for c in p.concepts() {
        let mut seen: Vec<&Vec<usize>> = Vec::new();
        for s in samples.iter().filter(|s| s.concept == c) {
            if !seen.contains(&&s.tokens) {
                seen.push(&s.tokens);
            }
        }
        total += seen.len();
    }
    assert_eq!(noisy, total as f64 / p.concepts().len() as f64);

    zero(&mut a.store, "sender.output");
    let uniform = paraphrase_stats(&a, &p, spc, key(4), Exec::Parallel).unwrap();
    assert!(uniform > spc as f64 - 0.5, "{uniform}");
    let bias = a.store.id("sender.output.bias").unwrap();
    a.store.get_mut(bias).values_mut()[1] = 40.0;
    assert_eq!(
        paraphrase_stats(&a, &p, spc, key(4), Exec::Parallel).unwrap(),
        1.0
    );
}

#[test]
fn report_serialization_and_ranges() {
    let mut r = EvalReport {
        success_greedy: 0.9,
        success_sample: 0.8,
        encoder_perplexity: 3.0,
        purity: vec![(1, 0, 0.7)],
        ..Default::default()
    };
    r.validate().unwrap();
    let kv = r.to_key_value();
    assert!(kv.contains("success_greedy = 0.9\n"));
    assert!(kv.contains("purity_prefix1_attr0 = 0.7\n"));
    let csv = r.to_csv();
    assert!(csv.starts_with("metric,value\n"));
    assert_eq!(csv.lines().count(), r.entries().len() + 1);
    r.encoder_perplexity = 0.5;
    assert!(r.validate().is_err());
}

#[test]
fn message_log_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("messages.txt");
    let samples = vec![
        MessageSample {
            concept: 3,
            tokens: vec![1, 2, 20],
            log_prob: -1.0,
        },
        MessageSample {
            concept: 0,
            tokens: vec![20],
            log_prob: -0.5,
        },
    ];
    write_message_log(&path, &samples).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "3,1 2 20\n0,20\n");
    let back = read_message_log(&path).unwrap();
    assert_eq!(back, vec![(3, vec![1, 2, 20]), (0, vec![20])]);
    std::fs::write(&path, "x,1\n").unwrap();
    assert!(read_message_log(&path).is_err());
}

#[test]
fn length_statistics() {
    let msgs = vec![vec![1], vec![1, 2], vec![1, 2], vec![1, 2, 3, 4]];
    let (mean, p50, p90, unique) = length_stats(&msgs);
    assert_eq!(mean, 2.25);
    assert_eq!(p50, 2.0);
    assert_eq!(p90, 4.0);
    assert_eq!(unique, 3);
}
