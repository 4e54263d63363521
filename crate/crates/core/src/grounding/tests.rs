use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agents::{Architecture, TemperatureChoice, Vocabulary};
use crate::data::{World, WorldSpec};
use crate::game::make_batch;
use crate::gradcheck::check_layer;
use crate::nn::ParamStore;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn arch(size: usize, max_len: usize) -> Architecture {
    Architecture {
        vocab: Vocabulary::new(size, max_len),
        feature_dim: 4,
        embed_dim: 3,
        hidden_dim: 5,
        temperature: TemperatureChoice::Fixed(1.2),
        baseline: None,
        language_model: true,
    }
}

fn features() -> Vec<f64> {
    vec![0.5, -0.5, 0.5, 0.5]
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.with_prefix(prefix).collect();
    for id in ids {
        store.get_mut(id).values_mut().fill(0.0);
    }
}

fn world_and_pool() -> (World, Pool) {
    let world = World::build(WorldSpec {
        n_attributes: 2,
        values_per_attribute: 2,
        feature_dim: 4,
        noise: 0.1,
        seed: 3,
    })
    .unwrap();
    let pool = Pool::generate(&world, 3, &mut rng(4)).unwrap();
    (world, pool)
}

fn all_messages(vocab: Vocabulary) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for step in 0..vocab.max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            for t in 0..vocab.outputs() {
                let mut m: Vec<usize> = prefix.clone();
                m.push(t);
                if t == vocab.eos() || step + 1 == vocab.max_len {
                    out.push(m);
                } else {
                    next.push(m);
                }
            }
        }
        frontier = next;
    }
    out
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn identical_models_have_zero_kl() {
    let mut a = Agents::new(arch(3, 3), &mut rng(1));
    zero_prefix(&mut a.store, "sender.output");
    zero_prefix(&mut a.store, "lm.output");
    let mut r = rng(2);
    let xs: Vec<f64> = (0..2000)
        .map(|_| kl_penalty_sample(&a, &features(), &mut r).unwrap())
        .collect();
    let (m, se) = mean_and_se(&xs);
    assert!(m.abs() <= 2.0 * se || m.abs() < 1e-12, "{m} ± {se}");
}

#[test]
fn kl_estimate_matches_enumeration() {
    let a = Agents::new(arch(3, 2), &mut rng(7));
    let lm = a.lm.as_ref().unwrap();
    let mut exact = 0.0;
    for m in all_messages(a.sender.vocab) {
        let mut g = Graph::inference(&a.store);
        let f = g.constant(Tensor::vector(features()));
        let lq = a.sender.sequence_log_prob(&mut g, f, &m).unwrap();
        let lq = g.item(lq);
        let lp = crate::agents::lm_log_prob(&a.store, lm, &m).unwrap();
        exact += lq.exp() * (lq - lp);
    }
    assert!(exact > 0.0);
    let mut r = rng(8);
    let xs: Vec<f64> = (0..50_000)
        .map(|_| kl_penalty_sample(&a, &features(), &mut r).unwrap())
        .collect();
    let (m, se) = mean_and_se(&xs);
    assert!((m - exact).abs() <= 2.0 * se, "{m} ± {se} vs {exact}");
}

#[test]
fn kl_needs_a_language_model() {
    let mut ar = arch(3, 2);
    ar.language_model = false;
    let a = Agents::new(ar, &mut rng(1));
    assert!(kl_penalty_sample(&a, &features(), &mut rng(2)).is_err());
}

#[test]
fn zero_weight_grounded_loss_is_the_game_loss() {
    let a = Agents::new(arch(5, 3), &mut rng(3));
    let (_, pool) = world_and_pool();
    let streams = Streams::new(1);
    let batch = make_batch(&pool, 10, 2, &mut streams.stream(Purpose::Test, 0, 0)).unwrap();
    let key = NoiseKey::new(streams, Purpose::TrainNoise, 0);
    let mode = DecodeMode::StraightThrough;
    let plain =
        crate::estimators::batch_objective(&a, &a.store, &batch, mode, key, Exec::Sequential)
            .unwrap();
    let grounded = grounded_game_loss(&a, &batch, 0.0, mode, key, Exec::Sequential).unwrap();
    assert_eq!(plain, grounded);
    let heavy = grounded_game_loss(&a, &batch, 1e3, mode, key, Exec::Sequential).unwrap();
    assert!(heavy.is_finite());
    assert!(grounded_game_loss(&a, &batch, -1.0, mode, key, Exec::Sequential).is_err());

    let s0 = relaxed_step(&a, &batch, mode, 0.0, key, Exec::Sequential).unwrap();
    let s1 = relaxed_step(&a, &batch, mode, 0.1, key, Exec::Sequential).unwrap();
    assert!(s0.metrics.kl.is_none());
    assert!(s1.metrics.kl.unwrap().is_finite());
    assert_ne!(s0.grads, s1.grads);
    for id in a.lm.as_ref().unwrap().param_ids(&a.store) {
        assert!(s1.grads.get(id).is_none());
    }
}

fn caption_value(a: &Agents, caption: &[usize]) -> f64 {
    let mut g = Graph::inference(&a.store);
    let f = g.constant(Tensor::vector(features()));
    let l = caption_loss(&mut g, &a.sender, f, caption).unwrap();
    g.item(l)
}

#[test]
fn caption_loss_examples() {
    let mut a = Agents::new(arch(5, 4), &mut rng(5));
    zero_prefix(&mut a.store, "sender.output");
    let eos = a.sender.vocab.eos();
    let uniform = caption_value(&a, &[1, 2, eos]);
    assert!((uniform - 3.0 * 6f64.ln()).abs() < 1e-12, "{uniform}");

    let bias = a.store.id("sender.output.bias").unwrap();
    a.store.get_mut(bias).values_mut()[eos] = 40.0;
    assert!(caption_value(&a, &[eos]) < 1e-10);

    let long = [0, 1, 2, 3, 4, eos];
    let b = Agents::new(arch(5, 4), &mut rng(6));
    assert_eq!(caption_value(&b, &long), caption_value(&b, &long[..4]));
    let mut g = Graph::inference(&b.store);
    let f = g.constant(Tensor::vector(features()));
    assert!(caption_loss(&mut g, &b.sender, f, &[]).is_err());
    assert!(caption_loss(&mut g, &b.sender, f, &[9]).is_err());
}

#[test]
fn caption_loss_gradcheck() {
    let mut ar = arch(4, 3);
    ar.language_model = false;
    let a = Agents::new(ar, &mut rng(9));
    let err = check_layer(&a.store, &[Tensor::vector(features())], |g, x| {
        caption_loss(g, &a.sender, x[0], &[2, 1])
    })
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn direct_grounding_weights() {
    let (world, pool) = world_and_pool();
    let a = Agents::new(arch(6, 4), &mut rng(10));
    let captions: Vec<CaptionRecord> = (0..world.n_concepts())
        .map(|c| world.caption_for(c, &a.sender.vocab).unwrap())
        .collect();
    let idx: Vec<usize> = (0..6).collect();
    let examples = caption_examples(&pool, &idx, &captions, &mut rng(1)).unwrap();
    assert_eq!(examples.len(), 6);
    let streams = Streams::new(2);
    let batch = make_batch(&pool, 8, 2, &mut streams.stream(Purpose::Test, 0, 0)).unwrap();
    let key = NoiseKey::new(streams, Purpose::TrainNoise, 0);

    let pure = direct_grounding_step(&a, &examples, &batch, 0.0, key, Exec::Sequential).unwrap();
    assert!(pure.metrics.caption_nll.unwrap() > 0.0);
    for id in a.receiver.param_ids(&a.store) {
        assert!(pure
            .grads
            .get(id)
            .is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }
    let mixed = direct_grounding_step(&a, &examples, &batch, 1.0, key, Exec::Parallel).unwrap();
    assert!(mixed.grads.first_non_finite(&a.store).is_none());
    assert!(mixed.grads.norm_over(a.receiver.param_ids(&a.store)) > 0.0);
    let game = relaxed_step(
        &a,
        &batch,
        DecodeMode::StraightThrough,
        0.0,
        key,
        Exec::Parallel,
    )
    .unwrap();
    let rid = a.store.id("receiver.output.weight").unwrap();
    assert_eq!(mixed.grads.get(rid), game.grads.get(rid));
    assert!(direct_grounding_step(&a, &examples, &batch, f64::NAN, key, Exec::Sequential).is_err());
}

#[test]
fn lm_memorizes_a_repeated_message() {
    let mut a = Agents::new(arch(5, 4), &mut rng(11));
    let corpus = vec![vec![3, 1, 4, 5]; 40];
    let cfg = LmTrainConfig {
        epochs: 40,
        batch_size: 8,
        adam: AdamConfig::with_lr(2e-2),
    };
    let before = a.store.clone();
    let report = lm_train(&mut a, &corpus, &cfg, Streams::new(1), Exec::Parallel).unwrap();
    assert!(report.epoch_perplexity.iter().all(|&p| p >= 1.0));
    assert!(
        report.final_perplexity() < 1.1,
        "{:?}",
        report.epoch_perplexity
    );
    for p in a.store.iter() {
        if !p.name.starts_with("lm.") {
            assert_eq!(Some(p), before.iter().find(|q| q.name == p.name));
        }
    }
}

#[test]
fn lm_beats_uniform_on_held_out_captions() {
    let (world, _) = world_and_pool();
    let mut a = Agents::new(arch(6, 4), &mut rng(12));
    let captions: Vec<Vec<usize>> = (0..world.n_concepts())
        .map(|c| world.caption_for(c, &a.sender.vocab).unwrap().tokens)
        .collect();
    let (train, test) = captions.split_at(3);
    let cfg = LmTrainConfig {
        epochs: 60,
        batch_size: 4,
        adam: AdamConfig::with_lr(1e-2),
    };
    let train: Vec<_> = train.iter().cycle().take(30).cloned().collect();
    lm_train(&mut a, &train, &cfg, Streams::new(3), Exec::Sequential).unwrap();
    let lm = a.lm.clone().unwrap();
    let held = lm_perplexity(&a, &lm, test, Exec::Sequential).unwrap();
    assert!((1.0..=7.0).contains(&held), "{held}");
    assert!(lm_train(&mut a, &[], &cfg, Streams::new(3), Exec::Sequential).is_err());
}

#[test]
fn config_split_and_validation() {
    let (_, pool) = world_and_pool();
    let cfg = GroundingConfig::default();
    cfg.validate().unwrap();
    let (r, g) = split_reference(&pool, cfg.lm_fraction, &mut rng(1));
    assert_eq!(r.len(), pool.len() / 2);
    assert_eq!(r.len() + g.len(), pool.len());
    assert!(r.iter().all(|i| !g.contains(i)));
    let bad = GroundingConfig {
        kl_weight: -0.1,
        ..GroundingConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = GroundingConfig {
        caption_fraction: 1.0,
        ..GroundingConfig::default()
    };
    assert!(bad.validate().is_err());
}
