use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agents::{hard_symbols, Architecture, TemperatureChoice, Vocabulary};
use crate::data::{World, WorldSpec};
use crate::game::{hinge_value, play_round, receiver_scores};
use crate::nn::ParamId;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn arch(
    size: usize,
    max_len: usize,
    feature_dim: usize,
    temperature: TemperatureChoice,
) -> Architecture {
    Architecture {
        vocab: Vocabulary::new(size, max_len),
        feature_dim,
        embed_dim: 3,
        hidden_dim: 4,
        temperature,
        baseline: None,
        language_model: false,
    }
}

fn instance() -> GameInstance {
    GameInstance {
        candidates: vec![vec![0.6, -0.8, 0.0], vec![0.0, 0.6, 0.8]],
        concepts: vec![0, 1],
        target_index: 0,
    }
}

fn small_pool(seed: u64) -> Pool {
    let world = World::build(WorldSpec {
        n_attributes: 2,
        values_per_attribute: 3,
        feature_dim: 6,
        noise: 0.1,
        seed,
    })
    .unwrap();
    Pool::generate(&world, 4, &mut rng(seed + 1)).unwrap()
}

fn sender_ids(a: &Agents) -> Vec<ParamId> {
    a.sender.param_ids(&a.store)
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

/// Gradient of `sum_m q(m) l(m)` w.r.t. sender parameters, with the
/// receiver held fixed.
fn exact_sender_gradient(a: &Agents, inst: &GameInstance) -> Vec<f64> {
    let mut g = Graph::new(&a.store).freeze(a.receiver.param_ids(&a.store));
    let f = g.constant(Tensor::vector(inst.target().to_vec()));
    let mut terms = Vec::new();
    for m in all_messages(a.sender.vocab) {
        let loss = {
            let mut gi = Graph::inference(&a.store);
            let s = receiver_scores(&mut gi, a, &hard_symbols(&m), inst).unwrap();
            hinge_value(gi.values(s), inst.target_index)
        };
        let lq = a.sender.sequence_log_prob(&mut g, f, &m).unwrap();
        let q = g.exp(lq).unwrap();
        terms.push(g.scale(q, loss).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).unwrap();
    }
    let grads = g.backward(total).unwrap();
    sender_only(&grads, a)
}

fn sender_only(grads: &Grads, a: &Agents) -> Vec<f64> {
    let mut out = Vec::new();
    for id in sender_ids(a) {
        match grads.get(id) {
            Some(v) => out.extend_from_slice(v),
            None => out.extend(std::iter::repeat_n(0.0, a.store.get(id).len())),
        }
    }
    out
}

fn agents(size: usize, max_len: usize, seed: u64) -> Agents {
    Agents::new(
        arch(size, max_len, 3, TemperatureChoice::Fixed(1.2)),
        &mut rng(seed),
    )
}

#[test]
fn estimator_names_round_trip() {
    for k in [
        EstimatorKind::Reinforce,
        EstimatorKind::GumbelSoftmax,
        EstimatorKind::StGumbelSoftmax,
    ] {
        assert_eq!(EstimatorKind::parse(k.name()).unwrap(), k);
    }
    assert!(EstimatorKind::parse("ppo").is_err());
    assert_eq!(
        EstimatorKind::StGumbelSoftmax.train_mode(),
        DecodeMode::StraightThrough
    );
}

#[test]
fn zero_centered_signal_gives_zero_sender_gradient() {
    // A receiver that scores every candidate equally makes the loss the
    // constant K, which the primed moving average centers exactly.
    let mut a = agents(2, 2, 3);
    let ids: Vec<_> = a.store.with_prefix("receiver.output").collect();
    for id in ids {
        a.store.get_mut(id).values_mut().fill(0.0);
    }
    let mut state =
        ReinforceState::new(BaselineKind::MovingAverage, &a.store, AdamConfig::default());
    let batch = vec![instance(); 8];
    let key = NoiseKey::new(Streams::new(1), Purpose::Test, 0);
    let out = reinforce_step(&mut state, &a, &batch, key, Exec::Sequential).unwrap();
    assert!(out.signals.iter().all(|&s| s == 1.0));
    for id in sender_ids(&a) {
        if let Some(g) = out.grads.get(id) {
            assert!(g.iter().all(|&x| x == 0.0), "{}", a.store.name(id));
        }
    }
}

#[test]
fn reinforce_matches_enumerated_gradient() {
    let a = agents(2, 2, 5);
    let inst = instance();
    let exact = exact_sender_gradient(&a, &inst);
    let n_batches = 300;
    let batch = vec![inst.clone(); 100];
    let streams = Streams::new(9);
    let mut per_batch = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut state = ReinforceState::new(BaselineKind::None, &a.store, AdamConfig::default());
        let key = NoiseKey::new(streams, Purpose::Test, b as u64);
        let out = reinforce_step(&mut state, &a, &batch, key, Exec::Parallel).unwrap();
        per_batch.push(sender_only(&out.grads, &a));
    }
    let n = n_batches as f64;
    let mut within = 0;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (j, &e) in exact.iter().enumerate() {
        let mean = per_batch.iter().map(|v| v[j]).sum::<f64>() / n;
        let var = per_batch.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        if se == 0.0 {
            assert!((mean - e).abs() < 1e-12, "component {j}: {mean} vs {e}");
            continue;
        }
        let z = (mean - e) / se;
        checked += 1;
        if z.abs() <= 2.0 {
            within += 1;
        }
        worst = worst.max(z.abs());
    }
    assert!(checked > 20);
    assert!(
        within as f64 >= 0.85 * checked as f64,
        "{within}/{checked} within 2 SE"
    );
    assert!(worst < 4.5, "max |z| = {worst}");
}

#[test]
fn moving_average_baseline_reduces_variance() {
    let a = agents(2, 2, 11);
    let inst = instance();
    let streams = Streams::new(4);
    let run = |kind: BaselineKind| -> f64 {
        let mut state = ReinforceState::new(kind, &a.store, AdamConfig::default());
        let mut samples = Vec::new();
        for s in 0..4000u64 {
            let key = NoiseKey::new(streams, Purpose::Test, s);
            let out = reinforce_step(
                &mut state,
                &a,
                std::slice::from_ref(&inst),
                key,
                Exec::Sequential,
            )
            .unwrap();
            samples.push(sender_only(&out.grads, &a));
        }
        let n = samples.len() as f64;
        (0..samples[0].len())
            .map(|j| {
                let m = samples.iter().map(|v| v[j]).sum::<f64>() / n;
                samples.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / n
            })
            .sum()
    };
    let raw = run(BaselineKind::None);
    let centered = run(BaselineKind::MovingAverage);
    assert!(centered <= raw, "{centered} > {raw}");
}

#[test]
fn input_baseline_regresses_constant_signal() {
    let mut ar = arch(3, 2, 6, TemperatureChoice::Fixed(1.2));
    ar.baseline = Some(vec![16, 8]);
    let mut a = Agents::new(ar, &mut rng(2));
    let ids: Vec<_> = a.store.with_prefix("receiver.output").collect();
    for id in ids {
        a.store.get_mut(id).values_mut().fill(0.0);
    }
    let mut state = ReinforceState::new(
        BaselineKind::InputDependent,
        &a.store,
        AdamConfig::with_lr(1e-2),
    );
    let pool = small_pool(3);
    let streams = Streams::new(5);
    let mut last = Vec::new();
    for step in 0..600u64 {
        let batch = make_batch(&pool, 16, 1, &mut streams.stream(Purpose::Test, step, 0)).unwrap();
        let key = NoiseKey::new(streams, Purpose::TrainNoise, step);
        let out = reinforce_step(&mut state, &a, &batch, key, Exec::Sequential).unwrap();
        assert!(out.signals.iter().all(|&s| s == 1.0));
        let mut opt = state.baseline_optimizer.take().unwrap();
        opt.step(&mut a.store, out.baseline_grads.as_ref().unwrap())
            .unwrap();
        state.baseline_optimizer = Some(opt);
        last = batch;
    }
    let mlp = a.baseline.as_ref().unwrap();
    let mse = last
        .iter()
        .map(|inst| {
            let mut g = Graph::inference(&a.store);
            let f = g.constant(Tensor::vector(inst.target().to_vec()));
            let y = mlp.forward(&mut g, f).unwrap();
            (g.item(y) - 1.0).powi(2)
        })
        .sum::<f64>()
        / last.len() as f64;
    assert!(mse < 1e-3, "mse {mse}");
}

#[test]
fn non_finite_signal_is_rejected() {
    let mut a = agents(2, 2, 1);
    let id = a.store.id("receiver.output.weight").unwrap();
    a.store.get_mut(id).values_mut()[0] = f64::NAN;
    let mut state =
        ReinforceState::new(BaselineKind::MovingAverage, &a.store, AdamConfig::default());
    let key = NoiseKey::new(Streams::new(1), Purpose::Test, 0);
    let err = reinforce_step(&mut state, &a, &[instance()], key, Exec::Sequential);
    assert!(err.is_err());
    assert!(!state.initialized);
}

#[test]
fn straight_through_messages_are_one_hot() {
    let a = agents(5, 4, 7);
    let streams = Streams::new(2);
    for i in 0..50u64 {
        let mut g = a.game_graph();
        let rg = round_graph(
            &mut g,
            &a,
            &instance(),
            DecodeMode::StraightThrough,
            &mut streams.stream(Purpose::Test, i, 0),
        )
        .unwrap();
        for (s, &t) in rg.rollout.symbols.iter().zip(&rg.rollout.message.tokens) {
            let crate::agents::Symbol::Soft(v) = *s else {
                panic!("hard symbol in straight-through mode")
            };
            let vals = g.values(v);
            for (j, &x) in vals.iter().enumerate() {
                assert_eq!(x, if j == t { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn relaxed_and_discrete_agree_at_low_temperature() {
    let a = Agents::new(arch(5, 3, 6, TemperatureChoice::Fixed(0.01)), &mut rng(8));
    let pool = small_pool(4);
    let streams = Streams::new(6);
    let batch = make_batch(&pool, 400, 3, &mut streams.stream(Purpose::Test, 0, 0)).unwrap();
    let agree = batch
        .iter()
        .enumerate()
        .filter(|(i, inst)| {
            let relaxed = play_round(
                &a,
                inst,
                DecodeMode::Relaxed,
                &mut streams.stream(Purpose::Test, 1, *i as u64),
            )
            .unwrap();
            let discrete = play_round(
                &a,
                inst,
                DecodeMode::Sample,
                &mut streams.stream(Purpose::Test, 1, *i as u64),
            )
            .unwrap();
            relaxed.success == discrete.success && relaxed.message.tokens == discrete.message.tokens
        })
        .count();
    assert!(agree as f64 > 0.95 * batch.len() as f64, "{agree}/400");
}

#[test]
fn stgs_gradients_are_finite_and_nonzero() {
    let learned = TemperatureChoice::Learned {
        tau0: 0.2,
        hidden: None,
    };
    let a = Agents::new(arch(5, 3, 6, learned), &mut rng(9));
    let pool = small_pool(5);
    let streams = Streams::new(7);
    let batch = make_batch(&pool, 16, 3, &mut streams.stream(Purpose::Test, 0, 0)).unwrap();
    for mode in [DecodeMode::StraightThrough, DecodeMode::Relaxed] {
        let key = NoiseKey::new(streams, Purpose::TrainNoise, 0);
        let out = relaxed_step(&a, &batch, mode, 0.0, key, Exec::Parallel).unwrap();
        assert!(out.grads.first_non_finite(&a.store).is_none());
        assert!(out.grads.norm_over(sender_ids(&a)) > 0.0);
        assert!(out.grads.norm_over(a.receiver.param_ids(&a.store)) > 0.0);
        let tau = a.store.id("sender.temperature.weight").unwrap();
        assert!(out
            .grads
            .get(tau)
            .is_some_and(|g| g.iter().any(|&x| x != 0.0)));
    }
    let key = NoiseKey::new(streams, Purpose::TrainNoise, 0);
    assert!(relaxed_step(&a, &batch, DecodeMode::Greedy, 0.0, key, Exec::Parallel).is_err());
}

#[test]
fn parallel_and_sequential_steps_agree() {
    let a = agents(4, 3, 12);
    let pool = {
        let world = World::build(WorldSpec {
            n_attributes: 1,
            values_per_attribute: 4,
            feature_dim: 3,
            noise: 0.1,
            seed: 2,
        })
        .unwrap();
        Pool::generate(&world, 3, &mut rng(3)).unwrap()
    };
    let streams = Streams::new(1);
    let batch = make_batch(&pool, 12, 2, &mut streams.stream(Purpose::Test, 0, 0)).unwrap();
    let key = NoiseKey::new(streams, Purpose::TrainNoise, 0);
    let s = relaxed_step(
        &a,
        &batch,
        DecodeMode::StraightThrough,
        0.0,
        key,
        Exec::Sequential,
    )
    .unwrap();
    let p = relaxed_step(
        &a,
        &batch,
        DecodeMode::StraightThrough,
        0.0,
        key,
        Exec::Parallel,
    )
    .unwrap();
    assert_eq!(s.grads, p.grads);
    let mut st1 = ReinforceState::new(BaselineKind::MovingAverage, &a.store, AdamConfig::default());
    let mut st2 = st1.clone();
    let r1 = reinforce_step(&mut st1, &a, &batch, key, Exec::Sequential).unwrap();
    let r2 = reinforce_step(&mut st2, &a, &batch, key, Exec::Parallel).unwrap();
    assert_eq!(r1.grads, r2.grads);
    assert_eq!(st1, st2);
}

#[test]
fn receiver_gradients_match_across_estimators() {
    let a = agents(4, 3, 13);
    let batch = vec![instance(); 6];
    let key = NoiseKey::new(Streams::new(3), Purpose::Test, 0);
    let mut state =
        ReinforceState::new(BaselineKind::MovingAverage, &a.store, AdamConfig::default());
    let r = reinforce_step(&mut state, &a, &batch, key, Exec::Sequential).unwrap();
    let s = relaxed_step(
        &a,
        &batch,
        DecodeMode::StraightThrough,
        0.0,
        key,
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!(r.signals, s.signals);
    for id in a.receiver.param_ids(&a.store) {
        assert_eq!(r.grads.get(id), s.grads.get(id), "{}", a.store.name(id));
    }
}

#[test]
fn lr_scale_follows_signal_deviation() {
    let store = ParamStore::new();
    let mut s = ReinforceState::new(BaselineKind::MovingAverage, &store, AdamConfig::default());
    s.signal_variance = 4.0;
    assert_eq!(s.lr_scale(), 0.5);
    s.signal_variance = 0.0;
    assert_eq!(s.lr_scale(), 1e4);
    s.adapt_lr = false;
    assert_eq!(s.lr_scale(), 1.0);
}

fn quadratic_store(u: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("u", Tensor::vector(u.to_vec()));
    s
}

fn uu(s: &ParamStore) -> Result<f64> {
    Ok(s.flatten().iter().map(|x| x * x).sum())
}

#[test]
fn pseudograd_on_quadratic() {
    let s = quadratic_store(&[1.0, 2.0]);
    let d = pseudograd_dot(uu, &s, &[1.0, 0.0], 1e-4).unwrap();
    assert!((d - 2.0).abs() < 1e-6, "{d}");
    assert_eq!(pseudograd_dot(uu, &s, &[0.0, 0.0], 1e-4).unwrap(), 0.0);
    let plus = pseudograd_dot(uu, &s, &[0.3, -0.7], 1e-3).unwrap();
    let minus = pseudograd_dot(uu, &s, &[-0.3, 0.7], 1e-3).unwrap();
    assert_eq!(plus, -minus);
    assert!(pseudograd_dot(uu, &s, &[1.0], 1e-3).is_err());
    assert!(pseudograd_dot(uu, &s, &[1.0, 0.0], 0.0).is_err());
    assert!(pseudograd_dot(|_| Ok(f64::NAN), &s, &[1.0, 0.0], 1e-3).is_err());
}

#[test]
fn relaxed_control_probes_are_acute() {
    let a = Agents::new(arch(5, 3, 6, TemperatureChoice::Fixed(1.2)), &mut rng(21));
    let pool = small_pool(6);
    let cfg = ProbeConfig {
        n_probes: 10,
        eps: 1e-3,
        batch_size: 8,
        distractors: 3,
        mode: DecodeMode::Relaxed,
    };
    let report = acute_angle_fraction(&a, &pool, &cfg, Streams::new(2), Exec::Parallel).unwrap();
    assert_eq!(report.rows.len(), 10);
    assert_eq!(report.fraction, 1.0, "{:?}", report.rows);
    let st = ProbeConfig {
        mode: DecodeMode::StraightThrough,
        ..cfg
    };
    let r = acute_angle_fraction(&a, &pool, &st, Streams::new(2), Exec::Parallel).unwrap();
    assert!((0.0..=1.0).contains(&r.fraction));
}
