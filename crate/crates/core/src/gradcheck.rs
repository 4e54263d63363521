//! Finite-difference suite over every tape op and every layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{
    hard_symbols, score_images, Agents, Architecture, DecodeMode, TemperatureChoice, Vocabulary,
};
use crate::autograd::gradcheck::{self as fd, weighted_sum, REL_TOL};
use crate::autograd::{OpKind, Tape, Tensor, Var};
use crate::error::Result;
use crate::game::hinge_loss;
use crate::nn::{AffineMap, EmbeddingTable, Graph, LstmCell, Mlp, ParamStore};
use crate::par::{self, Exec};

/// Checks a forward pass over `store` parameters plus free `inputs`.
/// Returns the largest relative error over all parameter and input
/// coordinates.
pub fn check_layer<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let np = store.len();
    let mut all: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    all.extend(inputs.iter().cloned());

    let value = |x: &[Tensor]| -> Result<f64> {
        let mut s = store.clone();
        for (id, t) in store.ids().zip(&x[..np]) {
            *s.get_mut(id) = t.clone();
        }
        let mut g = Graph::inference(&s);
        let vars: Vec<Var> = x[np..].iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let analytic = |x: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = x[np..].iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let mut res: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                grads
                    .get(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect();
        for (v, t) in vars.iter().zip(&x[np..]) {
            res.push(
                g.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]),
            );
        }
        Ok(res)
    };
    fd::max_rel_error(&all, value, analytic)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckRow {
    pub fn from_errors(name: impl Into<String>, errors: &[f64]) -> Self {
        let max_rel_err = errors.iter().copied().fold(0.0, f64::max);
        Self {
            name: name.into(),
            trials: errors.len(),
            max_rel_err,
            passed: errors.iter().all(|e| *e < REL_TOL),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn vecu(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector(uniform(rng, n, -2.0, 2.0))
}

fn matu(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, uniform(rng, r * c, -2.0, 2.0)).expect("extents")
}

/// Every tape op the suite covers, in registry order.
pub fn registered_ops() -> Vec<OpKind> {
    vec![
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale(-1.7),
        OpKind::AddConst(0.6),
        OpKind::MulScalar,
        OpKind::SubScalar,
        OpKind::Recip,
        OpKind::MatMul,
        OpKind::Affine,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softplus,
        OpKind::Exp,
        OpKind::Log,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::Concat,
        OpKind::Slice { start: 1, len: 3 },
        OpKind::Row(1),
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Max,
        OpKind::ReluHinge,
        OpKind::Dot,
        OpKind::StraightThrough,
    ]
}

fn op_inputs(kind: OpKind, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![matu(rng, 2, 3), matu(rng, 2, 3)],
        OpKind::Dot => vec![vecu(rng, 5), vecu(rng, 5)],
        OpKind::MulScalar | OpKind::SubScalar => vec![vecu(rng, 4), vecu(rng, 1)],
        OpKind::Recip => {
            let v = uniform(rng, 4, 0.5, 2.0)
                .into_iter()
                .map(|x| if rng.random::<bool>() { x } else { -x })
                .collect();
            vec![Tensor::vector(v)]
        }
        OpKind::Log => vec![Tensor::vector(uniform(rng, 4, 0.1, 2.0))],
        OpKind::MatMul => match rng.random_range(0..3) {
            0 => vec![matu(rng, 2, 3), matu(rng, 3, 4)],
            1 => vec![vecu(rng, 3), matu(rng, 3, 4)],
            _ => vec![matu(rng, 2, 3), vecu(rng, 3)],
        },
        OpKind::Affine => {
            if rng.random::<bool>() {
                vec![vecu(rng, 3), matu(rng, 3, 4), vecu(rng, 4)]
            } else {
                vec![matu(rng, 2, 3), matu(rng, 3, 4), vecu(rng, 4)]
            }
        }
        OpKind::Concat => vec![vecu(rng, 2), vecu(rng, 3), vecu(rng, 1)],
        OpKind::Slice { .. } => vec![vecu(rng, 5)],
        OpKind::Row(_) => vec![matu(rng, 3, 4)],
        OpKind::SoftmaxRows | OpKind::LogSoftmaxRows => {
            if rng.random::<bool>() {
                vec![vecu(rng, 5)]
            } else {
                vec![matu(rng, 2, 4)]
            }
        }
        OpKind::StraightThrough => vec![vecu(rng, 5)],
        _ => vec![matu(rng, 2, 3)],
    }
}

fn reduce(tape: &mut Tape, out: Var, rng_weights: &[f64]) -> Result<Var> {
    let n = tape.value(out).len();
    weighted_sum(tape, out, &rng_weights[..n])
}

/// Finite-difference check of one op on random inputs. `straight_through`
/// is not differentiable in its forward pass, so its row verifies the
/// identity backward rule instead.
pub fn check_op(kind: OpKind, trials: usize, seed: u64) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let inputs = op_inputs(kind, &mut rng);
        let weights = uniform(&mut rng, 64, -1.0, 1.0);
        if kind == OpKind::StraightThrough {
            let mut tape = Tape::new();
            let x = tape.constant(inputs[0].clone());
            let p = tape.softmax_rows(x)?;
            let relaxed = tape.variable(tape.value(p).clone());
            let h = tape.straight_through(relaxed)?;
            let l = reduce(&mut tape, h, &weights)?;
            tape.backward(l)?;
            let err = match tape.grad(relaxed) {
                Some(g) => g
                    .iter()
                    .zip(&weights)
                    .map(|(a, b)| fd::rel_err(*a, *b))
                    .fold(0.0, f64::max),
                None => f64::INFINITY,
            };
            errors.push(err);
            continue;
        }
        let err = fd::check(&inputs, |t, v| {
            let out = t.forward_op(kind, v)?;
            reduce(t, out, &weights)
        })?;
        errors.push(err);
    }
    Ok(CheckRow::from_errors(kind.name(), &errors))
}

/// Layer-level cases of the suite, in registry order.
pub const LAYERS: [&str; 9] = [
    "affine_map",
    "embedding_soft",
    "lstm_cell",
    "mlp",
    "receiver_read",
    "game_hinge",
    "sender_log_prob",
    "sender_relaxed_rollout",
    "language_model",
];

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).values_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

fn tiny_agents(rng: &mut ChaCha8Rng) -> Agents {
    let arch = Architecture {
        vocab: Vocabulary::new(3, 3),
        feature_dim: 3,
        embed_dim: 2,
        hidden_dim: 3,
        temperature: TemperatureChoice::Learned {
            tau0: 0.2,
            hidden: Some(2),
        },
        baseline: None,
        language_model: true,
    };
    let mut a = Agents::new(arch, rng);
    jitter(&mut a.store, rng);
    a
}

fn check_layer_trial(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let weights = uniform(rng, 16, -1.0, 1.0);
    let w = |n: usize| weights[..n].to_vec();
    let mut store = ParamStore::new();
    match name {
        "affine_map" => {
            let m = AffineMap::new(&mut store, "a", 3, 4, rng);
            jitter(&mut store, rng);
            check_layer(&store, &[vecu(rng, 3)], |g, v| {
                let y = m.forward(g, v[0])?;
                weighted_sum(g, y, &w(4))
            })
        }
        "embedding_soft" => {
            let e = EmbeddingTable::new(&mut store, "e", 4, 3, rng);
            check_layer(&store, &[vecu(rng, 4)], |g, v| {
                let p = g.softmax_rows(v[0])?;
                let y = e.soft(g, p)?;
                weighted_sum(g, y, &w(3))
            })
        }
        "lstm_cell" => {
            let cell = LstmCell::new(&mut store, "c", 2, 3, rng);
            jitter(&mut store, rng);
            let inputs = [vecu(rng, 2), vecu(rng, 3), vecu(rng, 3)];
            check_layer(&store, &inputs, |g, v| {
                let (h, c) = cell.step(g, v[0], v[1], v[2])?;
                let (h2, c2) = cell.step(g, v[0], h, c)?;
                let both = g.concat(&[h2, c2])?;
                weighted_sum(g, both, &w(6))
            })
        }
        "mlp" => {
            let m = Mlp::new(&mut store, "m", &[3, 4, 2], rng);
            jitter(&mut store, rng);
            check_layer(&store, &[vecu(rng, 3)], |g, v| {
                let y = m.forward(g, v[0])?;
                weighted_sum(g, y, &w(2))
            })
        }
        "receiver_read" => {
            let a = tiny_agents(rng);
            let tokens = random_message(rng, &a);
            check_layer(&a.store, &[], |g, _| {
                let y = a.receiver.read(g, &hard_symbols(&tokens))?;
                weighted_sum(g, y, &w(3))
            })
        }
        "game_hinge" => {
            let a = tiny_agents(rng);
            let tokens = random_message(rng, &a);
            let cands = matu(rng, 3, 3);
            let target = rng.random_range(0..3);
            check_layer(&a.store, &[cands], |g, v| {
                let interp = a.receiver.read(g, &hard_symbols(&tokens))?;
                let scores = score_images(g, interp, v[0])?;
                hinge_loss(g, scores, target)
            })
        }
        "sender_log_prob" => {
            let a = tiny_agents(rng);
            let tokens = random_message(rng, &a);
            check_layer(&a.store, &[vecu(rng, 3)], |g, v| {
                a.sender.sequence_log_prob(g, v[0], &tokens)
            })
        }
        "sender_relaxed_rollout" => {
            let a = tiny_agents(rng);
            let noise_seed = rng.random::<u64>();
            check_layer(&a.store, &[vecu(rng, 3)], |g, v| {
                let r = a.sender.generate(
                    g,
                    v[0],
                    DecodeMode::Relaxed,
                    &mut ChaCha8Rng::seed_from_u64(noise_seed),
                )?;
                let interp = a.receiver.read(g, &r.symbols)?;
                let lp = r.log_prob(g)?;
                let y = weighted_sum(g, interp, &w(3))?;
                g.add(y, lp)
            })
        }
        "language_model" => {
            let a = tiny_agents(rng);
            let lm = a.lm.as_ref().expect("language model");
            let tokens = random_message(rng, &a);
            check_layer(&a.store, &[], |g, _| lm.log_prob(g, &hard_symbols(&tokens)))
        }
        other => Err(crate::Error::Config(format!(
            "unknown gradcheck case `{other}`"
        ))),
    }
}

fn random_message(rng: &mut ChaCha8Rng, a: &Agents) -> Vec<usize> {
    let v = a.sender.vocab;
    let len = rng.random_range(1..=v.max_len);
    let mut m: Vec<usize> = (0..len - 1).map(|_| rng.random_range(0..v.size)).collect();
    m.push(if len == v.max_len {
        rng.random_range(0..v.outputs())
    } else {
        v.eos()
    });
    m
}

pub fn check_layer_case(name: &str, trials: usize, seed: u64) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..trials)
        .map(|_| check_layer_trial(name, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckRow::from_errors(name, &errors))
}

/// Every op and layer, `trials` random instances each.
pub fn run_suite(trials: usize, seed: u64, exec: Exec) -> Result<Vec<CheckRow>> {
    let ops = registered_ops();
    let mut cases: Vec<(Option<OpKind>, &str)> = ops.iter().map(|k| (Some(*k), k.name())).collect();
    cases.extend(LAYERS.iter().map(|n| (None, *n)));
    par::map_slice(exec, &cases, |i, (kind, name)| match kind {
        Some(k) => check_op(*k, trials, seed.wrapping_add(i as u64)),
        None => check_layer_case(name, trials, seed.wrapping_add(i as u64)),
    })
    .into_iter()
    .collect()
}

/// Plain-text table with one row per case.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!(
        "{:<24} {:>6} {:>12} {}\n",
        "case", "trials", "max_rel_err", "status"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>6} {:>12.3e} {}\n",
            r.name,
            r.trials,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
