//! Categorical sampling via Gumbel-max, the Gumbel-softmax relaxation,
//! straight-through discretization and the learned inverse temperature.

use rand::Rng;

use crate::autograd::math::log_softmax;
use crate::autograd::{argmax, Tensor, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::nn::{glorot, AffineMap, Graph, ParamId, ParamStore};

/// Default fixed temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.2;
/// Default floor added to the learned inverse temperature.
pub const DEFAULT_TAU0: f64 = 0.2;

/// Gumbel(0, 1) draws.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise(pub Vec<f64>);

impl GumbelNoise {
    /// `g = -ln(-ln u)` with `u` uniform on the open interval (0, 1).
    pub fn draw<R: Rng>(rng: &mut R, n: usize) -> Self {
        let g = (0..n)
            .map(|_| {
                let mut u: f64 = rng.random();
                while u <= 0.0 {
                    u = rng.random();
                }
                -(-u.ln()).ln()
            })
            .collect();
        Self(g)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One generation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSample {
    pub token: usize,
    /// Relaxed probability vector, present in relaxed and straight-through
    /// modes.
    pub relaxed: Option<Vec<f64>>,
    pub log_prob: f64,
    pub noise: Option<GumbelNoise>,
}

/// Gumbel-max choice from log-probabilities.
pub fn gumbel_argmax(log_probs: &[f64], noise: &GumbelNoise) -> usize {
    let perturbed: Vec<f64> = log_probs.iter().zip(&noise.0).map(|(l, g)| l + g).collect();
    argmax(&perturbed)
}

/// Draws a token from `softmax(logits)` with the Gumbel-max trick.
pub fn sample_token<R: Rng>(logits: &[f64], rng: &mut R) -> StepSample {
    let lp = log_softmax(logits);
    let noise = GumbelNoise::draw(rng, logits.len());
    let token = gumbel_argmax(&lp, &noise);
    StepSample {
        token,
        relaxed: None,
        log_prob: lp[token],
        noise: Some(noise),
    }
}

/// Relaxed sample from log-probabilities, scaled by an inverse temperature
/// (a positive scalar variable).
pub fn relax_log_probs(
    g: &mut Graph,
    log_probs: Var,
    inv_temperature: Var,
    noise: &GumbelNoise,
) -> Result<Var> {
    let n = g.value(log_probs).len();
    if noise.len() != n {
        return shape_err(
            "gumbel_softmax",
            format!("noise of length {} for {n} logits", noise.len()),
        );
    }
    let it = g.item(inv_temperature);
    if it <= 0.0 || !it.is_finite() {
        return domain_err("gumbel_softmax", format!("inverse temperature {it}"));
    }
    let gn = g.constant(Tensor::vector(noise.0.clone()));
    let perturbed = g.add(log_probs, gn)?;
    let scaled = g.mul_scalar(perturbed, inv_temperature)?;
    g.softmax_rows(scaled)
}

/// `softmax((log_softmax(logits) + g) / tau)`, differentiable in logits and
/// the temperature.
pub fn gumbel_softmax(
    g: &mut Graph,
    logits: Var,
    temperature: Var,
    noise: &GumbelNoise,
) -> Result<Var> {
    let tau = g.item(temperature);
    if tau.is_nan() || tau <= 0.0 {
        return domain_err("gumbel_softmax", format!("temperature {tau}"));
    }
    let lp = g.log_softmax_rows(logits)?;
    let inv = g.recip(temperature)?;
    relax_log_probs(g, lp, inv, noise)
}

/// Straight-through sample: returns the step record and the one-hot
/// variable whose backward pass is the relaxation's.
pub fn st_sample<R: Rng>(
    g: &mut Graph,
    logits: Var,
    temperature: Var,
    rng: &mut R,
) -> Result<(StepSample, Var)> {
    let n = g.value(logits).len();
    let noise = GumbelNoise::draw(rng, n);
    let relaxed = gumbel_softmax(g, logits, temperature, &noise)?;
    let hard = g.straight_through(relaxed)?;
    let token = argmax(g.values(hard));
    let lp = log_softmax(g.values(logits));
    let step = StepSample {
        token,
        relaxed: Some(g.values(relaxed).to_vec()),
        log_prob: lp[token],
        noise: Some(noise),
    };
    Ok((step, hard))
}

/// `1/tau(h) = softplus(w . u(h)) + tau0`, where `u` is the identity or one
/// tanh hidden layer.
#[derive(Clone, Debug)]
pub struct TemperatureNet {
    pub weight: ParamId,
    pub hidden: Option<AffineMap>,
    pub tau0: f64,
}

impl TemperatureNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: Option<usize>,
        tau0: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = hidden_dim
            .map(|hd| AffineMap::new(store, &format!("{name}.hidden"), input_dim, hd, rng));
        let width = hidden_dim.unwrap_or(input_dim);
        let weight = store.add(format!("{name}.weight"), glorot(rng, vec![width], width, 1));
        Self {
            weight,
            hidden,
            tau0,
        }
    }

    pub fn inverse(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let u = match &self.hidden {
            Some(layer) => {
                let a = layer.forward(g, h)?;
                g.tanh(a)?
            }
            None => h,
        };
        let w = g.param(self.weight);
        let s = g.dot(w, u)?;
        let sp = g.softplus(s)?;
        g.add_const(sp, self.tau0)
    }

    pub fn temperature(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let inv = self.inverse(g, h)?;
        g.recip(inv)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self
            .hidden
            .as_ref()
            .map(AffineMap::param_ids)
            .unwrap_or_default();
        ids.push(self.weight);
        ids
    }
}

/// Where each step's temperature comes from.
#[derive(Clone, Debug)]
pub enum TemperatureSource {
    Fixed(f64),
    Learned(TemperatureNet),
}

impl TemperatureSource {
    /// Inverse temperature for the step whose hidden state is `h`.
    pub fn inverse(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match self {
            TemperatureSource::Fixed(tau) => {
                if tau.is_nan() || *tau <= 0.0 {
                    return domain_err("temperature", format!("fixed temperature {tau}"));
                }
                Ok(g.scalar(1.0 / tau))
            }
            TemperatureSource::Learned(net) => net.inverse(g, h),
        }
    }
}
