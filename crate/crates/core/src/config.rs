//! Run configuration: a flat `key = value` file whose keys match the
//! fields of [`RunConfig`]; command-line flags override file values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{Architecture, DecodeMode, TemperatureChoice, Vocabulary};
use crate::data::WorldSpec;
use crate::error::{Error, Result};
use crate::estimators::{BaselineKind, EstimatorKind};
use crate::nn::AdamConfig;
use crate::par::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMode {
    /// KL penalty toward a language model trained on captions.
    Kl,
    /// Co-training the sender on captions.
    Direct,
}

impl GroundingMode {
    pub fn name(&self) -> &'static str {
        match self {
            GroundingMode::Kl => "kl",
            GroundingMode::Direct => "direct",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub world_seed: u64,
    pub n_attributes: usize,
    pub values_per_attribute: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub train_per_concept: usize,
    pub heldout_per_concept: usize,
    pub features: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    /// Held-out share when images come from a feature file.
    pub heldout_fraction: f64,

    pub vocab_size: usize,
    pub max_len: usize,
    pub distractors: usize,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,

    pub estimator: EstimatorKind,
    pub temperature: f64,
    pub learn_temperature: bool,
    pub tau0: f64,
    pub temperature_hidden: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub baseline: BaselineKind,
    pub baseline_decay: f64,
    pub variance_floor: f64,
    pub adapt_lr: bool,
    pub baseline_hidden: Vec<usize>,
    pub baseline_lr: f64,

    pub grounding: GroundingMode,
    pub kl_weight: f64,
    pub caption_weight: f64,
    pub lm_fraction: f64,
    pub caption_fraction: f64,
    pub lm_epochs: usize,
    pub lm_lr: f64,
    pub lm_batch_size: usize,

    pub max_updates: u64,
    pub eval_interval: u64,
    pub eval_rounds: usize,
    pub early_stop_success: f64,
    pub plateau_evals: usize,
    pub checkpoint_interval: u64,
    pub decode: DecodeMode,

    pub probe_count: usize,
    pub probe_eps: f64,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            world_seed: 0,
            n_attributes: 3,
            values_per_attribute: 4,
            feature_dim: 32,
            noise: 0.1,
            train_per_concept: 16,
            heldout_per_concept: 4,
            features: None,
            captions: None,
            heldout_fraction: 0.2,
            vocab_size: 20,
            max_len: 6,
            distractors: 7,
            batch_size: 32,
            embed_dim: 32,
            hidden_dim: 64,
            estimator: EstimatorKind::StGumbelSoftmax,
            temperature: crate::sampling::DEFAULT_TEMPERATURE,
            learn_temperature: false,
            tau0: crate::sampling::DEFAULT_TAU0,
            temperature_hidden: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            baseline: BaselineKind::MovingAverage,
            baseline_decay: crate::estimators::DEFAULT_DECAY,
            variance_floor: crate::estimators::DEFAULT_VARIANCE_FLOOR,
            adapt_lr: true,
            baseline_hidden: vec![128, 64],
            baseline_lr: 1e-3,
            grounding: GroundingMode::Kl,
            kl_weight: crate::grounding::DEFAULT_KL_WEIGHT,
            caption_weight: 1.0,
            lm_fraction: crate::grounding::DEFAULT_LM_FRACTION,
            caption_fraction: crate::grounding::DEFAULT_CAPTION_FRACTION,
            lm_epochs: 30,
            lm_lr: 1e-2,
            lm_batch_size: 32,
            max_updates: 5000,
            eval_interval: 100,
            eval_rounds: 512,
            early_stop_success: 0.95,
            plateau_evals: 10,
            checkpoint_interval: 500,
            decode: DecodeMode::Greedy,
            probe_count: 100,
            probe_eps: 1e-3,
            parallel: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got `{value}`"
        ))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

pub fn parse_decode(value: &str) -> Result<DecodeMode> {
    match value {
        "greedy" => Ok(DecodeMode::Greedy),
        "sample" => Ok(DecodeMode::Sample),
        other => Err(Error::Config(format!(
            "decode must be `greedy` or `sample`, got `{other}`"
        ))),
    }
}

fn parse_grounding(value: &str) -> Result<GroundingMode> {
    match value {
        "kl" => Ok(GroundingMode::Kl),
        "direct" => Ok(GroundingMode::Direct),
        other => Err(Error::Config(format!(
            "grounding must be `kl` or `direct`, got `{other}`"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "world_seed" => self.world_seed = parse(key, v)?,
            "n_attributes" => self.n_attributes = parse(key, v)?,
            "values_per_attribute" => self.values_per_attribute = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "train_per_concept" => self.train_per_concept = parse(key, v)?,
            "heldout_per_concept" => self.heldout_per_concept = parse(key, v)?,
            "features" => self.features = parse_path(v),
            "captions" => self.captions = parse_path(v),
            "heldout_fraction" => self.heldout_fraction = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "distractors" => self.distractors = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "estimator" => self.estimator = EstimatorKind::parse(v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "learn_temperature" => self.learn_temperature = parse_bool(key, v)?,
            "tau0" => self.tau0 = parse(key, v)?,
            "temperature_hidden" => self.temperature_hidden = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "baseline" => self.baseline = BaselineKind::parse(v)?,
            "baseline_decay" => self.baseline_decay = parse(key, v)?,
            "variance_floor" => self.variance_floor = parse(key, v)?,
            "adapt_lr" => self.adapt_lr = parse_bool(key, v)?,
            "baseline_hidden" => self.baseline_hidden = parse_list(key, v)?,
            "baseline_lr" => self.baseline_lr = parse(key, v)?,
            "grounding" => self.grounding = parse_grounding(v)?,
            "kl_weight" => self.kl_weight = parse(key, v)?,
            "caption_weight" => self.caption_weight = parse(key, v)?,
            "lm_fraction" => self.lm_fraction = parse(key, v)?,
            "caption_fraction" => self.caption_fraction = parse(key, v)?,
            "lm_epochs" => self.lm_epochs = parse(key, v)?,
            "lm_lr" => self.lm_lr = parse(key, v)?,
            "lm_batch_size" => self.lm_batch_size = parse(key, v)?,
            "max_updates" => self.max_updates = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "eval_rounds" => self.eval_rounds = parse(key, v)?,
            "early_stop_success" => self.early_stop_success = parse(key, v)?,
            "plateau_evals" => self.plateau_evals = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "decode" => self.decode = parse_decode(v)?,
            "probe_count" => self.probe_count = parse(key, v)?,
            "probe_eps" => self.probe_eps = parse(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?, path)?;
        Ok(cfg)
    }

    /// Every field as `key = value` lines, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".to_string(), |p| p.display().to_string())
        };
        let list = self
            .baseline_hidden
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("world_seed", self.world_seed.to_string());
        put("n_attributes", self.n_attributes.to_string());
        put(
            "values_per_attribute",
            self.values_per_attribute.to_string(),
        );
        put("feature_dim", self.feature_dim.to_string());
        put("noise", self.noise.to_string());
        put("train_per_concept", self.train_per_concept.to_string());
        put("heldout_per_concept", self.heldout_per_concept.to_string());
        put("features", opt(&self.features));
        put("captions", opt(&self.captions));
        put("heldout_fraction", self.heldout_fraction.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("max_len", self.max_len.to_string());
        put("distractors", self.distractors.to_string());
        put("batch_size", self.batch_size.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("estimator", self.estimator.name().to_string());
        put("temperature", self.temperature.to_string());
        put("learn_temperature", self.learn_temperature.to_string());
        put("tau0", self.tau0.to_string());
        put("temperature_hidden", self.temperature_hidden.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("baseline", self.baseline.name().to_string());
        put("baseline_decay", self.baseline_decay.to_string());
        put("variance_floor", self.variance_floor.to_string());
        put("adapt_lr", self.adapt_lr.to_string());
        put("baseline_hidden", list);
        put("baseline_lr", self.baseline_lr.to_string());
        put("grounding", self.grounding.name().to_string());
        put("kl_weight", self.kl_weight.to_string());
        put("caption_weight", self.caption_weight.to_string());
        put("lm_fraction", self.lm_fraction.to_string());
        put("caption_fraction", self.caption_fraction.to_string());
        put("lm_epochs", self.lm_epochs.to_string());
        put("lm_lr", self.lm_lr.to_string());
        put("lm_batch_size", self.lm_batch_size.to_string());
        put("max_updates", self.max_updates.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("eval_rounds", self.eval_rounds.to_string());
        put("early_stop_success", self.early_stop_success.to_string());
        put("plateau_evals", self.plateau_evals.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        put("decode", self.decode.name().to_string());
        put("probe_count", self.probe_count.to_string());
        put("probe_eps", self.probe_eps.to_string());
        put("parallel", self.parallel.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_attributes", self.n_attributes),
            ("values_per_attribute", self.values_per_attribute),
            ("feature_dim", self.feature_dim),
            ("train_per_concept", self.train_per_concept),
            ("heldout_per_concept", self.heldout_per_concept),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("distractors", self.distractors),
            ("batch_size", self.batch_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("eval_rounds", self.eval_rounds),
            ("lm_batch_size", self.lm_batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        let finite_pos = [
            ("lr", self.lr),
            ("temperature", self.temperature),
            ("tau0", self.tau0),
            ("adam_eps", self.adam_eps),
            ("variance_floor", self.variance_floor),
            ("lm_lr", self.lm_lr),
            ("baseline_lr", self.baseline_lr),
            ("probe_eps", self.probe_eps),
        ];
        for (k, v) in finite_pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "{k} must be finite and positive, got {v}"
                )));
            }
        }
        for (k, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("baseline_decay", self.baseline_decay),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.early_stop_success) {
            return Err(Error::Config(format!(
                "early_stop_success {}",
                self.early_stop_success
            )));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "heldout_fraction {}",
                self.heldout_fraction
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {}", self.noise)));
        }
        if self.features.is_none() && self.distractors >= self.world_spec().n_concepts() {
            return Err(Error::Config(format!(
                "{} distractors need more than {} concepts",
                self.distractors,
                self.world_spec().n_concepts()
            )));
        }
        self.grounding_config().validate()?;
        for p in [&self.features, &self.captions].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "{} is not a readable file",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            n_attributes: self.n_attributes,
            values_per_attribute: self.values_per_attribute,
            feature_dim: self.feature_dim,
            noise: self.noise,
            seed: self.world_seed,
        }
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size, self.max_len)
    }

    pub fn temperature_choice(&self) -> TemperatureChoice {
        if self.learn_temperature {
            TemperatureChoice::Learned {
                tau0: self.tau0,
                hidden: (self.temperature_hidden > 0).then_some(self.temperature_hidden),
            }
        } else {
            TemperatureChoice::Fixed(self.temperature)
        }
    }

    pub fn architecture(&self, feature_dim: usize, language_model: bool) -> Architecture {
        Architecture {
            vocab: self.vocab(),
            feature_dim,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            temperature: self.temperature_choice(),
            baseline: (self.estimator == EstimatorKind::Reinforce
                && self.baseline == BaselineKind::InputDependent)
                .then(|| self.baseline_hidden.clone()),
            language_model,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn grounding_config(&self) -> crate::grounding::GroundingConfig {
        crate::grounding::GroundingConfig {
            kl_weight: self.kl_weight,
            caption_weight: self.caption_weight,
            lm_fraction: self.lm_fraction,
            caption_fraction: self.caption_fraction,
        }
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}
