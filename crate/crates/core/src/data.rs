//! Synthetic compositional world, caption language, and feature/caption
//! file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agents::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_attributes: usize,
    pub values_per_attribute: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_attributes: 3,
            values_per_attribute: 4,
            feature_dim: 32,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn n_concepts(&self) -> usize {
        self.values_per_attribute.pow(self.n_attributes as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 || self.values_per_attribute == 0 || self.n_concepts() < 2 {
            return Err(Error::Config(format!(
                "world needs at least two concepts, got {}^{}",
                self.values_per_attribute, self.n_attributes
            )));
        }
        if self.feature_dim < self.n_attributes {
            return Err(Error::Config(format!(
                "feature_dim {} below attribute count {}",
                self.feature_dim, self.n_attributes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("instance noise {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Concept {
    pub id: usize,
    pub attributes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageInstance {
    pub concept: usize,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    pub concept: usize,
    /// Attribute words in attribute order, then EOS.
    pub tokens: Vec<usize>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Concepts are attribute tuples; the base vector of a concept is the
/// normalized sum of its attribute-value embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    value_embeddings: Vec<Vec<Vec<f64>>>,
    base: Vec<Vec<f64>>,
}

impl World {
    pub fn build(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Streams::new(spec.seed).stream(Purpose::World, 0, 0);
        let value_embeddings: Vec<Vec<Vec<f64>>> = (0..spec.n_attributes)
            .map(|_| {
                (0..spec.values_per_attribute)
                    .map(|_| gaussian(&mut rng, spec.feature_dim))
                    .collect()
            })
            .collect();
        let mut world = Self {
            spec,
            value_embeddings,
            base: Vec::new(),
        };
        world.base = (0..world.n_concepts())
            .map(|id| {
                let attrs = world.concept(id).attributes;
                let mut v = vec![0.0; world.spec.feature_dim];
                for (a, &val) in attrs.iter().enumerate() {
                    for (x, e) in v.iter_mut().zip(&world.value_embeddings[a][val]) {
                        *x += e;
                    }
                }
                normalize(&mut v);
                v
            })
            .collect();
        Ok(world)
    }

    pub fn n_concepts(&self) -> usize {
        self.spec.n_concepts()
    }

    /// Mixed-radix decoding; attribute 0 is the most significant digit.
    pub fn concept(&self, id: usize) -> Concept {
        let va = self.spec.values_per_attribute;
        let mut rest = id;
        let mut attributes = vec![0; self.spec.n_attributes];
        for slot in attributes.iter_mut().rev() {
            *slot = rest % va;
            rest /= va;
        }
        Concept { id, attributes }
    }

    pub fn concept_id(&self, attributes: &[usize]) -> Option<usize> {
        let va = self.spec.values_per_attribute;
        if attributes.len() != self.spec.n_attributes || attributes.iter().any(|&a| a >= va) {
            return None;
        }
        Some(attributes.iter().fold(0, |acc, &a| acc * va + a))
    }

    pub fn base_vector(&self, concept: usize) -> &[f64] {
        &self.base[concept]
    }

    /// Base vector plus isotropic Gaussian noise, renormalized.
    pub fn sample_instance<R: Rng>(&self, concept: usize, rng: &mut R) -> ImageInstance {
        let mut features = self.base[concept].clone();
        if self.spec.noise > 0.0 {
            for x in features.iter_mut() {
                *x += self.spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
            normalize(&mut features);
        }
        ImageInstance { concept, features }
    }

    /// Words needed by the caption language.
    pub fn caption_words(&self) -> usize {
        self.spec.n_attributes * self.spec.values_per_attribute
    }

    /// Word `a * V_a + v` for attribute `a` taking value `v`, then EOS.
    pub fn caption_for(&self, concept: usize, vocab: &Vocabulary) -> Result<CaptionRecord> {
        if vocab.size < self.caption_words() {
            return Err(Error::Config(format!(
                "caption language needs {} words, vocabulary has {}",
                self.caption_words(),
                vocab.size
            )));
        }
        let va = self.spec.values_per_attribute;
        let mut tokens: Vec<usize> = self
            .concept(concept)
            .attributes
            .iter()
            .enumerate()
            .map(|(a, &v)| a * va + v)
            .collect();
        tokens.push(vocab.eos());
        Ok(CaptionRecord { concept, tokens })
    }

    /// Inverse of [`World::caption_for`].
    pub fn decode_caption(&self, tokens: &[usize], vocab: &Vocabulary) -> Option<usize> {
        let va = self.spec.values_per_attribute;
        let a = self.spec.n_attributes;
        if tokens.len() != a + 1 || tokens[a] != vocab.eos() {
            return None;
        }
        let mut attrs = Vec::with_capacity(a);
        for (i, &w) in tokens[..a].iter().enumerate() {
            if w / va != i || w >= a * va {
                return None;
            }
            attrs.push(w % va);
        }
        self.concept_id(&attrs)
    }
}

/// A finite set of images grouped by concept label.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub images: Vec<ImageInstance>,
    by_concept: Vec<Vec<usize>>,
}

impl Pool {
    pub fn new(images: Vec<ImageInstance>) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Config("empty image pool".into()));
        };
        let dim = first.features.len();
        if images.iter().any(|i| i.features.len() != dim) {
            return Err(Error::Config("image pool with mixed feature dims".into()));
        }
        let n = images.iter().map(|i| i.concept).max().unwrap_or(0) + 1;
        let mut by_concept = vec![Vec::new(); n];
        for (i, img) in images.iter().enumerate() {
            by_concept[img.concept].push(i);
        }
        Ok(Self { images, by_concept })
    }

    /// `per_concept` fresh instances of every concept from `rng`.
    pub fn generate<R: Rng>(world: &World, per_concept: usize, rng: &mut R) -> Result<Self> {
        let images = (0..world.n_concepts())
            .flat_map(|c| (0..per_concept).map(move |_| c))
            .map(|c| world.sample_instance(c, rng))
            .collect();
        Self::new(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images[0].features.len()
    }

    /// Concept labels that have at least one image.
    pub fn concepts(&self) -> Vec<usize> {
        (0..self.by_concept.len())
            .filter(|&c| !self.by_concept[c].is_empty())
            .collect()
    }

    pub fn of_concept(&self, concept: usize) -> &[usize] {
        self.by_concept.get(concept).map_or(&[], Vec::as_slice)
    }

    /// Splits image indices into parts with the given fractions, after a
    /// shuffle driven by `rng`. The last part takes the remainder.
    pub fn split_indices<R: Rng>(&self, fractions: &[f64], rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (i, f) in fractions.iter().enumerate() {
            let end = if i + 1 == fractions.len() {
                idx.len()
            } else {
                (start + (f * self.len() as f64).round() as usize).min(idx.len())
            };
            out.push(idx[start..end].to_vec());
            start = end;
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.images[i].clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: usize,
    pub features: Vec<f64>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn header_field(path: &Path, field: Option<&str>, key: &str) -> Result<usize> {
    field
        .and_then(|f| f.strip_prefix(key))
        .and_then(|f| f.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            parse_err(
                path,
                1,
                format!("header must read `dim=<D> count=<N>`, missing {key}"),
            )
        })
}

/// Reads a feature file: header `dim=<D> count=<N>`, then `N` lines of
/// `<id> v_1 .. v_D`. Vectors are renormalized to unit length.
pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(path, 1, "empty feature file"));
    };
    let mut fields = header.split_whitespace();
    let dim = header_field(path, fields.next(), "dim")?;
    let count = header_field(path, fields.next(), "count")?;
    if dim == 0 {
        return Err(parse_err(path, 1, "dim must be positive"));
    }
    let mut records = Vec::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(|| parse_err(path, lineno, "expected an integer id"))?;
        let mut features = Vec::with_capacity(dim);
        for p in parts {
            let v: f64 = p
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad number `{p}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, "non-finite value"));
            }
            features.push(v);
        }
        if features.len() != dim {
            return Err(parse_err(
                path,
                lineno,
                format!("{} values, header says dim={dim}", features.len()),
            ));
        }
        if features.iter().all(|&x| x == 0.0) {
            return Err(parse_err(path, lineno, "zero vector cannot be normalized"));
        }
        normalize(&mut features);
        records.push(FeatureRecord { id, features });
    }
    if records.len() != count {
        return Err(parse_err(
            path,
            1,
            format!("header says count={count}, found {} rows", records.len()),
        ));
    }
    if records.is_empty() {
        return Err(parse_err(path, 1, "no feature rows"));
    }
    Ok(records)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut out = format!("dim={dim} count={}\n", records.len());
    for r in records {
        write!(out, "{}", r.id).expect("string write");
        for v in &r.features {
            write!(out, " {v}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Image pool from loaded features: the id labels the concept.
pub fn pool_from_features(records: &[FeatureRecord]) -> Result<Pool> {
    Pool::new(
        records
            .iter()
            .map(|r| ImageInstance {
                concept: r.id,
                features: r.features.clone(),
            })
            .collect(),
    )
}

/// Reads a caption corpus: each line is `<concept_id> w_1 .. w_n` with word
/// ids; EOS is implicit and appended to every caption.
pub fn load_captions(path: &Path, vocab: &Vocabulary) -> Result<Vec<CaptionRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut parts = line.split_whitespace();
        let Some(first) = parts.next() else { continue };
        let concept = first
            .parse::<usize>()
            .map_err(|_| parse_err(path, lineno, "expected an integer concept id"))?;
        let mut tokens = Vec::new();
        for p in parts {
            let w: usize = p
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad word id `{p}`")))?;
            if w >= vocab.size {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("word {w} outside vocabulary of {}", vocab.size),
                ));
            }
            tokens.push(w);
        }
        tokens.push(vocab.eos());
        out.push(CaptionRecord { concept, tokens });
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "empty caption file"));
    }
    Ok(out)
}

pub fn write_captions(path: &Path, captions: &[CaptionRecord], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for c in captions {
        write!(out, "{}", c.concept).expect("string write");
        for &w in c.tokens.iter().filter(|&&w| w != vocab.eos()) {
            write!(out, " {w}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
