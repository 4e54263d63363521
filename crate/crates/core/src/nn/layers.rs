use rand::Rng;

use super::params::{glorot, Graph, ParamId, ParamStore};
use crate::autograd::{Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl AffineMap {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot(rng, vec![input_dim, output_dim], input_dim, output_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![output_dim]));
        Self {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Rows of symbol embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(
            format!("{name}.table"),
            glorot(rng, vec![vocab_size, dim], vocab_size, dim),
        );
        Self {
            table,
            vocab_size,
            dim,
        }
    }

    /// Row lookup.
    pub fn hard(&self, g: &mut Graph, token: usize) -> Result<Var> {
        if token >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                size: self.vocab_size,
            });
        }
        let t = g.param(self.table);
        g.row(t, token)
    }

    /// Probability-weighted combination of rows. An exact one-hot gives
    /// the same bits as [`EmbeddingTable::hard`].
    pub fn soft(&self, g: &mut Graph, weights: Var) -> Result<Var> {
        if g.shape(weights) != [self.vocab_size] {
            return shape_err(
                "embed",
                format!(
                    "weights {:?} for {} rows",
                    g.shape(weights),
                    self.vocab_size
                ),
            );
        }
        let t = g.param(self.table);
        g.matmul(weights, t)
    }
}

/// Single-layer LSTM cell. Gate columns are ordered input, forget, output,
/// candidate.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_weights: ParamId,
    pub recurrent_weights: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let h = hidden_size;
        let input_weights = store.add(
            format!("{name}.w_input"),
            glorot(rng, vec![input_size, 4 * h], input_size, h),
        );
        let recurrent_weights = store.add(
            format!("{name}.w_recurrent"),
            glorot(rng, vec![h, 4 * h], h, h),
        );
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.add(format!("{name}.bias"), Tensor::vector(b));
        Self {
            input_weights,
            recurrent_weights,
            bias,
            input_size,
            hidden_size,
        }
    }

    pub fn step(&self, g: &mut Graph, input: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.hidden_size;
        if g.shape(input) != [self.input_size] || g.shape(h_prev) != [h] || g.shape(c_prev) != [h] {
            return shape_err(
                "lstm_step",
                format!(
                    "input {:?}, h {:?}, c {:?} for cell ({}, {h})",
                    g.shape(input),
                    g.shape(h_prev),
                    g.shape(c_prev),
                    self.input_size
                ),
            );
        }
        let wx = g.param(self.input_weights);
        let wh = g.param(self.recurrent_weights);
        let b = g.param(self.bias);
        let xin = g.affine(input, wx, b)?;
        let rec = g.matmul(h_prev, wh)?;
        let gates = g.add(xin, rec)?;

        let i_pre = g.slice(gates, 0, h)?;
        let f_pre = g.slice(gates, h, h)?;
        let o_pre = g.slice(gates, 2 * h, h)?;
        let c_pre = g.slice(gates, 3 * h, h)?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let o = g.sigmoid(o_pre)?;
        let cand = g.tanh(c_pre)?;

        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let squashed = g.tanh(c)?;
        let h_new = g.mul(o, squashed)?;
        Ok((h_new, c))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.input_weights, self.recurrent_weights, self.bias]
    }
}

/// Affine layers with tanh between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<AffineMap>,
}

impl Mlp {
    /// `sizes` lists every width, input first and output last.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| AffineMap::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(AffineMap::param_ids).collect()
    }
}
