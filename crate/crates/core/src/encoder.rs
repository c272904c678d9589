//! The shared encoder and the per-source expert classifiers.
//!
//! Two encoders are provided: a one-hidden-layer rectifier MLP over dense
//! feature vectors, and a windowed token encoder that concatenates the
//! embeddings of each token's neighbourhood before the same kind of hidden
//! layer. Both expose explicit forward caches and analytic backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, PAD_ID};
use crate::error::{Error, Result};
use crate::numerics::{axpy, softmax_unchecked, DenseMatrix};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    /// `hidden × input_dim`
    pub w1: DenseMatrix,
    /// `1 × hidden`
    pub b1: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEncoder {
    /// `vocab × emb_dim`; row [`PAD_ID`] embeds out-of-sentence positions.
    pub embedding: DenseMatrix,
    pub window_radius: usize,
    /// `hidden × (2·radius + 1)·emb_dim`
    pub w1: DenseMatrix,
    /// `1 × hidden`
    pub b1: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Mlp(MlpEncoder),
    Token(TokenEncoder),
}

/// Intermediates recorded by [`Encoder::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct EncoderCache {
    /// Layer input, one row per unit (example or token).
    inputs: Option<DenseMatrix>,
    /// Token ids of each unit's window (token encoder only).
    windows: Vec<Vec<usize>>,
    /// Pre-activation sign mask of the hidden layer.
    active: Vec<bool>,
}

impl EncoderCache {
    pub fn units(&self) -> usize {
        self.inputs.as_ref().map_or(0, DenseMatrix::rows)
    }
}

fn hidden_layer(w1: &DenseMatrix, b1: &DenseMatrix, x: &DenseMatrix) -> (DenseMatrix, Vec<bool>) {
    let hidden = w1.rows();
    let mut h = DenseMatrix::zeros(x.rows(), hidden);
    let mut active = vec![false; x.rows() * hidden];
    for (i, row) in x.iter_rows().enumerate() {
        for j in 0..hidden {
            let z = crate::numerics::dot(w1.row(j), row) + b1.as_slice()[j];
            // rectifier, subgradient 0 at 0
            if z > 0.0 {
                h[(i, j)] = z;
                active[i * hidden + j] = true;
            }
        }
    }
    (h, active)
}

/// Gradients of the hidden layer; returns `(dW1, db1, dX)`.
fn hidden_layer_backward(
    w1: &DenseMatrix,
    x: &DenseMatrix,
    active: &[bool],
    dh: &DenseMatrix,
    want_dx: bool,
) -> (DenseMatrix, DenseMatrix, Option<DenseMatrix>) {
    let hidden = w1.rows();
    let mut dw1 = DenseMatrix::zeros(w1.rows(), w1.cols());
    let mut db1 = DenseMatrix::zeros(1, hidden);
    let mut dx = want_dx.then(|| DenseMatrix::zeros(x.rows(), x.cols()));
    for i in 0..x.rows() {
        for j in 0..hidden {
            if !active[i * hidden + j] {
                continue;
            }
            let g = dh[(i, j)];
            if g == 0.0 {
                continue;
            }
            axpy(g, x.row(i), dw1.row_mut(j));
            db1.as_mut_slice()[j] += g;
            if let Some(dx) = dx.as_mut() {
                axpy(g, w1.row(j), dx.row_mut(i));
            }
        }
    }
    (dw1, db1, dx)
}

impl MlpEncoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(Self {
            w1: DenseMatrix::random_normal(hidden, input_dim, 1.0 / (input_dim as f64).sqrt(), rng),
            b1: DenseMatrix::zeros(1, hidden),
        })
    }
}

impl TokenEncoder {
    pub fn new<R: Rng + ?Sized>(
        vocab: usize,
        emb_dim: usize,
        window_radius: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab == 0 || emb_dim == 0 || hidden == 0 {
            return Err(Error::invalid("token encoder dimensions must be positive"));
        }
        let fan_in = (2 * window_radius + 1) * emb_dim;
        Ok(Self {
            embedding: DenseMatrix::random_normal(vocab, emb_dim, 1.0 / (emb_dim as f64).sqrt(), rng),
            window_radius,
            w1: DenseMatrix::random_normal(hidden, fan_in, 1.0 / (fan_in as f64).sqrt(), rng),
            b1: DenseMatrix::zeros(1, hidden),
        })
    }

    fn window(&self, tokens: &[usize], pos: usize) -> Vec<usize> {
        let r = self.window_radius as isize;
        (-r..=r)
            .map(|o| {
                let p = pos as isize + o;
                if p < 0 || p as usize >= tokens.len() {
                    PAD_ID
                } else {
                    tokens[p as usize]
                }
            })
            .collect()
    }
}

impl Encoder {
    pub fn hidden_dim(&self) -> usize {
        match self {
            Encoder::Mlp(m) => m.w1.rows(),
            Encoder::Token(t) => t.w1.rows(),
        }
    }

    /// Encodes a batch. Vector examples give one row each; sequences give one
    /// row per token, in example order.
    pub fn forward(&self, batch: &[&Example]) -> Result<(DenseMatrix, EncoderCache)> {
        match self {
            Encoder::Mlp(m) => {
                let d = m.w1.cols();
                let mut x = Vec::with_capacity(batch.len() * d);
                for (i, ex) in batch.iter().enumerate() {
                    match ex {
                        Example::Vector { features, .. } if features.len() == d => x.extend_from_slice(features),
                        Example::Vector { features, .. } => {
                            return Err(Error::invalid(format!(
                                "example {i} has {} features, encoder expects {d}",
                                features.len()
                            )))
                        }
                        Example::Sequence { .. } => {
                            return Err(Error::invalid("MLP encoder cannot encode token sequences"))
                        }
                    }
                }
                let x = DenseMatrix::new(batch.len(), d, x)?;
                let (h, active) = hidden_layer(&m.w1, &m.b1, &x);
                Ok((
                    h,
                    EncoderCache {
                        inputs: Some(x),
                        windows: Vec::new(),
                        active,
                    },
                ))
            }
            Encoder::Token(t) => {
                let (vocab, emb) = t.embedding.shape();
                let width = 2 * t.window_radius + 1;
                let mut windows = Vec::new();
                for ex in batch {
                    let Example::Sequence { tokens, .. } = ex else {
                        return Err(Error::invalid("token encoder cannot encode dense vectors"));
                    };
                    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= vocab) {
                        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
                    }
                    windows.extend((0..tokens.len()).map(|p| t.window(tokens, p)));
                }
                let mut x = DenseMatrix::zeros(windows.len(), width * emb);
                for (i, w) in windows.iter().enumerate() {
                    let row = x.row_mut(i);
                    for (slot, &tok) in w.iter().enumerate() {
                        row[slot * emb..(slot + 1) * emb].copy_from_slice(t.embedding.row(tok));
                    }
                }
                let (h, active) = hidden_layer(&t.w1, &t.b1, &x);
                Ok((
                    h,
                    EncoderCache {
                        inputs: Some(x),
                        windows,
                        active,
                    },
                ))
            }
        }
    }

    /// Encodes a single example.
    pub fn encode(&self, example: &Example) -> Result<DenseMatrix> {
        self.forward(&[example]).map(|(h, _)| h)
    }

    /// Parameter gradients given the upstream gradient on the encodings.
    pub fn backward(&self, cache: &EncoderCache, dh: &DenseMatrix) -> Result<Encoder> {
        let Some(x) = cache.inputs.as_ref() else {
            return Err(Error::contract("encoder backward called without a forward pass"));
        };
        if dh.rows() != x.rows() || dh.cols() != self.hidden_dim() {
            return Err(Error::contract(format!(
                "upstream gradient {}x{} does not match cached forward {}x{}",
                dh.rows(),
                dh.cols(),
                x.rows(),
                self.hidden_dim()
            )));
        }
        match self {
            Encoder::Mlp(m) => {
                let (w1, b1, _) = hidden_layer_backward(&m.w1, x, &cache.active, dh, false);
                Ok(Encoder::Mlp(MlpEncoder { w1, b1 }))
            }
            Encoder::Token(t) => {
                let (w1, b1, dx) = hidden_layer_backward(&t.w1, x, &cache.active, dh, true);
                let dx = dx.expect("requested");
                let emb = t.embedding.cols();
                let mut embedding = DenseMatrix::zeros(t.embedding.rows(), emb);
                for (i, w) in cache.windows.iter().enumerate() {
                    let row = dx.row(i);
                    for (slot, &tok) in w.iter().enumerate() {
                        axpy(1.0, &row[slot * emb..(slot + 1) * emb], embedding.row_mut(tok));
                    }
                }
                Ok(Encoder::Token(TokenEncoder {
                    embedding,
                    window_radius: t.window_radius,
                    w1,
                    b1,
                }))
            }
        }
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<&DenseMatrix> {
        match self {
            Encoder::Mlp(m) => vec![&m.w1, &m.b1],
            Encoder::Token(t) => vec![&t.embedding, &t.w1, &t.b1],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            Encoder::Mlp(m) => vec![&mut m.w1, &mut m.b1],
            Encoder::Token(t) => vec![&mut t.embedding, &mut t.w1, &mut t.b1],
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        match self {
            Encoder::Mlp(m) => Encoder::Mlp(MlpEncoder {
                w1: z(&m.w1),
                b1: z(&m.b1),
            }),
            Encoder::Token(t) => Encoder::Token(TokenEncoder {
                embedding: z(&t.embedding),
                window_radius: t.window_radius,
                w1: z(&t.w1),
                b1: z(&t.b1),
            }),
        }
    }
}

/// Linear softmax classifier `F^S` over encodings; one per source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// `classes × hidden`
    pub w: DenseMatrix,
    /// `1 × classes`, absent unless enabled in the model config.
    pub bias: Option<DenseMatrix>,
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(classes: usize, hidden: usize, with_bias: bool, rng: &mut R) -> Result<Self> {
        if classes < 2 || hidden == 0 {
            return Err(Error::invalid("expert needs at least two classes and a positive width"));
        }
        Ok(Self {
            w: DenseMatrix::random_normal(classes, hidden, 1.0 / (hidden as f64).sqrt(), rng),
            bias: with_bias.then(|| DenseMatrix::zeros(1, classes)),
        })
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.w.mul_vec(h)?;
        if let Some(b) = &self.bias {
            axpy(1.0, b.as_slice(), &mut z);
        }
        Ok(z)
    }

    /// Accumulates the gradient of logits `dz` at encoding `h` into `grad`
    /// and returns `∂/∂h`.
    pub(crate) fn backward_into(&self, h: &[f64], dz: &[f64], grad: &mut Expert) -> Vec<f64> {
        grad.w.add_outer(1.0, dz, h);
        if let Some(b) = grad.bias.as_mut() {
            axpy(1.0, dz, b.as_mut_slice());
        }
        self.w.t_mul_vec(dz).expect("shape checked by caller")
    }
}

impl Parameters for Expert {
    fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut v = vec![&self.w];
        v.extend(self.bias.as_ref());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut v = vec![&mut self.w];
        v.extend(self.bias.as_mut());
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: DenseMatrix::zeros(self.w.rows(), self.w.cols()),
            bias: self.bias.as_ref().map(|b| DenseMatrix::zeros(1, b.cols())),
        }
    }
}

/// `softmax(W h [+ b])`
pub fn expert_posterior(h: &[f64], expert: &Expert) -> Result<Vec<f64>> {
    Ok(softmax_unchecked(&expert.logits(h)?))
}
