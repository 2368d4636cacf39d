//! Negative queue and the sentence-level, token-level and intent–slot
//! contrastive losses.
//!
//! Every loss term has the form `-log(s+ / (s+ + Σ s-))` with
//! `s(p, q) = exp(p̂·q̂ / τ)`. It is evaluated as `log(1 + Σ s- / s+)`,
//! which is non-negative by construction.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::encoder::EncOutput;
use crate::error::{Error, Result};
use crate::numcore::{l2_norm, Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityConfig {
    pub temperature: f64,
    /// L2-normalize both vectors before the dot product.
    pub normalize: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            temperature: DEFAULT_TEMPERATURE,
            normalize: true,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Which positive positions enter the token-level loss for anchor token `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPairing {
    /// Every position `j` of the positive utterance.
    #[default]
    AllPositions,
    /// Only the aligned position `j = i`.
    AlignedOnly,
}

fn unit(v: &[f64], cfg: &SimilarityConfig) -> Result<Vec<f64>> {
    if !cfg.normalize {
        return Ok(v.to_vec());
    }
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Err(Error::contract("cannot normalize a zero vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `exp(p̂·q̂ / τ)`.
pub fn sim(p: &[f64], q: &[f64], cfg: &SimilarityConfig) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!(
            "similarity between vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let (p, q) = (unit(p, cfg)?, unit(q, cfg)?);
    let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
    Ok((dot / cfg.temperature).exp())
}

/// FIFO of detached `(h_cls, tokens)` encodings reused as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    cls: VecDeque<Vec<f64>>,
    tokens: VecDeque<Tensor>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            capacity,
            dim,
            cls: VecDeque::with_capacity(capacity),
            tokens: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    /// Appends copies of `enc`, evicting the oldest entry when full.
    pub fn push(&mut self, enc: &EncOutput) -> Result<()> {
        if enc.h_cls.len() != self.dim || enc.tokens.cols() != self.dim {
            return Err(Error::contract(format!(
                "queue holds {}-dim entries, got h_cls {} and tokens {:?}",
                self.dim,
                enc.h_cls.len(),
                enc.tokens.shape()
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.cls.len() == self.capacity {
            self.cls.pop_front();
            self.tokens.pop_front();
        }
        self.cls.push_back(enc.h_cls.clone());
        self.tokens.push_back(enc.tokens.clone());
        Ok(())
    }

    /// Oldest first.
    pub fn cls_entries(&self) -> impl Iterator<Item = &[f64]> {
        self.cls.iter().map(Vec::as_slice)
    }

    /// Oldest first, aligned with [`NegativeQueue::cls_entries`].
    pub fn tok_entries(&self) -> impl Iterator<Item = &Tensor> {
        self.tokens.iter()
    }
}

/// Queue contents stacked into constant matrices for one batch.
#[derive(Clone, Debug)]
pub struct Negatives {
    /// `[K × d]`, normalized when the config asks for it.
    cls: Tensor,
    /// `[Σ n_k × d]`, every token row of every entry.
    tokens: Tensor,
    /// Position of each row of `tokens` inside its own utterance.
    positions: Vec<usize>,
}

impl Negatives {
    /// Snapshot of `queue`; losses computed from it ignore later pushes.
    pub fn from_queue(queue: &NegativeQueue, cfg: &SimilarityConfig) -> Result<Self> {
        let d = queue.dim();
        let mut cls = Vec::with_capacity(queue.len() * d);
        for v in queue.cls_entries() {
            cls.extend(unit(v, cfg)?);
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        for t in queue.tok_entries() {
            for r in 0..t.rows() {
                tokens.extend(unit(t.row(r), cfg)?);
                positions.push(r);
            }
        }
        Ok(Negatives {
            cls: Tensor::new(queue.len(), d, cls)?,
            tokens: Tensor::new(positions.len(), d, tokens)?,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.cls.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.rows() == 0
    }

    /// `[Σ n_k × n]` 0/1 matrix routing each negative token row to its
    /// position, dropping positions at or beyond `n`.
    fn position_selector(&self, n: usize) -> Tensor {
        let mut g = Tensor::zeros(self.positions.len(), n);
        for (r, &j) in self.positions.iter().enumerate() {
            if j < n {
                g.data_mut()[r * n + j] = 1.0;
            }
        }
        g
    }
}

fn prepare(tape: &mut Tape, x: Var, cfg: &SimilarityConfig) -> Result<Var> {
    if cfg.normalize {
        tape.normalize_rows(x)
    } else {
        Ok(x)
    }
}

/// Scaled logits `a · bᵀ / τ` for prepared row sets.
fn logits(tape: &mut Tape, a: Var, b_t: Var, cfg: &SimilarityConfig) -> Result<Var> {
    let z = tape.matmul(a, b_t)?;
    Ok(tape.scale(z, 1.0 / cfg.temperature))
}

/// `exp(a · bᵀ / τ)`.
fn sim_matrix(tape: &mut Tape, a: Var, b_t: Var, cfg: &SimilarityConfig) -> Result<Var> {
    let z = logits(tape, a, b_t, cfg)?;
    Ok(tape.exp(z))
}

/// Elementwise `log(1 + neg · exp(-pos_logits))`.
fn ratio_terms(tape: &mut Tape, pos_logits: Var, neg: Var) -> Result<Var> {
    let [r, c] = tape.value(pos_logits).shape();
    let inv = tape.scale(pos_logits, -1.0);
    let inv = tape.exp(inv);
    let q = tape.mul(neg, inv)?;
    let one = tape.constant(Tensor::filled(r, c, 1.0));
    let q = tape.add(q, one)?;
    Ok(tape.log(q))
}

fn check_width(tape: &Tape, negs: &Negatives, vars: &[Var]) -> Result<()> {
    let d = negs.cls.cols();
    for &v in vars {
        if tape.value(v).cols() != d {
            return Err(Error::contract(format!(
                "representation width {} does not match queue width {d}",
                tape.value(v).cols()
            )));
        }
    }
    Ok(())
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Sentence-level loss between `anchor` and `positive` (`[1 × d]` each).
pub fn loss_li(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negs: &Negatives,
    cfg: &SimilarityConfig,
) -> Result<Var> {
    if negs.is_empty() {
        return Ok(zero(tape));
    }
    check_width(tape, negs, &[anchor, positive])?;
    let a = prepare(tape, anchor, cfg)?;
    let p = prepare(tape, positive, cfg)?;
    let p_t = tape.transpose(p);
    let pos = logits(tape, a, p_t, cfg)?;
    let c_t = tape.constant(negs.cls.transpose());
    let neg = sim_matrix(tape, a, c_t, cfg)?;
    let neg = tape.sum(neg);
    let term = ratio_terms(tape, pos, neg)?;
    Ok(tape.sum(term))
}

/// Token-level loss between `anchor` and `positive` token matrices
/// (`[n × d]` each), summed over anchor tokens and averaged over the
/// positive positions.
pub fn loss_ls(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negs: &Negatives,
    cfg: &SimilarityConfig,
    pairing: SlotPairing,
) -> Result<Var> {
    let n = tape.value(anchor).rows();
    if tape.value(positive).rows() != n {
        return Err(Error::contract(format!(
            "anchor has {n} tokens but positive has {}",
            tape.value(positive).rows()
        )));
    }
    if negs.is_empty() {
        return Ok(zero(tape));
    }
    check_width(tape, negs, &[anchor, positive])?;
    let a = prepare(tape, anchor, cfg)?;
    let p = prepare(tape, positive, cfg)?;
    let p_t = tape.transpose(p);
    let pos = logits(tape, a, p_t, cfg)?;
    let m_t = tape.constant(negs.tokens.transpose());
    let neg = sim_matrix(tape, a, m_t, cfg)?;
    let g = tape.constant(negs.position_selector(n));
    let neg = tape.matmul(neg, g)?;
    let mut terms = ratio_terms(tape, pos, neg)?;
    if pairing == SlotPairing::AlignedOnly {
        let mut eye = Tensor::zeros(n, n);
        for i in 0..n {
            eye.data_mut()[i * n + i] = 1.0;
        }
        let eye = tape.constant(eye);
        terms = tape.mul(terms, eye)?;
    }
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Intent–slot loss pairing the sentence vector `cls` (`[1 × d]`) with
/// the anchor's and the positive's tokens (`[n × d]` each).
pub fn loss_gis(
    tape: &mut Tape,
    cls: Var,
    anchor_tokens: Var,
    positive_tokens: Var,
    negs: &Negatives,
    cfg: &SimilarityConfig,
) -> Result<Var> {
    let n = tape.value(anchor_tokens).rows();
    if tape.value(positive_tokens).rows() != n {
        return Err(Error::contract(format!(
            "anchor has {n} tokens but positive has {}",
            tape.value(positive_tokens).rows()
        )));
    }
    if negs.is_empty() {
        return Ok(zero(tape));
    }
    check_width(tape, negs, &[cls, anchor_tokens, positive_tokens])?;
    let c = prepare(tape, cls, cfg)?;
    let m_t = tape.constant(negs.tokens.transpose());
    let neg = sim_matrix(tape, c, m_t, cfg)?;
    let g = tape.constant(negs.position_selector(n));
    let neg = tape.matmul(neg, g)?;
    let mut parts = Vec::with_capacity(2);
    for tokens in [anchor_tokens, positive_tokens] {
        let t = prepare(tape, tokens, cfg)?;
        let t_t = tape.transpose(t);
        let pos = logits(tape, c, t_t, cfg)?;
        let terms = ratio_terms(tape, pos, neg)?;
        parts.push(tape.sum(terms));
    }
    let total = tape.add(parts[0], parts[1])?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

fn row_var(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::row_vector(v.to_vec()))
}

fn evaluate<F>(queue: &NegativeQueue, cfg: &SimilarityConfig, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Negatives) -> Result<Var>,
{
    cfg.validate()?;
    let negs = Negatives::from_queue(queue, cfg)?;
    let mut tape = Tape::new();
    let out = f(&mut tape, &negs)?;
    tape.value(out).item()
}

/// Value of [`loss_li`] for plain encodings.
pub fn li_value(
    anchor: &EncOutput,
    positive: &EncOutput,
    queue: &NegativeQueue,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    evaluate(queue, cfg, |tape, negs| {
        let a = row_var(tape, &anchor.h_cls);
        let p = row_var(tape, &positive.h_cls);
        loss_li(tape, a, p, negs, cfg)
    })
}

/// Value of [`loss_ls`] for plain encodings.
pub fn ls_value(
    anchor: &EncOutput,
    positive: &EncOutput,
    queue: &NegativeQueue,
    cfg: &SimilarityConfig,
    pairing: SlotPairing,
) -> Result<f64> {
    evaluate(queue, cfg, |tape, negs| {
        let a = tape.constant(anchor.tokens.clone());
        let p = tape.constant(positive.tokens.clone());
        loss_ls(tape, a, p, negs, cfg, pairing)
    })
}

/// Value of [`loss_gis`] for plain encodings.
pub fn gis_value(
    anchor: &EncOutput,
    positive: &EncOutput,
    queue: &NegativeQueue,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    evaluate(queue, cfg, |tape, negs| {
        let c = row_var(tape, &anchor.h_cls);
        let a = tape.constant(anchor.tokens.clone());
        let p = tape.constant(positive.tokens.clone());
        loss_gis(tape, c, a, p, negs, cfg)
    })
}
