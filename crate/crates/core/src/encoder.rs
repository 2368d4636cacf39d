//! Joint intent/slot model: word embeddings, a single-layer bidirectional
//! LSTM over `[CLS] x_1 .. x_n [SEP]`, and two softmax classifiers.
//!
//! The sentence representation is the BiLSTM output at the `[CLS]`
//! position; token representations are the outputs at the word
//! positions. Each output is `[forward hidden ; backward hidden]`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, LabelSets, SluExample, Vocab};
use crate::error::{Error, Result};
use crate::numcore::{softmax, Tape, Tensor, Var};
use crate::seeding::stream_rng;

const CHECKPOINT_FORMAT: &str = "glclef-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_intents: usize,
    pub num_slot_tags: usize,
}

impl ModelDims {
    /// Width of every token and sentence representation.
    pub fn rep_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Weights of one LSTM direction. Gate blocks are ordered input, forget,
/// cell, output along the `4·hidden` axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmParams {
    /// `[embed_dim × 4·hidden]`
    pub w_input: Tensor,
    /// `[hidden × 4·hidden]`
    pub w_hidden: Tensor,
    /// `[1 × 4·hidden]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderParams {
    /// `[vocab × embed_dim]`
    pub embedding: Tensor,
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// `[num_intents × rep_dim]`
    pub intent_w: Tensor,
    /// `[1 × num_intents]`
    pub intent_b: Tensor,
    /// `[num_slot_tags × rep_dim]`
    pub slot_w: Tensor,
    /// `[1 × num_slot_tags]`
    pub slot_b: Tensor,
}

/// Sentence and token representations of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncOutput {
    pub h_cls: Vec<f64>,
    /// `[n × rep_dim]`, one row per word.
    pub tokens: Tensor,
}

impl EncOutput {
    pub fn dim(&self) -> usize {
        self.h_cls.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }
}

/// Tape handles for an encoded utterance.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `[1 × rep_dim]`
    pub cls: Var,
    /// `[n × rep_dim]`
    pub tokens: Var,
    /// `[1 × rep_dim]`; computed but not consumed by any loss.
    pub sep: Var,
}

#[derive(Clone, Copy, Debug)]
struct BoundLstm {
    w_input: Var,
    w_hidden: Var,
    bias: Var,
}

/// [`EncoderParams`] recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    embedding: Var,
    forward: BoundLstm,
    backward: BoundLstm,
    intent_w_t: Var,
    intent_b: Var,
    slot_w_t: Var,
    slot_b: Var,
    hidden_dim: usize,
    leaves: Vec<Var>,
}

impl BoundParams {
    /// Wraps eleven existing nodes, given in [`EncoderParams::tensors`]
    /// order, as model parameters.
    pub fn from_leaves(tape: &mut Tape, leaves: &[Var]) -> Result<Self> {
        if leaves.len() != 11 {
            return Err(Error::contract(format!(
                "expected 11 parameter nodes, got {}",
                leaves.len()
            )));
        }
        let v = leaves;
        let hidden_dim = tape.value(v[2]).rows();
        let intent_w_t = tape.transpose(v[7]);
        let slot_w_t = tape.transpose(v[9]);
        Ok(BoundParams {
            embedding: v[0],
            forward: BoundLstm {
                w_input: v[1],
                w_hidden: v[2],
                bias: v[3],
            },
            backward: BoundLstm {
                w_input: v[4],
                w_hidden: v[5],
                bias: v[6],
            },
            intent_w_t,
            intent_b: v[8],
            slot_w_t,
            slot_b: v[10],
            hidden_dim,
            leaves: v.to_vec(),
        })
    }

    /// Leaves in [`EncoderParams::tensors`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(rows, cols, data).expect("consistent shape")
}

impl LstmParams {
    fn init(input: usize, hidden: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut bias = uniform(1, 4 * hidden, bound, rng);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams {
            w_input: uniform(input, 4 * hidden, bound, rng),
            w_hidden: uniform(hidden, 4 * hidden, bound, rng),
            bias,
        }
    }
}

impl EncoderParams {
    /// Uniform in `[-1/√hidden, 1/√hidden]`, except the forget-gate biases,
    /// which start at 1.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let ModelDims {
            vocab_size,
            embed_dim,
            hidden_dim,
            num_intents,
            num_slot_tags,
        } = dims;
        if [
            vocab_size,
            embed_dim,
            hidden_dim,
            num_intents,
            num_slot_tags,
        ]
        .contains(&0)
        {
            return Err(Error::contract(format!(
                "model dimensions must be positive: {dims:?}"
            )));
        }
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut rng = stream_rng(seed, 0);
        let d = dims.rep_dim();
        Ok(EncoderParams {
            embedding: uniform(vocab_size, embed_dim, bound, &mut rng),
            forward: LstmParams::init(embed_dim, hidden_dim, bound, &mut rng),
            backward: LstmParams::init(embed_dim, hidden_dim, bound, &mut rng),
            intent_w: uniform(num_intents, d, bound, &mut rng),
            intent_b: uniform(1, num_intents, bound, &mut rng),
            slot_w: uniform(num_slot_tags, d, bound, &mut rng),
            slot_b: uniform(1, num_slot_tags, bound, &mut rng),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.embedding.rows(),
            embed_dim: self.embedding.cols(),
            hidden_dim: self.forward.w_hidden.rows(),
            num_intents: self.intent_w.rows(),
            num_slot_tags: self.slot_w.rows(),
        }
    }

    /// Checks every shape against [`EncoderParams::dims`] and that all
    /// values are finite.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let (e, h, d) = (dims.embed_dim, dims.hidden_dim, dims.rep_dim());
        let expect = [
            ("forward.w_input", &self.forward.w_input, [e, 4 * h]),
            ("forward.w_hidden", &self.forward.w_hidden, [h, 4 * h]),
            ("forward.bias", &self.forward.bias, [1, 4 * h]),
            ("backward.w_input", &self.backward.w_input, [e, 4 * h]),
            ("backward.w_hidden", &self.backward.w_hidden, [h, 4 * h]),
            ("backward.bias", &self.backward.bias, [1, 4 * h]),
            ("intent_w", &self.intent_w, [dims.num_intents, d]),
            ("intent_b", &self.intent_b, [1, dims.num_intents]),
            ("slot_w", &self.slot_w, [dims.num_slot_tags, d]),
            ("slot_b", &self.slot_b, [1, dims.num_slot_tags]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::dim(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if let Some((name, _)) = self.tensors().into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::contract(format!("{name} holds non-finite values")));
        }
        Ok(())
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("embedding", &self.embedding),
            ("forward.w_input", &self.forward.w_input),
            ("forward.w_hidden", &self.forward.w_hidden),
            ("forward.bias", &self.forward.bias),
            ("backward.w_input", &self.backward.w_input),
            ("backward.w_hidden", &self.backward.w_hidden),
            ("backward.bias", &self.backward.bias),
            ("intent_w", &self.intent_w),
            ("intent_b", &self.intent_b),
            ("slot_w", &self.slot_w),
            ("slot_b", &self.slot_b),
        ]
    }

    /// Mutable access in [`EncoderParams::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embedding,
            &mut self.forward.w_input,
            &mut self.forward.w_hidden,
            &mut self.forward.bias,
            &mut self.backward.w_input,
            &mut self.backward.w_hidden,
            &mut self.backward.bias,
            &mut self.intent_w,
            &mut self.intent_b,
            &mut self.slot_w,
            &mut self.slot_b,
        ]
    }

    /// Records the parameters on `tape`; `requires_grad` controls whether
    /// they receive gradients.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let leaves: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams::from_leaves(tape, &leaves).expect("eleven parameter tensors")
    }

    /// Value-level encoding (no gradients).
    pub fn encode(&self, ids: &[usize]) -> Result<EncOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = encode_on_tape(&mut tape, &bound, ids, None)?;
        Ok(EncOutput {
            h_cls: tape.value(enc.cls).data().to_vec(),
            tokens: tape.value(enc.tokens).clone(),
        })
    }

    /// `softmax(W^I h_cls + b^I)`.
    pub fn intent_distribution(&self, h_cls: &[f64]) -> Result<Vec<f64>> {
        let d = self.intent_w.cols();
        if h_cls.len() != d {
            return Err(Error::dim(format!(
                "sentence vector has {} entries, classifier expects {d}",
                h_cls.len()
            )));
        }
        let logits: Vec<f64> = (0..self.intent_w.rows())
            .map(|k| {
                self.intent_b.data()[k]
                    + self
                        .intent_w
                        .row(k)
                        .iter()
                        .zip(h_cls)
                        .map(|(w, h)| w * h)
                        .sum::<f64>()
            })
            .collect();
        Ok(softmax(&logits))
    }

    /// `softmax(W^s h_t + b^s)` for every token row.
    pub fn slot_distributions(&self, tokens: &Tensor) -> Result<Tensor> {
        let logits = tokens.matmul(&self.slot_w.transpose())?;
        let n_s = self.slot_w.rows();
        let mut data = Vec::with_capacity(logits.len());
        for r in 0..logits.rows() {
            let row: Vec<f64> = logits
                .row(r)
                .iter()
                .zip(self.slot_b.data())
                .map(|(l, b)| l + b)
                .collect();
            data.extend(softmax(&row));
        }
        Tensor::new(logits.rows(), n_s, data)
    }
}

/// Runs one LSTM direction over the rows of `inputs`, returning hidden
/// states in position order.
fn run_lstm(
    tape: &mut Tape,
    lstm: &BoundLstm,
    inputs: Var,
    hidden: usize,
    reverse: bool,
) -> Result<Var> {
    let steps = tape.value(inputs).rows();
    let proj = tape.matmul(inputs, lstm.w_input)?;
    let proj = tape.add(proj, lstm.bias)?;
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outputs = vec![None; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let mut gates = tape.slice_rows(proj, t, 1)?;
        if let Some(prev) = h {
            let rec = tape.matmul(prev, lstm.w_hidden)?;
            gates = tape.add(gates, rec)?;
        }
        let act = tape.sigmoid(gates);
        let input_gate = tape.slice_cols(act, 0, hidden)?;
        let output_gate = tape.slice_cols(act, 3 * hidden, hidden)?;
        let cell_in = tape.slice_cols(gates, 2 * hidden, hidden)?;
        let cell_in = tape.tanh(cell_in);
        let mut cell = tape.mul(input_gate, cell_in)?;
        if let Some(prev) = c {
            let forget_gate = tape.slice_cols(act, hidden, hidden)?;
            let kept = tape.mul(forget_gate, prev)?;
            cell = tape.add(kept, cell)?;
        }
        let squashed = tape.tanh(cell);
        let out = tape.mul(output_gate, squashed)?;
        outputs[t] = Some(out);
        h = Some(out);
        c = Some(cell);
    }
    let outputs: Vec<Var> = outputs
        .into_iter()
        .map(|o| o.expect("every step ran"))
        .collect();
    tape.concat_rows(&outputs)
}

/// Encodes `[CLS] x_1 .. x_n [SEP]` ids on `tape`.
///
/// With `dropout = Some((rate, rng))`, embeddings are masked with inverted
/// dropout drawn from `rng`.
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    ids: &[usize],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<EncodedVars> {
    if ids.len() < 3 {
        return Err(Error::contract(format!(
            "sequence of length {} needs [CLS], at least one word and [SEP]",
            ids.len()
        )));
    }
    let mut emb = tape.gather_rows(params.embedding, ids)?;
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let [rows, cols] = tape.value(emb).shape();
            let keep = 1.0 - rate;
            let mask: Vec<f64> = (0..rows * cols)
                .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = tape.constant(Tensor::new(rows, cols, mask)?);
            emb = tape.mul(emb, mask)?;
        }
    }
    let h = params.hidden_dim;
    let fwd = run_lstm(tape, &params.forward, emb, h, false)?;
    let bwd = run_lstm(tape, &params.backward, emb, h, true)?;
    let all = tape.concat_cols(&[fwd, bwd])?;
    let n = ids.len() - 2;
    Ok(EncodedVars {
        cls: tape.slice_rows(all, 0, 1)?,
        tokens: tape.slice_rows(all, 1, n)?,
        sep: tape.slice_rows(all, n + 1, 1)?,
    })
}

/// `[1 × num_intents]` intent distribution.
pub fn intent_distribution_on_tape(tape: &mut Tape, params: &BoundParams, cls: Var) -> Result<Var> {
    let logits = tape.matmul(cls, params.intent_w_t)?;
    let logits = tape.add(logits, params.intent_b)?;
    tape.softmax_rows(logits)
}

/// `[n × num_slot_tags]` per-token slot distributions.
pub fn slot_distributions_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    tokens: Var,
) -> Result<Var> {
    let logits = tape.matmul(tokens, params.slot_w_t)?;
    let logits = tape.add(logits, params.slot_b)?;
    tape.softmax_rows(logits)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub intent: usize,
    pub tags: Vec<usize>,
}

/// Parameters together with the vocabulary and label sets they were
/// trained against. Serializes to the JSON checkpoint format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct SluModel {
    pub vocab: Vocab,
    pub labels: LabelSets,
    pub params: EncoderParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    dims: ModelDims,
    vocab: Vocab,
    labels: LabelSets,
    params: EncoderParams,
}

impl TryFrom<Checkpoint> for SluModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::contract(format!(
                "unsupported checkpoint format {:?}",
                c.format
            )));
        }
        if c.params.dims() != c.dims {
            return Err(Error::contract(format!(
                "checkpoint dims {:?} disagree with parameter shapes {:?}",
                c.dims,
                c.params.dims()
            )));
        }
        SluModel::new(c.vocab, c.labels, c.params)
    }
}

impl From<SluModel> for Checkpoint {
    fn from(m: SluModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            dims: m.params.dims(),
            vocab: m.vocab,
            labels: m.labels,
            params: m.params,
        }
    }
}

impl SluModel {
    /// Checks that vocabulary and label sizes match the parameters.
    pub fn new(vocab: Vocab, labels: LabelSets, params: EncoderParams) -> Result<Self> {
        params.validate()?;
        let dims = params.dims();
        if dims.vocab_size != vocab.len() {
            return Err(Error::contract(format!(
                "vocabulary has {} entries, embedding has {} rows",
                vocab.len(),
                dims.vocab_size
            )));
        }
        if dims.num_intents != labels.num_intents() || dims.num_slot_tags != labels.num_slot_tags()
        {
            return Err(Error::contract(format!(
                "label sets ({} intents, {} tags) do not match classifiers ({}, {})",
                labels.num_intents(),
                labels.num_slot_tags(),
                dims.num_intents,
                dims.num_slot_tags
            )));
        }
        Ok(SluModel {
            vocab,
            labels,
            params,
        })
    }

    pub fn encode_example(&self, example: &SluExample) -> Result<EncOutput> {
        self.params.encode(&corpus::encode(example, &self.vocab))
    }

    pub fn predict(&self, example: &SluExample) -> Result<Prediction> {
        let enc = self.encode_example(example)?;
        let intent = argmax(&self.params.intent_distribution(&enc.h_cls)?);
        let slots = self.params.slot_distributions(&enc.tokens)?;
        let tags = (0..slots.rows()).map(|r| argmax(slots.row(r))).collect();
        Ok(Prediction { intent, tags })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
