//! Supervised losses, the weighted training objective, Adam, and the
//! epoch loop with dev-set model selection.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codeswitch::{positive_for, BilingualLexicon, PositivePair, SwitchPolicy};
use crate::contrastive::{
    loss_gis, loss_li, loss_ls, Negatives, NegativeQueue, SimilarityConfig, SlotPairing,
    DEFAULT_TEMPERATURE,
};
use crate::corpus::{self, build_vocab, Corpus, LabelSets, Vocab};
use crate::encoder::{
    encode_on_tape, intent_distribution_on_tape, slot_distributions_on_tape, BoundParams,
    EncOutput, EncoderParams, ModelDims, SluModel,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, LangMetrics};
use crate::numcore::{Tape, Tensor, Var};
use crate::seeding::{derive_seed, stream_rng};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub intent: f64,
    pub slot: f64,
    pub local_intent: f64,
    pub local_slot: f64,
    pub global_intent_slot: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            intent: 1.0,
            slot: 1.0,
            local_intent: 0.5,
            local_slot: 0.5,
            global_intent_slot: 0.5,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LossWeights {
    /// Supervised terms only.
    pub fn supervised_only() -> Self {
        LossWeights {
            local_intent: 0.0,
            local_slot: 0.0,
            global_intent_slot: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn contrastive_active(&self) -> bool {
        self.local_intent > 0.0 || self.local_slot > 0.0 || self.global_intent_slot > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("intent", self.intent),
            ("slot", self.slot),
            ("local_intent", self.local_intent),
            ("local_slot", self.local_slot),
            ("global_intent_slot", self.global_intent_slot),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("weight {name} must be ≥ 0, got {w}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Values of the five loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub intent: f64,
    pub slot: f64,
    pub local_intent: f64,
    pub local_slot: f64,
    pub global_intent_slot: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.intent,
            self.slot,
            self.local_intent,
            self.local_slot,
            self.global_intent_slot,
        ]
    }

    fn add_scaled(&mut self, other: &LossComponents, factor: f64) {
        self.intent += factor * other.intent;
        self.slot += factor * other.slot;
        self.local_intent += factor * other.local_intent;
        self.local_slot += factor * other.local_slot;
        self.global_intent_slot += factor * other.global_intent_slot;
    }
}

/// `λ_I L_I + λ_S L_S + λ_LI L_LI + λ_LS L_LS + λ_GIS L_GIS`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.intent * c.intent
        + w.slot * c.slot
        + w.local_intent * c.local_intent
        + w.local_slot * c.local_slot
        + w.global_intent_slot * c.global_intent_slot
}

/// `-log o[gold]` for a `[1 × n_I]` distribution.
pub fn intent_ce(tape: &mut Tape, probs: Var, gold: usize) -> Result<Var> {
    let n = tape.value(probs).cols();
    one_hot_ce(tape, probs, &[gold], n)
}

/// `-Σ_t log o_t[gold_t]`, summed over tokens, for `[n × n_S]`
/// distributions.
pub fn slot_ce(tape: &mut Tape, probs: Var, gold: &[usize]) -> Result<Var> {
    let n = tape.value(probs).cols();
    one_hot_ce(tape, probs, gold, n)
}

fn one_hot_ce(tape: &mut Tape, probs: Var, gold: &[usize], classes: usize) -> Result<Var> {
    let rows = tape.value(probs).rows();
    if rows != gold.len() {
        return Err(Error::dim(format!(
            "{rows} distributions for {} gold labels",
            gold.len()
        )));
    }
    let mut onehot = Tensor::zeros(rows, classes);
    for (r, &g) in gold.iter().enumerate() {
        if g >= classes {
            return Err(Error::contract(format!("gold label {g} out of {classes} classes")));
        }
        onehot.data_mut()[r * classes + g] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let logp = tape.log_clamped(probs, PROB_FLOOR);
    let picked = tape.mul(logp, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Metric used to pick the best epoch on the dev set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    OverallAcc,
    IntentAcc,
    SlotF1,
}

impl SelectionMetric {
    pub fn of(&self, m: &LangMetrics) -> f64 {
        match self {
            SelectionMetric::OverallAcc => m.overall_acc,
            SelectionMetric::IntentAcc => m.intent_acc,
            SelectionMetric::SlotF1 => m.slot_f1,
        }
    }
}

/// Code-switching settings; the sampling seed is derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchSettings {
    pub replace_prob: f64,
    pub languages: Vec<String>,
}

impl Default for SwitchSettings {
    fn default() -> Self {
        SwitchSettings {
            replace_prob: SwitchPolicy::DEFAULT_REPLACE_PROB,
            languages: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            embed_dim: 32,
            hidden_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub queue_capacity: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub switch: SwitchSettings,
    pub selection_metric: SelectionMetric,
    pub normalize: bool,
    /// Pair each anchor token only with the positive token at the same
    /// position in the local slot loss.
    pub ls_aligned_only: bool,
    /// Also apply the supervised losses to code-switched positives.
    pub supervise_positive: bool,
    /// Inverted dropout rate on embeddings during training.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            queue_capacity: 32,
            seed: 0,
            weights: LossWeights::default(),
            switch: SwitchSettings::default(),
            selection_metric: SelectionMetric::default(),
            normalize: true,
            ls_aligned_only: false,
            supervise_positive: false,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.switch.replace_prob) {
            return Err(Error::Config(format!(
                "replace_prob must lie in [0, 1], got {}",
                self.switch.replace_prob
            )));
        }
        if self.needs_positives() && self.switch.languages.is_empty() {
            return Err(Error::Config(
                "code-switching needs at least one target language".into(),
            ));
        }
        Ok(())
    }

    pub fn slot_pairing(&self) -> SlotPairing {
        if self.ls_aligned_only {
            SlotPairing::AlignedOnly
        } else {
            SlotPairing::AllPositions
        }
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            temperature: self.weights.temperature,
            normalize: self.normalize,
        }
    }

    fn needs_positives(&self) -> bool {
        self.weights.contrastive_active() || self.supervise_positive
    }

    pub fn seeds(&self) -> RunSeeds {
        RunSeeds {
            base: self.seed,
            init: derive_seed(self.seed, 0),
            shuffle: derive_seed(self.seed, 1),
            switch: derive_seed(self.seed, 2),
            dropout: derive_seed(self.seed, 3),
        }
    }

    pub fn switch_policy(&self) -> SwitchPolicy {
        SwitchPolicy::new(
            self.switch.replace_prob,
            self.switch.languages.clone(),
            self.seeds().switch,
        )
    }
}

/// Every random stream of a run, derived from `base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub base: u64,
    pub init: u64,
    pub shuffle: u64,
    pub switch: u64,
    pub dropout: u64,
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &EncoderParams, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update; `grads` follows [`EncoderParams::tensors`] order.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &[Tensor]) -> Result<()> {
        let mut targets = params.tensors_mut();
        if grads.len() != targets.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                targets.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in targets.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient {k} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// An anchor/positive pair mapped to ids, with gold label ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub intent: usize,
    pub tags: Vec<usize>,
}

impl EncodedPair {
    pub fn new(pair: &PositivePair, vocab: &Vocab, labels: &LabelSets) -> Result<Self> {
        let a = &pair.anchor;
        let intent = labels
            .intent_id(&a.intent)
            .ok_or_else(|| Error::contract(format!("unknown intent {:?}", a.intent)))?;
        let tags = a
            .slot_tags
            .iter()
            .map(|t| {
                labels
                    .tag_id(t)
                    .ok_or_else(|| Error::contract(format!("unknown slot tag {t:?}")))
            })
            .collect::<Result<_>>()?;
        if pair.positive.len() != a.len() {
            return Err(Error::contract("positive and anchor differ in length"));
        }
        Ok(EncodedPair {
            anchor: corpus::encode(a, vocab),
            positive: corpus::encode(&pair.positive, vocab),
            intent,
            tags,
        })
    }
}

/// Tape nodes of one example's loss.
struct ExampleLoss {
    total: Var,
    terms: [Option<Var>; 5],
    anchor: (Var, Var),
    positive: Option<(Var, Var)>,
}

fn weighted(tape: &mut Tape, acc: Option<Var>, term: Var, weight: f64) -> Result<Var> {
    let t = tape.scale(term, weight);
    match acc {
        None => Ok(t),
        Some(a) => tape.add(a, t),
    }
}

fn supervised(
    tape: &mut Tape,
    bound: &BoundParams,
    cls: Var,
    tokens: Var,
    pair: &EncodedPair,
) -> Result<(Var, Var)> {
    let pi = intent_distribution_on_tape(tape, bound, cls)?;
    let li = intent_ce(tape, pi, pair.intent)?;
    let ps = slot_distributions_on_tape(tape, bound, tokens)?;
    let ls = slot_ce(tape, ps, &pair.tags)?;
    Ok((li, ls))
}

struct StepContext<'a> {
    config: &'a TrainConfig,
    negatives: Option<&'a Negatives>,
    dropout_seed: Option<u64>,
}

/// Builds one example's weighted loss. Terms with zero weight are never
/// recorded on the tape.
fn example_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    pair: &EncodedPair,
    index: usize,
    ctx: &StepContext<'_>,
) -> Result<ExampleLoss> {
    let cfg = ctx.config;
    let w = &cfg.weights;
    let mut rngs: Option<(ChaCha8Rng, ChaCha8Rng)> = ctx.dropout_seed.map(|s| {
        (
            stream_rng(s, 2 * index as u64),
            stream_rng(s, 2 * index as u64 + 1),
        )
    });
    let a = encode_on_tape(
        tape,
        bound,
        &pair.anchor,
        rngs.as_mut().map(|r| (cfg.dropout, &mut r.0)),
    )?;
    let mut terms = [None; 5];
    let mut total = None;
    let (li, ls) = supervised(tape, bound, a.cls, a.tokens, pair)?;
    terms[0] = Some(li);
    terms[1] = Some(ls);
    total = Some(weighted(tape, total, li, w.intent)?);
    total = Some(weighted(tape, total, ls, w.slot)?);

    let mut positive = None;
    if cfg.needs_positives() {
        let p = encode_on_tape(
            tape,
            bound,
            &pair.positive,
            rngs.as_mut().map(|r| (cfg.dropout, &mut r.1)),
        )?;
        positive = Some((p.cls, p.tokens));
        if cfg.supervise_positive {
            let (pli, pls) = supervised(tape, bound, p.cls, p.tokens, pair)?;
            total = Some(weighted(tape, total, pli, w.intent)?);
            total = Some(weighted(tape, total, pls, w.slot)?);
        }
        if let Some(negs) = ctx.negatives {
            let sim = cfg.similarity();
            if w.local_intent > 0.0 {
                let l = loss_li(tape, a.cls, p.cls, negs, &sim)?;
                terms[2] = Some(l);
                total = Some(weighted(tape, total, l, w.local_intent)?);
            }
            if w.local_slot > 0.0 {
                let l = loss_ls(tape, a.tokens, p.tokens, negs, &sim, cfg.slot_pairing())?;
                terms[3] = Some(l);
                total = Some(weighted(tape, total, l, w.local_slot)?);
            }
            if w.global_intent_slot > 0.0 {
                let l = loss_gis(tape, a.cls, a.tokens, p.tokens, negs, &sim)?;
                terms[4] = Some(l);
                total = Some(weighted(tape, total, l, w.global_intent_slot)?);
            }
        }
    }
    Ok(ExampleLoss {
        total: total.expect("supervised terms always present"),
        terms,
        anchor: (a.cls, a.tokens),
        positive,
    })
}

fn read_terms(tape: &Tape, terms: &[Option<Var>; 5]) -> Result<LossComponents> {
    let v = |t: Option<Var>| t.map_or(Ok(0.0), |t| tape.value(t).item());
    Ok(LossComponents {
        intent: v(terms[0])?,
        slot: v(terms[1])?,
        local_intent: v(terms[2])?,
        local_slot: v(terms[3])?,
        global_intent_slot: v(terms[4])?,
    })
}

fn detach(tape: &Tape, (cls, tokens): (Var, Var)) -> EncOutput {
    EncOutput {
        h_cls: tape.value(cls).data().to_vec(),
        tokens: tape.value(tokens).clone(),
    }
}

/// Batch loss as a mean over examples, plus per-term means.
struct BatchLoss {
    tape: Tape,
    bound: BoundParams,
    loss: Var,
    components: LossComponents,
    encodings: Vec<(EncOutput, Option<EncOutput>)>,
}

/// Parameters, optimizer state and negative queue of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    params: EncoderParams,
    optimizer: Adam,
    queue: NegativeQueue,
    config: TrainConfig,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(params: EncoderParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let optimizer = Adam::new(&params, config.learning_rate);
        let queue = NegativeQueue::new(config.queue_capacity, params.dims().rep_dim());
        Ok(Trainer {
            params,
            optimizer,
            queue,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn into_params(self) -> EncoderParams {
        self.params
    }

    pub fn queue(&self) -> &NegativeQueue {
        &self.queue
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Epoch number used in diagnostics and dropout streams.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    fn batch_loss(&self, batch: &[EncodedPair], dropout_seed: Option<u64>) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let negatives = if self.config.weights.contrastive_active() {
            Some(Negatives::from_queue(&self.queue, &self.config.similarity())?)
        } else {
            None
        };
        let ctx = StepContext {
            config: &self.config,
            negatives: negatives.as_ref(),
            dropout_seed,
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let mut totals = Vec::with_capacity(batch.len());
        let mut components = LossComponents::default();
        let mut encodings = Vec::with_capacity(batch.len());
        let share = 1.0 / batch.len() as f64;
        for (i, pair) in batch.iter().enumerate() {
            let ex = example_loss(&mut tape, &bound, pair, i, &ctx)?;
            totals.push(ex.total);
            components.add_scaled(&read_terms(&tape, &ex.terms)?, share);
            encodings.push((
                detach(&tape, ex.anchor),
                ex.positive.map(|p| detach(&tape, p)),
            ));
        }
        let stacked = tape.concat_rows(&totals)?;
        let loss = tape.mean(stacked);
        Ok(BatchLoss {
            tape,
            bound,
            loss,
            components,
            encodings,
        })
    }

    /// Loss of `batch` at the current parameters without dropout or any
    /// update.
    pub fn evaluate_batch(&self, batch: &[EncodedPair]) -> Result<(f64, LossComponents)> {
        let b = self.batch_loss(batch, None)?;
        Ok((b.tape.value(b.loss).item()?, b.components))
    }

    /// Encodes the batch, takes one optimizer step on the mean loss against
    /// the queue as it stood before the batch, then pushes every anchor
    /// and positive encoding into the queue.
    pub fn train_step(&mut self, batch: &[EncodedPair]) -> Result<LossComponents> {
        self.step += 1;
        let dropout_seed = (self.config.dropout > 0.0).then(|| {
            derive_seed(
                derive_seed(self.config.seeds().dropout, self.epoch as u64),
                self.step as u64,
            )
        });
        let b = self.batch_loss(batch, dropout_seed)?;
        let loss = b.tape.value(b.loss).item()?;
        if !loss.is_finite() || !b.components.is_finite() {
            return Err(self.non_finite(&b.components, loss));
        }
        let grads = b.tape.backward(b.loss)?;
        let grads: Vec<Tensor> = b
            .bound
            .leaves()
            .iter()
            .map(|&v| grads.wrt(&b.tape, v))
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite(&b.components, loss));
        }
        self.optimizer.step(&mut self.params, &grads)?;
        if self.config.weights.contrastive_active() {
            for (anchor, positive) in &b.encodings {
                self.queue.push(anchor)?;
                if let Some(p) = positive {
                    self.queue.push(p)?;
                }
            }
        }
        Ok(b.components)
    }

    fn non_finite(&self, c: &LossComponents, total: f64) -> Error {
        Error::NonFinite {
            epoch: self.epoch,
            step: self.step,
            components: format!(
                "total={total} intent={} slot={} local_intent={} local_slot={} global_intent_slot={}",
                c.intent, c.slot, c.local_intent, c.local_slot, c.global_intent_slot
            ),
        }
    }
}

/// Index (1-based) of the best value; ties go to the earliest.
pub fn select_epoch(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of each term over the epoch's batches.
    pub loss: LossComponents,
    pub total: f64,
    pub dev: LangMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub model: ModelSettings,
    pub dims: ModelDims,
    pub seeds: RunSeeds,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub selected_value: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Vocabulary over the training anchors plus every translation the
/// code-switcher can introduce, so that switched words have embeddings.
pub fn training_vocab(train: &Corpus, lexicon: &BilingualLexicon, languages: &[String]) -> Result<Vocab> {
    let mut vocab = build_vocab(train.iter(), 1)?;
    for lang in languages {
        if let Some(entries) = lexicon.entries(lang) {
            for word in entries.values().flatten() {
                vocab.insert(word);
            }
        }
    }
    Ok(vocab)
}

/// Trains on `train` and returns the parameters of the epoch with the best
/// dev score.
pub fn fit(
    train: &Corpus,
    dev: &Corpus,
    lexicon: &BilingualLexicon,
    model: ModelSettings,
    config: &TrainConfig,
) -> Result<(SluModel, RunRecord)> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::contract("training and dev corpora must be non-empty"));
    }
    let policy = config.switch_policy();
    if config.needs_positives() {
        policy.validate(lexicon)?;
    }
    let labels = LabelSets::from_examples(train.iter())?;
    let vocab = training_vocab(train, lexicon, &config.switch.languages)?;
    let dims = ModelDims {
        vocab_size: vocab.len(),
        embed_dim: model.embed_dim,
        hidden_dim: model.hidden_dim,
        num_intents: labels.num_intents(),
        num_slot_tags: labels.num_slot_tags(),
    };
    let seeds = config.seeds();
    let params = EncoderParams::init(dims, seeds.init)?;
    let mut trainer = Trainer::new(params, config.clone())?;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, EncoderParams)> = None;
    for epoch in 1..=config.epochs {
        trainer.set_epoch(epoch);
        let epoch_policy = policy.for_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(seeds.shuffle, epoch as u64));
        let pairs: Vec<EncodedPair> = order
            .iter()
            .map(|&i| {
                let anchor = &train.examples()[i];
                let positive = if config.needs_positives() {
                    positive_for(anchor, i, lexicon, &epoch_policy)
                } else {
                    anchor.clone()
                };
                let pair = PositivePair {
                    anchor: anchor.clone(),
                    positive,
                };
                EncodedPair::new(&pair, &vocab, &labels)
            })
            .collect::<Result<_>>()?;
        let mut sum = LossComponents::default();
        let batches: Vec<&[EncodedPair]> = pairs.chunks(config.batch_size).collect();
        for batch in &batches {
            let c = trainer.train_step(batch)?;
            sum.add_scaled(&c, 1.0 / batches.len() as f64);
        }
        let snapshot = SluModel::new(vocab.clone(), labels.clone(), trainer.params().clone())?;
        let dev_metrics = evaluate(&snapshot, dev)?;
        let score = config.selection_metric.of(&dev_metrics);
        log::info!(
            "epoch {epoch}: loss {:.4}, dev {:?} {score:.4}",
            total_loss(&sum, &config.weights),
            config.selection_metric
        );
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, snapshot.params));
        }
        epochs.push(EpochRecord {
            epoch,
            loss: sum,
            total: total_loss(&sum, &config.weights),
            dev: dev_metrics,
        });
    }
    let scores: Vec<f64> = epochs
        .iter()
        .map(|e| config.selection_metric.of(&e.dev))
        .collect();
    let selected_epoch = select_epoch(&scores).expect("at least one epoch");
    let (selected_value, params) = best.expect("at least one epoch");
    let record = RunRecord {
        config: config.clone(),
        model,
        dims,
        seeds,
        epochs,
        selected_epoch,
        selected_value,
    };
    Ok((SluModel::new(vocab, labels, params)?, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SluExample;
    use crate::numcore::finite_diff_check;

    fn ex(tokens: &str, tags: &str, intent: &str) -> SluExample {
        SluExample::new(
            tokens.split_whitespace().map(String::from).collect(),
            tags.split_whitespace().map(String::from).collect(),
            intent,
            "en",
        )
        .unwrap()
    }

    fn ce_value(probs: Tensor, gold: &[usize], intent: bool) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let l = if intent {
            intent_ce(&mut tape, p, gold[0]).unwrap()
        } else {
            slot_ce(&mut tape, p, gold).unwrap()
        };
        tape.value(l).item().unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(ce_value(Tensor::row_vector(vec![0.0, 1.0]), &[1], true), 0.0);
        let u = ce_value(Tensor::filled(1, 4, 0.25), &[2], true);
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let h = ce_value(Tensor::row_vector(vec![0.7, 0.3]), &[1], true);
        assert!((h - 1.203973).abs() < 1e-6);
        let zero = ce_value(Tensor::row_vector(vec![1.0, 0.0]), &[1], true);
        assert!((zero - 1e12f64.ln()).abs() < 1e-9);

        let perfect = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(ce_value(perfect, &[0, 1], false), 0.0);
        let s = ce_value(Tensor::filled(2, 5, 0.2), &[0, 3], false);
        assert!((s - 2.0 * 5f64.ln()).abs() < 1e-12);
        let mixed = Tensor::from_rows(&[[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]]).unwrap();
        let want = -(0.6f64.ln() + 0.25f64.ln());
        assert!((ce_value(mixed, &[1, 2], false) - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let ones = LossComponents {
            intent: 1.0,
            slot: 1.0,
            local_intent: 1.0,
            local_slot: 1.0,
            global_intent_slot: 1.0,
        };
        let all_one = LossWeights {
            local_intent: 1.0,
            local_slot: 1.0,
            global_intent_slot: 1.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&ones, &all_one), 5.0);
        assert_eq!(total_loss(&ones, &LossWeights::supervised_only()), 2.0);
        let c = LossComponents {
            intent: 1.0,
            slot: 2.0,
            local_intent: 2.0,
            local_slot: 2.0,
            global_intent_slot: 2.0,
        };
        assert_eq!(total_loss(&c, &LossWeights::default()), 6.0);
    }

    #[test]
    fn selection_prefers_earliest_tie() {
        assert_eq!(select_epoch(&[0.2, 0.5, 0.5]), Some(2));
        assert_eq!(select_epoch(&[0.3]), Some(1));
        assert_eq!(select_epoch(&[]), None);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let p = EncoderParams::init(
            ModelDims {
                vocab_size: 5,
                embed_dim: 2,
                hidden_dim: 1,
                num_intents: 2,
                num_slot_tags: 2,
            },
            0,
        )
        .unwrap();
        let mut moved = p.clone();
        let mut adam = Adam::new(&p, 0.01);
        let grads: Vec<Tensor> = p
            .tensors()
            .into_iter()
            .map(|(_, t)| Tensor::filled(t.rows(), t.cols(), -3.0))
            .collect();
        adam.step(&mut moved, &grads).unwrap();
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(moved.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
        assert!(adam.step(&mut moved, &grads[..3]).is_err());
    }

    fn toy_pairs() -> (Vec<EncodedPair>, Vocab, LabelSets) {
        let anchors = [
            ex("book a flight to paris", "O O O O B-city", "flight"),
            ex("play jazz", "O B-genre", "music"),
            ex("fly to new york", "O O B-city I-city", "flight"),
        ];
        let positives = [
            ex("book a vol to paris", "O O O O B-city", "flight"),
            ex("jouer jazz", "O B-genre", "music"),
            ex("fly à new york", "O O B-city I-city", "flight"),
        ];
        let mut vocab = build_vocab(anchors.iter().chain(&positives), 1).unwrap();
        vocab.insert("unused");
        let labels = LabelSets::from_examples(anchors.iter()).unwrap();
        let pairs = anchors
            .iter()
            .zip(&positives)
            .map(|(a, p)| {
                let pair = PositivePair {
                    anchor: a.clone(),
                    positive: p.clone(),
                };
                EncodedPair::new(&pair, &vocab, &labels).unwrap()
            })
            .collect();
        (pairs, vocab, labels)
    }

    fn toy_trainer(config: TrainConfig, hidden: usize) -> (Trainer, Vec<EncodedPair>) {
        let (pairs, vocab, labels) = toy_pairs();
        let dims = ModelDims {
            vocab_size: vocab.len(),
            embed_dim: 4,
            hidden_dim: hidden,
            num_intents: labels.num_intents(),
            num_slot_tags: labels.num_slot_tags(),
        };
        let params = EncoderParams::init(dims, 3).unwrap();
        (Trainer::new(params, config).unwrap(), pairs)
    }

    fn cl_config() -> TrainConfig {
        TrainConfig {
            queue_capacity: 2,
            switch: SwitchSettings {
                replace_prob: 0.9,
                languages: vec!["fr".into()],
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_is_reproducible_and_fills_queue() {
        let (mut a, pairs) = toy_trainer(cl_config(), 3);
        let (mut b, _) = toy_trainer(cl_config(), 3);
        let ca = a.train_step(&pairs[..2]).unwrap();
        let cb = b.train_step(&pairs[..2]).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.params(), b.params());
        assert_eq!(ca.local_intent, 0.0);
        assert_eq!(a.queue().len(), 2);
        let c2 = a.train_step(&pairs[2..]).unwrap();
        assert!(c2.local_intent > 0.0 && c2.local_slot > 0.0 && c2.global_intent_slot > 0.0);
        assert_eq!(a.queue().len(), 2);
    }

    #[test]
    fn zero_contrastive_weights_ignore_the_queue() {
        let config = TrainConfig {
            weights: LossWeights::supervised_only(),
            ..cl_config()
        };
        let (mut t, pairs) = toy_trainer(config, 3);
        t.train_step(&pairs[..1]).unwrap();
        assert!(t.queue().is_empty());
        let mut filled = t.clone();
        let enc = filled.params().encode(&pairs[2].anchor).unwrap();
        filled.queue.push(&enc).unwrap();
        t.train_step(&pairs[1..]).unwrap();
        filled.train_step(&pairs[1..]).unwrap();
        assert_eq!(t.params(), filled.params());
    }

    #[test]
    fn single_step_descends() {
        let config = TrainConfig {
            learning_rate: 1e-3,
            ..cl_config()
        };
        let (mut t, pairs) = toy_trainer(config, 8);
        t.train_step(&pairs[1..]).unwrap();
        let batch = &pairs[..1];
        let (before, _) = t.evaluate_batch(batch).unwrap();
        let probe = t.clone();
        t.train_step(batch).unwrap();
        let mut after_trainer = t.clone();
        after_trainer.queue = probe.queue.clone();
        let (after, _) = after_trainer.evaluate_batch(batch).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let (pairs, vocab, labels) = toy_pairs();
        let dims = ModelDims {
            vocab_size: vocab.len(),
            embed_dim: 8,
            hidden_dim: 3,
            num_intents: labels.num_intents(),
            num_slot_tags: labels.num_slot_tags(),
        };
        let params = EncoderParams::init(dims, 5).unwrap();
        let config = cl_config();
        let mut queue = NegativeQueue::new(2, dims.rep_dim());
        for p in &pairs[1..] {
            queue.push(&params.encode(&p.anchor).unwrap()).unwrap();
        }
        let negs = Negatives::from_queue(&queue, &config.similarity()).unwrap();
        let ctx = StepContext {
            config: &config,
            negatives: Some(&negs),
            dropout_seed: None,
        };
        let point: Vec<Tensor> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let report = finite_diff_check(
            |tape, v| {
                let bound = BoundParams::from_leaves(tape, v)?;
                Ok(example_loss(tape, &bound, &pairs[0], 0, &ctx)?.total)
            },
            &point,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn fit_selects_and_reproduces() {
        let train: Corpus = [
            ex("play jazz", "O B-genre", "music"),
            ex("play rock now", "O B-genre O", "music"),
            ex("fly to rome", "O O B-city", "flight"),
            ex("book flight to oslo", "O O O B-city", "flight"),
        ]
        .into_iter()
        .collect();
        let mut lex = BilingualLexicon::new();
        lex.insert("xx", "play", "spiel");
        lex.insert("xx", "fly", "flieg");
        let config = TrainConfig {
            epochs: 1,
            batch_size: 2,
            queue_capacity: 4,
            switch: SwitchSettings {
                replace_prob: 1.0,
                languages: vec!["xx".into()],
            },
            ..TrainConfig::default()
        };
        let small = ModelSettings {
            embed_dim: 4,
            hidden_dim: 3,
        };
        let (m1, r1) = fit(&train, &train, &lex, small, &config).unwrap();
        let (m2, r2) = fit(&train, &train, &lex, small, &config).unwrap();
        assert_eq!(r1.selected_epoch, 1);
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
        assert_eq!(m1, m2);
        assert!(m1.vocab.contains("spiel"));
        let missing = TrainConfig {
            switch: SwitchSettings {
                replace_prob: 1.0,
                languages: vec!["zz".into()],
            },
            ..config.clone()
        };
        assert!(matches!(fit(&train, &train, &lex, small, &missing), Err(Error::Config(_))));
        assert!(fit(&train, &Corpus::default(), &lex, small, &config).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig {
                weights: LossWeights { local_slot: -0.1, ..LossWeights::default() },
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        let json = r#"{"epochs": 3, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn total_loss_is_linear_in_each_weight(
                c in proptest::array::uniform5(0.0f64..10.0),
                w in proptest::array::uniform5(0.0f64..3.0),
                which in 0usize..5,
                factor in 0.0f64..4.0,
            ) {
                let comps = LossComponents {
                    intent: c[0], slot: c[1], local_intent: c[2], local_slot: c[3], global_intent_slot: c[4],
                };
                let make = |w: [f64; 5]| LossWeights {
                    intent: w[0], slot: w[1], local_intent: w[2], local_slot: w[3], global_intent_slot: w[4],
                    temperature: 0.07,
                };
                let base = total_loss(&comps, &make(w));
                let mut scaled = w;
                scaled[which] *= factor;
                let got = total_loss(&comps, &make(scaled)) - base;
                let want = (factor - 1.0) * w[which] * c[which];
                prop_assert!((got - want).abs() <= 1e-9 * (1.0 + base.abs()));
            }
        }
    }
}
