//! Template-based pseudo-multilingual corpora.
//!
//! The base language `l0` is built from slot-filled templates. Every other
//! language `l1..` renames each base word to a fresh word of its own, one
//! for one, so tags and intents line up example by example and languages
//! share no surface forms. The lexicon for a target language is exactly
//! its renaming, with some words given a second, unused alias to exercise
//! one-to-many translation choice.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, SluExample};
use crate::codeswitch::BilingualLexicon;
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

const SLOT_NAMES: [&str; 12] = [
    "city", "date", "genre", "time", "airline", "person", "number", "place", "artist", "device",
    "cuisine", "weather",
];
const INTENT_NAMES: [&str; 10] = [
    "BookFlight",
    "PlayMovie",
    "GetWeather",
    "FindRestaurant",
    "SetAlarm",
    "PlayMusic",
    "SendMessage",
    "BookHotel",
    "CheckBalance",
    "OrderFood",
];
const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn default_values_per_slot() -> usize {
    6
}

fn default_ambiguous_fraction() -> f64 {
    0.2
}

fn default_carrier_words() -> usize {
    24
}

/// Parameters of a synthetic corpus. Generation is a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of pseudo-languages including the base language.
    pub languages: usize,
    pub intents: usize,
    pub slot_types: usize,
    pub templates: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default = "default_values_per_slot")]
    pub values_per_slot: usize,
    /// Fraction of base words whose lexicon entry lists two translations.
    #[serde(default = "default_ambiguous_fraction")]
    pub ambiguous_fraction: f64,
    #[serde(default = "default_carrier_words")]
    pub carrier_words: usize,
    /// Slot types available to each intent's templates; all types when unset.
    #[serde(default)]
    pub slots_per_intent: Option<usize>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("languages", self.languages),
            ("intents", self.intents),
            ("slot_types", self.slot_types),
            ("templates", self.templates),
            ("train", self.train),
            ("dev", self.dev),
            ("test", self.test),
            ("values_per_slot", self.values_per_slot),
            ("carrier_words", self.carrier_words),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!(
                "synthetic spec: {name} must be at least 1"
            )));
        }
        if self.slots_per_intent == Some(0) {
            return Err(Error::Config(
                "synthetic spec: slots_per_intent must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config(
                "synthetic spec: ambiguous_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn language_codes(&self) -> Vec<String> {
        (0..self.languages).map(|i| format!("l{i}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSplits {
    pub lang: String,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl LanguageSplits {
    /// All three splits concatenated.
    pub fn corpus(&self) -> Corpus {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticData {
    /// Base language first.
    pub languages: Vec<LanguageSplits>,
    /// Base word to target word(s), keyed by target language.
    pub lexicon: BilingualLexicon,
}

impl SyntheticData {
    pub fn source(&self) -> &LanguageSplits {
        &self.languages[0]
    }

    pub fn targets(&self) -> &[LanguageSplits] {
        &self.languages[1..]
    }

    pub fn language(&self, lang: &str) -> Option<&LanguageSplits> {
        self.languages.iter().find(|l| l.lang == lang)
    }
}

enum Piece {
    Word(String),
    Slot(usize),
}

struct Template {
    intent: usize,
    pieces: Vec<Piece>,
}

struct WordFactory {
    used: HashSet<String>,
}

impl WordFactory {
    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).expect("non-empty"));
                w.push_str(VOWELS.choose(rng).expect("non-empty"));
            }
            if rng.gen_bool(0.3) {
                w.push_str(ONSETS.choose(rng).expect("non-empty"));
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn label(names: &[&str], i: usize, prefix: &str) -> String {
    names
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("{prefix}{i}"))
}

/// Builds the corpora of every pseudo-language and the base-to-target lexicons.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let mut words = WordFactory {
        used: HashSet::new(),
    };
    // Base words in creation order; the renaming below walks this list.
    let mut base_words: Vec<String> = Vec::new();
    let mut fresh = |rng: &mut ChaCha8Rng, base_words: &mut Vec<String>| {
        let w = words.fresh(rng);
        base_words.push(w.clone());
        w
    };

    let carriers: Vec<String> = (0..spec.carrier_words)
        .map(|_| fresh(&mut rng, &mut base_words))
        .collect();
    let keywords: Vec<Vec<String>> = (0..spec.intents)
        .map(|_| (0..3).map(|_| fresh(&mut rng, &mut base_words)).collect())
        .collect();
    let slot_values: Vec<Vec<Vec<String>>> = (0..spec.slot_types)
        .map(|_| {
            (0..spec.values_per_slot)
                .map(|v| {
                    let len = if v % 3 == 2 { 2 } else { 1 };
                    (0..len).map(|_| fresh(&mut rng, &mut base_words)).collect()
                })
                .collect()
        })
        .collect();

    let inventories: Vec<Vec<usize>> = (0..spec.intents)
        .map(|_| {
            let mut types: Vec<usize> = (0..spec.slot_types).collect();
            if let Some(k) = spec.slots_per_intent {
                types.shuffle(&mut rng);
                types.truncate(k.min(spec.slot_types));
            }
            types
        })
        .collect();

    let templates: Vec<Template> = (0..spec.templates)
        .map(|t| {
            let intent = t % spec.intents;
            let mut pieces: Vec<Piece> = Vec::new();
            let n_carriers = rng.gen_range(2..=4);
            for _ in 0..n_carriers {
                pieces.push(Piece::Word(
                    carriers.choose(&mut rng).expect("non-empty").clone(),
                ));
            }
            let kw = keywords[intent]
                .choose(&mut rng)
                .expect("non-empty")
                .clone();
            pieces.insert(rng.gen_range(0..=pieces.len()), Piece::Word(kw));
            let mut types = inventories[intent].clone();
            let n_slots = rng.gen_range(1..=3.min(types.len()));
            types.shuffle(&mut rng);
            for &ty in &types[..n_slots] {
                pieces.insert(rng.gen_range(0..=pieces.len()), Piece::Slot(ty));
            }
            Template { intent, pieces }
        })
        .collect();

    let total = spec.train + spec.dev + spec.test;
    let base_lang = "l0".to_string();
    let mut base: Vec<SluExample> = Vec::with_capacity(total);
    for _ in 0..total {
        let template = templates.choose(&mut rng).expect("non-empty");
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        for piece in &template.pieces {
            match piece {
                Piece::Word(w) => {
                    tokens.push(w.clone());
                    tags.push("O".to_string());
                }
                Piece::Slot(ty) => {
                    let name = label(&SLOT_NAMES, *ty, "type");
                    let value = slot_values[*ty].choose(&mut rng).expect("non-empty");
                    for (k, w) in value.iter().enumerate() {
                        tokens.push(w.clone());
                        tags.push(format!("{}-{name}", if k == 0 { "B" } else { "I" }));
                    }
                }
            }
        }
        base.push(SluExample::new(
            tokens,
            tags,
            label(&INTENT_NAMES, template.intent, "Intent"),
            base_lang.clone(),
        )?);
    }

    let mut lexicon = BilingualLexicon::new();
    let mut languages = vec![split(&base_lang, base.clone(), spec)];
    for code in spec.language_codes().into_iter().skip(1) {
        let mut rename: BTreeMap<&str, String> = BTreeMap::new();
        lexicon.add_language(&code);
        for w in &base_words {
            let primary = words.fresh(&mut rng);
            lexicon.insert(&code, w, &primary);
            if rng.gen_bool(spec.ambiguous_fraction) {
                let alias = words.fresh(&mut rng);
                lexicon.insert(&code, w, &alias);
            }
            rename.insert(w.as_str(), primary);
        }
        let translated: Vec<SluExample> = base
            .iter()
            .map(|ex| SluExample {
                tokens: ex
                    .tokens
                    .iter()
                    .map(|t| rename[t.as_str()].clone())
                    .collect(),
                slot_tags: ex.slot_tags.clone(),
                intent: ex.intent.clone(),
                lang: code.clone(),
            })
            .collect();
        languages.push(split(&code, translated, spec));
    }
    Ok(SyntheticData { languages, lexicon })
}

fn split(lang: &str, mut examples: Vec<SluExample>, spec: &SyntheticSpec) -> LanguageSplits {
    let test = examples.split_off(spec.train + spec.dev);
    let dev = examples.split_off(spec.train);
    LanguageSplits {
        lang: lang.to_owned(),
        train: Corpus::new(examples),
        dev: Corpus::new(dev),
        test: Corpus::new(test),
    }
}
