//! Bilingual lexicons and code-switched positive samples.
//!
//! A positive sample replaces each word of an anchor utterance, with
//! probability `replace_prob`, by a dictionary translation into a language
//! drawn from the policy's pool. Replacement is one word for one word, so
//! slot tags stay aligned and are copied unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SluExample};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, stream_rng};

/// Per target language, source word to its ordered, non-empty translations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BilingualLexicon {
    langs: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl BilingualLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `lang` with no entries if it is not yet present.
    pub fn add_language(&mut self, lang: &str) {
        self.langs.entry(lang.to_owned()).or_default();
    }

    /// Adds a translation; an identical pair is stored once.
    pub fn insert(&mut self, lang: &str, source: &str, target: &str) {
        let list = self
            .langs
            .entry(lang.to_owned())
            .or_default()
            .entry(source.to_owned())
            .or_default();
        if !list.iter().any(|t| t == target) {
            list.push(target.to_owned());
        }
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.langs.keys().map(String::as_str)
    }

    pub fn has_language(&self, lang: &str) -> bool {
        self.langs.contains_key(lang)
    }

    /// Case-sensitive exact lookup.
    pub fn translations(&self, lang: &str, word: &str) -> Option<&[String]> {
        self.langs
            .get(lang)
            .and_then(|m| m.get(word))
            .map(Vec::as_slice)
    }

    pub fn entries(&self, lang: &str) -> Option<&BTreeMap<String, Vec<String>>> {
        self.langs.get(lang)
    }

    /// Every translation of every language, in lexicon order.
    pub fn target_words(&self) -> impl Iterator<Item = &str> {
        self.langs
            .values()
            .flat_map(|m| m.values())
            .flatten()
            .map(String::as_str)
    }

    /// Parses `source<TAB>target` lines for one language.
    pub fn parse_str(&mut self, lang: &str, text: &str, path: Option<&Path>) -> Result<()> {
        self.add_language(lang);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let ok = fields.len() == 2 && fields.iter().all(|f| !f.trim().is_empty());
            if !ok {
                return Err(Error::Parse {
                    path: path.map(Path::to_path_buf),
                    line: idx + 1,
                    message: format!("expected `source<TAB>target`, got {line:?}"),
                });
            }
            self.insert(lang, fields[0].trim(), fields[1].trim());
        }
        Ok(())
    }

    /// One `source<TAB>target` line per translation.
    pub fn to_tsv(&self, lang: &str) -> String {
        let mut out = String::new();
        if let Some(entries) = self.langs.get(lang) {
            for (src, targets) in entries {
                for t in targets {
                    let _ = writeln!(out, "{src}\t{t}");
                }
            }
        }
        out
    }
}

/// Loads one dictionary file per language.
pub fn load_lexicon(paths: &BTreeMap<String, PathBuf>) -> Result<BilingualLexicon> {
    let mut lex = BilingualLexicon::new();
    for (lang, path) in paths {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        lex.parse_str(lang, &text, Some(path))?;
    }
    Ok(lex)
}

/// How positives are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchPolicy {
    pub replace_prob: f64,
    pub languages: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl SwitchPolicy {
    pub const DEFAULT_REPLACE_PROB: f64 = 0.9;

    pub fn new(replace_prob: f64, languages: Vec<String>, seed: u64) -> Self {
        SwitchPolicy {
            replace_prob,
            languages,
            seed,
        }
    }

    pub fn validate(&self, lex: &BilingualLexicon) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::Config(format!(
                "replace_prob {} outside [0, 1]",
                self.replace_prob
            )));
        }
        if self.languages.is_empty() {
            return Err(Error::Config(
                "code-switching language pool is empty".into(),
            ));
        }
        if let Some(missing) = self.languages.iter().find(|l| !lex.has_language(l)) {
            return Err(Error::Config(format!("no lexicon for language {missing}")));
        }
        Ok(())
    }

    /// The policy used for `epoch`: same pool, independent seed.
    pub fn for_epoch(&self, epoch: usize) -> SwitchPolicy {
        SwitchPolicy {
            seed: derive_seed(self.seed, epoch as u64),
            ..self.clone()
        }
    }
}

/// Draws one code-switched view of `example`.
///
/// For each word: with probability `replace_prob` pick a pool language,
/// then one of the word's translations in it, both uniformly. Words
/// without an entry in the chosen language are kept.
pub fn code_switch<R: Rng + ?Sized>(
    example: &SluExample,
    lex: &BilingualLexicon,
    policy: &SwitchPolicy,
    rng: &mut R,
) -> SluExample {
    let tokens = example
        .tokens
        .iter()
        .map(|tok| {
            if !rng.gen_bool(policy.replace_prob) {
                return tok.clone();
            }
            let Some(lang) = policy.languages.choose(rng) else {
                return tok.clone();
            };
            match lex.translations(lang, tok).and_then(|t| t.choose(rng)) {
                Some(t) => t.clone(),
                None => tok.clone(),
            }
        })
        .collect();
    SluExample {
        tokens,
        slot_tags: example.slot_tags.clone(),
        intent: example.intent.clone(),
        lang: example.lang.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositivePair {
    pub anchor: SluExample,
    pub positive: SluExample,
}

/// One positive per anchor. Example `i` uses random stream `i` of
/// `policy.seed`, so results do not depend on processing order.
pub fn augment_corpus(
    corpus: &Corpus,
    lex: &BilingualLexicon,
    policy: &SwitchPolicy,
) -> Result<Vec<PositivePair>> {
    policy.validate(lex)?;
    Ok(corpus
        .iter()
        .enumerate()
        .map(|(i, ex)| PositivePair {
            anchor: ex.clone(),
            positive: positive_for(ex, i, lex, policy),
        })
        .collect())
}

/// The positive [`augment_corpus`] would produce for `example` at `index`.
pub fn positive_for(
    example: &SluExample,
    index: usize,
    lex: &BilingualLexicon,
    policy: &SwitchPolicy,
) -> SluExample {
    let mut rng = stream_rng(policy.seed, index as u64);
    code_switch(example, lex, policy, &mut rng)
}
