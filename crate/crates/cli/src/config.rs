//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glclef::codeswitch::{load_lexicon, BilingualLexicon};
use glclef::corpus::{generate_synthetic, parse_tsv, Corpus, SyntheticSpec};
use glclef::trainer::{LossWeights, ModelSettings, SelectionMetric, SwitchSettings, TrainConfig};
use glclef::Error;
use serde::{Deserialize, Serialize};

/// Corpus files of a source language plus test files by language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub source_lang: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Generate corpora and lexicons in memory. The base language trains,
    /// every other language is tested.
    Synthetic(SyntheticSpec),
    Files(FileData),
}

/// Everything in [`TrainConfig`] except the seed and the loss weights,
/// which have sections of their own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub queue_capacity: usize,
    pub switch: SwitchSettings,
    pub selection_metric: SelectionMetric,
    pub normalize: bool,
    pub ls_aligned_only: bool,
    pub supervise_positive: bool,
    pub dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            queue_capacity: t.queue_capacity,
            switch: t.switch,
            selection_metric: t.selection_metric,
            normalize: t.normalize,
            ls_aligned_only: t.ls_aligned_only,
            supervise_positive: t.supervise_positive,
            dropout: t.dropout,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    /// Lexicon TSV per target language. Must be empty for synthetic data.
    #[serde(default)]
    pub lexicons: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

/// Loaded corpora and lexicons.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub source_lang: String,
    pub train: Corpus,
    pub dev: Corpus,
    pub tests: Vec<(String, Corpus)>,
    /// Source-language test split, when known.
    pub source_test: Option<Corpus>,
    pub lexicon: BilingualLexicon,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSection::Files(f) = &mut self.data {
            fix(&mut f.train);
            fix(&mut f.dev);
            f.test.values_mut().for_each(fix);
        }
        self.lexicons.values_mut().for_each(fix);
        fix(&mut self.output);
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds list has duplicates".into()));
        }
        match &self.data {
            DataSection::Synthetic(spec) => {
                spec.validate()?;
                if spec.languages < 2 {
                    return Err(Error::Config(
                        "synthetic data needs at least 2 languages".into(),
                    ));
                }
                if !self.lexicons.is_empty() {
                    return Err(Error::Config(
                        "lexicons are generated for synthetic data; leave the section empty".into(),
                    ));
                }
            }
            DataSection::Files(f) => {
                if f.test.is_empty() {
                    return Err(Error::Config("data.files.test lists no language".into()));
                }
            }
        }
        let mut probe = self.train_config(self.seeds[0]);
        if probe.switch.languages.is_empty() {
            // Filled from the lexicons once data is loaded.
            probe.switch.languages.push(String::new());
        }
        probe.validate()
    }

    /// The trainer configuration for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            queue_capacity: t.queue_capacity,
            seed,
            weights: self.weights,
            switch: t.switch.clone(),
            selection_metric: t.selection_metric,
            normalize: t.normalize,
            ls_aligned_only: t.ls_aligned_only,
            supervise_positive: t.supervise_positive,
            dropout: t.dropout,
        }
    }

    /// Loads the data and fills an empty switch-language list with every
    /// lexicon language, so the returned config holds effective values.
    pub fn load_data(&self) -> Result<(ExperimentConfig, Dataset), Error> {
        let dataset = match &self.data {
            DataSection::Synthetic(spec) => {
                let data = generate_synthetic(spec)?;
                let src = data.source();
                Dataset {
                    source_lang: src.lang.clone(),
                    train: src.train.clone(),
                    dev: src.dev.clone(),
                    tests: data
                        .targets()
                        .iter()
                        .map(|t| (t.lang.clone(), t.test.clone()))
                        .collect(),
                    source_test: Some(src.test.clone()),
                    lexicon: data.lexicon,
                }
            }
            DataSection::Files(f) => {
                let tests = f
                    .test
                    .iter()
                    .map(|(lang, path)| Ok((lang.clone(), parse_tsv(path, lang)?)))
                    .collect::<Result<Vec<_>, Error>>()?;
                let source_test = tests
                    .iter()
                    .find(|(l, _)| *l == f.source_lang)
                    .map(|(_, c)| c.clone());
                Dataset {
                    source_lang: f.source_lang.clone(),
                    train: parse_tsv(&f.train, &f.source_lang)?,
                    dev: parse_tsv(&f.dev, &f.source_lang)?,
                    tests,
                    source_test,
                    lexicon: load_lexicon(&self.lexicons)?,
                }
            }
        };
        let mut effective = self.clone();
        if effective.train.switch.languages.is_empty() {
            effective.train.switch.languages =
                dataset.lexicon.languages().map(String::from).collect();
        }
        effective.validate()?;
        Ok((effective, dataset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {"synthetic": {"languages": 2, "intents": 2, "slot_types": 2,
                  "templates": 4, "train": 10, "dev": 4, "test": 4, "seed": 1}}
    }"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.weights, LossWeights::default());
        let t = cfg.train_config(3);
        assert_eq!(t.seed, 3);
        assert_eq!(t.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replacen('{', r#"{"extra": 1,"#, 1);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace(r#""seed": 1"#, r#""seed": 1, "colour": 2"#);
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dup = MINIMAL.replacen('{', r#"{"seeds": [1, 1],"#, 1);
        assert!(ExperimentConfig::from_json(&dup).is_err());
        let neg = MINIMAL.replacen('{', r#"{"weights": {"local_slot": -1.0},"#, 1);
        assert!(ExperimentConfig::from_json(&neg).is_err());
        let lex = MINIMAL.replacen('{', r#"{"lexicons": {"l1": "x.tsv"},"#, 1);
        assert!(ExperimentConfig::from_json(&lex).is_err());
    }

    #[test]
    fn switch_languages_default_to_lexicon_languages() {
        let text = MINIMAL.replace(r#""languages": 2"#, r#""languages": 3"#);
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let (effective, data) = cfg.load_data().unwrap();
        assert_eq!(effective.train.switch.languages, vec!["l1", "l2"]);
        assert_eq!(data.tests.len(), 2);
        assert_eq!(data.train.len(), 10);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let text = r#"{"data": {"files": {"source_lang": "en", "train": "a.tsv",
            "dev": "/abs/b.tsv", "test": {"de": "c.tsv"}}}, "lexicons": {"de": "lex.tsv"}}"#;
        let mut cfg = ExperimentConfig::from_json(text).unwrap();
        cfg.resolve_paths(Path::new("/cfg"));
        let DataSection::Files(f) = &cfg.data else { panic!() };
        assert_eq!(f.train, PathBuf::from("/cfg/a.tsv"));
        assert_eq!(f.dev, PathBuf::from("/abs/b.tsv"));
        assert_eq!(cfg.lexicons["de"], PathBuf::from("/cfg/lex.tsv"));
        assert_eq!(cfg.output, PathBuf::from("/cfg/runs"));
    }
}
