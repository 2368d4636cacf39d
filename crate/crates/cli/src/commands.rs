//! Data generation, augmentation, evaluation and projection commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use glclef::codeswitch::augment_corpus;
use glclef::corpus::{generate_synthetic, parse_tsv, Corpus, SyntheticSpec};
use glclef::encoder::SluModel;
use glclef::metrics::{zero_shot_report, MetricsReport};
use glclef::projection::pca_2d;
use glclef::Error;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::write_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataManifest {
    pub spec: SyntheticSpec,
    /// File name to number of data rows.
    pub files: BTreeMap<String, usize>,
}

/// Writes `<lang>.<split>.tsv` for every language, `lexicon.<lang>.tsv` for
/// every target language and `manifest.json`.
pub fn gen_data(spec_path: &Path, out: &Path) -> anyhow::Result<GenDataManifest> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("synthetic spec {}: {e}", spec_path.display())))?;
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = BTreeMap::new();
    for lang in &data.languages {
        for (split, corpus) in [("train", &lang.train), ("dev", &lang.dev), ("test", &lang.test)] {
            let name = format!("{}.{split}.tsv", lang.lang);
            corpus.write_tsv(out.join(&name))?;
            files.insert(name, corpus.len());
        }
    }
    for lang in data.targets() {
        let name = format!("lexicon.{}.tsv", lang.lang);
        let tsv = data.lexicon.to_tsv(&lang.lang);
        std::fs::write(out.join(&name), &tsv)?;
        files.insert(name, tsv.lines().count());
    }
    let manifest = GenDataManifest { spec, files };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub split: Split,
    pub policy: glclef::codeswitch::SwitchPolicy,
    pub rows: usize,
    pub output: PathBuf,
}

/// Writes one code-switched positive per source utterance, line-aligned
/// with the anchors, and `<out>.manifest.json`.
pub fn augment(
    cfg: &ExperimentConfig,
    seed: Option<u64>,
    split: Split,
    out: &Path,
) -> anyhow::Result<AugmentManifest> {
    let (cfg, data) = cfg.load_data()?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let corpus = match split {
        Split::Train => &data.train,
        Split::Dev => &data.dev,
        Split::Test => match &data.source_test {
            Some(c) => c,
            None => bail!(Error::Config(format!(
                "no test file for source language {}",
                data.source_lang
            ))),
        },
    };
    let policy = cfg.train_config(seed).switch_policy();
    let pairs = augment_corpus(corpus, &data.lexicon, &policy)?;
    let positives: Corpus = pairs.into_iter().map(|p| p.positive).collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    positives.write_tsv(out)?;
    let manifest = AugmentManifest {
        config: cfg,
        seed,
        split,
        policy,
        rows: positives.len(),
        output: out.to_path_buf(),
    };
    write_json(&sidecar(out, "manifest.json"), &manifest)?;
    Ok(manifest)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// `LANG=PATH` pairs as given on the command line.
pub fn parse_lang_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((lang, path)) if !lang.is_empty() && !path.is_empty() => {
            Ok((lang.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected LANG=PATH, got {s:?}")),
    }
}

/// Every `<lang>.test.tsv` in `dir`, sorted by language.
pub fn test_files_in(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(lang) = name.strip_suffix(".test.tsv").filter(|l| !l.is_empty()) {
            found.push((lang.to_string(), path.clone()));
        }
    }
    if found.is_empty() {
        bail!(Error::Config(format!("no <lang>.test.tsv files in {}", dir.display())));
    }
    found.sort();
    Ok(found)
}

fn load_corpora(sources: &[(String, PathBuf)]) -> anyhow::Result<Vec<(String, Corpus)>> {
    if sources.is_empty() {
        bail!(Error::Config("no corpus given".into()));
    }
    sources
        .iter()
        .map(|(lang, path)| Ok((lang.clone(), parse_tsv(path, lang)?)))
        .collect()
}

fn load_model(path: &Path) -> anyhow::Result<SluModel> {
    SluModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub tests: Vec<(String, PathBuf)>,
    pub report: MetricsReport,
}

/// Writes `report.json` and `report.txt` into `out`.
pub fn eval(
    checkpoint: &Path,
    tests: &[(String, PathBuf)],
    out: &Path,
) -> anyhow::Result<EvalOutput> {
    let model = load_model(checkpoint)?;
    let corpora = load_corpora(tests)?;
    let report = zero_shot_report(&model, &corpora)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let output = EvalOutput {
        checkpoint: checkpoint.to_path_buf(),
        tests: tests.to_vec(),
        report,
    };
    write_json(&out.join("report.json"), &output)?;
    std::fs::write(out.join("report.txt"), output.report.to_table())?;
    Ok(output)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub checkpoint: PathBuf,
    pub corpora: Vec<(String, PathBuf)>,
    pub rows: usize,
    pub eigenvalues: [f64; 2],
    pub total_variance: f64,
    pub explained: f64,
}

/// Projects every sentence vector onto two principal axes and writes a
/// `lang,x,y` CSV plus `<out>.json`.
pub fn project(
    checkpoint: &Path,
    corpora: &[(String, PathBuf)],
    out: &Path,
) -> anyhow::Result<ProjectManifest> {
    let model = load_model(checkpoint)?;
    let loaded = load_corpora(corpora)?;
    let mut langs = Vec::new();
    let mut rows = Vec::new();
    for (lang, corpus) in &loaded {
        for ex in corpus {
            rows.push(model.encode_example(ex)?.h_cls);
            langs.push(lang.as_str());
        }
    }
    let proj = pca_2d(&rows)?;
    let mut csv = String::from("lang,x,y\n");
    for (lang, [x, y]) in langs.iter().zip(&proj.points) {
        writeln!(csv, "{lang},{x},{y}").expect("writing to a String");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    let manifest = ProjectManifest {
        checkpoint: checkpoint.to_path_buf(),
        corpora: corpora.to_vec(),
        rows: rows.len(),
        eigenvalues: proj.eigenvalues,
        total_variance: proj.total_variance,
        explained: proj.explained,
    };
    write_json(&sidecar(out, "json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lang_path_pairs() {
        assert_eq!(
            parse_lang_path("de=a/b.tsv").unwrap(),
            ("de".to_string(), PathBuf::from("a/b.tsv"))
        );
        assert!(parse_lang_path("de").is_err());
        assert!(parse_lang_path("=x").is_err());
        assert!(parse_lang_path("de=").is_err());
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("d/out.tsv"), "json"), PathBuf::from("d/out.tsv.json"));
    }

    #[test]
    fn test_dir_scan() {
        let dir = tempfile::tempdir().unwrap();
        assert!(test_files_in(dir.path()).is_err());
        for name in ["l2.test.tsv", "l1.test.tsv", "l1.train.tsv", ".test.tsv"] {
            std::fs::write(dir.path().join(name), "").unwrap();
        }
        let found = test_files_in(dir.path()).unwrap();
        let langs: Vec<&str> = found.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(langs, ["l1", "l2"]);
    }
}
