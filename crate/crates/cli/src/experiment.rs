//! Multi-seed training runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use glclef::codeswitch::{augment_corpus, SwitchPolicy};
use glclef::encoder::SluModel;
use glclef::metrics::{cls_alignment, evaluate, zero_shot_report, AlignmentStats, LangMetrics, MetricsReport};
use glclef::seeding::derive_seed;
use glclef::trainer::{fit, RunRecord};
use serde::{Deserialize, Serialize};

use crate::config::{Dataset, ExperimentConfig};
use crate::stats::MetricSpread;
use crate::write_json;

const ALIGNMENT_SALT: u64 = 0x616c_6967;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub selected_epoch: usize,
    pub dev_selection_value: f64,
    /// Zero-shot metrics on the test languages.
    pub report: MetricsReport,
    pub source_test: Option<LangMetrics>,
    /// Sentence-vector alignment on code-switched source test utterances.
    pub alignment: Option<AlignmentStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedResult>,
    /// Spread of the per-seed language averages.
    pub average: MetricSpread,
    pub per_language: BTreeMap<String, MetricSpread>,
}

impl ExperimentSummary {
    pub fn to_table(&self) -> String {
        let mut out = self.average.to_table(&format!(
            "average over test languages, {} seed(s)",
            self.runs.len()
        ));
        for (lang, spread) in &self.per_language {
            out.push('\n');
            out.push_str(&spread.to_table(lang));
        }
        out
    }
}

pub struct SeedRun {
    pub model: SluModel,
    pub record: RunRecord,
    pub result: SeedResult,
}

/// Trains and evaluates one seed.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> anyhow::Result<SeedRun> {
    let train_cfg = cfg.train_config(seed);
    let (model, record) = fit(&data.train, &data.dev, &data.lexicon, cfg.model, &train_cfg)
        .with_context(|| format!("training seed {seed}"))?;
    let report = zero_shot_report(&model, &data.tests)?;
    let source_test = data
        .source_test
        .as_ref()
        .filter(|c| !c.is_empty())
        .map(|c| evaluate(&model, c))
        .transpose()?;
    let alignment = alignment(cfg, data, &model, seed)?;
    let result = SeedResult {
        seed,
        selected_epoch: record.selected_epoch,
        dev_selection_value: record.selected_value,
        report,
        source_test,
        alignment,
    };
    Ok(SeedRun {
        model,
        record,
        result,
    })
}

fn alignment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: &SluModel,
    seed: u64,
) -> anyhow::Result<Option<AlignmentStats>> {
    let languages = &cfg.train.switch.languages;
    if languages.is_empty() || languages.iter().any(|l| !data.lexicon.has_language(l)) {
        return Ok(None);
    }
    let corpus = data.source_test.as_ref().unwrap_or(&data.dev);
    if corpus.len() < 2 {
        return Ok(None);
    }
    let salt = derive_seed(seed, ALIGNMENT_SALT);
    let policy = SwitchPolicy::new(cfg.train.switch.replace_prob, languages.clone(), salt);
    let pairs = augment_corpus(corpus, &data.lexicon, &policy)?;
    Ok(Some(cls_alignment(model, &pairs, derive_seed(salt, 1))?))
}

/// Runs every seed, at most `jobs` at a time. Results come back in seed-list
/// order whatever the scheduling.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    jobs: usize,
) -> anyhow::Result<Vec<SeedRun>> {
    let jobs = jobs.clamp(1, cfg.seeds.len());
    if jobs == 1 {
        return cfg.seeds.iter().map(|&s| run_seed(cfg, data, s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<anyhow::Result<SeedRun>>>> =
        cfg.seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let out = run_seed(cfg, data, seed);
                *slots[i].lock().expect("no poisoned slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("no poisoned slot")
                .unwrap_or_else(|| Err(anyhow!("a worker thread stopped early")))
        })
        .collect()
}

pub fn summarize(cfg: &ExperimentConfig, runs: &[SeedRun]) -> ExperimentSummary {
    let results: Vec<SeedResult> = runs.iter().map(|r| r.result.clone()).collect();
    let avgs: Vec<LangMetrics> = results.iter().map(|r| r.report.avg).collect();
    let mut per_language = BTreeMap::new();
    for rec in &results[0].report.languages {
        let values: Vec<LangMetrics> = results
            .iter()
            .filter_map(|r| r.report.get(&rec.lang).copied())
            .collect();
        per_language.insert(rec.lang.clone(), MetricSpread::of(&values));
    }
    ExperimentSummary {
        config: cfg.clone(),
        runs: results,
        average: MetricSpread::of(&avgs),
        per_language,
    }
}

/// Writes `config.json`, one `seed-<s>/` directory per seed and the summary.
pub fn write_experiment(
    out: &Path,
    cfg: &ExperimentConfig,
    runs: &[SeedRun],
) -> anyhow::Result<ExperimentSummary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    for run in runs {
        let dir = out.join(format!("seed-{}", run.result.seed));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        run.model.save(dir.join("model.json"))?;
        write_json(&dir.join("run.json"), &run.record)?;
        write_json(&dir.join("report.json"), &run.result)?;
    }
    let summary = summarize(cfg, runs);
    write_json(&out.join("summary.json"), &summary)?;
    std::fs::write(out.join("summary.txt"), summary.to_table())?;
    Ok(summary)
}
