//! Multi-seed summaries.

use glclef::metrics::LangMetrics;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median, Statistics};

/// Spread of one metric across seeds. `stdev` is the sample standard
/// deviation and is absent for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub stdev: Option<f64>,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl Spread {
    /// Panics on an empty slice.
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "spread of no values");
        let stdev = (values.len() > 1).then(|| values.iter().std_dev());
        Spread {
            median: Data::new(values.to_vec()).median(),
            stdev,
            min: Statistics::min(values.iter()),
            max: Statistics::max(values.iter()),
            values: values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub intent_acc: Spread,
    pub slot_f1: Spread,
    pub overall_acc: Spread,
}

impl MetricSpread {
    pub fn of(runs: &[LangMetrics]) -> Self {
        let pick = |f: fn(&LangMetrics) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
        MetricSpread {
            intent_acc: pick(|m| m.intent_acc),
            slot_f1: pick(|m| m.slot_f1),
            overall_acc: pick(|m| m.overall_acc),
        }
    }

    pub fn to_table(&self, title: &str) -> String {
        let fmt_sd = |s: &Spread| s.stdev.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = format!("{title}\n{:<12} {:>8} {:>8} {:>8} {:>8}\n", "metric", "median", "stdev", "min", "max");
        for (name, s) in [
            ("intent_acc", &self.intent_acc),
            ("slot_f1", &self.slot_f1),
            ("overall_acc", &self.overall_acc),
        ] {
            out.push_str(&format!(
                "{name:<12} {:>8.2} {:>8} {:>8.2} {:>8.2}\n",
                100.0 * s.median,
                fmt_sd(s),
                100.0 * s.min,
                100.0 * s.max
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_known_values() {
        let s = Spread::of(&[0.2, 0.6, 0.4, 0.8]);
        assert!((s.median - 0.5).abs() < 1e-12);
        // sample variance of {0.2, 0.4, 0.6, 0.8} is 0.2 / 3
        assert!((s.stdev.unwrap() - (0.2f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.min, s.max), (0.2, 0.8));
        let one = Spread::of(&[0.3]);
        assert_eq!(one.median, 0.3);
        assert_eq!(one.stdev, None);
    }

    #[test]
    fn table_lists_every_metric() {
        let m = LangMetrics {
            intent_acc: 0.5,
            slot_f1: 0.25,
            overall_acc: 0.125,
        };
        let t = MetricSpread::of(&[m, m]).to_table("avg");
        assert!(t.contains("intent_acc") && t.contains("slot_f1") && t.contains("overall_acc"));
        assert!(t.contains("12.50"));
    }
}
