//! Experiment reports: structured JSON plus aligned text tables, and a
//! self-consistency audit that recomputes every aggregate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{CorruptionEval, DetectionEval, ProbeEval, Scorer};
use super::export::ExportEval;
use super::train::EpochLog;
use crate::data::SplitManifest;
use crate::error::{Error, Result};
use crate::metrics::{corruption_aggregates, DetectionMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrialDetection {
    pub trial: usize,
    pub eval: DetectionEval,
}

/// Per-trial detection results and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DetectionSummary {
    pub scorer: Scorer,
    pub k: Option<usize>,
    pub per_trial: Vec<TrialDetection>,
    pub mean: DetectionMetrics,
}

/// Componentwise mean, summed in trial order.
pub fn mean_metrics(all: &[DetectionMetrics]) -> DetectionMetrics {
    let n = all.len().max(1) as f64;
    let avg = |f: fn(&DetectionMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    DetectionMetrics {
        auroc: avg(|m| m.auroc),
        tnr_at_tpr95: avg(|m| m.tnr_at_tpr95),
        dtacc: avg(|m| m.dtacc),
        auin: avg(|m| m.auin),
        auout: avg(|m| m.auout),
    }
}

impl DetectionSummary {
    pub fn from_trials(per_trial: Vec<TrialDetection>) -> Result<Self> {
        let first = per_trial.first().ok_or_else(|| Error::invalid("no trials to summarize"))?;
        let (scorer, k) = (first.eval.scorer, first.eval.k);
        if per_trial.iter().any(|t| t.eval.scorer != scorer || t.eval.k != k) {
            return Err(Error::invalid("trials disagree on scorer or k"));
        }
        let mean = mean_metrics(&per_trial.iter().map(|t| t.eval.metrics.clone()).collect::<Vec<_>>());
        Ok(DetectionSummary { scorer, k, per_trial, mean })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainTrial {
    pub trial: usize,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Timing {
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct Report {
    pub command: String,
    /// Config of each trial, in trial order.
    pub configs: Vec<RunConfig>,
    pub manifests: Vec<SplitManifest>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub training: Vec<TrainTrial>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export: Option<ExportEval>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Kept apart so the rest of the report is reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// Left-aligned first column, right-aligned numbers.
fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([headers[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = width[c]) } else { format!("{s:>w$}", w = width[c]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn metric_row(label: String, m: &DetectionMetrics) -> Vec<String> {
    vec![label, pct(m.auroc), pct(m.tnr_at_tpr95), pct(m.dtacc), pct(m.auin), pct(m.auout)]
}

fn audit_fail(msg: String) -> Error {
    Error::Invalid(format!("report audit failed: {msg}"))
}

impl Report {
    pub fn new(command: impl Into<String>) -> Self {
        Report { command: command.into(), ..Report::default() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON without wall-clock timing.
    pub fn deterministic_json(&self) -> Result<String> {
        Report { timing: None, ..self.clone() }.to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Write `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        Ok((json, txt))
    }

    /// Human-readable tables.
    pub fn to_table(&self) -> String {
        let mut out = format!("# {}\n", self.command);
        for m in &self.manifests {
            writeln!(
                out,
                "split {} trial {}: known {:?}, unknown {:?}, openness {:.2}%",
                m.protocol, m.trial, m.known_classes, m.unknown_classes, m.openness
            )
            .expect("string write");
        }
        if !self.training.is_empty() {
            let rows: Vec<Vec<String>> = self
                .training
                .iter()
                .map(|t| {
                    vec![
                        t.trial.to_string(),
                        t.seed.to_string(),
                        t.epochs.len().to_string(),
                        format!("{:.4}", t.final_loss),
                    ]
                })
                .collect();
            out.push('\n');
            out.push_str(&table(&["trial", "seed", "epochs", "final loss"], &rows));
        }
        if let Some(d) = &self.detection {
            let k = d.k.map(|k| format!(", k = {k}")).unwrap_or_default();
            writeln!(out, "\ndetection ({:?}{k}), values in %", d.scorer).expect("string write");
            let mut rows: Vec<Vec<String>> =
                d.per_trial.iter().map(|t| metric_row(format!("trial {}", t.trial), &t.eval.metrics)).collect();
            rows.push(metric_row("mean".into(), &d.mean));
            out.push_str(&table(&["", "AUROC", "TNR@TPR95", "DTACC", "AUIN", "AUOUT"], &rows));
        }
        if let Some(c) = &self.corruption {
            writeln!(out, "\ncorruption accuracy drop in points ({:?}), clean {}%", c.classifier, pct(c.grid.clean))
                .expect("string write");
            let mut rows: Vec<Vec<String>> = c
                .aggregates
                .drops
                .iter()
                .map(|(k, d)| {
                    let mut r = vec![k.clone()];
                    r.extend(d.iter().map(|&v| pct(v)));
                    r.push(pct(c.aggregates.per_type[k]));
                    r
                })
                .collect();
            let mut last = vec!["mean".to_string()];
            last.extend(c.aggregates.per_severity.iter().map(|&v| pct(v)));
            last.push(pct(c.aggregates.overall));
            rows.push(last);
            out.push_str(&table(&["type", "s1", "s2", "s3", "s4", "s5", "mean"], &rows));
        }
        if let Some(p) = &self.probe {
            writeln!(out, "\nlinear probe: {} classes, {} epochs", p.classes, p.epochs).expect("string write");
            let top5 = p.top5.map(pct).unwrap_or_else(|| "-".into());
            out.push_str(&table(&["", "top-1", "top-5"], &[vec!["accuracy %".into(), pct(p.top1), top5]]));
        }
        if let Some(e) = &self.export {
            writeln!(out, "\nactivated-area fraction by threshold").expect("string write");
            let mut headers = vec!["image/layer".to_string()];
            headers.extend(e.thresholds.iter().map(|t| format!("{t:.1e}")));
            let rows: Vec<Vec<String>> = e
                .maps
                .iter()
                .map(|m| {
                    let mut r = vec![format!("{}/{}", m.image, m.layer)];
                    r.extend(m.activated.iter().map(|v| format!("{v:.4}")));
                    r
                })
                .collect();
            out.push_str(&table(&headers.iter().map(String::as_str).collect::<Vec<_>>(), &rows));
        }
        for n in &self.notes {
            writeln!(out, "note: {n}").expect("string write");
        }
        if let Some(t) = &self.timing {
            writeln!(out, "\nwall clock {:.1}s", t.wall_clock_secs).expect("string write");
        }
        out
    }

    /// Recompute every aggregate from the values the report carries.
    /// Returns the names of the checks that ran.
    pub fn audit(&self) -> Result<Vec<String>> {
        let mut checks = Vec::new();
        if let Some(d) = &self.detection {
            if d.per_trial.is_empty() {
                return Err(audit_fail("detection mean without per-trial values".into()));
            }
            let again = mean_metrics(&d.per_trial.iter().map(|t| t.eval.metrics.clone()).collect::<Vec<_>>());
            if again != d.mean {
                return Err(audit_fail(format!("detection mean {:?} recomputes to {again:?}", d.mean)));
            }
            for t in &d.per_trial {
                let m = &t.eval.metrics;
                if [m.auroc, m.tnr_at_tpr95, m.dtacc, m.auin, m.auout].iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(audit_fail(format!("trial {} has a metric outside [0, 1]", t.trial)));
                }
                if t.eval.scorer != d.scorer || t.eval.k != d.k {
                    return Err(audit_fail(format!("trial {} scorer or k differs from the summary", t.trial)));
                }
            }
            checks.push("detection-mean".to_string());
        }
        if let Some(c) = &self.corruption {
            let again = corruption_aggregates(&c.grid).map_err(|e| audit_fail(e.to_string()))?;
            if again != c.aggregates {
                return Err(audit_fail("corruption aggregates do not match the per-cell accuracies".into()));
            }
            checks.push("corruption-aggregates".to_string());
        }
        if let Some(e) = &self.export {
            for m in &e.maps {
                if m.activated.len() != e.thresholds.len() {
                    return Err(audit_fail(format!("map {}/{} lacks thresholds", m.image, m.layer)));
                }
                let mut pairs: Vec<(f64, f64)> =
                    e.thresholds.iter().copied().zip(m.activated.iter().copied()).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                if pairs.windows(2).any(|w| w[1].1 > w[0].1) {
                    return Err(audit_fail(format!("activated area of {}/{} increases with τ", m.image, m.layer)));
                }
            }
            checks.push("activated-area-monotone".to_string());
        }
        if let Some(p) = &self.probe {
            if !(0.0..=1.0).contains(&p.top1) || p.top5.is_some_and(|t5| t5 < p.top1) {
                return Err(audit_fail("probe accuracies are inconsistent".into()));
            }
            checks.push("probe-range".to_string());
        }
        for t in &self.training {
            if t.epochs.last().map(|e| e.mean_loss) != Some(t.final_loss) {
                return Err(audit_fail(format!("trial {} final loss disagrees with its epoch log", t.trial)));
            }
        }
        if !self.training.is_empty() {
            checks.push("training-final-loss".to_string());
        }
        Ok(checks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CorruptionGrid;
    use crate::runner::eval::Classifier;

    fn metrics(a: f64) -> DetectionMetrics {
        DetectionMetrics { auroc: a, tnr_at_tpr95: a / 2.0, dtacc: 0.7, auin: 0.8, auout: 0.6 }
    }

    fn det(trial: usize, a: f64) -> TrialDetection {
        TrialDetection {
            trial,
            eval: DetectionEval {
                scorer: Scorer::Knn,
                k: Some(3),
                metrics: metrics(a),
                n_in: 4,
                n_out: 2,
                degenerate: 0,
            },
        }
    }

    fn sample() -> Report {
        let mut r = Report::new("eval-osr");
        r.detection = Some(DetectionSummary::from_trials(vec![det(0, 0.9), det(1, 0.8), det(2, 0.85)]).unwrap());
        let mut grid = CorruptionGrid::new(0.9);
        for s in 1..=5 {
            grid.set("gaussian", s, 0.9 - 0.05 * f64::from(s));
            grid.set("contrast", s, 0.85);
        }
        let aggregates = corruption_aggregates(&grid).unwrap();
        r.corruption = Some(CorruptionEval { classifier: Classifier::KnnLabel, grid, aggregates });
        r.timing = Some(Timing { wall_clock_secs: 1.5 });
        r
    }

    #[test]
    fn audit_passes_and_detects_tampering() {
        let r = sample();
        assert_eq!(r.audit().unwrap(), vec!["detection-mean", "corruption-aggregates"]);
        let mut bad = r.clone();
        bad.detection.as_mut().unwrap().mean.auroc += 1e-9;
        assert!(bad.audit().is_err());
        let mut bad = r.clone();
        bad.corruption.as_mut().unwrap().grid.set("gaussian", 3, 0.1);
        assert!(bad.audit().is_err());
    }

    #[test]
    fn json_round_trip_and_tables() {
        let r = sample();
        let back = Report::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        back.audit().unwrap();
        assert!(!r.deterministic_json().unwrap().contains("wall-clock"));
        let t = r.to_table();
        assert!(t.contains("mean") && t.contains("AUROC") && t.contains("k = 3"));
        let widths: Vec<usize> = t.lines().skip_while(|l| !l.contains("AUROC")).take(3).map(str::len).collect();
        assert_eq!(widths[0], widths[2]);
    }
}
