//! Ablation report: JSON-lines records, a plain-text table and a CSV table.
//!
//! Reports contain no timestamps or wall times, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{anova_rm, AblationConfig, AblationResult, AnovaResult, Condition, EvalError, MetricSummaries, Summary};
use crate::model::ModelConfig;
use crate::trainer::TrainSchedule;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const REPORT_FORMAT: &str = "ASL2PET-REPORT v1";

const SSIM_NOTE: &str = "SSIM is computed per slice (11x11 Gaussian window, sigma 1.5, k1 0.01, k2 0.03, L 1) and then averaged";
const CONTRAST_NOTE: &str = "omnibus: one-way repeated-measures ANOVA on per-slice SSIM over all listed configurations; \
     '*' marks p < 0.05 in a two-configuration repeated-measures ANOVA against M+T1+RA+DA on the same slices";

/// Two-configuration repeated-measures test against the reference row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Contrast {
    pub config: AblationConfig,
    pub reference: AblationConfig,
    pub f: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub corpus_digest: String,
    pub settings_digest: String,
    pub k: usize,
    pub base_model: ModelConfig,
    pub schedule: TrainSchedule,
    pub results: Vec<AblationResult>,
    pub omnibus: Option<AnovaResult>,
    pub contrasts: Vec<Contrast>,
}

impl Report {
    pub fn contrast(&self, config: &AblationConfig) -> Option<&Contrast> {
        self.contrasts.iter().find(|c| c.config == *config)
    }
}

/// Subject-by-configuration SSIM table over the subjects every configuration scored.
fn ssim_table(results: &[&AblationResult]) -> Result<Vec<Vec<f64>>, EvalError> {
    let per_config: Vec<BTreeMap<u64, f64>> = results
        .iter()
        .map(|r| r.records().map(|rec| (rec.subject, rec.ssim)).collect())
        .collect();
    let subjects: Vec<u64> = per_config[0].keys().copied().collect();
    if per_config.iter().any(|m| m.keys().ne(subjects.iter())) {
        return Err(EvalError::DegenerateInput(
            "configurations were scored on different subjects".into(),
        ));
    }
    Ok(subjects
        .iter()
        .map(|s| per_config.iter().map(|m| m[s]).collect())
        .collect())
}

fn settings_digest(configs: &[AblationConfig], k: usize, base: &ModelConfig, schedule: &TrainSchedule) -> String {
    let tags: Vec<String> = configs.iter().map(ToString::to_string).collect();
    let settings = json!({ "configs": tags, "k": k, "base_model": base, "schedule": schedule });
    hex::encode(Sha256::digest(settings.to_string().as_bytes()))
}

pub fn build_report(
    results: Vec<AblationResult>,
    corpus_digest: &str,
    k: usize,
    base: &ModelConfig,
    schedule: &TrainSchedule,
) -> Result<Report, EvalError> {
    if results.is_empty() {
        return Err(EvalError::DegenerateInput("no ablation results".into()));
    }
    let configs: Vec<AblationConfig> = results.iter().map(|r| r.config).collect();
    let all: Vec<&AblationResult> = results.iter().collect();
    let omnibus = if results.len() >= 2 {
        match anova_rm(&ssim_table(&all)?) {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!("omnibus test skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    let mut contrasts = Vec::new();
    if let Some(reference) = results.iter().find(|r| r.config == AblationConfig::REFERENCE) {
        for r in results.iter().filter(|r| r.config != AblationConfig::REFERENCE) {
            match anova_rm(&ssim_table(&[r, reference])?) {
                Ok(a) => contrasts.push(Contrast {
                    config: r.config,
                    reference: reference.config,
                    f: a.f,
                    p: a.p,
                    significant: a.significant(SIGNIFICANCE_LEVEL),
                }),
                Err(e) => log::warn!("contrast {} skipped: {e}", r.config),
            }
        }
    }
    Ok(Report {
        corpus_digest: corpus_digest.to_string(),
        settings_digest: settings_digest(&configs, k, base, schedule),
        k,
        base_model: base.clone(),
        schedule: schedule.clone(),
        results,
        omnibus,
        contrasts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub jsonl: PathBuf,
    pub table: PathBuf,
    pub csv: PathBuf,
}

fn short(d: &str) -> &str {
    &d[..d.len().min(12)]
}

pub fn report_stem(report: &Report) -> String {
    format!("report-{}-{}", short(&report.settings_digest), short(&report.corpus_digest))
}

fn condition_columns() -> [(&'static str, fn(&super::Aggregates) -> MetricSummaries); 3] {
    [
        (Condition::Activated.label(), |a| a.activated),
        (Condition::Resting.label(), |a| a.resting),
        ("all", |a| a.all),
    ]
}

fn pm(s: &Summary, digits: usize) -> String {
    format!("{:.*}±{:.*}", digits, s.mean, digits, s.sd)
}

pub fn render_jsonl(report: &Report) -> String {
    let mut out = String::new();
    let mut line = |v: serde_json::Value| {
        out.push_str(&v.to_string());
        out.push('\n');
    };
    line(json!({
        "kind": "header",
        "format": REPORT_FORMAT,
        "corpus_digest": report.corpus_digest,
        "settings_digest": report.settings_digest,
        "k": report.k,
        "base_model": report.base_model,
        "schedule": report.schedule,
        "ssim": SSIM_NOTE,
        "significance": CONTRAST_NOTE,
    }));
    for r in &report.results {
        for f in &r.folds {
            for rec in &f.records {
                line(json!({
                    "kind": "record",
                    "config": r.config.to_string(),
                    "fold": f.fold_id,
                    "subject": rec.subject,
                    "condition": rec.condition,
                    "ssim": rec.ssim,
                    "mse": rec.mse,
                    "psnr": rec.psnr,
                }));
            }
            line(json!({
                "kind": "fold",
                "config": r.config.to_string(),
                "fold": f.fold_id,
                "validation_subjects": f.validation_subjects,
                "aggregates": f.aggregates,
            }));
        }
        line(json!({
            "kind": "aggregate",
            "config": r.config.to_string(),
            "parameters": r.parameters,
            "aggregates": r.pooled(),
        }));
    }
    if let Some(a) = &report.omnibus {
        line(json!({ "kind": "anova", "test": "omnibus", "result": a }));
    }
    for c in &report.contrasts {
        line(json!({
            "kind": "contrast",
            "config": c.config.to_string(),
            "reference": c.reference.to_string(),
            "f": c.f,
            "p": c.p,
            "significant": c.significant,
        }));
    }
    out
}

pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {REPORT_FORMAT}");
    let _ = writeln!(out, "# corpus {} settings {}", report.corpus_digest, report.settings_digest);
    let _ = writeln!(out, "# {}-fold cross-validation, {} iterations, batch {}", report.k, report.schedule.total_iterations, report.schedule.batch_size);
    let _ = writeln!(out, "# {SSIM_NOTE}");
    let _ = writeln!(out, "# {CONTRAST_NOTE}");
    let mut header = format!("{:<13} {:>9}", "config", "params");
    for (label, _) in condition_columns() {
        let _ = write!(header, " | {label:^44}");
    }
    let _ = writeln!(out, "{header}");
    let mut sub = format!("{:<13} {:>9}", "", "");
    for _ in condition_columns() {
        let _ = write!(sub, " | {:>15} {:>13} {:>14}", "SSIM", "MSE", "PSNR");
    }
    let _ = writeln!(out, "{sub}");
    for r in &report.results {
        let star = if report.contrast(&r.config).is_some_and(|c| c.significant) { "*" } else { "" };
        let mut row = format!("{:<13} {:>9}", format!("{}{star}", r.config), r.parameters);
        let agg = r.pooled();
        for (_, pick) in condition_columns() {
            let m = pick(&agg);
            let _ = write!(row, " | {:>15} {:>13} {:>14}", pm(&m.ssim, 4), pm(&m.mse, 4), pm(&m.psnr, 2));
        }
        let _ = writeln!(out, "{row}");
    }
    if let Some(a) = &report.omnibus {
        let _ = writeln!(out, "omnibus F({}, {}) = {:.4}, p = {:.4}", a.df_treatment, a.df_error, a.f, a.p);
    }
    for c in &report.contrasts {
        let _ = writeln!(out, "{} vs {}: F = {:.4}, p = {:.4}{}", c.config, c.reference, c.f, c.p, if c.significant { " *" } else { "" });
    }
    out
}

pub fn render_csv(report: &Report) -> String {
    let mut out = String::from(
        "config,parameters,condition,n,ssim_mean,ssim_sd,mse_mean,mse_sd,psnr_mean,psnr_sd,significant\n",
    );
    for r in &report.results {
        let agg = r.pooled();
        let sig = report.contrast(&r.config).map_or(String::new(), |c| c.significant.to_string());
        for (label, pick) in condition_columns() {
            let m = pick(&agg);
            let _ = writeln!(
                out,
                "{},{},\"{}\",{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{}",
                r.config, r.parameters, label, m.ssim.n, m.ssim.mean, m.ssim.sd, m.mse.mean, m.mse.sd, m.psnr.mean, m.psnr.sd, sig
            );
        }
    }
    out
}

/// Write the three report files into `dir`; names embed the settings and corpus digests.
pub fn write_report(dir: &Path, report: &Report) -> Result<ReportFiles, EvalError> {
    let io = |p: &Path, source| EvalError::Io {
        path: p.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let stem = report_stem(report);
    let files = ReportFiles {
        jsonl: dir.join(format!("{stem}.jsonl")),
        table: dir.join(format!("{stem}.txt")),
        csv: dir.join(format!("{stem}.csv")),
    };
    for (path, body) in [
        (&files.jsonl, render_jsonl(report)),
        (&files.table, render_table(report)),
        (&files.csv, render_csv(report)),
    ] {
        fs::write(path, body).map_err(|e| io(path, e))?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::super::{FoldResult, SliceRecord};
    use super::*;

    fn result(config: AblationConfig, offset: f64) -> AblationResult {
        let folds = (0..2)
            .map(|f| {
                let records = (0..3)
                    .map(|i| {
                        let subject = (f * 3 + i) as u64;
                        let ssim = 0.5 + 0.05 * i as f64 + offset + 0.01 * subject as f64 * offset;
                        SliceRecord {
                            subject,
                            condition: if subject % 2 == 1 { Condition::Activated } else { Condition::Resting },
                            ssim,
                            mse: 0.01 * (1.0 + i as f64),
                            psnr: 20.0 + i as f64,
                        }
                    })
                    .collect();
                FoldResult::new(f, vec![(f * 3) as u64, (f * 3 + 1) as u64, (f * 3 + 2) as u64], records)
            })
            .collect();
        AblationResult {
            config,
            parameters: 1000,
            folds,
        }
    }

    fn sample() -> Report {
        let results = vec![
            result(AblationConfig::new(true, false, false, false), 0.0),
            result(AblationConfig::REFERENCE, 0.1),
        ];
        build_report(results, "abc", 2, &ModelConfig::default(), &TrainSchedule::default()).unwrap()
    }

    #[test]
    fn pooled_mean_is_slice_weighted_fold_mean() {
        let r = result(AblationConfig::REFERENCE, 0.0);
        let weighted: f64 = r
            .folds
            .iter()
            .map(|f| f.aggregates.all.ssim.mean * f.records.len() as f64)
            .sum::<f64>()
            / r.records().count() as f64;
        assert!((r.pooled().all.ssim.mean - weighted).abs() < 1e-12);
    }

    #[test]
    fn stars_follow_contrast_decisions() {
        let report = sample();
        let table = render_table(&report);
        let c = &report.contrasts[0];
        let row = table.lines().find(|l| l.starts_with("M-T1-RA-DA")).unwrap();
        assert_eq!(row.starts_with("M-T1-RA-DA*"), c.significant);
        assert_eq!(c.significant, c.p < SIGNIFICANCE_LEVEL);
        assert!(!table.lines().any(|l| l.starts_with("M+T1+RA+DA*")));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = sample();
        let b = sample();
        assert_eq!(render_jsonl(&a), render_jsonl(&b));
        assert_eq!(render_table(&a), render_table(&b));
        assert_eq!(render_csv(&a), render_csv(&b));
        assert!(report_stem(&a).starts_with("report-"));
    }
}
