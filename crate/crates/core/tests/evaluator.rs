mod common;

use std::collections::BTreeSet;

use asl2pet::evaluator::{
    ablate, anova_rm, baseline, build_report, crossvalidate, folds, render_csv, render_jsonl, render_table, write_report,
    AblationConfig, Condition, EvalError,
};
use asl2pet::model::ModelConfig;
use asl2pet::nn::Adam;
use asl2pet::trainer::TrainSchedule;
use common::{corpus, tiny_model};
use proptest::prelude::*;

fn schedule() -> TrainSchedule {
    TrainSchedule {
        total_iterations: 8,
        batch_size: 2,
        optimizer: Adam {
            lr: 1e-3,
            ..Adam::default()
        },
        ..TrainSchedule::default()
    }
}

#[test]
fn crossvalidation_holds_out_every_paired_subject_once() {
    let (_d, h) = corpus(6, 4, 16, 1);
    let results = crossvalidate(&h, 3, &AblationConfig::REFERENCE, &tiny_model(), &schedule()).unwrap();
    assert_eq!(results.len(), 3);
    let mut seen = BTreeSet::new();
    for (i, f) in results.iter().enumerate() {
        assert_eq!(f.fold_id, i);
        assert_eq!(f.records.len(), f.validation_subjects.len());
        for r in &f.records {
            assert!(seen.insert(r.subject), "subject {} held out twice", r.subject);
            assert_eq!(r.condition, if r.subject % 2 == 1 { Condition::Activated } else { Condition::Resting });
            assert!((-1.0..=1.0).contains(&r.ssim) && r.mse >= 0.0);
        }
        let n = f.aggregates.activated.ssim.n + f.aggregates.resting.ssim.n;
        assert_eq!(n, f.aggregates.all.ssim.n);
    }
    assert_eq!(seen, (0..6).collect());
}

#[test]
fn configurations_share_splits() {
    let (_d, h) = corpus(6, 4, 16, 2);
    let configs = [AblationConfig::new(true, false, false, false), AblationConfig::REFERENCE];
    let results = ablate(&h, 3, &configs, &tiny_model(), &schedule()).unwrap();
    let splits = |i: usize| -> Vec<Vec<u64>> { results[i].folds.iter().map(|f| f.validation_subjects.clone()).collect() };
    assert_eq!(splits(0), splits(1));
    let ids: Vec<u64> = h.paired().map(|s| s.id).collect();
    assert_eq!(splits(0), folds(&ids, 3, schedule().seed).unwrap());
    assert!(results[0].parameters < results[1].parameters);

    let report = build_report(results, h.digest(), 3, &tiny_model(), &schedule()).unwrap();
    assert_eq!(report.contrasts.len(), 1);
    assert!(report.omnibus.is_some());
    let c = &report.contrasts[0];
    assert_eq!(c.significant, c.p < 0.05);
    let table = render_table(&report);
    assert!(table.contains("M-T1-RA-DA") && table.contains("M+T1+RA+DA"));
    assert!(!render_jsonl(&report).is_empty() && render_csv(&report).lines().count() > 1);
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(dir.path(), &report).unwrap();
    for p in [&files.jsonl, &files.table, &files.csv] {
        assert!(p.exists());
        let name = p.file_name().unwrap().to_string_lossy();
        assert!(name.starts_with(&format!("report-{}-{}", &report.settings_digest[..12], &h.digest()[..12])));
    }
}

#[test]
fn illegal_rows_and_small_corpora_are_rejected() {
    let (_d, h) = corpus(2, 2, 16, 3);
    let bad = AblationConfig::new(false, true, true, true);
    assert!(matches!(
        crossvalidate(&h, 2, &bad, &tiny_model(), &schedule()),
        Err(EvalError::InvalidAblation(_))
    ));
    assert!(matches!(
        crossvalidate(&h, 3, &AblationConfig::REFERENCE, &tiny_model(), &schedule()),
        Err(EvalError::TooFewSubjects { needed: 3, available: 2 })
    ));
}

#[test]
fn baseline_scores_the_asl_input() {
    let (_d, h) = corpus(3, 0, 16, 4);
    let records = baseline(&h, &[0, 1, 2]).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.ssim < 1.0 && r.mse > 0.0));
}

#[test]
fn base_model_switches_are_overridden_per_row() {
    let base = ModelConfig {
        base_channels: 6,
        ..ModelConfig::default()
    };
    for c in AblationConfig::ALL {
        let m = c.model_config(&base);
        assert_eq!(m.base_channels, 6);
        assert_eq!(AblationConfig::from_model(&m), c);
    }
}

/// Sums of squares for a subjects-by-configs table, accumulated cell by cell.
fn anova_oracle(t: &[Vec<f64>]) -> f64 {
    let (n, k) = (t.len(), t[0].len());
    let mut grand = 0.0;
    for row in t {
        for v in row {
            grand += v;
        }
    }
    grand /= (n * k) as f64;
    let mut ss_total = 0.0;
    let mut ss_treat = 0.0;
    let mut ss_subj = 0.0;
    for j in 0..k {
        let mut m = 0.0;
        for row in t {
            m += row[j];
        }
        ss_treat += n as f64 * (m / n as f64 - grand).powi(2);
    }
    for row in t {
        let m: f64 = row.iter().sum::<f64>() / k as f64;
        ss_subj += k as f64 * (m - grand).powi(2);
        for v in row {
            ss_total += (v - grand).powi(2);
        }
    }
    let ss_err = ss_total - ss_treat - ss_subj;
    (ss_treat / (k - 1) as f64) / (ss_err / ((n - 1) * (k - 1)) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn anova_f_matches_total_decomposition(cells in proptest::collection::vec(0.0f64..1.0, 16)) {
        let t: Vec<Vec<f64>> = cells.chunks(4).map(<[f64]>::to_vec).collect();
        let a = anova_rm(&t).unwrap();
        let want = anova_oracle(&t);
        prop_assert!((a.f - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", a.f, want);
        prop_assert!((0.0..=1.0).contains(&a.p));
    }
}
