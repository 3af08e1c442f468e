//! One-way repeated-measures ANOVA.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_treatment: f64,
    pub df_error: f64,
    pub ss_treatment: f64,
    pub ss_subjects: f64,
    pub ss_error: f64,
}

impl AnovaResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

/// `table[i][j]` is the score of subject (slice) `i` under treatment `j`.
///
/// F = (SS_treatment / (k-1)) / (SS_error / ((k-1)(n-1))) with
/// SS_error = SS_total - SS_treatment - SS_subjects (summed from the interaction residuals). A table with no treatment effect gives
/// F = 0, p = 1; a treatment effect with no residual noise gives F = inf, p = 0; a constant
/// table is rejected.
pub fn anova_rm(table: &[Vec<f64>]) -> Result<AnovaResult, EvalError> {
    let n = table.len();
    let k = table.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(EvalError::DegenerateInput(format!("need at least 2 configurations, got {k}")));
    }
    if n < 3 {
        return Err(EvalError::DegenerateInput(format!("need at least 3 subjects, got {n}")));
    }
    if table.iter().any(|row| row.len() != k) {
        return Err(EvalError::DegenerateInput("ragged table (missing cells)".into()));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::DegenerateInput("non-finite cell".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = table.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let ss_treatment = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_subjects = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_error: f64 = table
        .iter()
        .zip(&row_means)
        .flat_map(|(row, rm)| row.iter().zip(&col_means).map(move |(x, cm)| (x - rm - cm + grand).powi(2)))
        .sum();
    let df_treatment = kf - 1.0;
    let df_error = (kf - 1.0) * (nf - 1.0);
    let scale = table.iter().flatten().fold(0.0f64, |m, v| m.max((v - grand).abs()));
    if scale == 0.0 {
        return Err(EvalError::DegenerateInput(
            "no variance at all: every cell is identical".into(),
        ));
    }
    let tiny = 1e-24 * scale * scale * nf * kf;
    let (f, p) = if ss_treatment <= tiny {
        (0.0, 1.0)
    } else if ss_error <= tiny {
        (f64::INFINITY, 0.0)
    } else {
        let f = (ss_treatment / df_treatment) / (ss_error / df_error);
        let dist = FisherSnedecor::new(df_treatment, df_error).expect("positive degrees of freedom");
        (f, dist.sf(f))
    };
    Ok(AnovaResult {
        f,
        p,
        df_treatment,
        df_error,
        ss_treatment,
        ss_subjects,
        ss_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook decomposition with separately accumulated sums of squares.
    fn oracle_f(t: &[Vec<f64>]) -> f64 {
        let n = t.len();
        let k = t[0].len();
        let mut total = 0.0;
        for r in t {
            for v in r {
                total += v;
            }
        }
        let g = total / (n * k) as f64;
        let mut ss_total = 0.0;
        for r in t {
            for v in r {
                ss_total += (v - g) * (v - g);
            }
        }
        let mut ss_tr = 0.0;
        for j in 0..k {
            let mut s = 0.0;
            for r in t {
                s += r[j];
            }
            let d = s / n as f64 - g;
            ss_tr += n as f64 * d * d;
        }
        let mut ss_sub = 0.0;
        for r in t {
            let d = r.iter().sum::<f64>() / k as f64 - g;
            ss_sub += k as f64 * d * d;
        }
        let ss_err = ss_total - ss_tr - ss_sub;
        (ss_tr / (k - 1) as f64) / (ss_err / ((k - 1) * (n - 1)) as f64)
    }

    #[test]
    fn hand_computed_three_by_two() {
        // subjects 1..3, treatments A, B
        let t = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 3.0]];
        // grand 2.5; col means 2, 3 -> SS_tr = 3*(0.25+0.25) = 1.5
        // row means 1.5, 3, 3 -> SS_sub = 2*(1+0.25+0.25) = 3
        // SS_total = 2.25+0.25+0.25+2.25+0.25+0.25 = 5.5 -> SS_err = 1
        // F = (1.5/1) / (1/2) = 3
        let r = anova_rm(&t).unwrap();
        assert!((r.f - 3.0).abs() < 1e-12);
        assert!((r.f - oracle_f(&t)).abs() < 1e-9);
        assert_eq!((r.df_treatment, r.df_error), (1.0, 2.0));
        // F(1, 2) = t^2 with 2 dof, whose two-sided tail is 1 - |t| / sqrt(2 + t^2)
        assert!((r.p - (1.0 - (3.0f64 / 5.0).sqrt())).abs() < 1e-9);
    }

    #[test]
    fn identical_configs_give_zero_f() {
        let t = vec![vec![0.5, 0.5, 0.5], vec![0.7, 0.7, 0.7], vec![0.2, 0.2, 0.2]];
        let r = anova_rm(&t).unwrap();
        assert_eq!((r.f, r.p), (0.0, 1.0));
    }

    #[test]
    fn degenerate_tables() {
        assert!(anova_rm(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
        assert!(anova_rm(&[vec![1.0, 2.0], vec![1.0, 2.0]]).is_err());
        assert!(anova_rm(&[vec![1.0], vec![1.0], vec![2.0]]).is_err());
        let exact = anova_rm(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!((exact.f, exact.p), (f64::INFINITY, 0.0));
    }

    fn table(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, k), n)
    }

    proptest! {
        #[test]
        fn matches_oracle(t in (3usize..=4, 2usize..=4).prop_flat_map(|(n, k)| table(n, k))) {
            let r = anova_rm(&t).unwrap();
            let o = oracle_f(&t);
            prop_assert!((r.f - o).abs() <= 1e-9 * o.abs().max(1.0), "{} vs {}", r.f, o);
            prop_assert!((0.0..=1.0).contains(&r.p));
        }

        #[test]
        fn shift_invariant(t in table(4, 4), c in -5.0f64..5.0) {
            let shifted: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
            let a = anova_rm(&t).unwrap();
            let b = anova_rm(&shifted).unwrap();
            prop_assert!((a.f - b.f).abs() <= 1e-9 * a.f.abs().max(1.0));
        }

        #[test]
        fn shift_invariant_exactly_on_dyadic_tables(
            cells in proptest::collection::vec(0u32..32, 16),
            c in -8i32..8,
        ) {
            let t: Vec<Vec<f64>> = cells.chunks(4).map(|r| r.iter().map(|&v| f64::from(v) / 8.0).collect()).collect();
            let shifted: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v + f64::from(c)).collect()).collect();
            match (anova_rm(&t), anova_rm(&shifted)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.f.to_bits(), b.f.to_bits()),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "shift changed degeneracy"),
            }
        }
    }
}
