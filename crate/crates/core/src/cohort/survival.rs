use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::CohortError;
use crate::stats::chi2_sf;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
}

/// Value of the product-limit curve just after `time`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
    pub censored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// One point per distinct event time, ascending.
    pub points: Vec<KmPoint>,
    /// Censoring times, ascending, for tick marks.
    pub censor_times: Vec<f64>,
}

impl KmCurve {
    /// Right-continuous step function, 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.time <= t)
            .last()
            .map_or(1.0, |p| p.survival)
    }
}

fn check_records(records: &[SurvivalRecord]) -> Result<(), CohortError> {
    if records.is_empty() {
        return Err(CohortError::Empty("survival records"));
    }
    if records.iter().any(|r| !(r.time.is_finite() && r.time >= 0.0)) {
        return Err(CohortError::Shape("survival times must be finite and nonnegative".into()));
    }
    Ok(())
}

fn distinct_times(records: &[SurvivalRecord], events_only: bool) -> Vec<f64> {
    let mut t: Vec<f64> = records
        .iter()
        .filter(|r| r.event || !events_only)
        .map(|r| r.time)
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Kaplan–Meier product-limit estimator. Records censored at an event time
/// count as at risk for that event.
pub fn km_estimator(records: &[SurvivalRecord]) -> Result<KmCurve, CohortError> {
    check_records(records)?;
    let mut points = Vec::new();
    let mut s = 1.0;
    for t in distinct_times(records, true) {
        let at_risk = records.iter().filter(|r| r.time >= t).count();
        let events = records.iter().filter(|r| r.time == t && r.event).count();
        let censored = records.iter().filter(|r| r.time == t && !r.event).count();
        s *= 1.0 - events as f64 / at_risk as f64;
        points.push(KmPoint {
            time: t,
            survival: s,
            at_risk,
            events,
            censored,
        });
    }
    let mut censor_times: Vec<f64> = records.iter().filter(|r| !r.event).map(|r| r.time).collect();
    censor_times.sort_by(f64::total_cmp);
    Ok(KmCurve {
        points,
        censor_times,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub df: usize,
    pub p: f64,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

/// k-sample log-rank test: O − E per group over the pooled event times with
/// hypergeometric covariance; χ² with k − 1 degrees of freedom.
pub fn logrank_test(groups: &[Vec<SurvivalRecord>]) -> Result<LogRank, CohortError> {
    if groups.len() < 2 {
        return Err(CohortError::Shape("log-rank needs at least two groups".into()));
    }
    for g in groups {
        check_records(g)?;
    }
    let k = groups.len();
    let pooled: Vec<SurvivalRecord> = groups.iter().flatten().copied().collect();
    let mut observed = vec![0.0; k];
    let mut expected = vec![0.0; k];
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for t in distinct_times(&pooled, true) {
        let n_g: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().filter(|r| r.time >= t).count() as f64)
            .collect();
        let d_g: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().filter(|r| r.time == t && r.event).count() as f64)
            .collect();
        let n: f64 = n_g.iter().sum();
        let d: f64 = d_g.iter().sum();
        for j in 0..k {
            observed[j] += d_g[j];
            expected[j] += d * n_g[j] / n;
        }
        if n > 1.0 {
            let f = d * (n - d) / (n - 1.0);
            for j in 0..k {
                for l in 0..k {
                    let delta = if j == l { 1.0 } else { 0.0 };
                    cov[(j, l)] += f * n_g[j] / n * (delta - n_g[l] / n);
                }
            }
        }
    }
    let df = k - 1;
    let diff = DVector::from_iterator(df, (0..df).map(|j| observed[j] - expected[j]));
    let v = cov.view((0, 0), (df, df)).into_owned();
    let chi2 = match v.clone().try_inverse() {
        Some(inv) if observed.iter().sum::<f64>() > 0.0 => (diff.transpose() * inv * &diff)[(0, 0)].max(0.0),
        _ => match v.pseudo_inverse(1e-12) {
            Ok(pinv) if observed.iter().sum::<f64>() > 0.0 => (diff.transpose() * pinv * &diff)[(0, 0)].max(0.0),
            _ => 0.0,
        },
    };
    Ok(LogRank {
        chi2,
        df,
        p: chi2_sf(chi2, df as f64),
        observed,
        expected,
    })
}
