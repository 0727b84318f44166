//! Aggregation of per-preference metrics into density strata.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::preferences::{classify_density, Density};
use crate::types::PreferenceWeights;

/// Metrics of one method on one preference under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub seed: u64,
    /// Training demonstrations per preference behind the evaluated model.
    #[serde(default)]
    pub demos_per_preference: usize,
    pub preference: PreferenceWeights,
    pub win_rate: f64,
    pub reward_variance: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Standard error across seeds; 0 for a single seed.
    pub se: f64,
}

impl Stat {
    /// Mean and standard error (sample deviation over √n) of per-seed values.
    pub fn over_seeds(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        };
        Stat { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stratum: Density,
    pub method: String,
    pub n_preferences: usize,
    pub n_seeds: usize,
    /// `None` when the stratum holds no evaluated preference.
    pub win_rate: Option<Stat>,
    pub reward_variance: Option<Stat>,
    pub regret: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    /// With a single seed every standard error is 0 by convention.
    pub single_seed: bool,
    /// One row per (stratum, method), strata outermost.
    pub rows: Vec<ReportRow>,
}

/// Per-seed means over the preferences matching `keep`, for one method.
pub fn seed_means(
    records: &[EvalRecord],
    method: &str,
    keep: impl Fn(&PreferenceWeights) -> bool,
) -> BTreeMap<u64, [f64; 3]> {
    let mut acc: BTreeMap<u64, ([f64; 3], usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == method && keep(&r.preference)) {
        let e = acc.entry(r.seed).or_default();
        e.0[0] += r.win_rate;
        e.0[1] += r.reward_variance;
        e.0[2] += r.regret;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(s, (v, n))| (s, v.map(|x| x / n as f64)))
        .collect()
}

/// Stratifies `records` by density and aggregates across seeds. Methods keep
/// their order of first appearance.
pub fn build_report(records: &[EvalRecord]) -> EvalReport {
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut rows = Vec::with_capacity(Density::ALL.len() * methods.len());
    for stratum in Density::ALL {
        for method in &methods {
            let in_stratum = |w: &PreferenceWeights| classify_density(w) == stratum;
            let prefs: BTreeSet<_> = records
                .iter()
                .filter(|r| r.method == *method && in_stratum(&r.preference))
                .map(|r| r.preference)
                .collect();
            let per_seed = seed_means(records, method, in_stratum);
            let stat = |k: usize| {
                let v: Vec<f64> = per_seed.values().map(|m| m[k]).collect();
                (!v.is_empty()).then(|| Stat::over_seeds(&v))
            };
            rows.push(ReportRow {
                stratum,
                method: method.to_string(),
                n_preferences: prefs.len(),
                n_seeds: per_seed.len(),
                win_rate: stat(0),
                reward_variance: stat(1),
                regret: stat(2),
            });
        }
    }
    EvalReport {
        single_seed: seeds.len() == 1,
        seeds: seeds.into_iter().collect(),
        rows,
    }
}

fn cell(s: Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.6},{:.6}", s.mean, s.se),
        None => ",".to_string(),
    }
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "stratum,method,n_preferences,n_seeds,win_rate,win_rate_se,reward_variance,reward_variance_se,regret,regret_se,single_seed";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.stratum.name(),
                r.method,
                r.n_preferences,
                r.n_seeds,
                cell(r.win_rate),
                cell(r.reward_variance),
                cell(r.regret),
                self.single_seed
            );
        }
        out
    }
}

/// Mean and standard error across seeds of one metric over all preferences.
fn overall(records: &[EvalRecord], method: &str, demos: Option<usize>, k: usize) -> (Stat, usize) {
    let per_seed = seed_means(records, method, |_| true);
    let per_seed: BTreeMap<u64, [f64; 3]> = match demos {
        None => per_seed,
        Some(d) => {
            let kept: Vec<EvalRecord> = records
                .iter()
                .filter(|r| r.demos_per_preference == d)
                .cloned()
                .collect();
            seed_means(&kept, method, |_| true)
        }
    };
    let v: Vec<f64> = per_seed.values().map(|m| m[k]).collect();
    (Stat::over_seeds(&v), v.len())
}

/// Plot series as `(file stem, csv)`: win rate against demonstrations per
/// preference, and variance and regret bars per method.
pub fn plot_data(records: &[EvalRecord]) -> Vec<(&'static str, String)> {
    let mut methods: Vec<&str> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut curve = String::from("method,demos_per_preference,win_rate,win_rate_se,n_seeds\n");
    for m in &methods {
        let demos: BTreeSet<usize> = records
            .iter()
            .filter(|r| r.method == *m)
            .map(|r| r.demos_per_preference)
            .collect();
        for d in demos {
            let (s, n) = overall(records, m, Some(d), 0);
            let _ = writeln!(curve, "{m},{d},{:.6},{:.6},{n}", s.mean, s.se);
        }
    }
    let bars = |k: usize| {
        let mut out = String::from("method,mean,se,n_seeds\n");
        for m in &methods {
            let (s, n) = overall(records, m, None, k);
            let _ = writeln!(out, "{m},{:.6},{:.6},{n}", s.mean, s.se);
        }
        out
    };
    vec![
        ("plot_win_rate_vs_demos", curve),
        ("plot_reward_variance", bars(1)),
        ("plot_regret", bars(2)),
    ]
}

/// One line per record.
pub fn per_preference_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("method,seed,demos_per_preference,preference,density,win_rate,reward_variance,regret\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},\"{}\",{},{:.6},{:.6},{:.6}",
            r.method,
            r.seed,
            r.demos_per_preference,
            r.preference,
            classify_density(&r.preference).name(),
            r.win_rate,
            r.reward_variance,
            r.regret
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, seed: u64, w: [i8; 5], win: f64) -> EvalRecord {
        EvalRecord {
            method: method.into(),
            seed,
            demos_per_preference: 10,
            preference: PreferenceWeights::new(w).unwrap(),
            win_rate: win,
            reward_variance: 0.0,
            regret: 1.0 - win,
        }
    }

    #[test]
    fn rows_cover_strata_times_methods() {
        let records = vec![
            record("a", 0, [1, 0, 0, 0, 0], 0.8),
            record("a", 0, [1, 1, 1, 0, 0], 0.6),
            record("b", 0, [1, 0, 0, 0, 0], 0.7),
        ];
        let report = build_report(&records);
        assert_eq!(report.rows.len(), 6);
        assert!(report.single_seed);
        assert!(report.rows.iter().all(|r| r.win_rate.is_none_or(|s| s.se == 0.0)));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("dense,b,0,0,,,,,,,true"));
    }

    #[test]
    fn standard_error_is_over_seeds() {
        // Two preferences per seed; seed means are 0.6 and 0.8.
        let records = vec![
            record("m", 1, [1, 0, 0, 0, 0], 0.5),
            record("m", 1, [0, 1, 0, 0, 0], 0.7),
            record("m", 2, [1, 0, 0, 0, 0], 0.9),
            record("m", 2, [0, 1, 0, 0, 0], 0.7),
        ];
        let sparse = &build_report(&records).rows[0];
        let s = sparse.win_rate.unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!((s.se - 0.1).abs() < 1e-12);
        assert_eq!((sparse.n_preferences, sparse.n_seeds), (2, 2));
    }

    #[test]
    fn plot_series_cover_methods() {
        let mut records = vec![
            record("a", 0, [1, 0, 0, 0, 0], 0.8),
            record("b", 0, [1, 0, 0, 0, 0], 0.6),
        ];
        let mut fewer = record("a", 0, [1, 0, 0, 0, 0], 0.7);
        fewer.demos_per_preference = 5;
        records.push(fewer);
        let plots = plot_data(&records);
        assert_eq!(plots.len(), 3);
        let curve = &plots[0].1;
        assert!(curve.contains("a,5,0.700000,0.000000,1"));
        assert!(curve.contains("a,10,0.800000,0.000000,1"));
        assert!(plots[2].1.contains("b,0.400000,0.000000,1"));
    }
}
