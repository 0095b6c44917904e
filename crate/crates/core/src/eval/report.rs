use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const REPORT_FILE: &str = "report.json";
pub const TABLES_FILE: &str = "tables.csv";
pub const REPORT_VERSION: u32 = 1;

/// Every metric of one trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub graph_accuracy: f64,
    /// Per hidden factor.
    pub hidden_decoding: Vec<f64>,
    /// Some probe saw a single training class.
    #[serde(default)]
    pub degenerate_probe: bool,
    /// Per observed factor.
    pub observation_prediction: Vec<f64>,
    /// Per hidden factor.
    pub hidden_prediction: Vec<f64>,
    pub reward_prediction: f64,
}

impl RunMetrics {
    /// Flat `(metric, value)` pairs; factor-level metrics are keyed by factor
    /// index, e.g. `hidden_decoding/f1`.
    pub fn named(&self, observed: &[usize], hidden: &[usize]) -> Vec<(String, f64)> {
        let mut out = vec![("graph_accuracy".to_string(), self.graph_accuracy)];
        let per = |out: &mut Vec<(String, f64)>, name: &str, ids: &[usize], vals: &[f64]| {
            out.extend(ids.iter().zip(vals).map(|(f, &v)| (format!("{name}/f{f}"), v)));
        };
        per(&mut out, "hidden_decoding", hidden, &self.hidden_decoding);
        per(&mut out, "observation_prediction", observed, &self.observation_prediction);
        per(&mut out, "hidden_prediction", hidden, &self.hidden_prediction);
        out.push(("reward_prediction".to_string(), self.reward_prediction));
        out
    }
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        // Summing identical values can drift by an ulp; report them exactly.
        if values.iter().all(|&v| v == values[0]) {
            return Self { mean: values[0], std: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }

    /// `0.900_{(0.016)}`.
    pub fn table_cell(&self) -> String {
        format!("{:.3}_{{({:.3})}}", self.mean, self.std)
    }
}

/// Seed-aggregated evaluation of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub encoder: String,
    pub env_config_hash: String,
    pub eval_episodes: usize,
    pub observed_factors: Vec<usize>,
    pub hidden_factors: Vec<usize>,
    pub runs: Vec<RunMetrics>,
    pub summary: BTreeMap<String, MeanStd>,
    /// Fewer runs than requested seeds.
    pub partial: bool,
    pub expected_seeds: usize,
}

/// Builds the report, flagging it partial when runs are missing.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    encoder: &str,
    env_config_hash: &str,
    eval_episodes: usize,
    observed: &[usize],
    hidden: &[usize],
    mut runs: Vec<RunMetrics>,
    expected_seeds: usize,
) -> EvalReport {
    runs.sort_by_key(|r| r.seed);
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        for (k, v) in r.named(observed, hidden) {
            cols.entry(k).or_default().push(v);
        }
    }
    EvalReport {
        version: REPORT_VERSION,
        encoder: encoder.to_string(),
        env_config_hash: env_config_hash.to_string(),
        eval_episodes,
        observed_factors: observed.to_vec(),
        hidden_factors: hidden.to_vec(),
        partial: runs.len() < expected_seeds,
        expected_seeds,
        summary: cols.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect(),
        runs,
    }
}

/// Writes `report.json` and `tables.csv` into `dir`.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| EvalError::Format(e.to_string()))?;
    let jp = dir.join(REPORT_FILE);
    std::fs::write(&jp, json).map_err(io(&jp))?;

    let tp = dir.join(TABLES_FILE);
    let mut w = csv::Writer::from_path(&tp).map_err(|e| EvalError::Format(e.to_string()))?;
    let fmt = |e: csv::Error| EvalError::Format(e.to_string());
    w.write_record(["encoder", "metric", "mean", "std", "n_seeds", "cell"]).map_err(fmt)?;
    for (k, s) in &report.summary {
        w.write_record([
            report.encoder.clone(),
            k.clone(),
            s.mean.to_string(),
            s.std.to_string(),
            s.n.to_string(),
            s.table_cell(),
        ])
        .map_err(fmt)?;
    }
    w.flush().map_err(io(&tp))?;
    Ok(())
}

/// Reads `tables.csv` back as `metric → (mean, std, n)`.
pub fn read_tables(path: &Path) -> Result<BTreeMap<String, MeanStd>, EvalError> {
    let fmt = |e: String| EvalError::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let num = |i: usize| rec.get(i).ok_or_else(|| fmt(format!("missing column {i}")));
        let parse = |s: &str| s.parse::<f64>().map_err(|e| fmt(e.to_string()));
        out.insert(
            num(1)?.to_string(),
            MeanStd {
                mean: parse(num(2)?)?,
                std: parse(num(3)?)?,
                n: num(4)?.parse().map_err(|e: std::num::ParseIntError| fmt(e.to_string()))?,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(seed: u64, v: f64) -> RunMetrics {
        RunMetrics {
            seed,
            graph_accuracy: 1.0,
            hidden_decoding: vec![v],
            degenerate_probe: false,
            observation_prediction: vec![v, 1.0],
            hidden_prediction: vec![0.9],
            reward_prediction: 0.99,
        }
    }

    #[test]
    fn population_std_convention() {
        let s = MeanStd::of(&[0.88, 0.90, 0.92]);
        assert!((s.mean - 0.9).abs() < 1e-12);
        assert!((s.std - 0.016_329_93).abs() < 1e-6);
        assert_eq!(s.table_cell(), "0.900_{(0.016)}");
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let rep = aggregate("dvae_full", "h", 10, &[0, 2], &[1], vec![run(0, 0.9), run(1, 0.9), run(2, 0.9)], 3);
        assert!(rep.summary.values().all(|s| s.std == 0.0 && s.n == 3));
        assert!(!rep.partial);
        assert_eq!(rep.summary["hidden_decoding/f1"].mean, 0.9);
        assert!(rep.summary.contains_key("observation_prediction/f2"));
    }

    #[test]
    fn missing_seeds_flag_partial() {
        assert!(aggregate("x", "h", 1, &[0], &[1], vec![run(0, 0.5)], 3).partial);
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rep = aggregate("dvae_full", "h", 10, &[0, 2], &[1], vec![run(0, 0.876543), run(1, 0.912345)], 2);
        export_report(&rep, dir.path()).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(back, rep);
        assert_eq!(read_tables(&dir.path().join(TABLES_FILE)).unwrap(), rep.summary);
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(vals in prop::collection::vec(0.0f64..1.0, 1..6), rot in 0usize..6) {
            let runs: Vec<RunMetrics> = vals.iter().enumerate().map(|(i, &v)| run(i as u64, v)).collect();
            let mut shuffled = runs.clone();
            shuffled.rotate_left(rot % runs.len());
            let a = aggregate("e", "h", 1, &[0, 2], &[1], runs, vals.len());
            let b = aggregate("e", "h", 1, &[0, 2], &[1], shuffled, vals.len());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn summary_stays_in_unit_interval(vals in prop::collection::vec(0.0f64..=1.0, 1..8)) {
            let s = MeanStd::of(&vals);
            prop_assert!((0.0..=1.0).contains(&s.mean));
            prop_assert!(s.std >= 0.0 && s.std <= 0.5 + 1e-12);
        }
    }
}
