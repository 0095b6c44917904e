//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 are cheap and always run. The training criteria (1-5, 8)
//! need dozens of full training runs, so they only run when
//! `HINDCAUS_ACCEPTANCE=full`; otherwise they print SKIP. Scale knobs:
//! `HINDCAUS_ACCEPTANCE_STEPS` (default 10000), `HINDCAUS_ACCEPTANCE_SEEDS`
//! (default 3) and `HINDCAUS_ACCEPTANCE_EPISODES` (default 10000).

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hindcaus::env::{
    generate_dataset, verify_properties, EnvConfig, Episode, GraphKind, ModuloEnv, NoiseTarget,
    RandomInterventionPolicy,
};
use hindcaus::eval::{evaluate_run, RunMetrics};
use hindcaus::graph::{cmi_matrix, enumeration_cmi, TabularTransition};
use hindcaus::models::EncoderVariant;
use hindcaus::numcore::gradcheck::{standard_suite, FD_TOLERANCE};
use hindcaus::numcore::{categorical_kl, cross_entropy, Graph, Tensor};
use hindcaus::trainer::{train, TrainConfig};

const CMI_TOLERANCE: f64 = 0.05;
const NON_PARENT_CMI: f64 = 0.01;
const CMI_EPISODES: u64 = 2000;
const PROPERTY_CASES: usize = 1000;
const GRAD_SEEDS: u64 = 10;
/// Entropy of the `(0.05, 0.9, 0.05)` noise law in nats.
const NOISE_ENTROPY: f64 = 0.394;
const KL_BAND: f64 = 0.1;
const EVAL_EPISODES: usize = 1000;

struct Verdict {
    id: u32,
    name: &'static str,
    outcome: Outcome,
    detail: String,
}

enum Outcome {
    Pass,
    Fail,
    Skip,
}

fn verdict(id: u32, name: &'static str, ok: bool, detail: String) -> Verdict {
    let outcome = if ok { Outcome::Pass } else { Outcome::Fail };
    Verdict { id, name, outcome, detail }
}

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn rollouts(cfg: &EnvConfig, n: u64) -> Vec<Episode> {
    let env = ModuloEnv::new(cfg.clone()).unwrap();
    (0..n).map(|i| env.rollout_indexed(&RandomInterventionPolicy, 5, i).unwrap()).collect()
}

fn oracle_equivalence() -> Verdict {
    let mut worst_gap = 0.0f64;
    let mut worst_non_parent = 0.0f64;
    for target in [NoiseTarget::Hidden, NoiseTarget::Observation] {
        let cfg = EnvConfig::chain3(target);
        let table = TabularTransition::new(&cfg).unwrap();
        let est = cmi_matrix(&table, &table.sample_from_episodes(&rollouts(&cfg, CMI_EPISODES))).unwrap();
        let oracle = enumeration_cmi(&cfg).unwrap();
        let gt = ModuloEnv::new(cfg).unwrap().ground_truth_graph();
        for (i, row) in est.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                worst_gap = worst_gap.max((v - oracle[i][j]).abs());
                if gt.0[i][j] == 0 {
                    worst_non_parent = worst_non_parent.max(v);
                }
            }
        }
    }
    verdict(
        6,
        "oracle equivalence",
        worst_gap < CMI_TOLERANCE && worst_non_parent < NON_PARENT_CMI,
        format!(
            "max |tabular - oracle| {worst_gap:.4} (tol {CMI_TOLERANCE}), max non-parent {worst_non_parent:.4} (tol {NON_PARENT_CMI})"
        ),
    )
}

fn property_configs() -> Vec<EnvConfig> {
    let mut out = Vec::new();
    for target in [NoiseTarget::Hidden, NoiseTarget::Observation] {
        for kind in [GraphKind::Chain, GraphKind::Full] {
            out.push(EnvConfig {
                graph_kind: kind,
                ..EnvConfig::chain3(target)
            });
            out.push(EnvConfig::five(kind, target));
        }
    }
    out
}

fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-8.0..8.0)).collect()).unwrap()
}

fn numerics() -> Verdict {
    let mut grad_fail = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        for c in standard_suite(seed).unwrap() {
            worst = worst.max(c.max_rel_error);
            if !c.passed() {
                grad_fail.push(format!("{}@{seed}", c.name));
            }
        }
    }
    let configs = property_configs();
    let prop_fail: Vec<String> = configs
        .iter()
        .filter_map(|c| verify_properties(c).err().map(|e| format!("d={} {:?}: {e}", c.n_factors, c.graph_kind)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut negative = 0;
    for _ in 0..PROPERTY_CASES {
        let mut g = Graph::new();
        let p = g.constant(random_logits(&mut rng, 3, 4)).unwrap();
        let q = g.constant(random_logits(&mut rng, 3, 4)).unwrap();
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let kl = categorical_kl(&mut g, p, q).unwrap();
        let ce = cross_entropy(&mut g, p, &labels).unwrap();
        let bad = |x: &f64| !(x.is_finite() && *x >= -1e-12);
        if g.value(kl).data().iter().any(bad) || g.value(ce).data().iter().any(bad) {
            negative += 1;
        }
    }
    verdict(
        7,
        "numerics",
        grad_fail.is_empty() && prop_fail.is_empty() && negative == 0,
        format!(
            "grad max rel err {worst:.1e} (tol {FD_TOLERANCE:.0e}, {} failed), bijectivity {}/{} configs, KL/CE {negative}/{PROPERTY_CASES} violations{}",
            grad_fail.len(),
            configs.len() - prop_fail.len(),
            configs.len(),
            if prop_fail.is_empty() { String::new() } else { format!(" [{}]", prop_fail.join("; ")) }
        ),
    )
}

/// One finished run plus the mean full KL over the last tenth of training.
struct Run {
    metrics: RunMetrics,
    final_kl: f64,
}

struct Runner {
    steps: u64,
    episodes: usize,
    seeds: u64,
    cache: BTreeMap<(String, String, u64), Run>,
}

impl Runner {
    fn run(&mut self, label: &str, cfg: &EnvConfig, encoder: EncoderVariant, seed: u64) -> &Run {
        let key = (label.to_string(), format!("{encoder:?}"), seed);
        if !self.cache.contains_key(&key) {
            let start = Instant::now();
            let data = generate_dataset(cfg, &RandomInterventionPolicy, self.episodes, seed, 1).unwrap();
            let tc = TrainConfig {
                encoder,
                seed,
                steps: self.steps,
                lr_milestones: vec![self.steps * 4 / 10, self.steps * 8 / 10],
                ..TrainConfig::default()
            };
            let out = train(&tc, &data, None).unwrap();
            let eval = generate_dataset(cfg, &RandomInterventionPolicy, EVAL_EPISODES, 1_000_000 + seed, 1).unwrap();
            let gt = ModuloEnv::new(cfg.clone()).unwrap().ground_truth_graph();
            let metrics = evaluate_run(&out.store, &out.graph(), &gt, &eval.episodes, seed).unwrap();
            let tail = &out.metrics[out.metrics.len() - (out.metrics.len() / 10).max(1)..];
            let final_kl = tail.iter().map(|r| r.full_kl).sum::<f64>() / tail.len() as f64;
            eprintln!(
                "  {label} {encoder:?} seed {seed}: graph {:.3} decode {:?} obs {:?} hid {:?} reward {:.3} kl {final_kl:.3} ({:.0}s)",
                metrics.graph_accuracy,
                metrics.hidden_decoding,
                metrics.observation_prediction,
                metrics.hidden_prediction,
                metrics.reward_prediction,
                start.elapsed().as_secs_f64()
            );
            self.cache.insert(key.clone(), Run { metrics, final_kl });
        }
        &self.cache[&key]
    }

    /// Runs `encoder` for every seed and applies `f` to each.
    fn per_seed<T>(&mut self, label: &str, cfg: &EnvConfig, encoder: EncoderVariant, f: impl Fn(&Run) -> T) -> Vec<T> {
        (0..self.seeds).map(|s| f(self.run(label, cfg, encoder, s))).collect()
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

const DVAE: [EncoderVariant; 2] = [EncoderVariant::Dvae1Step, EncoderVariant::DvaeFull];
const CURRENT: [EncoderVariant; 2] = [EncoderVariant::Current1Step, EncoderVariant::CurrentFull];

fn training_criteria(r: &mut Runner) -> Vec<Verdict> {
    let hidden = EnvConfig::chain3(NoiseTarget::Hidden);
    let obs = EnvConfig::chain3(NoiseTarget::Observation);
    let settings = [("noisy-hidden", &hidden), ("noisy-obs", &obs)];
    let mut out = Vec::new();

    let mut ok = true;
    let mut detail = Vec::new();
    for (label, cfg) in settings {
        let acc = r.per_seed(label, cfg, EncoderVariant::DvaeFull, |x| x.metrics.graph_accuracy);
        ok &= acc.iter().all(|&a| a == 1.0);
        detail.push(format!("{label} graph acc {}", fmt(&acc)));
    }
    out.push(verdict(1, "graph recovery", ok, detail.join(", ")));

    let mut ok = true;
    let mut detail = Vec::new();
    for (label, cfg) in settings {
        for enc in DVAE {
            let d = r.per_seed(label, cfg, enc, |x| x.metrics.hidden_decoding[0]);
            ok &= d.iter().all(|&a| a >= 0.98);
            detail.push(format!("{label} {enc:?} {}", fmt(&d)));
        }
    }
    let history = r.per_seed("noisy-hidden", &hidden, EncoderVariant::History, |x| x.metrics.hidden_decoding[0]);
    ok &= history.iter().all(|&a| a <= 0.93);
    for enc in DVAE {
        let d = r.per_seed("noisy-hidden", &hidden, enc, |x| x.metrics.hidden_decoding[0]);
        ok &= d.iter().zip(&history).all(|(a, b)| a > b);
    }
    detail.push(format!("history {}", fmt(&history)));
    out.push(verdict(2, "hidden identification (>= 0.98, history <= 0.93, DVAE > history)", ok, detail.join(", ")));

    let mut ok = true;
    let mut detail = Vec::new();
    for enc in DVAE {
        let h = r.per_seed("noisy-hidden", &hidden, enc, |x| x.metrics.hidden_prediction[0]);
        ok &= h.iter().all(|a| (0.85..=0.95).contains(a));
        detail.push(format!("h1 {enc:?} {}", fmt(&h)));
        for k in 0..2 {
            let o = r.per_seed("noisy-obs", &obs, enc, |x| x.metrics.observation_prediction[k]);
            ok &= o.iter().all(|a| (0.87..=0.95).contains(a));
            detail.push(format!("o{} {enc:?} {}", k + 1, fmt(&o)));
        }
    }
    out.push(verdict(3, "noise ceilings", ok, detail.join(", ")));

    let mut ok = true;
    let mut detail = Vec::new();
    for enc in CURRENT {
        let pairs = r.per_seed("noisy-obs", &obs, enc, |x| (x.metrics.observation_prediction[1], x.metrics.reward_prediction));
        let hits = pairs.iter().filter(|(o2, rw)| *o2 >= 0.95 && *rw <= 0.98).count();
        ok &= hits * 3 >= 2 * pairs.len();
        detail.push(format!("{enc:?} copy pattern in {hits}/{} seeds", pairs.len()));
    }
    for enc in DVAE {
        let rw = r.per_seed("noisy-obs", &obs, enc, |x| x.metrics.reward_prediction);
        ok &= rw.iter().all(|&a| a >= 0.99);
        detail.push(format!("{enc:?} reward {}", fmt(&rw)));
    }
    out.push(verdict(4, "copy pathology", ok, detail.join(", ")));

    let mut ok = true;
    let mut detail = Vec::new();
    for (label, kind) in [("five-chain", GraphKind::Chain), ("five-full", GraphKind::Full)] {
        let cfg = EnvConfig::five(kind, NoiseTarget::Observation);
        let acc = r.per_seed(label, &cfg, EncoderVariant::DvaeFull, |x| x.metrics.graph_accuracy);
        ok &= acc.iter().all(|&a| a == 1.0);
        detail.push(format!("{label} graph acc {}", fmt(&acc)));
    }
    out.push(verdict(5, "scaling to five factors", ok, detail.join(", ")));

    let mut ok = true;
    let mut detail = Vec::new();
    for enc in DVAE {
        let kl = r.per_seed("noisy-hidden", &hidden, enc, |x| x.final_kl);
        ok &= kl.iter().all(|k| (k - NOISE_ENTROPY).abs() <= KL_BAND);
        detail.push(format!("{enc:?} {}", fmt(&kl)));
    }
    out.push(verdict(8, "loss floor (full KL within 0.1 of 0.394)", ok, detail.join(", ")));
    out
}

fn main() -> ExitCode {
    let start = Instant::now();
    let full = std::env::var("HINDCAUS_ACCEPTANCE").is_ok_and(|v| v == "full");
    let mut verdicts = vec![oracle_equivalence(), numerics()];
    if full {
        let mut runner = Runner {
            steps: env_or("HINDCAUS_ACCEPTANCE_STEPS", 10_000),
            seeds: env_or("HINDCAUS_ACCEPTANCE_SEEDS", 3),
            episodes: env_or("HINDCAUS_ACCEPTANCE_EPISODES", 10_000),
            cache: BTreeMap::new(),
        };
        eprintln!("training at {} steps, {} seeds, {} episodes", runner.steps, runner.seeds, runner.episodes);
        verdicts.extend(training_criteria(&mut runner));
    } else {
        for (id, name) in [
            (1, "graph recovery"),
            (2, "hidden identification"),
            (3, "noise ceilings"),
            (4, "copy pathology"),
            (5, "scaling to five factors"),
            (8, "loss floor"),
        ] {
            verdicts.push(Verdict {
                id,
                name,
                outcome: Outcome::Skip,
                detail: "needs HINDCAUS_ACCEPTANCE=full".into(),
            });
        }
    }
    verdicts.sort_by_key(|v| v.id);
    let mut failed = 0;
    for v in &verdicts {
        let tag = match v.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => {
                failed += 1;
                "FAIL"
            }
            Outcome::Skip => "SKIP",
        };
        println!("{tag} criterion {}: {}: {}", v.id, v.name, v.detail);
    }
    println!("acceptance: {failed} failed, {:.0}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
