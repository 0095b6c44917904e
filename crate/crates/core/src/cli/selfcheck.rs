//! `hindcaus selfcheck`: fast checks of the pieces every experiment relies on.

use std::time::Instant;

use anyhow::{bail, Result};

use hindcaus::env::{
    generate_dataset, read_dataset, verify_properties, write_dataset, EnvConfig, Episode, GraphKind, ModuloEnv,
    NoiseTarget, RandomInterventionPolicy,
};
use hindcaus::graph::{cmi_matrix, enumeration_cmi, TabularTransition};
use hindcaus::numcore::gradcheck::{standard_suite, FD_TOLERANCE};

/// Agreement required between the tabular CMI estimate and enumeration.
const CMI_TOLERANCE: f64 = 0.05;
const CMI_EPISODES: u64 = 2000;

struct Row {
    name: String,
    ok: bool,
    detail: String,
}

fn configs() -> [(&'static str, EnvConfig); 4] {
    [
        ("chain3/noisy-hidden", EnvConfig::chain3(NoiseTarget::Hidden)),
        ("chain3/noisy-obs", EnvConfig::chain3(NoiseTarget::Observation)),
        ("five-chain/noisy-obs", EnvConfig::five(GraphKind::Chain, NoiseTarget::Observation)),
        ("five-full/noisy-obs", EnvConfig::five(GraphKind::Full, NoiseTarget::Observation)),
    ]
}

fn gradients(rows: &mut Vec<Row>) -> Result<()> {
    for c in standard_suite(0)? {
        rows.push(Row {
            name: format!("grad/{}", c.name),
            ok: c.passed(),
            detail: format!("max rel err {:.1e} (tol {FD_TOLERANCE:.0e})", c.max_rel_error),
        });
    }
    Ok(())
}

fn properties(rows: &mut Vec<Row>) {
    for (name, cfg) in configs() {
        let (ok, detail) = match verify_properties(&cfg) {
            Ok(r) => (
                true,
                format!("{} maps over {} states, observed children {:?}", r.maps_checked, r.states, r.observed_children),
            ),
            Err(e) => (false, e.to_string()),
        };
        rows.push(Row {
            name: format!("env/{name}"),
            ok,
            detail,
        });
    }
}

fn cmi(rows: &mut Vec<Row>) -> Result<()> {
    for (name, cfg) in configs().into_iter().take(2) {
        let env = ModuloEnv::new(cfg.clone())?;
        let eps = (0..CMI_EPISODES)
            .map(|i| env.rollout_indexed(&RandomInterventionPolicy, 5, i))
            .collect::<Result<Vec<Episode>, _>>()?;
        let table = TabularTransition::new(&cfg)?;
        let est = cmi_matrix(&table, &table.sample_from_episodes(&eps))?;
        let oracle = enumeration_cmi(&cfg)?;
        let worst = est
            .iter()
            .flatten()
            .zip(oracle.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rows.push(Row {
            name: format!("cmi/{name}"),
            ok: worst < CMI_TOLERANCE,
            detail: format!("max |tabular - oracle| {worst:.4} (tol {CMI_TOLERANCE})"),
        });
    }
    Ok(())
}

fn dataset_round_trip(rows: &mut Vec<Row>) -> Result<()> {
    let cfg = EnvConfig::chain3(NoiseTarget::Observation);
    let ds = generate_dataset(&cfg, &RandomInterventionPolicy, 64, 11, 2)?;
    let path = std::env::temp_dir().join(format!("hindcaus-selfcheck-{}.jsonl", std::process::id()));
    write_dataset(&ds, &path)?;
    let back = read_dataset(&path);
    let _ = std::fs::remove_file(&path);
    let back = back?;
    rows.push(Row {
        name: "dataset/round-trip".into(),
        ok: back == ds,
        detail: format!("{} episodes", ds.episodes.len()),
    });
    Ok(())
}

pub fn run() -> Result<()> {
    let start = Instant::now();
    let mut rows = Vec::new();
    gradients(&mut rows)?;
    properties(&mut rows);
    cmi(&mut rows)?;
    dataset_round_trip(&mut rows)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &rows {
        println!("{:4}  {:width$}  {}", if r.ok { "ok" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = rows.iter().filter(|r| !r.ok).count();
    println!("{} checks, {failed} failed, {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} selfcheck(s) failed");
    }
    Ok(())
}
