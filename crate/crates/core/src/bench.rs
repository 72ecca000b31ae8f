//! Paired scenario sweeps and SR/FR/CR/ATL/ATT aggregation.

use std::io::{Read, Write};
use std::panic::{self, AssertUnwindSafe};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sim::{run_episode, EpisodeSummary, MethodSpec, Outcome, ScenarioConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub obstacle_counts: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub methods: Vec<MethodSpec>,
    pub configs_per_cell: usize,
    pub base_seed: u64,
    /// Template for every generated scenario.
    pub scenario: ScenarioConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            obstacle_counts: vec![5],
            sigmas: vec![0.05],
            methods: vec![
                MethodSpec::Proposed,
                MethodSpec::CvarDistFixed { beta: 0.01 },
                MethodSpec::CvarDistFixed { beta: 0.99 },
            ],
            configs_per_cell: 120,
            base_seed: 0,
            scenario: ScenarioConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.configs_per_cell == 0 {
            return Err(Error::invariant("configs_per_cell", "must be at least 1"));
        }
        if self.obstacle_counts.is_empty() {
            return Err(Error::invariant("obstacle_counts", "must not be empty"));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::invariant(
                "sigmas",
                "must be a nonempty list of nonnegative values",
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::invariant("methods", "must not be empty"));
        }
        for m in &self.methods {
            m.validate()?;
            ScenarioConfig {
                method: *m,
                ..self.scenario.clone()
            }
            .validate()?;
        }
        self.scenario.validate()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one sweep cell entry, a hash of its coordinates.
pub fn scenario_seed(base_seed: u64, n_obstacles: usize, sigma: f64, index: usize) -> u64 {
    [n_obstacles as u64, sigma.to_bits(), index as u64]
        .into_iter()
        .fold(splitmix64(base_seed), |h, x| splitmix64(h ^ x))
}

/// One generated scenario, keyed by its cell coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_obstacles: usize,
    pub sigma: f64,
    pub index: usize,
    pub config: ScenarioConfig,
}

/// Expands the sweep into scenarios ordered by count, sigma, index. The
/// method field is left at the template value; every method later runs on
/// the same list.
pub fn generate_scenarios(spec: &SweepSpec) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &n_obstacles in &spec.obstacle_counts {
        for &sigma in &spec.sigmas {
            for index in 0..spec.configs_per_cell {
                out.push(Scenario {
                    n_obstacles,
                    sigma,
                    index,
                    config: ScenarioConfig {
                        n_obstacles,
                        sigma,
                        seed: scenario_seed(spec.base_seed, n_obstacles, sigma, index),
                        ..spec.scenario.clone()
                    },
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub m_t: usize,
    pub m_s: usize,
    pub m_f: usize,
    pub m_c: usize,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "FR")]
    pub fr: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "ATL")]
    pub atl: Option<f64>,
    #[serde(rename = "ATT")]
    pub att: Option<f64>,
}

/// Aggregates episode outcomes. ATL and ATT average over successes only.
pub fn compute_metrics(results: &[EpisodeSummary]) -> MetricsSummary {
    let m_t = results.len();
    let successes: Vec<&EpisodeSummary> = results.iter().filter(|r| r.outcome == Outcome::Success).collect();
    let m_s = successes.len();
    let m_f = results.iter().filter(|r| r.all_feasible).count();
    let m_c = results.iter().filter(|r| r.outcome == Outcome::Collision).count();
    let ratio = |m: usize| if m_t == 0 { 0.0 } else { m as f64 / m_t as f64 };
    let mean =
        |f: fn(&EpisodeSummary) -> f64| (m_s > 0).then(|| successes.iter().map(|r| f(r)).sum::<f64>() / m_s as f64);
    MetricsSummary {
        m_t,
        m_s,
        m_f,
        m_c,
        sr: ratio(m_s),
        fr: ratio(m_f),
        cr: ratio(m_c),
        atl: mean(|r| r.trajectory_length),
        att: mean(|r| r.elapsed),
    }
}

/// One persisted episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: MethodSpec,
    pub n_obstacles: usize,
    pub sigma: f64,
    pub index: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub summary: EpisodeSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: MethodSpec,
    pub n_obstacles: usize,
    pub sigma: f64,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub episodes: Vec<EpisodeRecord>,
}

impl BenchReport {
    pub fn row(&self, method: &MethodSpec, n_obstacles: usize, sigma: f64) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.method == *method && r.n_obstacles == n_obstacles && r.sigma == sigma)
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs one episode, turning a panic into an infeasible record.
pub fn run_guarded(scenario: &Scenario, method: MethodSpec) -> EpisodeRecord {
    let cfg = ScenarioConfig {
        method,
        ..scenario.config.clone()
    };
    let result = panic::catch_unwind(AssertUnwindSafe(|| run_episode(&cfg)));
    let (summary, diagnostic) = match result {
        Ok(Ok(res)) => (res.summary, None),
        Ok(Err(e)) => (failed_summary(), Some(e.to_string())),
        Err(payload) => (
            failed_summary(),
            Some(format!("panic: {}", panic_message(payload.as_ref()))),
        ),
    };
    if let Some(msg) = &diagnostic {
        log::warn!(
            "episode {} (n={}, sigma={}, seed={}) failed: {msg}",
            method.label(),
            scenario.n_obstacles,
            scenario.sigma,
            cfg.seed
        );
    }
    EpisodeRecord {
        method,
        n_obstacles: scenario.n_obstacles,
        sigma: scenario.sigma,
        index: scenario.index,
        seed: cfg.seed,
        summary,
        diagnostic,
    }
}

fn failed_summary() -> EpisodeSummary {
    EpisodeSummary {
        outcome: Outcome::Infeasible,
        all_feasible: false,
        trajectory_length: 0.0,
        elapsed: 0.0,
        min_separation: None,
        steps: 0,
    }
}

/// Groups records by method, count and sigma in spec order.
pub fn aggregate(spec: &SweepSpec, episodes: &[EpisodeRecord]) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for method in &spec.methods {
        for &n_obstacles in &spec.obstacle_counts {
            for &sigma in &spec.sigmas {
                let cell: Vec<EpisodeSummary> = episodes
                    .iter()
                    .filter(|e| e.method == *method && e.n_obstacles == n_obstacles && e.sigma == sigma)
                    .map(|e| e.summary.clone())
                    .collect();
                rows.push(BenchRow {
                    method: *method,
                    n_obstacles,
                    sigma,
                    metrics: compute_metrics(&cell),
                });
            }
        }
    }
    rows
}

/// Runs every (scenario, method) pair. `jobs` caps the worker count; `None`
/// uses the global pool.
pub fn run_benchmark(spec: &SweepSpec, jobs: Option<usize>) -> Result<BenchReport> {
    spec.validate()?;
    let scenarios = generate_scenarios(spec);
    let work: Vec<(&Scenario, MethodSpec)> = spec
        .methods
        .iter()
        .flat_map(|m| scenarios.iter().map(move |s| (s, *m)))
        .collect();
    let run = || -> Vec<EpisodeRecord> { work.par_iter().map(|(s, m)| run_guarded(s, *m)).collect() };
    let episodes = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    Ok(BenchReport {
        rows: aggregate(spec, &episodes),
        episodes,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    n_obstacles: usize,
    sigma: f64,
    #[serde(rename = "SR")]
    sr: f64,
    #[serde(rename = "FR")]
    fr: f64,
    #[serde(rename = "CR")]
    cr: f64,
    #[serde(rename = "ATL")]
    atl: Option<f64>,
    #[serde(rename = "ATT")]
    att: Option<f64>,
}

pub const CSV_HEADER: &str = "method,n_obstacles,sigma,SR,FR,CR,ATL,ATT";

pub fn write_summary_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        let label = r.method.label();
        w.serialize(CsvRow {
            method: &label,
            n_obstacles: r.n_obstacles,
            sigma: r.sigma,
            sr: r.metrics.sr,
            fr: r.metrics.fr,
            cr: r.metrics.cr,
            atl: r.metrics.atl,
            att: r.metrics.att,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_episodes<W: Write>(episodes: &[EpisodeRecord], mut out: W) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes<R: Read>(input: R) -> Result<Vec<EpisodeRecord>> {
    serde_json::Deserializer::from_reader(input)
        .into_iter::<EpisodeRecord>()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(outcome: Outcome, length: f64, elapsed: f64) -> EpisodeSummary {
        EpisodeSummary {
            outcome,
            all_feasible: outcome != Outcome::Infeasible,
            trajectory_length: length,
            elapsed,
            min_separation: Some(1.0),
            steps: 10,
        }
    }

    #[test]
    fn ratio_arithmetic() {
        let mut results = vec![summary(Outcome::Success, 11.0, 9.0); 110];
        results.extend(vec![summary(Outcome::Collision, 3.0, 2.0); 10]);
        let m = compute_metrics(&results);
        assert_eq!((m.m_t, m.m_s, m.m_f, m.m_c), (120, 110, 120, 10));
        assert!((m.sr - 0.9167).abs() < 5e-5);
        assert_eq!(m.sr, 110.0 / 120.0);
        assert_eq!(m.atl, Some(11.0));
    }

    #[test]
    fn all_collisions() {
        let m = compute_metrics(&vec![summary(Outcome::Collision, 3.0, 2.0); 4]);
        assert_eq!((m.sr, m.cr), (0.0, 1.0));
        assert_eq!(m.atl, None);
        assert_eq!(m.att, None);
    }

    #[test]
    fn single_success() {
        let m = compute_metrics(&[summary(Outcome::Success, 13.0, 13.1)]);
        assert_eq!(m.atl, Some(13.0));
        assert_eq!(m.att, Some(13.1));
    }

    #[test]
    fn scenario_expansion() {
        let spec = SweepSpec::default();
        let a = generate_scenarios(&spec);
        assert_eq!(a.len(), 120);
        let mut seeds: Vec<u64> = a.iter().map(|s| s.config.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 120);
        assert_eq!(a, generate_scenarios(&spec));
    }

    #[test]
    fn csv_header_exact() {
        let mut buf = Vec::new();
        write_summary_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().next(), Some(CSV_HEADER));
    }
}
