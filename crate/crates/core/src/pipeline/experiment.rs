use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::dataset::{collect_dataset, safety_model_path, train_safety, DatasetPaths};
use super::eval::{evaluate, mean_std, read_eval_csv, write_eval_csv, EvalEntry};
use super::plot::{plot_report, write_summary_csvs};
use super::{read_versioned, write_versioned, ExperimentConfig};
use crate::agent::{train_agent, write_log_csv, Agent, TrainHooks, Variant};
use crate::env::{make_env, ConstraintSpec, EnvConfig};
use crate::replay::ReplayBuffer;
use crate::safety::SafetyModel;
use crate::{Error, Result};

pub const REPORT_FORMAT: &str = "trajsafe.eval_report";
const FAILURE_FORMAT: &str = "trajsafe.seed_failure";

/// Output directory of one (variant, seed) run.
pub fn run_dir(out_dir: &Path, variant: Variant, seed: usize) -> PathBuf {
    out_dir.join("runs").join(variant.as_str()).join(format!("seed_{seed}"))
}

/// Loads the safety model of `config.output_dir`, collecting a dataset and
/// training the model first when either is missing.
pub fn load_or_train_safety(config: &ExperimentConfig) -> Result<SafetyModel> {
    let path = safety_model_path(&config.output_dir);
    if path.exists() {
        return SafetyModel::load(&path);
    }
    if !DatasetPaths::new(&config.output_dir).segments().exists() {
        collect_dataset(config)?;
    }
    Ok(train_safety(config)?.0)
}

struct EvalHooks<'a> {
    interval: usize,
    safety: Option<&'a SafetyModel>,
    env: &'a EnvConfig,
    spec: &'a ConstraintSpec,
    episodes: usize,
    seed: u64,
    entries: Vec<EvalEntry>,
}

impl TrainHooks for EvalHooks<'_> {
    fn on_step(&mut self, step: usize, agent: &Agent) -> Result<()> {
        if step % self.interval == 0 {
            let e = evaluate(agent, self.safety, self.env, self.spec, self.episodes, self.seed, step)?;
            info!(
                "{} step {step}: eval return {:.3}, compliance {:.2}",
                agent.config.variant, e.return_mean, e.compliance_frac
            );
            self.entries.push(e);
        }
        Ok(())
    }
}

/// Trains one variant under one seed, evaluating every `eval_interval`
/// steps and once more at the end, and writes the run's files.
pub fn run_seed(config: &ExperimentConfig, safety: Option<&SafetyModel>, variant: Variant, seed: usize) -> Result<Vec<EvalEntry>> {
    let dir = run_dir(&config.output_dir, variant, seed);
    std::fs::create_dir_all(&dir)?;
    let spec = config.constraint();
    let agent_cfg = config.agent_config(variant, seed);
    let total = agent_cfg.total_steps;
    let mut env = make_env(&config.env)?;
    let mut agent = Agent::for_env(agent_cfg, env.as_ref(), safety)?;
    let mut buffer = ReplayBuffer::new(config.agent.replay_capacity);
    let mut hooks = EvalHooks {
        interval: config.eval_interval,
        safety,
        env: &config.env,
        spec: &spec,
        episodes: config.eval_episodes,
        seed: config.eval_seed,
        entries: Vec::new(),
    };
    let log = train_agent(env.as_mut(), safety, &mut buffer, &mut agent, Some(&spec), &mut hooks)?;
    let mut entries = hooks.entries;
    if entries.last().map(|e| e.step) != Some(total) {
        entries.push(evaluate(&agent, safety, &config.env, &spec, config.eval_episodes, config.eval_seed, total)?);
    }
    agent.save(&dir.join("agent.json"))?;
    write_log_csv(&dir.join("train_log.csv"), &log)?;
    write_eval_csv(&dir.join("eval.csv"), &entries)?;
    let failure = dir.join("error.json");
    if failure.exists() {
        std::fs::remove_file(failure)?;
    }
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: usize,
    pub kind: String,
    pub message: String,
}

/// Runs the requested (variant, seed) pairs. A failing seed is recorded in
/// its run directory and does not stop the others.
pub fn train_agents(config: &ExperimentConfig, safety: Option<&SafetyModel>, variants: &[Variant], seeds: &[usize]) -> Result<Vec<(Variant, SeedFailure)>> {
    let mut failures = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            if let Err(e) = run_seed(config, safety, variant, seed) {
                warn!("{variant} seed {seed} failed: {e}");
                let f = SeedFailure {
                    seed,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                };
                let dir = run_dir(&config.output_dir, variant, seed);
                std::fs::create_dir_all(&dir)?;
                write_versioned(&dir.join("error.json"), FAILURE_FORMAT, &f)?;
                failures.push((variant, f));
            }
        }
    }
    Ok(failures)
}

/// Statistics across seeds at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub step: usize,
    pub seeds: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub compliance_mean: f64,
    pub compliance_std: f64,
    pub step_compliance_mean: f64,
    pub step_compliance_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFinal {
    pub seed: usize,
    pub entry: EvalEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub checkpoints: Vec<AggregateRow>,
    /// Final evaluation of every completed seed.
    pub per_seed: Vec<SeedFinal>,
    pub failures: Vec<SeedFailure>,
}

impl VariantReport {
    /// Median over seeds of the final trajectory-compliance fraction.
    pub fn median_final_compliance(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.per_seed.iter().map(|s| s.entry.compliance_frac).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env_id: String,
    /// Required compliant share, drawn as the reference line.
    pub d: f64,
    pub eval_episodes: usize,
    pub variants: Vec<VariantReport>,
}

impl EvalReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

fn seed_dirs(variant_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    if !variant_dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(variant_dir)? {
        let path = entry?.path();
        let seed = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("seed_"))
            .and_then(|n| n.parse().ok());
        if let (Some(seed), true) = (seed, path.is_dir()) {
            out.push((seed, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Recomputes the cross-seed report from the per-seed CSVs under `out_dir`
/// and writes `report.json`, the summary CSVs and the plots.
pub fn aggregate(config: &ExperimentConfig) -> Result<EvalReport> {
    let out = &config.output_dir;
    let mut variants = Vec::new();
    for &variant in &config.variants {
        let mut per_step: BTreeMap<usize, Vec<EvalEntry>> = BTreeMap::new();
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        for (seed, dir) in seed_dirs(&out.join("runs").join(variant.as_str()))? {
            let failure = dir.join("error.json");
            if failure.exists() {
                failures.push(read_versioned(&failure, FAILURE_FORMAT)?);
                continue;
            }
            let csv = dir.join("eval.csv");
            if !csv.exists() {
                continue;
            }
            let entries = read_eval_csv(&csv)?;
            if let Some(last) = entries.last() {
                per_seed.push(SeedFinal {
                    seed,
                    entry: last.clone(),
                });
            }
            for e in entries {
                per_step.entry(e.step).or_default().push(e);
            }
        }
        let checkpoints = per_step
            .into_iter()
            .map(|(step, es)| {
                let col = |f: fn(&EvalEntry) -> f64| mean_std(&es.iter().map(f).collect::<Vec<_>>());
                let (rm, rs) = col(|e| e.return_mean);
                let (cm, cs) = col(|e| e.compliance_frac);
                let (sm, ss) = col(|e| e.step_compliance_frac);
                AggregateRow {
                    step,
                    seeds: es.len(),
                    return_mean: rm,
                    return_std: rs,
                    compliance_mean: cm,
                    compliance_std: cs,
                    step_compliance_mean: sm,
                    step_compliance_std: ss,
                }
            })
            .collect();
        variants.push(VariantReport {
            variant,
            checkpoints,
            per_seed,
            failures,
        });
    }
    let report = EvalReport {
        env_id: config.env.env_id.as_str().to_string(),
        d: config.agent.d,
        eval_episodes: config.eval_episodes,
        variants,
    };
    std::fs::create_dir_all(out)?;
    write_versioned(&out.join("report.json"), REPORT_FORMAT, &report)?;
    write_summary_csvs(&out.join("summary"), &report)?;
    plot_report(out, &report)?;
    Ok(report)
}

pub fn read_report(out_dir: &Path) -> Result<EvalReport> {
    read_versioned(&out_dir.join("report.json"), REPORT_FORMAT)
}

/// Full pipeline: safety model (trained if absent), every variant and seed,
/// then aggregation and plots.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let safety = if config.needs_safety_model() {
        Some(load_or_train_safety(config)?)
    } else {
        None
    };
    let seeds: Vec<usize> = (0..config.n_seeds).collect();
    let failures = train_agents(config, safety.as_ref(), &config.variants, &seeds)?;
    let report = aggregate(config)?;
    if report.variants.iter().all(|v| v.per_seed.is_empty()) {
        let (variant, f) = &failures[0];
        return Err(Error::Training(format!("every run failed; first: {variant} seed {}: {}", f.seed, f.message)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvId, Monitor};

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(EnvConfig::new(EnvId::PointRun).with_horizon(20), dir);
        cfg.constraint = Some(ConstraintSpec::window_average(Monitor::StateNorm { indices: vec![2, 3] }, 5, 0.3));
        cfg.collect.n_trajectories = 30;
        cfg.safety.hidden_size = 6;
        cfg.safety.decoder_hidden = vec![8];
        cfg.safety.epochs = 2;
        cfg.safety.minibatch = 16;
        cfg.agent.hidden = vec![8];
        cfg.agent.total_steps = 300;
        cfg.agent.warmup_steps = 100;
        cfg.agent.update_after = 100;
        cfg.agent.update_every = 50;
        cfg.agent.updates_per_cycle = 2;
        cfg.agent.batch_size = 16;
        cfg.agent.log_interval = 100;
        cfg.eval_episodes = 5;
        cfg.eval_interval = 200;
        cfg
    }

    #[test]
    fn end_to_end_writes_consistent_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.n_seeds = 2;
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.variants.len(), 2);
        for v in &report.variants {
            assert_eq!(v.per_seed.len(), 2);
            assert_eq!(v.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![200, 300]);
            // Aggregates match a recomputation from the per-seed CSVs.
            for c in &v.checkpoints {
                let es: Vec<EvalEntry> = (0..2)
                    .map(|s| {
                        read_eval_csv(&run_dir(dir.path(), v.variant, s).join("eval.csv"))
                            .unwrap()
                            .into_iter()
                            .find(|e| e.step == c.step)
                            .unwrap()
                    })
                    .collect();
                let (m, s) = mean_std(&es.iter().map(|e| e.compliance_frac).collect::<Vec<_>>());
                assert_eq!((c.compliance_mean, c.compliance_std), (m, s));
                let (m, s) = mean_std(&es.iter().map(|e| e.return_mean).collect::<Vec<_>>());
                assert_eq!((c.return_mean, c.return_std), (m, s));
            }
        }
        assert_eq!(read_report(dir.path()).unwrap(), report);
        for f in ["reward.svg", "compliance.svg", "summary/sac.csv", "summary/safesac_h.csv"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let svg = std::fs::read_to_string(dir.path().join("compliance.svg")).unwrap();
        assert!(svg.contains("d = 0.9"));
    }

    #[test]
    fn single_seed_has_zero_std_and_failures_are_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.variants = vec![Variant::Sac, Variant::SafesacH];
        train_agents(&cfg, None, &[Variant::Sac], &[0]).unwrap();
        // Without a safety model the constrained variant fails but is recorded.
        let failures = train_agents(&cfg, None, &[Variant::SafesacH], &[0]).unwrap();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].1.kind, "config");
        let report = aggregate(&cfg).unwrap();
        let sac = report.variant(Variant::Sac).unwrap();
        assert!(sac.checkpoints.iter().all(|c| c.return_std == 0.0 && c.compliance_std == 0.0));
        assert_eq!(sac.per_seed[0].entry.episodes, 5);
        let h = report.variant(Variant::SafesacH).unwrap();
        assert!(h.per_seed.is_empty());
        assert_eq!(h.failures.len(), 1);
    }

    #[test]
    fn evaluation_ignores_safety_model_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let model = load_or_train_safety(&cfg).unwrap();
        run_seed(&cfg, Some(&model), Variant::SafesacH, 0).unwrap();
        let agent = Agent::load(&run_dir(dir.path(), Variant::SafesacH, 0).join("agent.json")).unwrap();
        let spec = cfg.constraint();
        let base = evaluate(&agent, Some(&model), &cfg.env, &spec, 10, 5, 0).unwrap();
        // The decoder does not feed the hidden state the policy sees.
        let mut perturbed = model.clone();
        perturbed.decoder.params.iter_mut().for_each(|x| *x = *x * 1.5 + 0.1);
        assert_eq!(evaluate(&agent, Some(&perturbed), &cfg.env, &spec, 10, 5, 0).unwrap(), base);
    }
}
