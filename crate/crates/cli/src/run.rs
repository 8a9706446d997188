//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use otcr::datagen::{generate_synthetic, load_csv, split, CausalDataset, SplitSpec};
use otcr::estimator::{select_lambda, train, PcrConfig, PcrModel};
use otcr::matstat::{pairwise_sq_dist, SeededRng};
use otcr::metrics::{evaluate, EvalReport};
use otcr::ot_exact::MassVector;
use otcr::ot_fgw::{fgw_solve_default, FgwProblem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{DataSource, EvalSplit, RunConfig};
use crate::error::{CliError, Result};
use crate::report::{aggregate, compare, mean_std, sweep_csv, BenchCell, MonotoneCheck, RunReport, SeedRow};

pub const THREADS_ENV: &str = "OTCR_THREADS";

/// Worker pool capped by `OTCR_THREADS` when set.
fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(THREADS_ENV, format!("`{v}` is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Usage(e.to_string()))
}

pub struct Splits {
    pub train: CausalDataset,
    pub val: CausalDataset,
    pub test: CausalDataset,
}

impl Splits {
    pub fn get(&self, which: EvalSplit) -> &CausalDataset {
        match which {
            EvalSplit::Train => &self.train,
            EvalSplit::Val => &self.val,
            EvalSplit::Test => &self.test,
        }
    }
}

pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<CausalDataset> {
    Ok(match &cfg.data {
        DataSource::Synthetic(p) => generate_synthetic(&p.spec(seed))?,
        DataSource::Csv { path } => load_csv(path)?.0,
    })
}

pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Splits> {
    let ds = load_data(cfg, seed)?;
    let sp = split(&ds, &SplitSpec::standard(seed))?;
    Ok(Splits {
        train: ds.subset(&sp.train),
        val: ds.subset(&sp.val),
        test: ds.subset(&sp.test),
    })
}

pub fn eval_model(model: &PcrModel, ds: &CausalDataset) -> Result<EvalReport> {
    let (y0, y1) = model.predict_outcomes(&ds.x)?;
    Ok(evaluate(ds, &y0, &y1)?)
}

/// One training job.
#[derive(Debug, Clone)]
struct Job {
    variant: String,
    seed: u64,
    model: PcrConfig,
    sweep_value: Option<f64>,
}

fn run_job(cfg: &RunConfig, job: &Job, out: Option<&Path>) -> Result<SeedRow> {
    let splits = prepare(cfg, job.seed)?;
    let t0 = Instant::now();
    let (model, lambda_scores) = match &cfg.lambda_grid {
        Some(grid) => {
            let sel = select_lambda(&job.model, grid, &splits.train, &splits.val)?;
            (sel.model, sel.scores)
        }
        None => (train(&job.model, &splits.train, &splits.val)?, Vec::new()),
    };
    let train_seconds = t0.elapsed().as_secs_f64();
    let checkpoint = match out {
        Some(dir) => {
            let tag = match job.sweep_value {
                Some(v) => format!("{}-{v}", job.variant),
                None => job.variant.clone(),
            };
            let path = dir.join("checkpoints").join(format!("{tag}-seed{}.json", job.seed));
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            model.save(&path)?;
            Some(path.display().to_string())
        }
        None => None,
    };
    Ok(SeedRow {
        variant: job.variant.clone(),
        seed: job.seed,
        lambda: model.config.lambda,
        lambda_scores,
        sweep_value: job.sweep_value,
        best_epoch: model.best_epoch,
        epochs: model.history.len(),
        unconverged_solves: model.history.iter().map(|h| h.unconverged_solves).sum(),
        skipped_discrepancy_batches: model.history.iter().map(|h| h.skipped_discrepancy_batches).sum(),
        within: eval_model(&model, &splits.train)?,
        out_of_sample: eval_model(&model, &splits.test)?,
        train_seconds,
        checkpoint,
    })
}

/// Runs `jobs` on the worker pool; rows come back in job order.
fn run_jobs(cfg: &RunConfig, jobs: &[Job]) -> Result<Vec<SeedRow>> {
    let out = cfg.out_dir.as_deref();
    pool()?.install(|| jobs.par_iter().map(|j| run_job(cfg, j, out)).collect())
}

fn write_outputs(cfg: &RunConfig, report: &RunReport, csv: Option<(&str, &str)>) -> Result<()> {
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
        if let Some((name, body)) = csv {
            std::fs::write(dir.join(name), body)?;
        }
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<RunReport> {
    let t0 = Instant::now();
    let jobs: Vec<Job> = cfg
        .seeds
        .iter()
        .map(|&seed| Job {
            variant: "pcr".into(),
            seed,
            model: cfg.model_for(seed),
            sweep_value: None,
        })
        .collect();
    let mut report = RunReport::new("train", cfg.to_value());
    report.rows = run_jobs(cfg, &jobs)?;
    report.aggregates = aggregate(&report.rows);
    report.total_seconds = t0.elapsed().as_secs_f64();
    write_outputs(cfg, &report, None)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub seed: u64,
    pub split: EvalSplit,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// Evaluate a checkpoint on the configured split of its own seed's data.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    let model = PcrModel::load(checkpoint)?;
    let seed = model.config.seed;
    let splits = prepare(cfg, seed)?;
    let ds = splits.get(cfg.eval_split);
    if ds.d() != model.input_dim() {
        return Err(otcr::Error::DimensionMismatch {
            op: "eval",
            expected: model.input_dim().to_string(),
            found: ds.d().to_string(),
        }
        .into());
    }
    Ok(EvalOutcome {
        seed,
        split: cfg.eval_split,
        checkpoint: checkpoint.to_path_buf(),
        report: eval_model(&model, ds)?,
    })
}

/// Ablation variants as `(name, use_lpr, use_isp)`.
pub const ABLATION: [(&str, bool, bool); 4] =
    [("baseline", false, false), ("lpr", true, false), ("isp", false, true), ("pcr", true, true)];

pub fn cmd_ablate(cfg: &RunConfig) -> Result<RunReport> {
    let t0 = Instant::now();
    let mut jobs = Vec::new();
    for (name, lpr, isp) in ABLATION {
        for &seed in &cfg.seeds {
            jobs.push(Job {
                variant: name.into(),
                seed,
                model: PcrConfig {
                    use_lpr: lpr,
                    use_isp: isp,
                    ..cfg.model_for(seed)
                },
                sweep_value: None,
            });
        }
    }
    let mut report = RunReport::new("ablate", cfg.to_value());
    report.rows = run_jobs(cfg, &jobs)?;
    report.aggregates = aggregate(&report.rows);
    report.comparisons = compare(&report.rows, "baseline", "pehe_sqrt");
    report.total_seconds = t0.elapsed().as_secs_f64();
    write_outputs(cfg, &report, None)?;
    Ok(report)
}

/// Sweep report plus the tidy CSV body.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<(RunReport, String)> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| CliError::config("sweep", "required for the sweep command"))?;
    let t0 = Instant::now();
    let mut jobs = Vec::new();
    for &v in &sweep.values {
        for &seed in &cfg.seeds {
            let mut model = cfg.model_for(seed);
            sweep.param.apply(&mut model, v);
            jobs.push(Job {
                variant: "pcr".into(),
                seed,
                model,
                sweep_value: Some(v),
            });
        }
    }
    let mut report = RunReport::new("sweep", cfg.to_value());
    report.rows = run_jobs(cfg, &jobs)?;
    report.aggregates = aggregate(&report.rows);
    report.total_seconds = t0.elapsed().as_secs_f64();
    let csv = sweep_csv(sweep.param.name(), &report.rows, &sweep.metrics);
    write_outputs(cfg, &report, Some(("sweep.csv", &csv)))?;
    Ok((report, csv))
}

/// One timed FGW problem at total batch size `n` and dimension `d`.
pub fn bench_problem(n: usize, d: usize, kappa: f64, rng: &mut SeededRng) -> Result<FgwProblem> {
    let (n0, n1) = (n / 2, n - n / 2);
    let r0 = rng.normal_matrix(n0, d);
    let r1 = rng.normal_matrix(n1, d);
    Ok(FgwProblem::new(
        pairwise_sq_dist(&r0, &r1)?,
        pairwise_sq_dist(&r0, &r0)?,
        pairwise_sq_dist(&r1, &r1)?,
        MassVector::uniform(n0),
        MassVector::uniform(n1),
        kappa,
    )?)
}

/// Timings run sequentially on the calling thread.
pub fn cmd_bench(cfg: &RunConfig) -> Result<(RunReport, String)> {
    let spec = cfg.bench.clone().unwrap_or_default();
    let t0 = Instant::now();
    let seed = cfg.seeds[0];
    let mut rng = SeededRng::derive(seed, 900);
    let mut csv = String::from("n,d,repeat,seconds,iterations\n");
    let mut report = RunReport::new("bench", cfg.to_value());
    let mut ns = spec.n.clone();
    ns.sort_unstable();
    ns.dedup();
    for &d in &spec.d {
        for &n in &ns {
            let mut secs = Vec::with_capacity(spec.repeats);
            let mut iters = 0.0;
            for rep in 0..spec.repeats {
                let prob = bench_problem(n, d, spec.kappa, &mut rng)?;
                let start = Instant::now();
                let res = fgw_solve_default(&prob)?;
                let s = start.elapsed().as_secs_f64();
                secs.push(s);
                iters += res.plan.iterations as f64;
                csv += &format!("{n},{d},{rep},{s:?},{}\n", res.plan.iterations);
            }
            let (mean, std) = mean_std(&secs);
            let r = secs.len() as f64;
            let t = StudentsT::new(0.0, 1.0, r - 1.0).expect("r ≥ 2").inverse_cdf(0.995);
            let half = t * std / r.sqrt();
            report.bench.push(BenchCell {
                n,
                d,
                repeats: spec.repeats,
                mean_seconds: mean,
                std_seconds: std,
                ci99: (mean - half, mean + half),
                mean_iterations: iters / r,
            });
        }
        let means: Vec<f64> = report.bench.iter().filter(|c| c.d == d).map(|c| c.mean_seconds).collect();
        report.bench_monotone.push(MonotoneCheck {
            d,
            monotone: means.windows(2).all(|w| w[1] > w[0]),
        });
    }
    report.total_seconds = t0.elapsed().as_secs_f64();
    write_outputs(cfg, &report, Some(("bench.csv", &csv)))?;
    Ok((report, csv))
}
