//! Command implementations behind the `fedlora-dp` binary.
//!
//! Every mode except `report` writes into `<output_dir>/<experiment_name>/`
//! and starts by dropping a `config.snapshot` there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{Mode, RunConfig};
use crate::dp::MechanismParams;
use crate::error::{Error, Result};
use crate::fedsim::{simulate, ExperimentOutcome, TrainConfig};
use crate::mia::{
    adversarial_game, attack_accuracy, binomial_std_error, calibrated_for, check_dp_bound, clean_reference, play,
    RocCurve,
};
use crate::noise::{linear_fit, rank_sweep, size_sweep, FactorNorms, NoiseModel, VarianceReport};
use crate::output::{num, read_csv, write_csv, METRICS_HEADER, NOISE_STATS_HEADER, ROC_HEADER, TRIALS_HEADER};
use crate::random::{kind, RngStream};
use crate::verify::{run_suite, SuiteParams, SuiteSize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const SWEEP_HEADER: &str = "sweep_key,sweep_value,dp_enabled,final_loss,clip_b,clip_a,sigma_b,sigma_a,naive_epsilon";
pub const VERIFY_HEADER: &str = "check,status,detail";

/// Check name and whether it passed.
pub type CheckStatus = (String, bool);

/// What a command produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub mode: Mode,
    pub run_dir: PathBuf,
    pub config_hash: String,
    /// `key = value` lines, also written to `summary.txt`.
    pub lines: Vec<String>,
    /// `Some` for `verify`: every check with its status.
    pub checks: Option<Vec<CheckStatus>>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        match &self.checks {
            Some(c) if c.iter().any(|(_, ok)| !ok) => EXIT_VERIFY,
            _ => EXIT_OK,
        }
    }
}

/// Validation problems map to 1, everything else that fails at run time to 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidParameter { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Runs the command selected by `cfg.mode`.
pub fn execute(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    if cfg.mode == Mode::Report {
        return cmd_report(cfg, &dir);
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let snapshot = dir.join("config.snapshot");
    fs::write(&snapshot, cfg.snapshot()).map_err(|e| Error::io(&snapshot, e))?;

    let started = Instant::now();
    let (mut lines, checks) = match cfg.mode {
        Mode::Run => (cmd_run(cfg, &dir)?, None),
        Mode::SweepEpsilon | Mode::SweepClip => (cmd_sweep_training(cfg, &dir)?, None),
        Mode::SweepRank | Mode::SweepSize => (cmd_sweep_noise(cfg, &dir)?, None),
        Mode::Mia => (cmd_mia(cfg, &dir)?, None),
        Mode::Verify => {
            let (lines, checks) = cmd_verify(cfg, &dir)?;
            (lines, Some(checks))
        }
        Mode::Report => unreachable!("handled above"),
    };
    lines.insert(0, format!("mode = {}", cfg.mode));
    lines.insert(1, format!("config_hash = {}", cfg.hash()));
    lines.push(format!("wall_time_s = {:.3}", started.elapsed().as_secs_f64()));
    write_summary(&dir, &lines)?;
    Ok(RunSummary {
        mode: cfg.mode,
        run_dir: dir,
        config_hash: cfg.hash(),
        lines,
        checks,
    })
}

fn write_summary(dir: &Path, lines: &[String]) -> Result<()> {
    let path = dir.join("summary.txt");
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_run(train: &TrainConfig, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let outcome = simulate(train)?;
    write_csv(&dir.join("metrics.csv"), METRICS_HEADER, &outcome.metrics_rows(train))?;
    Ok(outcome)
}

fn cmd_run(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let train = cfg.train_config();
    let outcome = write_run(&train, dir)?;
    Ok(outcome.summary_lines(&train))
}

fn sweep_row(key: &str, value: f64, o: &ExperimentOutcome) -> String {
    let m = &o.mechanism;
    format!(
        "{key},{},{},{},{},{},{},{},{}",
        num(value),
        o.dp_enabled,
        num(o.final_loss()),
        num(m.clip_b.value()),
        num(m.clip_a.value()),
        num(m.sigma_b),
        num(m.sigma_a),
        num(o.naive_epsilon.unwrap_or(0.0)),
    )
}

/// `sweep_epsilon` / `sweep_clip`: one full private run per value plus a
/// non-private baseline, each in its own subdirectory, and a combined table.
fn cmd_sweep_training(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let (key, values) = match cfg.mode {
        Mode::SweepEpsilon => ("epsilon", &cfg.sweep_epsilon),
        _ => ("clip", &cfg.sweep_clip),
    };
    let mut rows = Vec::new();
    let mut lines = Vec::new();

    let mut base = cfg.clone();
    base.dp_enabled = false;
    let baseline = write_run(&base.train_config(), &dir.join("nondp"))?;
    rows.push(sweep_row(key, 0.0, &baseline));
    lines.push(format!("nondp final_loss = {}", num(baseline.final_loss())));

    for &v in values {
        let mut point = cfg.clone();
        point.dp_enabled = true;
        if key == "epsilon" {
            point.epsilon_b = v;
            point.epsilon_a = v;
        } else {
            point.clip_b = v;
            point.clip_a = v;
        }
        point.validate()?;
        let outcome = write_run(&point.train_config(), &dir.join(format!("{key}_{v}")))?;
        rows.push(sweep_row(key, v, &outcome));
        lines.push(format!("{key} {v} final_loss = {}", num(outcome.final_loss())));
    }
    write_csv(&dir.join(format!("sweep_{key}.csv")), SWEEP_HEADER, &rows)?;
    Ok(lines)
}

fn noise_row(key: &str, value: &str, r: &VarianceReport) -> String {
    format!(
        "{key},{value},{},{},{},{},{}",
        num(r.stats.mean_diff),
        num(r.stats.std_error),
        num(r.mc_estimate()),
        num(r.exact_formula),
        num(r.paper_bound),
    )
}

fn cmd_sweep_noise(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let model = NoiseModel::new(cfg.noise_sigma_b, cfg.noise_sigma_a)?;
    let norms = FactorNorms {
        b: cfg.noise_norm_b,
        a: cfg.noise_norm_a,
    };
    let rng = RngStream::new(cfg.seed, &[kind::MONTE_CARLO]);
    let mut lines = Vec::new();
    let rows: Vec<String> = if cfg.mode == Mode::SweepRank {
        let reports = rank_sweep(&cfg.sweep_rank, cfg.noise_m, cfg.noise_n, norms, &model, cfg.noise_draws, &rng)?;
        let xs: Vec<f64> = reports.iter().map(|r| r.r as f64).collect();
        let ys: Vec<f64> = reports.iter().map(|r| r.mc_estimate()).collect();
        let (c0, c1, r2) = linear_fit(&xs, &ys);
        lines.push(format!("fit_intercept = {}", num(c0)));
        lines.push(format!("fit_slope = {}", num(c1)));
        lines.push(format!("fit_r2 = {}", num(r2)));
        for w in reports.windows(2) {
            lines.push(format!(
                "ratio_{}_{} = {}",
                w[1].r,
                w[0].r,
                num(w[1].mc_estimate() / w[0].mc_estimate())
            ));
        }
        reports.iter().map(|r| noise_row("rank", &r.r.to_string(), r)).collect()
    } else {
        let reports = size_sweep(&cfg.sweep_size, cfg.noise_rank, norms, &model, cfg.noise_draws, &rng)?;
        for w in reports.windows(2) {
            lines.push(format!(
                "size_{}x{}_over_{}x{} = {}",
                w[1].m,
                w[1].n,
                w[0].m,
                w[0].n,
                num(w[1].mc_estimate() / w[0].mc_estimate())
            ));
        }
        reports
            .iter()
            .map(|r| noise_row("size", &format!("{}x{}", r.m, r.n), r))
            .collect()
    };
    write_csv(&dir.join("noise_stats.csv"), NOISE_STATS_HEADER, &rows)?;
    Ok(lines)
}

fn cmd_mia(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let (pair, game) = adversarial_game(cfg.seed)?;
    let mechanism = calibrated_for(&game.mechanism, cfg.mia_epsilon, cfg.delta)?;
    let reference = clean_reference(&pair, &game.with_mechanism(mechanism))?;
    let rng = RngStream::new(cfg.seed, &[kind::TRIAL]);
    let trials = play(&reference, &mechanism, cfg.mia_trials, &rng)?;

    let rows: Vec<String> = trials
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{i},{},{}", u8::from(t.true_bit), num(t.score)))
        .collect();
    write_csv(&dir.join("mia_trials.csv"), TRIALS_HEADER, &rows)?;
    let curve = RocCurve::from_trials(&trials)?;
    write_csv(&dir.join("mia_roc.csv"), ROC_HEADER, &curve.rows())?;
    let check = check_dp_bound(&curve, cfg.mia_epsilon, cfg.delta, cfg.mia_trials)?;

    let accuracy_at = |factor: f64| -> Result<f64> {
        let m = MechanismParams {
            sigma_b: mechanism.sigma_b * factor,
            sigma_a: mechanism.sigma_a * factor,
            ..mechanism
        };
        Ok(attack_accuracy(&play(&reference, &m, cfg.mia_trials, &rng)?))
    };
    let acc = attack_accuracy(&trials);
    Ok(vec![
        format!("epsilon = {}", num(cfg.mia_epsilon)),
        format!("delta = {}", num(cfg.delta)),
        format!("trials = {}", cfg.mia_trials),
        format!("differing_index = {}", pair.differing_index),
        format!("separation = {}", num(reference.separation())),
        format!("sigma_b = {}", num(mechanism.sigma_b)),
        format!("sigma_a = {}", num(mechanism.sigma_a)),
        format!("accuracy = {}", num(acc)),
        format!("accuracy_std_error = {}", num(binomial_std_error(acc, cfg.mia_trials))),
        format!("accuracy_sigma_zero = {}", num(accuracy_at(0.0)?)),
        format!("accuracy_sigma_10x = {}", num(accuracy_at(10.0)?)),
        format!("dp_bound_max_violation = {}", num(check.max_violation)),
        format!("dp_bound_tolerance = {}", num(check.mc_tolerance)),
        format!("dp_bound = {}", if check.passed() { "PASS" } else { "FAIL" }),
    ])
}

fn cmd_verify(cfg: &RunConfig, dir: &Path) -> Result<(Vec<String>, Vec<CheckStatus>)> {
    let params = SuiteParams {
        seed: cfg.seed,
        size: if cfg.verify_fast { SuiteSize::fast() } else { SuiteSize::full() },
        ranks_m: cfg.noise_m,
        ranks_n: cfg.noise_n,
        noise: NoiseModel::new(cfg.noise_sigma_b, cfg.noise_sigma_a)?,
        norms: FactorNorms {
            b: cfg.noise_norm_b,
            a: cfg.noise_norm_a,
        },
        delta: cfg.delta,
        sigma_scale: cfg.verify_sigma_scale,
    };
    let results = run_suite(&params)?;
    let rows: Vec<String> = results
        .iter()
        .map(|r| format!("{},{},\"{}\"", r.name, r.status(), r.detail.replace('"', "'")))
        .collect();
    fs::write(dir.join("verify_report.csv"), format!("{VERIFY_HEADER}\n{}\n", rows.join("\n")))
        .map_err(|e| Error::io(dir.join("verify_report.csv"), e))?;
    let lines = results
        .iter()
        .map(|r| format!("{} = {} ({})", r.name, r.status(), r.detail))
        .collect();
    let checks = results.iter().map(|r| (r.name.to_string(), r.passed)).collect();
    Ok((lines, checks))
}

/// Final-round record of one `metrics.csv`.
struct RunTail {
    name: String,
    strategy: String,
    dp_enabled: bool,
    final_loss: f64,
}

fn parse_cell(path: &Path, cell: &str) -> Result<f64> {
    crate::output::parse_num(cell).ok_or_else(|| Error::Format {
        path: path.into(),
        reason: format!("'{cell}' is not a number"),
    })
}

/// `report`: per-figure CSVs and `report.txt` for an existing run
/// directory. Looks at `metrics.csv` in the directory and its immediate
/// subdirectories, `noise_stats.csv` and `mia_roc.csv`.
pub fn cmd_report(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let metrics_path = dir.join("metrics.csv");
    let mut runs: Vec<(String, PathBuf)> = Vec::new();
    if metrics_path.is_file() {
        runs.push((".".into(), metrics_path.clone()));
    }
    if dir.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.csv").is_file())
            .collect();
        subs.sort();
        for s in subs {
            let name = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            runs.push((name, s.join("metrics.csv")));
        }
    }
    let noise_path = dir.join("noise_stats.csv");
    let roc_path = dir.join("mia_roc.csv");
    if runs.is_empty() && !noise_path.is_file() && !roc_path.is_file() {
        return Err(Error::Format {
            path: metrics_path,
            reason: "missing metrics file, nothing to report".into(),
        });
    }

    let mut lines = vec![format!("report for {}", dir.display())];
    let mut loss_rows = Vec::new();
    let mut noise_rows = Vec::new();
    let mut tails = Vec::new();
    for (name, path) in &runs {
        let rows = read_csv(path, METRICS_HEADER)?;
        if rows.is_empty() {
            return Err(Error::Format {
                path: path.clone(),
                reason: "no rounds recorded".into(),
            });
        }
        for r in &rows {
            loss_rows.push(format!("{name},{},{},{},{},{}", r[0], r[1], r[2], r[3], r[5]));
            if r[2] == "true" {
                noise_rows.push(format!("{name},{},{},{}", r[0], r[7], r[8]));
            }
        }
        let last = rows.last().expect("non-empty");
        let tail = RunTail {
            name: name.clone(),
            strategy: last[1].clone(),
            dp_enabled: last[2] == "true",
            final_loss: parse_cell(path, &last[5])?,
        };
        lines.push(format!(
            "run {} ({}, dp {}): final_loss = {}",
            tail.name,
            tail.strategy,
            tail.dp_enabled,
            num(tail.final_loss)
        ));
        tails.push(tail);
    }
    for dp in tails.iter().filter(|t| t.dp_enabled) {
        if let Some(plain) = tails.iter().find(|t| !t.dp_enabled && t.strategy == dp.strategy) {
            lines.push(format!(
                "{}: dp ({}) final_loss = {}, non-dp ({}) final_loss = {}, difference = {}",
                dp.strategy,
                dp.name,
                num(dp.final_loss),
                plain.name,
                num(plain.final_loss),
                num(dp.final_loss - plain.final_loss)
            ));
        }
    }
    if !runs.is_empty() {
        write_csv(
            &dir.join("report_loss.csv"),
            "run,round,strategy,dp_enabled,epsilon,mean_loss",
            &loss_rows,
        )?;
    }
    if !noise_rows.is_empty() {
        write_csv(
            &dir.join("report_noise_by_round.csv"),
            "run,round,expectation_diff,total_variance",
            &noise_rows,
        )?;
    }
    if noise_path.is_file() {
        let rows = read_csv(&noise_path, NOISE_STATS_HEADER)?;
        let key = rows.first().map_or("sweep_value", |r| r[0].as_str()).to_string();
        let table: Vec<String> = rows.iter().map(|r| format!("{},{},{}", r[1], r[2], r[4])).collect();
        write_csv(
            &dir.join("report_noise_table.csv"),
            &format!("{key},expectation,variance"),
            &table,
        )?;
        for r in &rows {
            lines.push(format!("{key} {}: expectation = {}, variance = {}", r[1], r[2], r[4]));
        }
    }
    if roc_path.is_file() {
        let rows = read_csv(&roc_path, ROC_HEADER)?;
        write_csv(
            &dir.join("report_roc.csv"),
            ROC_HEADER,
            &rows.iter().map(|r| r.join(",")).collect::<Vec<_>>(),
        )?;
        lines.push(format!("roc points = {}", rows.len()));
    }
    let report = dir.join("report.txt");
    fs::write(&report, lines.join("\n") + "\n").map_err(|e| Error::io(&report, e))?;
    Ok(RunSummary {
        mode: Mode::Report,
        run_dir: dir.to_path_buf(),
        config_hash: cfg.hash(),
        lines,
        checks: None,
    })
}
