//! Command implementations behind the `ceapg` binary.
//!
//! Commands take a resolved [`RunConfig`], perform all file I/O on the
//! calling thread, and return a report; the binary prints reports and maps
//! errors to exit codes with [`crate::error::exit_code`].

pub mod config;

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::apg::{self, StepRecord};
use crate::cem::{self, GenerationRecord, RunOptions};
use crate::dynamics::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::{self, ParamVector, PolicyArch};
use crate::seed;

pub use config::{Anneal, RunConfig};

/// Number of trailing steps inspected by [`balance_metric`].
pub const BALANCE_WINDOW: usize = 100;
/// Angular tolerance of [`balance_metric`], in radians.
pub const BALANCE_TOL: f64 = 0.2;
/// Gradient-check threshold, enforced for horizons up to [`GRADCHECK_MAX_HORIZON`].
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_MAX_HORIZON: usize = 50;

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fraction of the final [`BALANCE_WINDOW`] steps in which every joint angle,
/// wrapped to (-π, π], is within [`BALANCE_TOL`] of upright.
pub fn balance_metric(spec: &EnvSpec, traj: &[StepRecord]) -> f64 {
    if traj.is_empty() {
        return 0.0;
    }
    let first_angle = usize::from(spec.kind.has_cart());
    let window = &traj[traj.len().saturating_sub(BALANCE_WINDOW)..];
    let upright = window
        .iter()
        .filter(|r| {
            r.state.q[first_angle..]
                .iter()
                .all(|&a| dynamics::wrap_angle(a).abs() <= BALANCE_TOL)
        })
        .count();
    upright as f64 / window.len() as f64
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    File::create(path)
        .map(csv::Writer::from_writer)
        .map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, e.into())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Serializes one header and a sequence of records as CSV with LF endings.
pub fn csv_text<I, R>(header: &[&str], records: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing to memory cannot fail.
    w.write_record(header).expect("in-memory csv");
    for r in records {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv of utf-8 fields")
}

pub fn trajectory_columns(spec: &EnvSpec) -> Vec<String> {
    let dof = spec.kind.dof();
    let mut cols = vec!["step".to_string(), "time".to_string()];
    cols.extend((0..dof).map(|i| format!("q{i}")));
    cols.extend((0..dof).map(|i| format!("qdot{i}")));
    cols.push("action".into());
    cols.push("reward".into());
    cols.extend((0..spec.kind.obs_dim()).map(|i| format!("obs{i}")));
    cols
}

pub fn trajectory_header(spec: &EnvSpec) -> String {
    trajectory_columns(spec).join(",")
}

/// Trajectory CSV text; row `t` holds the state reached after step `t`.
pub fn format_trajectory(spec: &EnvSpec, traj: &[StepRecord]) -> String {
    let cols = trajectory_columns(spec);
    let header: Vec<&str> = cols.iter().map(String::as_str).collect();
    csv_text(
        &header,
        traj.iter().enumerate().map(|(t, r)| {
            let mut row = vec![t.to_string(), ((t + 1) as f64 * spec.dt).to_string()];
            row.extend(r.state.q.iter().map(f64::to_string));
            row.extend(r.state.qdot.iter().map(f64::to_string));
            row.push(r.action.to_string());
            row.push(r.reward.to_string());
            row.extend(r.obs.iter().map(f64::to_string));
            row
        }),
    )
}

pub const HISTORY_COLUMNS: [&str; 6] = [
    "generation",
    "best_return",
    "elite_mean_return",
    "sigma_mean",
    "env_steps",
    "wall_ms",
];

pub fn history_record(rec: &GenerationRecord, wall_time: bool) -> [String; 6] {
    [
        rec.generation.to_string(),
        rec.best_so_far.to_string(),
        rec.elite_mean.to_string(),
        rec.sigma_mean.to_string(),
        rec.env_steps.to_string(),
        if wall_time { rec.wall_ms } else { 0 }.to_string(),
    ]
}

pub fn format_summary(per_seed: &[(u64, f64)]) -> String {
    let (mean, std) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
    let rows = per_seed
        .iter()
        .map(|(s, b)| [s.to_string(), b.to_string()])
        .chain([
            ["mean".to_string(), mean.to_string()],
            ["stddev".to_string(), std.to_string()],
        ]);
    csv_text(&["seed", "best_return"], rows)
}

pub fn format_landscape(rows: &[(f64, f64)]) -> String {
    csv_text(
        &["alpha", "return"],
        rows.iter().map(|(a, r)| [a.to_string(), r.to_string()]),
    )
}

pub fn history_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("history_{seed}.csv"))
}

pub fn policy_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("policy_{seed}.txt"))
}

pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

/// Trains one policy per configured seed and writes history, policy, summary
/// and the effective configuration into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join(CONFIG_ECHO), &cfg.to_text())?;
    let setup = cfg.setup();
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let hpath = history_path(&cfg.out, s);
        let mut hist = create(&hpath)?;
        hist.write_record(HISTORY_COLUMNS)
            .and_then(|_| Ok(hist.flush()?))
            .map_err(|e| csv_error(&hpath, e))?;
        let mut io_err: Option<csv::Error> = None;
        let mut on_gen = |rec: &GenerationRecord| {
            if io_err.is_none() {
                let written = hist
                    .write_record(history_record(rec, cfg.wall_time))
                    .and_then(|_| Ok(hist.flush()?));
                if let Err(e) = written {
                    io_err = Some(e);
                }
            }
            log(&format!(
                "seed {s} generation {} best {:.3} elite {:.3} sigma {:.4e}",
                rec.generation, rec.best_so_far, rec.elite_mean, rec.sigma_mean
            ));
        };
        let outcome = cem::train(
            &setup,
            s,
            RunOptions {
                workers: cfg.workers,
                on_generation: Some(&mut on_gen),
            },
        )?;
        if let Some(e) = io_err {
            return Err(csv_error(&hpath, e));
        }
        policy::save_policy(&policy_path(&cfg.out, s), &setup.arch, &outcome.best_theta)?;
        per_seed.push((s, outcome.best_score));
        write_text(&cfg.out.join("summary.csv"), &format_summary(&per_seed))?;
    }
    let (mean, std) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(TrainReport {
        per_seed,
        mean,
        std,
    })
}

/// Checks that a loaded policy can drive the configured environment.
pub fn check_arch(arch: &PolicyArch, spec: &EnvSpec) -> Result<()> {
    if arch.obs_dim != spec.kind.obs_dim() {
        return Err(Error::ArchMismatch(format!(
            "policy expects {} observations, {} provides {}",
            arch.obs_dim,
            spec.kind,
            spec.kind.obs_dim()
        )));
    }
    if arch.u_max != spec.u_max {
        return Err(Error::ArchMismatch(format!(
            "policy u_max {} differs from environment u_max {}",
            arch.u_max, spec.u_max
        )));
    }
    Ok(())
}

/// Seed of evaluation rollout `k` under base seed `s`.
pub fn eval_seed(s: u64, k: usize) -> u64 {
    seed::derive(s, k as u64)
}

#[derive(Clone, Debug)]
pub struct RolloutReport {
    pub returns: Vec<f64>,
    pub balance: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Runs `count` evaluation rollouts per seed. With `out`, writes one
/// trajectory CSV per rollout named `trajectory_<seed>_<k>.csv`.
pub fn cmd_rollout(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta: &[f64],
    seeds: &[u64],
    count: usize,
    out: Option<&Path>,
) -> Result<RolloutReport> {
    spec.validate()?;
    check_arch(arch, spec)?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let mut returns = Vec::new();
    let mut balance = Vec::new();
    for &s in seeds {
        for k in 0..count {
            let r = apg::seeded_rollout(spec, arch, theta, eval_seed(s, k), false, true)?;
            let traj = r.trajectory.unwrap_or_default();
            if let Some(dir) = out {
                write_text(
                    &dir.join(format!("trajectory_{s}_{k}.csv")),
                    &format_trajectory(spec, &traj),
                )?;
            }
            returns.push(r.ret);
            balance.push(balance_metric(spec, &traj));
        }
    }
    let (mean, std) = mean_std(&returns);
    Ok(RolloutReport {
        returns,
        balance,
        mean,
        std,
    })
}

/// Evenly spaced shifts over `[-half_range, half_range]` with an exact zero in the middle.
pub fn landscape_grid(half_range: f64, samples: usize) -> Result<Vec<f64>> {
    if samples < 3 || samples.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "landscape samples must be odd and at least 3, got {samples}"
        )));
    }
    if !(half_range.is_finite() && half_range > 0.0) {
        return Err(Error::Config(format!(
            "landscape half_range must be positive, got {half_range}"
        )));
    }
    let n = (samples - 1) as f64;
    Ok((0..samples)
        .map(|i| half_range * (2.0 * i as f64 - n) / n)
        .collect())
}

/// Unit-length standard-normal direction in parameter space.
pub fn landscape_direction(dim: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(s, 1));
    let mut d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    d.iter_mut().for_each(|x| *x /= norm);
    d
}

/// Random policy used when no policy file is supplied.
pub fn random_policy(arch: &PolicyArch, s: u64) -> ParamVector {
    policy::init_params(arch, &mut seed::rng(seed::derive(s, 2)))
}

/// Returns along `theta + α·d`, every rollout starting from the initial
/// condition of `seeded_rollout(.., s, ..)`. Diverged rollouts give NaN.
pub fn cmd_landscape(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta: &[f64],
    s: u64,
    half_range: f64,
    samples: usize,
    out: Option<&Path>,
) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    check_arch(arch, spec)?;
    let grid = landscape_grid(half_range, samples)?;
    let d = landscape_direction(theta.len(), s);
    let init = dynamics::reset(spec, &mut seed::rng(s));
    let mut rows = Vec::with_capacity(samples);
    for alpha in grid {
        let shifted: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t + alpha * di).collect();
        let ret = match apg::rollout_from(spec, arch, &shifted, &init, false, false) {
            Ok(r) => r.ret,
            Err(e) if e.is_numerical() => f64::NAN,
            Err(e) => return Err(e),
        };
        rows.push((alpha, ret));
    }
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_text(path, &format_landscape(&rows))?;
    }
    Ok(rows)
}

/// Step ladder of the finite-difference oracle, largest first.
pub const FD_STEPS: [f64; 9] = [1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 3e-7, 1e-7];

/// Adjacent estimates closer than this are taken as kink-free.
pub const FD_AGREEMENT: f64 = 1e-7;

/// Five-point central difference of `f` at `x` with step `h`.
pub fn five_point<F: FnMut(f64) -> Result<f64>>(f: &mut F, x: f64, h: f64) -> Result<f64> {
    Ok((8.0 * (f(x + h)? - f(x - h)?) - (f(x + 2.0 * h)? - f(x - 2.0 * h)?)) / (12.0 * h))
}

/// Finite-difference derivative robust to nearby kinks (ReLU, clamps).
///
/// Estimates are taken over [`FD_STEPS`]. The larger-step estimate of the
/// first adjacent pair agreeing within [`FD_AGREEMENT`] is returned, else
/// the smaller estimate of the most self-consistent pair. A stencil that
/// straddles a kink disagrees with its neighbour and is passed over.
pub fn fd_derivative<F: FnMut(f64) -> Result<f64>>(mut f: F, x: f64) -> Result<f64> {
    let est = FD_STEPS
        .iter()
        .map(|&h| five_point(&mut f, x, h))
        .collect::<Result<Vec<_>>>()?;
    let mut best = (f64::INFINITY, est[est.len() - 1]);
    for w in est.windows(2) {
        let gap = relative_error(w[0], w[1]);
        if gap < FD_AGREEMENT {
            return Ok(w[0]);
        }
        if gap < best.0 {
            best = (gap, w[1]);
        }
    }
    Ok(best.1)
}

/// Relative error with a floor of 1e-3 on the denominator, so coordinates
/// whose true gradient is near zero are judged on absolute error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub horizon: usize,
    /// Largest relative error per seed.
    pub per_seed: Vec<(u64, f64)>,
    pub max_rel: f64,
}

impl GradcheckReport {
    /// Errors when the threshold applies to this horizon and is exceeded.
    pub fn enforce(&self) -> Result<()> {
        if self.horizon <= GRADCHECK_MAX_HORIZON && !(self.max_rel <= GRADCHECK_TOL) {
            return Err(Error::ThresholdBreach {
                what: "gradient check relative error",
                value: self.max_rel,
                limit: GRADCHECK_TOL,
            });
        }
        Ok(())
    }
}

/// Compares the BPTT gradient of a random policy with central finite
/// differences on `coords` random coordinates, for each seed.
pub fn cmd_gradcheck(
    spec: &EnvSpec,
    arch: &PolicyArch,
    seeds: &[u64],
    coords: usize,
) -> Result<GradcheckReport> {
    spec.validate()?;
    arch.validate()?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let theta = random_policy(arch, s);
        let init = dynamics::reset(spec, &mut seed::rng(seed::derive(s, 0)));
        let grad = apg::rollout_from(spec, arch, &theta, &init, true, false)?
            .gradient
            .unwrap_or_default();
        let n = coords.min(theta.len());
        let picked = index::sample(&mut seed::rng(seed::derive(s, 3)), theta.len(), n);
        let mut worst = 0.0f64;
        for i in picked.iter() {
            let mut p = theta.clone();
            let fd = fd_derivative(
                |x| {
                    p[i] = x;
                    apg::rollout_from(spec, arch, &p, &init, false, false).map(|r| r.ret)
                },
                theta[i],
            )?;
            let rel = relative_error(grad[i], fd);
            worst = if rel.is_nan() {
                f64::NAN
            } else {
                worst.max(rel)
            };
            if worst.is_nan() {
                break;
            }
        }
        per_seed.push((s, worst));
    }
    let max_rel = per_seed.iter().map(|p| p.1).fold(0.0f64, |m, x| {
        if x.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(x)
        }
    });
    Ok(GradcheckReport {
        horizon: spec.horizon,
        per_seed,
        max_rel,
    })
}
