//! Cross-entropy search over policy parameters.
//!
//! [`cem_optimize`] is the generic diagonal-Gaussian loop; [`ce_apg_train`]
//! refines every sampled candidate with an APG run before ranking it,
//! [`cem_only_train`] ranks raw candidates by rollout return, and
//! [`papg_train`] runs independent APG searches and keeps the best.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::apg::{self, ApgConfig, ApgRunner};
use crate::dynamics::EnvSpec;
use crate::error::{Error, Result};
use crate::optim::LrSchedule;
use crate::policy::{init_params, ParamVector, PolicyArch};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    CeApg,
    Papg,
    Cem,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::CeApg => "ce-apg",
            Mode::Papg => "papg",
            Mode::Cem => "cem",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "ce-apg" | "ceapg" => Ok(Mode::CeApg),
            "papg" => Ok(Mode::Papg),
            "cem" => Ok(Mode::Cem),
            other => Err(Error::Config(format!("unknown algorithm mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemConfig {
    /// Candidates sampled per generation.
    pub k_a: usize,
    /// Elites kept per generation.
    pub k_e: usize,
    pub generations: usize,
    pub sigma0: f64,
    pub mode: Mode,
    /// Replace the last candidate of each generation with the current mean.
    pub inject_mean: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            k_a: 24,
            k_e: 8,
            generations: 200,
            sigma0: 0.05,
            mode: Mode::CeApg,
            inject_mean: false,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_e == 0 || self.k_e > self.k_a {
            return Err(Error::Config(format!(
                "need 1 <= k_e <= k_a, got k_e = {} and k_a = {}",
                self.k_e, self.k_a
            )));
        }
        if self.generations == 0 {
            return Err(Error::Config("cem.generations must be at least 1".into()));
        }
        if !(self.sigma0 >= 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config(
                "cem.sigma0 must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CemDistribution {
    pub mean: ParamVector,
    pub std: Vec<f64>,
    pub generation: usize,
}

impl CemDistribution {
    pub fn new(mean: ParamVector, sigma0: f64) -> Self {
        let n = mean.len();
        CemDistribution {
            mean,
            std: vec![sigma0; n],
            generation: 0,
        }
    }

    pub fn sigma_mean(&self) -> f64 {
        if self.std.is_empty() {
            0.0
        } else {
            self.std.iter().sum::<f64>() / self.std.len() as f64
        }
    }
}

/// `θ_i = μ + σ ⊙ z_i` with candidate `i` drawn from its own derived stream.
pub fn sample_candidates(
    dist: &CemDistribution,
    k_a: usize,
    generation_seed: u64,
) -> Vec<ParamVector> {
    (0..k_a)
        .map(|i| {
            let mut rng = seed::rng(seed::derive_path(
                generation_seed,
                &[i as u64, seed::SAMPLE],
            ));
            dist.mean
                .iter()
                .zip(&dist.std)
                .map(|(&m, &s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s * z
                })
                .collect::<Vec<f64>>()
                .into()
        })
        .collect()
}

/// Descending score order; non-finite scores rank below every finite one,
/// ties keep the lower index first.
fn rank_scores(a: f64, b: f64) -> Ordering {
    match (a.is_finite(), b.is_finite()) {
        (true, true) => b.partial_cmp(&a).unwrap(),
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => Ordering::Equal,
    }
}

/// Candidate indices sorted best first.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| rank_scores(scores[i], scores[j]));
    idx
}

/// Refits the distribution to the top `k_e` candidates.
///
/// The mean is the elite average; the standard deviation is the root mean
/// squared deviation of the elites from that new mean. Sums run over elites
/// in rank order.
pub fn elite_update(
    dist: &CemDistribution,
    scored: &[(ParamVector, f64)],
    k_e: usize,
) -> Result<CemDistribution> {
    if k_e == 0 || scored.len() < k_e {
        return Err(Error::Config(format!(
            "elite update needs at least k_e = {k_e} >= 1 candidates, got {}",
            scored.len()
        )));
    }
    let dim = dist.mean.len();
    for (theta, _) in scored {
        if theta.len() != dim {
            return Err(Error::LengthMismatch {
                what: "candidate",
                expected: dim,
                got: theta.len(),
            });
        }
    }
    let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let elites: Vec<&ParamVector> = ranking(&scores)[..k_e]
        .iter()
        .map(|&i| &scored[i].0)
        .collect();
    let k = k_e as f64;
    let mut mean = vec![0.0; dim];
    for e in &elites {
        for (m, x) in mean.iter_mut().zip(e.iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= k;
    }
    let mut var = vec![0.0; dim];
    for e in &elites {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(e.iter()) {
            let d = m - x;
            *v += d * d;
        }
    }
    let std: Vec<f64> = var.into_iter().map(|v| (v / k).sqrt()).collect();
    if mean.iter().chain(&std).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    Ok(CemDistribution {
        mean: mean.into(),
        std,
        generation: dist.generation + 1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub scores: Vec<f64>,
    pub elite_mean: f64,
    pub best_so_far: f64,
    pub sigma_mean: f64,
    /// Cumulative environment steps since the start of training.
    pub env_steps: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_theta: ParamVector,
    pub best_score: f64,
    pub history: Vec<GenerationRecord>,
    pub final_distribution: Option<CemDistribution>,
}

/// Result of evaluating one candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    /// Parameters the score belongs to (refined for CE-APG).
    pub theta: ParamVector,
    pub score: f64,
    pub env_steps: u64,
}

/// Per-generation context handed to candidate evaluators.
#[derive(Clone, Copy, Debug)]
pub struct CandidateCtx {
    pub generation: usize,
    pub index: usize,
    /// Root of this candidate's random streams.
    pub seed: u64,
    pub lr: f64,
}

/// Execution and reporting options shared by the training drivers.
pub struct RunOptions<'a> {
    /// Worker threads for candidate evaluation; 1 runs inline.
    pub workers: usize,
    pub on_generation: Option<&'a mut dyn FnMut(&GenerationRecord)>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            on_generation: None,
        }
    }
}

fn fan_out<T: Send, F>(workers: usize, n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

fn elite_mean_score(scores: &[f64], k_e: usize) -> f64 {
    ranking(scores)[..k_e]
        .iter()
        .map(|&i| scores[i])
        .sum::<f64>()
        / k_e as f64
}

/// Generic diagonal-Gaussian cross-entropy loop.
///
/// Each generation samples `k_a` candidates, evaluates them (in parallel
/// when `opts.workers > 1`), refits the distribution on the elites, and
/// records a [`GenerationRecord`]. A candidate whose evaluation fails
/// scores `-∞` and keeps its sampled parameters.
pub fn cem_optimize<F>(
    cfg: &CemConfig,
    init_mean: ParamVector,
    schedule: &LrSchedule,
    root_seed: u64,
    mut opts: RunOptions<'_>,
    evaluate: F,
) -> Result<TrainOutcome>
where
    F: Fn(&ParamVector, CandidateCtx) -> Result<Scored> + Sync + Send,
{
    cfg.validate()?;
    let mut dist = CemDistribution::new(init_mean, cfg.sigma0);
    let mut best_theta = dist.mean.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.generations);
    let mut env_steps = 0u64;
    let gen_root = seed::derive(root_seed, seed::GENERATIONS);

    for g in 0..cfg.generations {
        let start = Instant::now();
        let lr = schedule.lr_at(g.min(schedule.total_generations - 1))?;
        let gen_seed = seed::derive(gen_root, g as u64);
        let mut candidates = sample_candidates(&dist, cfg.k_a, gen_seed);
        if cfg.inject_mean {
            if let Some(last) = candidates.last_mut() {
                *last = dist.mean.clone();
            }
        }
        let results: Vec<Scored> = fan_out(opts.workers, cfg.k_a, |i| {
            let ctx = CandidateCtx {
                generation: g,
                index: i,
                seed: seed::derive(gen_seed, i as u64),
                lr,
            };
            evaluate(&candidates[i], ctx).unwrap_or_else(|_| Scored {
                theta: candidates[i].clone(),
                score: f64::NEG_INFINITY,
                env_steps: 0,
            })
        });

        let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
        for r in &results {
            env_steps += r.env_steps;
            if r.score.is_finite() && r.score > best_score {
                best_score = r.score;
                best_theta = r.theta.clone();
            }
        }
        let scored: Vec<(ParamVector, f64)> =
            results.into_iter().map(|r| (r.theta, r.score)).collect();
        dist = elite_update(&dist, &scored, cfg.k_e)?;

        let record = GenerationRecord {
            generation: g,
            elite_mean: elite_mean_score(&scores, cfg.k_e),
            scores,
            best_so_far: best_score,
            sigma_mean: dist.sigma_mean(),
            env_steps,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(cb) = opts.on_generation.as_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        best_theta,
        best_score,
        history,
        final_distribution: Some(dist),
    })
}

/// Everything a training driver needs besides the seed.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub env: EnvSpec,
    pub arch: PolicyArch,
    pub apg: ApgConfig,
    pub cem: CemConfig,
    pub schedule: LrSchedule,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.arch.validate()?;
        self.apg.validate()?;
        self.cem.validate()?;
        self.schedule.validate()
    }

    fn initial_theta(&self, root_seed: u64) -> ParamVector {
        init_params(
            &self.arch,
            &mut seed::rng(seed::derive(root_seed, seed::INIT)),
        )
    }
}

/// CE-APG: every candidate is refined by an APG run before ranking.
pub fn ce_apg_train(
    setup: &TrainSetup,
    root_seed: u64,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    setup.validate()?;
    let init = setup.initial_theta(root_seed);
    cem_optimize(
        &setup.cem,
        init,
        &setup.schedule,
        root_seed,
        opts,
        |theta, ctx| {
            let cfg = ApgConfig {
                lr: ctx.lr,
                ..setup.apg.clone()
            };
            let out = apg::apg_run(
                &setup.env,
                &setup.arch,
                theta.clone(),
                &cfg,
                seed::derive(ctx.seed, seed::RUN),
            )?;
            Ok(Scored {
                theta: out.theta,
                score: out.score,
                env_steps: out.env_steps,
            })
        },
    )
}

/// Gradient-free ablation: candidates are scored by the mean return of
/// `apg.batch` rollouts and are not modified.
pub fn cem_only_train(
    setup: &TrainSetup,
    root_seed: u64,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    setup.validate()?;
    let init = setup.initial_theta(root_seed);
    let batch = setup.apg.batch;
    cem_optimize(
        &setup.cem,
        init,
        &setup.schedule,
        root_seed,
        opts,
        |theta, ctx| {
            let seeds: Vec<u64> = (0..batch)
                .map(|j| seed::rollout_seed(seed::derive(ctx.seed, seed::RUN), 0, j))
                .collect();
            let score = apg::evaluate(&setup.env, &setup.arch, theta, &seeds)?;
            Ok(Scored {
                theta: theta.clone(),
                score,
                env_steps: (batch * setup.env.horizon) as u64,
            })
        },
    )
}

/// Seed of independent APG run `i` under [`papg_train`].
pub fn papg_run_seed(root_seed: u64, i: usize) -> u64 {
    seed::derive_path(root_seed, &[seed::RUNS, i as u64, seed::RUN])
}

/// Initial parameters of independent APG run `i` under [`papg_train`].
pub fn papg_initial_theta(setup: &TrainSetup, root_seed: u64, i: usize) -> ParamVector {
    let s = seed::derive_path(root_seed, &[seed::RUNS, i as u64, seed::INIT]);
    init_params(&setup.arch, &mut seed::rng(s))
}

/// Parallel-APG ablation: `k_a` independent runs of `generations × epochs`
/// epochs each, with the learning rate following the schedule one block of
/// `epochs` at a time. One history record per block.
pub fn papg_train(
    setup: &TrainSetup,
    root_seed: u64,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    setup.validate()?;
    let cfg = &setup.cem;
    let mut runners: Vec<Option<ApgRunner>> = (0..cfg.k_a)
        .map(|i| {
            Some(ApgRunner::new(
                papg_initial_theta(setup, root_seed, i),
                &setup.apg,
                papg_run_seed(root_seed, i),
            ))
        })
        .collect();
    let mut best_theta = runners[0].as_ref().unwrap().theta.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.generations);

    for g in 0..cfg.generations {
        let start = Instant::now();
        let lr = setup
            .schedule
            .lr_at(g.min(setup.schedule.total_generations - 1))?;
        let apg_cfg = ApgConfig {
            lr,
            ..setup.apg.clone()
        };
        let stepped: Vec<(Option<ApgRunner>, f64)> =
            fan_out(opts.workers, runners.len(), |i| match &runners[i] {
                Some(r) => {
                    let mut r = r.clone();
                    let res = r
                        .run_epochs(&setup.env, &setup.arch, &apg_cfg, setup.apg.epochs)
                        .and_then(|_| r.score(&setup.env, &setup.arch, &apg_cfg));
                    match res {
                        Ok(s) => (Some(r), s),
                        Err(_) => (None, f64::NEG_INFINITY),
                    }
                }
                None => (None, f64::NEG_INFINITY),
            });
        let mut scores = Vec::with_capacity(cfg.k_a);
        for (i, (runner, score)) in stepped.into_iter().enumerate() {
            if let Some(r) = &runner {
                if score.is_finite() && score > best_score {
                    best_score = score;
                    best_theta = r.theta.clone();
                }
            }
            runners[i] = runner;
            scores.push(score);
        }
        let env_steps = runners.iter().flatten().map(|r| r.env_steps).sum();
        let record = GenerationRecord {
            generation: g,
            elite_mean: elite_mean_score(&scores, cfg.k_e),
            scores,
            best_so_far: best_score,
            sigma_mean: 0.0,
            env_steps,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(cb) = opts.on_generation.as_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        best_theta,
        best_score,
        history,
        final_distribution: None,
    })
}

/// Dispatches on `setup.cem.mode`.
pub fn train(setup: &TrainSetup, root_seed: u64, opts: RunOptions<'_>) -> Result<TrainOutcome> {
    match setup.cem.mode {
        Mode::CeApg => ce_apg_train(setup, root_seed, opts),
        Mode::Papg => papg_train(setup, root_seed, opts),
        Mode::Cem => cem_only_train(setup, root_seed, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::EnvKind;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        v.to_vec().into()
    }

    fn small_setup(kind: EnvKind, mode: Mode) -> TrainSetup {
        let mut env = EnvSpec::new(kind);
        env.horizon = 20;
        let arch = PolicyArch::for_env(kind, env.u_max);
        TrainSetup {
            env,
            arch,
            apg: ApgConfig {
                epochs: 2,
                batch: 2,
                ..ApgConfig::default()
            },
            cem: CemConfig {
                k_a: 4,
                k_e: 2,
                generations: 3,
                mode,
                ..CemConfig::default()
            },
            schedule: LrSchedule::new(1e-3, 1e-6, 3),
        }
    }

    #[test]
    fn zero_sigma_samples_the_mean() {
        let dist = CemDistribution::new(pv(&[1.0, -2.0, 3.5]), 0.0);
        for c in sample_candidates(&dist, 5, 77) {
            assert_eq!(c, dist.mean);
        }
    }

    #[test]
    fn sample_spread_matches_sigma() {
        let dist = CemDistribution {
            mean: pv(&[0.0, 1.0, -1.0]),
            std: vec![0.5, 2.0, 0.05],
            generation: 0,
        };
        let c = sample_candidates(&dist, 10_000, 5);
        for k in 0..3 {
            let n = c.len() as f64;
            let m = c.iter().map(|x| x[k]).sum::<f64>() / n;
            let sd = (c.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((sd / dist.std[k] - 1.0).abs() < 0.05, "coord {k}: {sd}");
        }
        assert_eq!(
            sample_candidates(&dist, 8, 9),
            sample_candidates(&dist, 8, 9)
        );
        assert_ne!(
            sample_candidates(&dist, 8, 9),
            sample_candidates(&dist, 8, 10)
        );
    }

    #[test]
    fn identical_elites_collapse_sigma() {
        let dist = CemDistribution::new(pv(&[0.0, 0.0]), 1.0);
        let v = pv(&[0.25, -4.0]);
        let scored = vec![(v.clone(), 1.0), (v.clone(), 2.0), (pv(&[9.0, 9.0]), -5.0)];
        let next = elite_update(&dist, &scored, 2).unwrap();
        assert_eq!(next.mean, v);
        assert_eq!(next.std, vec![0.0, 0.0]);
        assert_eq!(next.generation, 1);
    }

    #[test]
    fn two_elite_hand_example() {
        let dist = CemDistribution::new(pv(&[0.0, 0.0]), 1.0);
        let scored = vec![
            (pv(&[1.0, 1.0]), 5.0),
            (pv(&[100.0, 100.0]), -1.0),
            (pv(&[3.0, 3.0]), 4.0),
        ];
        let next = elite_update(&dist, &scored, 2).unwrap();
        assert_eq!(next.mean, pv(&[2.0, 2.0]));
        assert_eq!(next.std, vec![1.0, 1.0]);
    }

    #[test]
    fn all_elites_gives_plain_average() {
        let dist = CemDistribution::new(pv(&[0.0]), 1.0);
        let scored = vec![(pv(&[1.0]), 0.3), (pv(&[2.0]), 0.1), (pv(&[6.0]), 0.2)];
        let next = elite_update(&dist, &scored, 3).unwrap();
        assert_eq!(next.mean, pv(&[3.0]));
    }

    #[test]
    fn non_finite_scores_rank_last_and_ties_prefer_lower_index() {
        let scores = [f64::NAN, 1.0, f64::INFINITY, 1.0, f64::NEG_INFINITY, 2.0];
        assert_eq!(ranking(&scores), vec![5, 1, 3, 0, 2, 4]);
    }

    #[test]
    fn elite_update_errors() {
        let dist = CemDistribution::new(pv(&[0.0, 0.0]), 1.0);
        assert!(elite_update(&dist, &[(pv(&[1.0, 1.0]), 1.0)], 2).is_err());
        assert!(elite_update(&dist, &[(pv(&[1.0]), 1.0)], 1).is_err());
        assert!(elite_update(&dist, &[(pv(&[f64::NAN, 1.0]), 1.0)], 1).is_err());
    }

    proptest! {
        #[test]
        fn monotone_score_transforms_do_not_change_update(
            rows in proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 3), -10.0f64..10.0), 2..8),
            k in 1usize..8,
        ) {
            let k_e = k.min(rows.len());
            let dist = CemDistribution::new(pv(&[0.0; 3]), 1.0);
            let scored: Vec<(ParamVector, f64)> = rows.iter().map(|(v, s)| (pv(v), *s)).collect();
            let squashed: Vec<(ParamVector, f64)> = rows.iter().map(|(v, s)| (pv(v), (s / 3.0).exp() * 2.0 - 7.0)).collect();
            let a = elite_update(&dist, &scored, k_e).unwrap();
            let b = elite_update(&dist, &squashed, k_e).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.std.iter().all(|s| s.is_finite() && *s >= 0.0));
        }
    }

    #[test]
    fn degenerate_ce_apg_is_a_restarted_apg_chain() {
        let mut setup = small_setup(EnvKind::Cartpole, Mode::CeApg);
        setup.cem.k_a = 1;
        setup.cem.k_e = 1;
        setup.cem.sigma0 = 0.0;
        setup.cem.generations = 2;
        setup.schedule = LrSchedule::new(1e-2, 1e-3, 2);
        let out = ce_apg_train(&setup, 4, RunOptions::default()).unwrap();

        let mut theta = setup.initial_theta(4);
        let gen_root = seed::derive(4, seed::GENERATIONS);
        for g in 0..2 {
            let cand_seed = seed::derive(seed::derive(gen_root, g as u64), 0);
            let cfg = ApgConfig {
                lr: setup.schedule.lr_at(g).unwrap(),
                ..setup.apg.clone()
            };
            let run = apg::apg_run(
                &setup.env,
                &setup.arch,
                theta,
                &cfg,
                seed::derive(cand_seed, seed::RUN),
            )
            .unwrap();
            assert_eq!(out.history[g].scores, vec![run.score]);
            theta = run.theta;
        }
        assert_eq!(out.final_distribution.unwrap().mean, theta);
    }

    #[test]
    fn history_bookkeeping() {
        for mode in [Mode::CeApg, Mode::Papg, Mode::Cem] {
            let setup = small_setup(EnvKind::Acrobot, mode);
            let out = train(&setup, 1, RunOptions::default()).unwrap();
            assert_eq!(out.history.len(), 3);
            let mut prev = f64::NEG_INFINITY;
            for (g, rec) in out.history.iter().enumerate() {
                assert_eq!(rec.generation, g);
                assert_eq!(rec.scores.len(), 4);
                assert!(rec.best_so_far >= prev);
                prev = rec.best_so_far;
            }
            let max = out
                .history
                .iter()
                .flat_map(|r| r.scores.iter().copied())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out.best_score, max, "{mode}");
            let steps = out.history.last().unwrap().env_steps;
            let per_candidate = match mode {
                Mode::Cem => 2 * 20,
                _ => 2 * 2 * 20,
            };
            assert_eq!(steps, 3 * 4 * per_candidate, "{mode}");
        }
    }

    #[test]
    fn cem_only_leaves_candidates_and_zero_sigma_freezes_mean() {
        let mut setup = small_setup(EnvKind::Acrobot, Mode::Cem);
        setup.cem.sigma0 = 0.0;
        let out = cem_only_train(&setup, 2, RunOptions::default()).unwrap();
        assert_eq!(out.final_distribution.unwrap().mean, setup.initial_theta(2));
        assert_eq!(out.best_theta, setup.initial_theta(2));
    }

    #[test]
    fn single_papg_run_is_one_apg_run() {
        let mut setup = small_setup(EnvKind::Cartpole, Mode::Papg);
        setup.cem.k_a = 1;
        setup.cem.k_e = 1;
        setup.cem.generations = 1;
        let out = papg_train(&setup, 8, RunOptions::default()).unwrap();
        let cfg = ApgConfig {
            lr: setup.schedule.lr_at(0).unwrap(),
            ..setup.apg.clone()
        };
        let run = apg::apg_run(
            &setup.env,
            &setup.arch,
            papg_initial_theta(&setup, 8, 0),
            &cfg,
            papg_run_seed(8, 0),
        )
        .unwrap();
        assert_eq!(out.best_theta, run.theta);
        assert_eq!(out.best_score, run.score);
    }

    #[test]
    fn training_is_deterministic_and_worker_independent() {
        for mode in [Mode::CeApg, Mode::Papg, Mode::Cem] {
            let setup = small_setup(EnvKind::Cartpole, mode);
            let strip = |o: TrainOutcome| {
                let h: Vec<_> = o
                    .history
                    .into_iter()
                    .map(|r| GenerationRecord { wall_ms: 0, ..r })
                    .collect();
                (o.best_theta, o.best_score, h)
            };
            let a = strip(train(&setup, 3, RunOptions::default()).unwrap());
            let b = strip(train(&setup, 3, RunOptions::default()).unwrap());
            let c = strip(
                train(
                    &setup,
                    3,
                    RunOptions {
                        workers: 3,
                        on_generation: None,
                    },
                )
                .unwrap(),
            );
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn failed_candidates_score_negative_infinity() {
        let cfg = CemConfig {
            k_a: 4,
            k_e: 2,
            generations: 2,
            sigma0: 0.1,
            mode: Mode::Cem,
            inject_mean: false,
        };
        let out = cem_optimize(
            &cfg,
            pv(&[0.0, 0.0]),
            &LrSchedule::new(1e-3, 1e-3, 2),
            0,
            RunOptions::default(),
            |theta, ctx| {
                if ctx.index == 0 {
                    Err(Error::NonFiniteState)
                } else {
                    Ok(Scored {
                        theta: theta.clone(),
                        score: -theta[0].abs(),
                        env_steps: 1,
                    })
                }
            },
        )
        .unwrap();
        for rec in &out.history {
            assert_eq!(rec.scores[0], f64::NEG_INFINITY);
            assert!(rec.elite_mean.is_finite());
        }
    }

    #[test]
    fn inject_mean_replaces_last_candidate() {
        let cfg = CemConfig {
            k_a: 3,
            k_e: 1,
            generations: 1,
            sigma0: 1.0,
            mode: Mode::Cem,
            inject_mean: true,
        };
        let out = cem_optimize(
            &cfg,
            pv(&[0.5]),
            &LrSchedule::new(1e-3, 1e-3, 1),
            0,
            RunOptions::default(),
            |theta, _| {
                Ok(Scored {
                    theta: theta.clone(),
                    score: if theta[0] == 0.5 { 100.0 } else { 0.0 },
                    env_steps: 0,
                })
            },
        )
        .unwrap();
        assert_eq!(out.history[0].scores[2], 100.0);
        assert_eq!(out.best_theta, pv(&[0.5]));
    }
}
