//! Analytic policy gradients: differentiable rollouts, batched gradient
//! estimates, and the local search run on each CEM candidate.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{Real, Tape};
use crate::dynamics::{self, ChainState, EnvSpec};
use crate::error::{Error, Result};
use crate::optim::{self, AdamConfig, AdamState, LrSchedule};
use crate::policy::{param_count, Controller, ParamVector, PolicyArch};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct ApgConfig {
    pub epochs: usize,
    /// Rollouts per gradient estimate.
    pub batch: usize,
    pub lr: f64,
    /// Global gradient-norm clip threshold.
    pub clip: f64,
    pub adam: AdamConfig,
    /// When set, replaces `lr` with a per-epoch schedule indexed by the
    /// runner's epoch counter (clamped to the schedule's last entry).
    pub epoch_schedule: Option<LrSchedule>,
}

impl Default for ApgConfig {
    fn default() -> Self {
        ApgConfig {
            epochs: 100,
            batch: 4,
            lr: 1e-3,
            clip: 10.0,
            adam: AdamConfig::default(),
            epoch_schedule: None,
        }
    }
}

impl ApgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("apg.batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(
                "apg.lr must be finite and non-negative".into(),
            ));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("apg.clip must be positive".into()));
        }
        if let Some(s) = &self.epoch_schedule {
            s.validate()?;
        }
        Ok(())
    }
}

/// One simulated step as seen after applying the action.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// State reached by the step.
    pub state: ChainState,
    pub action: f64,
    pub reward: f64,
    /// Observation of `state`.
    pub obs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// Undiscounted sum of rewards.
    pub ret: f64,
    pub trajectory: Option<Vec<StepRecord>>,
    /// `∂ret/∂θ` when requested.
    pub gradient: Option<Vec<f64>>,
}

fn diverged(step: usize, source: Error) -> Error {
    Error::RolloutDiverged {
        step,
        source: Box::new(source),
    }
}

/// Runs one episode from `init`. With `want_grad` the whole episode is
/// recorded on a tape and differentiated with respect to `theta`.
pub fn rollout_from(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta: &[f64],
    init: &ChainState,
    want_grad: bool,
    want_traj: bool,
) -> Result<RolloutResult> {
    let expected = param_count(arch);
    if theta.len() != expected {
        return Err(Error::LengthMismatch {
            what: "parameter vector",
            expected,
            got: theta.len(),
        });
    }
    let ctrl = Controller::new(arch);
    if want_grad {
        SCRATCH_TAPE.with(|cell| {
            let mut tape = cell.borrow_mut();
            tape.clear();
            let tape = &*tape;
            let tv: Vec<_> = theta.iter().map(|&x| tape.var(x)).collect();
            let state = ChainState {
                q: init.q.iter().map(|&x| tape.var(x)).collect(),
                qdot: init.qdot.iter().map(|&x| tape.var(x)).collect(),
            };
            let (ret, traj) = simulate(spec, &ctrl, &tv, state, want_traj, || {
                tape.check().map_err(Error::from)
            })?;
            let grads = tape.backward(ret.id())?;
            Ok(RolloutResult {
                ret: ret.value(),
                trajectory: traj,
                gradient: Some(tv.iter().map(|v| grads[v.id()]).collect()),
            })
        })
    } else {
        let (ret, traj) = simulate(spec, &ctrl, theta, init.clone(), want_traj, || Ok(()))?;
        Ok(RolloutResult {
            ret,
            trajectory: traj,
            gradient: None,
        })
    }
}

thread_local! {
    /// Per-thread tape reused across rollouts so its allocation is kept.
    static SCRATCH_TAPE: RefCell<Tape> = RefCell::new(Tape::new());
}

fn simulate<R: Real>(
    spec: &EnvSpec,
    ctrl: &Controller<'_>,
    theta: &[R],
    mut state: ChainState<R>,
    want_traj: bool,
    check: impl Fn() -> Result<()>,
) -> Result<(R, Option<Vec<StepRecord>>)> {
    let zero = state.q[0].lift(0.0);
    let mut hidden = vec![zero; ctrl.arch().gru_hidden];
    let mut obs = dynamics::observe(spec, &state);
    let mut total: Option<R> = None;
    let mut traj = want_traj.then(|| Vec::with_capacity(spec.horizon));
    for t in 0..spec.horizon {
        let (action, next_hidden) = ctrl.forward(theta, &hidden, &obs)?;
        let tr = dynamics::step(spec, &state, action).map_err(|e| diverged(t, e))?;
        check().map_err(|e| diverged(t, e))?;
        total = Some(match total {
            Some(s) => s + tr.reward,
            None => tr.reward,
        });
        if let Some(traj) = traj.as_mut() {
            traj.push(StepRecord {
                state: tr.next.values(),
                action: tr.applied.value(),
                reward: tr.reward.value(),
                obs: tr.obs.iter().map(|o| o.value()).collect(),
            });
        }
        hidden = next_hidden;
        obs = tr.obs;
        state = tr.next;
    }
    let total = total.ok_or_else(|| Error::Config("horizon must be at least 1".into()))?;
    Ok((total, traj))
}

/// Samples an initial condition from `rng`, then runs [`rollout_from`].
pub fn rollout<G: Rng + ?Sized>(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta: &[f64],
    rng: &mut G,
    want_grad: bool,
    want_traj: bool,
) -> Result<RolloutResult> {
    let init = dynamics::reset(spec, rng);
    rollout_from(spec, arch, theta, &init, want_grad, want_traj)
}

/// Rollout whose initial condition comes from `seed`.
pub fn seeded_rollout(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta: &[f64],
    seed: u64,
    want_grad: bool,
    want_traj: bool,
) -> Result<RolloutResult> {
    rollout(
        spec,
        arch,
        theta,
        &mut seed::rng(seed),
        want_grad,
        want_traj,
    )
}

/// Mean return and mean gradient over a batch of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub mean_return: f64,
    pub gradient: Vec<f64>,
    /// Per-rollout `(return, gradient)` of the rollouts that succeeded, in seed order.
    pub rollouts: Vec<(f64, Vec<f64>)>,
    pub failed: usize,
}

/// Differentiates each seeded rollout and averages in seed order. Diverged
/// rollouts are dropped from the average.
pub fn batch_gradient(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta: &[f64],
    seeds: &[u64],
) -> Result<BatchGradient> {
    let mut rollouts = Vec::with_capacity(seeds.len());
    let mut failed = 0;
    for &s in seeds {
        match seeded_rollout(spec, arch, theta, s, true, false) {
            Ok(r) => rollouts.push((r.ret, r.gradient.expect("gradient requested"))),
            Err(e) if e.is_numerical() => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if rollouts.is_empty() {
        return Err(Error::AllRolloutsFailed { count: seeds.len() });
    }
    let n = rollouts.len() as f64;
    let mut gradient = vec![0.0; theta.len()];
    let mut total = 0.0;
    for (ret, g) in &rollouts {
        total += ret;
        for (acc, gi) in gradient.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    for g in gradient.iter_mut() {
        *g /= n;
    }
    Ok(BatchGradient {
        mean_return: total / n,
        gradient,
        rollouts,
        failed,
    })
}

/// Mean return of seeded rollouts without gradients.
pub fn evaluate(spec: &EnvSpec, arch: &PolicyArch, theta: &[f64], seeds: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    let mut ok = 0usize;
    for &s in seeds {
        match seeded_rollout(spec, arch, theta, s, false, false) {
            Ok(r) => {
                total += r.ret;
                ok += 1;
            }
            Err(e) if e.is_numerical() => {}
            Err(e) => return Err(e),
        }
    }
    if ok == 0 {
        return Err(Error::AllRolloutsFailed { count: seeds.len() });
    }
    Ok(total / ok as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_return: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Gradient components that were non-finite and zeroed.
    pub bad_components: usize,
    pub failed_rollouts: usize,
    pub env_steps: u64,
}

/// One gradient-ascent epoch: batched gradient, hygiene, clip, Adam step.
pub fn apg_epoch(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta: &mut ParamVector,
    adam: &mut AdamState,
    cfg: &ApgConfig,
    seeds: &[u64],
) -> Result<EpochStats> {
    let mut batch = batch_gradient(spec, arch, theta, seeds)?;
    let bad = optim::sanitize(&mut batch.gradient);
    let norm = optim::clip_norm(&mut batch.gradient, cfg.clip);
    adam.step(theta, &batch.gradient, cfg.lr)?;
    Ok(EpochStats {
        mean_return: batch.mean_return,
        grad_norm: norm,
        bad_components: bad,
        failed_rollouts: batch.failed,
        env_steps: (seeds.len() * spec.horizon) as u64,
    })
}

/// Stateful APG search that can be resumed across several blocks of epochs.
#[derive(Clone, Debug)]
pub struct ApgRunner {
    pub theta: ParamVector,
    pub adam: AdamState,
    seed: u64,
    epoch: usize,
    pub last: Option<EpochStats>,
    pub env_steps: u64,
}

impl ApgRunner {
    pub fn new(theta: ParamVector, cfg: &ApgConfig, seed: u64) -> Self {
        let n = theta.len();
        ApgRunner {
            theta,
            adam: AdamState::new(n, cfg.adam),
            seed,
            epoch: 0,
            last: None,
            env_steps: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn seeds(&self, batch: usize) -> Vec<u64> {
        (0..batch)
            .map(|j| seed::rollout_seed(self.seed, self.epoch, j))
            .collect()
    }

    fn lr(&self, cfg: &ApgConfig) -> Result<f64> {
        match &cfg.epoch_schedule {
            Some(s) => s.lr_at(self.epoch.min(s.total_generations - 1)),
            None => Ok(cfg.lr),
        }
    }

    pub fn run_epochs(
        &mut self,
        spec: &EnvSpec,
        arch: &PolicyArch,
        cfg: &ApgConfig,
        epochs: usize,
    ) -> Result<()> {
        for _ in 0..epochs {
            let seeds = self.seeds(cfg.batch);
            let epoch_cfg = ApgConfig {
                lr: self.lr(cfg)?,
                epoch_schedule: None,
                ..cfg.clone()
            };
            let stats = apg_epoch(
                spec,
                arch,
                &mut self.theta,
                &mut self.adam,
                &epoch_cfg,
                &seeds,
            )?;
            self.env_steps += stats.env_steps;
            self.last = Some(stats);
            self.epoch += 1;
        }
        Ok(())
    }

    /// Mean return of the most recent epoch's batch, or a fresh evaluation
    /// if no epoch has run yet.
    pub fn score(&mut self, spec: &EnvSpec, arch: &PolicyArch, cfg: &ApgConfig) -> Result<f64> {
        match &self.last {
            Some(s) => Ok(s.mean_return),
            None => {
                let seeds = self.seeds(cfg.batch);
                self.env_steps += (seeds.len() * spec.horizon) as u64;
                evaluate(spec, arch, &self.theta, &seeds)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApgOutcome {
    pub theta: ParamVector,
    /// Final-epoch batch mean return.
    pub score: f64,
    pub env_steps: u64,
    /// Mean return of the first epoch, if any epoch ran.
    pub first_return: Option<f64>,
}

/// `cfg.epochs` consecutive epochs from `theta0`.
pub fn apg_run(
    spec: &EnvSpec,
    arch: &PolicyArch,
    theta0: ParamVector,
    cfg: &ApgConfig,
    seed: u64,
) -> Result<ApgOutcome> {
    let mut runner = ApgRunner::new(theta0, cfg, seed);
    let mut first_return = None;
    if cfg.epochs > 0 {
        runner.run_epochs(spec, arch, cfg, 1)?;
        first_return = runner.last.as_ref().map(|s| s.mean_return);
        runner.run_epochs(spec, arch, cfg, cfg.epochs - 1)?;
    }
    let score = runner.score(spec, arch, cfg)?;
    Ok(ApgOutcome {
        theta: runner.theta,
        score,
        env_steps: runner.env_steps,
        first_return,
    })
}
