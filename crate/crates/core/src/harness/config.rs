//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, dotted keys group related
//! settings (`cem.k_a = 24`). Environment defaults depend on `env`, so the
//! last `env` assignment is applied first and every other assignment is
//! applied afterwards in order. Command-line `--set key=value` overrides are
//! appended after the file's assignments.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::apg::ApgConfig;
use crate::cem::{CemConfig, Mode, TrainSetup};
use crate::dynamics::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::optim::LrSchedule;
use crate::policy::PolicyArch;

/// Where the learning-rate decay is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anneal {
    /// One rate per outer generation, decaying across generations.
    Generation,
    /// Decay across the epochs of each inner APG run.
    Epoch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub gru_hidden: usize,
    pub fc_layers: Vec<usize>,
    pub apg: ApgConfig,
    pub cem: CemConfig,
    pub lr_start: f64,
    pub lr_end: f64,
    pub anneal: Anneal,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
    /// Write measured wall times into history files; off keeps reruns byte-identical.
    pub wall_time: bool,
}

impl RunConfig {
    pub fn for_env(kind: EnvKind) -> Self {
        let env = EnvSpec::new(kind);
        let arch = PolicyArch::for_env(kind, env.u_max);
        RunConfig {
            env,
            gru_hidden: arch.gru_hidden,
            fc_layers: arch.fc_layers,
            apg: ApgConfig::default(),
            cem: CemConfig::default(),
            lr_start: 1e-3,
            lr_end: 1e-6,
            anneal: Anneal::Generation,
            seeds: (0..8).collect(),
            out: PathBuf::from("runs"),
            workers: 1,
            wall_time: false,
        }
    }

    /// Builds a config from optional file text plus ordered overrides.
    pub fn from_sources(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(text) => parse_pairs(text)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        let kind = match pairs.iter().rev().find(|(k, _)| k == "env") {
            Some((_, v)) => v.parse()?,
            None => EnvKind::Acrobot,
        };
        let mut cfg = RunConfig::for_env(kind);
        for (k, v) in &pairs {
            if k != "env" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch {
            obs_dim: self.env.kind.obs_dim(),
            gru_hidden: self.gru_hidden,
            fc_layers: self.fc_layers.clone(),
            u_max: self.env.u_max,
        }
    }

    /// Algorithm inputs with the learning-rate schedule resolved for the mode.
    pub fn setup(&self) -> TrainSetup {
        let generations = self.cem.generations;
        let mut apg = self.apg.clone();
        let schedule = match self.anneal {
            Anneal::Generation => LrSchedule::new(self.lr_start, self.lr_end, generations),
            Anneal::Epoch => {
                let span = match self.cem.mode {
                    Mode::Papg => generations * apg.epochs,
                    _ => apg.epochs,
                };
                apg.epoch_schedule = Some(LrSchedule::new(self.lr_start, self.lr_end, span.max(1)));
                LrSchedule::new(self.lr_start, self.lr_start, generations)
            }
        };
        apg.lr = self.lr_start;
        TrainSetup {
            env: self.env.clone(),
            arch: self.arch(),
            apg,
            cem: self.cem.clone(),
            schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.setup().validate()
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.env;
        match key {
            "env" => {
                let kind: EnvKind = v.parse()?;
                if kind != e.kind {
                    return Err(Error::Config(
                        "`env` must be applied before other keys".into(),
                    ));
                }
            }
            "mode" => self.cem.mode = v.parse()?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "workers" => self.workers = parse(key, v)?,
            "output.wall_time" => self.wall_time = parse(key, v)?,

            "env.dt" => e.dt = parse(key, v)?,
            "env.horizon" => e.horizon = parse(key, v)?,
            "env.u_max" => e.u_max = parse(key, v)?,
            "env.gravity" => e.gravity = parse(key, v)?,
            "env.init_noise" => e.init_noise = parse(key, v)?,
            "env.cart_mass" => e.cart_mass = parse(key, v)?,
            "env.link_masses" => e.link_masses = parse_list(key, v)?,
            "env.link_lengths" => e.link_lengths = parse_list(key, v)?,
            "env.com_offsets" => e.com_offsets = parse_list(key, v)?,
            "env.link_inertias" => e.link_inertias = parse_list(key, v)?,
            "env.reward.alive_bonus" => e.reward.alive_bonus = parse(key, v)?,
            "env.reward.x_weight" => e.reward.x_weight = parse(key, v)?,
            "env.reward.y_weight" => e.reward.y_weight = parse(key, v)?,
            "env.reward.y_des" => e.reward.y_des = parse(key, v)?,

            "policy.gru_hidden" => self.gru_hidden = parse(key, v)?,
            "policy.fc" => {
                self.fc_layers = v
                    .split('x')
                    .map(|w| parse(key, w))
                    .collect::<Result<Vec<usize>>>()?
            }

            "apg.epochs" => self.apg.epochs = parse(key, v)?,
            "apg.batch" => self.apg.batch = parse(key, v)?,
            "apg.clip" => self.apg.clip = parse(key, v)?,
            "apg.beta1" => self.apg.adam.beta1 = parse(key, v)?,
            "apg.beta2" => self.apg.adam.beta2 = parse(key, v)?,
            "apg.eps" => self.apg.adam.eps = parse(key, v)?,

            "cem.k_a" => self.cem.k_a = parse(key, v)?,
            "cem.k_e" => self.cem.k_e = parse(key, v)?,
            "cem.generations" => self.cem.generations = parse(key, v)?,
            "cem.sigma0" => self.cem.sigma0 = parse(key, v)?,
            "cem.inject_mean" => self.cem.inject_mean = parse(key, v)?,

            "lr.start" => self.lr_start = parse(key, v)?,
            "lr.end" => self.lr_end = parse(key, v)?,
            "lr.anneal" => {
                self.anneal = match v {
                    "generation" => Anneal::Generation,
                    "epoch" => Anneal::Epoch,
                    _ => {
                        return Err(Error::Config(format!(
                            "lr.anneal: expected generation or epoch, got `{v}`"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Fully resolved configuration in the same format [`Self::from_sources`] reads.
    pub fn to_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
        let e = &self.env;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("env", e.kind.name().into());
        kv("mode", self.cem.mode.name().into());
        kv("seeds", list(&self.seeds));
        kv("out", self.out.display().to_string());
        kv("workers", self.workers.to_string());
        kv("output.wall_time", self.wall_time.to_string());
        kv("env.dt", e.dt.to_string());
        kv("env.horizon", e.horizon.to_string());
        kv("env.u_max", e.u_max.to_string());
        kv("env.gravity", e.gravity.to_string());
        kv("env.init_noise", e.init_noise.to_string());
        kv("env.cart_mass", e.cart_mass.to_string());
        kv("env.link_masses", list(&e.link_masses));
        kv("env.link_lengths", list(&e.link_lengths));
        kv("env.com_offsets", list(&e.com_offsets));
        kv("env.link_inertias", list(&e.link_inertias));
        kv("env.reward.alive_bonus", e.reward.alive_bonus.to_string());
        kv("env.reward.x_weight", e.reward.x_weight.to_string());
        kv("env.reward.y_weight", e.reward.y_weight.to_string());
        kv("env.reward.y_des", e.reward.y_des.to_string());
        kv("policy.gru_hidden", self.gru_hidden.to_string());
        kv(
            "policy.fc",
            self.fc_layers
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join("x"),
        );
        kv("apg.epochs", self.apg.epochs.to_string());
        kv("apg.batch", self.apg.batch.to_string());
        kv("apg.clip", self.apg.clip.to_string());
        kv("apg.beta1", self.apg.adam.beta1.to_string());
        kv("apg.beta2", self.apg.adam.beta2.to_string());
        kv("apg.eps", self.apg.adam.eps.to_string());
        kv("cem.k_a", self.cem.k_a.to_string());
        kv("cem.k_e", self.cem.k_e.to_string());
        kv("cem.generations", self.cem.generations.to_string());
        kv("cem.sigma0", self.cem.sigma0.to_string());
        kv("cem.inject_mean", self.cem.inject_mean.to_string());
        kv("lr.start", self.lr_start.to_string());
        kv("lr.end", self.lr_end.to_string());
        kv(
            "lr.anneal",
            match self.anneal {
                Anneal::Generation => "generation",
                Anneal::Epoch => "epoch",
            }
            .into(),
        );
        s
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Splits config text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = RunConfig::for_env(EnvKind::Acrobot);
        assert_eq!((c.cem.k_a, c.cem.k_e, c.cem.generations), (24, 8, 200));
        assert_eq!(c.cem.sigma0, 0.05);
        assert_eq!((c.apg.epochs, c.apg.batch), (100, 4));
        assert_eq!((c.lr_start, c.lr_end), (1e-3, 1e-6));
        assert_eq!(c.seeds.len(), 8);
        assert_eq!(c.env.horizon, 500);
        assert_eq!(c.env.dt, 0.02);
        let d = RunConfig::for_env(EnvKind::DoubleCartpole);
        assert_eq!(d.fc_layers, vec![6, 32, 32, 1]);
    }

    #[test]
    fn file_then_overrides() {
        let text = "# comment\nenv = cartpole\ncem.k_a = 8  # trailing\ncem.k_e=3\nseeds = 1,2,3\n";
        let c = RunConfig::from_sources(Some(text), &[("cem.k_a".into(), "12".into())]).unwrap();
        assert_eq!(c.env.kind, EnvKind::Cartpole);
        assert_eq!(c.cem.k_a, 12);
        assert_eq!(c.cem.k_e, 3);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.env.u_max, 10.0);
    }

    #[test]
    fn env_override_resets_env_defaults() {
        let c = RunConfig::from_sources(
            Some("env = cartpole\n"),
            &[("env".into(), "acrobot".into())],
        )
        .unwrap();
        assert_eq!(c.env, EnvSpec::acrobot());
    }

    #[test]
    fn echo_round_trips() {
        let text = "env = double_cartpole\nmode = papg\nlr.anneal = epoch\nenv.dt = 0.01\npolicy.fc = 6x8x1\ncem.sigma0 = 0.125\n";
        let c = RunConfig::from_sources(Some(text), &[]).unwrap();
        let again = RunConfig::from_sources(Some(&c.to_text()), &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn errors() {
        assert!(RunConfig::from_sources(Some("bogus = 1\n"), &[]).is_err());
        assert!(RunConfig::from_sources(Some("cem.k_a = x\n"), &[]).is_err());
        assert!(RunConfig::from_sources(Some("just words\n"), &[]).is_err());
        assert!(RunConfig::from_sources(Some("cem.k_e = 30\n"), &[]).is_err());
        assert!(RunConfig::from_sources(Some("env = pendulum\n"), &[]).is_err());
        assert!(RunConfig::from_sources(Some("policy.fc = 5x1\n"), &[]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn epoch_anneal_moves_decay_into_inner_runs() {
        let c = RunConfig::from_sources(Some("lr.anneal = epoch\napg.epochs = 10\n"), &[]).unwrap();
        let s = c.setup();
        assert_eq!(s.schedule.lr_at(5).unwrap(), 1e-3);
        let inner = s.apg.epoch_schedule.unwrap();
        assert_eq!(inner.total_generations, 10);
        assert_eq!(inner.lr_at(9).unwrap(), 1e-6);
    }
}
