//! Deterministic GRU controller with a fully connected head.
//!
//! Parameters live in one flat vector. Packing order:
//!
//! 1. GRU input weights `W_z, W_r, W_h`, each `hidden × obs_dim`, row-major;
//! 2. GRU recurrent weights `U_z, U_r, U_h`, each `hidden × hidden`, row-major;
//! 3. GRU biases `b_z, b_r, b_h`, each `hidden` (one bias per gate);
//! 4. for every fully connected layer in order, its `out × in` weight matrix
//!    (row-major) followed by its `out` biases.
//!
//! Hidden layers use ReLU; the output layer uses tanh and is scaled by the
//! actuator limit.

use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;

use crate::autodiff::Real;
use crate::dynamics::EnvKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyArch {
    pub obs_dim: usize,
    pub gru_hidden: usize,
    /// Layer widths, starting at `gru_hidden` and ending at 1.
    pub fc_layers: Vec<usize>,
    pub u_max: f64,
}

impl PolicyArch {
    /// Default network for an environment: hidden 4 with a 4×16×16×1 head,
    /// or hidden 6 with 6×32×32×1 for the double cartpole.
    pub fn for_env(kind: EnvKind, u_max: f64) -> Self {
        let (h, w) = match kind {
            EnvKind::Cartpole | EnvKind::Acrobot => (4, 16),
            EnvKind::DoubleCartpole => (6, 32),
        };
        PolicyArch {
            obs_dim: kind.obs_dim(),
            gru_hidden: h,
            fc_layers: vec![h, w, w, 1],
            u_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("policy architecture: {m}")));
        if self.obs_dim == 0 || self.gru_hidden == 0 {
            return bad("obs_dim and gru_hidden must be positive");
        }
        if self.fc_layers.len() < 2 {
            return bad("fc_layers needs at least an input and an output width");
        }
        if self.fc_layers[0] != self.gru_hidden {
            return bad("first fc width must equal gru_hidden");
        }
        if *self.fc_layers.last().unwrap() != 1 {
            return bad("last fc width must be 1");
        }
        if self.fc_layers.contains(&0) {
            return bad("fc widths must be positive");
        }
        if !(self.u_max > 0.0 && self.u_max.is_finite()) {
            return bad("u_max must be positive");
        }
        Ok(())
    }

    pub fn fc_string(&self) -> String {
        self.fc_layers
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

/// `3·(h·n + h·h + h) + Σ (in·out + out)`.
pub fn param_count(arch: &PolicyArch) -> usize {
    let (h, n) = (arch.gru_hidden, arch.obs_dim);
    let gru = 3 * (h * n + h * h + h);
    let fc: usize = arch.fc_layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    gru + fc
}

/// Flat policy parameter vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl Deref for ParamVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weights: usize,
    biases: usize,
    inputs: usize,
    outputs: usize,
}

/// Offsets of each parameter block inside a [`ParamVector`].
#[derive(Clone, Debug)]
struct Layout {
    input_w: usize,
    recurrent_w: usize,
    gru_b: usize,
    dense: Vec<Dense>,
    len: usize,
}

impl Layout {
    fn new(arch: &PolicyArch) -> Self {
        let (h, n) = (arch.gru_hidden, arch.obs_dim);
        let input_w = 0;
        let recurrent_w = 3 * h * n;
        let gru_b = recurrent_w + 3 * h * h;
        let mut at = gru_b + 3 * h;
        let dense = arch
            .fc_layers
            .windows(2)
            .map(|w| {
                let d = Dense {
                    weights: at,
                    biases: at + w[0] * w[1],
                    inputs: w[0],
                    outputs: w[1],
                };
                at += w[0] * w[1] + w[1];
                d
            })
            .collect();
        Layout {
            input_w,
            recurrent_w,
            gru_b,
            dense,
            len: at,
        }
    }
}

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_params<G: Rng + ?Sized>(arch: &PolicyArch, rng: &mut G) -> ParamVector {
    let layout = Layout::new(arch);
    let (h, n) = (arch.gru_hidden, arch.obs_dim);
    let mut theta = vec![0.0; layout.len];
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in &mut theta[range] {
            *x = rng.random_range(-bound..=bound);
        }
    };
    fill(layout.input_w..layout.recurrent_w, n);
    fill(layout.recurrent_w..layout.gru_b, h);
    for d in &layout.dense {
        fill(d.weights..d.biases, d.inputs);
    }
    ParamVector(theta)
}

/// Indices of every bias entry, in packing order.
pub fn bias_indices(arch: &PolicyArch) -> Vec<usize> {
    let layout = Layout::new(arch);
    let mut out: Vec<usize> = (layout.gru_b..layout.gru_b + 3 * arch.gru_hidden).collect();
    for d in &layout.dense {
        out.extend(d.biases..d.biases + d.outputs);
    }
    out
}

fn affine<R: Real>(weights: &[R], bias: R, x: &[R]) -> R {
    weights
        .iter()
        .zip(x)
        .fold(bias, |acc, (&w, &xi)| acc + w * xi)
}

/// Evaluates a GRU + MLP policy. `theta` must already be checked against the arch.
pub struct Controller<'a> {
    arch: &'a PolicyArch,
    layout: Layout,
}

impl<'a> Controller<'a> {
    pub fn new(arch: &'a PolicyArch) -> Self {
        Controller {
            arch,
            layout: Layout::new(arch),
        }
    }

    pub fn arch(&self) -> &PolicyArch {
        self.arch
    }

    /// One control step: returns the action and the next hidden state.
    pub fn forward<R: Real>(&self, theta: &[R], hidden: &[R], obs: &[R]) -> Result<(R, Vec<R>)> {
        let a = self.arch;
        let (h, n) = (a.gru_hidden, a.obs_dim);
        check_len("parameter vector", self.layout.len, theta.len())?;
        check_len("hidden state", h, hidden.len())?;
        check_len("observation", n, obs.len())?;

        let l = &self.layout;
        let w_row = |gate: usize, i: usize| {
            let s = l.input_w + (gate * h + i) * n;
            &theta[s..s + n]
        };
        let u_row = |gate: usize, i: usize| {
            let s = l.recurrent_w + (gate * h + i) * h;
            &theta[s..s + h]
        };
        let bias = |gate: usize, i: usize| theta[l.gru_b + gate * h + i];

        let z: Vec<R> = (0..h)
            .map(|i| affine(u_row(0, i), affine(w_row(0, i), bias(0, i), obs), hidden).sigmoid())
            .collect();
        let r: Vec<R> = (0..h)
            .map(|i| affine(u_row(1, i), affine(w_row(1, i), bias(1, i), obs), hidden).sigmoid())
            .collect();
        let gated: Vec<R> = r.iter().zip(hidden).map(|(&ri, &hi)| ri * hi).collect();
        let next: Vec<R> = (0..h)
            .map(|i| {
                let cand = affine(u_row(2, i), affine(w_row(2, i), bias(2, i), obs), &gated).tanh();
                hidden[i] + z[i] * (cand - hidden[i])
            })
            .collect();

        let mut x = next.clone();
        let last = l.dense.len() - 1;
        for (k, d) in l.dense.iter().enumerate() {
            x = (0..d.outputs)
                .map(|o| {
                    let s = d.weights + o * d.inputs;
                    let pre = affine(&theta[s..s + d.inputs], theta[d.biases + o], &x);
                    if k == last {
                        pre.tanh()
                    } else {
                        pre.relu()
                    }
                })
                .collect();
        }
        Ok((x[0] * a.u_max, next))
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// One-shot convenience around [`Controller::forward`].
pub fn forward<R: Real>(
    arch: &PolicyArch,
    theta: &[R],
    hidden: &[R],
    obs: &[R],
) -> Result<(R, Vec<R>)> {
    Controller::new(arch).forward(theta, hidden, obs)
}

/// Serializes a policy: one header line, then one parameter per line with
/// 17 significant digits.
pub fn format_policy(arch: &PolicyArch, theta: &[f64]) -> String {
    let mut out = format!(
        "gru-mlp obs_dim={} gru_hidden={} fc={} u_max={} params={}\n",
        arch.obs_dim,
        arch.gru_hidden,
        arch.fc_string(),
        arch.u_max,
        theta.len()
    );
    for x in theta {
        writeln!(out, "{x:.16e}").unwrap();
    }
    out
}

pub fn parse_policy(text: &str, path: &Path) -> Result<(PolicyArch, ParamVector)> {
    let err = |msg: String| Error::PolicyFormat {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("gru-mlp") {
        return Err(err("header must start with `gru-mlp`".into()));
    }
    let (mut obs, mut hid, mut fc, mut umax, mut count) = (None, None, None, None, None);
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| err(format!("bad header field `{f}`")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
        match k {
            "obs_dim" => obs = Some(num(v)?),
            "gru_hidden" => hid = Some(num(v)?),
            "params" => count = Some(num(v)?),
            "u_max" => umax = Some(v.parse::<f64>().map_err(|e| err(format!("u_max: {e}")))?),
            "fc" => fc = Some(v.split('x').map(num).collect::<Result<Vec<usize>>>()?),
            _ => return Err(err(format!("unknown header field `{k}`"))),
        }
    }
    let missing = |name: &str| err(format!("header lacks `{name}`"));
    let arch = PolicyArch {
        obs_dim: obs.ok_or_else(|| missing("obs_dim"))?,
        gru_hidden: hid.ok_or_else(|| missing("gru_hidden"))?,
        fc_layers: fc.ok_or_else(|| missing("fc"))?,
        u_max: umax.ok_or_else(|| missing("u_max"))?,
    };
    arch.validate().map_err(|e| err(e.to_string()))?;
    let theta = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| err(format!("parameter {i}: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let expected = param_count(&arch);
    if theta.len() != expected || count.is_some_and(|c| c != expected) {
        return Err(err(format!(
            "expected {expected} parameters, found {}",
            theta.len()
        )));
    }
    Ok((arch, ParamVector(theta)))
}

pub fn save_policy(path: &Path, arch: &PolicyArch, theta: &[f64]) -> Result<()> {
    std::fs::write(path, format_policy(arch, theta)).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<(PolicyArch, ParamVector)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_policy(&text, path)
}
