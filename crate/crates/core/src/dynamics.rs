//! Differentiable models of three underactuated planar chains.
//!
//! Every system is a serial chain of uniform rods, optionally mounted on a
//! cart that slides along the x axis. Coordinates are the cart position
//! (when present) followed by joint angles, each relative to the previous
//! link; the first angle is absolute. Angle 0 is upright.
//!
//! Equations of motion take the manipulator form
//! `M(q) q̈ + C(q, q̇) q̇ + G(q) = B u`, assembled from per-link centre-of-mass
//! Jacobians, and are integrated with semi-implicit Euler. All routines are
//! generic over [`Real`] so that the same code runs on `f64` and on a tape.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Cartpole,
    Acrobot,
    DoubleCartpole,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Cartpole, EnvKind::Acrobot, EnvKind::DoubleCartpole];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Cartpole => "cartpole",
            EnvKind::Acrobot => "acrobot",
            EnvKind::DoubleCartpole => "double_cartpole",
        }
    }

    pub fn has_cart(self) -> bool {
        !matches!(self, EnvKind::Acrobot)
    }

    pub fn links(self) -> usize {
        match self {
            EnvKind::Cartpole => 1,
            EnvKind::Acrobot | EnvKind::DoubleCartpole => 2,
        }
    }

    /// Number of generalized coordinates.
    pub fn dof(self) -> usize {
        self.links() + usize::from(self.has_cart())
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Cartpole | EnvKind::Acrobot => 4,
            EnvKind::DoubleCartpole => 8,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cartpole" => Ok(EnvKind::Cartpole),
            "acrobot" => Ok(EnvKind::Acrobot),
            "double_cartpole" => Ok(EnvKind::DoubleCartpole),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// Reward constants of the double cartpole.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    pub alive_bonus: f64,
    pub x_weight: f64,
    pub y_weight: f64,
    /// Height of the second link tip when upright.
    pub y_des: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Ignored for the acrobot.
    pub cart_mass: f64,
    pub link_masses: Vec<f64>,
    pub link_lengths: Vec<f64>,
    /// Distance from a link's joint to its centre of mass.
    pub com_offsets: Vec<f64>,
    /// Moment of inertia about the centre of mass.
    pub link_inertias: Vec<f64>,
    pub gravity: f64,
    pub u_max: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Half-width of the uniform noise added to every coordinate and velocity at reset.
    pub init_noise: f64,
    pub reward: RewardConfig,
}

fn rod_inertia(m: f64, l: f64) -> f64 {
    m * l * l / 12.0
}

impl EnvSpec {
    fn chain(kind: EnvKind, cart_mass: f64, masses: &[f64], lengths: &[f64], u_max: f64) -> Self {
        EnvSpec {
            kind,
            cart_mass,
            link_masses: masses.to_vec(),
            link_lengths: lengths.to_vec(),
            com_offsets: lengths.iter().map(|l| l / 2.0).collect(),
            link_inertias: masses
                .iter()
                .zip(lengths)
                .map(|(&m, &l)| rod_inertia(m, l))
                .collect(),
            gravity: 9.81,
            u_max,
            dt: 0.02,
            horizon: 500,
            init_noise: 0.1,
            reward: RewardConfig {
                alive_bonus: 10.0,
                x_weight: 0.05,
                y_weight: 1.0,
                y_des: lengths.iter().sum(),
            },
        }
    }

    pub fn cartpole() -> Self {
        Self::chain(EnvKind::Cartpole, 1.0, &[0.1], &[1.0], 10.0)
    }

    /// Torque limit sits below the 4.905 N·m needed to hold link 2 horizontal.
    pub fn acrobot() -> Self {
        Self::chain(EnvKind::Acrobot, 0.0, &[1.0, 1.0], &[1.0, 1.0], 4.0)
    }

    pub fn double_cartpole() -> Self {
        Self::chain(EnvKind::DoubleCartpole, 1.0, &[0.5, 0.5], &[0.5, 0.5], 10.0)
    }

    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Cartpole => Self::cartpole(),
            EnvKind::Acrobot => Self::acrobot(),
            EnvKind::DoubleCartpole => Self::double_cartpole(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let links = self.kind.links();
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("link_masses", &self.link_masses),
            ("link_lengths", &self.link_lengths),
            ("com_offsets", &self.com_offsets),
            ("link_inertias", &self.link_inertias),
        ] {
            if v.len() != links {
                return bad(format!("{name} needs {links} entries, got {}", v.len()));
            }
            if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad(format!("{name} entries must be positive"));
            }
        }
        if self.kind.has_cart() && !(self.cart_mass > 0.0) {
            return bad("cart_mass must be positive".into());
        }
        for (name, v) in [
            ("gravity", self.gravity),
            ("u_max", self.u_max),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.init_noise >= 0.0) {
            return bad("init_noise must be non-negative".into());
        }
        Ok(())
    }

    /// Stable hanging configuration the episodes start from.
    pub fn nominal_state(&self) -> ChainState {
        let n = self.kind.dof();
        let mut q = vec![0.0; n];
        q[usize::from(self.kind.has_cart())] = PI;
        ChainState {
            q,
            qdot: vec![0.0; n],
        }
    }

    /// The first generalized coordinate index that is a joint angle.
    fn first_joint(&self) -> usize {
        usize::from(self.kind.has_cart())
    }
}

/// Generalized coordinates and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState<R = f64> {
    pub q: Vec<R>,
    pub qdot: Vec<R>,
}

impl<R: Real> ChainState<R> {
    pub fn values(&self) -> ChainState<f64> {
        ChainState {
            q: self.q.iter().map(|x| x.value()).collect(),
            qdot: self.qdot.iter().map(|x| x.value()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.qdot)
            .all(|x| x.value().is_finite())
    }
}

/// Terms of `M q̈ + C q̇ + G = B u`.
#[derive(Clone, Debug)]
pub struct DynamicsTerms<R = f64> {
    pub mass: Vec<Vec<R>>,
    /// Coriolis and centrifugal generalized forces `C(q, q̇) q̇`.
    pub coriolis: Vec<R>,
    pub gravity: Vec<R>,
    pub actuation: Vec<f64>,
}

/// Maps an angle to `(-π, π]`.
pub fn wrap_angle<R: Real>(x: R) -> R {
    let v = x.value();
    let mut k = ((v - PI) / (2.0 * PI)).ceil();
    let mut w = v - 2.0 * PI * k;
    if w > PI {
        k += 1.0;
        w -= 2.0 * PI;
    }
    if w <= -PI {
        k -= 1.0;
    }
    if k == 0.0 {
        x
    } else {
        x - 2.0 * PI * k
    }
}

fn accumulate<R: Real>(slot: &mut Option<R>, term: R) {
    *slot = Some(match *slot {
        Some(s) => s + term,
        None => term,
    });
}

/// Per-link kinematics shared by the dynamics terms, energy, and observations.
struct Kinematics<R> {
    sin: Vec<R>,
    cos: Vec<R>,
    /// Absolute angular velocity of each link.
    omega: Vec<R>,
}

fn kinematics<R: Real>(spec: &EnvSpec, state: &ChainState<R>) -> Kinematics<R> {
    let j0 = spec.first_joint();
    let links = spec.kind.links();
    let mut sin = Vec::with_capacity(links);
    let mut cos = Vec::with_capacity(links);
    let mut omega = Vec::with_capacity(links);
    let mut angle = state.q[j0];
    let mut rate = state.qdot[j0];
    for k in 0..links {
        if k > 0 {
            angle = angle + state.q[j0 + k];
            rate = rate + state.qdot[j0 + k];
        }
        sin.push(angle.sin());
        cos.push(angle.cos());
        omega.push(rate);
    }
    Kinematics { sin, cos, omega }
}

/// Computes `M`, `C q̇`, `G`, and `B` at `state`.
pub fn terms<R: Real>(spec: &EnvSpec, state: &ChainState<R>) -> DynamicsTerms<R> {
    let kin = kinematics(spec, state);
    terms_from(spec, state, &kin)
}

fn terms_from<R: Real>(
    spec: &EnvSpec,
    state: &ChainState<R>,
    kin: &Kinematics<R>,
) -> DynamicsTerms<R> {
    let n = spec.kind.dof();
    let j0 = spec.first_joint();
    let links = spec.kind.links();
    let g = spec.gravity;

    let mut mass: Vec<Vec<Option<R>>> = vec![vec![None; n]; n];
    let mut coriolis: Vec<Option<R>> = vec![None; n];
    let mut gravity: Vec<Option<R>> = vec![None; n];

    if spec.kind.has_cart() {
        accumulate(&mut mass[0][0], state.q[0].lift(spec.cart_mass));
    }

    for k in 0..links {
        let m = spec.link_masses[k];
        // COM position is Σ_{s≤k} L_s (sin a_s, cos a_s), with L_k the COM offset.
        let seg_len = |s: usize| {
            if s == k {
                spec.com_offsets[k]
            } else {
                spec.link_lengths[s]
            }
        };
        // Column j of the COM velocity Jacobian, per joint j ≤ k.
        let mut jx: Vec<Option<R>> = vec![None; n];
        let mut jy: Vec<Option<R>> = vec![None; n];
        for s in 0..=k {
            let l = seg_len(s);
            let dx = kin.cos[s] * l;
            let dy = -(kin.sin[s] * l);
            for j in 0..=s {
                accumulate(&mut jx[j0 + j], dx);
                accumulate(&mut jy[j0 + j], dy);
            }
        }
        if spec.kind.has_cart() {
            jx[0] = Some(state.q[0].lift(1.0));
        }
        // Velocity-product acceleration of the COM.
        let mut bx: Option<R> = None;
        let mut by: Option<R> = None;
        for s in 0..=k {
            let w2 = kin.omega[s].square() * seg_len(s);
            accumulate(&mut bx, -(kin.sin[s] * w2));
            accumulate(&mut by, -(kin.cos[s] * w2));
        }
        let (bx, by) = (bx.unwrap(), by.unwrap());
        let inertia = spec.link_inertias[k];

        for a in 0..n {
            for b in a..n {
                let mut entry: Option<R> = None;
                if let (Some(xa), Some(xb)) = (jx[a], jx[b]) {
                    accumulate(&mut entry, xa * xb);
                }
                if let (Some(ya), Some(yb)) = (jy[a], jy[b]) {
                    accumulate(&mut entry, ya * yb);
                }
                if let Some(mut e) = entry {
                    e = e * m;
                    // Angular velocity Jacobian is 1 for every joint ≤ k.
                    if a >= j0 && b >= j0 && b - j0 <= k {
                        e = e + inertia;
                    }
                    accumulate(&mut mass[a][b], e);
                }
            }
            let mut c: Option<R> = None;
            if let Some(xa) = jx[a] {
                accumulate(&mut c, xa * bx);
            }
            if let Some(ya) = jy[a] {
                accumulate(&mut c, ya * by);
            }
            if let Some(c) = c {
                accumulate(&mut coriolis[a], c * m);
            }
            if let Some(ya) = jy[a] {
                accumulate(&mut gravity[a], ya * (m * g));
            }
        }
    }

    let zero = state.q[0].lift(0.0);
    let mut full = vec![vec![zero; n]; n];
    for a in 0..n {
        for b in a..n {
            let v = mass[a][b].unwrap_or(zero);
            full[a][b] = v;
            full[b][a] = v;
        }
    }
    let mut actuation = vec![0.0; n];
    actuation[match spec.kind {
        EnvKind::Acrobot => 1,
        _ => 0,
    }] = 1.0;

    DynamicsTerms {
        mass: full,
        coriolis: coriolis.into_iter().map(|c| c.unwrap_or(zero)).collect(),
        gravity: gravity.into_iter().map(|c| c.unwrap_or(zero)).collect(),
        actuation,
    }
}

/// Solves `m x = rhs` for 2×2 or 3×3 systems by Cramer's rule.
pub fn solve<R: Real>(m: &[Vec<R>], rhs: &[R]) -> Vec<R> {
    match rhs.len() {
        1 => vec![rhs[0] / m[0][0]],
        2 => {
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            vec![
                (rhs[0] * m[1][1] - m[0][1] * rhs[1]) / det,
                (m[0][0] * rhs[1] - rhs[0] * m[1][0]) / det,
            ]
        }
        3 => {
            let det3 = |c0: [R; 3], c1: [R; 3], c2: [R; 3]| {
                c0[0] * (c1[1] * c2[2] - c2[1] * c1[2]) - c1[0] * (c0[1] * c2[2] - c2[1] * c0[2])
                    + c2[0] * (c0[1] * c1[2] - c1[1] * c0[2])
            };
            let col = |j: usize| [m[0][j], m[1][j], m[2][j]];
            let b = [rhs[0], rhs[1], rhs[2]];
            let det = det3(col(0), col(1), col(2));
            vec![
                det3(b, col(1), col(2)) / det,
                det3(col(0), b, col(2)) / det,
                det3(col(0), col(1), b) / det,
            ]
        }
        n => panic!("solve supports 1 to 3 unknowns, got {n}"),
    }
}

/// Generalized accelerations under action `u` (already clamped).
pub fn accelerations<R: Real>(spec: &EnvSpec, state: &ChainState<R>, u: R) -> Vec<R> {
    let t = terms(spec, state);
    let rhs: Vec<R> = (0..spec.kind.dof())
        .map(|i| {
            let passive = -(t.coriolis[i] + t.gravity[i]);
            if t.actuation[i] != 0.0 {
                passive + u * t.actuation[i]
            } else {
                passive
            }
        })
        .collect();
    solve(&t.mass, &rhs)
}

/// One environment transition.
#[derive(Clone, Debug)]
pub struct Transition<R = f64> {
    pub next: ChainState<R>,
    pub reward: R,
    pub obs: Vec<R>,
    /// The action actually applied, after clamping.
    pub applied: R,
}

/// Advances the system by one timestep and scores the resulting state.
pub fn step<R: Real>(spec: &EnvSpec, state: &ChainState<R>, action: R) -> Result<Transition<R>> {
    let u = action.clamp(-spec.u_max, spec.u_max);
    let qddot = accelerations(spec, state, u);
    let dt = spec.dt;
    let qdot: Vec<R> = state
        .qdot
        .iter()
        .zip(&qddot)
        .map(|(&v, &a)| v + a * dt)
        .collect();
    let q: Vec<R> = state
        .q
        .iter()
        .zip(&qdot)
        .map(|(&x, &v)| x + v * dt)
        .collect();
    let next = ChainState { q, qdot };
    if !next.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let reward = reward(spec, &next, u);
    let obs = observe(spec, &next);
    Ok(Transition {
        next,
        reward,
        obs,
        applied: u,
    })
}

/// World position of each link tip.
fn tips<R: Real>(spec: &EnvSpec, state: &ChainState<R>, kin: &Kinematics<R>) -> Vec<(R, R)> {
    let mut out = Vec::with_capacity(kin.sin.len());
    let mut pos: Option<(R, R)> = None;
    let base_x = spec.kind.has_cart().then(|| state.q[0]);
    for k in 0..kin.sin.len() {
        let l = spec.link_lengths[k];
        let (dx, dy) = (kin.sin[k] * l, kin.cos[k] * l);
        let p = match pos {
            Some((x, y)) => (x + dx, y + dy),
            None => (base_x.map_or(dx, |b| b + dx), dy),
        };
        out.push(p);
        pos = Some(p);
    }
    out
}

/// Reward of landing in `next`. The action does not enter any of the three rewards.
pub fn reward<R: Real>(spec: &EnvSpec, next: &ChainState<R>, _action: R) -> R {
    match spec.kind {
        EnvKind::Cartpole => -wrap_angle(next.q[1]).square(),
        EnvKind::Acrobot => -wrap_angle(next.q[0]).square() - wrap_angle(next.q[1]).square(),
        EnvKind::DoubleCartpole => {
            let kin = kinematics(spec, next);
            let (x, y) = tips(spec, next, &kin)[1];
            let rc = &spec.reward;
            let distance = x.square() * rc.x_weight + (y - rc.y_des).square() * rc.y_weight;
            let velocity = next.qdot[1] + next.qdot[2];
            -distance - velocity + rc.alive_bonus
        }
    }
}

/// Policy input for a state.
pub fn observe<R: Real>(spec: &EnvSpec, state: &ChainState<R>) -> Vec<R> {
    match spec.kind {
        EnvKind::Cartpole => vec![
            state.q[0],
            state.qdot[0],
            wrap_angle(state.q[1]),
            state.qdot[1],
        ],
        EnvKind::Acrobot => vec![
            wrap_angle(state.q[0]),
            wrap_angle(state.q[1]),
            state.qdot[0],
            state.qdot[1],
        ],
        EnvKind::DoubleCartpole => {
            let kin = kinematics(spec, state);
            let t = tips(spec, state, &kin);
            vec![
                state.q[0],
                state.qdot[0],
                t[0].0,
                t[0].1,
                t[1].0,
                t[1].1,
                state.qdot[1],
                state.qdot[2],
            ]
        }
    }
}

/// Samples an initial state: nominal hanging configuration plus uniform noise.
pub fn reset<G: Rng + ?Sized>(spec: &EnvSpec, rng: &mut G) -> ChainState {
    let mut s = spec.nominal_state();
    let noise = spec.init_noise;
    for x in s.q.iter_mut().chain(s.qdot.iter_mut()) {
        let u: f64 = rng.random();
        *x += noise * (2.0 * u - 1.0);
    }
    s
}

/// Kinetic plus gravitational potential energy. Potential is zero at the
/// height of the pivot (or cart rail).
pub fn total_energy(spec: &EnvSpec, state: &ChainState) -> f64 {
    let kin = kinematics(spec, state);
    let t = terms_from(spec, state, &kin);
    let n = spec.kind.dof();
    let mut kinetic = 0.0;
    for a in 0..n {
        for b in 0..n {
            kinetic += 0.5 * state.qdot[a] * t.mass[a][b] * state.qdot[b];
        }
    }
    let mut potential = 0.0;
    let mut base = 0.0;
    for k in 0..spec.kind.links() {
        let y = base + spec.com_offsets[k] * kin.cos[k];
        potential += spec.link_masses[k] * spec.gravity * y;
        base += spec.link_lengths[k] * kin.cos[k];
    }
    kinetic + potential
}
