//! Synthetic environments with known ground truth: a linear-Gaussian
//! benchmark (for the Kalman-filter oracle) and a deterministic pendulum
//! with small grayscale image observations.

use crate::dynamics::{psd_cholesky, NoiseModel};
use crate::error::{Error, Result};
use crate::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Row-major (T x dim) series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub data: Vec<f64>,
    pub dim: usize,
}

impl Series {
    pub fn new(dim: usize) -> Self {
        Series { data: Vec::new(), dim }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }
}

/// Time-ordered (observation, control, optional true state) tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Series,
    pub controls: Series,
    pub true_states: Option<Series>,
    pub dt: f64,
    pub seed: u64,
    /// Image side when observations are pixels; 0 otherwise.
    pub image_side: usize,
}

impl Trajectory {
    pub fn empty(obs_dim: usize, control_dim: usize, _t: usize) -> Self {
        Trajectory {
            observations: Series::new(obs_dim),
            controls: Series::new(control_dim),
            true_states: None,
            dt: 1.0,
            seed: 0,
            image_side: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.dim
    }

    pub fn control_dim(&self) -> usize {
        self.controls.dim
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        self.observations.row(t)
    }

    pub fn control(&self, t: usize) -> &[f64] {
        self.controls.row(t)
    }
}

/// Control policies for data generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Controller {
    Zero,
    /// i.i.d. uniform in [-scale, scale].
    RandomUniform { scale: f64 },
    /// u_t = amp * sin(2 pi freq * t * dt).
    Sine { amp: f64, freq: f64 },
}

impl Controller {
    fn sample<R: Rng>(&self, t: usize, dt: f64, rng: &mut R) -> f64 {
        match *self {
            Controller::Zero => 0.0,
            Controller::RandomUniform { scale } => rng.gen_range(-scale..=scale),
            Controller::Sine { amp, freq } => {
                amp * (2.0 * std::f64::consts::PI * freq * t as f64 * dt).sin()
            }
        }
    }
}

impl std::str::FromStr for Controller {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Controller::Zero),
            "random" => Ok(Controller::RandomUniform { scale: 1.0 }),
            "sine" => Ok(Controller::Sine { amp: 1.0, freq: 0.25 }),
            other => Err(Error::Config(format!("unknown controller '{other}'"))),
        }
    }
}

/// Linear-Gaussian system x' = A x + B u + q, y = H x + r.
#[derive(Debug, Clone)]
pub struct LinGaussSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub noise: NoiseModel,
}

impl LinGaussSystem {
    /// The 2-d reference system: A = 0.9 * rotation(0.3), B = [0, 1]^T * 0.1,
    /// Q = 0.01 I, H = I, R = 0.1 I.
    pub fn benchmark() -> Self {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        LinGaussSystem {
            a: DMatrix::from_row_slice(2, 2, &[0.9 * c, -0.9 * s, 0.9 * s, 0.9 * c]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            h: DMatrix::identity(2, 2),
            r: DMatrix::identity(2, 2) * 0.1,
            noise: NoiseModel::default_for_dim(2, 0.01),
        }
    }
}

/// Simulates the linear-Gaussian system, storing true states, controls and
/// noisy observations. Bit-deterministic given (system, seed).
pub fn lingauss_generate(
    system: &LinGaussSystem,
    t_len: usize,
    controller: Controller,
    seed: u64,
) -> Result<Trajectory> {
    let d = system.a.nrows();
    let m = system.b.ncols();
    let obs_dim = system.h.nrows();
    if system.a.ncols() != d || system.b.nrows() != d || system.h.ncols() != d {
        return Err(Error::Dimension("lingauss_generate: inconsistent system matrices".into()));
    }
    let q_chol = psd_cholesky(&system.noise.q)?;
    let r_chol = psd_cholesky(&system.r)?;
    let sigma0_chol = psd_cholesky(&system.noise.sigma0)?;

    let mut rng = rng::stream(seed);
    let z0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut x = &system.noise.mu0 + &sigma0_chol * z0;

    let mut traj = Trajectory {
        observations: Series::new(obs_dim),
        controls: Series::new(m),
        true_states: Some(Series::new(d)),
        dt: 1.0,
        seed,
        image_side: 0,
    };
    for t in 0..t_len {
        let u = DVector::from_fn(m, |_, _| controller.sample(t, 1.0, &mut rng));
        let q = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        x = &system.a * &x + &system.b * &u + &q_chol * q;
        let rn = DVector::from_fn(obs_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &system.h * &x + &r_chol * rn;
        traj.observations.push(y.as_slice());
        traj.controls.push(u.as_slice());
        traj.true_states.as_mut().unwrap().push(x.as_slice());
    }
    Ok(traj)
}

/// Benchmark trajectory plus its generating system.
pub fn lingauss_benchmark(t_len: usize, seed: u64) -> (Trajectory, LinGaussSystem) {
    let system = LinGaussSystem::benchmark();
    let traj = lingauss_generate(&system, t_len, Controller::RandomUniform { scale: 1.0 }, seed)
        .expect("benchmark system is well-formed");
    (traj, system)
}

/// Physical and rendering parameters of the pendulum environment.
#[derive(Debug, Clone)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
    pub dt: f64,
    pub image_side: usize,
    pub torque_scale: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.1,
            dt: 0.05,
            image_side: 16,
            torque_scale: 1.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass <= 0.0
            || self.length <= 0.0
            || self.gravity <= 0.0
            || self.damping < 0.0
            || self.dt <= 0.0
            || self.torque_scale <= 0.0
        {
            return Err(Error::Config("pendulum parameters must be positive".into()));
        }
        if self.image_side < 8 {
            return Err(Error::Config("pendulum image side must be >= 8".into()));
        }
        Ok(())
    }
}

fn wrap_angle(theta: f64) -> f64 {
    // wraps to (-pi, pi]
    std::f64::consts::PI - (std::f64::consts::PI - theta).rem_euclid(2.0 * std::f64::consts::PI)
}

/// Semi-implicit Euler step of the damped torque-driven pendulum.
pub fn pendulum_step(state: (f64, f64), u: f64, p: &PendulumParams) -> (f64, f64) {
    let (theta, omega) = state;
    let accel = -p.gravity / p.length * theta.sin() - p.damping * omega
        + p.torque_scale * u / (p.mass * p.length * p.length);
    let omega = omega + p.dt * accel;
    let theta = wrap_angle(theta + p.dt * omega);
    (theta, omega)
}

/// Anti-aliased grayscale rendering of the rod: background 0, rod 1, linear
/// coverage falloff at the edges. Deterministic.
pub fn pendulum_render(state: (f64, f64), p: &PendulumParams) -> Vec<f64> {
    let s = p.image_side;
    let (theta, _) = state;
    let cx = s as f64 / 2.0;
    let cy = s as f64 / 2.0;
    let rod_len = 0.4 * s as f64;
    let half_width = 0.75; // rod width 1.5 px
    // image y grows downward; theta = 0 points straight up
    let ex = theta.sin();
    let ey = -theta.cos();
    let mut img = vec![0.0; s * s];
    for py in 0..s {
        for px in 0..s {
            let dx = (px as f64 + 0.5) - cx;
            let dy = (py as f64 + 0.5) - cy;
            let t = (dx * ex + dy * ey).clamp(0.0, rod_len);
            let rx = dx - t * ex;
            let ry = dy - t * ey;
            let dist = (rx * rx + ry * ry).sqrt();
            let coverage = (0.5 + (half_width - dist)).clamp(0.0, 1.0);
            img[py * s + px] = coverage;
        }
    }
    img
}

/// Rolls the pendulum forward, rendering each frame and recording the true
/// (theta, omega). `init` overrides the seeded random initial state.
pub fn pendulum_generate(
    p: &PendulumParams,
    t_len: usize,
    controller: Controller,
    seed: u64,
    init: Option<(f64, f64)>,
) -> Result<Trajectory> {
    p.validate()?;
    let mut rng = rng::stream(seed);
    let mut state = match init {
        Some(s) => s,
        None => (
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(-1.0..1.0),
        ),
    };
    let d_obs = p.image_side * p.image_side;
    let mut traj = Trajectory {
        observations: Series::new(d_obs),
        controls: Series::new(1),
        true_states: Some(Series::new(2)),
        dt: p.dt,
        seed,
        image_side: p.image_side,
    };
    for t in 0..t_len {
        let u = controller.sample(t, p.dt, &mut rng);
        state = pendulum_step(state, u, p);
        let frame = pendulum_render(state, p);
        traj.observations.push(&frame);
        traj.controls.push(&[u]);
        traj.true_states.as_mut().unwrap().push(&[state.0, state.1]);
    }
    Ok(traj)
}

const TRAJ_MAGIC: &str = "nfpf-traj v1";

/// Writes the trajectory file: header
/// `nfpf-traj v1 T D m d_env S dt seed`, then CSV rows
/// `t, y_0..y_{D-1}, u_0..u_{m-1}, s_0..s_{d_env-1}` at 17 significant
/// digits.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d_env = traj.true_states.as_ref().map(|s| s.dim).unwrap_or(0);
    writeln!(
        f,
        "{TRAJ_MAGIC} {} {} {} {} {} {:.16e} {}",
        traj.len(),
        traj.obs_dim(),
        traj.control_dim(),
        d_env,
        traj.image_side,
        traj.dt,
        traj.seed
    )?;
    for t in 0..traj.len() {
        let mut row: Vec<String> = Vec::with_capacity(1 + traj.obs_dim() + traj.control_dim() + d_env);
        row.push(t.to_string());
        row.extend(traj.observation(t).iter().map(|v| format!("{v:.16e}")));
        row.extend(traj.control(t).iter().map(|v| format!("{v:.16e}")));
        if let Some(states) = &traj.true_states {
            row.extend(states.row(t).iter().map(|v| format!("{v:.16e}")));
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let header = header.trim_end();
    let rest = header
        .strip_prefix(TRAJ_MAGIC)
        .ok_or_else(|| Error::Data(format!("not a trajectory file: {}", path.display())))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    if fields.len() != 7 {
        return Err(Error::Data(format!("malformed trajectory header '{header}'")));
    }
    let t_len: usize = fields[0].parse().map_err(|_| Error::Data("bad T".into()))?;
    let d: usize = fields[1].parse().map_err(|_| Error::Data("bad D".into()))?;
    let m: usize = fields[2].parse().map_err(|_| Error::Data("bad m".into()))?;
    let d_env: usize = fields[3].parse().map_err(|_| Error::Data("bad d_env".into()))?;
    let image_side: usize = fields[4].parse().map_err(|_| Error::Data("bad S".into()))?;
    let dt: f64 = fields[5].parse().map_err(|_| Error::Data("bad dt".into()))?;
    let seed: u64 = fields[6].parse().map_err(|_| Error::Data("bad seed".into()))?;

    let mut traj = Trajectory {
        observations: Series::new(d),
        controls: Series::new(m),
        true_states: if d_env > 0 { Some(Series::new(d_env)) } else { None },
        dt,
        seed,
        image_side,
    };
    let mut line = String::new();
    for t in 0..t_len {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Data(format!("trajectory truncated at row {t}")));
        }
        let vals: Vec<&str> = line.trim_end().split(',').collect();
        if vals.len() != 1 + d + m + d_env {
            return Err(Error::Data(format!(
                "row {t} has {} fields, expected {}",
                vals.len(),
                1 + d + m + d_env
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Data(format!("bad value '{s}' at row {t}")))
        };
        let y: Vec<f64> = vals[1..1 + d].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        let u: Vec<f64> =
            vals[1 + d..1 + d + m].iter().map(|s| parse(s)).collect::<Result<_>>()?;
        traj.observations.push(&y);
        traj.controls.push(&u);
        if d_env > 0 {
            let s: Vec<f64> =
                vals[1 + d + m..].iter().map(|v| parse(v)).collect::<Result<_>>()?;
            traj.true_states.as_mut().unwrap().push(&s);
        }
    }
    Ok(traj)
}
