//! Posterior state inference: closed-form Kalman filtering for the
//! linear-Gaussian case and a bootstrap particle filter that consumes any
//! observation log-likelihood.

use crate::dynamics::{predict_mean, psd_cholesky, DynamicsModel, NoiseModel};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::par::{try_map_indexed, ExecMode};
use crate::rng::substream;
use crate::sim::Trajectory;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian filtering belief N(mean, cov).
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// mean <- A mean + B u, cov <- A cov A^T + Q (symmetrized).
pub fn kalman_predict(
    belief: &GaussianBelief,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let mean = predict_mean(a, b, &belief.mean, u)?;
    let cov = a * &belief.cov * a.transpose() + q;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianBelief { mean, cov })
}

/// Standard Kalman update with Joseph-form covariance.
pub fn kalman_update(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let d = belief.mean.len();
    if h.ncols() != d || h.nrows() != y.len() || r.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "kalman_update: H {}x{}, R {}x{}, y {}, state {}",
            h.nrows(),
            h.ncols(),
            r.nrows(),
            r.ncols(),
            y.len(),
            d
        )));
    }
    let s = h * &belief.cov * h.transpose() + r;
    let s_chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
    // K = cov H^T S^{-1}
    let k = s_chol.solve(&(h * &belief.cov)).transpose();
    let innovation = y - h * &belief.mean;
    let mean = &belief.mean + &k * innovation;
    let i_kh = DMatrix::identity(d, d) - &k * h;
    let cov = &i_kh * &belief.cov * i_kh.transpose() + &k * r * k.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianBelief { mean, cov })
}

/// Weighted particle approximation of the filtering posterior.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub states: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// N i.i.d. draws from N(mu0, Sigma0) with uniform weights.
pub fn pf_init(
    n: usize,
    mu0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    seed: u64,
) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::Usage("particle count must be >= 1".into()));
    }
    let l = psd_cholesky(sigma0)?;
    let d = mu0.len();
    let states = try_map_indexed(n, ExecMode::Parallel, |i| {
        let mut rng = substream(seed, 0, i as u64);
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(mu0 + &l * z)
    })?;
    Ok(ParticleSet { states, weights: vec![1.0 / n as f64; n] })
}

/// Anything that can propagate a particle one step.
pub trait TransitionModel: Sync {
    fn latent_dim(&self) -> usize;
    fn noise(&self) -> &NoiseModel;
    /// State-dependent system matrices at x.
    fn matrices_at(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

impl TransitionModel for DynamicsModel {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn matrices_at(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.matrices(x)
    }
}

/// Fixed (A, B) linear dynamics, the analytic benchmark case.
#[derive(Debug, Clone)]
pub struct ConstantLinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise: NoiseModel,
}

impl TransitionModel for ConstantLinearDynamics {
    fn latent_dim(&self) -> usize {
        self.a.nrows()
    }
    fn noise(&self) -> &NoiseModel {
        &self.noise
    }
    fn matrices_at(&self, _x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// Propagates every particle through the (state-dependent) dynamics with its
/// own counter-derived noise substream. Weights are untouched (bootstrap
/// proposal). `shared_at` evaluates the matrices once at the given state
/// instead of per particle.
pub fn pf_predict<T: TransitionModel>(
    ps: &ParticleSet,
    dynamics: &T,
    u: &DVector<f64>,
    seed: u64,
    step: usize,
    mode: ExecMode,
    shared_at: Option<&DVector<f64>>,
) -> Result<ParticleSet> {
    let q_chol = psd_cholesky(&dynamics.noise().q)?;
    let shared = match shared_at {
        Some(x) => Some(dynamics.matrices_at(x)?),
        None => None,
    };
    let states = try_map_indexed(ps.len(), mode, |i| {
        let x = &ps.states[i];
        let (a, b) = match &shared {
            Some((a, b)) => (a.clone(), b.clone()),
            None => dynamics.matrices_at(x)?,
        };
        let mean = predict_mean(&a, &b, x, u)?;
        let mut rng = substream(seed, step as u64 + 1, i as u64);
        let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(mean + &q_chol * z)
    })?;
    Ok(ParticleSet { states, weights: ps.weights.clone() })
}

/// Anything that scores an observation against a latent state.
pub trait ObservationLikelihood: Sync {
    fn loglik(&self, y: &[f64], x: &DVector<f64>) -> Result<f64>;
}

impl ObservationLikelihood for FlowModel {
    fn loglik(&self, y: &[f64], x: &DVector<f64>) -> Result<f64> {
        self.observation_loglik(y, x.as_slice())
    }
}

/// Exact N(y | H x, R) likelihood for the linear-Gaussian benchmark.
#[derive(Debug, Clone)]
pub struct LinearGaussianLikelihood {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl ObservationLikelihood for LinearGaussianLikelihood {
    fn loglik(&self, y: &[f64], x: &DVector<f64>) -> Result<f64> {
        let yv = DVector::from_column_slice(y);
        let mean = &self.h * x;
        let diff = yv - mean;
        let chol = self
            .r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Covariance("R is not positive definite".into()))?;
        let solved = chol.solve(&diff);
        let quad = diff.dot(&solved);
        let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let d = diff.len() as f64;
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
    }
}

/// Multiplies weights by the observation likelihood in the log domain with
/// log-sum-exp stabilization, then normalizes.
pub fn pf_weight_update<L: ObservationLikelihood>(
    ps: &mut ParticleSet,
    likelihood: &L,
    y: &[f64],
    step: usize,
    mode: ExecMode,
) -> Result<()> {
    let logliks = try_map_indexed(ps.len(), mode, |i| likelihood.loglik(y, &ps.states[i]))?;
    let max_ll = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_ll.is_finite() {
        return Err(Error::Degeneracy {
            step,
            msg: "all particle log-likelihoods are -inf".into(),
        });
    }
    for (w, ll) in ps.weights.iter_mut().zip(&logliks) {
        *w *= (ll - max_ll).exp();
    }
    let total: f64 = ps.weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degeneracy { step, msg: "weight normalization collapsed".into() });
    }
    for w in ps.weights.iter_mut() {
        *w /= total;
    }
    Ok(())
}

/// Effective sample size 1 / sum(w^2).
pub fn ess(ps: &ParticleSet) -> f64 {
    let s: f64 = ps.weights.iter().map(|w| w * w).sum();
    if s == 0.0 {
        0.0
    } else {
        1.0 / s
    }
}

/// Systematic resampling: one uniform offset, N stratified positions.
/// Expected offspring of particle i is N * w_i; output weights are uniform.
pub fn systematic_resample<R: Rng>(ps: &ParticleSet, rng: &mut R) -> ParticleSet {
    let n = ps.len();
    let offset: f64 = rng.gen_range(0.0..1.0) / n as f64;
    let mut states = Vec::with_capacity(n);
    let mut cum = ps.weights[0];
    let mut j = 0usize;
    for k in 0..n {
        let pos = offset + k as f64 / n as f64;
        while pos > cum && j + 1 < n {
            j += 1;
            cum += ps.weights[j];
        }
        states.push(ps.states[j].clone());
    }
    ParticleSet { states, weights: vec![1.0 / n as f64; n] }
}

/// Sum of w_i x_i.
pub fn posterior_mean(ps: &ParticleSet) -> DVector<f64> {
    let d = ps.states.first().map(|s| s.len()).unwrap_or(0);
    let mut mean = DVector::zeros(d);
    for (w, x) in ps.weights.iter().zip(&ps.states) {
        mean += x * *w;
    }
    mean
}

/// Per-step outputs of a filter run.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub mean: DVector<f64>,
    pub ess: f64,
    pub resampled: bool,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterTrace {
    pub steps: Vec<TraceStep>,
}

/// Bootstrap PF configuration.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when ESS < threshold * N.
    pub resample_threshold: f64,
    pub seed: u64,
    pub mode: ExecMode,
    /// Evaluate A(x), B(x) once at the previous posterior mean instead of per
    /// particle.
    pub shared_matrices: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n_particles: 100,
            resample_threshold: 0.5,
            seed: 0,
            mode: ExecMode::Parallel,
            shared_matrices: false,
        }
    }
}

/// Recursive bootstrap particle filter over a trajectory:
/// predict -> weight -> (resample when ESS drops below threshold * N).
pub fn run_filter<L: ObservationLikelihood, T: TransitionModel>(
    traj: &Trajectory,
    likelihood: &L,
    dynamics: &T,
    cfg: &FilterConfig,
) -> Result<FilterTrace> {
    let mut trace = FilterTrace::default();
    if traj.len() == 0 {
        return Ok(trace);
    }
    let noise = dynamics.noise();
    let mut ps = pf_init(cfg.n_particles, &noise.mu0, &noise.sigma0, cfg.seed)?;
    let mut prev_mean = noise.mu0.clone();
    for t in 0..traj.len() {
        let u = DVector::from_column_slice(traj.control(t));
        let shared = if cfg.shared_matrices { Some(&prev_mean) } else { None };
        ps = pf_predict(&ps, dynamics, &u, cfg.seed, t, cfg.mode, shared)?;
        pf_weight_update(&mut ps, likelihood, traj.observation(t), t, cfg.mode)?;
        let mean = posterior_mean(&ps);
        let e = ess(&ps);
        let resample = e < cfg.resample_threshold * cfg.n_particles as f64;
        trace.steps.push(TraceStep {
            mean: mean.clone(),
            ess: e,
            resampled: resample,
            weights: ps.weights.clone(),
        });
        if resample {
            let mut rng = substream(cfg.seed, t as u64 + 1, u64::MAX);
            ps = systematic_resample(&ps, &mut rng);
        }
        prev_mean = mean;
    }
    Ok(trace)
}

/// Closed-form Kalman filter over a linear-Gaussian trajectory; the oracle
/// for the particle filter.
pub fn run_kalman(
    traj: &Trajectory,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    noise: &NoiseModel,
) -> Result<Vec<GaussianBelief>> {
    let mut belief = GaussianBelief { mean: noise.mu0.clone(), cov: noise.sigma0.clone() };
    let mut out = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let u = DVector::from_column_slice(traj.control(t));
        belief = kalman_predict(&belief, a, b, &u, &noise.q)?;
        let y = DVector::from_column_slice(traj.observation(t));
        belief = kalman_update(&belief, h, r, &y)?;
        out.push(belief.clone());
    }
    Ok(out)
}

/// Writes the trace CSV: t, mean_0..mean_{d-1}, ess, resampled(0/1), with
/// optional true-state columns appended.
pub fn write_trace_csv(
    path: &std::path::Path,
    trace: &FilterTrace,
    truth: Option<&Trajectory>,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = trace.steps.first().map(|s| s.mean.len()).unwrap_or(0);
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..d).map(|i| format!("mean_{i}")));
    header.push("ess".into());
    header.push("resampled".into());
    let d_env = truth.and_then(|t| t.true_states.as_ref()).map(|s| s.dim).unwrap_or(0);
    header.extend((0..d_env).map(|i| format!("true_{i}")));
    writeln!(f, "{}", header.join(","))?;
    for (t, step) in trace.steps.iter().enumerate() {
        let mut row: Vec<String> = vec![t.to_string()];
        row.extend(step.mean.iter().map(|v| format!("{v:.16e}")));
        row.push(format!("{:.16e}", step.ess));
        row.push(if step.resampled { "1" } else { "0" }.to_string());
        if let Some(states) = truth.and_then(|tr| tr.true_states.as_ref()) {
            row.extend(states.row(t).iter().map(|v| format!("{v:.16e}")));
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}
