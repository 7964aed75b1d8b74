//! Latent linear dynamics: a network mapping the latent state to
//! unit-Frobenius-norm system matrices (A, B), plus the process-noise model
//! and stability/controllability diagnostics.

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpVars};
use crate::rng;
use crate::tensor::{ElemKind, Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Process noise covariance and initial belief for the latent chain.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub q: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl NoiseModel {
    pub fn new(q: DMatrix<f64>, mu0: DVector<f64>, sigma0: DMatrix<f64>) -> Result<Self> {
        check_psd(&q, "Q")?;
        check_psd(&sigma0, "Sigma0")?;
        if q.nrows() != mu0.len() || sigma0.nrows() != mu0.len() {
            return Err(Error::Dimension("NoiseModel dimensions disagree".into()));
        }
        Ok(NoiseModel { q, mu0, sigma0 })
    }

    /// Defaults: Q = q_scale * I, mu0 = 0, Sigma0 = I.
    pub fn default_for_dim(d: usize, q_scale: f64) -> Self {
        NoiseModel {
            q: DMatrix::identity(d, d) * q_scale,
            mu0: DVector::zeros(d),
            sigma0: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{name} must be square")));
    }
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 {
                return Err(Error::Covariance(format!("{name} is not symmetric")));
            }
        }
    }
    let eig = m.clone().symmetric_eigenvalues();
    if eig.iter().any(|&l| l < -1e-10) {
        return Err(Error::Covariance(format!("{name} has negative eigenvalues")));
    }
    Ok(())
}

/// Lower Cholesky factor tolerating positive *semi*-definite input: zero
/// pivots produce zero columns, negative pivots are a covariance error.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension("cholesky needs a square matrix".into()));
    }
    let scale = m.diagonal().amax().max(1e-300);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -1e-10 * scale {
            return Err(Error::Covariance(format!("matrix not PSD (pivot {j} = {d})")));
        }
        if d <= 1e-14 * scale {
            continue; // zero column
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// M / ||M||_F.
pub fn frobenius_normalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norm = m.norm();
    if norm <= 1e-12 {
        return Err(Error::DegenerateMatrix(format!(
            "Frobenius norm {norm} too small to normalize"
        )));
    }
    Ok(m / norm)
}

/// A x + B u.
pub fn predict_mean(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if a.ncols() != x.len() || b.ncols() != u.len() || a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "predict_mean: A {}x{}, B {}x{}, x {}, u {}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            x.len(),
            u.len()
        )));
    }
    Ok(a * x + b * u)
}

/// Draws A x + B u + L z with L the lower Cholesky factor of Q.
pub fn sample_transition<R: Rng>(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    q_chol: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mean = predict_mean(a, b, x, u)?;
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + q_chol * z)
}

/// Maximum absolute eigenvalue. Exact for d <= 2; for larger matrices the
/// spectral-norm bound from power iteration on A^T A is reported instead.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension("spectral_radius needs a square matrix".into()));
    }
    match n {
        0 => Ok(0.0),
        1 => Ok(a[(0, 0)].abs()),
        2 => {
            let tr = a[(0, 0)] + a[(1, 1)];
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            let disc = tr * tr - 4.0 * det;
            if disc >= 0.0 {
                let s = disc.sqrt();
                Ok(((tr + s) / 2.0).abs().max(((tr - s) / 2.0).abs()))
            } else {
                // complex conjugate pair, |lambda| = sqrt(det)
                Ok(det.sqrt())
            }
        }
        _ => {
            // power iteration on A^T A -> largest singular value of A
            let ata = a.transpose() * a;
            let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
            let mut lambda = 0.0;
            for _ in 0..10_000 {
                let w = &ata * &v;
                let norm = w.norm();
                if norm < 1e-300 {
                    return Ok(0.0);
                }
                let theta = v.dot(&w);
                // eigenvalue residual: with near-tied leading eigenvalues the
                // quotient stops improving long before the vector settles, so
                // accept once the Rayleigh pair is accurate enough
                let residual = (&w - theta * &v).norm();
                let done = (theta - lambda).abs() <= 1e-13 * theta.abs().max(1.0)
                    || residual <= 1e-9 * theta.abs().max(1e-300);
                lambda = theta;
                v = w / norm;
                if done {
                    return Ok(lambda.max(0.0).sqrt());
                }
            }
            Err(Error::Convergence(
                "power iteration did not converge in 10000 steps".into(),
            ))
        }
    }
}

/// Numerical rank of the controllability matrix [B, AB, ..., A^{d-1}B].
pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<usize> {
    let d = a.nrows();
    if a.ncols() != d || b.nrows() != d {
        return Err(Error::Dimension("controllability_rank: incompatible shapes".into()));
    }
    let m = b.ncols();
    if m == 0 {
        return Ok(0);
    }
    let mut ctrb = DMatrix::zeros(d, d * m);
    let mut block = b.clone();
    for k in 0..d {
        ctrb.view_mut((0, k * m), (d, m)).copy_from(&block);
        block = a * &block;
    }
    let svd = ctrb.svd(false, false);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return Ok(0);
    }
    Ok(svd.singular_values.iter().filter(|&&s| s > 1e-8 * smax).count())
}

/// Dynamics network f_psi plus the fixed noise model.
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub noise: NoiseModel,
    pub latent_dim: usize,
    pub control_dim: usize,
}

/// Tape bindings for one window.
#[derive(Debug, Clone, Copy)]
pub struct DynamicsVars {
    pub net: MlpVars,
}

impl DynamicsModel {
    pub fn new<R: Rng>(
        latent_dim: usize,
        control_dim: usize,
        hidden: usize,
        noise: NoiseModel,
        rng: &mut R,
    ) -> Result<Self> {
        if noise.dim() != latent_dim {
            return Err(Error::Dimension("noise model dimension != latent_dim".into()));
        }
        let out = latent_dim * latent_dim + latent_dim * control_dim;
        let mut net = Mlp::new(latent_dim, hidden, out, rng);
        // bias the raw A block toward the identity and the B block away from
        // zero, so the unit-Frobenius normalization is well-defined at x = 0
        // (the hidden layer vanishes there with zero-initialized biases)
        for i in 0..latent_dim {
            net.b2.data[i * latent_dim + i] = 1.0;
        }
        if control_dim > 0 {
            let v = 1.0 / ((latent_dim * control_dim) as f64).sqrt();
            for e in &mut net.b2.data[latent_dim * latent_dim..] {
                *e = v;
            }
        }
        Ok(DynamicsModel {
            net,
            noise,
            latent_dim,
            control_dim,
        })
    }

    /// State-dependent (A, B), each normalized to unit Frobenius norm.
    pub fn matrices(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if x.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "dynamics_forward: state length {} != latent_dim {}",
                x.len(),
                self.latent_dim
            )));
        }
        let raw = self.net.eval(x.as_slice());
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite dynamics network output".into()));
        }
        let (d, m) = (self.latent_dim, self.control_dim);
        let a_raw = DMatrix::from_row_slice(d, d, &raw[..d * d]);
        let a = frobenius_normalize(&a_raw)?;
        let b = if m == 0 {
            DMatrix::zeros(d, 0)
        } else {
            frobenius_normalize(&DMatrix::from_row_slice(d, m, &raw[d * d..]))?
        };
        Ok((a, b))
    }

    pub fn bind(&self, tape: &mut Tape) -> DynamicsVars {
        DynamicsVars { net: self.net.bind(tape) }
    }

    /// Tape route: returns (A, B) as matrix vars, differentiable in psi and x.
    pub fn matrices_tape(
        &self,
        tape: &mut Tape,
        vars: DynamicsVars,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (d, m) = (self.latent_dim, self.control_dim);
        let raw = self.net.forward(tape, vars.net, x)?;
        let a_raw = tape.gather(raw, (0..d * d).collect());
        let a = normalize_tape(tape, a_raw)?;
        let a = tape.reshape(a, vec![d, d])?;
        let b = if m == 0 {
            let z = tape.constant(vec![]);
            tape.reshape(z, vec![d, 0])?
        } else {
            let b_raw = tape.gather(raw, (d * d..d * d + d * m).collect());
            let b = normalize_tape(tape, b_raw)?;
            tape.reshape(b, vec![d, m])?
        };
        Ok((a, b))
    }

    /// One deterministic mean step on the tape: A(x) x + B(x) u.
    pub fn step_tape(&self, tape: &mut Tape, vars: DynamicsVars, x: Var, u: &[f64]) -> Result<Var> {
        let (a, b) = self.matrices_tape(tape, vars, x)?;
        let ax = tape.matvec(a, x)?;
        if self.control_dim == 0 || u.iter().all(|&v| v == 0.0) {
            return Ok(ax);
        }
        let uc = tape.constant(u.to_vec());
        let bu = tape.matvec(b, uc)?;
        tape.add(ax, bu)
    }

    /// Plain (no-tape) mean step.
    pub fn step_mean(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (a, b) = self.matrices(x)?;
        predict_mean(&a, &b, x, u)
    }

    /// Stochastic transition with a counter-derived substream.
    pub fn step_sample(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        q_chol: &DMatrix<f64>,
        seed: u64,
        step: u64,
        particle: u64,
    ) -> Result<DVector<f64>> {
        let (a, b) = self.matrices(x)?;
        let mut r = rng::substream(seed, step, particle);
        sample_transition(&a, &b, x, u, q_chol, &mut r)
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: DynamicsVars) -> Result<()> {
        self.net.collect_grads(tape, vars.net)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.net.visit("dyn.net", out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.net.visit_mut("dyn.net", out);
    }
}

/// Unit-Frobenius normalization on the tape.
fn normalize_tape(tape: &mut Tape, m: Var) -> Result<Var> {
    let sq = tape.elementwise(m, ElemKind::Square);
    let s = tape.sum(sq);
    let norm = tape.sqrt_scalar(s)?;
    if tape.scalar_value(norm) <= 1e-12 {
        return Err(Error::DegenerateMatrix(
            "Frobenius norm too small to normalize".into(),
        ));
    }
    tape.div_by_scalar(m, norm)
}
