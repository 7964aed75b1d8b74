//! Conditional normalizing-flow observation likelihood.
//!
//! A stack of affine coupling layers maps a Gaussian base variable to the
//! observation and back, with a triangular Jacobian whose log-determinant is
//! the sum of the scale outputs. The base distribution mean comes from a
//! network over the latent state with constant diagonal covariance, giving an
//! exact log p(y | x).

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpVars};
use crate::tensor::{ElemKind, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

/// Log-scales are bounded to [-SCALE_BOUND, SCALE_BOUND] via tanh.
pub const SCALE_BOUND: f64 = 2.0;

/// Pixel dequantization bin width (8-bit intensities).
pub const DEQUANT_BIN: f64 = 1.0 / 256.0;

/// One affine coupling layer: `passive` coordinates pass through unchanged,
/// `active` ones are scaled and shifted by nets over the passive half (plus
/// the conditioning state, when the flow is conditional).
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub passive: Vec<usize>,
    pub active: Vec<usize>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct CouplingVars {
    pub scale: MlpVars,
    pub shift: MlpVars,
}

impl CouplingLayer {
    fn nets_input(&self, y: &[f64], cond: Option<&[f64]>) -> Vec<f64> {
        let mut input: Vec<f64> = self.passive.iter().map(|&i| y[i]).collect();
        if let Some(c) = cond {
            input.extend_from_slice(c);
        }
        input
    }

    /// Bounded log-scales and shifts for the active coordinates.
    fn scale_shift(&self, y: &[f64], cond: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let input = self.nets_input(y, cond);
        let s: Vec<f64> = self
            .scale_net
            .eval(&input)
            .into_iter()
            .map(|v| SCALE_BOUND * v.tanh())
            .collect();
        let t = self.shift_net.eval(&input);
        (s, t)
    }
}

/// Full observation model: coupling stack (theta), conditional mean network
/// (phi) and constant covariance sigma^2 I.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub layers: Vec<CouplingLayer>,
    pub mean_net: Mlp,
    pub sigma: f64,
    /// When true the latent state is concatenated into every coupling net's
    /// input; otherwise only the base mean depends on it.
    pub conditional: bool,
    pub obs_dim: usize,
    pub latent_dim: usize,
}

/// Tape bindings for one window.
#[derive(Debug, Clone)]
pub struct FlowVars {
    pub layers: Vec<CouplingVars>,
    pub mean: MlpVars,
}

impl FlowModel {
    pub fn new<R: Rng>(
        obs_dim: usize,
        latent_dim: usize,
        n_layers: usize,
        hidden: usize,
        sigma: f64,
        conditional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if obs_dim < 2 {
            return Err(Error::Config("flow needs obs_dim >= 2".into()));
        }
        if sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        if n_layers == 0 {
            return Err(Error::Config("flow needs at least one coupling layer".into()));
        }
        let even: Vec<usize> = (0..obs_dim).step_by(2).collect();
        let odd: Vec<usize> = (1..obs_dim).step_by(2).collect();
        let cond_dim = if conditional { latent_dim } else { 0 };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            // alternate which half passes through
            let (passive, active) = if l % 2 == 0 {
                (even.clone(), odd.clone())
            } else {
                (odd.clone(), even.clone())
            };
            let input = passive.len() + cond_dim;
            layers.push(CouplingLayer {
                scale_net: Mlp::new(input, hidden, active.len(), rng),
                shift_net: Mlp::new(input, hidden, active.len(), rng),
                passive,
                active,
            });
        }
        Ok(FlowModel {
            layers,
            mean_net: Mlp::new(latent_dim, hidden, obs_dim, rng),
            sigma,
            conditional,
            obs_dim,
            latent_dim,
        })
    }

    fn cond<'a>(&self, x: &'a [f64]) -> Option<&'a [f64]> {
        if self.conditional {
            Some(x)
        } else {
            None
        }
    }

    /// y -> (y_hat, log|det J_{g^{-1}}(y)|).
    pub fn inverse(&self, y: &[f64], cond: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
        self.check_dims(y, cond)?;
        let mut v = y.to_vec();
        let mut logdet = 0.0;
        for layer in self.layers.iter().rev() {
            let (s, t) = layer.scale_shift(&v, cond);
            for (k, &i) in layer.active.iter().enumerate() {
                v[i] = (v[i] - t[k]) * (-s[k]).exp();
            }
            // summed per layer first, matching the tape route bit for bit
            let s_sum: f64 = s.iter().sum();
            logdet -= s_sum;
        }
        if !v.iter().all(|x| x.is_finite()) || !logdet.is_finite() {
            return Err(Error::Numerical("non-finite flow inverse output".into()));
        }
        Ok((v, logdet))
    }

    /// Base variable -> observation; exact inverse of [`FlowModel::inverse`].
    pub fn forward(&self, y_hat: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_dims(y_hat, cond)?;
        let mut v = y_hat.to_vec();
        for layer in &self.layers {
            let (s, t) = layer.scale_shift(&v, cond);
            for (k, &i) in layer.active.iter().enumerate() {
                v[i] = v[i] * s[k].exp() + t[k];
            }
        }
        Ok(v)
    }

    fn check_dims(&self, y: &[f64], cond: Option<&[f64]>) -> Result<()> {
        if y.len() != self.obs_dim {
            return Err(Error::Dimension(format!(
                "observation length {} != obs_dim {}",
                y.len(),
                self.obs_dim
            )));
        }
        match (self.conditional, cond) {
            (true, None) => Err(Error::Usage("conditional flow needs a conditioning state".into())),
            (true, Some(c)) if c.len() != self.latent_dim => Err(Error::Dimension(format!(
                "conditioning length {} != latent_dim {}",
                c.len(),
                self.latent_dim
            ))),
            _ => Ok(()),
        }
    }

    /// log p(y | x) via change of variables.
    pub fn observation_loglik(&self, y: &[f64], x: &[f64]) -> Result<f64> {
        if x.len() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "latent length {} != latent_dim {}",
                x.len(),
                self.latent_dim
            )));
        }
        let (y_hat, logdet) = self.inverse(y, self.cond(x))?;
        let mu = self.mean_net.eval(x);
        // same operation order as loglik_tape so both routes agree exactly
        let ssq: f64 = y_hat.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum();
        let quad = ssq * (-0.5 / (self.sigma * self.sigma));
        let d = self.obs_dim as f64;
        let base = quad + (-0.5 * d * LN_2PI - d * self.sigma.ln());
        Ok(base + logdet)
    }

    /// Draws y_hat ~ N(mu_phi(x), sigma^2 I) and pushes it through the flow.
    pub fn sample_observation<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mu = self.mean_net.eval(x);
        let y_hat: Vec<f64> = mu
            .iter()
            .map(|&m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.forward(&y_hat, self.cond(x))
    }

    pub fn bind(&self, tape: &mut Tape) -> FlowVars {
        FlowVars {
            layers: self
                .layers
                .iter()
                .map(|l| CouplingVars { scale: l.scale_net.bind(tape), shift: l.shift_net.bind(tape) })
                .collect(),
            mean: self.mean_net.bind(tape),
        }
    }

    /// Tape route of [`FlowModel::inverse`], differentiable in theta (and the
    /// conditioning state when conditional).
    pub fn inverse_tape(
        &self,
        tape: &mut Tape,
        vars: &FlowVars,
        y: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        if self.conditional && cond.is_none() {
            return Err(Error::Usage("conditional flow needs a conditioning state".into()));
        }
        let mut v = y;
        let mut logdet = tape.scalar(0.0);
        for (layer, lv) in self.layers.iter().zip(&vars.layers).rev() {
            let passive = tape.gather(v, layer.passive.clone());
            let active = tape.gather(v, layer.active.clone());
            let input = match cond {
                Some(c) if self.conditional => tape.concat(passive, c),
                _ => passive,
            };
            let s_raw = layer.scale_net.forward(tape, lv.scale, input)?;
            let s_tanh = tape.elementwise(s_raw, ElemKind::Tanh);
            let s = tape.scale(s_tanh, SCALE_BOUND);
            let t = layer.shift_net.forward(tape, lv.shift, input)?;

            let neg_s = tape.scale(s, -1.0);
            let inv_scale = tape.elementwise(neg_s, ElemKind::Exp);
            let centered = tape.sub(active, t)?;
            let new_active = tape.mul(centered, inv_scale)?;

            let pass_part = tape.scatter(passive, layer.passive.clone(), self.obs_dim);
            let act_part = tape.scatter(new_active, layer.active.clone(), self.obs_dim);
            v = tape.add(pass_part, act_part)?;

            let s_sum = tape.sum(s);
            logdet = tape.sub(logdet, s_sum)?;
        }
        Ok((v, logdet))
    }

    /// Tape route of [`FlowModel::observation_loglik`]; differentiable in
    /// theta, phi and x.
    pub fn loglik_tape(&self, tape: &mut Tape, vars: &FlowVars, y: &[f64], x: Var) -> Result<Var> {
        let yv = tape.constant(y.to_vec());
        let cond = if self.conditional { Some(x) } else { None };
        let (y_hat, logdet) = self.inverse_tape(tape, vars, yv, cond)?;
        let mu = self.mean_net.forward(tape, vars.mean, x)?;
        let diff = tape.sub(y_hat, mu)?;
        let sq = tape.elementwise(diff, ElemKind::Square);
        let ssq = tape.sum(sq);
        let quad = tape.scale(ssq, -0.5 / (self.sigma * self.sigma));
        let d = self.obs_dim as f64;
        let base = tape.add_const(quad, -0.5 * d * LN_2PI - d * self.sigma.ln());
        tape.add(base, logdet)
    }

    /// Splits the loglik into its Gaussian and log-det terms, mirroring the
    /// objective's parameter-wise decomposition: the Gaussian factor treats
    /// the transformed observation y_hat as data (detached), so in
    /// unconditional mode it depends on phi/psi only while the log-det term
    /// depends on theta only. The summed value equals loglik_tape exactly.
    pub fn loglik_tape_parts(
        &self,
        tape: &mut Tape,
        vars: &FlowVars,
        y: &[f64],
        x: Var,
    ) -> Result<(Var, Var)> {
        let yv = tape.constant(y.to_vec());
        let cond = if self.conditional { Some(x) } else { None };
        let (y_hat_raw, logdet) = self.inverse_tape(tape, vars, yv, cond)?;
        let y_hat = {
            let detached = tape.value(y_hat_raw).to_vec();
            tape.constant(detached)
        };
        let mu = self.mean_net.forward(tape, vars.mean, x)?;
        let diff = tape.sub(y_hat, mu)?;
        let sq = tape.elementwise(diff, ElemKind::Square);
        let ssq = tape.sum(sq);
        let quad = tape.scale(ssq, -0.5 / (self.sigma * self.sigma));
        let d = self.obs_dim as f64;
        let gauss = tape.add_const(quad, -0.5 * d * LN_2PI - d * self.sigma.ln());
        Ok((gauss, logdet))
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: &FlowVars) -> Result<()> {
        for (layer, lv) in self.layers.iter_mut().zip(&vars.layers) {
            layer.scale_net.collect_grads(tape, lv.scale)?;
            layer.shift_net.collect_grads(tape, lv.shift)?;
        }
        self.mean_net.collect_grads(tape, vars.mean)?;
        Ok(())
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.scale_net.visit(&format!("flow.layer{l}.scale"), out);
            layer.shift_net.visit(&format!("flow.layer{l}.shift"), out);
        }
        self.mean_net.visit("flow.mean", out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.scale_net.visit_mut(&format!("flow.layer{l}.scale"), out);
            layer.shift_net.visit_mut(&format!("flow.layer{l}.shift"), out);
        }
        self.mean_net.visit_mut("flow.mean", out);
    }
}

/// Diagonal Gaussian log-density with shared scalar sigma.
pub fn gaussian_logpdf(z: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if z.len() != mean.len() {
        return Err(Error::Dimension(format!(
            "gaussian_logpdf: lengths {} and {}",
            z.len(),
            mean.len()
        )));
    }
    let d = z.len() as f64;
    let quad: f64 = z.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * d * LN_2PI - d * sigma.ln() - quad / (2.0 * sigma * sigma))
}

/// Adds uniform sub-bin noise to pixel intensities so densities on discrete
/// data stay finite. Training-time only.
pub fn dequantize<R: Rng>(y: &[f64], rng: &mut R) -> Vec<f64> {
    y.iter().map(|&v| v + rng.gen_range(0.0..DEQUANT_BIN)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zeroed_flow(obs_dim: usize, latent_dim: usize, layers: usize) -> FlowModel {
        let mut r = rng(0);
        let mut flow = FlowModel::new(obs_dim, latent_dim, layers, 8, 1.0, false, &mut r).unwrap();
        for layer in &mut flow.layers {
            for net in [&mut layer.scale_net, &mut layer.shift_net] {
                net.w1.data.iter_mut().for_each(|v| *v = 0.0);
                net.b1.data.iter_mut().for_each(|v| *v = 0.0);
                net.w2.data.iter_mut().for_each(|v| *v = 0.0);
                net.b2.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        flow.mean_net.w1.data.iter_mut().for_each(|v| *v = 0.0);
        flow.mean_net.b1.data.iter_mut().for_each(|v| *v = 0.0);
        flow.mean_net.w2.data.iter_mut().for_each(|v| *v = 0.0);
        flow.mean_net.b2.data.iter_mut().for_each(|v| *v = 0.0);
        flow
    }

    #[test]
    fn identity_flow_is_identity() {
        let flow = zeroed_flow(4, 2, 4);
        let y = vec![0.1, -0.2, 0.7, 1.3];
        let (y_hat, logdet) = flow.inverse(&y, None).unwrap();
        assert_eq!(y_hat, y);
        assert_eq!(logdet, 0.0);
        assert_eq!(flow.forward(&y, None).unwrap(), y);
    }

    #[test]
    fn constant_scale_layer_logdet() {
        // one layer, scale-net forced to a constant c on the k active coords
        let c = 0.7f64;
        let mut flow = zeroed_flow(6, 2, 1);
        let raw = (c / SCALE_BOUND).atanh();
        flow.layers[0].scale_net.b2.data.iter_mut().for_each(|v| *v = raw);
        let k = flow.layers[0].active.len() as f64;
        let y = vec![0.3; 6];
        let (_, logdet) = flow.inverse(&y, None).unwrap();
        assert!((logdet - (-k * c)).abs() < 1e-12, "logdet {logdet}");
    }

    #[test]
    fn constant_shift_layer_forward() {
        // forward of 0 on active coords gives the shift
        let s = 1.25f64;
        let mut flow = zeroed_flow(6, 2, 1);
        flow.layers[0].shift_net.b2.data.iter_mut().for_each(|v| *v = s);
        let y = flow.forward(&vec![0.0; 6], None).unwrap();
        for &i in &flow.layers[0].active {
            assert_eq!(y[i], s);
        }
        for &i in &flow.layers[0].passive {
            assert_eq!(y[i], 0.0);
        }
    }

    #[test]
    fn roundtrip_at_d64() {
        let mut r = rng(5);
        let flow = FlowModel::new(64, 4, 4, 16, 1.0, false, &mut r).unwrap();
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let y: Vec<f64> = (0..64).map(|_| r.gen_range(-2.0..2.0)).collect();
            let (y_hat, _) = flow.inverse(&y, None).unwrap();
            let back = flow.forward(&y_hat, None).unwrap();
            for (a, b) in back.iter().zip(&y) {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-9, "roundtrip error {max_err}");
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        for conditional in [false, true] {
            let mut r = rng(19);
            let d = 6usize;
            let flow = FlowModel::new(d, 2, 4, 12, 1.0, conditional, &mut r).unwrap();
            let x = vec![0.4, -0.6];
            let cond = if conditional { Some(x.as_slice()) } else { None };
            let y: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (_, logdet) = flow.inverse(&y, cond).unwrap();

            // finite-difference Jacobian of the inverse map
            let h = 1e-6;
            let mut jac = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += h;
                ym[j] -= h;
                let (fp, _) = flow.inverse(&yp, cond).unwrap();
                let (fm, _) = flow.inverse(&ym, cond).unwrap();
                for i in 0..d {
                    jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
                }
            }
            let det = jac.determinant().abs();
            let rel = (logdet - det.ln()).abs() / logdet.abs().max(1.0);
            assert!(rel < 1e-5, "conditional={conditional} logdet {} vs ln|det| {}", logdet, det.ln());
        }
    }

    #[test]
    fn inverse_logdet_negates_forward_direction() {
        // the forward map's Jacobian logdet is the negative of the inverse's
        let mut r = rng(23);
        let flow = FlowModel::new(6, 2, 3, 8, 1.0, false, &mut r).unwrap();
        let y: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (y_hat, logdet_inv) = flow.inverse(&y, None).unwrap();

        let h = 1e-6;
        let mut jac = DMatrix::zeros(6, 6);
        for j in 0..6 {
            let mut p = y_hat.clone();
            let mut m = y_hat.clone();
            p[j] += h;
            m[j] -= h;
            let fp = flow.forward(&p, None).unwrap();
            let fm = flow.forward(&m, None).unwrap();
            for i in 0..6 {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let logdet_fwd = jac.determinant().abs().ln();
        assert!((logdet_inv + logdet_fwd).abs() < 1e-5);
    }

    #[test]
    fn gaussian_logpdf_examples() {
        let v = gaussian_logpdf(&[0.0], &[0.0], 1.0).unwrap();
        assert!((v - (-0.9189385332046727)).abs() < 1e-12);

        let sigma = 0.37;
        let v = gaussian_logpdf(&[1.0, -2.0], &[1.0, -2.0], sigma).unwrap();
        assert!((v - (-LN_2PI - 2.0 * sigma.ln())).abs() < 1e-12);

        // random case vs direct scalar product of 1-d densities
        let mut r = rng(29);
        let z: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        let s: f64 = 0.8;
        let direct: f64 = z
            .iter()
            .zip(&m)
            .map(|(a, b)| {
                -0.5 * LN_2PI - s.ln() - (a - b) * (a - b) / (2.0 * s * s)
            })
            .sum();
        assert!((gaussian_logpdf(&z, &m, s).unwrap() - direct).abs() < 1e-12);

        assert!(matches!(gaussian_logpdf(&[0.0], &[0.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_flow_loglik_is_standard_normal() {
        let flow = zeroed_flow(4, 2, 2);
        let y = vec![0.5, -1.0, 0.0, 2.0];
        let ll = flow.observation_loglik(&y, &[0.0, 0.0]).unwrap();
        let expect = gaussian_logpdf(&y, &[0.0; 4], 1.0).unwrap();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn adding_constant_scale_layer_shifts_loglik_by_minus_kc() {
        let c = 0.5f64;
        let flow0 = zeroed_flow(6, 2, 1);
        let y = vec![0.2; 6];
        let x = [0.0, 0.0];
        let ll0 = flow0.observation_loglik(&y, &x).unwrap();

        let mut flow1 = flow0.clone();
        flow1.layers[0]
            .scale_net
            .b2
            .data
            .iter_mut()
            .for_each(|v| *v = (c / SCALE_BOUND).atanh());
        // keep the base term fixed by comparing against the transformed y_hat
        let (y_hat, logdet) = flow1.inverse(&y, None).unwrap();
        let k = flow1.layers[0].active.len() as f64;
        assert!((logdet - (-k * c)).abs() < 1e-12);
        let ll1 = flow1.observation_loglik(&y, &x).unwrap();
        let base1 = gaussian_logpdf(&y_hat, &[0.0; 6], 1.0).unwrap();
        assert!((ll1 - (base1 + logdet)).abs() < 1e-12);
        // identical base terms would differ by exactly -k*c
        let base0 = gaussian_logpdf(&y, &[0.0; 6], 1.0).unwrap();
        assert!(((ll1 - base1) - (ll0 - base0) - (-k * c)).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one_by_importance_sampling() {
        let mut r = rng(41);
        let d = 4usize;
        let flow = FlowModel::new(d, 2, 3, 8, 0.7, false, &mut r).unwrap();
        let x = vec![0.3, -0.5];
        let mu = flow.mean_net.eval(&x);

        // proposal: base N(0, 2^2 I) pushed through the same flow
        let q_sigma = 2.0;
        let n = 20_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let y_hat: Vec<f64> =
                (0..d).map(|_| q_sigma * r.sample::<f64, _>(StandardNormal)).collect();
            let y = flow.forward(&y_hat, None).unwrap();
            let logp = flow.observation_loglik(&y, &x).unwrap();
            let (y_hat_back, logdet) = flow.inverse(&y, None).unwrap();
            let logq = gaussian_logpdf(&y_hat_back, &vec![0.0; d], q_sigma).unwrap() + logdet;
            acc += (logp - logq).exp();
        }
        let integral = acc / n as f64;
        assert!((integral - 1.0).abs() < 0.02, "integral estimate {integral}");
        // sanity: the importance ratio is a real ratio, not identically 1
        let y0 = flow.forward(&vec![q_sigma; d], None).unwrap();
        let lp = flow.observation_loglik(&y0, &x).unwrap();
        let (yh, ld) = flow.inverse(&y0, None).unwrap();
        let lq = gaussian_logpdf(&yh, &vec![0.0; d], q_sigma).unwrap() + ld;
        assert!((lp - lq).abs() > 1e-6);
        let _ = mu;
    }

    #[test]
    fn sample_observation_degenerate_sigma_is_deterministic() {
        let mut r = rng(43);
        let mut flow = FlowModel::new(8, 2, 2, 8, 1.0, false, &mut r).unwrap();
        flow.sigma = 1e-12;
        let x = vec![0.1, 0.9];
        let s1 = flow.sample_observation(&x, &mut rng(1)).unwrap();
        let mu = flow.mean_net.eval(&x);
        let expect = flow.forward(&mu, None).unwrap();
        for (a, b) in s1.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_observation_identity_flow_mean() {
        let mut flow = zeroed_flow(4, 2, 2);
        flow.mean_net.b2.data = vec![0.5, -0.5, 1.0, 0.0];
        let x = vec![0.0, 0.0];
        let n = 100_000usize;
        let mut r = rng(47);
        let mut sum = vec![0.0; 4];
        for _ in 0..n {
            let s = flow.sample_observation(&x, &mut r).unwrap();
            for (a, b) in sum.iter_mut().zip(&s) {
                *a += b;
            }
        }
        for (i, a) in sum.iter().enumerate() {
            assert!((a / n as f64 - flow.mean_net.b2.data[i]).abs() < 0.02, "coord {i}");
        }
    }

    #[test]
    fn loglik_of_own_samples_is_finite() {
        let mut r = rng(53);
        let flow = FlowModel::new(6, 2, 3, 8, 0.5, true, &mut r).unwrap();
        let x = vec![0.2, -0.2];
        for _ in 0..10_000 {
            let y = flow.sample_observation(&x, &mut r).unwrap();
            let ll = flow.observation_loglik(&y, &x).unwrap();
            assert!(ll.is_finite());
        }
    }

    #[test]
    fn loglik_gradients_match_fd() {
        for conditional in [false, true] {
            let mut r = rng(59);
            let flow = FlowModel::new(4, 2, 2, 6, 0.9, conditional, &mut r).unwrap();
            let y: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();

            // all flow params plus the latent state
            let mut params: Vec<Tensor> = Vec::new();
            let mut names: Vec<(String, &Tensor)> = Vec::new();
            flow.visit(&mut names);
            for (_, t) in &names {
                params.push((*t).clone());
            }
            params.push(Tensor::vector(vec![0.3, -0.7]).with_grad());

            let flow2 = flow.clone();
            let y2 = y.clone();
            let err = gradient_check(
                |tape, vars| {
                    let mut it = vars.iter().copied();
                    let mut next4 = || MlpVars {
                        w1: it.next().unwrap(),
                        b1: it.next().unwrap(),
                        w2: it.next().unwrap(),
                        b2: it.next().unwrap(),
                    };
                    let layers: Vec<CouplingVars> = (0..flow2.layers.len())
                        .map(|_| CouplingVars { scale: next4(), shift: next4() })
                        .collect();
                    let mean = next4();
                    let xv = it.next().unwrap();
                    let fvars = FlowVars { layers, mean };
                    flow2.loglik_tape(tape, &fvars, &y2, xv)
                },
                &mut params,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "conditional={conditional} loglik gradient error {err}");
        }
    }

    #[test]
    fn tape_and_plain_loglik_agree() {
        for conditional in [false, true] {
            let mut r = rng(61);
            let flow = FlowModel::new(6, 3, 3, 8, 0.8, conditional, &mut r).unwrap();
            let y: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
            let x = vec![0.1, 0.2, -0.3];
            let plain = flow.observation_loglik(&y, &x).unwrap();

            let mut tape = Tape::new();
            let vars = flow.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let ll = flow.loglik_tape(&mut tape, &vars, &y, xv).unwrap();
            assert_eq!(tape.scalar_value(ll), plain, "conditional={conditional}");
        }
    }

}
