//! Maximum-likelihood training of the flow, mean and dynamics networks by
//! window-wise negative log-likelihood minimization.
//!
//! The latent rollout inside a window is the deterministic mean recurrence
//! x_t = A(x_{t-1}) x_{t-1} + B(x_{t-1}) u_t; the prefix before the window
//! start is rolled out without gradients. Windows are non-overlapping
//! (stride K+1) and shuffled each epoch.

use crate::checkpoint::Checkpoint;
use crate::dynamics::{DynamicsModel, DynamicsVars, NoiseModel};
use crate::error::{Error, Result};
use crate::flow::{dequantize, FlowModel, FlowVars};
use crate::nn::Mlp;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use std::collections::HashMap;
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    /// Window length K: each window covers observations t = k ..= k+K.
    pub window: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Add U(0, 1/256) noise to observations during training (pixel data).
    pub dequantize: bool,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// When set, a checkpoint is written here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            window: 8,
            lr: 1e-3,
            epochs: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dequantize: false,
            clip_norm: 10.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("training window K must be positive".into()));
        }
        // lr = 0 is allowed: it freezes the parameters (useful for dry runs)
        if self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "optimizer moments must lie in (0, 1), got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("optimizer eps must be positive, got {}", self.eps)));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "gradient clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Observations/controls of one window plus the no-grad start state x_{k-1}.
pub struct WindowData {
    x_start: Vec<f64>,
    ys: Vec<Vec<f64>>,
    us: Vec<Vec<f64>>,
}

pub fn window_data(
    dyn_model: &DynamicsModel,
    traj: &crate::sim::Trajectory,
    k: usize,
    big_k: usize,
) -> Result<WindowData> {
    if k + big_k >= traj.len() {
        return Err(Error::Usage(format!(
            "window [{k}, {}] out of range for trajectory of length {}",
            k + big_k,
            traj.len()
        )));
    }
    if traj.control_dim() != dyn_model.control_dim {
        return Err(Error::Dimension(format!(
            "trajectory control dim {} != dynamics control dim {}",
            traj.control_dim(),
            dyn_model.control_dim
        )));
    }
    // no-grad prefix rollout from mu0 up to x_{k-1}
    let mut x = dyn_model.noise.mu0.clone();
    for t in 0..k {
        let u = DVector::from_column_slice(traj.control(t));
        x = dyn_model.step_mean(&x, &u)?;
    }
    let ys: Vec<Vec<f64>> = (k..=k + big_k).map(|t| traj.observation(t).to_vec()).collect();
    let us: Vec<Vec<f64>> = (k..=k + big_k).map(|t| traj.control(t).to_vec()).collect();
    Ok(WindowData { x_start: x.as_slice().to_vec(), ys, us })
}

/// Builds the differentiable window NLL on a fresh tape. Returns the tape,
/// the scalar NLL var and the parameter bindings (for gradient collection).
pub fn window_nll_tape(
    flow: &FlowModel,
    dyn_model: &DynamicsModel,
    data: &WindowData,
) -> Result<(Tape, Var, FlowVars, DynamicsVars)> {
    let mut tape = Tape::new();
    let fvars = flow.bind(&mut tape);
    let dvars = dyn_model.bind(&mut tape);
    let mut x = tape.constant(data.x_start.clone());
    let mut total = tape.scalar(0.0);
    for (y, u) in data.ys.iter().zip(&data.us) {
        x = dyn_model.step_tape(&mut tape, dvars, x, u)?;
        let ll = flow.loglik_tape(&mut tape, &fvars, y, x)?;
        total = tape.add(total, ll)?;
    }
    let nll = tape.scale(total, -1.0);
    Ok((tape, nll, fvars, dvars))
}

/// -sum_{t=k}^{k+K} log p(y_t | x_t) along the deterministic rollout.
pub fn window_nll(
    flow: &FlowModel,
    dyn_model: &DynamicsModel,
    traj: &crate::sim::Trajectory,
    k: usize,
    big_k: usize,
) -> Result<f64> {
    let data = window_data(dyn_model, traj, k, big_k)?;
    let (tape, nll, _, _) = window_nll_tape(flow, dyn_model, &data)?;
    Ok(tape.scalar_value(nll))
}

/// Adaptive-moment optimizer state, keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Rescales all gradients so the global norm is at most `max_norm`.
/// Returns the pre-clip global norm.
pub fn clip_gradients(params: &mut [(String, &mut Tensor)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params.iter() {
        if let Some(g) = &p.grad {
            for v in g {
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}

/// One adaptive-moment update over all parameters; gradients are read from
/// the tensors' accumulated grads and cleared afterwards.
pub fn optimizer_step(
    params: &mut [(String, &mut Tensor)],
    state: &mut AdamState,
    cfg: &TrainingConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(g) = &p.grad {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
            }
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad.take() else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One per-window loss record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub window: usize,
    pub nll: f64,
}

/// Serializes both models (and the fixed noise model) into one checkpoint.
pub fn models_to_checkpoint(flow: &FlowModel, dyn_model: &DynamicsModel) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("obs_dim", flow.obs_dim);
    ckpt.set_meta("latent_dim", flow.latent_dim);
    ckpt.set_meta("control_dim", dyn_model.control_dim);
    ckpt.set_meta("flow_layers", flow.layers.len());
    ckpt.set_meta("conditional", if flow.conditional { 1 } else { 0 });
    ckpt.set_meta_f64("sigma", flow.sigma);
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    flow.visit(&mut named);
    dyn_model.visit(&mut named);
    for (name, t) in named {
        ckpt.push(&name, t);
    }
    let d = dyn_model.latent_dim;
    let m = dyn_model.control_dim;
    ckpt.push("noise.q", &matrix_tensor(&dyn_model.noise.q, d, d));
    ckpt.push("noise.mu0", &Tensor::vector(dyn_model.noise.mu0.as_slice().to_vec()));
    ckpt.push("noise.sigma0", &matrix_tensor(&dyn_model.noise.sigma0, d, d));
    let _ = m;
    ckpt
}

fn matrix_tensor(m: &DMatrix<f64>, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(m[(r, c)]);
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn tensor_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.shape.len() != 2 {
        return Err(Error::Data("checkpoint matrix tensor must be rank 2".into()));
    }
    Ok(DMatrix::from_row_slice(t.shape[0], t.shape[1], &t.data))
}

fn mlp_from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Mlp> {
    let get = |suffix: &str| -> Result<Tensor> {
        Ok(ckpt.take(&format!("{prefix}.{suffix}"))?.clone().with_grad())
    };
    Ok(Mlp { w1: get("w1")?, b1: get("b1")?, w2: get("w2")?, b2: get("b2")? })
}

/// Rebuilds both models from a checkpoint written by [`models_to_checkpoint`].
pub fn models_from_checkpoint(ckpt: &Checkpoint) -> Result<(FlowModel, DynamicsModel)> {
    let obs_dim = ckpt.meta_usize("obs_dim")?;
    let latent_dim = ckpt.meta_usize("latent_dim")?;
    let control_dim = ckpt.meta_usize("control_dim")?;
    let n_layers = ckpt.meta_usize("flow_layers")?;
    let conditional = ckpt.meta_usize("conditional")? != 0;
    let sigma = ckpt.meta_f64("sigma")?;

    // the nets come from the checkpoint; masks are recomputed from obs_dim
    let mut rng = rng::stream(0);
    let mut flow = FlowModel::new(obs_dim, latent_dim, n_layers, 1, sigma, conditional, &mut rng)?;
    for (l, layer) in flow.layers.iter_mut().enumerate() {
        layer.scale_net = mlp_from_checkpoint(ckpt, &format!("flow.layer{l}.scale"))?;
        layer.shift_net = mlp_from_checkpoint(ckpt, &format!("flow.layer{l}.shift"))?;
    }
    flow.mean_net = mlp_from_checkpoint(ckpt, "flow.mean")?;

    let noise = NoiseModel::new(
        tensor_matrix(ckpt.take("noise.q")?)?,
        DVector::from_column_slice(&ckpt.take("noise.mu0")?.data),
        tensor_matrix(ckpt.take("noise.sigma0")?)?,
    )?;
    let mut dyn_model = DynamicsModel::new(latent_dim, control_dim, 1, noise, &mut rng)?;
    dyn_model.net = mlp_from_checkpoint(ckpt, "dyn.net")?;
    Ok((flow, dyn_model))
}

/// Trains flow + dynamics jointly on the dataset. Returns the per-window
/// loss history and the final checkpoint. Deterministic given (cfg.seed,
/// models, dataset).
pub fn train(
    flow: &mut FlowModel,
    dyn_model: &mut DynamicsModel,
    dataset: &[crate::sim::Trajectory],
    cfg: &TrainingConfig,
) -> Result<(Vec<LossRecord>, Checkpoint)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let d_obs = dataset[0].obs_dim();
    let m = dataset[0].control_dim();
    if dataset.iter().any(|t| t.obs_dim() != d_obs || t.control_dim() != m) {
        return Err(Error::Dimension(
            "all trajectories must share observation/control dimensions".into(),
        ));
    }

    // non-overlapping windows of K+1 observations, stride K+1
    let big_k = cfg.window;
    let mut windows: Vec<(usize, usize)> = Vec::new(); // (traj index, start k)
    for (ti, traj) in dataset.iter().enumerate() {
        let mut k = 0;
        while k + big_k < traj.len() {
            windows.push((ti, k));
            k += big_k + 1;
        }
    }
    if windows.is_empty() && cfg.epochs > 0 {
        return Err(Error::Data(format!(
            "no window of length K+1={} fits in the dataset",
            big_k + 1
        )));
    }

    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs * windows.len());
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, epoch as u64 + 1, 0));
        for &w in &order {
            let (ti, k) = windows[w];
            let mut data = window_data(dyn_model, &dataset[ti], k, big_k)?;
            if cfg.dequantize {
                // substream keyed by the stable window id, not the shuffle slot
                let mut nrng = rng::substream(cfg.seed, epoch as u64 + 1, w as u64 + 1);
                for y in &mut data.ys {
                    *y = dequantize(y, &mut nrng);
                }
            }
            let ctx = |e: Error| {
                Error::Numerical(format!("epoch {epoch} window {w} (traj {ti}, k={k}): {e}"))
            };
            let (mut tape, nll, fvars, dvars) = window_nll_tape(flow, dyn_model, &data)?;
            let loss = tape.scalar_value(nll);
            if !loss.is_finite() {
                return Err(ctx(Error::Numerical("non-finite window NLL".into())));
            }
            tape.backward(nll).map_err(ctx)?;
            flow.collect_grads(&tape, &fvars)?;
            dyn_model.collect_grads(&tape, dvars)?;

            let mut params: Vec<(String, &mut Tensor)> = Vec::new();
            flow.visit_mut(&mut params);
            dyn_model.visit_mut(&mut params);
            clip_gradients(&mut params, cfg.clip_norm);
            optimizer_step(&mut params, &mut state, cfg).map_err(ctx)?;

            history.push(LossRecord { epoch, window: w, nll: loss });
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let ckpt = models_to_checkpoint(flow, dyn_model);
            ckpt.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
    }
    Ok((history, models_to_checkpoint(flow, dyn_model)))
}

/// Writes the loss history CSV: epoch, window, nll.
pub fn write_loss_csv(path: &std::path::Path, history: &[LossRecord]) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,window,nll")?;
    for r in history {
        writeln!(f, "{},{},{:.16e}", r.epoch, r.window, r.nll)?;
    }
    Ok(())
}
