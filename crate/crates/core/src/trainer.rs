// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch Adam training of the SAE objective
//! `½‖x − (Dz + b)‖² + penalty(z)` with `z = prox(Wᵀx + b_e)`.
//!
//! Gradient rules:
//! - TopK / AbsTopK: exact gradient through the selected support.
//! - ReLU: subgradient 0 at the kink; penalty `λ‖z‖₁`.
//! - JumpReLU: pass-through on the active set; thresholds (stored as `ln θ`)
//!   get a straight-through estimate with a rectangle kernel of width
//!   `bandwidth`; penalty `λ‖z‖₀` has no pre-activation gradient.
//!
//! Batches are split into fixed-size chunks whose gradients are reduced in
//! chunk order, so results do not depend on the number of worker threads.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot, Matrix, Rng, RngState, Vector};
use crate::model::{init_params, SaeParams, SaeVariant};
use crate::prox::ProxSpec;
use crate::storage::ActivationStore;

/// Samples per gradient chunk.
const CHUNK: usize = 256;

/// Optimizer and schedule settings. Defaults follow the reference SAE setup
/// (Adam, lr 3e-4, β = (0.9, 0.99), batch 4096, 30k steps, bandwidth 1e-3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Width of the JumpReLU straight-through window.
    pub bandwidth: f64,
    /// Sparsity penalty weight; `None` uses the encoder λ for ReLU and 0 for JumpReLU.
    pub loss_lambda: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
    /// Record wall-clock time as 0 so reports are byte-reproducible.
    pub deterministic: bool,
    /// Worker threads for gradient chunks (set from the environment, not config files).
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_size: 4096,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            bandwidth: 0.001,
            loss_lambda: None,
            seed: 0,
            eval_every: 1000,
            deterministic: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("steps, batch_size and eval_every must be positive");
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.bandwidth > 0.0) {
            return bad("lr, eps and bandwidth must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.loss_lambda.is_some_and(|l| !(l >= 0.0)) {
            return bad("loss_lambda must be >= 0");
        }
        Ok(())
    }

    /// Penalty weight actually used for `variant`.
    pub fn effective_loss_lambda(&self, variant: &SaeVariant) -> f64 {
        match (self.loss_lambda, variant.spec) {
            (Some(l), ProxSpec::ReluSoft { .. } | ProxSpec::JumpRelu { .. }) => l,
            (None, ProxSpec::ReluSoft { lambda }) => lambda,
            _ => 0.0,
        }
    }
}

/// Metrics logged at one evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean over the batch of `‖x − x̂‖² / d`.
    pub mse: f64,
    /// Mean over the batch of `‖x − x̂‖² / ‖x‖²`.
    pub nmse: f64,
    /// Mean number of nonzero code entries over the window.
    pub l0_mean: f64,
    /// Latents never active over the window since the previous record.
    pub dead_latents: usize,
    pub positive_codes: u64,
    pub negative_codes: u64,
    pub wall_clock_s: f64,
}

/// Training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub records: Vec<EvalRecord>,
    /// Batch MSE of every step.
    pub step_mse: Vec<f64>,
}

impl TrainReport {
    /// One JSON object per record, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    /// Moving average of `step_mse` over `window` steps ending at `step`.
    pub fn smoothed_mse(&self, step: usize, window: usize) -> f64 {
        let end = (step + 1).min(self.step_mse.len());
        let start = end.saturating_sub(window.max(1));
        let s = &self.step_mse[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SaeParams,
    pub report: TrainReport,
    pub rng: RngState,
    pub steps: usize,
}

/// Gradients of the loss with respect to every learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Matrix,
    pub dict: Matrix,
    pub b_enc: Vector,
    pub b_dec: Vector,
    pub log_thresholds: Option<Vector>,
}

/// Cached forward pass of one sample.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub code: Vec<f64>,
    pub xhat: Vec<f64>,
    /// Latents through which the operator passes gradient (slope 1).
    pub active: Vec<usize>,
    pub loss_lambda: f64,
    pub loss: f64,
}

/// Read-only view used by the batched kernels.
struct Model<'a> {
    params: &'a SaeParams,
    variant: SaeVariant,
    /// `D` transposed: row `i` is atom `i`.
    dict_t: Matrix,
    thresholds: Option<Vec<f64>>,
    loss_lambda: f64,
    bandwidth: f64,
}

impl<'a> Model<'a> {
    fn new(params: &'a SaeParams, variant: SaeVariant, loss_lambda: f64, bandwidth: f64) -> Self {
        Self {
            params,
            variant,
            dict_t: params.dict.transpose(),
            thresholds: params.thresholds(),
            loss_lambda,
            bandwidth,
        }
    }

    fn forward(&self, x: &[f64], st: &mut ForwardState) {
        let p = self.params;
        st.x.clear();
        st.x.extend_from_slice(x);
        st.pre.clear();
        st.pre.resize(p.p(), 0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, p.w.row(j), &mut st.pre);
            }
        }
        axpy(1.0, p.b_enc.as_slice(), &mut st.pre);
        st.code.resize(p.p(), 0.0);
        self.variant
            .activate(&st.pre, self.thresholds.as_deref(), &mut st.code);
        st.active.clear();
        match self.variant.spec {
            ProxSpec::ReluSoft { lambda } => {
                st.active
                    .extend((0..st.pre.len()).filter(|&i| st.pre[i] - lambda > 0.0));
            }
            ProxSpec::JumpRelu { theta } => {
                let t = self.thresholds.as_deref();
                st.active
                    .extend((0..st.pre.len()).filter(|&i| st.pre[i] >= t.map_or(theta, |t| t[i])));
            }
            ProxSpec::TopK { .. } => st
                .active
                .extend((0..st.code.len()).filter(|&i| st.code[i] > 0.0)),
            ProxSpec::AbsTopK { .. } => st
                .active
                .extend((0..st.code.len()).filter(|&i| st.code[i] != 0.0)),
        }
        st.xhat.clear();
        st.xhat.extend_from_slice(p.b_dec.as_slice());
        for &i in &st.active {
            if st.code[i] != 0.0 {
                axpy(st.code[i], self.dict_t.row(i), &mut st.xhat);
            }
        }
        let sq: f64 = st.xhat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let penalty = match self.variant.spec {
            ProxSpec::ReluSoft { .. } => self.loss_lambda * st.code.iter().sum::<f64>(),
            ProxSpec::JumpRelu { .. } => {
                self.loss_lambda * st.code.iter().filter(|v| **v != 0.0).count() as f64
            }
            _ => 0.0,
        };
        st.loss_lambda = self.loss_lambda;
        st.loss = 0.5 * sq + penalty;
    }

    /// Adds this sample's gradient into `acc` (transposed layout).
    fn backward(&self, st: &ForwardState, acc: &mut Accum) {
        let d = st.x.len();
        let r: Vec<f64> = st.xhat.iter().zip(&st.x).map(|(a, b)| a - b).collect();
        axpy(1.0, &r, &mut acc.b_dec);
        let relu_penalty = matches!(self.variant.spec, ProxSpec::ReluSoft { .. });
        for &i in &st.active {
            let atom = self.dict_t.row(i);
            let mut g = dot(atom, &r);
            if relu_penalty {
                g += self.loss_lambda;
            }
            let zi = st.code[i];
            if zi != 0.0 {
                axpy(zi, &r, &mut acc.dict_t[i * d..(i + 1) * d]);
            }
            acc.b_enc[i] += g;
            axpy(g, &st.x, &mut acc.w_t[i * d..(i + 1) * d]);
        }
        if let (ProxSpec::JumpRelu { .. }, Some(t), Some(gl)) = (
            self.variant.spec,
            self.thresholds.as_deref(),
            acc.log_thresholds.as_mut(),
        ) {
            let eps = self.bandwidth;
            for i in 0..st.pre.len() {
                // rectangle kernel K(u) = 1[|u| < ½] at u = (pre − θ)/ε
                if (st.pre[i] - t[i]).abs() < 0.5 * eps {
                    let g_recon = dot(self.dict_t.row(i), &r);
                    let dtheta = -(t[i] / eps) * g_recon - self.loss_lambda / eps;
                    gl[i] += t[i] * dtheta;
                }
            }
        }
    }
}

/// Gradient accumulator; `w_t` and `dict_t` are `P × d`.
#[derive(Debug, Clone)]
struct Accum {
    w_t: Vec<f64>,
    dict_t: Vec<f64>,
    b_enc: Vec<f64>,
    b_dec: Vec<f64>,
    log_thresholds: Option<Vec<f64>>,
    loss: f64,
    sq_err: f64,
    nmse: f64,
    l0: u64,
    positive: u64,
    negative: u64,
    fired: Vec<bool>,
}

impl Accum {
    fn zeros(d: usize, p: usize, thresholds: bool) -> Self {
        Self {
            w_t: vec![0.0; p * d],
            dict_t: vec![0.0; p * d],
            b_enc: vec![0.0; p],
            b_dec: vec![0.0; d],
            log_thresholds: thresholds.then(|| vec![0.0; p]),
            loss: 0.0,
            sq_err: 0.0,
            nmse: 0.0,
            l0: 0,
            positive: 0,
            negative: 0,
            fired: vec![false; p],
        }
    }

    fn add(&mut self, o: &Accum) {
        axpy(1.0, &o.w_t, &mut self.w_t);
        axpy(1.0, &o.dict_t, &mut self.dict_t);
        axpy(1.0, &o.b_enc, &mut self.b_enc);
        axpy(1.0, &o.b_dec, &mut self.b_dec);
        if let (Some(a), Some(b)) = (self.log_thresholds.as_mut(), o.log_thresholds.as_ref()) {
            axpy(1.0, b, a);
        }
        self.loss += o.loss;
        self.sq_err += o.sq_err;
        self.nmse += o.nmse;
        self.l0 += o.l0;
        self.positive += o.positive;
        self.negative += o.negative;
        for (f, g) in self.fired.iter_mut().zip(&o.fired) {
            *f |= *g;
        }
    }

    fn into_gradients(self, d: usize, p: usize, scale: f64) -> Gradients {
        let untranspose = |t: &[f64]| {
            let mut m = vec![0.0; d * p];
            for i in 0..p {
                for j in 0..d {
                    m[j * p + i] = scale * t[i * d + j];
                }
            }
            Matrix::from_vec_unchecked(d, p, m)
        };
        let scaled = |v: &[f64]| Vector::from_vec_unchecked(v.iter().map(|x| x * scale).collect());
        Gradients {
            w: untranspose(&self.w_t),
            dict: untranspose(&self.dict_t),
            b_enc: scaled(&self.b_enc),
            b_dec: scaled(&self.b_dec),
            log_thresholds: self.log_thresholds.as_deref().map(scaled),
        }
    }
}

fn empty_state() -> ForwardState {
    ForwardState {
        x: Vec::new(),
        pre: Vec::new(),
        code: Vec::new(),
        xhat: Vec::new(),
        active: Vec::new(),
        loss_lambda: 0.0,
        loss: 0.0,
    }
}

/// Per-sample loss with its forward cache.
pub fn loss(
    x: &Vector,
    params: &SaeParams,
    variant: &SaeVariant,
    loss_lambda: f64,
) -> Result<(f64, ForwardState)> {
    check_dim("loss", params.d(), x.len())?;
    variant.spec.validate(params.p())?;
    let model = Model::new(
        params,
        *variant,
        loss_lambda,
        TrainConfig::default().bandwidth,
    );
    let mut st = empty_state();
    model.forward(x.as_slice(), &mut st);
    if !st.loss.is_finite() {
        return Err(Error::contract("non-finite loss"));
    }
    Ok((st.loss, st))
}

/// Gradients of the per-sample loss at the cached forward state.
pub fn backward(
    state: &ForwardState,
    params: &SaeParams,
    variant: &SaeVariant,
    bandwidth: f64,
) -> Gradients {
    let model = Model::new(params, *variant, state.loss_lambda, bandwidth);
    let mut acc = Accum::zeros(params.d(), params.p(), params.log_thresholds.is_some());
    model.backward(state, &mut acc);
    acc.into_gradients(params.d(), params.p(), 1.0)
}

fn chunk_gradient(model: &Model<'_>, store: &ActivationStore, rows: &[usize]) -> Accum {
    let (d, p) = (model.params.d(), model.params.p());
    let mut acc = Accum::zeros(d, p, model.thresholds.is_some());
    let mut st = empty_state();
    let mut x = vec![0.0; d];
    for &r in rows {
        store.row_into(r, &mut x);
        model.forward(&x, &mut st);
        model.backward(&st, &mut acc);
        let sq: f64 = st.xhat.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
        let xx = dot(&x, &x);
        acc.loss += st.loss;
        acc.sq_err += sq;
        acc.nmse += if xx > 0.0 { sq / xx } else { 0.0 };
        for &z in &st.code {
            if z > 0.0 {
                acc.positive += 1;
            } else if z < 0.0 {
                acc.negative += 1;
            }
        }
        acc.l0 += st.code.iter().filter(|z| **z != 0.0).count() as u64;
        for &i in &st.active {
            acc.fired[i] = true;
        }
    }
    acc
}

fn batch_gradient(
    model: &Model<'_>,
    store: &ActivationStore,
    rows: &[usize],
    pool: Option<&rayon::ThreadPool>,
) -> Accum {
    let (d, p) = (model.params.d(), model.params.p());
    let chunks: Vec<&[usize]> = rows.chunks(CHUNK).collect();
    let mut total = Accum::zeros(d, p, model.thresholds.is_some());
    match pool {
        Some(pool) => {
            let parts: Vec<Accum> = pool.install(|| {
                chunks
                    .par_iter()
                    .map(|c| chunk_gradient(model, store, c))
                    .collect()
            });
            for part in &parts {
                total.add(part);
            }
        }
        None => {
            for c in chunks {
                total.add(&chunk_gradient(model, store, c));
            }
        }
    }
    total
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], cfg: &TrainConfig, t: i32) {
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Initializes an SAE on `store` and trains it.
///
/// The decoder bias starts at the data mean and the encoder bias at
/// `−Wᵀb`, so the untrained encoder is one proximal-gradient step from zero.
pub fn train(
    store: &ActivationStore,
    cfg: &TrainConfig,
    variant: &SaeVariant,
    latents: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    variant.spec.validate(latents)?;
    let mut rng = Rng::from_seed(cfg.seed);
    let mean = store.mean()?;
    let mut params = init_params(store.dim(), latents, &mut rng, Some(&mean))?;
    params.b_enc = Vector::from_vec_unchecked(
        params
            .w
            .mul_t_slice(params.b_dec.as_slice())
            .into_iter()
            .map(|v| -v)
            .collect(),
    );
    if let ProxSpec::JumpRelu { theta } = variant.spec {
        if !(theta > 0.0) {
            return Err(Error::Config(
                "JumpReLU training needs an initial theta > 0".into(),
            ));
        }
        params.log_thresholds = Some(Vector::from_vec_unchecked(vec![theta.ln(); latents]));
    }
    train_from(store, cfg, variant, params, rng)
}

/// Trains from given parameters, drawing batches from `rng`.
pub fn train_from(
    store: &ActivationStore,
    cfg: &TrainConfig,
    variant: &SaeVariant,
    mut params: SaeParams,
    mut rng: Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dim("train (store dim vs d)", params.d(), store.dim())?;
    variant.spec.validate(params.p())?;
    if store.n_rows() == 0 {
        return Err(Error::contract("cannot train on an empty store"));
    }
    let (d, p) = (params.d(), params.p());
    let loss_lambda = cfg.effective_loss_lambda(variant);
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut adam_w = AdamSlot::new(d * p);
    let mut adam_d = AdamSlot::new(d * p);
    let mut adam_be = AdamSlot::new(p);
    let mut adam_b = AdamSlot::new(d);
    let mut adam_t = AdamSlot::new(p);

    let start = Instant::now();
    let mut report = TrainReport {
        variant: variant.name().into(),
        records: Vec::new(),
        step_mse: Vec::with_capacity(cfg.steps),
    };
    let mut window_fired = vec![false; p];
    let (mut window_l0, mut window_samples, mut window_pos, mut window_neg) =
        (0u64, 0u64, 0u64, 0u64);
    let mut last_good = params.clone();
    let mut rows = vec![0usize; cfg.batch_size];

    for step in 0..cfg.steps {
        for r in rows.iter_mut() {
            *r = rng.below(store.n_rows());
        }
        let acc = {
            let model = Model::new(&params, *variant, loss_lambda, cfg.bandwidth);
            batch_gradient(&model, store, &rows, pool.as_ref())
        };
        let n = cfg.batch_size as f64;
        let batch_loss = acc.loss / n;
        if !batch_loss.is_finite() {
            return Err(Error::TrainDiverged {
                step,
                last_good: Box::new(last_good),
            });
        }
        let mse = acc.sq_err / (n * d as f64);
        report.step_mse.push(mse);
        for (f, g) in window_fired.iter_mut().zip(&acc.fired) {
            *f |= *g;
        }
        window_l0 += acc.l0;
        window_samples += cfg.batch_size as u64;
        window_pos += acc.positive;
        window_neg += acc.negative;

        if step % cfg.eval_every == 0 || step + 1 == cfg.steps {
            report.records.push(EvalRecord {
                step,
                mse,
                nmse: acc.nmse / n,
                l0_mean: window_l0 as f64 / window_samples as f64,
                dead_latents: window_fired.iter().filter(|f| !**f).count(),
                positive_codes: window_pos,
                negative_codes: window_neg,
                wall_clock_s: if cfg.deterministic {
                    0.0
                } else {
                    start.elapsed().as_secs_f64()
                },
            });
            window_fired.iter_mut().for_each(|f| *f = false);
            window_l0 = 0;
            window_samples = 0;
            window_pos = 0;
            window_neg = 0;
        }

        let grads = acc.into_gradients(d, p, 1.0 / n);
        last_good = params.clone();
        let t = i32::try_from(step + 1).unwrap_or(i32::MAX);
        adam_w.step(params.w.as_mut_slice(), grads.w.as_slice(), cfg, t);
        adam_d.step(params.dict.as_mut_slice(), grads.dict.as_slice(), cfg, t);
        adam_be.step(params.b_enc.as_mut_slice(), grads.b_enc.as_slice(), cfg, t);
        adam_b.step(params.b_dec.as_mut_slice(), grads.b_dec.as_slice(), cfg, t);
        if let (Some(lt), Some(g)) = (
            params.log_thresholds.as_mut(),
            grads.log_thresholds.as_ref(),
        ) {
            adam_t.step(lt.as_mut_slice(), g.as_slice(), cfg, t);
        }
        if params.normalize_decoder().is_err() || !params.is_finite() {
            return Err(Error::TrainDiverged {
                step,
                last_good: Box::new(last_good),
            });
        }
    }

    Ok(TrainOutcome {
        params,
        report,
        rng: rng.state(),
        steps: cfg.steps,
    })
}
