//! Toy pre-LN single-head attention classifier, trained with SGD or CG-FAC.
//!
//! ```text
//! tokens -> embedding rows -> layer_norm -> attention (Q = K = V) -> mean-pool -> head -> softmax CE
//! ```
//!
//! The attention block has no weights, so the trainable parameters are the
//! embedding table (`V x d`) and the head (`C x d`). Under CG-FAC each is
//! preconditioned by its own damped Fisher (block-diagonal):
//!
//! * head: activation `a` = pooled feature, gradient `g` = `softmax(z) - onehot(y)`;
//! * embedding: seen as the linear map `E^T onehot(t)`, one capture per token
//!   position with `a = onehot(t)` and `g = n * dL_s/dx_t`. The factor `n`
//!   makes the capture mean over `batch * n` positions equal the batch
//!   gradient.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_forward, softmax};
use crate::error::{Error, Result};
use crate::geometry::{layer_norm, layer_norm_backward, LayerNormParams, TokenMatrix};
use crate::kfac::{natural_gradient_step, CgConfig, CgSolution, DampedFisher, KroneckerCapture};
use crate::rng;

/// Standard deviation of the initial embedding entries.
pub const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Cgfac,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sgd" => Ok(Self::Sgd),
            "cgfac" => Ok(Self::Cgfac),
            _ => Err(Error::BadConfig(format!(
                "unknown optimizer `{s}` (expected sgd or cgfac)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Tokens per sample.
    pub n_tokens: usize,
    pub d: usize,
    pub vocab: usize,
    pub classes: usize,
    pub n_samples: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub eta: f64,
    pub gamma: f64,
    pub cg_max_iters: Option<usize>,
    pub cg_rel_tol: f64,
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tokens: 8,
            d: 16,
            vocab: 16,
            classes: 4,
            n_samples: 512,
            batch_size: 32,
            steps: 200,
            optimizer: Optimizer::Sgd,
            eta: 0.1,
            gamma: crate::kfac::DEFAULT_GAMMA,
            cg_max_iters: None,
            cg_rel_tol: crate::kfac::DEFAULT_REL_TOL,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_tokens", self.n_tokens),
            ("vocab", self.vocab),
            ("classes", self.classes),
            ("n_samples", self.n_samples),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::BadConfig(format!("{name} must be positive")));
        }
        if self.d < 2 {
            return Err(Error::BadConfig(format!("d must be >= 2, got {}", self.d)));
        }
        if self.vocab < 2 * self.classes {
            return Err(Error::BadConfig(format!(
                "vocab ({}) must be at least 2 * classes ({})",
                self.vocab, self.classes
            )));
        }
        if self.batch_size > self.n_samples {
            return Err(Error::BadConfig("batch_size exceeds n_samples".into()));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("cg_rel_tol", self.cg_rel_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::BadConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.cg_max_iters == Some(0) {
            return Err(Error::BadConfig("cg_max_iters must be positive".into()));
        }
        Ok(())
    }

    pub fn cg(&self) -> CgConfig {
        CgConfig {
            max_iters: self.cg_max_iters,
            rel_tol: self.cg_rel_tol,
            ..CgConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab: usize,
    pub classes: usize,
}

impl Dataset {
    /// Tokens per class cluster; ids past `classes * cluster_size` only
    /// appear as noise.
    pub fn cluster_size(&self) -> usize {
        self.vocab / self.classes
    }

    pub fn cluster_of(&self, token: usize) -> Option<usize> {
        let c = token / self.cluster_size();
        (c < self.classes).then_some(c)
    }

    /// Mean over tokens of the one-hot cluster indicator: the pooled
    /// feature if every token were embedded at its cluster's centre.
    pub fn gold_pooled(&self, sample: &Sample) -> Vec<f64> {
        let mut f = vec![0.0; self.classes];
        for &t in &sample.tokens {
            if let Some(c) = self.cluster_of(t) {
                f[c] += 1.0 / sample.tokens.len() as f64;
            }
        }
        f
    }
}

/// Each sample of class `c` draws its tokens from cluster `c`, except
/// `n / 4` random positions that get a uniformly random token. Labels cycle
/// through the classes before the sample order is shuffled.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    vocab: usize,
    classes: usize,
    n_samples: usize,
) -> Result<Dataset> {
    if classes == 0 || n == 0 || vocab < 2 * classes {
        return Err(Error::BadConfig(format!(
            "synthetic data needs n >= 1, classes >= 1 and vocab >= 2 * classes (n={n}, vocab={vocab}, classes={classes})"
        )));
    }
    let mut rng = rng::stream(seed, 1);
    let cluster = vocab / classes;
    let noisy = n / 4;
    let mut samples: Vec<Sample> = (0..n_samples)
        .map(|i| {
            let label = i % classes;
            let mut tokens: Vec<usize> = (0..n)
                .map(|_| label * cluster + rng.random_range(0..cluster))
                .collect();
            let mut positions: Vec<usize> = (0..n).collect();
            positions.shuffle(&mut rng);
            for &p in &positions[..noisy] {
                tokens[p] = rng.random_range(0..vocab);
            }
            Sample { tokens, label }
        })
        .collect();
    samples.shuffle(&mut rng);
    Ok(Dataset {
        samples,
        vocab,
        classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// `V x d`, row `t` is the embedding of token `t`.
    pub embedding: Array2<f64>,
    /// `C x d`.
    pub head: Array2<f64>,
    pub ln: LayerNormParams,
}

impl ToyModel {
    /// Gaussian embedding with standard deviation [`INIT_SCALE`], zero head.
    pub fn init(config: &TrainConfig) -> Self {
        let mut rng = rng::stream(config.seed, 0);
        let normal = Normal::new(0.0, INIT_SCALE).expect("positive scale");
        Self {
            embedding: Array2::from_shape_simple_fn((config.vocab, config.d), || {
                normal.sample(&mut rng)
            }),
            head: Array2::zeros((config.classes, config.d)),
            ln: LayerNormParams::training(),
        }
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let vocab = self.embedding.nrows();
        if let Some(&id) = s.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange { id, vocab });
        }
        if s.label >= self.head.nrows() {
            return Err(Error::IndexOutOfRange {
                id: s.label,
                vocab: self.head.nrows(),
            });
        }
        if s.tokens.is_empty() {
            return Err(Error::BadConfig("empty token sequence".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Array2<f64>,
    pub head: Array2<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        (self
            .embedding
            .iter()
            .chain(self.head.iter())
            .map(|x| x * x)
            .sum::<f64>())
        .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Captures {
    /// Block `E^T` (`d x V`): `a` one-hot token, `g` scaled position gradient.
    pub embedding: Vec<KroneckerCapture>,
    /// Block `W` (`C x d`): `a` pooled feature, `g` logit gradient.
    pub head: Vec<KroneckerCapture>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub per_sample_loss: Vec<f64>,
    pub grads: Gradients,
    pub captures: Captures,
}

struct SampleEval {
    loss: f64,
    tokens: Vec<usize>,
    /// Gradient of this sample's loss with respect to each embedded position.
    d_embedded: Array2<f64>,
    pooled: Array1<f64>,
    d_logits: Array1<f64>,
}

struct SampleForward {
    loss: f64,
    pooled: Array1<f64>,
    logits: Array1<f64>,
    normed: TokenMatrix,
    raw: Array2<f64>,
}

fn sample_forward(model: &ToyModel, s: &Sample) -> Result<SampleForward> {
    let raw = model.embedding.select(Axis(0), &s.tokens);
    let mut normed = Array2::zeros(raw.raw_dim());
    for (src, mut dst) in raw.rows().into_iter().zip(normed.rows_mut()) {
        dst.assign(&layer_norm(src, &model.ln)?);
    }
    let normed = TokenMatrix::new(normed)?;
    let attended = attention_forward(&normed);
    let pooled = attended.y.mean_axis(Axis(0)).expect("at least one token");
    let logits = model.head.dot(&pooled);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[s.label];
    Ok(SampleForward {
        loss,
        pooled,
        logits,
        normed,
        raw,
    })
}

fn sample_eval(model: &ToyModel, s: &Sample) -> Result<SampleEval> {
    model.check_sample(s)?;
    let SampleForward {
        loss,
        pooled,
        logits,
        normed,
        raw,
    } = sample_forward(model, s)?;
    let mut d_logits = softmax(logits.view());
    d_logits[s.label] -= 1.0;

    let n = s.tokens.len();
    let d_pooled = model.head.t().dot(&d_logits);
    let d_y = Array2::from_shape_fn((n, d_pooled.len()), |(_, k)| d_pooled[k] / n as f64);
    let d_normed = attention_backward(&normed, d_y.view())?;
    let mut d_embedded = Array2::zeros(raw.raw_dim());
    for ((v, dw), mut out) in raw
        .rows()
        .into_iter()
        .zip(d_normed.rows())
        .zip(d_embedded.rows_mut())
    {
        out.assign(&layer_norm_backward(v, &model.ln, dw)?);
    }
    Ok(SampleEval {
        loss,
        tokens: s.tokens.clone(),
        d_embedded,
        pooled,
        d_logits,
    })
}

/// Mean cross-entropy of `model` on `batch` (no gradients).
pub fn batch_loss(model: &ToyModel, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        model.check_sample(s)?;
        total += sample_forward(model, s)?.loss;
    }
    Ok(total / batch.len() as f64)
}

/// Loss, gradients and per-block Kronecker captures for one batch.
///
/// Samples are evaluated in parallel; every reduction runs in batch order.
pub fn forward(model: &ToyModel, batch: &[Sample]) -> Result<ForwardPass> {
    if batch.is_empty() {
        return Err(Error::BadConfig("empty batch".into()));
    }
    let evals: Vec<SampleEval> = batch
        .par_iter()
        .map(|s| sample_eval(model, s))
        .collect::<Result<_>>()?;

    let b = batch.len() as f64;
    let vocab = model.embedding.nrows();
    let mut grads = Gradients {
        embedding: Array2::zeros(model.embedding.raw_dim()),
        head: Array2::zeros(model.head.raw_dim()),
    };
    let mut captures = Captures::default();
    let mut per_sample_loss = Vec::with_capacity(evals.len());
    for e in evals {
        per_sample_loss.push(e.loss);
        for (c, mut row) in grads.head.rows_mut().into_iter().enumerate() {
            row.scaled_add(e.d_logits[c] / b, &e.pooled);
        }
        let n = e.tokens.len() as f64;
        for (&t, dx) in e.tokens.iter().zip(e.d_embedded.rows()) {
            grads.embedding.row_mut(t).scaled_add(1.0 / b, &dx);
            let mut onehot = Array1::zeros(vocab);
            onehot[t] = 1.0;
            captures
                .embedding
                .push(KroneckerCapture::new(onehot, &dx * n));
        }
        captures
            .head
            .push(KroneckerCapture::new(e.pooled, e.d_logits));
    }
    let loss = per_sample_loss.iter().sum::<f64>() / b;
    Ok(ForwardPass {
        loss,
        per_sample_loss,
        grads,
        captures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Batch loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub cg_iterations: usize,
    /// Seconds since the start of training.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<StepRecord>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn total_cg_iterations(&self) -> usize {
        self.records.iter().map(|r| r.cg_iterations).sum()
    }

    /// Bit-exact equality of every field except `wall_time`.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.grad_norm.to_bits() == b.grad_norm.to_bits()
                    && a.cg_iterations == b.cg_iterations
            })
    }
}

/// Per-block update directions `Δ` such that the optimizer sets `θ ← θ - η Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub embedding: Array2<f64>,
    pub head: Array2<f64>,
    pub cg_iterations: usize,
}

/// Warm-start state carried between CG-FAC steps.
#[derive(Debug, Clone, Default)]
pub struct CgWarmStart {
    embedding: Option<Array2<f64>>,
    head: Option<Array2<f64>>,
}

fn block_solve(
    theta: &Array2<f64>,
    grad: &Array2<f64>,
    captures: Vec<KroneckerCapture>,
    config: &TrainConfig,
    warm: &mut Option<Array2<f64>>,
) -> Result<(Array2<f64>, CgSolution)> {
    let fisher = DampedFisher::new(captures, config.gamma)?;
    let start = if config.warm_start {
        warm.as_ref().map(|w| w.view())
    } else {
        None
    };
    let (next, sol) = natural_gradient_step(
        theta.view(),
        grad.view(),
        &fisher,
        config.eta,
        &config.cg(),
        start,
    )?;
    if config.warm_start {
        *warm = Some(sol.x.clone());
    }
    Ok((next, sol))
}

/// One CG-FAC update of both blocks. The embedding block is solved in its
/// linear-map orientation `E^T`.
pub fn cgfac_update(
    model: &mut ToyModel,
    pass: ForwardPass,
    config: &TrainConfig,
    warm: &mut CgWarmStart,
) -> Result<Directions> {
    let ForwardPass {
        grads, captures, ..
    } = pass;
    let emb_t = model.embedding.t().to_owned();
    let grad_t = grads.embedding.t().to_owned();
    let (emb_next, emb_sol) = block_solve(
        &emb_t,
        &grad_t,
        captures.embedding,
        config,
        &mut warm.embedding,
    )?;
    let (head_next, head_sol) = block_solve(
        &model.head,
        &grads.head,
        captures.head,
        config,
        &mut warm.head,
    )?;
    model.embedding = emb_next.t().to_owned();
    model.head = head_next;
    Ok(Directions {
        embedding: emb_sol.x.t().to_owned(),
        head: head_sol.x,
        cg_iterations: emb_sol.iterations + head_sol.iterations,
    })
}

/// Update directions both optimizers would take on `batch`, without
/// changing `model`. The CG-FAC directions are cold-started.
pub fn update_directions(
    model: &ToyModel,
    batch: &[Sample],
    config: &TrainConfig,
) -> Result<(Directions, Directions)> {
    let pass = forward(model, batch)?;
    let sgd = Directions {
        embedding: pass.grads.embedding.clone(),
        head: pass.grads.head.clone(),
        cg_iterations: 0,
    };
    let mut scratch = model.clone();
    let cold = TrainConfig {
        warm_start: false,
        ..config.clone()
    };
    let cg = cgfac_update(&mut scratch, pass, &cold, &mut CgWarmStart::default())?;
    Ok((sgd, cg))
}

fn batch_order(config: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..config.n_samples).collect();
    idx.shuffle(&mut rng::stream(config.seed, 2 + epoch as u64));
    idx
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ToyModel,
    pub curve: LossCurve,
}

/// Trains and returns the loss curve.
pub fn train(config: &TrainConfig) -> Result<LossCurve> {
    train_run(config).map(|r| r.curve)
}

/// Trains and returns the final model together with the loss curve.
pub fn train_run(config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let data = synth_dataset(
        config.seed,
        config.n_tokens,
        config.vocab,
        config.classes,
        config.n_samples,
    )?;
    let mut model = ToyModel::init(config);
    let mut curve = LossCurve::default();
    let mut warm = CgWarmStart::default();
    let per_epoch = config.n_samples / config.batch_size;
    let started = Instant::now();
    let mut order = Vec::new();

    for step in 0..config.steps {
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        if slot == 0 {
            order = batch_order(config, epoch);
        }
        let batch: Vec<Sample> = order[slot * config.batch_size..(slot + 1) * config.batch_size]
            .iter()
            .map(|&i| data.samples[i].clone())
            .collect();

        let pass = forward(&model, &batch)?;
        if !pass.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "loss {} with gradient norm {}",
                    pass.loss,
                    pass.grads.norm()
                ),
            });
        }
        let loss = pass.loss;
        let grad_norm = pass.grads.norm();
        let cg_iterations = match config.optimizer {
            Optimizer::Sgd => {
                model
                    .embedding
                    .scaled_add(-config.eta, &pass.grads.embedding);
                model.head.scaled_add(-config.eta, &pass.grads.head);
                0
            }
            Optimizer::Cgfac => cgfac_update(&mut model, pass, config, &mut warm)?.cg_iterations,
        };
        if model
            .embedding
            .iter()
            .chain(model.head.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        curve.records.push(StepRecord {
            step,
            loss,
            grad_norm,
            cg_iterations,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainRun { model, curve })
}
