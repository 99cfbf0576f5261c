//! AdamW toy training on synthetic pairs and held-out evaluation.

use denviscom_tensor::{Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::{task_loss, Task};
use crate::metrics::{compute_disparity_metrics, compute_flow_metrics, Thresholds};
use crate::model::Model;
use crate::synth::{gen_flow_pair, gen_stereo_pair, BoxRegion, SyntheticSample};

/// Side of the square toy images.
pub const TOY_SIZE: usize = 112;
pub const MAX_SHIFT: i64 = 6;
pub const MAX_DISPARITY: usize = 8;

/// Seeds of held-out samples live far from any training stream.
const HELD_OUT_BASE: u64 = 0x5EED_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One decoupled-weight-decay update of `params` in place.
    pub fn step<'a>(&mut self, opt: &AdamW, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(self.t as i32);
        let bc2 = 1.0 - opt.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
                p[i] -= opt.lr * (update + opt.weight_decay * p[i]);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// The toy sample drawn from `seed` for `task`.
pub fn toy_sample(task: Task, seed: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        Task::Flow => {
            let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            gen_flow_pair(rng.random(), TOY_SIZE, TOY_SIZE, (dx, dy))
        }
        Task::Disparity => {
            let d = rng.random_range(0..=MAX_DISPARITY);
            // box sides and corners on the 8-pixel feature grid
            let cells = TOY_SIZE / 8;
            let bw = rng.random_range(4..=8);
            let bh = rng.random_range(4..=8);
            let x0 = rng.random_range(2..=cells - bw - 1);
            let y0 = rng.random_range(1..=cells - bh - 1);
            let region = BoxRegion {
                y0: 8 * y0,
                y1: 8 * (y0 + bh),
                x0: 8 * x0,
                x1: 8 * (x0 + bw),
            };
            gen_stereo_pair(rng.random(), TOY_SIZE, TOY_SIZE, d, region)
        }
    }
}

pub fn held_out_set(task: Task, count: usize) -> Result<Vec<SyntheticSample>> {
    (0..count as u64).map(|i| toy_sample(task, HELD_OUT_BASE + i)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub task: Task,
    pub config: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<Checkpoint>,
    /// Evaluate on `eval_samples` held-out pairs every this many steps.
    pub eval_every: Option<usize>,
    pub eval_samples: usize,
}

impl TrainOptions {
    pub fn new(task: Task, config: ModelConfig, steps: usize, lr: f64, batch: usize, seed: u64) -> Self {
        Self {
            task,
            config,
            steps,
            lr,
            batch,
            seed,
            init: None,
            eval_every: None,
            eval_samples: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    /// Number of optimizer steps taken before the evaluation.
    pub step: usize,
    pub epe: f64,
    pub d1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss at every step, before that step's update.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

/// Pixel-weighted metrics of `model` over `samples`.
pub fn evaluate(model: &Model, task: Task, samples: &[SyntheticSample]) -> Result<EvalPoint> {
    let th = Thresholds::default();
    let (mut err, mut outliers, mut pixels) = (0.0, 0.0, 0usize);
    for s in samples {
        let pred = model.infer(task, &s.img1, &s.img2)?;
        let r = match task {
            Task::Flow => compute_flow_metrics(&pred, &s.gt, &s.valid, &th)?,
            Task::Disparity => compute_disparity_metrics(&pred, &s.gt, &s.valid, &th)?,
        };
        err += r.epe * r.valid_pixels as f64;
        outliers += r.d1.unwrap_or(0.0) * r.valid_pixels as f64;
        pixels += r.valid_pixels;
    }
    if pixels == 0 {
        return Err(Error::Degenerate("no held-out pixels".into()));
    }
    Ok(EvalPoint {
        step: 0,
        epe: err / pixels as f64,
        d1: (task == Task::Disparity).then(|| outliers / pixels as f64),
    })
}

/// Mean loss and parameter gradients on one batch.
pub fn batch_gradients(model: &Model, task: Task, batch: &[SyntheticSample]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true);
    let mut total = None;
    for s in batch {
        let pair = model.prepare(&s.img1, &s.img2)?;
        let pred = model.forward(&p, task, &pair)?;
        let loss = task_loss(pred, &s.gt, &s.valid)?;
        total = Some(match total {
            None => loss,
            Some(t) => loss.add(t)?,
        });
    }
    let total = total
        .ok_or_else(|| Error::Contract("empty batch".into()))?
        .scale(1.0 / batch.len() as f64)?;
    let loss = total.value().item()?;
    let mut grads = tape.backward(total)?;
    let g = p
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("parameter gradient"))
        .collect();
    Ok((loss, g))
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFiniteState { .. })
}

pub fn train_toy(opts: &TrainOptions) -> Result<TrainOutcome> {
    train_toy_with(opts, |_, _| {})
}

/// Like [`train_toy`], calling `on_step(step, loss)` after each step.
pub fn train_toy_with(opts: &TrainOptions, mut on_step: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    if opts.batch == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let mut model = match &opts.init {
        Some(ckpt) => {
            ckpt.check_compatible(&opts.config)?;
            ckpt.to_model()?
        }
        None => Model::new(&opts.config, opts.seed)?,
    };
    let held_out = match opts.eval_every {
        Some(_) => held_out_set(opts.task, opts.eval_samples)?,
        None => Vec::new(),
    };
    let mut evals = Vec::new();
    let record_eval = |model: &Model, step: usize, evals: &mut Vec<EvalPoint>| -> Result<()> {
        let mut point = evaluate(model, opts.task, &held_out)?;
        point.step = step;
        evals.push(point);
        Ok(())
    };
    let opt = AdamW::new(opts.lr);
    let values: Vec<Tensor> = model.params.entries().iter().map(|e| e.value.clone()).collect();
    let mut state = AdamState::new(&values);
    let mut sampler = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7261_6E64);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        if let Some(every) = opts.eval_every {
            if step % every == 0 {
                record_eval(&model, step, &mut evals)?;
            }
        }
        let batch = (0..opts.batch)
            .map(|_| toy_sample(opts.task, sampler.random()))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grads) = match batch_gradients(&model, opts.task, &batch) {
            Ok(r) => r,
            Err(e) if is_non_finite(&e) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| g.first_non_finite().is_some()) {
            return Err(Error::Divergence { step, loss });
        }
        clip_grad_norm(&mut grads, 1.0);
        state.step(&opt, model.params.entries_mut().iter_mut().map(|e| &mut e.value), &grads);
        losses.push(loss);
        on_step(step, loss);
    }
    if opts.eval_every.is_some() {
        record_eval(&model, opts.steps, &mut evals)?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(&model, opts.task),
        losses,
        evals,
    })
}
