//! Minibatch training loops shared by base training, candidate retraining and attacks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{ForwardCtx, ModelGraph};
use crate::tensor::{Bound, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainOpts {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            bail!(Config, "batch size and learning rate must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.lr)
    }
}

/// Soft-label settings: `alpha` weighs the hard-label term, `temperature` softens both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillParams {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for DistillParams {
    fn default() -> Self {
        DistillParams {
            alpha: 0.5,
            temperature: 4.0,
        }
    }
}

/// `alpha * CE(student, hard) + (1 - alpha) * T^2 * KL(softmax(teacher / T) || softmax(student / T))`.
pub fn distillation_loss(
    tape: &mut Tape,
    student: Var,
    hard: &[usize],
    teacher: &Tensor,
    p: DistillParams,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&p.alpha) || !(p.temperature > 0.0) {
        bail!(
            Config,
            "distillation needs alpha in [0, 1] and a positive temperature"
        );
    }
    let ce = tape.cross_entropy(student, hard)?;
    if p.alpha == 1.0 {
        return Ok(ce);
    }
    let t = p.temperature;
    let soft_student = tape.scale(student, 1.0 / t)?;
    let soft_teacher = Tensor::with_dtype(
        teacher.dims(),
        teacher.data().iter().map(|v| v / t).collect(),
        teacher.dtype(),
    )?;
    let kl = tape.kl_div_logits(soft_student, &soft_teacher)?;
    let kl = tape.scale(kl, (1.0 - p.alpha) * t * t)?;
    let ce = tape.scale(ce, p.alpha)?;
    tape.add(ce, kl)
}

/// One participant in a training step; `opt = None` freezes it.
pub struct Trainee<'a> {
    pub model: &'a mut ModelGraph,
    pub opt: Option<&'a mut Optimizer>,
}

/// Runs one forward/backward/update. `f` receives the models, one binding and
/// one forward context per trainee; frozen trainees run in eval mode.
pub fn step(
    trainees: &mut [Trainee<'_>],
    seed: u64,
    f: impl FnOnce(&mut Tape, &[&ModelGraph], &[Bound], &mut [ForwardCtx]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bounds: Vec<Bound> = trainees
        .iter()
        .map(|t| t.model.params.bind(&mut tape, t.opt.is_some()))
        .collect();
    let mut ctxs: Vec<ForwardCtx> = trainees
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.opt.is_some() {
                ForwardCtx::train(seed.wrapping_add(i as u64))
            } else {
                ForwardCtx::eval()
            }
        })
        .collect();
    let views: Vec<&ModelGraph> = trainees.iter().map(|t| &*t.model).collect();
    let loss = f(&mut tape, &views, &bounds, &mut ctxs)?;
    drop(views);
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    for ((t, b), ctx) in trainees.iter_mut().zip(&bounds).zip(&ctxs) {
        let Some(opt) = t.opt.as_deref_mut() else {
            continue;
        };
        t.model.params.absorb(b, &grads);
        t.model.params.fill_missing_grads();
        opt.step(&mut t.model.params)?;
        t.model.update_running_stats(&ctx.bn_stats)?;
    }
    Ok(value)
}

/// Shuffled minibatch index lists covering `0..n`.
pub fn minibatches(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Batched inference over layers `range`.
pub fn predict_range(
    model: &ModelGraph,
    x: &Tensor,
    range: std::ops::Range<usize>,
) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let n = x.dims()[0];
    if n <= CHUNK {
        return model.predict_range(x, range);
    }
    let mut parts = Vec::new();
    let mut dims = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let y = model.predict_range(&x.narrow_rows(start, len)?, range.clone())?;
        dims = y.dims().to_vec();
        parts.extend_from_slice(y.data());
    }
    dims[0] = n;
    Tensor::with_dtype(&dims, parts, model.dtype)
}

pub fn predict(model: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    predict_range(model, x, 0..model.len())
}

pub fn accuracy_of(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predict(model, x)?.argmax_rows()?;
    crate::metrics::accuracy(&pred, labels)
}

/// Trains every layer of `model` on `(x, y)` with cross-entropy or, given
/// teacher logits aligned with `x`, the distillation loss. Returns the mean
/// loss of each epoch.
pub fn fit_classifier(
    model: &mut ModelGraph,
    x: &Tensor,
    y: &[usize],
    teacher: Option<(&Tensor, DistillParams)>,
    opts: &TrainOpts,
    seed: u64,
) -> Result<Vec<f64>> {
    opts.validate()?;
    if x.dims()[0] != y.len() || y.is_empty() {
        bail!(Data, "{} samples for {} labels", x.dims()[0], y.len());
    }
    let mut rng = crate::rng(seed);
    let mut opt = opts.optimizer();
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut k = 0u64;
    for _ in 0..opts.epochs {
        let mut total = 0.0;
        let batches = minibatches(y.len(), opts.batch_size, &mut rng);
        for rows in &batches {
            let xb = x.select_rows(rows)?.to_dtype(model.dtype);
            let yb: Vec<usize> = rows.iter().map(|r| y[*r]).collect();
            let tb = match teacher {
                Some((t, _)) => Some(t.select_rows(rows)?),
                None => None,
            };
            k += 1;
            let mut ts = [Trainee {
                model: &mut *model,
                opt: Some(&mut opt),
            }];
            total += step(
                &mut ts,
                seed.wrapping_mul(31).wrapping_add(k),
                |tape, m, b, ctx| {
                    let xv = tape.constant(xb);
                    let logits = m[0].forward(tape, &b[0], xv, &mut ctx[0])?;
                    match (teacher, &tb) {
                        (Some((_, p)), Some(tb)) => distillation_loss(tape, logits, &yb, tb, p),
                        _ => tape.cross_entropy(logits, &yb),
                    }
                },
            )?;
        }
        curve.push(total / batches.len() as f64);
    }
    Ok(curve)
}
