//! Attack networks and the reactive / proactive training protocols.
//!
//! The user's model is held as an encoder/cloud pair. A reactive adversary
//! trains its decoder after the user's models are fixed; a proactive one
//! alternates with the user in rounds of cloud, decoder and encoder phases.

pub mod pipeline;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::harness::dataset::Batch;
use crate::metrics::{self, PrivacyVariant, SsimParams};
use crate::model::{ForwardCtx, LayerKind, ModelGraph};
use crate::tensor::{Bound, DType, Tape, Tensor, Var};
use crate::train::{self, distillation_loss, step, DistillParams, TrainOpts, Trainee};
use crate::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    #[default]
    InversionMse,
    InversionSsim,
    PropertyInference,
}

impl AttackKind {
    pub fn is_inversion(self) -> bool {
        !matches!(self, AttackKind::PropertyInference)
    }

    /// Whether `variant` can be measured with this attack.
    pub fn supports(self, variant: PrivacyVariant) -> bool {
        match self {
            AttackKind::PropertyInference => variant == PrivacyVariant::P2,
            _ => variant != PrivacyVariant::P2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdversaryMode {
    #[default]
    Reactive,
    Proactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ssim: SsimParams,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::InversionMse,
            epochs: 5,
            lr: 2e-3,
            batch_size: 32,
            ssim: SsimParams::default(),
        }
    }
}

impl AttackSpec {
    fn opts(&self) -> TrainOpts {
        TrainOpts {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            ..Default::default()
        }
    }
}

/// Epoch counts and weights of both protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Reactive mode: joint encoder + cloud retraining before the attack.
    pub retrain_epochs: usize,
    pub cloud_epochs: usize,
    pub decoder_epochs: usize,
    pub encoder_epochs: usize,
    pub rounds: usize,
    pub distill: DistillParams,
    pub lr: f64,
    pub batch_size: usize,
    /// Decoder learning rate relative to `lr` during proactive rounds.
    pub decoder_lr_ratio: f64,
    /// Weight of the privacy surrogate in the encoder phase.
    pub privacy_weight: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            retrain_epochs: 2,
            cloud_epochs: 2,
            decoder_epochs: 1,
            encoder_epochs: 2,
            rounds: 20,
            distill: DistillParams::default(),
            lr: 1e-3,
            batch_size: 32,
            decoder_lr_ratio: 0.5,
            privacy_weight: 1.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.distill.alpha) || !(self.distill.temperature > 0.0) {
            bail!(
                Config,
                "distillation alpha must lie in [0, 1] and temperature must be positive"
            );
        }
        if !(self.lr > 0.0)
            || self.batch_size == 0
            || !(self.decoder_lr_ratio > 0.0)
            || self.privacy_weight < 0.0
        {
            bail!(
                Config,
                "schedule learning rates, batch size and weights must be positive"
            );
        }
        Ok(())
    }

    fn opts(&self, epochs: usize) -> TrainOpts {
        TrainOpts {
            epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            ..Default::default()
        }
    }
}

fn relu_after(layers: &mut Vec<LayerKind>, kind: LayerKind) {
    layers.push(kind);
    layers.push(LayerKind::Relu);
}

/// Mirror of `encoder`: conv becomes transposed conv, pooling becomes
/// upsampling, fc `m -> n` becomes fc `n -> m`. Ends in a sigmoid so outputs
/// live in `[0, 1]` like the inputs.
pub fn build_inverse_decoder(encoder: &ModelGraph, rng: &mut SeededRng) -> Result<ModelGraph> {
    if encoder.is_empty() {
        bail!(Structure, "an empty encoder has nothing to invert");
    }
    let shapes = encoder.shapes()?;
    let mut out: Vec<LayerKind> = Vec::new();
    for i in (0..encoder.len()).rev() {
        let (input, output) = (&shapes[i], &shapes[i + 1]);
        let unflatten = |layers: &mut Vec<LayerKind>| {
            if let [c, h, w] = input.as_slice() {
                layers.push(LayerKind::Unflatten {
                    channels: *c,
                    height: *h,
                    width: *w,
                });
            }
        };
        match encoder.layers[i].kind {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            }
            | LayerKind::DepthwiseSeparable {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            }
            | LayerKind::InvertedResidual {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                out.extend(transpose_for(
                    in_ch, out_ch, kernel, stride, padding, input, output,
                )?);
            }
            LayerKind::Fire {
                in_ch,
                out_ch,
                stride,
                ..
            } => {
                out.extend(transpose_for(in_ch, out_ch, 3, stride, 1, input, output)?);
            }
            LayerKind::Fc { .. } | LayerKind::LowRankFc { .. } | LayerKind::GapFc { .. } => {
                let n_in: usize = input.iter().product();
                relu_after(
                    &mut out,
                    LayerKind::Fc {
                        in_features: output[0],
                        out_features: n_in,
                        bias: true,
                    },
                );
                unflatten(&mut out);
            }
            LayerKind::MaxPool { stride, .. } | LayerKind::AvgPool { stride, .. } => {
                if output[1] * stride != input[1] || output[2] * stride != input[2] {
                    bail!(
                        Structure,
                        "pool at {} does not tile its input; cannot mirror",
                        i
                    );
                }
                out.push(LayerKind::Upsample { factor: stride });
            }
            LayerKind::GlobalAvgPool => {
                if input[1] != input[2] {
                    bail!(
                        Structure,
                        "global pool over a non-square map cannot be mirrored"
                    );
                }
                out.push(LayerKind::Upsample { factor: input[1] });
            }
            LayerKind::Flatten => unflatten(&mut out),
            LayerKind::Relu
            | LayerKind::BatchNorm { .. }
            | LayerKind::Dropout { .. }
            | LayerKind::Identity
            | LayerKind::ResidualAdd { .. } => {}
            ref k => bail!(Structure, "cannot mirror {} at {}", k.name(), i),
        }
    }
    while matches!(out.last(), Some(LayerKind::Relu)) {
        out.pop();
    }
    // Unflatten is shape-only; the relu belongs before it, not after.
    if let (Some(LayerKind::Unflatten { .. }), Some(LayerKind::Relu)) =
        (out.last(), out.iter().rev().nth(1))
    {
        let u = out.pop().expect("checked");
        out.pop();
        out.push(u);
    }
    out.push(LayerKind::Sigmoid);
    let name = format!("{}-decoder", encoder.name);
    let feature_shape = shapes.last().expect("non-empty").clone();
    ModelGraph::new(&name, &feature_shape, out, encoder.dtype, rng)
}

fn transpose_for(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: &[usize],
    output: &[usize],
) -> Result<Vec<LayerKind>> {
    let base = (output[1] - 1) * stride + kernel;
    let target = input[1] + 2 * padding;
    if target < base || target - base >= stride.max(1) {
        bail!(
            Structure,
            "transposed conv cannot restore extent {} from {}",
            input[1],
            output[1]
        );
    }
    let output_padding = target - base;
    Ok(vec![
        LayerKind::ConvTranspose {
            in_ch: out_ch,
            out_ch: in_ch,
            kernel,
            stride,
            padding,
            output_padding,
        },
        LayerKind::Relu,
    ])
}

/// Hidden-attribute head: global pooling + fc for spatial features, a small
/// MLP for flat ones.
pub fn build_property_classifier(
    feature_shape: &[usize],
    classes: usize,
    dtype: DType,
    rng: &mut SeededRng,
) -> Result<ModelGraph> {
    if classes < 2 {
        bail!(Config, "a property classifier needs at least 2 classes");
    }
    let layers = match feature_shape {
        [c, _, _] => vec![
            LayerKind::GlobalAvgPool,
            LayerKind::Fc {
                in_features: *c,
                out_features: classes,
                bias: true,
            },
        ],
        _ => {
            let n: usize = feature_shape.iter().product();
            vec![
                LayerKind::Fc {
                    in_features: n,
                    out_features: 32,
                    bias: true,
                },
                LayerKind::Relu,
                LayerKind::Fc {
                    in_features: 32,
                    out_features: classes,
                    bias: true,
                },
            ]
        }
    };
    ModelGraph::new("property-classifier", feature_shape, layers, dtype, rng)
}

/// The user's model held as encoder and cloud stub.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub encoder: ModelGraph,
    pub cloud: ModelGraph,
}

impl SplitModel {
    pub fn from_graph(g: &ModelGraph) -> Result<Self> {
        let (encoder, cloud) = g.partition_split()?;
        Ok(SplitModel { encoder, cloud })
    }

    pub fn compose(&self, name: &str) -> Result<ModelGraph> {
        ModelGraph::compose(&self.encoder, &self.cloud, name)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        train::predict(&self.encoder, &x.to_dtype(self.encoder.dtype))
    }

    pub fn logits_from_features(&self, f: &Tensor) -> Result<Tensor> {
        train::predict(&self.cloud, f)
    }

    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        let pred = self
            .logits_from_features(&self.features(&batch.x)?)?
            .argmax_rows()?;
        metrics::accuracy(&pred, &batch.coarse)
    }

    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .encoder
            .output_shape()
            .unwrap_or_else(|_| self.encoder.input_shape.clone()))
    }
}

/// Trained attack network with its kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Attacker {
    pub kind: AttackKind,
    /// `None` when the encoder is empty and the raw input is released.
    pub net: Option<ModelGraph>,
}

impl Attacker {
    pub fn new(
        kind: AttackKind,
        encoder: &ModelGraph,
        hidden_classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let net = match kind {
            AttackKind::PropertyInference => {
                let shape = if encoder.is_empty() {
                    encoder.input_shape.clone()
                } else {
                    encoder.output_shape()?
                };
                Some(build_property_classifier(
                    &shape,
                    hidden_classes,
                    encoder.dtype,
                    rng,
                )?)
            }
            _ if encoder.is_empty() => None,
            _ => Some(build_inverse_decoder(encoder, rng)?),
        };
        Ok(Attacker { kind, net })
    }
}

/// Attack loss of `net` on `features` against the batch's inputs or hidden labels.
fn attack_loss(
    tape: &mut Tape,
    kind: AttackKind,
    out: Var,
    batch: &Batch,
    ssim: &SsimParams,
) -> Result<Var> {
    match kind {
        AttackKind::InversionMse => tape.mse(out, &batch.x.to_dtype(tape.value(out).dtype())),
        AttackKind::InversionSsim => {
            let s = tape.ssim(out, &batch.x.to_dtype(tape.value(out).dtype()), ssim)?;
            tape.scale(s, -1.0)
        }
        AttackKind::PropertyInference => tape.cross_entropy(out, &batch.fine),
    }
}

fn check_hidden(kind: AttackKind, batch: &Batch) -> Result<()> {
    if kind == AttackKind::PropertyInference && batch.fine.len() != batch.len() {
        bail!(
            Data,
            "property inference needs a hidden label for every sample"
        );
    }
    Ok(())
}

/// Trains the attacker on `(features, batch)` pairs; `transform` is applied
/// to every feature minibatch (e.g. noise injection). Returns per-epoch mean loss.
pub fn fit_attacker(
    attacker: &mut Attacker,
    features: &Tensor,
    batch: &Batch,
    spec: &AttackSpec,
    opts: &TrainOpts,
    seed: u64,
    transform: &mut dyn FnMut(Tensor) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        bail!(Data, "empty auxiliary set");
    }
    check_hidden(attacker.kind, batch)?;
    let Some(net) = attacker.net.as_mut() else {
        return Ok(Vec::new());
    };
    let mut rng = crate::rng(seed);
    let mut opt = opts.optimizer();
    let mut curve = Vec::new();
    let mut k = 0u64;
    for _ in 0..opts.epochs {
        let mut total = 0.0;
        let batches = train::minibatches(batch.len(), opts.batch_size, &mut rng);
        for rows in &batches {
            let fb = transform(features.select_rows(rows)?)?;
            let bb = batch.select(rows)?;
            k += 1;
            let mut ts = [Trainee {
                model: &mut *net,
                opt: Some(&mut opt),
            }];
            total += step(&mut ts, seed ^ k, |tape, m, b, ctx| {
                let fv = tape.constant(fb);
                let out = m[0].forward(tape, &b[0], fv, &mut ctx[0])?;
                attack_loss(tape, spec.kind, out, &bb, &spec.ssim)
            })?;
        }
        curve.push(total / batches.len() as f64);
    }
    Ok(curve)
}

/// Privacy loss of a trained attacker on held-out `(features, batch)`.
/// `normalizer` is the blind-decoder error used by P0.
pub fn evaluate_attack(
    attacker: &Attacker,
    features: &Tensor,
    batch: &Batch,
    variant: PrivacyVariant,
    ssim: &SsimParams,
    normalizer: f64,
) -> Result<f64> {
    if !attacker.kind.supports(variant) {
        bail!(
            Config,
            "{:?} cannot measure privacy variant {}",
            attacker.kind,
            variant
        );
    }
    check_hidden(attacker.kind, batch)?;
    if attacker.kind == AttackKind::PropertyInference {
        let Some(net) = &attacker.net else {
            bail!(Structure, "property attacker has no classifier")
        };
        let pred = train::predict(net, features)?.argmax_rows()?;
        return metrics::privacy_p2(&pred, &batch.fine);
    }
    let recon = match &attacker.net {
        Some(net) => train::predict(net, features)?,
        None => features.clone(),
    };
    let recon = recon.reshape(batch.x.dims())?;
    match variant {
        PrivacyVariant::P0 => {
            metrics::privacy_p0(metrics::reconstruction_error(&batch.x, &recon)?, normalizer)
        }
        _ => metrics::privacy_p1(&batch.x, &recon, ssim),
    }
}

/// Held-out data for one session.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub train: Batch,
    pub aux: Batch,
    pub eval: Batch,
    /// Teacher logits aligned with `train`.
    pub teacher_logits: Option<Tensor>,
    pub hidden_classes: usize,
}

impl SessionData {
    /// P0 normalizer: error of predicting the aux mean image on the eval split.
    pub fn blind_error(&self) -> Result<f64> {
        let m = metrics::mean_image(&self.aux.x)?;
        let rows = vec![0; self.eval.len()];
        metrics::reconstruction_error(&self.eval.x, &m.select_rows(&rows)?)
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub model: SplitModel,
    pub attacker: Attacker,
    pub accuracy: f64,
    pub privacy: f64,
    pub attack_curve: Vec<f64>,
}

fn task_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    teacher: Option<&Tensor>,
    d: DistillParams,
) -> Result<Var> {
    match teacher {
        Some(t) => distillation_loss(tape, logits, labels, t, d),
        None => tape.cross_entropy(logits, labels),
    }
}

fn forward_split(
    tape: &mut Tape,
    m: &[&ModelGraph],
    b: &[Bound],
    ctx: &mut [ForwardCtx],
    x: Tensor,
) -> Result<(Var, Var)> {
    let xv = tape.constant(x);
    let (c0, c1) = ctx.split_at_mut(1);
    let f = m[0].forward(tape, &b[0], xv, &mut c0[0])?;
    let logits = m[1].forward(tape, &b[1], f, &mut c1[0])?;
    Ok((f, logits))
}

/// Trains encoder and/or cloud on the task for `epochs`; a side with
/// `train_* = false` stays frozen.
fn fit_task(
    model: &mut SplitModel,
    data: &SessionData,
    sched: &TrainSchedule,
    epochs: usize,
    train_encoder: bool,
    train_cloud: bool,
    seed: u64,
    opts: (&mut crate::tensor::Optimizer, &mut crate::tensor::Optimizer),
) -> Result<()> {
    let mut rng = crate::rng(seed);
    let (enc_opt, cloud_opt) = opts;
    let mut k = 0u64;
    for _ in 0..epochs {
        for rows in train::minibatches(data.train.len(), sched.batch_size, &mut rng) {
            let bb = data.train.select(&rows)?;
            let tb = data
                .teacher_logits
                .as_ref()
                .map(|t| t.select_rows(&rows))
                .transpose()?;
            k += 1;
            let mut ts = [
                Trainee {
                    model: &mut model.encoder,
                    opt: train_encoder.then_some(&mut *enc_opt),
                },
                Trainee {
                    model: &mut model.cloud,
                    opt: train_cloud.then_some(&mut *cloud_opt),
                },
            ];
            let dt = ts[0].model.dtype;
            step(&mut ts, seed ^ k.wrapping_mul(7919), |tape, m, b, ctx| {
                let (_, logits) = forward_split(tape, m, b, ctx, bb.x.to_dtype(dt))?;
                task_loss(tape, logits, &bb.coarse, tb.as_ref(), sched.distill)
            })?;
        }
    }
    Ok(())
}

/// Encoder phase of a proactive round: task loss plus the weighted privacy
/// surrogate, with cloud and attacker frozen.
fn fit_encoder_private(
    model: &mut SplitModel,
    attacker: &mut Attacker,
    data: &SessionData,
    sched: &TrainSchedule,
    spec: &AttackSpec,
    seed: u64,
    enc_opt: &mut crate::tensor::Optimizer,
) -> Result<()> {
    let mut rng = crate::rng(seed);
    let mut k = 0u64;
    let lambda = sched.privacy_weight;
    for _ in 0..sched.encoder_epochs {
        for rows in train::minibatches(data.train.len(), sched.batch_size, &mut rng) {
            let bb = data.train.select(&rows)?;
            let tb = data
                .teacher_logits
                .as_ref()
                .map(|t| t.select_rows(&rows))
                .transpose()?;
            k += 1;
            let dt = model.encoder.dtype;
            let mut ts = vec![
                Trainee {
                    model: &mut model.encoder,
                    opt: Some(&mut *enc_opt),
                },
                Trainee {
                    model: &mut model.cloud,
                    opt: None,
                },
            ];
            if let Some(net) = attacker.net.as_mut().filter(|_| lambda > 0.0) {
                ts.push(Trainee {
                    model: net,
                    opt: None,
                });
            }
            step(
                &mut ts,
                seed ^ k.wrapping_mul(104_729),
                |tape, m, b, ctx| {
                    let (f, logits) = forward_split(tape, m, b, ctx, bb.x.to_dtype(dt))?;
                    let task = task_loss(tape, logits, &bb.coarse, tb.as_ref(), sched.distill)?;
                    if m.len() < 3 {
                        return Ok(task);
                    }
                    let out = m[2].forward(tape, &b[2], f, &mut ctx[2])?;
                    let surrogate = match spec.kind {
                        AttackKind::InversionMse => {
                            let l = tape.mse(out, &bb.x.to_dtype(dt))?;
                            tape.scale(l, -lambda)?
                        }
                        AttackKind::InversionSsim => {
                            let s = tape.ssim(out, &bb.x.to_dtype(dt), &spec.ssim)?;
                            tape.scale(s, lambda)?
                        }
                        AttackKind::PropertyInference => {
                            let l = tape.cross_entropy(out, &bb.fine)?;
                            tape.scale(l, -lambda)?
                        }
                    };
                    tape.add(task, surrogate)
                },
            )?;
        }
    }
    Ok(())
}

fn attack_and_measure(
    model: &SplitModel,
    attacker: &mut Attacker,
    data: &SessionData,
    spec: &AttackSpec,
    opts: &TrainOpts,
    variant: PrivacyVariant,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let aux_f = model.features(&data.aux.x)?;
    let curve = fit_attacker(attacker, &aux_f, &data.aux, spec, opts, seed, &mut Ok)?;
    let eval_f = model.features(&data.eval.x)?;
    let p = evaluate_attack(
        attacker,
        &eval_f,
        &data.eval,
        variant,
        &spec.ssim,
        data.blind_error()?,
    )?;
    Ok((p, curve))
}

/// Reactive protocol: retrain encoder and cloud for the task, freeze them,
/// then train the attacker on auxiliary features and measure on eval.
pub fn train_reactive(
    mut model: SplitModel,
    data: &SessionData,
    spec: &AttackSpec,
    sched: &TrainSchedule,
    variant: PrivacyVariant,
    seed: u64,
) -> Result<SessionOutcome> {
    sched.validate()?;
    if data.aux.is_empty() {
        bail!(Data, "empty auxiliary set");
    }
    let mut enc_opt = sched.opts(0).optimizer();
    let mut cloud_opt = sched.opts(0).optimizer();
    fit_task(
        &mut model,
        data,
        sched,
        sched.retrain_epochs,
        true,
        true,
        seed,
        (&mut enc_opt, &mut cloud_opt),
    )?;
    let mut attacker = Attacker::new(
        spec.kind,
        &model.encoder,
        data.hidden_classes,
        &mut crate::rng(seed ^ 0xDEC0),
    )?;
    let (privacy, attack_curve) = attack_and_measure(
        &model,
        &mut attacker,
        data,
        spec,
        &spec.opts(),
        variant,
        seed ^ 0xA77A,
    )?;
    let accuracy = model.accuracy(&data.eval)?;
    Ok(SessionOutcome {
        model,
        attacker,
        accuracy,
        privacy,
        attack_curve,
    })
}

/// Proactive protocol: `rounds` of cloud, decoder and encoder phases with a
/// persistent attacker, then a final attacker phase and measurement.
pub fn train_proactive(
    mut model: SplitModel,
    data: &SessionData,
    spec: &AttackSpec,
    sched: &TrainSchedule,
    variant: PrivacyVariant,
    seed: u64,
) -> Result<SessionOutcome> {
    sched.validate()?;
    if data.aux.is_empty() {
        bail!(Data, "empty auxiliary set");
    }
    let mut attacker = Attacker::new(
        spec.kind,
        &model.encoder,
        data.hidden_classes,
        &mut crate::rng(seed ^ 0xDEC0),
    )?;
    let mut enc_opt = sched.opts(0).optimizer();
    let mut cloud_opt = sched.opts(0).optimizer();
    let dec_opts = TrainOpts {
        epochs: sched.decoder_epochs,
        lr: sched.lr * sched.decoder_lr_ratio,
        batch_size: sched.batch_size,
        ..Default::default()
    };
    for round in 0..sched.rounds {
        let rs = seed ^ (round as u64 + 1).wrapping_mul(0x9E37_79B9);
        if !model.cloud.params.is_empty() && sched.cloud_epochs > 0 {
            fit_task(
                &mut model,
                data,
                sched,
                sched.cloud_epochs,
                false,
                true,
                rs,
                (&mut enc_opt, &mut cloud_opt),
            )?;
        }
        if sched.decoder_epochs > 0 {
            let aux_f = model.features(&data.aux.x)?;
            fit_attacker(
                &mut attacker,
                &aux_f,
                &data.aux,
                spec,
                &dec_opts,
                rs ^ 1,
                &mut Ok,
            )?;
        }
        if !model.encoder.params.is_empty() && sched.encoder_epochs > 0 {
            fit_encoder_private(
                &mut model,
                &mut attacker,
                data,
                sched,
                spec,
                rs ^ 2,
                &mut enc_opt,
            )?;
        }
    }
    let (privacy, attack_curve) = attack_and_measure(
        &model,
        &mut attacker,
        data,
        spec,
        &spec.opts(),
        variant,
        seed ^ 0xA77A,
    )?;
    let accuracy = model.accuracy(&data.eval)?;
    Ok(SessionOutcome {
        model,
        attacker,
        accuracy,
        privacy,
        attack_curve,
    })
}
