use std::ops::Range;

use rand::SeedableRng;

use super::layer::{InplaceKind, LayerKind, LayerSpec, ParamRole};
use crate::error::{bail, Result};
use crate::tensor::tape::BatchStats;
use crate::tensor::{Bound, DType, ParamStore, Tape, Tensor, Var};
use crate::SeededRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A flat layer sequence with a partition point and its parameters.
///
/// Layers `[0, partition)` run on the device (the encoder); the rest run in
/// the cloud. Parameter names are `l<index>.<suffix>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    /// Per-sample input shape, e.g. `[1, 16, 16]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: ParamStore,
    pub partition: usize,
    pub dtype: DType,
}

/// Per-call forward state: train/eval mode, dropout randomness and the batch
/// statistics collected from training-mode batchnorm layers.
pub struct ForwardCtx {
    pub train: bool,
    rng: SeededRng,
    pub bn_stats: Vec<(usize, BatchStats)>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: SeededRng::seed_from_u64(0),
            bn_stats: Vec::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: SeededRng::seed_from_u64(seed),
            bn_stats: Vec::new(),
        }
    }
}

pub fn param_name(index: usize, suffix: &str) -> String {
    format!("l{}.{}", index, suffix)
}

pub fn layer_prefix(index: usize) -> String {
    format!("l{}.", index)
}

impl ModelGraph {
    /// Builds a graph from layer kinds, checking shapes and initializing parameters.
    pub fn new(
        name: &str,
        input_shape: &[usize],
        kinds: Vec<LayerKind>,
        dtype: DType,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if kinds.is_empty() {
            bail!(Config, "model {:?} has no layers", name);
        }
        let layers = kinds
            .into_iter()
            .enumerate()
            .map(|(index, kind)| LayerSpec {
                index,
                kind,
                attached_inplace: Vec::new(),
                technique: None,
            })
            .collect();
        let mut g = ModelGraph {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
            params: ParamStore::new(),
            partition: 0,
            dtype,
        };
        g.refresh_metadata();
        g.shapes()?;
        for i in 0..g.layers.len() {
            g.init_layer_params(i, rng)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Re-derives dense indices and the in-place ops attached to each layer.
    pub fn refresh_metadata(&mut self) {
        let n = self.layers.len();
        for i in 0..n {
            self.layers[i].index = i;
            let mut attached = Vec::new();
            if self.layers[i].kind.inplace().is_none() {
                let mut j = i + 1;
                while let Some(k) = self.layers.get(j).and_then(|l| l.kind.inplace()) {
                    attached.push(k);
                    j += 1;
                }
            }
            self.layers[i].attached_inplace = attached;
        }
    }

    /// (Re)creates the parameters of layer `index` with fresh initial values.
    pub fn init_layer_params(&mut self, index: usize, rng: &mut SeededRng) -> Result<()> {
        self.params.remove_prefix(&layer_prefix(index));
        let kind = self.layers[index].kind.clone();
        for spec in kind.param_specs() {
            let name = param_name(index, spec.suffix);
            let t = match spec.role {
                ParamRole::Weight { fan_in } => {
                    Tensor::he_uniform(&spec.dims, fan_in, self.dtype, rng)
                }
                ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => {
                    Tensor::zeros(&spec.dims, self.dtype)
                }
                ParamRole::Gamma | ParamRole::RunningVar => {
                    Tensor::full(&spec.dims, 1.0, self.dtype)
                }
            };
            if spec.role.trainable() {
                self.params.insert(&name, t)?;
            } else {
                self.params.insert_buffer(&name, t)?;
            }
        }
        Ok(())
    }

    /// Activation shapes: entry `i` enters layer `i`; the last entry is the output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut entering = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer
                .kind
                .output_shape(&entering[i], &entering)
                .map_err(|e| {
                    crate::Error::Config(format!("layer {} ({}): {}", i, layer.kind.name(), e))
                })?;
            entering.push(out);
        }
        Ok(entering)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("input shape always present"))
    }

    /// Shape of the features released at the partition point.
    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?[self.partition].clone())
    }

    /// Checks shapes, parameter presence/dimensions, partition range and index density.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            bail!(Config, "model {:?} has no layers", self.name);
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i {
                bail!(
                    Config,
                    "layer indices must be dense from 0; found {} at {}",
                    l.index,
                    i
                );
            }
            for spec in l.kind.param_specs() {
                let name = param_name(i, spec.suffix);
                match self.params.get(&name) {
                    Some(p) if p.value.dims() == spec.dims.as_slice() => {}
                    Some(p) => bail!(
                        Config,
                        "parameter {} has dims {:?}, expected {:?}",
                        name,
                        p.value.dims(),
                        spec.dims
                    ),
                    None => bail!(Config, "missing parameter {}", name),
                }
            }
        }
        if self.partition > self.layers.len() {
            bail!(
                Config,
                "partition {} exceeds {} layers",
                self.partition,
                self.layers.len()
            );
        }
        self.shapes()?;
        Ok(())
    }

    /// Residual links as (source position, consuming layer) pairs.
    pub fn links(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::ResidualAdd { from } => Some((from, l.index)),
                _ => None,
            })
            .collect()
    }

    /// A partition is valid unless it cuts inside a residual span, which would
    /// require shipping two tensors.
    pub fn is_valid_partition(&self, p: usize) -> bool {
        p <= self.layers.len()
            && self
                .links()
                .iter()
                .all(|&(from, to)| !(from < p && p <= to))
    }

    /// Partition positions that do not separate a layer from its in-place ops.
    pub fn unit_boundaries(&self) -> Vec<usize> {
        (0..=self.layers.len())
            .filter(|&p| {
                self.is_valid_partition(p)
                    && (p == 0
                        || p == self.layers.len()
                        || self.layers[p].kind.inplace().is_none()
                            && !matches!(self.layers[p].kind, LayerKind::Flatten))
            })
            .collect()
    }

    fn layer_param_count(&self, index: usize) -> usize {
        let prefix = layer_prefix(index);
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.effective_len())
            .sum()
    }

    /// Stored parameter count over a layer span: weights, biases, batchnorm
    /// affine and running statistics. Masked (pruned) entries are excluded.
    pub fn count_params(&self, range: Range<usize>) -> usize {
        range
            .filter(|i| *i < self.layers.len())
            .map(|i| self.layer_param_count(i))
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.count_params(0..self.layers.len())
    }

    /// Per-sample MACs over a layer span.
    pub fn count_macs(&self, range: Range<usize>) -> Result<u64> {
        let shapes = self.shapes()?;
        Ok(range
            .filter(|i| *i < self.layers.len())
            .map(|i| self.layers[i].kind.macs(&shapes[i], &shapes[i + 1]))
            .sum())
    }

    pub fn total_macs(&self) -> Result<u64> {
        self.count_macs(0..self.layers.len())
    }

    /// `(S1, S2)`: the fractions of parameters and MACs kept off the device.
    pub fn perf_indicators(&self) -> Result<(f64, f64)> {
        let total_p = self.total_params();
        let total_m = self.total_macs()?;
        if total_p == 0 || total_m == 0 {
            bail!(
                Degenerate,
                "model {:?} has {} parameters and {} MACs",
                self.name,
                total_p,
                total_m
            );
        }
        let s1 = 1.0 - self.count_params(0..self.partition) as f64 / total_p as f64;
        let s2 = 1.0 - self.count_macs(0..self.partition)? as f64 / total_m as f64;
        Ok((s1, s2))
    }

    /// Layers `[start, end)` as a standalone graph with indices rebased to 0.
    pub fn slice(&self, range: Range<usize>) -> Result<ModelGraph> {
        let (start, end) = (range.start, range.end.min(self.layers.len()));
        let shapes = self.shapes()?;
        let mut layers = Vec::with_capacity(end.saturating_sub(start));
        let mut params = ParamStore::new();
        for i in start..end {
            let mut spec = self.layers[i].clone();
            if let LayerKind::ResidualAdd { from } = spec.kind {
                if from < start {
                    bail!(
                        Structure,
                        "residual source {} falls outside slice {}..{}",
                        from,
                        start,
                        end
                    );
                }
                spec.kind = LayerKind::ResidualAdd { from: from - start };
            }
            let prefix = layer_prefix(i);
            for p in self.params.iter().filter(|p| p.name.starts_with(&prefix)) {
                let new_name = format!("{}{}", layer_prefix(i - start), &p.name[prefix.len()..]);
                if p.trainable {
                    params.insert(&new_name, p.value.clone())?;
                } else {
                    params.insert_buffer(&new_name, p.value.clone())?;
                }
                if let Some(m) = &p.mask {
                    params.set_mask(&new_name, m.clone())?;
                }
            }
            layers.push(spec);
        }
        let mut g = ModelGraph {
            name: self.name.clone(),
            input_shape: shapes[start].clone(),
            layers,
            params,
            partition: 0,
            dtype: self.dtype,
        };
        g.refresh_metadata();
        Ok(g)
    }

    /// Splits at the partition into `(encoder, cloud)`. Either side may be empty,
    /// in which case it acts as the identity.
    pub fn partition_split(&self) -> Result<(ModelGraph, ModelGraph)> {
        if !self.is_valid_partition(self.partition) {
            bail!(
                Structure,
                "partition {} cuts a residual link",
                self.partition
            );
        }
        let mut enc = self.slice(0..self.partition)?;
        enc.partition = enc.layers.len();
        enc.name = format!("{}-encoder", self.name);
        let mut cloud = self.slice(self.partition..self.layers.len())?;
        cloud.partition = 0;
        cloud.name = format!("{}-cloud", self.name);
        Ok((enc, cloud))
    }

    /// Joins an encoder and a cloud stub back into one graph partitioned
    /// between them.
    pub fn compose(encoder: &ModelGraph, cloud: &ModelGraph, name: &str) -> Result<ModelGraph> {
        let enc_shapes = encoder.shapes()?;
        if enc_shapes.last() != Some(&cloud.input_shape) {
            bail!(
                Structure,
                "encoder output {:?} does not feed cloud input {:?}",
                enc_shapes.last(),
                cloud.input_shape
            );
        }
        let p = encoder.layers.len();
        let mut layers = encoder.layers.clone();
        let mut params = encoder.params.clone();
        for l in &cloud.layers {
            let mut spec = l.clone();
            spec.index += p;
            if let LayerKind::ResidualAdd { from } = spec.kind {
                spec.kind = LayerKind::ResidualAdd { from: from + p };
            }
            let prefix = layer_prefix(l.index);
            for q in cloud.params.iter().filter(|q| q.name.starts_with(&prefix)) {
                let new_name = format!("{}{}", layer_prefix(l.index + p), &q.name[prefix.len()..]);
                if q.trainable {
                    params.insert(&new_name, q.value.clone())?;
                } else {
                    params.insert_buffer(&new_name, q.value.clone())?;
                }
                if let Some(m) = &q.mask {
                    params.set_mask(&new_name, m.clone())?;
                }
            }
            layers.push(spec);
        }
        let mut g = ModelGraph {
            name: name.to_string(),
            input_shape: encoder.input_shape.clone(),
            layers,
            params,
            partition: p,
            dtype: encoder.dtype.promote(cloud.dtype),
        };
        g.refresh_metadata();
        g.shapes()?;
        Ok(g)
    }

    /// Runs layers in `range` starting from `x`, which must be the activation
    /// entering `range.start`.
    pub fn forward_range(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        range: Range<usize>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let end = range.end.min(self.layers.len());
        let mut entering: Vec<Option<Var>> = vec![None; self.layers.len() + 1];
        let mut cur = x;
        for i in range.start..end {
            entering[i] = Some(cur);
            cur = self.layer_forward(i, tape, bound, cur, &entering, ctx)?;
        }
        Ok(cur)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.forward_range(tape, bound, x, 0..self.layers.len(), ctx)
    }

    fn layer_forward(
        &self,
        i: usize,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        entering: &[Option<Var>],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let p = |s: &str| bound.var(&param_name(i, s));
        let opt = |s: &str| bound.opt_var(&param_name(i, s));
        match self.layers[i].kind {
            LayerKind::Conv {
                stride,
                padding,
                groups,
                ..
            } => tape.conv2d(x, p("weight")?, opt("bias"), stride, padding, groups),
            LayerKind::Fc { .. } => {
                let x = flat(tape, x)?;
                tape.linear(x, p("weight")?, opt("bias"))
            }
            LayerKind::Relu => tape.relu(x),
            LayerKind::MaxPool { k, stride } => tape.max_pool2d(x, k, stride),
            LayerKind::AvgPool { k, stride } => tape.avg_pool2d(x, k, stride),
            LayerKind::GlobalAvgPool => tape.global_avg_pool(x),
            LayerKind::BatchNorm { .. } => {
                let (gamma, beta) = (p("gamma")?, p("beta")?);
                if ctx.train {
                    let (y, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                    ctx.bn_stats.push((i, stats));
                    Ok(y)
                } else {
                    let mean = self
                        .params
                        .tensor(&param_name(i, "running_mean"))?
                        .data()
                        .to_vec();
                    let var = self
                        .params
                        .tensor(&param_name(i, "running_var"))?
                        .data()
                        .to_vec();
                    tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
                }
            }
            LayerKind::Dropout { rate } => {
                if ctx.train {
                    tape.dropout(x, rate, &mut ctx.rng)
                } else {
                    Ok(x)
                }
            }
            LayerKind::Flatten => tape.flatten(x),
            LayerKind::ResidualAdd { from } => match entering.get(from).copied().flatten() {
                Some(skip) => tape.add(x, skip),
                None => bail!(
                    Structure,
                    "residual source {} not available at layer {}",
                    from,
                    i
                ),
            },
            LayerKind::Identity => Ok(x),
            LayerKind::LowRankFc { .. } => {
                let x = flat(tape, x)?;
                let h = tape.linear(x, p("in.weight")?, None)?;
                tape.linear(h, p("out.weight")?, Some(p("out.bias")?))
            }
            LayerKind::GapFc { channels, .. } => {
                let d = tape.dims(x).to_vec();
                let n = d[0];
                let rest: usize = d[1..].iter().product();
                let spatial = tape.reshape(x, &[n, channels, rest / channels, 1])?;
                let pooled = tape.global_avg_pool(spatial)?;
                let pooled = tape.reshape(pooled, &[n, channels])?;
                tape.linear(pooled, p("weight")?, Some(p("bias")?))
            }
            LayerKind::DepthwiseSeparable {
                in_ch,
                stride,
                padding,
                ..
            } => {
                let h = tape.conv2d(x, p("dw.weight")?, None, stride, padding, in_ch)?;
                let h = tape.relu(h)?;
                tape.conv2d(h, p("pw.weight")?, Some(p("pw.bias")?), 1, 0, 1)
            }
            LayerKind::InvertedResidual {
                in_ch,
                stride,
                padding,
                expansion,
                skip,
                ..
            } => {
                let h = tape.conv2d(x, p("expand.weight")?, None, 1, 0, 1)?;
                let h = tape.relu(h)?;
                let h =
                    tape.conv2d(h, p("dw.weight")?, None, stride, padding, in_ch * expansion)?;
                let h = tape.relu(h)?;
                let y = tape.conv2d(h, p("project.weight")?, Some(p("project.bias")?), 1, 0, 1)?;
                if skip {
                    tape.add(y, x)
                } else {
                    Ok(y)
                }
            }
            LayerKind::Fire { stride, .. } => {
                let s = tape.conv2d(x, p("squeeze.weight")?, None, 1, 0, 1)?;
                let s = tape.relu(s)?;
                let e1 = tape.conv2d(s, p("e1.weight")?, Some(p("e1.bias")?), stride, 0, 1)?;
                let e3 = tape.conv2d(s, p("e3.weight")?, Some(p("e3.bias")?), stride, 1, 1)?;
                tape.concat(&[e1, e3], 1)
            }
            LayerKind::ConvTranspose {
                stride,
                padding,
                output_padding,
                ..
            } => tape.conv_transpose2d(
                x,
                p("weight")?,
                Some(p("bias")?),
                stride,
                padding,
                output_padding,
            ),
            LayerKind::Upsample { factor } => tape.upsample_nearest(x, factor),
            LayerKind::Unflatten {
                channels,
                height,
                width,
            } => {
                let n = tape.dims(x)[0];
                tape.reshape(x, &[n, channels, height, width])
            }
            LayerKind::Sigmoid => tape.sigmoid(x),
        }
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        for (i, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = param_name(*i, suffix);
                let Some(p) = self.params.get_mut(&name) else {
                    bail!(Structure, "missing buffer {}", name)
                };
                for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                p.value.round_in_place();
            }
        }
        Ok(())
    }

    /// Inference over a batch `[N, ...input_shape]` with no gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_range(x, 0..self.layers.len())
    }

    pub fn predict_range(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.to_dtype(self.dtype));
        let y = self.forward_range(&mut tape, &bound, xv, range, &mut ForwardCtx::eval())?;
        Ok(tape.value(y).clone())
    }

    /// Layer indices that carry a compression technique.
    pub fn compressible_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_compressible())
            .map(|l| l.index)
            .collect()
    }

    pub fn has_inplace(&self, index: usize, kind: InplaceKind) -> bool {
        self.layers
            .get(index)
            .is_some_and(|l| l.attached_inplace.contains(&kind))
    }
}

fn flat(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.dims(x).len() == 2 {
        Ok(x)
    } else {
        tape.flatten(x)
    }
}

/// `1 - params(compressed) / params(base)`.
pub fn compression_ratio(base: &ModelGraph, compressed: &ModelGraph) -> Result<f64> {
    let b = base.total_params();
    if b == 0 {
        bail!(Degenerate, "base model has no parameters");
    }
    if base.output_shape()? != compressed.output_shape()? {
        bail!(Structure, "models have different task heads");
    }
    Ok(1.0 - compressed.total_params() as f64 / b as f64)
}
