//! Structural compression rewrites applied to encoder-side layers.
//!
//! Each rewrite keeps the flat index of the layer it replaces. Removed layers
//! become `Identity`, so strategy indices keep their meaning.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{layer_prefix, param_name, LayerKind, ModelGraph, Strategy, TechniqueId};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Tunable knobs for the rewrites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knobs {
    /// Fixed factor rank; `None` uses `max(1, min(m, n) / 4)`.
    pub rank: Option<usize>,
    pub sparsity: f64,
    pub expansion: usize,
    /// Fixed squeeze width; `None` uses `max(1, Cin / 4)`.
    pub squeeze: Option<usize>,
    pub prune_fraction: f64,
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            rank: None,
            sparsity: 0.5,
            expansion: 2,
            squeeze: None,
            prune_fraction: 0.5,
        }
    }
}

impl Knobs {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            bail!(Config, "sparsity must lie in [0, 1), got {}", self.sparsity);
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            bail!(
                Config,
                "prune fraction must lie in [0, 1), got {}",
                self.prune_fraction
            );
        }
        if self.expansion == 0 || self.rank == Some(0) || self.squeeze == Some(0) {
            bail!(Config, "expansion, rank and squeeze must be positive");
        }
        Ok(())
    }

    pub fn rank_for(&self, m: usize, n: usize) -> usize {
        self.rank.unwrap_or_else(|| (m.min(n) / 4).max(1))
    }

    pub fn squeeze_for(&self, cin: usize) -> usize {
        self.squeeze.unwrap_or_else(|| (cin / 4).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteReport {
    pub technique: TechniqueId,
    pub index: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub notes: String,
}

fn tech_layer<'a>(g: &'a ModelGraph, idx: usize, tech: TechniqueId) -> Result<&'a LayerKind> {
    let Some(l) = g.layers.get(idx) else {
        bail!(Structure, "layer {} out of range", idx)
    };
    if !tech.applies_to_kind(&l.kind) {
        bail!(
            Structure,
            "{} does not apply to layer {} ({})",
            tech,
            idx,
            l.kind.name()
        );
    }
    Ok(&l.kind)
}

fn set_value(g: &mut ModelGraph, name: &str, t: Tensor) -> Result<()> {
    let Some(p) = g.params.get_mut(name) else {
        bail!(Structure, "missing parameter {}", name)
    };
    if p.value.dims() != t.dims() {
        bail!(
            Dimension,
            "{} expects {:?}, got {:?}",
            name,
            p.value.dims(),
            t.dims()
        );
    }
    p.value = t.to_dtype(p.value.dtype());
    p.mask = None;
    Ok(())
}

fn replace(
    g: &mut ModelGraph,
    idx: usize,
    kind: LayerKind,
    tech: TechniqueId,
    rng: &mut SeededRng,
) -> Result<()> {
    g.layers[idx].kind = kind;
    g.layers[idx].technique = Some(tech);
    g.init_layer_params(idx, rng)
}

fn finish(g: &mut ModelGraph) -> Result<()> {
    g.refresh_metadata();
    g.validate()
}

fn report(
    before: usize,
    g: &ModelGraph,
    tech: TechniqueId,
    idx: usize,
    notes: String,
) -> RewriteReport {
    RewriteReport {
        technique: tech,
        index: idx,
        params_before: before,
        params_after: g.total_params(),
        notes,
    }
}

/// Keep-mask that zeroes the `floor(p * n)` smallest-magnitude entries.
/// Ties keep the later entry.
pub fn magnitude_mask(values: &[f64], p: f64) -> Vec<bool> {
    let drop = (p * values.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].abs().total_cmp(&values[*b].abs()).then(a.cmp(b)));
    let mut keep = vec![true; values.len()];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    keep
}

/// Selects entries `keep` along `axis`.
fn gather_axis(t: &Tensor, axis: usize, keep: &[usize]) -> Result<Tensor> {
    let d = t.dims();
    let outer: usize = d[..axis].iter().product();
    let extent = d[axis];
    let inner: usize = d[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let at = (o * extent + k) * inner;
            data.extend_from_slice(&t.data()[at..at + inner]);
        }
    }
    let mut dims = d.to_vec();
    dims[axis] = keep.len();
    Tensor::with_dtype(&dims, data, t.dtype())
}

fn fc_weight(g: &ModelGraph, idx: usize) -> Result<(usize, usize, Tensor, Option<Tensor>)> {
    match g.layers[idx].kind {
        LayerKind::Fc {
            in_features,
            out_features,
            ..
        } => {
            let w = g.params.tensor(&param_name(idx, "weight"))?.clone();
            let b = g
                .params
                .get(&param_name(idx, "bias"))
                .map(|p| p.value.clone());
            Ok((out_features, in_features, w, b))
        }
        _ => bail!(Structure, "layer {} is not fc", idx),
    }
}

/// Truncated SVD factors `(U_k sqrt(S_k), sqrt(S_k) V_k^T)` of a row-major `m x n` matrix.
pub fn svd_factors(w: &[f64], m: usize, n: usize, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = m.min(n);
    if k == 0 || k > r {
        bail!(Config, "rank {} out of range 1..={}", k, r);
    }
    let svd = DMatrix::from_row_slice(m, n, w).svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        bail!(Numeric, "SVD did not converge")
    };
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let mut left = vec![0.0; m * k];
    let mut right = vec![0.0; k * n];
    for (j, &s) in order.iter().take(k).enumerate() {
        let root = svd.singular_values[s].max(0.0).sqrt();
        for i in 0..m {
            left[i * k + j] = u[(i, s)] * root;
        }
        for c in 0..n {
            right[j * n + c] = vt[(s, c)] * root;
        }
    }
    Ok((left, right))
}

fn low_rank(
    g: &ModelGraph,
    idx: usize,
    k: usize,
    sparsity: f64,
    tech: TechniqueId,
) -> Result<(ModelGraph, RewriteReport)> {
    tech_layer(g, idx, tech)?;
    if !(0.0..1.0).contains(&sparsity) {
        bail!(Config, "sparsity must lie in [0, 1), got {}", sparsity);
    }
    let before = g.total_params();
    let (m, n, w, b) = fc_weight(g, idx)?;
    let (left, right) = svd_factors(w.data(), m, n, k)?;
    let mut out = g.clone();
    let kind = LayerKind::LowRankFc {
        in_features: n,
        out_features: m,
        rank: k,
    };
    replace(&mut out, idx, kind, tech, &mut crate::rng(0))?;
    let dt = g.dtype;
    set_value(
        &mut out,
        &param_name(idx, "in.weight"),
        Tensor::with_dtype(&[k, n], right, dt)?,
    )?;
    set_value(
        &mut out,
        &param_name(idx, "out.weight"),
        Tensor::with_dtype(&[m, k], left, dt)?,
    )?;
    let bias = b.unwrap_or_else(|| Tensor::zeros(&[m], dt));
    set_value(&mut out, &param_name(idx, "out.bias"), bias)?;
    if tech == TechniqueId::F2 {
        for suffix in ["in.weight", "out.weight"] {
            let name = param_name(idx, suffix);
            let mask = magnitude_mask(out.params.tensor(&name)?.data(), sparsity);
            out.params.set_mask(&name, mask)?;
        }
    }
    finish(&mut out)?;
    let r = report(
        before,
        &out,
        tech,
        idx,
        format!("{}x{} factored at rank {}", m, n, k),
    );
    Ok((out, r))
}

pub fn apply_f1_svd(g: &ModelGraph, idx: usize, k: usize) -> Result<(ModelGraph, RewriteReport)> {
    low_rank(g, idx, k, 0.0, TechniqueId::F1)
}

pub fn apply_f2_ksvd(
    g: &ModelGraph,
    idx: usize,
    k: usize,
    sparsity: f64,
) -> Result<(ModelGraph, RewriteReport)> {
    low_rank(g, idx, k, sparsity, TechniqueId::F2)
}

/// For F3: the spatial channel count feeding `idx` and the end of the fc stack.
fn gap_plan(g: &ModelGraph, idx: usize) -> Result<(usize, usize)> {
    let shapes = g.shapes()?;
    let mut j = idx;
    while j > 0
        && matches!(
            g.layers[j - 1].kind,
            LayerKind::Flatten | LayerKind::Identity | LayerKind::Dropout { .. }
        )
    {
        j -= 1;
    }
    let channels = match shapes[j].as_slice() {
        [c, _, _] => *c,
        _ => bail!(Structure, "fc {} has no spatial predecessor", idx),
    };
    if g.layers[j..idx].iter().any(|l| {
        !matches!(
            l.kind,
            LayerKind::Flatten | LayerKind::Identity | LayerKind::Dropout { .. }
        )
    }) {
        bail!(Structure, "fc {} is not the first classifier layer", idx);
    }
    let mut last = idx;
    for l in &g.layers[idx + 1..] {
        match l.kind {
            LayerKind::Fc { .. } | LayerKind::LowRankFc { .. } => last = l.index,
            LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::Identity => {}
            _ => bail!(
                Structure,
                "fc stack at {} is followed by {}",
                idx,
                l.kind.name()
            ),
        }
    }
    if !matches!(
        g.layers[last].kind,
        LayerKind::Fc { .. } | LayerKind::LowRankFc { .. }
    ) {
        bail!(Structure, "fc stack at {} has no final classifier", idx);
    }
    Ok((channels, last))
}

pub fn apply_f3_gap(
    g: &ModelGraph,
    idx: usize,
    rng: &mut SeededRng,
) -> Result<(ModelGraph, RewriteReport)> {
    tech_layer(g, idx, TechniqueId::F3)?;
    let before = g.total_params();
    let (channels, last) = gap_plan(g, idx)?;
    let classes = g.output_shape()?[0];
    let mut out = g.clone();
    replace(
        &mut out,
        idx,
        LayerKind::GapFc { channels, classes },
        TechniqueId::F3,
        rng,
    )?;
    for j in idx + 1..g.len() {
        if j <= last
            || matches!(
                g.layers[j].kind,
                LayerKind::Relu | LayerKind::Dropout { .. }
            )
        {
            out.layers[j].kind = LayerKind::Identity;
            out.params.remove_prefix(&layer_prefix(j));
        }
    }
    finish(&mut out)?;
    let r = report(
        before,
        &out,
        TechniqueId::F3,
        idx,
        format!("fc stack {}..={} collapsed to gap + fc", idx, last),
    );
    Ok((out, r))
}

fn conv_hyper(g: &ModelGraph, idx: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    match g.layers[idx].kind {
        LayerKind::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            groups,
            ..
        } => Ok((in_ch, out_ch, kernel, stride, padding, groups)),
        _ => bail!(Structure, "layer {} is not conv", idx),
    }
}

pub fn apply_c1_depthwise(
    g: &ModelGraph,
    idx: usize,
    rng: &mut SeededRng,
) -> Result<(ModelGraph, RewriteReport)> {
    tech_layer(g, idx, TechniqueId::C1)?;
    let (in_ch, out_ch, kernel, stride, padding, groups) = conv_hyper(g, idx)?;
    if kernel < 3 {
        bail!(
            Config,
            "depthwise-separable rewrite of a {}x{} conv gains nothing",
            kernel,
            kernel
        );
    }
    if groups != 1 {
        bail!(Structure, "conv {} is already grouped", idx);
    }
    let before = g.total_params();
    let mut out = g.clone();
    replace(
        &mut out,
        idx,
        LayerKind::DepthwiseSeparable {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        },
        TechniqueId::C1,
        rng,
    )?;
    finish(&mut out)?;
    Ok((
        out.clone(),
        report(before, &out, TechniqueId::C1, idx, String::new()),
    ))
}

pub fn apply_c2_inverted_residual(
    g: &ModelGraph,
    idx: usize,
    expansion: usize,
    rng: &mut SeededRng,
) -> Result<(ModelGraph, RewriteReport)> {
    tech_layer(g, idx, TechniqueId::C2)?;
    let (in_ch, out_ch, kernel, stride, padding, groups) = conv_hyper(g, idx)?;
    if groups != 1 || expansion == 0 {
        bail!(
            Config,
            "inverted residual needs a dense conv and positive expansion"
        );
    }
    let shapes = g.shapes()?;
    let skip = in_ch == out_ch && stride == 1 && shapes[idx] == shapes[idx + 1];
    let before = g.total_params();
    let mut out = g.clone();
    let kind = LayerKind::InvertedResidual {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        expansion,
        skip,
    };
    replace(&mut out, idx, kind, TechniqueId::C2, rng)?;
    finish(&mut out)?;
    let notes = if skip {
        "skip link added"
    } else {
        "no skip link"
    };
    Ok((
        out.clone(),
        report(before, &out, TechniqueId::C2, idx, notes.into()),
    ))
}

pub fn apply_c3_fire(
    g: &ModelGraph,
    idx: usize,
    squeeze: usize,
    rng: &mut SeededRng,
) -> Result<(ModelGraph, RewriteReport)> {
    tech_layer(g, idx, TechniqueId::C3)?;
    let (in_ch, out_ch, kernel, stride, padding, groups) = conv_hyper(g, idx)?;
    if out_ch % 2 != 0 {
        bail!(
            Config,
            "fire rewrite needs an even channel count, got {}",
            out_ch
        );
    }
    if groups != 1 || squeeze == 0 || 2 * padding + 1 != kernel {
        bail!(
            Config,
            "fire rewrite needs a dense same-padded conv and a positive squeeze"
        );
    }
    let before = g.total_params();
    let mut out = g.clone();
    replace(
        &mut out,
        idx,
        LayerKind::Fire {
            in_ch,
            out_ch,
            squeeze,
            stride,
        },
        TechniqueId::C3,
        rng,
    )?;
    finish(&mut out)?;
    Ok((
        out.clone(),
        report(
            before,
            &out,
            TechniqueId::C3,
            idx,
            format!("squeeze {}", squeeze),
        ),
    ))
}

pub fn apply_w1_prune(
    g: &ModelGraph,
    idx: usize,
    fraction: f64,
) -> Result<(ModelGraph, RewriteReport)> {
    tech_layer(g, idx, TechniqueId::W1)?;
    if !(0.0..1.0).contains(&fraction) {
        bail!(
            Config,
            "prune fraction must lie in [0, 1), got {}",
            fraction
        );
    }
    let before = g.total_params();
    let mut out = g.clone();
    let name = param_name(idx, "weight");
    let mask = magnitude_mask(out.params.tensor(&name)?.data(), fraction);
    out.params.set_mask(&name, mask)?;
    out.layers[idx].technique = Some(TechniqueId::W1);
    finish(&mut out)?;
    Ok((
        out.clone(),
        report(before, &out, TechniqueId::W1, idx, String::new()),
    ))
}

/// Downstream walk for filter pruning: the layers whose channel dimension
/// follows conv `idx`, ending at the consuming conv or fc.
fn w2_plan(g: &ModelGraph, idx: usize) -> Result<usize> {
    let (_, _, _, _, _, groups) = conv_hyper(g, idx)?;
    if groups != 1 {
        bail!(Structure, "filter pruning needs a dense conv");
    }
    let mut consumer = None;
    for l in &g.layers[idx + 1..] {
        match l.kind {
            LayerKind::BatchNorm { .. }
            | LayerKind::Relu
            | LayerKind::Dropout { .. }
            | LayerKind::MaxPool { .. }
            | LayerKind::AvgPool { .. }
            | LayerKind::Identity
            | LayerKind::Flatten => {}
            LayerKind::Conv { groups: 1, .. } | LayerKind::Fc { .. } => {
                consumer = Some(l.index);
                break;
            }
            _ => bail!(
                Structure,
                "filter pruning at {} cannot shrink {} at {}",
                idx,
                l.kind.name(),
                l.index
            ),
        }
    }
    let Some(consumer) = consumer else {
        bail!(Structure, "conv {} has no downstream consumer", idx)
    };
    for (from, to) in g.links() {
        if (idx < from && from <= consumer) || (idx < to && to <= consumer) {
            bail!(
                Structure,
                "filter pruning at {} would break residual link {}->{}",
                idx,
                from,
                to
            );
        }
    }
    Ok(consumer)
}

/// Filter ranking by L1 norm; returns the surviving filter indices in order.
pub fn surviving_filters(norms: &[f64], fraction: f64) -> Vec<usize> {
    let keep = magnitude_mask(norms, fraction);
    (0..norms.len()).filter(|i| keep[*i]).collect()
}

pub fn apply_w2_filter_prune(
    g: &ModelGraph,
    idx: usize,
    fraction: f64,
) -> Result<(ModelGraph, RewriteReport)> {
    tech_layer(g, idx, TechniqueId::W2)?;
    if !(0.0..1.0).contains(&fraction) {
        bail!(
            Config,
            "prune fraction must lie in [0, 1), got {}; at least one filter must survive",
            fraction
        );
    }
    let consumer = w2_plan(g, idx)?;
    let before = g.total_params();
    let shapes = g.shapes()?;
    let w = g.params.tensor(&param_name(idx, "weight"))?;
    let cout = w.dims()[0];
    let per = w.numel() / cout;
    let norms: Vec<f64> = w
        .data()
        .chunks(per)
        .map(|f| f.iter().map(|v| v.abs()).sum())
        .collect();
    let keep = surviving_filters(&norms, fraction);
    if keep.is_empty() {
        bail!(
            Config,
            "filter pruning would remove every filter of layer {}",
            idx
        );
    }
    let mut out = g.clone();
    let shrink = |out: &mut ModelGraph,
                  name: String,
                  axis: usize,
                  keep: &[usize],
                  block: usize|
     -> Result<()> {
        let Some(p) = out.params.get_mut(&name) else {
            return Ok(());
        };
        let t = if block == 1 {
            gather_axis(&p.value, axis, keep)?
        } else {
            let d = p.value.dims().to_vec();
            let blocks = d[axis] / block;
            let mut split = d[..axis].to_vec();
            split.extend([blocks, block]);
            split.extend_from_slice(&d[axis + 1..]);
            let g = gather_axis(&p.value.reshape(&split)?, axis, keep)?;
            let mut nd = d.clone();
            nd[axis] = keep.len() * block;
            g.reshape(&nd)?
        };
        let mask = p.mask.take().map(|m| {
            let mt = Tensor::new_f64(
                p.value.dims(),
                m.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect(),
            )
            .expect("mask matches value");
            let mt = if block == 1 {
                gather_axis(&mt, axis, keep)
            } else {
                let d = mt.dims().to_vec();
                let mut split = d[..axis].to_vec();
                split.extend([d[axis] / block, block]);
                split.extend_from_slice(&d[axis + 1..]);
                mt.reshape(&split).and_then(|s| gather_axis(&s, axis, keep))
            };
            mt.map(|t| t.data().iter().map(|v| *v != 0.0).collect::<Vec<bool>>())
        });
        p.value = t;
        if let Some(m) = mask {
            p.mask = Some(m?);
        }
        Ok(())
    };
    shrink(&mut out, param_name(idx, "weight"), 0, &keep, 1)?;
    shrink(&mut out, param_name(idx, "bias"), 0, &keep, 1)?;
    if let LayerKind::Conv { out_ch, .. } = &mut out.layers[idx].kind {
        *out_ch = keep.len();
    }
    for j in idx + 1..=consumer {
        match out.layers[j].kind.clone() {
            LayerKind::BatchNorm { .. } => {
                for s in ["gamma", "beta", "running_mean", "running_var"] {
                    shrink(&mut out, param_name(j, s), 0, &keep, 1)?;
                }
                out.layers[j].kind = LayerKind::BatchNorm {
                    channels: keep.len(),
                };
            }
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
                bias,
            } => {
                let _ = in_ch;
                shrink(&mut out, param_name(j, "weight"), 1, &keep, 1)?;
                out.layers[j].kind = LayerKind::Conv {
                    in_ch: keep.len(),
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    groups,
                    bias,
                };
            }
            LayerKind::Fc {
                in_features,
                out_features,
                bias,
            } => {
                let block = in_features / cout;
                let spatial: usize = shapes[j].iter().product();
                if spatial != in_features || in_features % cout != 0 {
                    bail!(
                        Structure,
                        "fc {} input does not follow conv {} channels",
                        j,
                        idx
                    );
                }
                shrink(&mut out, param_name(j, "weight"), 1, &keep, block)?;
                out.layers[j].kind = LayerKind::Fc {
                    in_features: keep.len() * block,
                    out_features,
                    bias,
                };
            }
            _ => {}
        }
    }
    out.layers[idx].technique = Some(TechniqueId::W2);
    finish(&mut out)?;
    let notes = format!(
        "{} of {} filters kept; consumer {}",
        keep.len(),
        cout,
        consumer
    );
    Ok((
        out.clone(),
        report(before, &out, TechniqueId::W2, idx, notes),
    ))
}

/// Type and structural preconditions of `tech` at layer `idx`.
pub fn is_applicable(g: &ModelGraph, idx: usize, tech: TechniqueId) -> bool {
    let Some(l) = g.layers.get(idx) else {
        return false;
    };
    if !tech.applies_to_kind(&l.kind) {
        return false;
    }
    match (tech, &l.kind) {
        (TechniqueId::F3, _) => gap_plan(g, idx).is_ok(),
        (TechniqueId::C1, LayerKind::Conv { kernel, groups, .. }) => *kernel >= 3 && *groups == 1,
        (TechniqueId::C2, LayerKind::Conv { groups, .. }) => *groups == 1,
        (
            TechniqueId::C3,
            LayerKind::Conv {
                out_ch,
                kernel,
                padding,
                groups,
                ..
            },
        ) => out_ch % 2 == 0 && *groups == 1 && 2 * padding + 1 == *kernel,
        (TechniqueId::W2, _) => w2_plan(g, idx).is_ok(),
        _ => true,
    }
}

/// Per-layer applicability over [`TechniqueId::ALL`].
pub fn applicability_mask(g: &ModelGraph) -> Vec<[bool; 8]> {
    (0..g.len())
        .map(|i| {
            let mut row = [false; 8];
            for t in TechniqueId::ALL {
                row[t.ordinal()] = is_applicable(g, i, t);
            }
            row
        })
        .collect()
}

/// Applies one technique with knob defaults.
pub fn apply_technique(
    g: &ModelGraph,
    idx: usize,
    tech: TechniqueId,
    knobs: &Knobs,
    rng: &mut SeededRng,
) -> Result<(ModelGraph, RewriteReport)> {
    match tech {
        TechniqueId::F1 | TechniqueId::F2 => {
            let (m, n, _, _) = fc_weight(g, idx)?;
            let k = knobs.rank_for(m, n).min(m.min(n));
            let sparsity = if tech == TechniqueId::F2 {
                knobs.sparsity
            } else {
                0.0
            };
            low_rank(g, idx, k, sparsity, tech)
        }
        TechniqueId::F3 => apply_f3_gap(g, idx, rng),
        TechniqueId::C1 => apply_c1_depthwise(g, idx, rng),
        TechniqueId::C2 => apply_c2_inverted_residual(g, idx, knobs.expansion, rng),
        TechniqueId::C3 => {
            let (in_ch, ..) = conv_hyper(g, idx)?;
            apply_c3_fire(g, idx, knobs.squeeze_for(in_ch), rng)
        }
        TechniqueId::W1 => apply_w1_prune(g, idx, knobs.prune_fraction),
        TechniqueId::W2 => apply_w2_filter_prune(g, idx, knobs.prune_fraction),
    }
}

/// Drops assignments that the partition or an earlier F3 collapse makes moot:
/// indices at or past the partition, and layers swallowed by an F3 stack.
pub fn canonicalize(g: &ModelGraph, s: &Strategy) -> Strategy {
    let mut out = Strategy::new(s.partition);
    let mut swallowed_until = None;
    for (&idx, &tech) in &s.compressions {
        if idx >= s.partition || swallowed_until.is_some_and(|end| idx <= end) {
            continue;
        }
        if tech == TechniqueId::F3 {
            if let Ok((_, last)) = gap_plan(g, idx) {
                swallowed_until = Some(last);
            }
        }
        out.compressions.insert(idx, tech);
    }
    out
}

/// Applies every assignment in ascending index order, then sets the partition.
pub fn apply_strategy(
    g: &ModelGraph,
    s: &Strategy,
    knobs: &Knobs,
    seed: u64,
) -> Result<(ModelGraph, Vec<RewriteReport>)> {
    knobs.validate()?;
    s.validate(g)?;
    let mut cur = g.clone();
    let mut reports = Vec::new();
    for (&idx, &tech) in &s.compressions {
        if !is_applicable(&cur, idx, tech) {
            bail!(
                Structure,
                "{} is not applicable to layer {} ({})",
                tech,
                idx,
                cur.layers[idx].kind.name()
            );
        }
        let mut rng = crate::rng(seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (next, r) = apply_technique(&cur, idx, tech, knobs, &mut rng)?;
        cur = next;
        reports.push(r);
    }
    if !cur.is_valid_partition(s.partition) {
        bail!(Structure, "partition {} cuts a residual link", s.partition);
    }
    cur.partition = s.partition;
    cur.validate()?;
    Ok((cur, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_zoo;
    use crate::tensor::DType;

    #[test]
    fn magnitude_rule() {
        let keep = magnitude_mask(&[1.0, -2.0, 3.0, -4.0], 0.5);
        assert_eq!(keep, vec![false, false, true, true]);
        assert_eq!(surviving_filters(&[1.0, 5.0, 2.0, 9.0], 0.5), vec![1, 3]);
    }

    #[test]
    fn svd_rank_one_exact() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, -1.0, 2.0];
        let w: Vec<f64> = u
            .iter()
            .flat_map(|a| v.iter().map(move |b| a * b))
            .collect();
        let (l, r) = svd_factors(&w, 3, 4, 1).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((l[i] * r[j] - w[i * 4 + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lenet_masks() {
        let g = build_zoo("tiny-lenet", DType::F32, 0).unwrap();
        let m = applicability_mask(&g);
        assert_eq!(m[0], [false, false, false, true, true, true, true, true]);
        assert_eq!(m[7], [true, true, true, false, false, false, true, false]);
        assert_eq!(m[1], [false; 8]);
        // last fc is not the first classifier layer
        assert!(!m[9][TechniqueId::F3.ordinal()]);
    }

    #[test]
    fn vgg_w2_respects_residual() {
        let g = build_zoo("tiny-vgg", DType::F32, 0).unwrap();
        assert!(is_applicable(&g, 0, TechniqueId::W2));
        assert!(!is_applicable(&g, 7, TechniqueId::W2));
        assert!(!is_applicable(&g, 10, TechniqueId::W2));
        assert!(is_applicable(&g, 18, TechniqueId::W2));
    }

    #[test]
    fn canonicalize_drops_moot_entries() {
        let g = build_zoo("tiny-lenet", DType::F32, 0).unwrap();
        let s: Strategy = "P:10 0:W1 7:F3 9:F1".parse().unwrap();
        assert_eq!(canonicalize(&g, &s).to_string(), "P:10 0:W1 7:F3");
        let s: Strategy = "P:3 0:W1 7:F3".parse().unwrap();
        assert_eq!(canonicalize(&g, &s).to_string(), "P:3 0:W1");
    }
}
