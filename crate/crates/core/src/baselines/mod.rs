//! Comparison methods: grid search over the strategy space and Gaussian noise
//! injection at the partition layer.

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::pipeline::perf_of;
use crate::adversary::{
    evaluate_attack, fit_attacker, AttackSpec, Attacker, SessionData, SplitModel,
};
use crate::compress::{applicability_mask, apply_strategy, canonicalize, Knobs};
use crate::controller::{Evaluator, PartitionMenu};
use crate::error::{bail, Result};
use crate::metrics::{self, MetricsReport, PerfVariant, PrivacyVariant};
use crate::model::{ModelGraph, Strategy, TechniqueId};
use crate::tensor::Tensor;
use crate::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    /// Each technique applied to every applicable encoder layer, plus none.
    #[default]
    Uniform,
    /// Every per-layer combination.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub partitions: PartitionMenu,
    pub mode: GridMode,
    pub techniques: Option<Vec<TechniqueId>>,
    /// Maximum number of evaluations.
    pub budget: Option<usize>,
    /// Evaluate the first `budget` strategies instead of failing when over budget.
    pub truncate: bool,
    /// Used to size encoders for tie-breaking.
    pub knobs: Knobs,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            partitions: PartitionMenu::UnitBoundaries,
            mode: GridMode::Uniform,
            techniques: None,
            budget: None,
            truncate: false,
            knobs: Knobs::default(),
        }
    }
}

/// The deduplicated canonical strategies of `spec`, in enumeration order.
pub fn enumerate(base: &ModelGraph, spec: &GridSpec) -> Result<Vec<Strategy>> {
    let app = applicability_mask(base);
    let menu: Vec<TechniqueId> = spec
        .techniques
        .clone()
        .unwrap_or_else(|| TechniqueId::ALL.to_vec());
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |s: Strategy| {
        let s = canonicalize(base, &s);
        if seen.insert(s.to_string()) {
            out.push(s);
        }
    };
    for p in spec.partitions.positions(base)? {
        let layers: Vec<usize> = base
            .compressible_indices()
            .into_iter()
            .filter(|i| *i < p)
            .collect();
        match spec.mode {
            GridMode::Uniform => {
                push(Strategy::new(p));
                for t in &menu {
                    let mut s = Strategy::new(p);
                    for i in layers.iter().filter(|i| app[**i][t.ordinal()]) {
                        s.compressions.insert(*i, *t);
                    }
                    push(s);
                }
            }
            GridMode::Exhaustive => {
                let options: Vec<Vec<Option<TechniqueId>>> = layers
                    .iter()
                    .map(|i| {
                        std::iter::once(None)
                            .chain(
                                menu.iter()
                                    .filter(|t| app[*i][t.ordinal()])
                                    .map(|t| Some(*t)),
                            )
                            .collect()
                    })
                    .collect();
                let mut idx = vec![0usize; layers.len()];
                loop {
                    let mut s = Strategy::new(p);
                    for ((layer, opts), k) in layers.iter().zip(&options).zip(&idx) {
                        if let Some(t) = opts[*k] {
                            s.compressions.insert(*layer, t);
                        }
                    }
                    push(s);
                    let mut carry = 0;
                    while carry < idx.len() {
                        idx[carry] += 1;
                        if idx[carry] < options[carry].len() {
                            break;
                        }
                        idx[carry] = 0;
                        carry += 1;
                    }
                    if carry == idx.len() {
                        break;
                    }
                }
            }
        }
    }
    if out.is_empty() {
        bail!(Config, "grid enumerates no strategies");
    }
    if let Some(b) = spec.budget {
        if out.len() > b {
            if !spec.truncate {
                bail!(
                    Config,
                    "grid has {} strategies, over the budget of {}",
                    out.len(),
                    b
                );
            }
            out.truncate(b);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub strategy: Strategy,
    pub report: MetricsReport,
    pub encoder_params: usize,
    /// Empty unless the evaluation failed (reward 0).
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: Option<(Strategy, MetricsReport)>,
    pub rows: Vec<GridRow>,
}

fn encoder_params(base: &ModelGraph, s: &Strategy, knobs: &Knobs) -> usize {
    match apply_strategy(base, s, knobs, 0) {
        Ok((g, _)) => g.count_params(0..g.partition),
        Err(_) => usize::MAX,
    }
}

/// Index of the best row: highest reward, then fewer encoder parameters,
/// then the lexicographically smaller strategy string.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    (0..rows.len())
        .filter(|i| rows[*i].error.is_empty())
        .max_by(|&a, &b| {
            let (x, y) = (&rows[a], &rows[b]);
            x.report
                .r
                .total_cmp(&y.report.r)
                .then(y.encoder_params.cmp(&x.encoder_params))
                .then(y.strategy.to_string().cmp(&x.strategy.to_string()))
        })
}

/// Evaluates every enumerated strategy with `evaluator`.
pub fn grid_search(
    base: &ModelGraph,
    spec: &GridSpec,
    evaluator: &dyn Evaluator,
) -> Result<GridResult> {
    let strategies = enumerate(base, spec)?;
    let (pv, sv) = evaluator.variants();
    let rows: Vec<GridRow> = strategies
        .into_par_iter()
        .map(|s| {
            let (report, error) = match evaluator.evaluate(&s) {
                Ok(r) => (r, String::new()),
                Err(e) => (
                    MetricsReport::failed(evaluator.a_base(), pv, sv),
                    e.to_string(),
                ),
            };
            GridRow {
                encoder_params: encoder_params(base, &s, &spec.knobs),
                strategy: s,
                report,
                error,
            }
        })
        .collect();
    let best = select_best(&rows).map(|i| (rows[i].strategy.clone(), rows[i].report.clone()));
    Ok(GridResult { best, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub multipliers: Vec<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            multipliers: vec![0.1, 0.5, 1.0, 2.0],
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty()
            || self
                .multipliers
                .iter()
                .any(|m| !(*m > 0.0) || !m.is_finite())
        {
            bail!(Config, "noise multipliers must be positive and finite");
        }
        Ok(())
    }
}

/// Noise standard deviation: `multiplier * mean(|features|)`.
pub fn noise_sigma(features: &Tensor, multiplier: f64) -> f64 {
    multiplier * features.mean_abs()
}

/// Adds zero-mean Gaussian noise with standard deviation `noise_sigma`.
pub fn dp_inject(features: &Tensor, multiplier: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if !(multiplier >= 0.0) || !multiplier.is_finite() {
        bail!(
            Config,
            "noise multiplier must be non-negative, got {}",
            multiplier
        );
    }
    let sigma = noise_sigma(features, multiplier);
    if sigma == 0.0 {
        return Ok(features.clone());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| crate::Error::Numeric(e.to_string()))?;
    let data = features.data().iter().map(|v| v + n.sample(rng)).collect();
    Tensor::with_dtype(features.dims(), data, features.dtype())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSettings {
    pub attack: AttackSpec,
    pub privacy: PrivacyVariant,
    pub perf: PerfVariant,
}

impl Default for DpSettings {
    fn default() -> Self {
        DpSettings {
            attack: AttackSpec::default(),
            privacy: PrivacyVariant::P1,
            perf: PerfVariant::S1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpRow {
    pub partition: usize,
    pub multiplier: f64,
    pub report: MetricsReport,
}

/// For every `(partition, multiplier)`: the trained base runs unchanged with
/// noise added to its released features at inference, and an attacker is
/// trained on noised auxiliary features.
pub fn dp_baseline_eval(
    base: &ModelGraph,
    partitions: &[usize],
    spec: &NoiseSpec,
    data: &SessionData,
    settings: &DpSettings,
    seed: u64,
) -> Result<Vec<DpRow>> {
    spec.validate()?;
    if partitions.is_empty() {
        bail!(Config, "no partitions to evaluate");
    }
    let a_base = {
        let pred = crate::train::predict(base, &data.eval.x.to_dtype(base.dtype))?.argmax_rows()?;
        metrics::accuracy(&pred, &data.eval.coarse)?
    };
    let cells: Vec<(usize, f64)> = partitions
        .iter()
        .flat_map(|p| spec.multipliers.iter().map(move |m| (*p, *m)))
        .collect();
    cells
        .into_par_iter()
        .map(|(p, m)| {
            if !base.is_valid_partition(p) {
                bail!(Config, "partition {} is not valid for {}", p, base.name);
            }
            let mut g = base.clone();
            g.partition = p;
            let split = SplitModel::from_graph(&g)?;
            let cell_seed = crate::seed_for(&format!("dp:{p}:{m}"), seed);
            let mut rng = crate::rng(cell_seed);
            let aux_f = split.features(&data.aux.x)?;
            let eval_f = dp_inject(&split.features(&data.eval.x)?, m, &mut rng)?;
            let pred = split.logits_from_features(&eval_f)?.argmax_rows()?;
            let a = metrics::accuracy(&pred, &data.eval.coarse)?;
            let mut attacker = Attacker::new(
                settings.attack.kind,
                &split.encoder,
                data.hidden_classes,
                &mut rng,
            )?;
            let opts = crate::train::TrainOpts {
                epochs: settings.attack.epochs,
                lr: settings.attack.lr,
                batch_size: settings.attack.batch_size,
                ..Default::default()
            };
            let mut noise_rng = crate::rng(cell_seed ^ 0x5EED);
            fit_attacker(
                &mut attacker,
                &aux_f,
                &data.aux,
                &settings.attack,
                &opts,
                cell_seed,
                &mut |f| dp_inject(&f, m, &mut noise_rng),
            )?;
            let privacy = evaluate_attack(
                &attacker,
                &eval_f,
                &data.eval,
                settings.privacy,
                &settings.attack.ssim,
                data.blind_error()?,
            )?;
            let s = perf_of(&g, settings.perf)?;
            let report =
                MetricsReport::new(a, a_base, settings.privacy, privacy, settings.perf, s, 0.0)?;
            Ok(DpRow {
                partition: p,
                multiplier: m,
                report,
            })
        })
        .collect()
}

/// The row group used for comparisons: the multiplier with the highest mean
/// reward across partitions.
pub fn best_dp_multiplier(rows: &[DpRow]) -> Option<f64> {
    let mut ms: Vec<f64> = rows.iter().map(|r| r.multiplier).collect();
    ms.sort_by(f64::total_cmp);
    ms.dedup();
    ms.into_iter().max_by(|a, b| {
        let mean = |m: f64| {
            let rs: Vec<f64> = rows
                .iter()
                .filter(|r| r.multiplier == m)
                .map(|r| r.report.r)
                .collect();
            rs.iter().sum::<f64>() / rs.len() as f64
        };
        mean(*a).total_cmp(&mean(*b))
    })
}
