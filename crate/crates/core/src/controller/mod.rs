//! Bidirectional-LSTM policy over partition and per-layer compression
//! decisions, trained with REINFORCE and a moving-average baseline.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{applicability_mask, canonicalize};
use crate::error::{bail, Result};
use crate::metrics::{MetricsReport, PerfVariant, PrivacyVariant};
use crate::model::{LayerKind, ModelGraph, Strategy, TechniqueId};
use crate::tensor::{Bound, DType, Optimizer, OptimizerKind, ParamStore, Tape, Tensor, Var};
use crate::SeededRng;

/// Maps a strategy to its scored evaluation.
pub trait Evaluator: Sync {
    fn evaluate(&self, strategy: &Strategy) -> Result<MetricsReport>;

    fn a_base(&self) -> f64 {
        1.0
    }

    fn variants(&self) -> (PrivacyVariant, PerfVariant) {
        (PrivacyVariant::default(), PerfVariant::default())
    }
}

impl<F> Evaluator for F
where
    F: Fn(&Strategy) -> Result<MetricsReport> + Sync,
{
    fn evaluate(&self, strategy: &Strategy) -> Result<MetricsReport> {
        self(strategy)
    }
}

/// Memoizes evaluations by canonical strategy string. Failures are cached too.
pub struct CachedEvaluator<'a, E: Evaluator + ?Sized> {
    inner: &'a E,
    cache: Mutex<HashMap<String, std::result::Result<MetricsReport, String>>>,
    calls: Mutex<usize>,
}

impl<'a, E: Evaluator + ?Sized> CachedEvaluator<'a, E> {
    pub fn new(inner: &'a E) -> Self {
        CachedEvaluator {
            inner,
            cache: Mutex::new(HashMap::new()),
            calls: Mutex::new(0),
        }
    }

    /// Number of evaluations forwarded to the inner evaluator.
    pub fn misses(&self) -> usize {
        *self.calls.lock().expect("poisoned")
    }
}

impl<E: Evaluator + ?Sized> Evaluator for CachedEvaluator<'_, E> {
    fn evaluate(&self, strategy: &Strategy) -> Result<MetricsReport> {
        let key = strategy.to_string();
        if let Some(hit) = self.cache.lock().expect("poisoned").get(&key) {
            return hit.clone().map_err(crate::Error::Numeric);
        }
        *self.calls.lock().expect("poisoned") += 1;
        let out = self.inner.evaluate(strategy);
        let stored = out.as_ref().map(Clone::clone).map_err(|e| e.to_string());
        self.cache.lock().expect("poisoned").insert(key, stored);
        out
    }

    fn a_base(&self) -> f64 {
        self.inner.a_base()
    }

    fn variants(&self) -> (PrivacyVariant, PerfVariant) {
        self.inner.variants()
    }
}

const KINDS: [&str; 16] = [
    "conv",
    "fc",
    "relu",
    "maxpool",
    "avgpool",
    "global-avg-pool",
    "batchnorm",
    "dropout",
    "flatten",
    "residual-add",
    "identity",
    "low-rank-fc",
    "gap-fc",
    "depthwise-separable",
    "inverted-residual",
    "fire",
];

/// Compression choices per layer: "none" plus every technique.
pub const CHOICES: usize = TechniqueId::ALL.len() + 1;

/// Kind one-hot, normalized Cin/Cout/K/stride, depth, current technique one-hot.
pub const EMBEDDING_DIM: usize = KINDS.len() + 4 + 1 + CHOICES;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStateEmbedding(pub Vec<f64>);

fn geometry(kind: &LayerKind) -> [f64; 4] {
    let f = |v: usize| v as f64;
    match *kind {
        LayerKind::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            ..
        }
        | LayerKind::DepthwiseSeparable {
            in_ch,
            out_ch,
            kernel,
            stride,
            ..
        }
        | LayerKind::InvertedResidual {
            in_ch,
            out_ch,
            kernel,
            stride,
            ..
        } => [f(in_ch), f(out_ch), f(kernel), f(stride)],
        LayerKind::Fire {
            in_ch,
            out_ch,
            stride,
            ..
        } => [f(in_ch), f(out_ch), 3.0, f(stride)],
        LayerKind::Fc {
            in_features,
            out_features,
            ..
        }
        | LayerKind::LowRankFc {
            in_features,
            out_features,
            ..
        } => [f(in_features), f(out_features), 1.0, 1.0],
        LayerKind::GapFc { channels, classes } => [f(channels), f(classes), 1.0, 1.0],
        LayerKind::MaxPool { k, stride } | LayerKind::AvgPool { k, stride } => {
            [0.0, 0.0, f(k), f(stride)]
        }
        LayerKind::BatchNorm { channels } => [f(channels), f(channels), 0.0, 0.0],
        _ => [0.0; 4],
    }
}

/// One embedding per layer. Geometry is divided by its maximum over the model.
pub fn encode_layer_states(g: &ModelGraph) -> Vec<LayerStateEmbedding> {
    let geo: Vec<[f64; 4]> = g.layers.iter().map(|l| geometry(&l.kind)).collect();
    let mut max = [0.0f64; 4];
    for r in &geo {
        for k in 0..4 {
            max[k] = max[k].max(r[k]);
        }
    }
    let depth_den = (g.len().max(2) - 1) as f64;
    g.layers
        .iter()
        .zip(&geo)
        .enumerate()
        .map(|(i, (l, r))| {
            let mut v = vec![0.0; EMBEDDING_DIM];
            if let Some(k) = KINDS.iter().position(|n| *n == l.kind.name()) {
                v[k] = 1.0;
            }
            for k in 0..4 {
                v[KINDS.len() + k] = if max[k] > 0.0 { r[k] / max[k] } else { 0.0 };
            }
            v[KINDS.len() + 4] = i as f64 / depth_den;
            let t = l.technique.map_or(0, |t| t.ordinal() + 1);
            v[KINDS.len() + 5 + t] = 1.0;
            LayerStateEmbedding(v)
        })
        .collect()
}

/// Which partition positions the policy may choose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "positions")]
pub enum PartitionMenu {
    All,
    #[default]
    UnitBoundaries,
    Explicit(Vec<usize>),
}

impl PartitionMenu {
    pub fn positions(&self, g: &ModelGraph) -> Result<Vec<usize>> {
        let v: Vec<usize> = match self {
            PartitionMenu::All => (0..=g.len()).filter(|p| g.is_valid_partition(*p)).collect(),
            PartitionMenu::UnitBoundaries => g.unit_boundaries(),
            PartitionMenu::Explicit(ps) => {
                if let Some(p) = ps.iter().find(|p| !g.is_valid_partition(**p)) {
                    bail!(Config, "partition {} is not valid for {}", p, g.name);
                }
                let mut ps = ps.clone();
                ps.sort_unstable();
                ps.dedup();
                ps
            }
        };
        if v.is_empty() {
            bail!(Config, "no partition positions to choose from");
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub lr: f64,
    pub episodes: usize,
    pub rollouts: usize,
    pub baseline_decay: f64,
    pub optimizer: OptimizerKind,
    pub partitions: PartitionMenu,
    /// Restricts the technique menu; `None` offers every applicable technique.
    pub techniques: Option<Vec<TechniqueId>>,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 64,
            lr: 0.03,
            episodes: 200,
            rollouts: 1,
            baseline_decay: 0.9,
            optimizer: OptimizerKind::SgdMomentum,
            partitions: PartitionMenu::UnitBoundaries,
            techniques: None,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.rollouts == 0
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.baseline_decay)
        {
            bail!(
                Config,
                "controller needs positive hidden size, rollouts and lr, and decay in [0, 1)"
            );
        }
        Ok(())
    }
}

/// The action space of one model: embeddings and masks.
#[derive(Debug, Clone)]
pub struct PolicyInput {
    pub states: Vec<LayerStateEmbedding>,
    /// Per position `0..=L`.
    pub partition_mask: Vec<bool>,
    /// Compressible layer index and its choice mask (entry 0 is "none").
    pub layers: Vec<(usize, [bool; CHOICES])>,
}

impl PolicyInput {
    pub fn new(
        g: &ModelGraph,
        menu: &PartitionMenu,
        techniques: Option<&[TechniqueId]>,
    ) -> Result<Self> {
        g.validate()?;
        let positions = menu.positions(g)?;
        let mut partition_mask = vec![false; g.len() + 1];
        positions.iter().for_each(|p| partition_mask[*p] = true);
        let app = applicability_mask(g);
        let layers = g
            .compressible_indices()
            .into_iter()
            .map(|i| {
                let mut m = [false; CHOICES];
                m[0] = true;
                for t in TechniqueId::ALL {
                    m[t.ordinal() + 1] =
                        app[i][t.ordinal()] && techniques.is_none_or(|ts| ts.contains(&t));
                }
                (i, m)
            })
            .collect();
        Ok(PolicyInput {
            states: encode_layer_states(g),
            partition_mask,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.states.len()
    }

    /// Number of raw action combinations.
    pub fn space_size(&self) -> usize {
        let p = self.partition_mask.iter().filter(|m| **m).count();
        self.layers
            .iter()
            .map(|(_, m)| m.iter().filter(|x| **x).count())
            .product::<usize>()
            * p
    }
}

/// Policy distributions for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    /// Over positions `0..=L`.
    pub partition: Vec<f64>,
    /// Per compressible layer: layer index and a distribution over choices.
    pub compression: Vec<(usize, Vec<f64>)>,
}

/// Raw sampled decisions, before dropping compressions beyond the partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actions {
    pub partition: usize,
    /// Choice index per compressible layer (0 = none).
    pub choices: Vec<usize>,
}

impl Actions {
    pub fn strategy(&self, input: &PolicyInput) -> Strategy {
        let mut s = Strategy::new(self.partition);
        for ((idx, _), c) in input.layers.iter().zip(&self.choices) {
            if *c > 0 && *idx < self.partition {
                s.compressions.insert(*idx, TechniqueId::ALL[*c - 1]);
            }
        }
        s
    }
}

pub struct ControllerNet {
    pub params: ParamStore,
    pub hidden: usize,
    pub input_dim: usize,
}

const MASKED: f64 = -1e30;

impl ControllerNet {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut params = ParamStore::new();
        let h = hidden;
        let init = 1.0 / (h as f64).sqrt();
        for dir in ["fw", "bw"] {
            params.insert(
                &format!("{dir}.w_ih"),
                Tensor::uniform(&[4 * h, input_dim], -init, init, DType::F64, rng),
            )?;
            params.insert(
                &format!("{dir}.w_hh"),
                Tensor::uniform(&[4 * h, h], -init, init, DType::F64, rng),
            )?;
            params.insert(&format!("{dir}.b"), Tensor::zeros(&[4 * h], DType::F64))?;
        }
        params.insert(
            "comp.w",
            Tensor::uniform(&[CHOICES, 2 * h], -0.1, 0.1, DType::F64, rng),
        )?;
        params.insert("comp.b", Tensor::zeros(&[CHOICES], DType::F64))?;
        params.insert(
            "part.w",
            Tensor::uniform(&[1, 2 * h], -0.1, 0.1, DType::F64, rng),
        )?;
        params.insert("part.b", Tensor::zeros(&[1], DType::F64))?;
        params.insert("part.zero", Tensor::zeros(&[1, 1], DType::F64))?;
        Ok(ControllerNet {
            params,
            hidden,
            input_dim,
        })
    }

    fn lstm(&self, tape: &mut Tape, b: &Bound, dir: &str, xs: &[Var]) -> Result<Vec<Var>> {
        let h = self.hidden;
        let (w_ih, w_hh, bias) = (
            b.var(&format!("{dir}.w_ih"))?,
            b.var(&format!("{dir}.w_hh"))?,
            b.var(&format!("{dir}.b"))?,
        );
        let mut hs = tape.constant(Tensor::zeros(&[1, h], DType::F64));
        let mut cs = tape.constant(Tensor::zeros(&[1, h], DType::F64));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let a = tape.linear(x, w_ih, Some(bias))?;
            let r = tape.linear(hs, w_hh, None)?;
            let gates = tape.add(a, r)?;
            let i = tape.narrow(gates, 1, 0, h)?;
            let i = tape.sigmoid(i)?;
            let f = tape.narrow(gates, 1, h, h)?;
            let f = tape.sigmoid(f)?;
            let g = tape.narrow(gates, 1, 2 * h, h)?;
            let g = tape.tanh(g)?;
            let o = tape.narrow(gates, 1, 3 * h, h)?;
            let o = tape.sigmoid(o)?;
            let fc = tape.mul(f, cs)?;
            let ig = tape.mul(i, g)?;
            cs = tape.add(fc, ig)?;
            let tc = tape.tanh(cs)?;
            hs = tape.mul(o, tc)?;
            out.push(hs);
        }
        Ok(out)
    }

    /// Log-probabilities on `tape`: partition `[1, L+1]` and one `[1, CHOICES]`
    /// row per compressible layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        input: &PolicyInput,
    ) -> Result<(Var, Vec<Var>)> {
        if input.states.iter().any(|s| s.0.len() != self.input_dim) {
            bail!(
                Dimension,
                "layer embeddings do not match controller input {}",
                self.input_dim
            );
        }
        let xs: Vec<Var> = input
            .states
            .iter()
            .map(|s| {
                tape.constant(Tensor::new_f64(&[1, self.input_dim], s.0.clone()).expect("sized"))
            })
            .collect();
        let fw = self.lstm(tape, b, "fw", &xs)?;
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let mut bw = self.lstm(tape, b, "bw", &rev)?;
        bw.reverse();
        let mut hcat = Vec::with_capacity(xs.len());
        for (f, r) in fw.iter().zip(&bw) {
            hcat.push(tape.concat(&[*f, *r], 1)?);
        }
        let (pw, pb) = (b.var("part.w")?, b.var("part.b")?);
        let mut parts = vec![b.var("part.zero")?];
        for h in &hcat {
            parts.push(tape.linear(*h, pw, Some(pb))?);
        }
        let plogits = tape.concat(&parts, 1)?;
        let pmask: Vec<f64> = input
            .partition_mask
            .iter()
            .map(|m| if *m { 0.0 } else { MASKED })
            .collect();
        let plogits = tape.add_const(plogits, &Tensor::new_f64(&[1, pmask.len()], pmask)?)?;
        let plog = tape.log_softmax_rows(plogits)?;
        let (cw, cb) = (b.var("comp.w")?, b.var("comp.b")?);
        let mut clog = Vec::with_capacity(input.layers.len());
        for (idx, mask) in &input.layers {
            let logits = tape.linear(hcat[*idx], cw, Some(cb))?;
            let m: Vec<f64> = mask.iter().map(|m| if *m { 0.0 } else { MASKED }).collect();
            let logits = tape.add_const(logits, &Tensor::new_f64(&[1, CHOICES], m)?)?;
            clog.push(tape.log_softmax_rows(logits)?);
        }
        Ok((plog, clog))
    }

    pub fn distributions(&self, input: &PolicyInput) -> Result<Distributions> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let (p, c) = self.forward(&mut tape, &b, input)?;
        let probs = |v: Var, tape: &Tape| {
            tape.value(v)
                .data()
                .iter()
                .map(|x| x.exp())
                .collect::<Vec<f64>>()
        };
        Ok(Distributions {
            partition: probs(p, &tape),
            compression: input
                .layers
                .iter()
                .zip(&c)
                .map(|((i, _), v)| (*i, probs(*v, &tape)))
                .collect(),
        })
    }

    /// Summed log-probability of `actions`, counting compression choices only
    /// at layers before the partition.
    fn log_prob_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        input: &PolicyInput,
        actions: &Actions,
    ) -> Result<Var> {
        let (p, c) = self.forward(tape, b, input)?;
        let mut terms = vec![tape.select_sum(p, &[actions.partition])?];
        for (((idx, _), v), choice) in input.layers.iter().zip(&c).zip(&actions.choices) {
            if *idx < actions.partition {
                terms.push(tape.select_sum(*v, &[*choice])?);
            }
        }
        let all = tape.concat(&terms, 0)?;
        tape.sum(all)
    }

    pub fn log_prob(&self, input: &PolicyInput, actions: &Actions) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let v = self.log_prob_var(&mut tape, &b, input, actions)?;
        tape.value(v).item()
    }
}

fn draw(probs: &[f64], rng: &mut SeededRng) -> Result<usize> {
    let w = WeightedIndex::new(probs)
        .map_err(|e| crate::Error::Numeric(format!("invalid distribution: {e}")))?;
    Ok(w.sample(rng))
}

/// Samples one strategy; compressions at or beyond the partition are dropped
/// and their log-probabilities excluded.
pub fn sample_strategy(
    d: &Distributions,
    input: &PolicyInput,
    rng: &mut SeededRng,
) -> Result<(Strategy, f64, Actions)> {
    let partition = draw(&d.partition, rng)?;
    let mut lp = d.partition[partition].ln();
    let mut choices = Vec::with_capacity(d.compression.len());
    for (idx, probs) in &d.compression {
        let c = draw(probs, rng)?;
        if *idx < partition {
            lp += probs[c].ln();
        }
        choices.push(c);
    }
    let actions = Actions { partition, choices };
    Ok((actions.strategy(input), lp, actions))
}

/// `b <- decay * b + (1 - decay) * mean`.
pub fn update_baseline(b: f64, mean: f64, decay: f64) -> f64 {
    decay * b + (1.0 - decay) * mean
}

/// One sampled and scored rollout. Every prefix state's return equals `reward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rollout: usize,
    pub actions: Actions,
    pub strategy: Strategy,
    pub log_prob: f64,
    pub reward: f64,
}

/// Gradient ascent on `(1/M) sum_j log p_j * (mean(R) - b)`. Returns the
/// advantage; a zero advantage leaves the parameters untouched.
pub fn reinforce_update(
    net: &mut ControllerNet,
    opt: &mut Optimizer,
    input: &PolicyInput,
    trajectories: &[Trajectory],
    baseline: f64,
) -> Result<f64> {
    if trajectories.is_empty() {
        bail!(Usage, "policy update without trajectories");
    }
    let adv = trajectories
        .iter()
        .map(|t| t.reward - baseline)
        .sum::<f64>()
        / trajectories.len() as f64;
    if adv == 0.0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape, true);
    let mut terms = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        terms.push(net.log_prob_var(&mut tape, &bound, input, &t.actions)?);
    }
    let all = tape.concat(&terms, 0)?;
    let total = tape.sum(all)?;
    let loss = tape.scale(total, -adv / trajectories.len() as f64)?;
    let grads = tape.backward(loss)?;
    net.params.absorb(&bound, &grads);
    net.params.fill_missing_grads();
    opt.step(&mut net.params)?;
    Ok(adv)
}

/// One row of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub rollout: usize,
    pub strategy: String,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub baseline: f64,
    pub log_prob_sum: f64,
    pub error: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Option<(Strategy, MetricsReport)>,
    pub log: Vec<EpisodeRecord>,
    /// Reports aligned with `log`.
    pub reports: Vec<MetricsReport>,
}

/// Runs `episodes x rollouts` policy-gradient search over `base`'s strategy space.
pub fn run_search(
    base: &ModelGraph,
    evaluator: &dyn Evaluator,
    cfg: &ControllerConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    let input = PolicyInput::new(base, &cfg.partitions, cfg.techniques.as_deref())?;
    let mut rng = crate::rng(cfg.seed);
    let mut net = ControllerNet::new(EMBEDDING_DIM, cfg.hidden, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let cached = CachedEvaluator::new(evaluator);
    let (pv, sv) = evaluator.variants();
    let mut baseline: Option<f64> = None;
    let mut result = SearchResult {
        best: None,
        log: Vec::new(),
        reports: Vec::new(),
    };
    for episode in 0..cfg.episodes {
        let dists = net.distributions(&input)?;
        let mut sampled = Vec::with_capacity(cfg.rollouts);
        for _ in 0..cfg.rollouts {
            let (s, lp, actions) = sample_strategy(&dists, &input, &mut rng)?;
            sampled.push((canonicalize(base, &s), lp, actions));
        }
        let evals: Vec<std::result::Result<MetricsReport, String>> = sampled
            .par_iter()
            .map(|(s, _, _)| cached.evaluate(s).map_err(|e| e.to_string()))
            .collect();
        let mut trajs = Vec::with_capacity(cfg.rollouts);
        let mut rows = Vec::with_capacity(cfg.rollouts);
        for (j, ((s, lp, actions), ev)) in sampled.into_iter().zip(evals).enumerate() {
            let (report, error) = match ev {
                Ok(r) => (r, String::new()),
                Err(e) => (MetricsReport::failed(evaluator.a_base(), pv, sv), e),
            };
            if result.best.as_ref().is_none_or(|(_, b)| report.r > b.r) && error.is_empty() {
                result.best = Some((s.clone(), report.clone()));
            }
            trajs.push(Trajectory {
                rollout: j,
                actions,
                strategy: s,
                log_prob: lp,
                reward: report.r,
            });
            rows.push((report, error));
        }
        let mean = trajs.iter().map(|t| t.reward).sum::<f64>() / trajs.len() as f64;
        let b = *baseline.get_or_insert(mean);
        reinforce_update(&mut net, &mut opt, &input, &trajs, b)?;
        for (t, (report, error)) in trajs.iter().zip(rows) {
            result.log.push(EpisodeRecord {
                episode,
                rollout: t.rollout,
                strategy: t.strategy.to_string(),
                a: report.a,
                p: report.p,
                s: report.s,
                r: report.r,
                baseline: b,
                log_prob_sum: t.log_prob,
                error,
                seed: cfg.seed,
            });
            result.reports.push(report);
        }
        baseline = Some(update_baseline(b, mean, cfg.baseline_decay));
    }
    Ok(result)
}
