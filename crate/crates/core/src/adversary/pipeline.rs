//! Candidate evaluation: compress, retrain against the adversary, score.

use serde::{Deserialize, Serialize};

use super::{
    train_proactive, train_reactive, AdversaryMode, AttackSpec, SessionData, SessionOutcome,
    SplitModel, TrainSchedule,
};
use crate::compress::{apply_strategy, Knobs};
use crate::controller::Evaluator;
use crate::error::Result;
use crate::harness::dataset::SyntheticDataset;
use crate::metrics::{MetricsReport, PerfVariant, PrivacyVariant};
use crate::model::{compression_ratio, ModelGraph, Strategy};
use crate::train;

/// Everything that fixes how a candidate is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: AdversaryMode,
    pub attack: AttackSpec,
    pub schedule: TrainSchedule,
    pub knobs: Knobs,
    pub privacy: PrivacyVariant,
    pub perf: PerfVariant,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            mode: AdversaryMode::Reactive,
            attack: AttackSpec::default(),
            schedule: TrainSchedule::default(),
            knobs: Knobs::default(),
            privacy: PrivacyVariant::P1,
            perf: PerfVariant::S1,
        }
    }
}

impl SessionData {
    /// Splits of `ds`, with teacher logits from `teacher` on the train split.
    pub fn from_dataset(ds: &SyntheticDataset, teacher: Option<&ModelGraph>) -> Result<Self> {
        ds.check_splits()?;
        let train_b = ds.train_batch()?;
        let teacher_logits = match teacher {
            Some(t) => Some(train::predict(t, &train_b.x.to_dtype(t.dtype))?),
            None => None,
        };
        Ok(SessionData {
            train: train_b,
            aux: ds.aux_batch()?,
            eval: ds.eval_batch()?,
            teacher_logits,
            hidden_classes: ds.spec.fine_classes,
        })
    }
}

/// Runs one adversarial session on an already partitioned graph.
pub fn run_session(
    g: &ModelGraph,
    data: &SessionData,
    settings: &EvalSettings,
    seed: u64,
) -> Result<SessionOutcome> {
    let model = SplitModel::from_graph(g)?;
    match settings.mode {
        AdversaryMode::Reactive => train_reactive(
            model,
            data,
            &settings.attack,
            &settings.schedule,
            settings.privacy,
            seed,
        ),
        AdversaryMode::Proactive => train_proactive(
            model,
            data,
            &settings.attack,
            &settings.schedule,
            settings.privacy,
            seed,
        ),
    }
}

/// The S indicator selected by `variant`.
pub fn perf_of(g: &ModelGraph, variant: PerfVariant) -> Result<f64> {
    let (s1, s2) = g.perf_indicators()?;
    Ok(match variant {
        PerfVariant::S1 => s1,
        PerfVariant::S2 => s2,
    })
}

/// Scores strategies by compressing the trained base, retraining the pieces
/// under the configured adversary and measuring A, P and S.
#[derive(Debug, Clone)]
pub struct TrainingEvaluator {
    pub base: ModelGraph,
    pub a_base: f64,
    pub data: SessionData,
    pub settings: EvalSettings,
    pub seed: u64,
}

impl TrainingEvaluator {
    pub fn new(
        base: ModelGraph,
        data: SessionData,
        settings: EvalSettings,
        seed: u64,
    ) -> Result<Self> {
        settings.knobs.validate()?;
        settings.schedule.validate()?;
        let a_base = {
            let pred = train::predict(&base, &data.eval.x.to_dtype(base.dtype))?.argmax_rows()?;
            crate::metrics::accuracy(&pred, &data.eval.coarse)?
        };
        Ok(TrainingEvaluator {
            base,
            a_base,
            data,
            settings,
            seed,
        })
    }

    /// Full session result for `s`, including the trained models.
    pub fn session(&self, s: &Strategy) -> Result<(ModelGraph, SessionOutcome)> {
        let seed = crate::seed_for(&s.to_string(), self.seed);
        let (g, _) = apply_strategy(&self.base, s, &self.settings.knobs, seed)?;
        let out = run_session(&g, &self.data, &self.settings, seed)?;
        Ok((g, out))
    }
}

impl Evaluator for TrainingEvaluator {
    fn evaluate(&self, s: &Strategy) -> Result<MetricsReport> {
        let (g, out) = self.session(s)?;
        let perf = perf_of(&g, self.settings.perf)?;
        let cr = compression_ratio(&self.base, &g)?;
        MetricsReport::new(
            out.accuracy,
            self.a_base,
            self.settings.privacy,
            out.privacy,
            self.settings.perf,
            perf,
            cr,
        )
    }

    fn a_base(&self) -> f64 {
        self.a_base
    }

    fn variants(&self) -> (PrivacyVariant, PerfVariant) {
        (self.settings.privacy, self.settings.perf)
    }
}
