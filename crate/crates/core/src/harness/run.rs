//! Subcommand implementations over a run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{Mode, RunConfig};
use super::dataset::{generate_dataset, SyntheticDataset};
use super::report::{emit_report, write_csv, DpCsvRow};
use crate::adversary::pipeline::{perf_of, TrainingEvaluator};
use crate::adversary::SessionData;
use crate::baselines::{dp_baseline_eval, grid_search};
use crate::controller::{run_search, ControllerConfig, EpisodeRecord, Evaluator};
use crate::error::{bail, Result};
use crate::metrics::MetricsRow;
use crate::model::{
    build_model, compression_ratio, load_checkpoint, save_checkpoint, ModelGraph, Strategy,
};
use crate::train::{self, fit_classifier};

pub const ENV_OUT: &str = "SPLITGUARD_OUT";
pub const ENV_THREADS: &str = "SPLITGUARD_THREADS";

/// A prepared run directory with its configuration.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct BaseRow {
    seed: u64,
    model: String,
    accuracy: f64,
    params: usize,
    macs: u64,
}

impl Run {
    /// Creates the directory (`SPLITGUARD_OUT` overrides the configured one)
    /// and writes the canonical config copy.
    pub fn prepare(cfg: RunConfig, mode: Mode) -> Result<Self> {
        if let Some(m) = cfg.mode {
            if m != mode {
                bail!(Config, "config is for {} but {} was requested", m, mode);
            }
        }
        let dir = match std::env::var_os(ENV_OUT) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => cfg.output_dir.clone(),
        };
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), cfg.to_json())?;
        Ok(Run { cfg, dir })
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("seed-{seed}"))
    }

    /// Loads the saved dataset when its spec matches, otherwise generates it.
    pub fn dataset(&self) -> Result<SyntheticDataset> {
        let d = self.dir.join("dataset");
        if d.join("labels.json").is_file() {
            let ds = SyntheticDataset::load(&d)?;
            if ds.spec == self.cfg.dataset {
                return Ok(ds);
            }
        }
        let ds = generate_dataset(&self.cfg.dataset)?;
        ds.save(&d)?;
        Ok(ds)
    }

    /// Loads the base checkpoint for `seed`, training it first if absent.
    pub fn base(&self, ds: &SyntheticDataset, seed: u64) -> Result<ModelGraph> {
        let d = self.seed_dir(seed).join("base");
        if d.join("manifest.json").is_file() {
            return load_checkpoint(&d);
        }
        let mut g = build_model(&self.cfg.model, self.cfg.dtype, &mut crate::rng(seed))?;
        let tb = ds.train_batch()?;
        fit_classifier(
            &mut g,
            &tb.x,
            &tb.coarse,
            None,
            &self.cfg.base_training,
            seed,
        )?;
        save_checkpoint(&g, &d)?;
        Ok(g)
    }

    fn evaluator(&self, ds: &SyntheticDataset, seed: u64) -> Result<TrainingEvaluator> {
        let base = self.base(ds, seed)?;
        let data = SessionData::from_dataset(ds, Some(&base))?;
        TrainingEvaluator::new(base, data, self.cfg.eval.clone(), seed)
    }

    fn run_id(&self) -> String {
        self.dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    pub fn train_base(&self) -> Result<()> {
        let ds = self.dataset()?;
        let mut rows = Vec::new();
        for &seed in &self.cfg.seeds {
            let g = self.base(&ds, seed)?;
            let eb = ds.eval_batch()?;
            rows.push(BaseRow {
                seed,
                model: self.cfg.model_name().to_string(),
                accuracy: train::accuracy_of(&g, &eb.x.to_dtype(g.dtype), &eb.coarse)?,
                params: g.total_params(),
                macs: g.total_macs()?,
            });
        }
        write_csv(&self.dir.join("base.csv"), &rows)
    }

    pub fn search(&self) -> Result<Strategy> {
        let ds = self.dataset()?;
        let mut episodes: Vec<EpisodeRecord> = Vec::new();
        let mut metrics = Vec::new();
        let mut best: Option<(Strategy, f64)> = None;
        for &seed in &self.cfg.seeds {
            let ev = self.evaluator(&ds, seed)?;
            let cfg = ControllerConfig {
                seed,
                ..self.cfg.controller.clone()
            };
            let t = Instant::now();
            let res = run_search(&ev.base, &ev, &cfg)?;
            let per = t.elapsed().as_secs_f64() / res.log.len().max(1) as f64;
            for (rec, rep) in res.log.iter().zip(&res.reports) {
                metrics.push(MetricsRow::from_report(
                    &self.run_id(),
                    rec.episode,
                    &rec.strategy,
                    rep,
                    "rl",
                    seed,
                    per,
                ));
            }
            if let Some((s, r)) = res.best {
                if best.as_ref().is_none_or(|(_, b)| r.r > *b) {
                    best = Some((s, r.r));
                }
            }
            episodes.extend(res.log);
        }
        write_csv(&self.dir.join("episodes.csv"), &episodes)?;
        write_csv(&self.dir.join("metrics.csv"), &metrics)?;
        self.finish(best)
    }

    pub fn grid(&self) -> Result<Strategy> {
        let ds = self.dataset()?;
        let mut metrics = Vec::new();
        let mut best: Option<(Strategy, f64)> = None;
        for &seed in &self.cfg.seeds {
            let ev = self.evaluator(&ds, seed)?;
            let t = Instant::now();
            let res = grid_search(&ev.base, &self.cfg.grid, &ev)?;
            let per = t.elapsed().as_secs_f64() / res.rows.len().max(1) as f64;
            for (i, row) in res.rows.iter().enumerate() {
                metrics.push(MetricsRow::from_report(
                    &self.run_id(),
                    i,
                    &row.strategy.to_string(),
                    &row.report,
                    "grid",
                    seed,
                    per,
                ));
            }
            if let Some((s, r)) = res.best {
                if best.as_ref().is_none_or(|(_, b)| r.r > *b) {
                    best = Some((s, r.r));
                }
            }
        }
        write_csv(&self.dir.join("metrics.csv"), &metrics)?;
        self.finish(best)
    }

    pub fn dp_baseline(&self) -> Result<()> {
        let ds = self.dataset()?;
        let mut metrics = Vec::new();
        let mut table = Vec::new();
        for &seed in &self.cfg.seeds {
            let base = self.base(&ds, seed)?;
            let data = SessionData::from_dataset(&ds, None)?;
            let parts = if self.cfg.dp_partitions.is_empty() {
                base.unit_boundaries()
                    .into_iter()
                    .filter(|p| *p > 0)
                    .collect()
            } else {
                self.cfg.dp_partitions.clone()
            };
            let t = Instant::now();
            let rows = dp_baseline_eval(&base, &parts, &self.cfg.noise, &data, &self.cfg.dp, seed)?;
            let per = t.elapsed().as_secs_f64() / rows.len().max(1) as f64;
            for (i, r) in rows.iter().enumerate() {
                let strategy = Strategy::new(r.partition).to_string();
                metrics.push(MetricsRow::from_report(
                    &self.run_id(),
                    i,
                    &strategy,
                    &r.report,
                    "dp",
                    seed,
                    per,
                ));
                table.push(DpCsvRow {
                    seed,
                    partition: r.partition,
                    multiplier: r.multiplier,
                    a: r.report.a,
                    a_base: r.report.a_base,
                    p: r.report.p,
                    s: r.report.s,
                    r: r.report.r,
                });
            }
        }
        write_csv(&self.dir.join("metrics.csv"), &metrics)?;
        write_csv(&self.dir.join("dp.csv"), &table)?;
        emit_report(&[&self.dir], &self.dir)?;
        Ok(())
    }

    /// Trains and attacks the configured strategy; saves the compressed model
    /// and the attacker per seed.
    pub fn attack(&self) -> Result<()> {
        let Some(text) = &self.cfg.strategy else {
            bail!(
                Config,
                "the attack command needs a `strategy` in the config"
            );
        };
        let s: Strategy = text.parse()?;
        let ds = self.dataset()?;
        let mut metrics = Vec::new();
        for &seed in &self.cfg.seeds {
            let ev = self.evaluator(&ds, seed)?;
            let t = Instant::now();
            let (g, out) = ev.session(&s)?;
            let perf = perf_of(&g, self.cfg.eval.perf)?;
            let cr = compression_ratio(&ev.base, &g)?;
            let report = crate::metrics::MetricsReport::new(
                out.accuracy,
                ev.a_base(),
                self.cfg.eval.privacy,
                out.privacy,
                self.cfg.eval.perf,
                perf,
                cr,
            )?;
            let d = self.seed_dir(seed);
            save_checkpoint(&out.model.compose(&g.name)?, &d.join("candidate"))?;
            if let Some(net) = &out.attacker.net {
                save_checkpoint(net, &d.join("attacker"))?;
            }
            let secs = t.elapsed().as_secs_f64();
            metrics.push(MetricsRow::from_report(
                &self.run_id(),
                0,
                &s.to_string(),
                &report,
                "attack",
                seed,
                secs,
            ));
        }
        write_csv(&self.dir.join("metrics.csv"), &metrics)
    }

    fn finish(&self, best: Option<(Strategy, f64)>) -> Result<Strategy> {
        let Some((s, _)) = best else {
            bail!(Numeric, "every candidate evaluation failed")
        };
        fs::write(self.dir.join("best_strategy.txt"), format!("{s}\n"))?;
        emit_report(&[&self.dir], &self.dir)?;
        Ok(s)
    }
}

/// Regenerates the summary and plots of `runs` into `out` (default: the first run).
pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if runs.is_empty() {
        bail!(Usage, "report needs at least one run directory");
    }
    for r in runs {
        if !r.is_dir() {
            bail!(Data, "run directory {} does not exist", r.display());
        }
    }
    let dirs: Vec<&Path> = runs.iter().map(|p| p.as_path()).collect();
    emit_report(&dirs, out.unwrap_or(&runs[0]))?;
    Ok(())
}
