//! Accuracy, privacy losses, performance indicators and the reward.

pub mod ssim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;
pub use ssim::SsimParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrivacyVariant {
    P0,
    #[default]
    P1,
    P2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerfVariant {
    #[default]
    S1,
    S2,
}

impl fmt::Display for PrivacyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrivacyVariant::P0 => "p0",
            PrivacyVariant::P1 => "p1",
            PrivacyVariant::P2 => "p2",
        })
    }
}

impl fmt::Display for PerfVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerfVariant::S1 => "s1",
            PerfVariant::S2 => "s2",
        })
    }
}

impl FromStr for PrivacyVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p0" => Ok(PrivacyVariant::P0),
            "p1" => Ok(PrivacyVariant::P1),
            "p2" => Ok(PrivacyVariant::P2),
            _ => bail!(Parse, "unknown privacy variant {:?}", s),
        }
    }
}

impl FromStr for PerfVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(PerfVariant::S1),
            "s2" => Ok(PerfVariant::S2),
            _ => bail!(Parse, "unknown performance variant {:?}", s),
        }
    }
}

/// `1 - mismatches / m`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        bail!(Usage, "accuracy of an empty prediction set");
    }
    if pred.len() != truth.len() {
        bail!(
            Dimension,
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        );
    }
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(1.0 - wrong as f64 / pred.len() as f64)
}

/// `1 - err / normalizer`, clamped to `[0, 1]`.
pub fn privacy_p0(recon_err: f64, normalizer: f64) -> Result<f64> {
    if !(normalizer > 0.0) {
        bail!(
            Degenerate,
            "reconstruction normalizer must be positive, got {}",
            normalizer
        );
    }
    if recon_err < 0.0 || !recon_err.is_finite() {
        bail!(Numeric, "invalid reconstruction error {}", recon_err);
    }
    Ok((1.0 - recon_err / normalizer).clamp(0.0, 1.0))
}

/// Mean over samples of the per-sample mean squared error.
pub fn reconstruction_error(x: &Tensor, recon: &Tensor) -> Result<f64> {
    if x.dims() != recon.dims() {
        bail!(
            Dimension,
            "reconstruction {:?} does not match input {:?}",
            recon.dims(),
            x.dims()
        );
    }
    let n = x.numel();
    Ok(x.data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64)
}

/// The per-pixel mean image of a batch `[N, ...]`.
pub fn mean_image(x: &Tensor) -> Result<Tensor> {
    let n = x.dims()[0];
    let per = x.numel() / n;
    let mut m = vec![0.0; per];
    for row in x.data().chunks(per) {
        m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= n as f64);
    let mut dims = x.dims().to_vec();
    dims[0] = 1;
    Tensor::with_dtype(&dims, m, x.dtype())
}

/// Error of the blind decoder that always outputs the mean image.
pub fn mean_image_error(x: &Tensor) -> Result<f64> {
    let m = mean_image(x)?;
    let n = x.dims()[0];
    let rows: Vec<usize> = vec![0; n];
    reconstruction_error(x, &m.select_rows(&rows)?)
}

/// Mean clamped SSIM between inputs and reconstructions.
pub fn privacy_p1(x: &Tensor, recon: &Tensor, params: &SsimParams) -> Result<f64> {
    let per = ssim::ssim_per_image(x, recon, params)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Hidden-attribute inference accuracy.
pub fn privacy_p2(pred: &[usize], hidden: &[usize]) -> Result<f64> {
    if hidden.iter().all(|h| Some(h) == hidden.first()) {
        bail!(
            Data,
            "hidden attribute takes a single value; inference accuracy is uninformative"
        );
    }
    accuracy(pred, hidden)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_a: f64,
    pub r_p: f64,
    pub r_s: f64,
    pub r: f64,
}

/// `R = (A / A_base) (1 - P) S (2 - S)`.
pub fn reward(a: f64, a_base: f64, p: f64, s: f64) -> Result<RewardBreakdown> {
    if !(a_base > 0.0) {
        bail!(Config, "baseline accuracy must be positive, got {}", a_base);
    }
    for (name, v) in [("A", a), ("P", p), ("S", s)] {
        if !(0.0..=1.0).contains(&v) {
            bail!(Config, "{} must lie in [0, 1], got {}", name, v);
        }
    }
    let r_a = a / a_base;
    let r_p = 1.0 - p;
    let r_s = s * (2.0 - s);
    Ok(RewardBreakdown {
        r_a,
        r_p,
        r_s,
        r: r_a * r_p * r_s,
    })
}

/// Evaluation of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub a: f64,
    pub a_base: f64,
    pub p_variant: PrivacyVariant,
    pub p: f64,
    pub s_variant: PerfVariant,
    pub s: f64,
    pub cr: f64,
    pub r_a: f64,
    pub r_p: f64,
    pub r_s: f64,
    pub r: f64,
}

impl MetricsReport {
    pub fn new(
        a: f64,
        a_base: f64,
        p_variant: PrivacyVariant,
        p: f64,
        s_variant: PerfVariant,
        s: f64,
        cr: f64,
    ) -> Result<Self> {
        let b = reward(a, a_base, p, s)?;
        Ok(MetricsReport {
            a,
            a_base,
            p_variant,
            p,
            s_variant,
            s,
            cr,
            r_a: b.r_a,
            r_p: b.r_p,
            r_s: b.r_s,
            r: b.r,
        })
    }

    /// A report for a candidate whose evaluation failed.
    pub fn failed(a_base: f64, p_variant: PrivacyVariant, s_variant: PerfVariant) -> Self {
        MetricsReport {
            a: 0.0,
            a_base,
            p_variant,
            p: 1.0,
            s_variant,
            s: 0.0,
            cr: 0.0,
            r_a: 0.0,
            r_p: 0.0,
            r_s: 0.0,
            r: 0.0,
        }
    }
}

/// One CSV row of a metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub episode: usize,
    pub strategy: String,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "A_base")]
    pub a_base: f64,
    #[serde(rename = "P_variant")]
    pub p_variant: PrivacyVariant,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "S_variant")]
    pub s_variant: PerfVariant,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "R_A")]
    pub r_a: f64,
    #[serde(rename = "R_P")]
    pub r_p: f64,
    #[serde(rename = "R_S")]
    pub r_s: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub wall_seconds: f64,
    pub method: String,
    pub seed: u64,
}

impl MetricsRow {
    pub fn from_report(
        run_id: &str,
        episode: usize,
        strategy: &str,
        m: &MetricsReport,
        method: &str,
        seed: u64,
        wall_seconds: f64,
    ) -> Self {
        MetricsRow {
            run_id: run_id.to_string(),
            episode,
            strategy: strategy.to_string(),
            a: m.a,
            a_base: m.a_base,
            p_variant: m.p_variant,
            p: m.p,
            s_variant: m.s_variant,
            s: m.s,
            cr: m.cr,
            r_a: m.r_a,
            r_p: m.r_p,
            r_s: m.r_s,
            r: m.r,
            wall_seconds,
            method: method.to_string(),
            seed,
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            a: self.a,
            a_base: self.a_base,
            p_variant: self.p_variant,
            p: self.p,
            s_variant: self.s_variant,
            s: self.s,
            cr: self.cr,
            r_a: self.r_a,
            r_p: self.r_p,
            r_s: self.r_s,
            r: self.r,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        let t: Vec<usize> = (0..10).collect();
        let mut p = t.clone();
        p[3] = 99;
        assert!((accuracy(&p, &t).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn p0_cases() {
        assert_eq!(privacy_p0(0.0, 2.0).unwrap(), 1.0);
        assert_eq!(privacy_p0(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(privacy_p0(1.0, 2.0).unwrap(), 0.5);
        assert_eq!(privacy_p0(5.0, 2.0).unwrap(), 0.0);
        assert!(matches!(privacy_p0(1.0, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn p2_cases() {
        let h = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let mut p = h;
        p[0] = 1;
        p[1] = 0;
        p[2] = 1;
        assert!((privacy_p2(&p, &h).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(privacy_p2(&h, &h).unwrap(), 1.0);
        assert!(matches!(privacy_p2(&[0, 0], &[1, 1]), Err(Error::Data(_))));
    }

    #[test]
    fn reward_boundaries() {
        assert_eq!(reward(0.9, 0.9, 1.0, 0.5).unwrap().r, 0.0);
        assert_eq!(reward(0.8, 0.8, 0.0, 1.0).unwrap().r, 1.0);
        assert!(matches!(reward(0.8, 0.0, 0.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn csv_header_order() {
        let m = MetricsReport::new(
            0.9,
            0.95,
            PrivacyVariant::P1,
            0.4,
            PerfVariant::S1,
            0.6,
            0.1,
        )
        .unwrap();
        let row = MetricsRow::from_report("r", 0, "P:1", &m, "rl", 7, 0.5);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert!(text.starts_with(
            "run_id,episode,strategy,A,A_base,P_variant,P,S_variant,S,CR,R_A,R_P,R_S,R,wall_seconds,method,seed\n"
        ));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let back: MetricsRow = r.deserialize().next().unwrap().unwrap();
        assert_eq!(back, row);
    }
}
