//! Procedural image dataset with a coarse task label and a hidden fine attribute.
//!
//! The coarse class picks a shape layout; the fine attribute picks the texture
//! drawn inside it. With coupling `rho` the fine attribute copies
//! `coarse % fine_classes`, otherwise it is drawn independently.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{blob, DType, Tensor};

pub const MAX_COARSE: usize = 6;
pub const MAX_FINE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub coarse_classes: usize,
    pub fine_classes: usize,
    pub rho: f64,
    pub noise: f64,
    pub train: usize,
    pub aux: usize,
    pub eval: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            samples: 4000,
            height: 16,
            width: 16,
            coarse_classes: 4,
            fine_classes: 2,
            rho: 0.5,
            noise: 0.05,
            train: 2400,
            aux: 800,
            eval: 800,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// A smaller variant with the same proportions.
    pub fn scaled(samples: usize, seed: u64) -> Self {
        let train = samples * 3 / 5;
        let aux = samples / 5;
        DatasetSpec {
            samples,
            train,
            aux,
            eval: samples - train - aux,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_classes < 2 || self.coarse_classes > MAX_COARSE {
            bail!(
                Config,
                "coarse classes must be in 2..={}, got {}",
                MAX_COARSE,
                self.coarse_classes
            );
        }
        if self.fine_classes < 2 || self.fine_classes > MAX_FINE {
            bail!(
                Config,
                "fine classes must be in 2..={}, got {}",
                MAX_FINE,
                self.fine_classes
            );
        }
        if self.height < 8 || self.width < 8 {
            bail!(Config, "images must be at least 8x8");
        }
        if !(0.0..=1.0).contains(&self.rho) || !(self.noise >= 0.0) {
            bail!(
                Config,
                "rho must lie in [0, 1] and noise must be non-negative"
            );
        }
        if self.train == 0
            || self.aux == 0
            || self.eval == 0
            || self.train + self.aux + self.eval > self.samples
        {
            bail!(
                Config,
                "splits {}/{}/{} do not fit {} samples",
                self.train,
                self.aux,
                self.eval,
                self.samples
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
    pub train: Vec<usize>,
    pub aux: Vec<usize>,
    pub eval: Vec<usize>,
    pub spec: DatasetSpec,
}

/// A gathered subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.coarse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coarse.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.x.select_rows(rows)?,
            coarse: rows.iter().map(|r| self.coarse[*r]).collect(),
            fine: rows.iter().map(|r| self.fine[*r]).collect(),
        })
    }
}

fn balanced(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % classes).collect();
    v.shuffle(rng);
    v
}

/// Whether pixel `(y, x)` lies inside shape `class` anchored at `(cy, cx)`.
fn inside(class: usize, y: isize, x: isize, cy: isize, cx: isize, r: isize) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match class {
        0 => dy.abs() <= 1 && dx.abs() <= r,
        1 => dx.abs() <= 1 && dy.abs() <= r,
        2 => dy.abs().max(dx.abs()) <= r && dy.abs().max(dx.abs()) >= r - 1,
        3 => (dy == dx || dy == -dx || (dy - dx).abs() == 1) && dy.abs() <= r,
        4 => dy.abs() + dx.abs() <= r,
        _ => (dy.abs() <= 1 || dx.abs() <= 1) && dy.abs() <= r && dx.abs() <= r,
    }
}

fn texture(fine: usize, y: isize, x: isize) -> f64 {
    match fine {
        0 => 1.0,
        1 => {
            if (y + x).rem_euclid(2) == 0 {
                1.0
            } else {
                0.35
            }
        }
        2 => {
            if y.rem_euclid(2) == 0 {
                1.0
            } else {
                0.35
            }
        }
        _ => {
            if x.rem_euclid(2) == 0 {
                1.0
            } else {
                0.35
            }
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = crate::rng(spec.seed);
    let n = spec.samples;
    let coarse = balanced(n, spec.coarse_classes, &mut rng);
    let independent = balanced(n, spec.fine_classes, &mut rng);
    let fine: Vec<usize> = (0..n)
        .map(|i| {
            if rng.random::<f64>() < spec.rho {
                coarse[i] % spec.fine_classes
            } else {
                independent[i]
            }
        })
        .collect();
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("positive std");
    let mut data = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let r = (h.min(w) as isize) / 4 + rng.random_range(0i64..2) as isize;
        let cy = h as isize / 2 + rng.random_range(-2i64..=2) as isize;
        let cx = w as isize / 2 + rng.random_range(-2i64..=2) as isize;
        let bg = rng.random_range(0.0..0.2);
        let fg = rng.random_range(0.75..1.0);
        // fine attribute 0 draws a bright shape; odd attributes invert polarity
        let invert = fine[i] % 2 == 1 && spec.fine_classes == 2;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut v = if inside(coarse[i], y, x, cy, cx, r) {
                    bg + (fg - bg) * texture(fine[i], y, x)
                } else {
                    bg
                };
                if invert {
                    v = 1.0 - v;
                }
                if spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let images = Tensor::with_dtype(&[n, 1, h, w], data, DType::F32)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let train = order[..spec.train].to_vec();
    let aux = order[spec.train..spec.train + spec.aux].to_vec();
    let eval = order[spec.train + spec.aux..spec.train + spec.aux + spec.eval].to_vec();
    Ok(SyntheticDataset {
        images,
        coarse,
        fine,
        train,
        aux,
        eval,
        spec: spec.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Labels {
    spec: DatasetSpec,
    coarse: Vec<usize>,
    fine: Vec<usize>,
    train: Vec<usize>,
    aux: Vec<usize>,
    eval: Vec<usize>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.coarse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coarse.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.images.select_rows(rows)?,
            coarse: rows.iter().map(|r| self.coarse[*r]).collect(),
            fine: rows.iter().map(|r| self.fine[*r]).collect(),
        })
    }

    pub fn train_batch(&self) -> Result<Batch> {
        self.batch(&self.train)
    }

    pub fn aux_batch(&self) -> Result<Batch> {
        self.batch(&self.aux)
    }

    pub fn eval_batch(&self) -> Result<Batch> {
        self.batch(&self.eval)
    }

    /// Split indices must be in range and pairwise disjoint.
    pub fn check_splits(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, split) in [
            ("train", &self.train),
            ("aux", &self.aux),
            ("eval", &self.eval),
        ] {
            for &i in split {
                if i >= self.len() {
                    bail!(Data, "{} index {} out of range", name, i);
                }
                if !seen.insert(i) {
                    bail!(Data, "sample {} appears in more than one split", i);
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        blob::save(&self.images, &dir.join("images.tblb"))?;
        let labels = Labels {
            spec: self.spec.clone(),
            coarse: self.coarse.clone(),
            fine: self.fine.clone(),
            train: self.train.clone(),
            aux: self.aux.clone(),
            eval: self.eval.clone(),
        };
        fs::write(dir.join("labels.json"), serde_json::to_string(&labels)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let images = blob::load(&dir.join("images.tblb"))?;
        let text = fs::read_to_string(dir.join("labels.json"))?;
        let l: Labels = serde_json::from_str(&text)
            .map_err(|e| crate::Error::Format(format!("labels: {}", e)))?;
        if images.rank() != 4
            || images.dims()[0] != l.coarse.len()
            || l.fine.len() != l.coarse.len()
        {
            bail!(
                Data,
                "images {:?} do not match {} labels",
                images.dims(),
                l.coarse.len()
            );
        }
        let ds = SyntheticDataset {
            images,
            coarse: l.coarse,
            fine: l.fine,
            train: l.train,
            aux: l.aux,
            eval: l.eval,
            spec: l.spec,
        };
        ds.check_splits()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = DatasetSpec::scaled(400, 5);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(blob::encode(&a.images), blob::encode(&b.images));
        assert_eq!(a.coarse, b.coarse);
        let mut counts = [0usize; 4];
        a.coarse.iter().for_each(|c| counts[*c] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        a.check_splits().unwrap();
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rho_one_determines_fine() {
        let spec = DatasetSpec {
            rho: 1.0,
            ..DatasetSpec::scaled(200, 1)
        };
        let d = generate_dataset(&spec).unwrap();
        assert!(d.coarse.iter().zip(&d.fine).all(|(c, f)| c % 2 == *f));
    }

    #[test]
    fn too_many_classes_is_config_error() {
        let spec = DatasetSpec {
            coarse_classes: 9,
            ..Default::default()
        };
        assert!(matches!(
            generate_dataset(&spec),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn overlapping_splits_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = generate_dataset(&DatasetSpec::scaled(100, 2)).unwrap();
        d.aux[0] = d.train[0];
        d.save(dir.path()).unwrap();
        assert!(matches!(
            SyntheticDataset::load(dir.path()),
            Err(crate::Error::Data(_))
        ));
    }
}
