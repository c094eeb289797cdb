//! Helpers shared by the integration tests.

#![allow(dead_code)]

pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitguard::compress::{apply_strategy, Knobs};
use splitguard::metrics::{MetricsReport, PerfVariant, PrivacyVariant};
use splitguard::model::{compression_ratio, ForwardCtx, ModelGraph, Strategy, TechniqueId};
use splitguard::tensor::{DType, Tape, Tensor, Var};
use splitguard::Result;

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]`.
pub fn rand_tensor(dims: &[usize], dtype: DType, r: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::with_dtype(
        dims,
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        dtype,
    )
    .unwrap()
}

/// Values with magnitude in `[0.2, 1]` and random sign, away from relu kinks.
pub fn away_from_zero(dims: &[usize], dtype: DType, r: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::with_dtype(dims, data, dtype).unwrap()
}

/// Distinct values spaced `0.05` apart in shuffled order, so max selections are stable.
pub fn distinct(dims: &[usize], dtype: DType, r: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = dims.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    data.shuffle(r);
    Tensor::with_dtype(dims, data, dtype).unwrap()
}

/// Central-difference step. The oracle always runs in double precision on
/// exactly promoted copies of the inputs.
pub const STEP: f64 = 1e-6;

fn promoted(t: &Tensor) -> Tensor {
    t.to_dtype(DType::F64)
}

fn promoted_model(g: &ModelGraph) -> ModelGraph {
    let mut m = g.clone();
    m.dtype = DType::F64;
    let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).collect();
    for n in names {
        let p = m.params.get_mut(&n).expect("listed");
        p.value = promoted(&p.value);
    }
    m
}

pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-3,
        DType::F64 => 1e-5,
    }
}

/// Scalar objective: the op output dotted with a fixed random projection.
fn objective(
    inputs: &[Tensor],
    build: &Build,
    proj: Option<&Tensor>,
    grad: bool,
) -> Result<(f64, Vec<Option<Tensor>>, Tensor)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = build(&mut tape, &vars)?;
    let out_value = tape.value(out).clone();
    let loss = match proj {
        Some(p) => {
            let c = tape.constant(p.clone());
            let m = tape.mul(out, c)?;
            tape.sum(m)?
        }
        None => out,
    };
    if !grad && proj.is_none() && out_value.numel() != 1 {
        return Ok((f64::NAN, Vec::new(), out_value));
    }
    let value = tape.value(loss).item()?;
    if !grad {
        return Ok((value, Vec::new(), out_value));
    }
    let g = tape.backward(loss)?;
    Ok((
        value,
        vars.iter().map(|v| g.get(*v).cloned()).collect(),
        out_value,
    ))
}

/// Norm-wise relative error between reverse-mode and central-difference
/// gradients over (a sample of) every input entry.
pub fn grad_check(inputs: &[Tensor], build: &Build, max_entries: usize, seed: u64) -> Result<f64> {
    let (_, _, out) = objective(inputs, build, None, false)?;
    let proj = if out.numel() == 1 {
        None
    } else {
        let mut r = rng(seed ^ 0xABCD);
        Some(rand_tensor(out.dims(), out.dtype(), &mut r))
    };
    let (_, analytic, _) = objective(inputs, build, proj.as_ref(), true)?;
    let proj = proj.as_ref();
    let h = STEP;
    let wide: Vec<Tensor> = inputs.iter().map(promoted).collect();
    let proj = proj.map(promoted);
    let mut r = rng(seed);
    let (mut num, mut den_a, mut den_n) = (0.0, 0.0, 0.0);
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks = sample(&mut r, n, max_entries);
        let zero = Tensor::zeros(t.dims(), t.dtype());
        let ga = analytic[i].as_ref().unwrap_or(&zero);
        for j in picks {
            let eval = |delta: f64| -> Result<(f64, f64)> {
                let mut xs = wide.clone();
                xs[i].data_mut()[j] += delta;
                let moved = xs[i].data()[j];
                Ok((objective(&xs, build, proj.as_ref(), false)?.0, moved))
            };
            let (lp, xp) = eval(h)?;
            let (lm, xm) = eval(-h)?;
            let fd = (lp - lm) / (xp - xm);
            let a = ga.data()[j];
            num += (a - fd) * (a - fd);
            den_a += a * a;
            den_n += fd * fd;
        }
    }
    let den = den_a.sqrt().max(den_n.sqrt()).max(1e-12);
    Ok(num.sqrt() / den)
}

/// Gradient check of a whole model over its trainable parameters and the
/// input batch, in training mode.
pub fn model_grad_check(g: &ModelGraph, batch: usize, per_tensor: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut dims = vec![batch];
    dims.extend_from_slice(&g.input_shape);
    let x = rand_tensor(&dims, g.dtype, &mut r);
    let out_dims = [batch, g.output_shape()?.iter().product()];
    let proj = rand_tensor(&out_dims, g.dtype, &mut r);
    let loss_of =
        |m: &ModelGraph, x: &Tensor, grad: bool| -> Result<(f64, Option<(ModelGraph, Tensor)>)> {
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape, grad);
            let xv = tape.leaf(x.clone(), grad);
            let y = m.forward(&mut tape, &bound, xv, &mut ForwardCtx::train(0))?;
            let y = tape.reshape(y, &out_dims)?;
            let c = tape.constant(proj.clone());
            let l = tape.mul(y, c)?;
            let l = tape.sum(l)?;
            let value = tape.value(l).item()?;
            if !grad {
                return Ok((value, None));
            }
            let grads = tape.backward(l)?;
            let gx = grads
                .get(xv)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.dims(), x.dtype()));
            let mut with = m.clone();
            with.params.absorb(&bound, &grads);
            Ok((value, Some((with, gx))))
        };
    let (_, analytic) = loss_of(g, &x, true)?;
    let (with, gx) = analytic.expect("gradients requested");
    let h = STEP;
    let wide = promoted_model(g);
    let wide_x = promoted(&x);
    let (mut num, mut den_a, mut den_n) = (0.0, 0.0, 0.0);
    let mut tally = |a: f64, fd: f64| {
        num += (a - fd) * (a - fd);
        den_a += a * a;
        den_n += fd * fd;
    };
    let names: Vec<String> = g
        .params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in &names {
        let n = g.params.tensor(name)?.numel();
        let picks = sample(&mut r, n, per_tensor);
        let grad = with.params.get(name).and_then(|p| p.grad.clone());
        for j in picks {
            let moved = |delta: f64| -> Result<(f64, f64)> {
                let mut m = wide.clone();
                let p = m.params.get_mut(name).expect("listed");
                p.value.data_mut()[j] += delta;
                let at = p.value.data()[j];
                Ok((loss_of(&m, &wide_x, false)?.0, at))
            };
            let (lp, xp) = moved(h)?;
            let (lm, xm) = moved(-h)?;
            tally(
                grad.as_ref().map_or(0.0, |t| t.data()[j]),
                (lp - lm) / (xp - xm),
            );
        }
    }
    for j in sample(&mut r, x.numel(), per_tensor) {
        let moved = |delta: f64| -> Result<(f64, f64)> {
            let mut xt = wide_x.clone();
            xt.data_mut()[j] += delta;
            let at = xt.data()[j];
            Ok((loss_of(&wide, &xt, false)?.0, at))
        };
        let (lp, xp) = moved(h)?;
        let (lm, xm) = moved(-h)?;
        tally(gx.data()[j], (lp - lm) / (xp - xm));
    }
    Ok(num.sqrt() / den_a.sqrt().max(den_n.sqrt()).max(1e-12))
}

fn sample(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        rand::seq::index::sample(r, n, k).into_vec()
    }
}

/// Partition positions of the toy search space.
pub const TOY_PARTITIONS: [usize; 3] = [0, 2, 3];

/// Techniques of the toy search space.
pub const TOY_TECHNIQUES: [TechniqueId; 2] = [TechniqueId::F1, TechniqueId::W1];

/// Deterministic closed-form stand-in for a trained evaluation: depth and
/// pruning cut leakage, compression costs a little accuracy and buys back
/// on-device headroom.
pub fn proxy_report(base: &ModelGraph, s: &Strategy) -> Result<MetricsReport> {
    let (g, _) = apply_strategy(base, s, &Knobs::default(), 0)?;
    let count = |t: TechniqueId| s.compressions.values().filter(|v| **v == t).count() as f64;
    let (f1, w1) = (count(TechniqueId::F1), count(TechniqueId::W1));
    let depth = s.partition as f64 / base.len() as f64;
    let a = 0.9 - 0.04 * f1 - 0.02 * w1;
    let p = (0.9 - 0.5 * depth - 0.15 * w1 - 0.05 * f1).clamp(0.0, 1.0);
    let perf = (1.0 - 0.6 * depth + 0.2 * f1 + 0.1 * w1).clamp(0.0, 1.0);
    MetricsReport::new(
        a,
        0.9,
        PrivacyVariant::P1,
        p,
        PerfVariant::S1,
        perf,
        compression_ratio(base, &g)?,
    )
}

/// Every raw action combination of the toy space, with its canonical strategy.
pub fn toy_strategies(base: &ModelGraph) -> Vec<Strategy> {
    let layers = base.compressible_indices();
    let mut out = Vec::new();
    for &p in &TOY_PARTITIONS {
        let mut combos: Vec<Vec<Option<TechniqueId>>> = vec![vec![]];
        for _ in &layers {
            let mut next = Vec::new();
            for c in &combos {
                for t in [None, Some(TOY_TECHNIQUES[0]), Some(TOY_TECHNIQUES[1])] {
                    let mut c = c.clone();
                    c.push(t);
                    next.push(c);
                }
            }
            combos = next;
        }
        for c in combos {
            let mut s = Strategy::new(p);
            for (idx, t) in layers.iter().zip(c) {
                if let (Some(t), true) = (t, *idx < p) {
                    s = s.with(*idx, t);
                }
            }
            out.push(s);
        }
    }
    out
}

/// Maximum proxy reward over the whole toy space.
pub fn toy_exhaustive_max(base: &ModelGraph) -> f64 {
    toy_strategies(base)
        .iter()
        .map(|s| proxy_report(base, s).unwrap().r)
        .fold(f64::MIN, f64::max)
}
