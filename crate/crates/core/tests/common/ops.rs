//! Differentiable-op cases for the finite-difference oracle.

use rand_chacha::ChaCha8Rng;
use splitguard::metrics::SsimParams;
use splitguard::tensor::{DType, Tape, Tensor, Var};
use splitguard::Result;

use super::{away_from_zero, distinct, rand_tensor, rng, Build};

pub const DTYPES: [DType; 2] = [DType::F32, DType::F64];

/// Receives `(name, dtype, inputs, build)` for one case.
pub type Visit<'a> = dyn FnMut(&str, DType, Vec<Tensor>, &Build) + 'a;

fn each(
    visit: &mut Visit,
    name: &str,
    make: impl Fn(DType, &mut ChaCha8Rng) -> Vec<Tensor>,
    build: &Build,
) {
    for dtype in DTYPES {
        let mut r = rng(11);
        visit(name, dtype, make(dtype, &mut r), build);
    }
}

/// Every differentiable tape op, in both dtypes.
pub fn for_each_case(visit: &mut Visit) {
    for (stride, padding, groups) in [(1, 1, 1), (2, 0, 1), (1, 1, 2), (2, 1, 4)] {
        each(
            visit,
            &format!("conv2d s{stride} p{padding} g{groups}"),
            |d, r| {
                vec![
                    rand_tensor(&[2, 4, 5, 5], d, r),
                    rand_tensor(&[4, 4 / groups, 3, 3], d, r),
                    rand_tensor(&[4], d, r),
                ]
            },
            &move |t: &mut Tape, v: &[Var]| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, padding, groups)
            },
        );
    }
    for (stride, padding, op) in [(1, 1, 0), (2, 1, 1), (2, 0, 0)] {
        each(
            visit,
            &format!("conv_transpose s{stride} p{padding} op{op}"),
            |d, r| {
                vec![
                    rand_tensor(&[2, 3, 4, 4], d, r),
                    rand_tensor(&[3, 2, 3, 3], d, r),
                    rand_tensor(&[2], d, r),
                ]
            },
            &move |t: &mut Tape, v: &[Var]| {
                t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, padding, op)
            },
        );
    }
    each(
        visit,
        "linear",
        |d, r| {
            vec![
                rand_tensor(&[3, 6], d, r),
                rand_tensor(&[4, 6], d, r),
                rand_tensor(&[4], d, r),
            ]
        },
        &|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], Some(v[2])),
    );
    each(
        visit,
        "linear no bias",
        |d, r| vec![rand_tensor(&[3, 6], d, r), rand_tensor(&[4, 6], d, r)],
        &|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], None),
    );
    each(
        visit,
        "relu",
        |d, r| vec![away_from_zero(&[3, 7], d, r)],
        &|t: &mut Tape, v: &[Var]| t.relu(v[0]),
    );
    each(
        visit,
        "sigmoid",
        |d, r| vec![rand_tensor(&[3, 7], d, r)],
        &|t: &mut Tape, v: &[Var]| t.sigmoid(v[0]),
    );
    each(
        visit,
        "tanh",
        |d, r| vec![rand_tensor(&[3, 7], d, r)],
        &|t: &mut Tape, v: &[Var]| t.tanh(v[0]),
    );
    each(
        visit,
        "scale",
        |d, r| vec![rand_tensor(&[3, 7], d, r)],
        &|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7),
    );
    each(
        visit,
        "add",
        |d, r| vec![rand_tensor(&[3, 7], d, r), rand_tensor(&[3, 7], d, r)],
        &|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]),
    );
    each(
        visit,
        "mul",
        |d, r| vec![rand_tensor(&[3, 7], d, r), rand_tensor(&[3, 7], d, r)],
        &|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]),
    );
    each(
        visit,
        "add_const",
        |d, r| vec![rand_tensor(&[3, 7], d, r)],
        &|t: &mut Tape, v: &[Var]| {
            let c = Tensor::full(&[3, 7], 0.25, DType::F64);
            t.add_const(v[0], &c)
        },
    );
    each(
        visit,
        "mul self",
        |d, r| vec![rand_tensor(&[2, 5], d, r)],
        &|t: &mut Tape, v: &[Var]| t.mul(v[0], v[0]),
    );
    each(
        visit,
        "softmax",
        |d, r| vec![rand_tensor(&[3, 5], d, r)],
        &|t: &mut Tape, v: &[Var]| t.softmax_rows(v[0]),
    );
    each(
        visit,
        "log_softmax",
        |d, r| vec![rand_tensor(&[3, 5], d, r)],
        &|t: &mut Tape, v: &[Var]| t.log_softmax_rows(v[0]),
    );
    each(
        visit,
        "max_pool",
        |d, r| vec![distinct(&[2, 2, 6, 6], d, r)],
        &|t: &mut Tape, v: &[Var]| t.max_pool2d(v[0], 2, 2),
    );
    each(
        visit,
        "max_pool overlapping",
        |d, r| vec![distinct(&[1, 2, 5, 5], d, r)],
        &|t: &mut Tape, v: &[Var]| t.max_pool2d(v[0], 3, 1),
    );
    each(
        visit,
        "avg_pool",
        |d, r| vec![rand_tensor(&[2, 2, 6, 6], d, r)],
        &|t: &mut Tape, v: &[Var]| t.avg_pool2d(v[0], 3, 1),
    );
    each(
        visit,
        "global_avg_pool",
        |d, r| vec![rand_tensor(&[2, 3, 4, 4], d, r)],
        &|t: &mut Tape, v: &[Var]| t.global_avg_pool(v[0]),
    );
    each(
        visit,
        "upsample",
        |d, r| vec![rand_tensor(&[2, 2, 3, 3], d, r)],
        &|t: &mut Tape, v: &[Var]| t.upsample_nearest(v[0], 2),
    );
    each(
        visit,
        "batch_norm train",
        |d, r| {
            vec![
                rand_tensor(&[4, 3, 3, 3], d, r),
                rand_tensor(&[3], d, r),
                rand_tensor(&[3], d, r),
            ]
        },
        &|t: &mut Tape, v: &[Var]| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    );
    each(
        visit,
        "batch_norm train 2d",
        |d, r| {
            vec![
                rand_tensor(&[5, 3], d, r),
                rand_tensor(&[3], d, r),
                rand_tensor(&[3], d, r),
            ]
        },
        &|t: &mut Tape, v: &[Var]| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    );
    each(
        visit,
        "batch_norm eval",
        |d, r| {
            vec![
                rand_tensor(&[4, 3, 3, 3], d, r),
                rand_tensor(&[3], d, r),
                rand_tensor(&[3], d, r),
            ]
        },
        &|t: &mut Tape, v: &[Var]| {
            t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
        },
    );
    each(
        visit,
        "dropout",
        |d, r| vec![rand_tensor(&[4, 6], d, r)],
        &|t: &mut Tape, v: &[Var]| t.dropout(v[0], 0.3, &mut rng(5)),
    );
    each(
        visit,
        "reshape",
        |d, r| vec![rand_tensor(&[2, 3, 4], d, r)],
        &|t: &mut Tape, v: &[Var]| t.reshape(v[0], &[6, 4]),
    );
    each(
        visit,
        "flatten",
        |d, r| vec![rand_tensor(&[2, 3, 2, 2], d, r)],
        &|t: &mut Tape, v: &[Var]| t.flatten(v[0]),
    );
    each(
        visit,
        "concat",
        |d, r| vec![rand_tensor(&[2, 3, 2], d, r), rand_tensor(&[2, 1, 2], d, r)],
        &|t: &mut Tape, v: &[Var]| t.concat(&[v[0], v[1]], 1),
    );
    each(
        visit,
        "narrow",
        |d, r| vec![rand_tensor(&[2, 5, 3], d, r)],
        &|t: &mut Tape, v: &[Var]| t.narrow(v[0], 1, 1, 3),
    );
    each(
        visit,
        "sum",
        |d, r| vec![rand_tensor(&[3, 4], d, r)],
        &|t: &mut Tape, v: &[Var]| t.sum(v[0]),
    );
    each(
        visit,
        "mean",
        |d, r| vec![rand_tensor(&[3, 4], d, r)],
        &|t: &mut Tape, v: &[Var]| t.mean(v[0]),
    );
    each(
        visit,
        "select_sum",
        |d, r| vec![rand_tensor(&[3, 4], d, r)],
        &|t: &mut Tape, v: &[Var]| t.select_sum(v[0], &[0, 5, 5, 11]),
    );
    each(
        visit,
        "cross_entropy",
        |d, r| vec![rand_tensor(&[4, 3], d, r)],
        &|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[0, 2, 1, 2]),
    );
    each(
        visit,
        "mse",
        |d, r| vec![rand_tensor(&[2, 6], d, r)],
        &|t: &mut Tape, v: &[Var]| {
            let target =
                Tensor::new_f64(&[2, 6], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())
                    .unwrap();
            t.mse(v[0], &target)
        },
    );
    each(
        visit,
        "kl_div",
        |d, r| vec![rand_tensor(&[3, 4], d, r)],
        &|t: &mut Tape, v: &[Var]| {
            let teacher =
                Tensor::new_f64(&[3, 4], (0..12).map(|i| (i as f64 * 0.9).cos()).collect())
                    .unwrap();
            t.kl_div_logits(v[0], &teacher)
        },
    );
    each(
        visit,
        "ssim",
        |d, r| {
            let x = rand_tensor(&[2, 1, 9, 9], d, r);
            let data = x.data().iter().map(|v| 0.5 + 0.4 * v).collect();
            vec![Tensor::with_dtype(&[2, 1, 9, 9], data, d).unwrap()]
        },
        &|t: &mut Tape, v: &[Var]| {
            let target = Tensor::new_f64(
                &[2, 1, 9, 9],
                (0..162)
                    .map(|i| 0.5 + 0.3 * (i as f64 * 0.21).sin())
                    .collect(),
            )
            .unwrap();
            t.ssim(v[0], &target, &SsimParams::default())
        },
    );
    each(
        visit,
        "conv-relu-pool-fc",
        |d, r| {
            vec![
                rand_tensor(&[2, 1, 6, 6], d, r),
                rand_tensor(&[3, 1, 3, 3], d, r),
                rand_tensor(&[4, 27], d, r),
            ]
        },
        &|t: &mut Tape, v: &[Var]| -> Result<Var> {
            let h = t.conv2d(v[0], v[1], None, 1, 1, 1)?;
            let h = t.sigmoid(h)?;
            let h = t.avg_pool2d(h, 2, 2)?;
            let h = t.flatten(h)?;
            let y = t.linear(h, v[2], None)?;
            t.cross_entropy(y, &[1, 3])
        },
    );
}
