mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use splitguard::metrics::ssim::{ssim, ssim_clamped, ssim_per_image};
use splitguard::metrics::{
    accuracy, mean_image, mean_image_error, privacy_p0, privacy_p1, privacy_p2, reward, SsimParams,
};
use splitguard::tensor::{DType, Tensor};
use splitguard::Error;

/// Straight nested-loop SSIM over one plane with a uniform window.
fn naive_plane(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
    let k = p.window;
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0.0;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let idx: Vec<usize> = (0..k)
                .flat_map(|dy| (0..k).map(move |dx| (oy + dy) * w + ox + dx))
                .collect();
            let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / n;
            let my = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
            let vx = idx.iter().map(|&i| (x[i] - mx).powi(2)).sum::<f64>() / n;
            let vy = idx.iter().map(|&i| (y[i] - my).powi(2)).sum::<f64>() / n;
            let cxy = idx.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum::<f64>() / n;
            total += (2.0 * mx * my + p.c1) * (2.0 * cxy + p.c2)
                / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
            count += 1.0;
        }
    }
    total / count
}

fn unit_images(n: usize, c: usize, hw: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let len = n * c * hw * hw;
    Tensor::new_f64(
        &[n, c, hw, hw],
        (0..len).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn accuracy_examples() {
    let truth: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let mut pred = truth.clone();
    pred[4] = 9;
    assert!((accuracy(&pred, &truth).unwrap() - 0.9).abs() < 1e-12);
    assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
    let wrong: Vec<usize> = truth.iter().map(|t| t + 1).collect();
    assert_eq!(accuracy(&wrong, &truth).unwrap(), 0.0);
    assert!(matches!(accuracy(&[], &[]), Err(Error::Usage(_))));
    assert!(matches!(accuracy(&[1, 2], &[1]), Err(Error::Dimension(_))));
}

#[test]
fn ssim_self_similarity_and_symmetry() {
    let p = SsimParams::default();
    for seed in 0..5 {
        let x = unit_images(2, 3, 16, seed);
        let y = unit_images(2, 3, 16, seed + 100);
        assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-6);
        let a = ssim(&x, &y, &p).unwrap();
        let b = ssim(&y, &x, &p).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn ssim_constant_images_closed_form() {
    let p = SsimParams::for_range(1.0);
    let a = Tensor::full(&[1, 1, 16, 16], 1.0, DType::F64);
    let b = Tensor::zeros(&[1, 1, 16, 16], DType::F64);
    let want = 1e-4 / 1.0001;
    assert!((ssim(&a, &b, &p).unwrap() - want).abs() < 1e-6);
}

#[test]
fn ssim_matches_nested_loop_evaluation() {
    let p = SsimParams::default();
    let x = unit_images(3, 2, 12, 7);
    let y = unit_images(3, 2, 12, 8);
    let hw = 144;
    let mut per = Vec::new();
    for n in 0..3 {
        let s: f64 = (0..2)
            .map(|c| {
                let at = (n * 2 + c) * hw;
                naive_plane(&x.data()[at..at + hw], &y.data()[at..at + hw], 12, 12, &p)
            })
            .sum::<f64>()
            / 2.0;
        per.push(s);
    }
    let mean = per.iter().sum::<f64>() / 3.0;
    assert!((ssim(&x, &y, &p).unwrap() - mean).abs() < 1e-12);
    let got = ssim_per_image(&x, &y, &p).unwrap();
    for (g, w) in got.iter().zip(&per) {
        assert!((g - w.clamp(0.0, 1.0)).abs() < 1e-12);
    }
}

#[test]
fn ssim_rejects_bad_inputs() {
    let p = SsimParams::default();
    let x = unit_images(1, 1, 16, 0);
    let y = unit_images(1, 1, 15, 0);
    assert!(matches!(ssim(&x, &y, &p), Err(Error::Dimension(_))));
    let bad = SsimParams { window: 4, ..p };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = SsimParams { c1: 0.0, ..p };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn ssim_clamps_negative_similarity() {
    let p = SsimParams::default();
    let x = unit_images(1, 1, 16, 3);
    let y = Tensor::new_f64(x.dims(), x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(ssim(&x, &y, &p).unwrap() < 0.0);
    assert_eq!(ssim_clamped(&x, &y, &p).unwrap(), 0.0);
}

#[test]
fn p0_examples() {
    assert_eq!(privacy_p0(0.0, 2.0).unwrap(), 1.0);
    assert_eq!(privacy_p0(2.0, 2.0).unwrap(), 0.0);
    assert!((privacy_p0(1.0, 2.0).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(privacy_p0(5.0, 2.0).unwrap(), 0.0);
    assert!(matches!(privacy_p0(1.0, 0.0), Err(Error::Degenerate(_))));
}

#[test]
fn mean_image_normalizer_is_the_blind_decoder_error() {
    let x = unit_images(5, 1, 4, 11);
    let per = 16;
    let mut want = 0.0;
    for j in 0..per {
        let m: f64 = (0..5).map(|n| x.data()[n * per + j]).sum::<f64>() / 5.0;
        want += (0..5)
            .map(|n| (x.data()[n * per + j] - m).powi(2))
            .sum::<f64>();
    }
    want /= (5 * per) as f64;
    assert!((mean_image_error(&x).unwrap() - want).abs() < 1e-12);
}

#[test]
fn p1_of_mean_image_decoder_by_direct_evaluation() {
    let p = SsimParams::default();
    let x = unit_images(6, 1, 16, 21);
    let m = mean_image(&x).unwrap();
    let recon = m.select_rows(&[0; 6]).unwrap();
    let mut want = 0.0;
    for n in 0..6 {
        let s = naive_plane(&x.data()[n * 256..][..256], m.data(), 16, 16, &p);
        want += s.clamp(0.0, 1.0);
    }
    want /= 6.0;
    assert!((privacy_p1(&x, &recon, &p).unwrap() - want).abs() < 1e-12);
    assert!((privacy_p1(&x, &x, &p).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn p2_examples() {
    let hidden = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
    let mut pred = hidden;
    pred[0] = 1;
    pred[1] = 0;
    pred[2] = 1;
    assert!((privacy_p2(&pred, &hidden).unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(privacy_p2(&hidden, &hidden).unwrap(), 1.0);
    assert!(matches!(privacy_p2(&[0, 0], &[1, 1]), Err(Error::Data(_))));
}

#[test]
fn p2_of_random_guessing_is_near_one_half() {
    let m = 2000;
    let hidden: Vec<usize> = (0..m).map(|i| i % 2).collect();
    let mut total = 0.0;
    let seeds = 20;
    for seed in 0..seeds {
        let mut r = rng(seed);
        let pred: Vec<usize> = (0..m).map(|_| r.random_range(0..2)).collect();
        total += privacy_p2(&pred, &hidden).unwrap();
    }
    let mean = total / seeds as f64;
    let sd = (0.25 / (m as f64 * seeds as f64)).sqrt();
    assert!((mean - 0.5).abs() < 4.0 * sd, "mean {mean}");
}

/// (A_base, A, P, S, R) rows from published search results.
const PUBLISHED: [(f64, f64, f64, f64, f64); 6] = [
    (0.9241, 0.9108, 0.4106, 0.6808, 0.5218),
    (0.8679, 0.8425, 0.3855, 0.9587, 0.5955),
    (0.9241, 0.8950, 0.5300, 0.7950, 0.4361),
    (0.9423, 0.9353, 0.4540, 0.7502, 0.5082),
    (0.7522, 0.7189, 0.5196, 0.8176, 0.4438),
    (0.7711, 0.6998, 0.2405, 0.8437, 0.6724),
];

#[test]
fn reward_reproduces_published_rows() {
    for (ab, a, p, s, r) in PUBLISHED {
        let got = reward(a, ab, p, s).unwrap();
        assert!((got.r - r).abs() < 5e-4, "{got:?} vs {r}");
        assert!((got.r - got.r_a * got.r_p * got.r_s).abs() < 1e-15);
    }
}

#[test]
fn reward_boundaries_and_errors() {
    assert_eq!(reward(0.8, 0.9, 1.0, 0.5).unwrap().r, 0.0);
    assert_eq!(reward(0.9, 0.9, 0.0, 1.0).unwrap().r, 1.0);
    assert!(matches!(reward(0.9, 0.0, 0.1, 0.5), Err(Error::Config(_))));
    assert!(matches!(reward(0.9, 0.9, 1.1, 0.5), Err(Error::Config(_))));
    assert!(matches!(reward(0.9, 0.9, 0.1, -0.1), Err(Error::Config(_))));
}

#[test]
fn concavity_of_performance_factor_on_a_grid() {
    for i in 1..100 {
        let s = i as f64 / 100.0;
        let rs = reward(1.0, 1.0, 0.0, s).unwrap().r_s;
        assert!(rs >= s - 1e-15);
    }
}

proptest! {
    #[test]
    fn reward_is_monotone(a in 0.01f64..0.98, p in 0.0f64..0.98, s in 0.01f64..0.98, d in 0.001f64..0.01) {
        let base = reward(a, 0.9, p, s).unwrap().r;
        prop_assert!(reward(a + d, 0.9, p, s).unwrap().r > base);
        prop_assert!(reward(a, 0.9, p, s + d).unwrap().r > base);
        prop_assert!(reward(a, 0.9, p + d, s).unwrap().r < base);
    }

    #[test]
    fn performance_factor_is_concave(s0 in 0.0f64..1.0, s1 in 0.0f64..1.0, t in 0.0f64..1.0) {
        let f = |s: f64| reward(1.0, 1.0, 0.0, s).unwrap().r_s;
        let mid = t * s0 + (1.0 - t) * s1;
        prop_assert!(f(mid) >= t * f(s0) + (1.0 - t) * f(s1) - 1e-12);
    }

    #[test]
    fn privacy_losses_stay_in_unit_interval(err in 0.0f64..10.0, norm in 0.01f64..10.0, seed in 0u64..50) {
        let p0 = privacy_p0(err, norm).unwrap();
        prop_assert!((0.0..=1.0).contains(&p0));
        let x = unit_images(2, 1, 8, seed);
        let y = unit_images(2, 1, 8, seed + 1000);
        let p1 = privacy_p1(&x, &y, &SsimParams::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&p1));
        let mut r = rng(seed);
        let hidden: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let pred: Vec<usize> = (0..20).map(|_| r.random_range(0..2)).collect();
        let p2 = privacy_p2(&pred, &hidden).unwrap();
        prop_assert!((0.0..=1.0).contains(&p2));
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..200) {
        let p = SsimParams::default();
        let x = unit_images(1, 2, 9, seed);
        let y = unit_images(1, 2, 9, seed + 7);
        prop_assert!((ssim(&x, &y, &p).unwrap() - ssim(&y, &x, &p).unwrap()).abs() < 1e-9);
        prop_assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-9);
    }
}
