mod common;

use common::{rand_tensor, rng};
use proptest::prelude::*;
use splitguard::model::zoo::{manifest, ZOO_NAMES};
use splitguard::model::{
    build_model, build_zoo, compression_ratio, ArchDescriptor, LayerKind, ModelGraph, Strategy,
    TechniqueId,
};
use splitguard::tensor::DType;
use splitguard::Error;

fn inline(input: &[usize], layers: Vec<LayerKind>) -> ModelGraph {
    let arch = ArchDescriptor::Inline {
        name: "t".into(),
        input_shape: input.to_vec(),
        layers,
    };
    build_model(&arch, DType::F64, &mut splitguard::rng(0)).unwrap()
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> LayerKind {
    LayerKind::Conv {
        in_ch,
        out_ch,
        kernel,
        stride: 1,
        padding,
        groups: 1,
        bias: true,
    }
}

fn fc(i: usize, o: usize) -> LayerKind {
    LayerKind::Fc {
        in_features: i,
        out_features: o,
        bias: true,
    }
}

#[test]
fn zoo_matches_manifests() {
    for name in ZOO_NAMES {
        let g = build_zoo(name, DType::F32, 0).unwrap();
        let m = manifest(name).unwrap();
        assert_eq!(g.len(), m.layers);
        assert_eq!(g.total_params(), m.params);
        assert_eq!(g.total_macs().unwrap(), m.macs);
        assert_eq!(g.output_shape().unwrap(), vec![m.classes]);
    }
}

#[test]
fn zoo_hand_counts() {
    // tiny-lenet: conv(1->8,3x3) 80, conv(8->16) 1168, fc 256->64 16448, fc 64->4 260.
    assert_eq!(
        build_zoo("tiny-lenet", DType::F32, 0)
            .unwrap()
            .total_params(),
        80 + 1168 + 16448 + 260
    );
    // MACs: 9*1*8*256 + 9*8*16*64 + 256*64 + 64*4.
    assert_eq!(
        build_zoo("tiny-lenet", DType::F32, 0)
            .unwrap()
            .total_macs()
            .unwrap(),
        18432 + 73728 + 16384 + 256
    );
    // tiny-vgg: six 3x3 convs at 16,16,8,8,4,4 plus fc 128->4.
    let macs = 9 * (8 + 64) * 256 + 9 * (128 + 256) * 64 + 9 * (512 + 1024) * 16 + 128 * 4;
    assert_eq!(
        build_zoo("tiny-vgg", DType::F32, 0)
            .unwrap()
            .total_macs()
            .unwrap(),
        macs as u64
    );
    // conv weights+bias, four bn entries per channel, fc.
    let conv_p = (72 + 8) + (576 + 8) + (1152 + 16) + (2304 + 16) + (4608 + 32) + (9216 + 32);
    let bn_p = 4 * (8 + 8 + 16 + 16 + 32 + 32);
    assert_eq!(
        build_zoo("tiny-vgg", DType::F32, 0).unwrap().total_params(),
        conv_p + bn_p + 516
    );
}

#[test]
fn build_errors() {
    let arch = ArchDescriptor::Inline {
        name: "e".into(),
        input_shape: vec![1, 4, 4],
        layers: vec![],
    };
    assert!(matches!(
        build_model(&arch, DType::F32, &mut splitguard::rng(0)),
        Err(Error::Config(_))
    ));
    let arch = ArchDescriptor::Inline {
        name: "bad".into(),
        input_shape: vec![4],
        layers: vec![fc(5, 2)],
    };
    assert!(matches!(
        build_model(&arch, DType::F32, &mut splitguard::rng(0)),
        Err(Error::Config(_) | Error::Dimension(_))
    ));
}

#[test]
fn param_count_examples() {
    assert_eq!(
        inline(&[1, 5, 5], vec![conv(1, 8, 3, 0)]).total_params(),
        80
    );
    assert_eq!(inline(&[120], vec![fc(120, 84)]).total_params(), 10164);
}

#[test]
fn mac_count_examples() {
    let g = inline(&[16, 8, 8], vec![conv(16, 32, 3, 1)]);
    assert_eq!(g.shapes().unwrap()[1], vec![32, 8, 8]);
    assert_eq!(g.total_macs().unwrap(), 294_912);
    assert_eq!(
        inline(&[120], vec![fc(120, 84)]).total_macs().unwrap(),
        10_080
    );
    let grouped = inline(
        &[16, 8, 8],
        vec![LayerKind::Conv {
            in_ch: 16,
            out_ch: 32,
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 4,
            bias: true,
        }],
    );
    assert_eq!(grouped.total_macs().unwrap(), 294_912 / 4);
}

#[test]
fn perf_indicator_examples() {
    // 99->1 fc holds 100 params; 1->450 fc holds 900.
    let mut g = inline(&[99], vec![fc(99, 1), fc(1, 450)]);
    g.partition = 1;
    let (s1, _) = g.perf_indicators().unwrap();
    assert!((s1 - 0.9).abs() < 1e-12);
    for name in ZOO_NAMES {
        let mut g = build_zoo(name, DType::F32, 0).unwrap();
        g.partition = 0;
        assert_eq!(g.perf_indicators().unwrap(), (1.0, 1.0));
        g.partition = g.len();
        assert_eq!(g.perf_indicators().unwrap(), (0.0, 0.0));
    }
    let g = inline(&[1, 4, 4], vec![LayerKind::Relu, LayerKind::Flatten]);
    assert!(matches!(g.perf_indicators(), Err(Error::Degenerate(_))));
}

#[test]
fn compression_ratio_examples() {
    let g = build_zoo("tiny-lenet", DType::F32, 0).unwrap();
    assert_eq!(compression_ratio(&g, &g).unwrap(), 0.0);
    // 1000 params: 99->9 and 9->10; masking 200 weights leaves 800.
    let a = inline(&[99], vec![fc(99, 9), fc(9, 10)]);
    assert_eq!(a.total_params(), 1000);
    let mut b = a.clone();
    b.params
        .set_mask("l0.weight", (0..891).map(|i| i >= 200).collect())
        .unwrap();
    assert!((compression_ratio(&a, &b).unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn split_edges_are_identities() {
    let mut g = build_zoo("tiny-lenet", DType::F64, 1).unwrap();
    let x = rand_tensor(&[3, 1, 16, 16], DType::F64, &mut rng(0));
    g.partition = 0;
    let (enc, cloud) = g.partition_split().unwrap();
    assert!(enc.is_empty());
    assert_eq!(enc.predict(&x).unwrap(), x);
    assert_eq!(cloud.predict(&x).unwrap(), g.predict(&x).unwrap());
    g.partition = g.len();
    let (enc, cloud) = g.partition_split().unwrap();
    assert!(cloud.is_empty());
    let y = enc.predict(&x).unwrap();
    assert_eq!(cloud.predict(&y).unwrap(), y);
}

#[test]
fn strategy_codec_examples() {
    let s: Strategy = "P:23 18:C2 22:C1".parse().unwrap();
    assert_eq!(
        s,
        Strategy::new(23)
            .with(18, TechniqueId::C2)
            .with(22, TechniqueId::C1)
    );
    assert_eq!(s.to_string(), "P:23 18:C2 22:C1");
    let s: Strategy = "P:5".parse().unwrap();
    assert!(s.compressions.is_empty());
    assert!(matches!(
        "P:5 5:X9".parse::<Strategy>(),
        Err(Error::Parse(_))
    ));
    assert_eq!(
        "22:C1 P:23 18:C2".parse::<Strategy>().unwrap().to_string(),
        "P:23 18:C2 22:C1"
    );

    let g = build_zoo("tiny-lenet", DType::F32, 0).unwrap();
    assert!(matches!(
        Strategy::parse_for("P:4 1:W1", &g),
        Err(Error::Parse(_))
    ));
    assert!(matches!(
        Strategy::parse_for("P:11", &g),
        Err(Error::Parse(_))
    ));
    assert!(matches!(
        Strategy::parse_for("P:12 40:W1", &g),
        Err(Error::Parse(_))
    ));
    assert!(matches!(
        Strategy::parse_for("P:2 3:C1", &g),
        Err(Error::Parse(_))
    ));
    assert!(matches!(
        Strategy::parse_for("P:8 7:C1", &g),
        Err(Error::Parse(_))
    ));
}

fn random_stack() -> impl proptest::strategy::Strategy<Value = Vec<(u8, usize)>> {
    prop::collection::vec((0u8..6, 1usize..9), 1..7)
}

fn kinds_from(ops: &[(u8, usize)], mut ch: usize) -> Vec<LayerKind> {
    let mut out = Vec::new();
    let mut flat = false;
    for &(op, w) in ops {
        out.push(match (op, flat) {
            (0, false) => {
                let k = LayerKind::Conv {
                    in_ch: ch,
                    out_ch: w,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    groups: 1,
                    bias: true,
                };
                ch = w;
                k
            }
            (1, _) => LayerKind::Relu,
            (2, false) => LayerKind::MaxPool { k: 2, stride: 2 },
            (3, false) => LayerKind::BatchNorm { channels: ch },
            (4, false) => {
                flat = true;
                LayerKind::Flatten
            }
            // Widths here are deliberately unchecked; shape errors must surface at build time.
            (_, _) => LayerKind::Fc {
                in_features: ch * 16,
                out_features: w,
                bias: true,
            },
        });
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encoder_plus_cloud_params(name in prop::sample::select(ZOO_NAMES.to_vec()), frac in 0.0f64..=1.0) {
        let mut g = build_zoo(name, DType::F32, 0).unwrap();
        let p = (frac * g.len() as f64).round() as usize;
        prop_assert_eq!(g.count_params(0..p) + g.count_params(p..g.len()), g.total_params());
        if g.is_valid_partition(p) {
            g.partition = p;
            let (enc, cloud) = g.partition_split().unwrap();
            prop_assert_eq!(enc.total_params() + cloud.total_params(), g.total_params());
        }
    }

    #[test]
    fn s1_non_increasing_in_partition(name in prop::sample::select(ZOO_NAMES.to_vec())) {
        let mut g = build_zoo(name, DType::F32, 0).unwrap();
        let mut last = f64::INFINITY;
        for p in 0..=g.len() {
            g.partition = p;
            let (s1, s2) = g.perf_indicators().unwrap();
            prop_assert!(s1 <= last && (0.0..=1.0).contains(&s1) && (0.0..=1.0).contains(&s2));
            last = s1;
        }
    }

    #[test]
    fn split_composition_is_bit_identical(name in prop::sample::select(ZOO_NAMES.to_vec()), seed in 0u64..50, frac in 0.0f64..=1.0) {
        let mut g = build_zoo(name, DType::F32, seed).unwrap();
        let valid: Vec<usize> = (0..=g.len()).filter(|p| g.is_valid_partition(*p)).collect();
        g.partition = valid[((frac * (valid.len() - 1) as f64).round()) as usize];
        let x = rand_tensor(&[2, 1, 16, 16], DType::F32, &mut rng(seed));
        let (enc, cloud) = g.partition_split().unwrap();
        let y = cloud.predict(&enc.predict(&x).unwrap()).unwrap();
        prop_assert_eq!(y, g.predict(&x).unwrap());
        let joined = ModelGraph::compose(&enc, &cloud, &g.name).unwrap();
        prop_assert_eq!(joined.predict(&x).unwrap(), g.predict(&x).unwrap());
    }

    #[test]
    fn shape_propagation_is_total(ops in random_stack(), ch in 1usize..4) {
        let arch = ArchDescriptor::Inline { name: "r".into(), input_shape: vec![ch, 8, 8], layers: kinds_from(&ops, ch) };
        if let Ok(g) = build_model(&arch, DType::F32, &mut splitguard::rng(0)) {
            let x = rand_tensor(&[2, ch, 8, 8], DType::F32, &mut rng(1));
            let y = g.predict(&x);
            prop_assert!(y.is_ok(), "{:?}", y.err());
            let mut want = vec![2];
            want.extend(g.output_shape().unwrap());
            let y = y.unwrap();
            prop_assert_eq!(y.dims(), &want[..]);
        }
    }

    #[test]
    fn valid_strategies_round_trip(name in prop::sample::select(ZOO_NAMES.to_vec()), picks in prop::collection::vec((0usize..64, 0usize..8), 0..5), frac in 0.0f64..=1.0) {
        let g = build_zoo(name, DType::F32, 0).unwrap();
        let p = (frac * g.len() as f64).round() as usize;
        let idx = g.compressible_indices();
        let mut s = Strategy::new(p);
        for (i, t) in picks {
            let li = idx[i % idx.len()];
            let tech = TechniqueId::ALL[t];
            if li < p && tech.applies_to_kind(&g.layers[li].kind) {
                s = s.with(li, tech);
            }
        }
        let text = s.to_string();
        let back = Strategy::parse_for(&text, &g).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_string(), text);
    }
}
