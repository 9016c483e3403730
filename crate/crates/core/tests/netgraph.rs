use detnas::netgraph::*;
use detnas::tensor::{Graph, Mode, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const R18: &str = "[(64, 64)], [(128, 128)-(128, 128)], [(256, 256)-(256, 256)], [(512, 512)-(512, 512)";
const R50: &str = "(58, 59, 205)-(60, 64, 205)-(63, 62, 205)], [(127, 128, 314)-(109, 122, 314)-(127, 123, 314)-(125, 124, 314)], [(256, 255, 591)-(243, 245, 591)-(237, 247, 591)-(243, 246, 591)-(252, 244, 591)-(252, 254, 591)], [(509, 507, 1856)-(509, 506, 1856)-(508, 507, 1856)]";
const R101_STAGE4: &str = "[(49, 62, 202)], [(123, 128, 300)], [(255, 254, 321)], [(249, 229, 321)-(245, 231, 321)-(511, 478, 2031)]";

fn r18() -> ArchSpec {
    ArchSpec::basic([1, 2, 2, 2], [64, 128, 256, 512], BASE_STEM, BASE_NECK)
}

#[test]
fn encodes_desk_base() {
    assert_eq!(encode_arch(&ArchSpec::desk_base()), "[(8, 8)], [(16, 16)], [(32, 32)], [(64, 64)]");
}

#[test]
fn published_basic_encoding_round_trips() {
    // The published string is clipped before its final bracket.
    assert_eq!(encode_arch(&r18()), format!("{R18}]"));
    assert_eq!(decode_arch(R18).unwrap(), r18());
}

#[test]
fn published_bottleneck_encoding_parses() {
    let a = decode_arch(R50).unwrap();
    assert_eq!(a.depths(), vec![3, 4, 6, 3]);
    let first = &a.stages[0][0];
    assert_eq!(first.kind, BlockKind::Bottleneck);
    assert_eq!(first.channels, vec![58, 59, 205]);
    assert!(first.has_projection);
    assert_eq!(a.stages[3][1].stride, 1);
    assert_eq!(a.stage_width(3), 1856);
}

#[test]
fn mixed_width_stage_is_rejected() {
    let err = decode_arch(R101_STAGE4).unwrap_err().to_string();
    assert!(err.contains("stage 3 block 2"), "{err}");
}

#[test]
fn truncated_string_reports_offset() {
    let s = "[(8, 8)], [(16,";
    match decode_arch(s) {
        Err(NetError::Parse(e)) => assert_eq!(e.offset, s.chars().count()),
        other => panic!("expected parse error, got {other:?}"),
    }
    match decode_arch("[(8, 8)], [(16, x)]") {
        Err(NetError::Parse(e)) => assert_eq!(e.offset, 16),
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(decode_arch("[(8, 8)], [(16, 16)], [(32, 32)], [(64, 64)]; depth: 3").is_err());
    assert!(decode_arch("[(8)], [(16, 16)], [(32, 32)], [(64, 64)]").is_err());
}

#[test]
fn trailer_carries_stem_and_neck() {
    let mut a = ArchSpec::desk_base();
    a.neck_width = 24;
    let s = encode_arch(&a);
    assert_eq!(s, "[(8, 8)], [(16, 16)], [(32, 32)], [(64, 64)]; neck: 24");
    assert_eq!(decode_arch(&s).unwrap(), a);
}

fn arb_arch() -> impl Strategy<Value = ArchSpec> {
    let stage = (1usize..4, 1usize..40, prop::bool::ANY, prop::collection::vec(1usize..40, 6));
    (prop::collection::vec(stage, 4), 1usize..32, 1usize..32).prop_map(|(stages, stem, neck)| {
        let stages = stages
            .into_iter()
            .enumerate()
            .map(|(s, (depth, width, bottleneck, inner))| {
                (0..depth)
                    .map(|b| {
                        let (kind, ch) = if bottleneck {
                            (BlockKind::Bottleneck, vec![inner[2 * b], inner[2 * b + 1], width])
                        } else {
                            (BlockKind::Basic, vec![inner[b], width])
                        };
                        BlockSpec::at(kind, ch, s, b)
                    })
                    .collect()
            })
            .collect();
        ArchSpec { stages, stem_width: stem, neck_width: neck }
    })
}

proptest! {
    #[test]
    fn encode_decode_round_trip(a in arb_arch()) {
        prop_assert!(a.validate().is_ok());
        prop_assert_eq!(decode_arch(&encode_arch(&a)).unwrap(), a);
    }

    #[test]
    fn flops_monotone_in_channels_and_depth(a in arb_arch(), s in 0usize..4, pick in 0usize..64) {
        let base = flops(&a, (32, 32)).unwrap();
        let mut wider = a.clone();
        let b = pick % wider.stages[s].len();
        let blk = &mut wider.stages[s][b];
        let i = pick % blk.channels.len();
        if i + 1 == blk.channels.len() {
            for blk in &mut wider.stages[s] {
                *blk.channels.last_mut().unwrap() += 1;
            }
        } else {
            blk.channels[i] += 1;
        }
        prop_assert!(wider.validate().is_ok());
        prop_assert!(flops(&wider, (32, 32)).unwrap() > base);

        let mut deeper = a.clone();
        let w = deeper.stage_width(s);
        let kind = deeper.stages[s][0].kind;
        let n = deeper.stages[s].len();
        let ch = if kind == BlockKind::Basic { vec![w, w] } else { vec![1, 1, w] };
        deeper.stages[s].push(BlockSpec::at(kind, ch, s, n));
        prop_assert!(flops(&deeper, (32, 32)).unwrap() > base);
    }
}

#[test]
fn single_conv_flops() {
    // stage 1's first conv of the base arch: 3x3, 8 -> 16, 16x16 output at 64x64 input
    let layers = conv_layers(&ArchSpec::desk_base(), 64, 64).unwrap();
    let l = layers.iter().find(|l| l.name == "s1.b0.conv0").unwrap();
    assert_eq!((l.c_in, l.c_out, l.k, l.out_h, l.out_w), (8, 16, 3, 16, 16));
    assert_eq!(l.flops(), 589_824.0);
}

#[test]
fn base_flops_match_hand_count() {
    let res = 64.0f64;
    let mut expect = 2.0 * 9.0 * 3.0 * 8.0 * (res / 2.0).powi(2);
    let widths = [8.0, 16.0, 32.0, 64.0];
    let mut c_in = 8.0;
    for (s, &w) in widths.iter().enumerate() {
        let m2 = (res / 2f64.powi(s as i32 + 1)).powi(2);
        expect += 2.0 * 9.0 * c_in * w * m2; // conv0
        expect += 2.0 * 9.0 * w * w * m2; // conv1
        expect += 2.0 * c_in * w * m2; // projection
        expect += 2.0 * w * BASE_NECK as f64 * m2; // neck
        c_in = w;
    }
    assert_eq!(flops(&ArchSpec::desk_base(), (64, 64)).unwrap(), expect);
}

#[test]
fn flops_scale_with_area_and_reject_bad_resolution() {
    let a = r18();
    let f32_ = flops(&a, (32, 32)).unwrap();
    assert_eq!(flops(&a, (64, 64)).unwrap(), 4.0 * f32_);
    assert!(matches!(flops(&a, (40, 40)), Err(NetError::Resolution { .. })));
}

#[test]
fn stem_only_flops() {
    let a = ArchSpec { stages: vec![], stem_width: 8, neck_width: 16 };
    assert_eq!(flops(&a, (32, 32)).unwrap(), 2.0 * 9.0 * 3.0 * 8.0 * 16.0 * 16.0);
}

#[test]
fn breakdown_sums_to_total() {
    let a = r18();
    let b = flops_breakdown(&a, (48, 48)).unwrap();
    assert_eq!(b.total(), flops(&a, (48, 48)).unwrap());
    assert!(b.head > 0.0);
    assert!((b.backbone() - b.stem - b.stages.iter().sum::<f64>()).abs() == 0.0);
}

#[test]
fn fresh_init_is_deterministic() {
    let a = Detector::fresh(ArchSpec::desk_base(), 7).unwrap();
    let b = Detector::fresh(ArchSpec::desk_base(), 7).unwrap();
    let c = Detector::fresh(ArchSpec::desk_base(), 8).unwrap();
    assert!(a.params.bitwise_eq(&b.params));
    assert!(!a.params.bitwise_eq(&c.params));
}

#[test]
fn stages_halve_spatial_dims_once() {
    let d = Detector::fresh(r18(), 0).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 3, 64, 64]));
    let out = d.forward(&mut g, x).unwrap();
    let sizes: Vec<_> = out.stages.iter().map(|&v| g.shape(v).to_vec()).collect();
    assert_eq!(sizes, vec![vec![1, 64, 32, 32], vec![1, 128, 16, 16], vec![1, 256, 8, 8], vec![1, 512, 4, 4]]);
}

#[test]
fn zero_residual_branch_is_identity() {
    let a = ArchSpec::basic([1, 2, 1, 1], BASE_WIDTHS, BASE_STEM, BASE_NECK);
    let mut d = Detector::fresh(a, 3).unwrap();
    for i in 0..2 {
        for suffix in [format!("conv{i}.w"), format!("bn{i}.gamma"), format!("bn{i}.beta")] {
            let t = d.params.get_mut(&format!("s1.b1.{suffix}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[2, 16, 8, 8], 1.0, &mut rng);
    let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect()).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let y = d.block_forward(&mut g, xv, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

fn sample_checkpoint() -> Checkpoint {
    let d = Detector::fresh(ArchSpec::desk_base(), 11).unwrap();
    let meta = Metadata { seed: 11, epoch: 3, resolutions: vec![32, 48, 64], score: Some(0.1 + 0.2), ..Default::default() };
    Checkpoint::from_detector(&d, meta)
}

#[test]
fn checkpoint_round_trip() {
    let dir = std::env::temp_dir().join(format!("detnas-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("a.ckpt");
    let ck = sample_checkpoint();
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.metadata.score.unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
    assert!(back.tensors.bitwise_eq(&ck.tensors));

    // build a detector from the checkpoint and save it again
    let d = back.to_detector().unwrap();
    let again = Checkpoint::from_detector(&d, back.metadata.clone());
    assert_eq!(again.to_bytes(), ck.to_bytes());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn checkpoint_corruption_is_reported() {
    let bytes = sample_checkpoint().to_bytes();
    for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(NetError::Corrupt(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(NetError::Corrupt(_))));
    let mut versioned = bytes.clone();
    versioned[8] = 99;
    assert!(matches!(Checkpoint::from_bytes(&versioned), Err(NetError::Version { found: 99, .. })));
}
