mod common;

use candle_core::{DType, Device, Tensor};
use importance_core::checkpoint::restore_parameters;
use importance_core::dataset::LaneInput;
use importance_core::disg::{build_masks, fuse_intention_semantics};
use importance_core::head::importance_loss;
use importance_core::model::Hooks;
use importance_core::nn::AttentionHook;
use importance_core::ofe::Ofe;
use importance_core::trg::apply_gate;
use importance_core::{AblationPreset, Error, ForwardOptions, GateMode, ImportanceModel, ModelConfig};
use proptest::prelude::*;

use common::{bits, f64_values, normal_tensor, random_clip, rng};

fn micro64(seed: u64) -> ImportanceModel {
    ImportanceModel::new(&ModelConfig::micro(), DType::F64, seed).unwrap()
}

fn bias_free_micro(seed: u64) -> ImportanceModel {
    let mut cfg = ModelConfig::micro();
    cfg.ofe.backbone_bias = false;
    ImportanceModel::new(&cfg, DType::F64, seed).unwrap()
}

fn f64_tensor(t: &Tensor) -> Tensor {
    t.to_dtype(DType::F64).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

// ---------- object feature extraction ----------

#[test]
fn blank_clip_through_bias_free_backbones_gives_zero_features() {
    let model = bias_free_micro(3);
    let clip = random_clip(model.config(), 3, 5, false);
    let zeros = f64_tensor(&clip.frames).zeros_like().unwrap();
    let sf = model.ofe().extract_stream_features(&zeros, &zeros, &clip.boxes).unwrap();
    assert!(f64_values(&sf.f_v).iter().all(|&v| v == 0.0));
    assert!(f64_values(&sf.f_m).iter().all(|&v| v == 0.0));
}

#[test]
fn identity_spatial_attention_returns_the_time_average() {
    let model = micro64(4);
    let clip = random_clip(model.config(), 4, 6, true);
    let sf = model
        .ofe()
        .extract_stream_features(&f64_tensor(&clip.frames), &f64_tensor(&clip.flow), &clip.boxes)
        .unwrap();
    let f_os = model.ofe().spatial_feature(&sf, AttentionHook::Identity).unwrap();
    let avg = Ofe::time_average(&sf).unwrap();
    assert_eq!(f_os.dims(), [4, 128, 4, 4]);
    assert!(close(&f64_values(&f_os), &f64_values(&avg), 1e-12));

    // independent average over valid frames for one object and channel
    let (f_v, f_m) = (f64_values(&sf.f_v), f64_values(&sf.f_m));
    let (t, c, r) = (4, 64, 4);
    let per_obj = t * c * r * r;
    let avg = f64_values(&avg);
    for obj in 0..4 {
        let valid: Vec<usize> = (0..t).filter(|&k| clip.boxes.is_valid(obj, k)).collect();
        for (stream, src) in [(0, &f_v), (1, &f_m)] {
            let ch = 5;
            let pos = 7;
            let want: f64 = valid
                .iter()
                .map(|&k| src[obj * per_obj + k * c * r * r + ch * r * r + pos])
                .sum::<f64>()
                / valid.len() as f64;
            let got = avg[obj * 2 * c * r * r + (stream * c + ch) * r * r + pos];
            assert!((got - want).abs() < 1e-12, "object {obj} stream {stream}: {got} vs {want}");
        }
    }
}

#[test]
fn frames_without_a_box_pool_to_zero() {
    let model = micro64(5);
    let clip = random_clip(model.config(), 6, 11, true);
    let sf = model
        .ofe()
        .extract_stream_features(&f64_tensor(&clip.frames), &f64_tensor(&clip.flow), &clip.boxes)
        .unwrap();
    let f_v = f64_values(&sf.f_v);
    let per_frame = 64 * 16;
    let mut gaps = 0;
    for obj in 0..6 {
        for k in 0..4 {
            let block = &f_v[(obj * 4 + k) * per_frame..(obj * 4 + k + 1) * per_frame];
            if clip.boxes.is_valid(obj, k) {
                assert!(block.iter().any(|&v| v != 0.0));
            } else {
                gaps += 1;
                assert!(block.iter().all(|&v| v == 0.0));
            }
        }
    }
    assert!(gaps > 0);
}

#[test]
fn temporal_feature_sees_the_last_frame() {
    let model = micro64(6);
    let clip = random_clip(model.config(), 2, 12, false);
    let mut moved = clip.boxes.clone();
    let b = moved.raw(0, 3);
    let shift = if b.x_min > 20.0 { -8.0 } else { 8.0 };
    moved.set(0, 3, importance_core::BBox::new(b.x_min + shift, b.y_min, b.x_max + shift, b.y_max));
    let (frames, flow) = (f64_tensor(&clip.frames), f64_tensor(&clip.flow));
    let f_ot = |boxes| {
        let sf = model.ofe().extract_stream_features(&frames, &flow, boxes).unwrap();
        f64_values(&model.ofe().temporal_feature(&sf).unwrap())
    };
    let (a, b) = (f_ot(&clip.boxes), f_ot(&moved));
    let c = a.len() / 2;
    assert_ne!(a[..c], b[..c]);
    assert_eq!(a[c..], b[c..]);
}

#[test]
fn missing_last_box_is_an_input_error() {
    let model = micro64(7);
    let mut clip = random_clip(model.config(), 2, 13, false);
    let mut boxes = importance_core::dataset::ClipBoxes::new(2, 4);
    for k in 0..3 {
        boxes.set(0, k, clip.boxes.raw(0, k));
        boxes.set(1, k, clip.boxes.raw(1, k));
    }
    boxes.set(0, 3, clip.boxes.raw(0, 3));
    clip.boxes = boxes;
    assert!(matches!(model.predict(&clip), Err(Error::Input(_))));
}

// ---------- intention and semantics guidance ----------

#[test]
fn blank_segmentation_through_bias_free_backbone_gives_zero_semantics() {
    let model = bias_free_micro(8);
    let seg = Tensor::zeros((3, 64, 64), DType::F64, &Device::Cpu).unwrap();
    let f_s = model.disg().semantic_feature(&seg).unwrap();
    assert_eq!(f_s.dims(), [1, 128, 4, 4]);
    assert!(f64_values(&f_s).iter().all(|&v| v == 0.0));
}

#[test]
fn fusing_scales_every_channel_by_the_mask() {
    let masks = build_masks(1.0, 1.5, 4, 4).unwrap();
    let mask = masks.left.to_tensor(DType::F64, &Device::Cpu).unwrap();
    let mut r = rng(1);
    let f_s = f64_tensor(&normal_tensor(&mut r, &[1, 3, 4, 4]));
    let fused = f64_values(&fuse_intention_semantics(&f_s, &mask).unwrap());
    let src = f64_values(&f_s);
    for ch in 0..3 {
        for row in 0..4 {
            for col in 0..4 {
                let i = ch * 16 + row * 4 + col;
                let m = if col >= 2 { 1.5 } else { 1.0 };
                assert_eq!(fused[i], src[i] * m);
            }
        }
    }
    let wrong = Tensor::ones((3, 4), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(fuse_intention_semantics(&f_s, &wrong), Err(Error::Shape(_))));
}

#[test]
fn cross_attention_rows_are_distributions() {
    let model = micro64(9);
    let mut r = rng(2);
    let f_os = f64_tensor(&normal_tensor(&mut r, &[5, 128, 4, 4]));
    let f_is = f64_tensor(&normal_tensor(&mut r, &[1, 128, 4, 4]));
    let w = model.disg().attention_weights(&f_os, &f_is).unwrap();
    let (n, heads, q, k) = w.dims4().unwrap();
    assert_eq!((n, q, k), (5, 16, 16));
    assert_eq!(heads, model.config().heads);
    let v = f64_values(&w);
    for row in v.chunks(16) {
        assert!(row.iter().all(|&x| x >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn distinct_objects_get_distinct_guided_features() {
    let model = micro64(10);
    let mut r = rng(3);
    let f_os = f64_tensor(&normal_tensor(&mut r, &[3, 128, 4, 4]));
    let f_is = f64_tensor(&normal_tensor(&mut r, &[1, 128, 4, 4]));
    let f_ois = f64_values(&model.disg().object_intention_semantics(&f_os, &f_is, AttentionHook::Active).unwrap());
    let rows: Vec<&[f64]> = f_ois.chunks(128 * 16).collect();
    assert_ne!(rows[0], rows[1]);
    assert_ne!(rows[1], rows[2]);
    let bad = f64_tensor(&normal_tensor(&mut r, &[1, 128, 2, 2]));
    assert!(model.disg().object_intention_semantics(&f_os, &bad, AttentionHook::Active).is_err());
}

// ---------- traffic rule guidance ----------

#[test]
fn no_lanes_give_a_zero_lane_feature_shared_by_all_objects() {
    let model = micro64(11);
    let trg = model.trg();
    let row = trg.lane_tensor(&LaneInput::empty(20), DType::F64, &Device::Cpu).unwrap();
    let f_l = f64_values(&trg.lane_feature(&row, 3).unwrap());
    assert!(f_l.iter().all(|&v| v == 0.0));
}

#[test]
fn lane_feature_rows_are_equal_and_nonnegative() {
    let model = micro64(12);
    let clip = random_clip(model.config(), 5, 14, false);
    let trg = model.trg();
    let row = trg.lane_tensor(&clip.lanes, DType::F64, &Device::Cpu).unwrap();
    let f_l = f64_values(&trg.lane_feature(&row, 5).unwrap());
    let rows: Vec<&[f64]> = f_l.chunks(32).collect();
    assert!(rows.iter().all(|r| *r == rows[0]));
    assert!(f_l.iter().all(|&v| v >= 0.0));
    assert!(f_l.iter().any(|&v| v > 0.0));
}

#[test]
fn single_token_attention_puts_all_weight_on_it() {
    let model = micro64(13);
    let mut r = rng(4);
    let f_l = f64_tensor(&normal_tensor(&mut r, &[4, 32]));
    let f_ot = f64_tensor(&normal_tensor(&mut r, &[4, 32]));
    let w = f64_values(&model.trg().attention_weights(&f_l, &f_ot).unwrap());
    assert!(w.iter().all(|&x| x == 1.0));
}

#[test]
fn wrong_lane_capacity_is_a_shape_error() {
    let model = micro64(14);
    let err = model.trg().lane_tensor(&LaneInput::empty(7), DType::F64, &Device::Cpu);
    assert!(matches!(err, Err(Error::Shape(_))));
}

#[test]
fn zeroed_gate_scores_one_half_and_hard_gate_penalizes() {
    let model = micro64(15);
    for (name, var) in model.named_vars() {
        if name.starts_with("trg.gate.") {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }
    let clip = random_clip(model.config(), 4, 15, false);
    let trace = model.forward_trace(&clip, &ForwardOptions::eval()).unwrap();
    let lane = trace.lane.unwrap();
    assert!(f64_values(&lane.p).iter().all(|&p| p == 0.5));
    let alpha = model.config().trg.alpha;
    assert!(f64_values(&lane.p_c).iter().all(|&c| c == alpha));
}

#[test]
fn gate_score_increases_along_the_gate_direction() {
    let model = micro64(16);
    let weight = model
        .named_vars()
        .into_iter()
        .find(|(n, _)| n == "trg.gate.weight")
        .unwrap()
        .1
        .as_tensor()
        .clone();
    let steps: Vec<f64> = (-20..=20).map(|s| s as f64 * 0.25).collect();
    let rows = Tensor::cat(&steps.iter().map(|&s| (&weight * s).unwrap()).collect::<Vec<_>>(), 0).unwrap();
    let p = f64_values(&model.trg().gate_score(&rows).unwrap());
    assert!(p.windows(2).all(|w| w[0] < w[1]), "{p:?}");
    assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn gate_coefficients_scale_rows() {
    let rows = Tensor::new(&[[1.0f64, -2.0], [3.0, 4.0], [0.5, 0.0]], &Device::Cpu).unwrap();
    let coeff = Tensor::new(&[1.0f64, 0.001, 0.5], &Device::Cpu).unwrap();
    let out = f64_values(&apply_gate(&rows, &coeff).unwrap());
    assert_eq!(out, [1.0, -2.0, 3.0 * 0.001, 4.0 * 0.001, 0.25, 0.0]);
    let short = Tensor::new(&[1.0f64, 1.0], &Device::Cpu).unwrap();
    assert!(matches!(apply_gate(&rows, &short), Err(Error::Shape(_))));
}

// ---------- importance head ----------

#[test]
fn class_probabilities_sum_to_one() {
    let model = micro64(17);
    let clip = random_clip(model.config(), 7, 16, true);
    let scores = model.forward(&clip, &ForwardOptions::eval()).unwrap();
    let probs = f64_values(&scores.probs);
    let a = f64_values(&scores.a);
    for (i, pair) in probs.chunks(2).enumerate() {
        assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
        assert_eq!(pair[1], a[i]);
    }
}

#[test]
fn identical_inputs_score_identically_and_different_lane_rows_do_not() {
    let model = micro64(18);
    let mut r = rng(5);
    let one = f64_tensor(&normal_tensor(&mut r, &[1, 128, 4, 4]));
    let f_ois = Tensor::cat(&[&one, &one, &one], 0).unwrap();
    let lane = f64_tensor(&normal_tensor(&mut r, &[1, 32]));
    let same = Tensor::cat(&[&lane, &lane, &lane], 0).unwrap();
    let a = f64_values(&model.head().estimate_importance(Some(&f_ois), Some(&same)).unwrap().a);
    assert!(a[0] == a[1] && a[1] == a[2]);

    let other = f64_tensor(&normal_tensor(&mut r, &[1, 32]));
    let mixed = Tensor::cat(&[&lane, &other, &lane], 0).unwrap();
    let b = f64_values(&model.head().estimate_importance(Some(&f_ois), Some(&mixed)).unwrap().a);
    assert_ne!(b[0], b[1]);
    assert!(model.head().estimate_importance(None, None).is_err());
}

fn loss_oracle(a: &[f64], labels: &[bool]) -> f64 {
    let eps = 1e-7;
    let total: f64 = a
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y {
                -p.ln() - 0.25 * (1.0 - p).powi(2) * p.ln()
            } else {
                -(1.0 - p).ln() - 0.75 * p.powi(2) * (1.0 - p).ln()
            }
        })
        .sum();
    total / a.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_matches_scalar_oracle(cases in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40)) {
        let a: Vec<f64> = cases.iter().map(|c| c.0).collect();
        let labels: Vec<bool> = cases.iter().map(|c| c.1).collect();
        let t = Tensor::new(a.as_slice(), &Device::Cpu).unwrap();
        let got = importance_loss(&t, &labels).unwrap().to_scalar::<f64>().unwrap();
        let want = loss_oracle(&a, &labels);
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{} vs {}", got, want);
    }
}

// ---------- whole model ----------

#[test]
fn forward_is_deterministic_across_instances() {
    let clip = random_clip(&ModelConfig::micro(), 5, 17, true);
    let a = ImportanceModel::new(&ModelConfig::micro(), DType::F32, 21).unwrap();
    let b = ImportanceModel::new(&ModelConfig::micro(), DType::F32, 21).unwrap();
    let sa = a.forward(&clip, &ForwardOptions::eval()).unwrap();
    let sb = b.forward(&clip, &ForwardOptions::eval()).unwrap();
    let again = a.forward(&clip, &ForwardOptions::eval()).unwrap();
    assert_eq!(bits(&sa.logits), bits(&sb.logits));
    assert_eq!(bits(&sa.logits), bits(&again.logits));
    let c = ImportanceModel::new(&ModelConfig::micro(), DType::F32, 22).unwrap();
    assert_ne!(bits(&sa.logits), bits(&c.forward(&clip, &ForwardOptions::eval()).unwrap().logits));
}

#[test]
fn permuting_objects_permutes_scores() {
    let model = micro64(23);
    let clip = random_clip(model.config(), 6, 18, true);
    let order = [3, 0, 5, 1, 4, 2];
    let base = model.predict(&clip).unwrap();
    let perm = model.predict(&clip.permuted(&order)).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert!((perm[k] - base[i]).abs() < 1e-12, "{k}: {} vs {}", perm[k], base[i]);
    }
}

#[test]
fn soft_gate_with_steep_slope_tracks_the_hard_gate() {
    let model = micro64(24);
    let clip = random_clip(model.config(), 5, 19, false);
    let hard = model.forward_trace(&clip, &ForwardOptions::eval()).unwrap();
    let soft = model.forward_trace(&clip, &ForwardOptions::train(1e6)).unwrap();
    let p = f64_values(&hard.lane.as_ref().unwrap().p);
    let (hc, sc) = (
        f64_values(&hard.lane.unwrap().p_c),
        f64_values(&soft.lane.unwrap().p_c),
    );
    for i in 0..5 {
        if (p[i] - 0.5).abs() > 1e-3 {
            assert!((hc[i] - sc[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn every_ablation_preset_yields_probabilities() {
    let clip = random_clip(&ModelConfig::micro(), 4, 20, true);
    for preset in AblationPreset::ALL {
        let cfg = preset.apply(&ModelConfig::micro());
        let model = ImportanceModel::new(&cfg, DType::F32, 25).unwrap();
        let a = model.predict(&clip).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|&x| x > 0.0 && x < 1.0), "{preset}: {a:?}");
        let trace = model.forward_trace(&clip, &ForwardOptions::eval()).unwrap();
        assert_eq!(trace.lane.is_some(), cfg.ofe.use_temporal && cfg.trg.use_interaction);
        assert_eq!(trace.guidance.is_some(), cfg.ofe.use_spatial && cfg.disg.enabled());
    }
}

#[test]
fn zeroed_guidance_attention_leaves_the_residual() {
    let model = micro64(26);
    let clip = random_clip(model.config(), 3, 22, false);
    let opts = ForwardOptions {
        gate: GateMode::Hard,
        hooks: Hooks {
            disg: AttentionHook::Zero,
            trg: AttentionHook::Zero,
            ..Hooks::default()
        },
    };
    let trace = model.forward_trace(&clip, &opts).unwrap();
    assert_eq!(bits(&trace.guidance.unwrap().f_ois), bits(&trace.f_os.unwrap()));
    assert_eq!(bits(&trace.lane.unwrap().f_ol_m), bits(&trace.f_ot.unwrap()));
}

#[test]
fn restoring_a_misshaped_parameter_names_it() {
    let model = micro64(27);
    let mut params: std::collections::BTreeMap<String, Tensor> = model
        .named_vars()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().copy().unwrap()))
        .collect();
    params.insert(
        "trg.gate.weight".into(),
        Tensor::zeros((1, 7), DType::F64, &Device::Cpu).unwrap(),
    );
    let err = restore_parameters(&model, &params).unwrap_err().to_string();
    assert!(err.contains("trg.gate.weight"), "{err}");

    params.remove("trg.gate.weight");
    let err = restore_parameters(&model, &params).unwrap_err().to_string();
    assert!(err.contains("trg.gate.weight"), "{err}");
}
