use anchornet::model::{cam, AnchorNetModel, ArchSpec};
use anchornet::ops::{conv2d_valid, softmax, ConvKernel};
use anchornet::pipeline::{run_exit_rule, CostModel, ThresholdSchedule};
use anchornet::rf::{PatchBox, RfState};
use anchornet::select::{iou, select_patches, Cam, SelectionConfig};
use anchornet::{Shape, Tensor};
use proptest::prelude::*;

/// Input interval seen by output index 0 and 1 of the last layer, found by
/// walking the layers backwards.
fn footprint(layers: &[(usize, usize)]) -> (usize, usize) {
    let (mut lo0, mut hi0, mut lo1) = (0usize, 0usize, 1usize);
    for &(k, s) in layers.iter().rev() {
        lo0 *= s;
        hi0 = hi0 * s + k - 1;
        lo1 *= s;
    }
    (hi0 - lo0 + 1, lo1 - lo0)
}

fn layers() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((1usize..=5, 1usize..=3), 1..=6)
}

fn literal_select(cam: &Cam, rf: &RfState, theta: f64, max: usize) -> Vec<PatchBox> {
    let (rows, cols) = cam.dims();
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            order.push((cam.at(i, j), i, j));
        }
    }
    // stable sort keeps row-major order among equal activations
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut kept: Vec<PatchBox> = Vec::new();
    for (_, i, j) in order {
        if kept.len() >= max {
            break;
        }
        let b = PatchBox::new(i * rf.stride(), j * rf.stride(), rf.rf(), rf.rf());
        let mut ok = true;
        for k in &kept {
            if iou(k, &b) >= theta {
                ok = false;
            }
        }
        if ok {
            kept.push(b);
        }
    }
    kept
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recursion_matches_footprint(l in layers()) {
        let st = RfState::from_layers(&l).unwrap();
        let (rf, stride) = footprint(&l);
        prop_assert_eq!(st.rf(), rf);
        prop_assert_eq!(st.stride(), stride);
    }

    #[test]
    fn grid_matches_convolution(l in layers(), extra in 0usize..12) {
        let st = RfState::from_layers(&l).unwrap();
        let n = st.rf() + extra;
        let mut x = Tensor::<f64>::full(Shape::new(1, 1, n, n + 1), 1.0);
        for &(k, s) in &l {
            let w = Tensor::full(Shape::new(1, 1, k, k), 1.0);
            x = conv2d_valid(&x, &ConvKernel::new(w, s, 1)).unwrap();
        }
        let out = x.shape();
        prop_assert_eq!(st.num_locations((n, n + 1)).unwrap(), (out.h, out.w));
        for i in 0..out.h {
            for j in 0..out.w {
                prop_assert!(st.map_location((i, j), (n, n + 1)).unwrap().fits_in(n, n + 1));
            }
        }
    }

    #[test]
    fn undersized_input_is_rejected(l in layers()) {
        let st = RfState::from_layers(&l).unwrap();
        let small = st.rf() - 1;
        prop_assume!(small > 0);
        prop_assert!(st.num_locations((small, st.rf())).is_err());
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f64..30.0, 1..10), shift in -100.0f64..100.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_bounds(a in (0usize..50, 0usize..50, 1usize..40, 1usize..40), b in (0usize..50, 0usize..50, 1usize..40, 1usize..40)) {
        let a = PatchBox::new(a.0, a.1, a.2, a.3);
        let b = PatchBox::new(b.0, b.1, b.2, b.3);
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_offset_table(dy in 0usize..120, dx in 0usize..120) {
        let a = PatchBox::new(0, 0, 95, 95);
        let b = PatchBox::new(dy, dx, 95, 95);
        let inter = (95usize.saturating_sub(dy) * 95usize.saturating_sub(dx)) as f64;
        let expected = inter / (2.0 * 9025.0 - inter);
        prop_assert!((iou(&a, &b) - expected).abs() < 1e-15);
    }

    #[test]
    fn selection_matches_literal(
        values in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), -5.0f64..5.0], 289),
        theta in prop_oneof![Just(0.0), Just(0.3), Just(0.6), Just(1.0), 0.0f64..1.0],
        max in 1usize..8,
    ) {
        let rf = RfState::from_layers(&[(95, 8)]).unwrap();
        let cam = Cam::new(values, 17, 17, 0).unwrap();
        let cfg = SelectionConfig { iou_threshold: theta, max_patches: max };
        let got: Vec<PatchBox> = select_patches(&cam, &rf, (224, 224), &cfg).unwrap().iter().map(|s| s.patch).collect();
        prop_assert_eq!(&got, &literal_select(&cam, &rf, theta, max));
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                prop_assert!(iou(a, b) < theta);
            }
        }
        prop_assert!(got.len() <= max);
    }

    #[test]
    fn exit_rule_invariants(
        probs in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..=5),
        th in prop::collection::vec(0.0f64..5.0, 4),
        raise in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let stages: Vec<Vec<f64>> = probs.iter().map(|p| {
            let s: f64 = p.iter().sum();
            p.iter().map(|x| x / s).collect()
        }).collect();
        let costs = CostModel { resize: 3, anchornet: 50, global: 7, local: 5 };
        let run = |t: &ThresholdSchedule| run_exit_rule(stages.len(), t, &costs, |i| Ok(stages[i].clone())).unwrap();
        let low = ThresholdSchedule::new(th.clone());
        let high = ThresholdSchedule::new(th.iter().zip(&raise).map(|(a, b)| a + b).collect());
        let a = run(&low);
        let b = run(&high);
        prop_assert!(b.exit_stage >= a.exit_stage);
        for (t, s) in a.scores.iter().enumerate() {
            prop_assert!((s.iter().sum::<f64>() - (t + 1) as f64).abs() < 1e-5);
        }
        let expected = 3 + 7 + if a.exit_stage > 1 { 50 + 5 * (a.exit_stage as u64 - 1) } else { 0 };
        prop_assert_eq!(a.flops_spent, expected);
    }
}

/// The mean of a class's activation map equals that class's logit.
#[test]
fn cam_mean_is_logit() {
    let model = AnchorNetModel::<f64>::build(&ArchSpec::anchornet(5), 3).unwrap();
    let img = Tensor::<f64>::from_fn(Shape::new(1, 3, 224, 224), |_, c, y, x| {
        ((y * 7 + x * 13 + c * 5) % 17) as f64 / 17.0
    });
    let (features, logits) = model.network().infer(&img).unwrap();
    let classifier = model.classifier();
    for n in 0..5 {
        let m = cam(&features, &classifier, n).unwrap();
        assert_eq!(m.dims(), (17, 17));
        let logit = logits.data()[n];
        assert!((m.mean() - logit).abs() <= 1e-5 * logit.abs().max(1.0), "class {n}");
    }
}
