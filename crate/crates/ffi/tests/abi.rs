use std::ffi::{c_char, CString};
use std::ptr;

use anchornet::io::weights::{save_anchornet, save_downstream};
use anchornet::model::{AnchorNetModel, ArchSpec, DownstreamModel, Variant};
use anchornet_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe { an_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn default_rf() -> *mut AnRfState {
    let mut st = ptr::null_mut();
    let (k, s) = ([95usize], [8usize]);
    assert_eq!(unsafe { an_rf_new(k.as_ptr(), s.as_ptr(), 1, &mut st) }, AnStatus::Ok);
    st
}

#[test]
fn rf_queries() {
    let st = default_rf();
    let (mut rows, mut cols, mut rf, mut stride) = (0, 0, 0, 0);
    unsafe {
        assert_eq!(an_rf_get(st, &mut rf, &mut stride), AnStatus::Ok);
        assert_eq!((rf, stride), (95, 8));
        assert_eq!(an_rf_num_locations(st, 224, 224, &mut rows, &mut cols), AnStatus::Ok);
        assert_eq!(rows * cols, 289);
        let mut b = AnBox::default();
        assert_eq!(an_rf_map_location(st, 16, 2, 224, 224, &mut b), AnStatus::Ok);
        assert_eq!(b, AnBox { top: 128, left: 16, height: 95, width: 95 });
        assert_eq!(an_rf_map_location(st, 17, 0, 224, 224, &mut b), AnStatus::OutOfGrid);
        assert!(last_error().contains("outside"));
        assert_eq!(an_rf_num_locations(st, 90, 224, &mut rows, &mut cols), AnStatus::RfConstraint);
        an_rf_free(st);
    }
}

#[test]
fn layer_stack_and_bad_input() {
    let (k, s) = ([3usize, 3, 3], [2usize, 2, 1]);
    let mut st = ptr::null_mut();
    let (mut rf, mut stride) = (0, 0);
    unsafe {
        assert_eq!(an_rf_new(k.as_ptr(), s.as_ptr(), 3, &mut st), AnStatus::Ok);
        an_rf_get(st, &mut rf, &mut stride);
        an_rf_free(st);
        let zero = [0usize];
        assert_eq!(an_rf_new(zero.as_ptr(), s.as_ptr(), 1, &mut st), AnStatus::InvalidArgument);
        assert_eq!(an_rf_new(ptr::null(), s.as_ptr(), 1, &mut st), AnStatus::NullPointer);
        assert_eq!(an_rf_get(ptr::null(), &mut rf, &mut stride), AnStatus::NullPointer);
    }
    assert_eq!((rf, stride), (15, 4));
}

#[test]
fn iou_and_selection() {
    let a = AnBox { top: 0, left: 0, height: 95, width: 95 };
    let b = AnBox { top: 0, left: 8, height: 95, width: 95 };
    let expected = (87.0 * 95.0) / (2.0 * 9025.0 - 87.0 * 95.0);
    assert!((unsafe { an_iou(&a, &b) } - expected).abs() < 1e-15);
    assert_eq!(unsafe { an_iou(&a, ptr::null()) }, 0.0);

    let st = default_rf();
    let cam: Vec<f64> = (0..289).map(|i| i as f64).collect();
    let mut out = [AnBox::default(); 4];
    let mut count = 0;
    unsafe {
        let s = an_select_patches(cam.as_ptr(), 17, 17, st, 224, 224, 0.3, 4, out.as_mut_ptr(), 4, &mut count);
        assert_eq!(s, AnStatus::Ok);
        assert_eq!(count, 4);
        assert_eq!(out[0], AnBox { top: 128, left: 128, height: 95, width: 95 });
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(an_iou(&out[i], &out[j]) < 0.3);
            }
        }
        let s = an_select_patches(cam.as_ptr(), 17, 17, st, 224, 224, 0.3, 4, out.as_mut_ptr(), 2, &mut count);
        assert_eq!(s, AnStatus::BufferTooSmall);
        let s = an_select_patches(cam.as_ptr(), 17, 17, st, 224, 224, 1.5, 4, out.as_mut_ptr(), 4, &mut count);
        assert_eq!(s, AnStatus::InvalidArgument);
        an_rf_free(st);
    }
}

fn c(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn models_and_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.anet");
    let g = dir.path().join("g.anet");
    let l = dir.path().join("l.anet");
    save_anchornet(&AnchorNetModel::build(&ArchSpec::anchornet(3), 1).unwrap(), &a).unwrap();
    save_downstream(&DownstreamModel::build(3, 2, Variant::Global).unwrap(), &g).unwrap();
    save_downstream(&DownstreamModel::build(3, 3, Variant::Local).unwrap(), &l).unwrap();
    let pixels: Vec<f32> = (0..3 * 224 * 224).map(|i| (i % 251) as f32 / 251.0).collect();
    let mut probs = [0.0f64; 3];
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(an_anchornet_load(c(&a).as_ptr(), &mut m), AnStatus::Ok);
        let mut classes = 0;
        an_anchornet_num_classes(m, &mut classes);
        assert_eq!(classes, 3);
        assert_eq!(an_anchornet_classify(m, pixels.as_ptr(), 224, 224, probs.as_mut_ptr(), 3), AnStatus::Ok);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(an_anchornet_classify(m, pixels.as_ptr(), 224, 224, probs.as_mut_ptr(), 2), AnStatus::BufferTooSmall);
        assert_eq!(an_anchornet_classify(m, pixels.as_ptr(), 80, 80, probs.as_mut_ptr(), 3), AnStatus::RfConstraint);
        an_anchornet_free(m);

        let mut d = ptr::null_mut();
        assert_eq!(an_downstream_load(c(&g).as_ptr(), &mut d), AnStatus::Ok);
        assert_eq!(an_downstream_classify(d, pixels.as_ptr(), 95, 95, probs.as_mut_ptr(), 3), AnStatus::Ok);
        an_downstream_free(d);
        let missing = c(&dir.path().join("missing"));
        assert_eq!(an_downstream_load(missing.as_ptr(), &mut d), AnStatus::Io);

        let mut p = ptr::null_mut();
        let s = an_pipeline_load(c(&a).as_ptr(), c(&g).as_ptr(), c(&l).as_ptr(), 0.3, 4, &mut p);
        assert_eq!(s, AnStatus::Ok);
        let mut stages = 0;
        an_pipeline_stages(p, &mut stages);
        assert_eq!(stages, 5);
        let mut trace = AnTrace::default();
        let exit_now = [0.0; 4];
        assert_eq!(an_pipeline_infer(p, pixels.as_ptr(), 224, 224, exit_now.as_ptr(), 4, &mut trace), AnStatus::Ok);
        assert_eq!(trace.exit_stage, 1);
        let never = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(an_pipeline_infer(p, pixels.as_ptr(), 224, 224, never.as_ptr(), 4, &mut trace), AnStatus::Ok);
        assert_eq!(trace.exit_stage, 5);
        assert!(trace.flops_spent > 57_000_000);
        assert_eq!(an_pipeline_infer(p, pixels.as_ptr(), 224, 224, never.as_ptr(), 2, &mut trace), AnStatus::Thresholds);
        an_pipeline_free(p);
    }
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/anchornet.h")).unwrap();
    for name in ["an_rf_new", "an_select_patches", "an_pipeline_infer", "AnPipeline", "AN_STATUS_OK"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
