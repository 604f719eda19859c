use std::ffi::{CStr, CString};
use std::ptr;

use scalecl::harness::{RunConfig, Trainer};
use scalecl::labels::{downsample_labels, LabelMap};
use scalecl::segnet::argmax_channels;
use scalecl_ffi::*;

const TINY: &str = r#"
seed = 3
steps = 2
batch_size = 2
eval_interval = 2

[dataset]
seed = 1
train_images = 4
val_images = 2

[dataset.scene]
height = 32
width = 32
n_classes = 3
size_min = 8
size_max = 16
rare_class = 0
overlap_classes = []

[model]
stem_channels = 4
channels = [6, 6, 8, 8]
embedding_dim = 8

[loss]
scale_weights = [{ stride = 4, weight = 1.0 }, { stride = 8, weight = 0.7 }, { stride = 16, weight = 0.4 }]
cross_pairs = [{ fine = 4, coarse = 16, weight = 1.0 }]
"#;

fn last_error() -> String {
    let p = scalecl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn info_nce(z: &[f64], classes: &[u32], dim: usize, tau: f64, normalize: bool) -> (ScaleclStatus, f64, Vec<f64>) {
    let mut loss = f64::NAN;
    let mut grad = vec![0.0; z.len()];
    let st = unsafe {
        scalecl_info_nce(
            z.as_ptr(),
            classes.as_ptr(),
            classes.len(),
            dim,
            tau,
            normalize,
            &mut loss,
            grad.as_mut_ptr(),
        )
    };
    (st, loss, grad)
}

#[test]
fn no_error_before_any_failure() {
    std::thread::spawn(|| assert!(scalecl_last_error().is_null()))
        .join()
        .unwrap();
}

#[test]
fn info_nce_equal_similarity_is_ln2() {
    // all similarities equal, each contributing anchor sees one positive and
    // one negative; the lone class-1 row has no positive and is skipped
    let z = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let (st, loss, _) = info_nce(&z, &[0, 0, 1], 2, 0.1, false);
    assert_eq!(st, ScaleclStatus::Ok);
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn info_nce_gradient_matches_finite_differences() {
    let z = [0.3, -0.2, 0.5, 0.1, 0.9, -0.4, -0.7, 0.2, 0.05, 0.6, -0.3, 0.8];
    let classes = [0, 1, 0, 1, 0, 1];
    let (st, _, grad) = info_nce(&z, &classes, 2, 0.5, true);
    assert_eq!(st, ScaleclStatus::Ok);
    let eps = 1e-6;
    for i in 0..z.len() {
        let mut p = z;
        p[i] += eps;
        let mut m = z;
        m[i] -= eps;
        let fd = (info_nce(&p, &classes, 2, 0.5, true).1 - info_nce(&m, &classes, 2, 0.5, true).1) / (2.0 * eps);
        assert!(
            (fd - grad[i]).abs() < 1e-7,
            "coordinate {i}: analytic {} numeric {fd}",
            grad[i]
        );
    }
}

#[test]
fn info_nce_without_gradient_buffer() {
    let z = [1.0, 0.0, 0.0, 1.0, 1.0, 0.1];
    let mut loss = 0.0;
    let st = unsafe {
        scalecl_info_nce(
            z.as_ptr(),
            [0, 1, 0].as_ptr(),
            3,
            2,
            0.1,
            true,
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, ScaleclStatus::Ok);
    assert!(loss.is_finite() && loss >= 0.0);
}

#[test]
fn info_nce_errors_map_to_status_codes() {
    let z = [1.0, 0.0, 0.0, 1.0];
    let (st, _, _) = info_nce(&z, &[0, 1], 2, 0.1, true);
    assert_eq!(st, ScaleclStatus::NoPositivePairs);
    assert!(!last_error().is_empty());

    let (st, _, _) = info_nce(&[f64::NAN, 0.0, 1.0, 0.0], &[0, 0], 2, 0.1, false);
    assert_eq!(st, ScaleclStatus::NonFinite);

    let st = unsafe { scalecl_info_nce(ptr::null(), [0, 0].as_ptr(), 2, 2, 0.1, true, &mut 0.0, ptr::null_mut()) };
    assert_eq!(st, ScaleclStatus::NullPointer);
    assert!(last_error().contains("embeddings"));

    let st = unsafe {
        scalecl_info_nce(
            z.as_ptr(),
            [0, 0].as_ptr(),
            2,
            2,
            0.1,
            true,
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, ScaleclStatus::NullPointer);
}

#[test]
fn downsample_matches_core() {
    let data: Vec<u32> = (0..2 * 8 * 8).map(|i| ((i * 7) % 5) as u32 % 3).collect();
    let map = LabelMap::new(2, 8, 8, data.clone(), 255).unwrap();
    let want = downsample_labels(&map, 4).unwrap();
    let mut out = vec![0u32; 2 * 2 * 2];
    let st = unsafe { scalecl_downsample_labels(data.as_ptr(), 2, 8, 8, 255, 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, ScaleclStatus::Ok);
    assert_eq!(out, want.data());

    let st = unsafe { scalecl_downsample_labels(data.as_ptr(), 2, 8, 8, 255, 4, out.as_mut_ptr(), 3) };
    assert_eq!(st, ScaleclStatus::InvalidArgument);
    let st = unsafe { scalecl_downsample_labels(data.as_ptr(), 2, 8, 8, 255, 3, out.as_mut_ptr(), out.len()) };
    assert_ne!(st, ScaleclStatus::Ok);
}

#[test]
fn miou_known_values() {
    // class 0: inter 2, union 3; class 1: inter 1, union 2; pixel 4 ignored
    let gt = [0, 0, 0, 1, 255];
    let pred = [0, 0, 1, 1, 0];
    let mut m = 0.0;
    let mut per = [0.0; 3];
    let st = unsafe { scalecl_miou(pred.as_ptr(), gt.as_ptr(), 5, 3, 255, &mut m, per.as_mut_ptr()) };
    assert_eq!(st, ScaleclStatus::Ok);
    assert!((per[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((per[1] - 0.5).abs() < 1e-12);
    assert!(per[2].is_nan());
    assert!((m - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);

    let st = unsafe {
        scalecl_miou(
            pred.as_ptr(),
            [0, 0, 7, 1, 0].as_ptr(),
            5,
            3,
            255,
            &mut m,
            ptr::null_mut(),
        )
    };
    assert_ne!(st, ScaleclStatus::Ok);
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.train_step().unwrap();
    let ckpt = trainer.checkpoint().unwrap();
    ckpt.save(&path).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut ScaleclModel = ptr::null_mut();
    assert_eq!(
        unsafe { scalecl_model_load(cpath.as_ptr(), &mut handle) },
        ScaleclStatus::Ok
    );
    assert!(!handle.is_null());
    assert_eq!(unsafe { scalecl_model_num_classes(handle) }, 3);

    let (images, _) = trainer.splits().val.batch(&[0, 1]).unwrap();
    let want = trainer.model().predict_logits(&images).unwrap();
    let mut logits = vec![0.0; want.numel()];
    let st = unsafe {
        scalecl_model_logits(
            handle,
            images.data().as_ptr(),
            2,
            32,
            32,
            logits.as_mut_ptr(),
            logits.len(),
        )
    };
    assert_eq!(st, ScaleclStatus::Ok);
    assert!(logits.iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let mut labels = vec![0u32; 2 * 32 * 32];
    let st = unsafe {
        scalecl_model_predict(
            handle,
            images.data().as_ptr(),
            2,
            32,
            32,
            labels.as_mut_ptr(),
            labels.len(),
        )
    };
    assert_eq!(st, ScaleclStatus::Ok);
    assert_eq!(labels, argmax_channels(&want, u32::MAX).unwrap().data());

    let st = unsafe { scalecl_model_predict(handle, images.data().as_ptr(), 2, 32, 32, labels.as_mut_ptr(), 5) };
    assert_eq!(st, ScaleclStatus::InvalidArgument);
    // 31 is not a multiple of the coarsest stride
    let st = unsafe {
        scalecl_model_logits(
            handle,
            images.data().as_ptr(),
            1,
            31,
            31,
            logits.as_mut_ptr(),
            logits.len(),
        )
    };
    assert_ne!(st, ScaleclStatus::Ok);

    unsafe { scalecl_model_free(handle) };
    unsafe { scalecl_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { scalecl_model_num_classes(ptr::null()) }, 0);
}

#[test]
fn model_load_failures() {
    let mut handle: *mut ScaleclModel = ptr::NonNull::dangling().as_ptr();
    let missing = CString::new("/nonexistent/dir/m.ckpt").unwrap();
    assert_eq!(
        unsafe { scalecl_model_load(missing.as_ptr(), &mut handle) },
        ScaleclStatus::Io
    );
    assert!(handle.is_null());

    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let bogus = CString::new(bogus.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { scalecl_model_load(bogus.as_ptr(), &mut handle) },
        ScaleclStatus::Checkpoint
    );
    assert!(last_error().to_lowercase().contains("checkpoint") || !last_error().is_empty());

    assert_eq!(
        unsafe { scalecl_model_load(ptr::null(), &mut handle) },
        ScaleclStatus::NullPointer
    );
    assert_eq!(
        unsafe { scalecl_model_load(bogus.as_ptr(), ptr::null_mut()) },
        ScaleclStatus::NullPointer
    );
}
