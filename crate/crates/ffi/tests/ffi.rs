use std::ffi::{CStr, CString};
use std::ptr;

use irsr_ffi::*;

fn last_error() -> String {
    let p = irsr_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_lifecycle_and_super_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ck").to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(irsr_model_new(2, 3, &mut m), IrsrStatus::Ok);
        assert_eq!(irsr_model_scale(m), 2);
        let count = irsr_model_param_count(m);
        assert!(count > 0);
        assert_eq!(irsr_model_save(m, path.as_ptr()), IrsrStatus::Ok);
        irsr_model_free(m);

        let mut m = ptr::null_mut();
        assert_eq!(irsr_model_load(path.as_ptr(), &mut m), IrsrStatus::Ok);
        assert_eq!(irsr_model_param_count(m), count);
        let input: Vec<u8> = (0..16 * 16).map(|i| (i * 7 % 256) as u8).collect();
        let mut out = vec![0u8; 32 * 32];
        assert_eq!(irsr_model_super_resolve(m, input.as_ptr(), 16, 16, 1, out.as_mut_ptr(), out.len()), IrsrStatus::Ok);
        assert!(out.iter().any(|&v| v != 0));
        let mut small = vec![0u8; 10];
        assert_eq!(
            irsr_model_super_resolve(m, input.as_ptr(), 16, 16, 1, small.as_mut_ptr(), small.len()),
            IrsrStatus::InvalidArgument
        );
        assert!(last_error().contains("needed"));
        assert_eq!(
            irsr_model_super_resolve(m, input.as_ptr(), 16, 16, 3, out.as_mut_ptr(), out.len()),
            IrsrStatus::InvalidArgument
        );
        irsr_model_free(m);
        irsr_model_free(ptr::null_mut());
    }
}

#[test]
fn load_errors() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(irsr_model_load(ptr::null(), &mut m), IrsrStatus::NullPointer);
        let missing = CString::new("/nonexistent/irsr").unwrap();
        assert_eq!(irsr_model_load(missing.as_ptr(), &mut m), IrsrStatus::Data);
        assert!(last_error().contains("checkpoint"));
        assert!(m.is_null());
        assert_eq!(irsr_model_new(3, 0, &mut m), IrsrStatus::InvalidArgument);
        assert_eq!(irsr_model_scale(ptr::null()), 0);
    }
}

#[test]
fn metrics() {
    unsafe {
        let gt = [255.0f64];
        let sr = [254.0f64];
        let mut p = 0.0;
        assert_eq!(irsr_psnr(sr.as_ptr(), gt.as_ptr(), 1, 255.0, &mut p), IrsrStatus::Ok);
        assert!((p - 48.1308).abs() < 1e-3);
        assert_eq!(irsr_psnr(gt.as_ptr(), gt.as_ptr(), 1, 255.0, &mut p), IrsrStatus::Ok);
        assert!(p.is_infinite());

        let img: Vec<f64> = (0..144).map(|i| (i * 13 % 255) as f64).collect();
        let mut s = 0.0;
        assert_eq!(irsr_ssim(img.as_ptr(), img.as_ptr(), 12, 12, &mut s), IrsrStatus::Ok);
        assert_eq!(s, 1.0);
        assert_eq!(irsr_ssim(img.as_ptr(), img.as_ptr(), 8, 18, &mut s), IrsrStatus::InvalidArgument);

        let a = [0.0, 5.0, 10.0, 15.0];
        let z = [0.0; 4];
        let mut d = [0.0; 4];
        assert_eq!(irsr_residual_distribution(a.as_ptr(), z.as_ptr(), 4, d.as_mut_ptr()), IrsrStatus::Ok);
        assert_eq!(d, [0.25; 4]);
        assert_eq!(irsr_residual_distribution(ptr::null(), z.as_ptr(), 4, d.as_mut_ptr()), IrsrStatus::NullPointer);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/irsr.h")).unwrap();
    for f in [
        "irsr_last_error_message",
        "irsr_model_load",
        "irsr_model_new",
        "irsr_model_save",
        "irsr_model_free",
        "irsr_model_scale",
        "irsr_model_param_count",
        "irsr_model_super_resolve",
        "irsr_psnr",
        "irsr_ssim",
        "irsr_residual_distribution",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f}");
    }
    assert!(header.contains("typedef struct IrsrModel IrsrModel;"));
}
