use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mxfpq::hwemu::{lut_quantize, LutTables};
use mxfpq::quant::{dfq_quantize, quantize, Granularity};
use mxfpq::synth;
use mxfpq::FpFormat;
use mxfpq_ffi::*;

fn per_group(size: usize) -> MxfpqGranularity {
    MxfpqGranularity {
        kind: MxfpqGranularityKind::PerGroup,
        group_size: size,
        pad: false,
    }
}

fn last_error() -> String {
    let p = mxfpq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn format_queries() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(mxfpq_format_max(c("E2M1").as_ptr(), &mut v), MxfpqStatus::Ok);
        assert_eq!(v, 6.0);
        assert_eq!(mxfpq_format_max(c("E4M3").as_ptr(), &mut v), MxfpqStatus::Ok);
        assert_eq!(v, 448.0);
        assert_eq!(mxfpq_format_round(c("E2M1").as_ptr(), 2.5, &mut v), MxfpqStatus::Ok);
        assert_eq!(v, 2.0);
        assert_eq!(mxfpq_format_round(c("E2M1").as_ptr(), -100.0, &mut v), MxfpqStatus::Ok);
        assert_eq!(v, -6.0);
        assert_eq!(mxfpq_format_max(c("E9M9").as_ptr(), &mut v), MxfpqStatus::Config);
        assert_eq!(
            mxfpq_format_round(c("E2M1").as_ptr(), f64::NAN, &mut v),
            MxfpqStatus::Input
        );
    }
}

#[test]
fn quantize_matches_core() {
    let x = synth::gaussian_weights(8, 256, (0.01, 0.1), 3);
    let want = quantize(x.view(), FpFormat::E2M1, Granularity::per_group(128)).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        let s = mxfpq_quantize(x.as_ptr(), 8, 256, c("E2M1").as_ptr(), per_group(128), &mut h);
        assert_eq!(s, MxfpqStatus::Ok);
        let (mut r, mut cl) = (0, 0);
        mxfpq_quantized_shape(h, &mut r, &mut cl);
        assert_eq!((r, cl), (8, 256));
        mxfpq_quantized_scales_shape(h, &mut r, &mut cl);
        assert_eq!((r, cl), (8, 2));

        let mut codes = vec![0u8; 8 * 256];
        assert_eq!(mxfpq_quantized_codes(h, codes.as_mut_ptr(), codes.len()), MxfpqStatus::Ok);
        assert_eq!(codes, want.codes.iter().copied().collect::<Vec<_>>());
        let mut scales = vec![0.0; 16];
        mxfpq_quantized_scales(h, scales.as_mut_ptr(), 16);
        assert_eq!(scales, want.scales.iter().copied().collect::<Vec<_>>());
        let mut deq = vec![0.0; 8 * 256];
        mxfpq_quantized_dequantize(h, deq.as_mut_ptr(), deq.len());
        assert_eq!(deq, want.dequantize().iter().copied().collect::<Vec<_>>());

        let s = mxfpq_quantized_codes(h, codes.as_mut_ptr(), 5);
        assert_eq!(s, MxfpqStatus::Input);
        assert!(last_error().contains("needs 2048"));
        mxfpq_quantized_free(h);
        mxfpq_quantized_free(ptr::null_mut());

        let s = mxfpq_quantize(x.as_ptr(), 8, 256, c("INT4").as_ptr(), per_group(128), &mut h);
        assert_eq!(s, MxfpqStatus::Ok);
        mxfpq_quantized_free(h);

        let s = mxfpq_quantize(x.as_ptr(), 8, 256, c("E2M1").as_ptr(), per_group(100), &mut h);
        assert_eq!(s, MxfpqStatus::Input);
        let s = mxfpq_quantize(ptr::null(), 8, 256, c("E2M1").as_ptr(), per_group(128), &mut h);
        assert_eq!(s, MxfpqStatus::NullPointer);
    }
}

#[test]
fn dfq_matches_core() {
    let x = synth::gelu_activations(4, 256, 5);
    let want = dfq_quantize(x.view(), FpFormat::E1M2, FpFormat::E2M1, Granularity::per_group(128))
        .unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        let s = mxfpq_dfq(
            x.as_ptr(),
            4,
            256,
            c("E1M2").as_ptr(),
            c("E2M1").as_ptr(),
            per_group(128),
            &mut h,
        );
        assert_eq!(s, MxfpqStatus::Ok);
        let mut codes = vec![0u8; 1024];
        mxfpq_dfq_codes(h, codes.as_mut_ptr(), 1024);
        assert_eq!(codes, want.combined_codes().iter().copied().collect::<Vec<_>>());
        let mut deq = vec![0.0; 1024];
        mxfpq_dfq_dequantize(h, deq.as_mut_ptr(), 1024);
        assert_eq!(deq, want.dequantize().iter().copied().collect::<Vec<_>>());
        mxfpq_dfq_free(h);
    }
}

#[test]
fn rotation_in_place() {
    let x = synth::gaussian(3, 256, 1.0, 1);
    let mut buf: Vec<f64> = x.iter().copied().collect();
    unsafe {
        assert_eq!(mxfpq_ght_inplace(buf.as_mut_ptr(), 3, 256, 128), MxfpqStatus::Ok);
        assert!(buf.iter().zip(x.iter()).any(|(a, b)| (a - b).abs() > 1e-3));
        // the normalized transform is its own inverse
        mxfpq_ght_inplace(buf.as_mut_ptr(), 3, 256, 128);
        for (a, b) in buf.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(mxfpq_ght_inplace(buf.as_mut_ptr(), 3, 256, 96), MxfpqStatus::Input);

        let lambda = vec![2.0; 256];
        let mut w = buf.clone();
        mxfpq_fuse_weight_inplace(w.as_mut_ptr(), 3, 256, lambda.as_ptr(), 128);
        let mut plain = buf.clone();
        mxfpq_fuse_weight_inplace(plain.as_mut_ptr(), 3, 256, ptr::null(), 128);
        for (a, b) in w.iter().zip(plain.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn emu_gemm_matches_dequant_product() {
    let x = synth::gaussian(16, 256, 1.0, 7);
    let w = synth::gaussian_weights(8, 256, (0.01, 0.1), 8);
    let luts = LutTables::default();
    let wq = lut_quantize(w.view(), Granularity::per_group(128), &luts).unwrap();
    let xq = lut_quantize(x.view(), Granularity::per_group(128), &luts).unwrap();
    let oracle = xq.dequantize().dot(&wq.dequantize().t());
    unsafe {
        let mut l = ptr::null_mut();
        assert_eq!(mxfpq_luts_new(MxfpqAddressMode::Guarded, &mut l), MxfpqStatus::Ok);
        let (mut hx, mut hw) = (ptr::null_mut(), ptr::null_mut());
        mxfpq_lut_quantize(l, x.as_ptr(), 16, 256, per_group(128), &mut hx);
        mxfpq_lut_quantize(l, w.as_ptr(), 8, 256, per_group(128), &mut hw);
        let mut y = vec![0.0; 16 * 8];
        assert_eq!(mxfpq_emu_gemm(l, hx, hw, y.as_mut_ptr(), y.len()), MxfpqStatus::Ok);
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} {b}");
        }

        let mut hd = ptr::null_mut();
        mxfpq_dfq_lut_quantize(l, x.as_ptr(), 16, 256, per_group(128), &mut hd);
        assert_eq!(mxfpq_emu_gemm_dfq(l, hd, hw, y.as_mut_ptr(), y.len()), MxfpqStatus::Ok);

        // a weight quantized outside the LUT formats is rejected
        let mut he = ptr::null_mut();
        mxfpq_quantize(w.as_ptr(), 8, 256, c("E4M3").as_ptr(), per_group(128), &mut he);
        assert_ne!(mxfpq_emu_gemm(l, hx, he, y.as_mut_ptr(), y.len()), MxfpqStatus::Ok);

        mxfpq_quantized_free(he);
        mxfpq_dfq_free(hd);
        mxfpq_quantized_free(hx);
        mxfpq_quantized_free(hw);
        mxfpq_luts_free(l);
    }
}

#[test]
fn header_declares_api_and_compiles() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/mxfpq.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "mxfpq_last_error",
        "mxfpq_format_max",
        "mxfpq_quantize",
        "mxfpq_dfq",
        "mxfpq_ght_inplace",
        "mxfpq_fuse_weight_inplace",
        "mxfpq_emu_gemm",
        "mxfpq_quantized_free",
        "typedef struct MxfpqQuantized MxfpqQuantized;",
    ] {
        assert!(text.contains(f), "{f}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler found; header syntax not checked");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
