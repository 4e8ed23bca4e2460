use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use grass::compressor::parse_compressor;
use grass::GradientVector;
use grass_ffi::*;

fn last_error() -> String {
    let p = grass_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn compressor(spec: &str, p: usize) -> (GrassStatus, *mut GrassCompressor) {
    let spec = CString::new(spec).unwrap();
    let mut h = ptr::null_mut();
    let status = unsafe { grass_compressor_new(spec.as_ptr(), p, &mut h) };
    (status, h)
}

#[test]
fn compress_matches_the_library() {
    let spec = "mask:k=128,seed=3+sjlt:k=32,s=2,seed=4";
    let (status, h) = compressor(spec, 512);
    assert_eq!(status, GrassStatus::Ok);
    let g: Vec<f64> = (0..512).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
    let mut out = vec![0.0f64; 32];
    unsafe {
        assert_eq!(grass_compressor_input_dim(h), 512);
        assert_eq!(grass_compressor_output_dim(h), 32);
        assert_eq!(
            grass_compressor_compress_f64(h, g.as_ptr(), g.len(), out.as_mut_ptr(), out.len()),
            GrassStatus::Ok
        );
    }
    let lib = parse_compressor(spec).unwrap().build(512, None).unwrap();
    assert_eq!(out, lib.compress(&GradientVector::Dense(g)).unwrap());
    let mut fp = [0u8; 32];
    unsafe {
        assert_eq!(grass_compressor_fingerprint(h, fp.as_mut_ptr()), GrassStatus::Ok);
        grass_compressor_free(h);
    }
    assert_eq!(fp, lib.fingerprint());
}

#[test]
fn errors_carry_codes_and_messages() {
    let (status, h) = compressor("mask:k=10+sjlt:k=20", 100);
    assert_eq!(status, GrassStatus::Parse);
    assert!(h.is_null());
    assert!(last_error().contains("exceeds stage input dim"), "{}", last_error());

    let (status, _) = compressor("nonsense:k=3", 100);
    assert_eq!(status, GrassStatus::Parse);

    let status = unsafe { grass_compressor_new(ptr::null(), 10, &mut ptr::null_mut()) };
    assert_eq!(status, GrassStatus::NullPointer);

    let (_, h) = compressor("sjlt:k=4,seed=1", 16);
    let g = [1.0f32; 15];
    let mut out = [0.0f32; 4];
    let status = unsafe { grass_compressor_compress_f32(h, g.as_ptr(), 15, out.as_mut_ptr(), 4) };
    assert_eq!(status, GrassStatus::DimensionMismatch);
    unsafe { grass_compressor_free(h) };
}

#[test]
fn fim_solves_and_guards_stale_damping() {
    let mut f = ptr::null_mut();
    unsafe {
        assert_eq!(grass_fim_new(3, &mut f), GrassStatus::Ok);
        for g in [[1.0f32, 0.0, 0.0], [0.0, 2.0, 0.0]] {
            assert_eq!(grass_fim_accumulate_f32(f, g.as_ptr(), 3), GrassStatus::Ok);
        }
        assert_eq!(grass_fim_count(f), 2);
        assert_eq!(grass_fim_factorize(f, 0.5), GrassStatus::Ok);
        let b = [1.0, 1.0, 1.0];
        let mut x = [0.0; 3];
        assert_eq!(grass_fim_ifvp(f, 0.5, b.as_ptr(), 3, x.as_mut_ptr()), GrassStatus::Ok);
        // Mean FIM is diag(0.5, 2, 0).
        let expect = [1.0, 1.0 / 2.5, 2.0];
        for (a, e) in x.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{x:?}");
        }
        assert_ne!(grass_fim_ifvp(f, 0.7, b.as_ptr(), 3, x.as_mut_ptr()), GrassStatus::Ok);
        assert_eq!(grass_fim_factorize(f, 0.0), GrassStatus::Numerical);
        assert!(last_error().contains("factorization"));
        grass_fim_free(f);
    }
}

fn find_staticlib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps.parent()?.join("libgrass_ffi.a"), deps.join("libgrass_ffi.a")]
        .into_iter()
        .find(|p| p.is_file())
}

#[test]
fn header_compiles_and_links_from_c() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/grass.h")).unwrap();
    for name in ["grass_compressor_new", "grass_fim_ifvp", "grass_last_error", "GRASS_STATUS_OK"] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let Some(lib) = find_staticlib() else {
        panic!("static library not found next to the test binary");
    };
    let out = std::env::temp_dir().join(format!("grass_ffi_smoke_{}", std::process::id()));
    let status = Command::new("cc")
        .arg(dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .expect("cc runs");
    assert!(status.success(), "C smoke program failed to build");
    let run = Command::new(&out).output().unwrap();
    let _ = std::fs::remove_file(&out);
    assert!(run.status.success(), "smoke exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
