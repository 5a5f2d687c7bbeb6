use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use kdmtl::data::{gen_scale_clash, split_train_val, ScaleClashParams};
use kdmtl::models::{expected_param_count, save_checkpoint, AdaptorKind, EncoderConfig};
use kdmtl::pipeline::{evaluate, train_single_task, Method, TrainConfig};
use kdmtl_ffi::*;

fn last_error() -> String {
    let p = kd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn generate(n: usize, d: usize, seed: u64) -> *mut KdDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { kd_scale_clash_generate(n, d, seed, &mut ds) }, KdStatus::Ok);
    assert!(!ds.is_null());
    ds
}

fn hash(ds: *const KdDataset) -> String {
    let mut buf = [0 as c_char; KD_HASH_LEN];
    assert_eq!(unsafe { kd_dataset_hash(ds, buf.as_mut_ptr(), buf.len()) }, KdStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(50, 3, 7);
    let mut n = 0;
    assert_eq!(unsafe { kd_dataset_len(ds, &mut n) }, KdStatus::Ok);
    assert_eq!(n, 50);
    let h = hash(ds);
    assert_eq!(h, gen_scale_clash(&ScaleClashParams::new(50, 3, 7)).unwrap().hash());

    let file = cpath(&dir.path().join("d.kdds"));
    assert_eq!(unsafe { kd_dataset_save(ds, file.as_ptr()) }, KdStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { kd_dataset_load(file.as_ptr(), &mut back) }, KdStatus::Ok);
    assert_eq!(hash(back), h);
    assert!(kd_last_error_message().is_null());
    unsafe {
        kd_dataset_free(ds);
        kd_dataset_free(back);
        kd_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = ptr::null_mut();
    let missing = cpath(&dir.path().join("none.kdds"));
    assert_eq!(unsafe { kd_dataset_load(missing.as_ptr(), &mut ds) }, KdStatus::Io);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());

    let junk = dir.path().join("junk.kdds");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let junk = cpath(&junk);
    assert_eq!(unsafe { kd_dataset_load(junk.as_ptr(), &mut ds) }, KdStatus::Format);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { kd_model_load(junk.as_ptr(), &mut m) }, KdStatus::Format);

    assert_eq!(unsafe { kd_dataset_load(ptr::null(), &mut ds) }, KdStatus::Null);
    assert!(last_error().contains("path"));
    assert_eq!(unsafe { kd_scale_clash_generate(10, 2, 0, ptr::null_mut()) }, KdStatus::Null);
    assert_eq!(unsafe { kd_scale_clash_generate(0, 2, 0, &mut ds) }, KdStatus::InvalidArgument);

    let good = generate(20, 2, 0);
    let mut small = [0 as c_char; 10];
    assert_eq!(
        unsafe { kd_dataset_hash(good, small.as_mut_ptr(), small.len()) },
        KdStatus::InvalidArgument
    );
    assert!(last_error().contains("65"));
    unsafe { kd_dataset_free(good) };
}

#[test]
fn last_error_is_per_thread() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { kd_dataset_load(ptr::null(), &mut ds) }, KdStatus::Null);
    std::thread::spawn(|| assert!(kd_last_error_message().is_null())).join().unwrap();
    assert!(!kd_last_error_message().is_null());
}

#[test]
fn distill_loss_matches_cosine_identity() {
    let a = [1.0, 2.0, -0.5, 3.0, 0.0, 1.0];
    let b = [0.5, -1.0, 2.0, 3.0, 1.0, 1.0];
    // Two samples of three features: mean of 2 - 2 cos over samples.
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let n = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
        dot / (n(x) * n(y))
    };
    let expected = ((2.0 - 2.0 * cos(&a[..3], &b[..3])) + (2.0 - 2.0 * cos(&a[3..], &b[3..]))) / 2.0;
    let mut out = f64::NAN;
    assert_eq!(unsafe { kd_distill_loss(a.as_ptr(), b.as_ptr(), 2, 3, &mut out) }, KdStatus::Ok);
    assert!((out - expected).abs() < 1e-12, "{out} vs {expected}");

    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert_eq!(unsafe { kd_distill_loss(a.as_ptr(), neg.as_ptr(), 2, 3, &mut out) }, KdStatus::Ok);
    assert!((out - 4.0).abs() < 1e-12);

    let zeros = [0.0; 6];
    assert_eq!(
        unsafe { kd_distill_loss(zeros.as_ptr(), b.as_ptr(), 2, 3, &mut out) },
        KdStatus::Degenerate
    );
    assert_eq!(
        unsafe { kd_distill_loss(a.as_ptr(), b.as_ptr(), 0, 3, &mut out) },
        KdStatus::InvalidArgument
    );
    assert_eq!(unsafe { kd_distill_loss(a.as_ptr(), ptr::null(), 2, 3, &mut out) }, KdStatus::Null);
}

#[test]
fn min_norm_matches_two_task_closed_form() {
    let g1 = [1.0, 0.5, -2.0];
    let g2 = [-0.5, 1.5, 1.0];
    let d: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum();
    let gamma = (g1.iter().zip(&g2).map(|(a, b)| (b - a) * b).sum::<f64>() / d).clamp(0.0, 1.0);
    let best: f64 = g1.iter().zip(&g2).map(|(a, b)| (gamma * a + (1.0 - gamma) * b).powi(2)).sum();

    let grads: Vec<f64> = g1.iter().chain(&g2).copied().collect();
    let mut w = [0.0; 2];
    let mut obj = 0.0;
    assert_eq!(
        unsafe { kd_min_norm(grads.as_ptr(), 2, 3, 1e-14, w.as_mut_ptr(), &mut obj) },
        KdStatus::Ok
    );
    assert!((w[0] - gamma).abs() < 1e-6, "{w:?} vs {gamma}");
    assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
    assert!((obj - best).abs() < 1e-10);
    assert_eq!(
        unsafe { kd_min_norm(grads.as_ptr(), 2, 3, 1e-14, w.as_mut_ptr(), ptr::null_mut()) },
        KdStatus::Ok
    );

    let bad = [f64::NAN, 0.0];
    assert_eq!(
        unsafe { kd_min_norm(bad.as_ptr(), 2, 1, 0.0, w.as_mut_ptr(), ptr::null_mut()) },
        KdStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { kd_min_norm(grads.as_ptr(), 2, 3, 0.0, ptr::null_mut(), ptr::null_mut()) },
        KdStatus::Null
    );
}

#[test]
fn model_loads_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_scale_clash(&ScaleClashParams::new(120, 3, 1)).unwrap();
    let (tr, va) = split_train_val(&ds, 0.25, 0).unwrap();
    let enc = EncoderConfig::new(3, vec![6, 4]).with_taps(vec![1]);
    let spec = tr.task_specs()[0].clone();
    let cfg = TrainConfig::new(Method::Stl, 2, 0.01, 16, 0);
    let (model, _) = train_single_task(&spec, &tr, &va, &enc, &cfg).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();

    let mut m = ptr::null_mut();
    let path = cpath(&ckpt);
    assert_eq!(unsafe { kd_model_load(path.as_ptr(), &mut m) }, KdStatus::Ok);
    let mut params = 0;
    assert_eq!(unsafe { kd_model_num_params(m, &mut params) }, KdStatus::Ok);
    assert_eq!(params, expected_param_count(&enc, &[spec.clone()], AdaptorKind::None));

    let data = dir.path().join("va.kdds");
    kdmtl::data::save_dataset(&va, &data).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { kd_dataset_load(cpath(&data).as_ptr(), &mut h) }, KdStatus::Ok);
    let task = CString::new(spec.id.clone()).unwrap();
    let mut metric = f64::NAN;
    assert_eq!(unsafe { kd_model_evaluate(m, h, task.as_ptr(), &mut metric) }, KdStatus::Ok);
    assert_eq!(metric, evaluate(&model, &va).unwrap()[&spec.id]);

    let other = CString::new("nope").unwrap();
    assert_eq!(
        unsafe { kd_model_evaluate(m, h, other.as_ptr(), &mut metric) },
        KdStatus::InvalidArgument
    );
    let wrong_shape = generate(20, 5, 0);
    assert_eq!(
        unsafe { kd_model_evaluate(m, wrong_shape, task.as_ptr(), &mut metric) },
        KdStatus::Shape
    );
    unsafe {
        kd_model_free(m);
        kd_dataset_free(h);
        kd_dataset_free(wrong_shape);
        kd_model_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kdmtl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "kd_scale_clash_generate",
        "kd_dataset_load",
        "kd_dataset_save",
        "kd_dataset_len",
        "kd_dataset_hash",
        "kd_dataset_free",
        "kd_model_load",
        "kd_model_free",
        "kd_model_num_params",
        "kd_model_evaluate",
        "kd_distill_loss",
        "kd_min_norm",
        "kd_last_error_message",
        "KD_STATUS_DIVERGENCE",
        "typedef struct KdDataset KdDataset",
    ] {
        assert!(text.contains(name), "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"kdmtl.h\"\n\
         int main(void) {\n\
           KdDataset *ds = NULL;\n\
           KdStatus s = kd_scale_clash_generate(10, 2, 0, &ds);\n\
           kd_dataset_free(ds);\n\
           return s == KD_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let inc = header.parent().unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(inc)
            .arg(&src)
            .output();
        match out {
            Ok(o) => assert!(o.status.success(), "{compiler}: {}", String::from_utf8_lossy(&o.stderr)),
            Err(e) => eprintln!("skipping {compiler}: {e}"),
        }
    }
}
