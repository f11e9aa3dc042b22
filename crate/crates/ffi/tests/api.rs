use std::ffi::{CStr, CString};
use std::ptr;

use noisecal_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(noisecal_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn small_arch() -> NoisecalArch {
    NoisecalArch {
        input_dim: 6,
        hidden_width: 8,
        depth: 2,
        num_classes: 4,
        output: NoisecalOutput::Softmax as u32,
    }
}

fn new_model(arch: NoisecalArch, feedback: bool, seed: u64) -> *mut NoisecalModel {
    let mut handle = ptr::null_mut();
    let status = unsafe { noisecal_model_new(&arch, feedback, seed, &mut handle) };
    assert_eq!(status, NoisecalStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

fn inputs(rows: usize, dim: usize) -> Vec<f64> {
    (0..rows * dim)
        .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
        .collect()
}

fn predict(model: *const NoisecalModel, x: &[f64], rows: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * k];
    let status = unsafe {
        noisecal_model_predict_proba(model, x.as_ptr(), rows, out.as_mut_ptr(), out.len())
    };
    assert_eq!(status, NoisecalStatus::Ok, "{}", last_error());
    out
}

#[test]
fn version_and_status_names() {
    let v = unsafe { CStr::from_ptr(noisecal_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let name = |code| {
        unsafe { CStr::from_ptr(noisecal_status_name(code)) }
            .to_str()
            .unwrap()
    };
    assert_eq!(name(0), "ok");
    assert_eq!(name(NoisecalStatus::ShapeError as i32), "shape-error");
    assert_eq!(name(NoisecalStatus::Panic as i32), "panic");
    assert!(noisecal_status_name(-1).is_null());
    assert!(noisecal_status_name(14).is_null());
}

#[test]
fn model_predicts_distributions() {
    for output in [NoisecalOutput::Softmax, NoisecalOutput::Sigmoid] {
        let arch = NoisecalArch {
            output: output as u32,
            ..small_arch()
        };
        let model = new_model(arch, false, 3);
        let mut back = NoisecalArch {
            input_dim: 0,
            hidden_width: 0,
            depth: 0,
            num_classes: 0,
            output: 9,
        };
        assert_eq!(
            unsafe { noisecal_model_arch(model, &mut back) },
            NoisecalStatus::Ok
        );
        assert_eq!(back, arch);
        let mut count = 0;
        assert_eq!(
            unsafe { noisecal_model_parameter_count(model, &mut count) },
            NoisecalStatus::Ok
        );
        // two blocks of (W, b, gamma, beta) and the head
        assert_eq!(count, (6 * 8 + 3 * 8) + (8 * 8 + 3 * 8) + (8 * 4 + 4));
        let probs = predict(model, &inputs(5, 6), 5, 4);
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        unsafe { noisecal_model_free(model) };
    }
}

#[test]
fn seeds_fix_initialisation() {
    let x = inputs(3, 6);
    let a = new_model(small_arch(), false, 11);
    let b = new_model(small_arch(), true, 11);
    let c = new_model(small_arch(), false, 12);
    // feedback matrices are drawn after the forward weights
    assert_eq!(predict(a, &x, 3, 4), predict(b, &x, 3, 4));
    assert_ne!(predict(a, &x, 3, 4), predict(c, &x, 3, 4));
    unsafe {
        noisecal_model_free(a);
        noisecal_model_free(b);
        noisecal_model_free(c);
    }
}

#[test]
fn null_pointers_are_reported() {
    let mut handle = ptr::null_mut();
    let arch = small_arch();
    let status = unsafe { noisecal_model_new(ptr::null(), false, 0, &mut handle) };
    assert_eq!(status, NoisecalStatus::NullPointer);
    assert!(last_error().contains("arch"), "{}", last_error());
    let status = unsafe { noisecal_model_new(&arch, false, 0, ptr::null_mut()) };
    assert_eq!(status, NoisecalStatus::NullPointer);

    let mut out = 0.0;
    let status = unsafe { noisecal_ece(ptr::null(), ptr::null(), 3, 10, &mut out) };
    assert_eq!(status, NoisecalStatus::NullPointer);
    assert!(last_error().contains("confidence"));
    let status = unsafe { noisecal_auroc([0.5].as_ptr(), 1, [0.1].as_ptr(), 1, ptr::null_mut()) };
    assert_eq!(status, NoisecalStatus::NullPointer);
    let mut count = 0;
    let status = unsafe { noisecal_model_parameter_count(ptr::null(), &mut count) };
    assert_eq!(status, NoisecalStatus::NullPointer);
    assert!(last_error().contains("model"));

    unsafe { noisecal_model_free(ptr::null_mut()) };
}

#[test]
fn last_error_clears_on_success() {
    let mut out = 0.0;
    let status = unsafe { noisecal_ece([0.5].as_ptr(), [1].as_ptr(), 1, 0, &mut out) };
    assert_eq!(status, NoisecalStatus::InvalidArgument);
    assert!(last_error().contains("bin"), "{}", last_error());
    let status = unsafe { noisecal_ece([0.5].as_ptr(), [1].as_ptr(), 1, 10, &mut out) };
    assert_eq!(status, NoisecalStatus::Ok);
    assert_eq!(last_error(), "");
}

#[test]
fn invalid_architectures_are_rejected() {
    let mut handle = ptr::null_mut();
    let bad = [
        NoisecalArch {
            depth: 0,
            ..small_arch()
        },
        NoisecalArch {
            num_classes: 1,
            ..small_arch()
        },
        NoisecalArch {
            output: 7,
            ..small_arch()
        },
    ];
    for arch in bad {
        let status = unsafe { noisecal_model_new(&arch, false, 0, &mut handle) };
        assert_eq!(status, NoisecalStatus::InvalidArgument, "{arch:?}");
        assert!(handle.is_null());
    }
}

#[test]
fn buffer_sizes_are_checked() {
    let model = new_model(small_arch(), false, 0);
    let x = inputs(2, 6);
    let mut out = vec![0.0; 7];
    let status =
        unsafe { noisecal_model_predict_proba(model, x.as_ptr(), 2, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, NoisecalStatus::InvalidArgument);
    assert!(last_error().contains("need 2 x 4"), "{}", last_error());
    let status = unsafe { noisecal_model_predict_proba(model, x.as_ptr(), 2, ptr::null_mut(), 8) };
    assert_eq!(status, NoisecalStatus::NullPointer);
    let status = unsafe { noisecal_model_predict_proba(model, x.as_ptr(), 0, ptr::null_mut(), 0) };
    assert_eq!(status, NoisecalStatus::Ok);
    unsafe { noisecal_model_free(model) };
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("m.nnck").to_str().unwrap()).unwrap();
    let model = new_model(small_arch(), true, 5);
    assert_eq!(
        unsafe { noisecal_model_save(model, file.as_ptr()) },
        NoisecalStatus::Ok,
        "{}",
        last_error()
    );
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { noisecal_model_load(file.as_ptr(), &mut loaded) },
        NoisecalStatus::Ok
    );
    let x = inputs(4, 6);
    assert_eq!(predict(model, &x, 4, 4), predict(loaded, &x, 4, 4));
    unsafe {
        noisecal_model_free(model);
        noisecal_model_free(loaded);
    }

    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    let status = unsafe { noisecal_model_load(missing.as_ptr(), &mut h) };
    assert_eq!(status, NoisecalStatus::IoError);
    std::fs::write(dir.path().join("junk"), b"not a checkpoint").unwrap();
    let junk = CString::new(dir.path().join("junk").to_str().unwrap()).unwrap();
    let status = unsafe { noisecal_model_load(junk.as_ptr(), &mut h) };
    assert_eq!(status, NoisecalStatus::FormatError);
    assert!(last_error().contains("magic"), "{}", last_error());
    assert!(h.is_null());
}

#[test]
fn noise_pretraining_is_seeded_and_lowers_confidence() {
    let arch = NoisecalArch {
        input_dim: 20,
        hidden_width: 32,
        depth: 2,
        num_classes: 10,
        output: NoisecalOutput::Softmax as u32,
    };
    let opts = NoisecalNoiseOptions {
        epochs: 20,
        batches_per_epoch: 10,
        batch_size: 64,
        learning_rate: 1e-3,
        ..noisecal_noise_options_default()
    };
    let x = inputs(200, 20);
    let mean_conf = |p: &[f64]| {
        p.chunks(10)
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / 200.0
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let model = new_model(arch, false, 1);
        let before = mean_conf(&predict(model, &x, 200, 10));
        let mut loss = f64::NAN;
        let status = unsafe { noisecal_model_pretrain_noise(model, &opts, &mut loss) };
        assert_eq!(status, NoisecalStatus::Ok, "{}", last_error());
        let after = predict(model, &x, 200, 10);
        assert!(
            mean_conf(&after) < before,
            "{} !< {before}",
            mean_conf(&after)
        );
        // uniform labels: the loss floor is ln 10
        assert!((loss - 10f64.ln()).abs() < 0.2, "loss {loss}");
        runs.push((loss, after));
        unsafe { noisecal_model_free(model) };
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn feedback_alignment_needs_feedback_matrices() {
    let opts = NoisecalNoiseOptions {
        epochs: 1,
        batches_per_epoch: 2,
        batch_size: 16,
        feedback_alignment: true,
        ..noisecal_noise_options_default()
    };
    let plain = new_model(small_arch(), false, 0);
    let status = unsafe { noisecal_model_pretrain_noise(plain, &opts, ptr::null_mut()) };
    assert_eq!(status, NoisecalStatus::InvalidState);
    let fa = new_model(small_arch(), true, 0);
    let status = unsafe { noisecal_model_pretrain_noise(fa, &opts, ptr::null_mut()) };
    assert_eq!(status, NoisecalStatus::Ok, "{}", last_error());
    unsafe {
        noisecal_model_free(plain);
        noisecal_model_free(fa);
    }
}

#[test]
fn divergence_is_an_error_code() {
    let model = new_model(small_arch(), false, 0);
    let opts = NoisecalNoiseOptions {
        epochs: 3,
        batches_per_epoch: 5,
        batch_size: 16,
        learning_rate: 1e300,
        ..noisecal_noise_options_default()
    };
    let status = unsafe { noisecal_model_pretrain_noise(model, &opts, ptr::null_mut()) };
    assert!(
        matches!(
            status,
            NoisecalStatus::Diverged | NoisecalStatus::NonFiniteGradient
        ),
        "{status:?}: {}",
        last_error()
    );
    unsafe { noisecal_model_free(model) };
}

#[test]
fn evaluate_reports_consistent_metrics() {
    let model = new_model(small_arch(), false, 2);
    let x = inputs(40, 6);
    let labels: Vec<u32> = (0..40).map(|i| i % 4).collect();
    let mut m = NoisecalMetrics::default();
    let status =
        unsafe { noisecal_model_evaluate(model, x.as_ptr(), labels.as_ptr(), 40, 10, &mut m) };
    assert_eq!(status, NoisecalStatus::Ok, "{}", last_error());
    assert!((m.gap - (m.mean_confidence - m.accuracy)).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&m.ece) && m.loss > 0.0);

    // the same numbers from the raw-array metric entry points
    let probs = predict(model, &x, 40, 4);
    let (mut conf, mut correct, mut predicted) = (vec![], vec![], vec![]);
    for (row, &label) in probs.chunks(4).zip(&labels) {
        let mut best = 0;
        for j in 1..4 {
            if row[j] > row[best] {
                best = j;
            }
        }
        conf.push(row[best]);
        correct.push(u8::from(best as u32 == label));
        predicted.push(best as u32);
    }
    let mut e = 0.0;
    let mut bias = 0.0;
    unsafe {
        assert_eq!(
            noisecal_ece(conf.as_ptr(), correct.as_ptr(), 40, 10, &mut e),
            NoisecalStatus::Ok
        );
        assert_eq!(
            noisecal_class_bias(predicted.as_ptr(), 40, 4, &mut bias),
            NoisecalStatus::Ok
        );
    }
    assert!((e - m.ece).abs() < 1e-12);
    assert!((bias - m.class_bias).abs() < 1e-12);

    let bad: Vec<u32> = vec![4; 40];
    let status =
        unsafe { noisecal_model_evaluate(model, x.as_ptr(), bad.as_ptr(), 40, 10, &mut m) };
    assert_eq!(status, NoisecalStatus::InvalidArgument);
    unsafe { noisecal_model_free(model) };
}

#[test]
fn metric_functions_match_hand_values() {
    let mut v = 0.0;
    unsafe {
        // one bin holding confidence 0.9 at accuracy 0.5
        noisecal_ece([0.9, 0.9].as_ptr(), [1, 0].as_ptr(), 2, 10, &mut v);
        assert!((v - 0.4).abs() < 1e-12);
        // shares (1, 0): deviation 0.5 from the mean share
        noisecal_class_bias([0, 0, 0, 0].as_ptr(), 4, 2, &mut v);
        assert!((v - 0.5).abs() < 1e-15);
        noisecal_class_bias([0, 1, 0, 1].as_ptr(), 4, 2, &mut v);
        assert_eq!(v, 0.0);
        assert_eq!(
            noisecal_class_bias([0, 2].as_ptr(), 2, 2, &mut v),
            NoisecalStatus::InvalidArgument
        );
        // 3 of 4 pairs ordered
        noisecal_auroc([0.9, 0.8].as_ptr(), 2, [0.1, 0.85].as_ptr(), 2, &mut v);
        assert!((v - 0.75).abs() < 1e-15);
        assert_eq!(
            noisecal_ece([1.5].as_ptr(), [1].as_ptr(), 1, 10, &mut v),
            NoisecalStatus::InvalidArgument
        );
    }
}

#[test]
fn rank_tests_match_hand_values() {
    let mut r = NoisecalTestResult::default();
    unsafe {
        // complete separation: 2 of C(6,3) = 20 labelings are as extreme
        let s = noisecal_rank_sum_test(
            [1.0, 2.0, 3.0].as_ptr(),
            3,
            [4.0, 5.0, 6.0].as_ptr(),
            3,
            true,
            &mut r,
        );
        assert_eq!(s, NoisecalStatus::Ok);
        assert_eq!((r.statistic, r.exact), (0.0, true));
        assert!((r.p_value - 0.1).abs() < 1e-15);
        // all positive: 1 of 2^3 sign patterns
        noisecal_signed_rank_test([1.0, 2.0, 3.0].as_ptr(), 3, false, &mut r);
        assert_eq!(r.statistic, 6.0);
        assert!((r.p_value - 0.125).abs() < 1e-15);
        let s = noisecal_signed_rank_test([0.0, 0.0].as_ptr(), 2, true, &mut r);
        assert_eq!(s, NoisecalStatus::InvalidArgument);
        let s = noisecal_rank_sum_test(ptr::null(), 0, [1.0].as_ptr(), 1, true, &mut r);
        assert_eq!(s, NoisecalStatus::InvalidArgument);
    }
}
