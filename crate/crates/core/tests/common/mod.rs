//! Independent reference implementations shared by the oracle tests and the
//! acceptance suite. None of these call the code they check.

#![allow(dead_code)]

use noisecal::metrics::{ece, reliability, roc_auroc, Prediction};
use noisecal::nn::{build_model, ArchSpec, Gradients, InitSpec, LayerGradients, Mode, OutputKind};
use noisecal::optim::{adam_step, OptimConfig, OptimState};
use noisecal::stats::{rank_sum_exact, signed_rank_exact};
use noisecal::tensor::{gaussian_tensor, one_hot, uniform_labels};
use noisecal::{RngStream, Tensor};

/// Bin by linear scan: the first `b` with `c ≤ (b+1)/M`, zero in bin 0.
pub fn oracle_bin(c: f64, m: usize) -> usize {
    (0..m)
        .find(|&b| c <= (b + 1) as f64 / m as f64)
        .unwrap_or(m - 1)
}

/// Brute-force ECE: one pass over the predictions per bin.
pub fn ece_oracle(preds: &[(f64, bool)], m: usize) -> f64 {
    let n = preds.len() as f64;
    let mut total = 0.0;
    for b in 0..m {
        let members: Vec<&(f64, bool)> = preds.iter().filter(|p| oracle_bin(p.0, m) == b).collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let conf = members.iter().map(|p| p.0).sum::<f64>() / k;
        let acc = members.iter().filter(|p| p.1).count() as f64 / k;
        total += (k / n) * (acc - conf).abs();
    }
    total
}

pub fn as_predictions(preds: &[(f64, bool)]) -> Vec<Prediction> {
    preds
        .iter()
        .map(|&(c, ok)| Prediction {
            predicted_label: 0,
            confidence: c,
            true_label: Some(usize::from(!ok)),
        })
        .collect()
}

/// Random prediction set mixing dyadic confidences, exact bin edges and 1.0.
pub fn random_prediction_set(rng: &mut RngStream, m: usize) -> Vec<(f64, bool)> {
    let n = 1 + rng.below(300) as usize;
    (0..n)
        .map(|_| {
            let c = match rng.below(4) {
                0 => rng.below(m as u64 + 1) as f64 / m as f64,
                1 => 1.0,
                _ => rng.below(1 << 20) as f64 / (1u64 << 20) as f64,
            };
            (c, rng.uniform() < c)
        })
        .collect()
}

/// ECE on `sets` random prediction sets must equal the oracle bit for bit.
pub fn check_ece(sets: usize, seed: u64) -> Result<String, String> {
    let mut rng = RngStream::new(seed).child("ece-oracle");
    for i in 0..sets {
        let m = 1 + rng.below(20) as usize;
        let set = random_prediction_set(&mut rng, m);
        let got = ece(&reliability(&as_predictions(&set), m).map_err(|e| e.to_string())?);
        let want = ece_oracle(&set, m);
        if got != want {
            return Err(format!("set {i} (M={m}): ece {got:e} != oracle {want:e}"));
        }
    }
    Ok(format!("{sets} sets equal exactly"))
}

/// `P(id > ood) + ½·P(id = ood)` over all pairs.
pub fn auroc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// Scores quantized to a coarse grid so that ties are common.
pub fn random_scores(rng: &mut RngStream, n: usize, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|_| ((rng.uniform() + shift) * 16.0).floor() / 16.0)
        .collect()
}

pub fn check_auroc(sets: usize, seed: u64) -> Result<String, String> {
    let mut rng = RngStream::new(seed).child("auroc-oracle");
    let mut worst = 0.0f64;
    for i in 0..sets {
        let n_id = 1 + rng.below(200) as usize;
        let n_ood = 1 + rng.below(200) as usize;
        let shift = rng.uniform() * 0.5;
        let id = random_scores(&mut rng, n_id, shift);
        let ood = random_scores(&mut rng, n_ood, 0.0);
        let roc = roc_auroc(&id, &ood).map_err(|e| e.to_string())?;
        let want = auroc_pairwise(&id, &ood);
        let err = (roc.auroc - want)
            .abs()
            .max((roc.trapezoid_area() - want).abs());
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!(
                "set {i}: auroc {} trapezoid {} pairwise {want}",
                roc.auroc,
                roc.trapezoid_area()
            ));
        }
    }
    Ok(format!("{sets} sets, max |err| {worst:.1e}"))
}

fn pooled_midranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let below = values.iter().filter(|&&w| w < v).count() as f64;
            let equal = values.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Rank-sum p-value by enumerating every subset of the pooled sample that
/// could have been `a`.
pub fn rank_sum_enumerated(a: &[f64], b: &[f64], two_sided: bool) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = pooled_midranks(&pooled);
    let n = pooled.len();
    let na = a.len();
    // doubled U keeps everything integral
    let u2 = |mask: u32| -> i64 {
        let s: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        (2.0 * s).round() as i64 - (na * (na + 1)) as i64
    };
    let obs = u2((1u32 << na) - 1);
    let mean2 = (na * b.len()) as i64;
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        total += 1;
        let u = u2(mask);
        let extreme = if two_sided {
            (u - mean2).abs() >= (obs - mean2).abs()
        } else {
            u >= obs
        };
        hits += u64::from(extreme);
    }
    hits as f64 / total as f64
}

/// Signed-rank p-value by enumerating every sign assignment.
pub fn signed_rank_enumerated(diffs: &[f64], two_sided: bool) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = pooled_midranks(&abs);
    let n = nz.len();
    let w2 = |mask: u32| -> i64 {
        let s: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        (2.0 * s).round() as i64
    };
    let obs_mask = (0..n)
        .filter(|&i| nz[i] > 0.0)
        .fold(0u32, |m, i| m | 1 << i);
    let obs = w2(obs_mask);
    let mean2 = (n * (n + 1) / 2) as i64;
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        let w = w2(mask);
        let extreme = if two_sided {
            (w - mean2).abs() >= (obs - mean2).abs()
        } else {
            w >= obs
        };
        hits += u64::from(extreme);
    }
    hits as f64 / (1u64 << n) as f64
}

fn tied_sample(rng: &mut RngStream, n: usize) -> Vec<f64> {
    // values on a grid of 5 so that small samples still tie
    (0..n).map(|_| rng.below(5) as f64 - 2.0).collect()
}

/// Every `(n_a, n_b)` with `n_a + n_b ≤ max_n`, several samples each, both
/// alternatives; plus every signed-rank `n ≤ max_n`.
pub fn check_rank_tests(max_n: usize, reps: usize, seed: u64) -> Result<String, String> {
    let mut rng = RngStream::new(seed).child("rank-oracle");
    let mut cases = 0;
    for n in 2..=max_n {
        for na in 1..n {
            for _ in 0..reps {
                let a = tied_sample(&mut rng, na);
                let b = tied_sample(&mut rng, n - na);
                for two_sided in [true, false] {
                    let got = rank_sum_exact(&a, &b, two_sided)
                        .map_err(|e| e.to_string())?
                        .p_value;
                    let want = rank_sum_enumerated(&a, &b, two_sided);
                    if got != want {
                        return Err(format!(
                            "rank-sum {a:?} vs {b:?} two_sided={two_sided}: {got} != {want}"
                        ));
                    }
                    cases += 1;
                }
            }
        }
    }
    for n in 1..=max_n {
        for _ in 0..reps {
            let mut d = tied_sample(&mut rng, n);
            if d.iter().all(|&x| x == 0.0) {
                d[0] = 1.0;
            }
            for two_sided in [true, false] {
                let got = signed_rank_exact(&d, two_sided)
                    .map_err(|e| e.to_string())?
                    .p_value;
                let want = signed_rank_enumerated(&d, two_sided);
                if got != want {
                    return Err(format!(
                        "signed-rank {d:?} two_sided={two_sided}: {got} != {want}"
                    ));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases equal exactly"))
}

/// Scalar Adam written out longhand.
pub struct ScalarAdam {
    pub theta: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(theta: f64) -> Self {
        Self {
            theta,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, grad: f64, decay: bool, cfg: &OptimConfig) {
        self.t += 1;
        let g = if decay {
            grad + cfg.weight_decay * self.theta
        } else {
            grad
        };
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * g;
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * g * g;
        let m_hat = self.m / (1.0 - cfg.beta1.powf(self.t as f64));
        let v_hat = self.v / (1.0 - cfg.beta2.powf(self.t as f64));
        self.theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

fn synthetic_grad(theta: f64, index: usize, step: usize) -> f64 {
    2.0 * (theta - 0.1 * index as f64) + (0.7 * step as f64 + index as f64).sin()
}

/// Runs `steps` optimizer steps on a depth-2 model with parameter-dependent
/// synthetic gradients and compares every parameter with the scalar reference.
pub fn check_adam(steps: usize) -> Result<String, String> {
    let arch = ArchSpec {
        input_dim: 3,
        hidden_width: 4,
        depth: 2,
        num_classes: 3,
        output: OutputKind::Softmax,
    };
    let mut model = build_model(arch, InitSpec::default(), false, &mut RngStream::new(11))
        .map_err(|e| e.to_string())?;
    let cfg = OptimConfig {
        learning_rate: 1e-2,
        weight_decay: 0.01,
        ..OptimConfig::default()
    };
    let decay: Vec<bool> = model
        .param_specs()
        .iter()
        .flat_map(|p| std::iter::repeat(p.decay).take(p.len))
        .collect();
    let mut reference: Vec<ScalarAdam> = model
        .flat_params()
        .into_iter()
        .map(ScalarAdam::new)
        .collect();
    let mut state = OptimState::new();
    for step in 0..steps {
        let flat = model.flat_params();
        let g: Vec<f64> = flat
            .iter()
            .enumerate()
            .map(|(i, &th)| synthetic_grad(th, i, step))
            .collect();
        let grads = gradients_like(&model, &g);
        adam_step(&mut model, &grads, &mut state, &cfg).map_err(|e| e.to_string())?;
        for (i, r) in reference.iter_mut().enumerate() {
            r.step(synthetic_grad(r.theta, i, step), decay[i], &cfg);
        }
    }
    let worst = model
        .flat_params()
        .iter()
        .zip(&reference)
        .map(|(a, r)| (a - r.theta).abs())
        .fold(0.0, f64::max);
    if worst <= 1e-12 {
        Ok(format!("{steps} steps, max |err| {worst:.1e}"))
    } else {
        Err(format!("{steps} steps, max |err| {worst:e}"))
    }
}

/// Packs a flat gradient vector into the model's gradient layout.
pub fn gradients_like(model: &noisecal::nn::Model, flat: &[f64]) -> Gradients {
    let mut at = 0;
    let mut take = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), flat[at..at + n].to_vec()).unwrap();
        at += n;
        t
    };
    let blocks = model
        .blocks
        .iter()
        .map(|b| LayerGradients {
            weight: take(b.linear.weight.shape()),
            bias: take(b.linear.bias.shape()),
            gamma: take(b.gamma.shape()),
            beta: take(b.beta.shape()),
        })
        .collect();
    Gradients {
        blocks,
        head_weight: take(model.head.weight.shape()),
        head_bias: take(model.head.bias.shape()),
    }
}

/// `|a − n| / max(|a|, |n|)`, compared absolutely below `1e-6`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error per parameter class (`weight`, `bias`, `gamma`,
/// `beta`, `head.weight`, `head.bias`) between backprop and central
/// differences on a depth-2 model with the given readout.
pub fn gradient_check(output: OutputKind, seed: u64) -> Vec<(String, f64)> {
    let arch = ArchSpec {
        input_dim: 3,
        hidden_width: 5,
        depth: 2,
        num_classes: 4,
        output,
    };
    let mut rng = RngStream::new(seed).child("grad-check");
    let mut model = build_model(arch, InitSpec::default(), false, &mut rng.child("init")).unwrap();
    // move γ, β and the biases off their initial values
    for p in model.params_mut() {
        if !p.name.ends_with("weight") {
            for v in p.values.iter_mut() {
                *v += 0.3 * rng.standard_normal();
            }
        }
    }
    let x = gaussian_tensor(&[6, 3], 0.0, 1.0, &mut rng).unwrap();
    let y = uniform_labels(6, 4, &mut rng).unwrap();
    let targets = one_hot(&y, 4).unwrap();
    let trace = model.forward_frozen(&x, Mode::Train).unwrap();
    let analytic = model.backprop(&trace, &targets).unwrap().flat();
    let loss = |m: &noisecal::nn::Model| {
        let t = m.forward_frozen(&x, Mode::Train).unwrap();
        m.loss(&t, &targets).unwrap()
    };
    let h = 1e-5;
    let specs = model.param_specs();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut flat_index = 0;
    for (pi, spec) in specs.iter().enumerate() {
        let class = if spec.name.starts_with("head") {
            spec.name.clone()
        } else {
            spec.name.rsplit('.').next().unwrap().to_string()
        };
        for j in 0..spec.len {
            let orig = model.params_mut()[pi].values[j];
            model.params_mut()[pi].values[j] = orig + h;
            let up = loss(&model);
            model.params_mut()[pi].values[j] = orig - h;
            let down = loss(&model);
            model.params_mut()[pi].values[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[flat_index], numeric);
            match worst.iter_mut().find(|(c, _)| *c == class) {
                Some((_, w)) => *w = w.max(err),
                None => worst.push((class.clone(), err)),
            }
            flat_index += 1;
        }
    }
    worst
}

pub fn check_gradients() -> Result<String, String> {
    let mut parts = Vec::new();
    for output in [OutputKind::Softmax, OutputKind::Sigmoid] {
        let worst = gradient_check(output, 5);
        let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
        if worst.len() != 6 || max >= 1e-4 {
            return Err(format!("{output:?}: {worst:?}"));
        }
        parts.push(format!("{output:?} max rel err {max:.1e}"));
    }
    Ok(parts.join(", "))
}

/// Labelled images whose class shows up as a coarse brightness pattern
/// under uniform pixel noise. Cheap to generate and learnable.
pub fn synthetic_images(
    name: &str,
    n: usize,
    dims: (usize, usize, usize),
    seed: u64,
) -> noisecal::data::Dataset {
    let d = dims.0 * dims.1 * dims.2;
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i * 7 + seed as usize) % 10;
        labels.push(label as u16);
        for j in 0..d {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let bright = (j * 10 / d + label) % 10 < 3;
            let base = if bright { 170 } else { 90 };
            images.push((base + (state % 64) as i64 - 32) as u8);
        }
    }
    noisecal::data::Dataset::new(name, images, labels, 10, dims).unwrap()
}

/// Writes a full-size CIFAR-10 binary directory (five training batches and
/// one test batch) of synthetic images.
pub fn write_synthetic_cifar(dir: &std::path::Path) {
    use noisecal::data::{
        write_cifar_batch, CIFAR_BATCH_RECORDS, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES,
    };
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in CIFAR_TRAIN_FILES
        .iter()
        .chain([&CIFAR_TEST_FILE])
        .enumerate()
    {
        let ds = synthetic_images("synthetic", CIFAR_BATCH_RECORDS, (3, 32, 32), i as u64 + 1);
        write_cifar_batch(&ds, &dir.join(f)).unwrap();
    }
}
