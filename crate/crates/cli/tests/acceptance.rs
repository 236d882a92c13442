//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p meaflow-cli --test acceptance`, optionally followed by
//! `-- <criterion numbers>`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use meaflow::dataset::{
    materialize_fold, stratified_kfold, ClassLabel, Dpi, FeatureTable, N_CHANNELS, N_CLASSES,
};
use meaflow::eval::{
    binary_metrics, exact_metrics, metrics_from_cm, BinaryCounts, ConfusionMatrix,
};
use meaflow::gbt::{find_best_split, fit_gbt, leaf_weight, GbtConfig, SplitParams};
use meaflow::nn::{build_cnn, gradient_check, train_cnn, Activation, CnnConfig, CnnModel};
use meaflow::par::{self, Exec};
use meaflow::preprocess::{
    apply_scaler, fit_pca, fit_pipeline, fit_robust_scaler, PreprocessConfig,
};
use meaflow::signal::{
    design_highpass_butterworth, detect_spikes, DetectorConfig, Polarity, SpikeEvent,
};
use meaflow::synth::{synth_feature_table, SynthTableConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn table(width: usize, x: Vec<f64>, y: &[usize]) -> FeatureTable {
    let labels = y
        .iter()
        .map(|&c| ClassLabel::from_index(c).unwrap())
        .collect();
    FeatureTable::with_prefix("f", width, x, labels, Dpi::new(0).unwrap()).unwrap()
}

fn synth(rows_per_class: usize, seed: u64) -> FeatureTable {
    let cfg = SynthTableConfig {
        rows_per_class,
        seed,
        ..SynthTableConfig::default()
    };
    synth_feature_table(&cfg, Dpi::new(1).unwrap()).unwrap()
}

// ---------------------------------------------------------------- filter

/// `|H|` of the prewarped bilinear image of `s² / (s² + √2 Ωc s + Ωc²)`.
fn analytic_highpass(f: f64, fc: f64, fs: f64) -> f64 {
    let w = (std::f64::consts::PI * f / fs).tan();
    let wc = (std::f64::consts::PI * fc / fs).tan();
    w * w / (w.powi(4) + wc.powi(4)).sqrt()
}

fn filter() -> Check {
    let fs = 10_000.0;
    let c = design_highpass_butterworth(2, 200.0, fs).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let f = 10.0 * (4990.0f64 / 10.0).powf(i as f64 / 19.0);
        let want = analytic_highpass(f, 200.0, fs);
        worst = worst.max((c.magnitude(f, fs) - want).abs() / want);
    }
    ensure!(worst <= 1e-9, "worst relative probe error {worst:e}");
    let cut = (c.magnitude(200.0, fs) - 0.5f64.sqrt()).abs();
    ensure!(cut < 1e-6, "|H(200)| off by {cut:e}");
    let dc = c.magnitude(0.0, fs);
    ensure!(dc < 1e-9, "DC gain {dc:e}");
    Ok(format!(
        "worst probe error {worst:.1e}, |H(200)| error {cut:.1e}, DC {dc:.1e}"
    ))
}

// -------------------------------------------------------------- detector

/// Recomputes the trailing-window σ from scratch at every sample.
fn detect_oracle(trace: &[f64], fs: f64, cfg: &DetectorConfig) -> Vec<SpikeEvent> {
    let n = trace.len();
    let w = (cfg.window_ms * fs / 1000.0).round() as usize;
    let refractory = (cfg.refractory_ms * fs / 1000.0).round() as usize;
    let sigma_of = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
    };
    let mag = |v: f64| match cfg.polarity {
        Polarity::Both => v.abs(),
        Polarity::Negative => (-v).max(0.0),
    };
    let mut out: Vec<SpikeEvent> = Vec::new();
    for t in 0..n {
        let thr = match cfg.fixed_threshold_uv {
            Some(uv) => uv,
            None if w > n => cfg.k_sigma * sigma_of(trace),
            None => {
                let start = (t + 1).saturating_sub(w);
                cfg.k_sigma * sigma_of(&trace[start..start + w])
            }
        };
        let a = mag(trace[t]);
        let peak = (t == 0 || a >= mag(trace[t - 1])) && (t + 1 == n || a > mag(trace[t + 1]));
        if !(a > 0.0 && peak && a > thr) {
            continue;
        }
        let ev = SpikeEvent {
            sample_index: t,
            amplitude_uv: trace[t],
        };
        match out.last_mut() {
            Some(last) if t - last.sample_index < refractory => {
                if a > mag(last.amplitude_uv) {
                    *last = ev;
                }
            }
            _ => out.push(ev),
        }
    }
    out
}

fn detector() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);
    let mut events = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=10_000usize);
        let fs = [1_000.0, 2_000.0, 10_000.0][case % 3];
        let sd = rng.random_range(0.5..5.0);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut trace: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
        for _ in 0..rng.random_range(0..20) {
            let at = rng.random_range(0..n);
            trace[at] += rng.random_range(-15.0..15.0) * sd;
        }
        let cfg = DetectorConfig {
            k_sigma: rng.random_range(2.0..8.0),
            window_ms: rng.random_range(2.0..60.0) * 1000.0 / fs,
            refractory_ms: rng.random_range(0.0..10.0) * 1000.0 / fs,
            polarity: if case % 4 == 0 {
                Polarity::Negative
            } else {
                Polarity::Both
            },
            fixed_threshold_uv: (case % 10 == 0).then_some(4.0 * sd),
        };
        let got = detect_spikes(&trace, fs, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(
            got.events == detect_oracle(&trace, fs, &cfg),
            "case {case}: event sets differ"
        );
        events += got.events.len();
    }

    let noise = Normal::new(0.0, 2.75).unwrap();
    let mut trace: Vec<f64> = (0..20_000).map(|_| noise.sample(&mut rng)).collect();
    trace[12_345] = -30.0;
    let got =
        detect_spikes(&trace, 10_000.0, &DetectorConfig::default()).map_err(|e| e.to_string())?;
    let at: Vec<usize> = got.events.iter().map(|e| e.sample_index).collect();
    ensure!(at == [12_345], "30 µV excursion: events at {at:?}");
    Ok(format!(
        "1000 traces agree ({events} events); 30 µV excursion found"
    ))
}

// --------------------------------------------------------- preprocessing

fn linear_quantile(col: &[f64], p: f64) -> f64 {
    let mut v = col.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn preprocessing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CA1E);
    let mut worst_scale: f64 = 0.0;
    for _ in 0..20 {
        let (n, w) = (rng.random_range(5..400), rng.random_range(1..12));
        // Offsets stay within a few spreads of zero: the subtraction loses
        // about |offset| / IQR ulps, which alone can exceed 1e-12.
        let scales: Vec<f64> = (0..w)
            .map(|_| 10f64.powf(rng.random_range(-3.0..3.0)))
            .collect();
        let offsets: Vec<f64> = scales
            .iter()
            .map(|s| s * rng.random_range(-20.0..20.0))
            .collect();
        let x = (0..n * w)
            .map(|i| offsets[i % w] + scales[i % w] * rng.random_range(-1.0..1.0))
            .collect();
        let t = table(w, x, &(0..n).map(|i| i % 3).collect::<Vec<_>>());
        let p = fit_robust_scaler(&t).map_err(|e| e.to_string())?;
        let s = apply_scaler(&p, &t).map_err(|e| e.to_string())?;
        for j in (0..w).filter(|&j| !p.degenerate[j]) {
            let col = s.column(j);
            let med = linear_quantile(&col, 0.5).abs();
            let iqr = (linear_quantile(&col, 0.75) - linear_quantile(&col, 0.25) - 1.0).abs();
            worst_scale = worst_scale.max(med).max(iqr);
        }
    }
    ensure!(
        worst_scale <= 1e-12,
        "scaled median/IQR off by {worst_scale:e}"
    );

    let (n, w) = (500, 61);
    let mix: Vec<f64> = (0..w * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = vec![0.0; n * w];
    for r in 0..n {
        let z: Vec<f64> = (0..w).map(|_| rng.random_range(-1.0..1.0)).collect();
        for j in 0..w {
            x[r * w + j] = (0..w).map(|k| z[k] * mix[k * w + j]).sum::<f64>() + j as f64;
        }
    }
    let t = table(w, x, &(0..n).map(|i| i % 3).collect::<Vec<_>>());
    let pca = fit_pca(&t, w).map_err(|e| e.to_string())?;
    let mut ortho: f64 = 0.0;
    for a in 0..w {
        for b in 0..w {
            let dot: f64 = pca
                .component(a)
                .iter()
                .zip(pca.component(b))
                .map(|(u, v)| u * v)
                .sum();
            ortho = ortho.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure!(ortho <= 1e-8, "components not orthonormal: {ortho:e}");
    let mut recon: f64 = 0.0;
    for row in t.rows() {
        let scores: Vec<f64> = (0..w)
            .map(|c| {
                row.iter()
                    .zip(&pca.means)
                    .zip(pca.component(c))
                    .map(|((x, m), v)| (x - m) * v)
                    .sum()
            })
            .collect();
        for (a, b) in pca.reconstruct(&scores).iter().zip(row) {
            recon = recon.max((a - b).abs());
        }
    }
    ensure!(recon <= 1e-8, "full-rank reconstruction error {recon:e}");

    let fp =
        fit_pipeline(&synth(1000, 3), &PreprocessConfig::default()).map_err(|e| e.to_string())?;
    let time = fp.importance.importances[N_CHANNELS];
    ensure!(
        time < fp.tau && fp.tau == 0.5,
        "time importance {time} against tau {}",
        fp.tau
    );
    Ok(format!(
        "scaling {worst_scale:.1e}, orthonormality {ortho:.1e}, reconstruction {recon:.1e}, time importance {time:.3}"
    ))
}

// ------------------------------------------------------------------- cnn

fn cnn() -> Check {
    let small = CnnConfig {
        input_length: 9,
        conv_filters: vec![3, 4],
        kernel_size: 3,
        stride: 2,
        dense_widths: vec![5],
        batch_size: 8,
        ..CnnConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let x: Vec<f64> = (0..8 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let mut grad_err: f64 = 0.0;
    for activation in [Activation::Relu, Activation::Identity] {
        let cfg = CnnConfig {
            activation,
            ..small.clone()
        };
        let mut model: CnnModel<f64> = build_cnn(&cfg, 21).map_err(|e| e.to_string())?;
        // Zero-initialized biases can leave a pre-activation exactly on the
        // ReLU kink, where a central difference is meaningless.
        let names = model.param_names();
        for (name, p) in names.iter().zip(model.params_mut()) {
            if name.ends_with("bias") {
                p.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        let report = gradient_check(&model, &x, &y, 1e-5).map_err(|e| e.to_string())?;
        ensure!(
            report.per_tensor.iter().any(|(n, _)| n.contains("conv"))
                && report.per_tensor.iter().any(|(n, _)| n.contains("dense")),
            "gradient check did not cover both layer types"
        );
        grad_err = grad_err.max(report.max_rel_error);
    }
    ensure!(
        grad_err < 1e-4,
        "gradient check relative error {grad_err:e}"
    );

    let full: CnnModel<f32> = build_cnn(&CnnConfig::default(), 1).map_err(|e| e.to_string())?;
    ensure!(
        full.conv_lengths() == [26, 13, 7],
        "conv lengths {:?}",
        full.conv_lengths()
    );
    let chain = full.shape_chain();
    ensure!(
        chain == [51, 26 * 64, 13 * 128, 1792, 256, 128, 64, 3],
        "shape chain {chain:?}"
    );

    let rows = 300;
    let xs: Vec<f32> = (0..rows * 51)
        .map(|_| rng.random_range(-50.0..50.0))
        .collect();
    let fwd = full.forward(&xs, rows).map_err(|e| e.to_string())?;
    let worst_sum = fwd
        .probs
        .chunks(3)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure!(worst_sum <= 1e-6, "softmax row sum off by {worst_sum:e}");

    let labels: Vec<usize> = (0..600).map(|i| i % 3).collect();
    let toy: Vec<f64> = labels
        .iter()
        .flat_map(|&c| (0..12).map(move |j| if j % 3 == c { 2.0 } else { 0.0 }))
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    let toy = table(12, toy, &labels);
    let train_cfg = CnnConfig {
        input_length: 12,
        epochs: 2,
        batch_size: 128,
        ..small
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut saved = Vec::new();
    for (i, mode) in [Exec::Parallel, Exec::Parallel, Exec::Serial]
        .into_iter()
        .enumerate()
    {
        par::set_mode(mode);
        let mut m: CnnModel<f32> = build_cnn(&train_cfg, 5).map_err(|e| e.to_string())?;
        let trained = train_cnn(&mut m, &toy, None, 5);
        par::set_mode(Exec::Parallel);
        trained.map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("m{i}.json"));
        m.save(&path).map_err(|e| e.to_string())?;
        saved.push(fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure!(
        saved[0] == saved[1] && saved[1] == saved[2],
        "fixed-seed training is not byte-exact"
    );
    Ok(format!(
        "grad check {grad_err:.1e}, softmax {worst_sum:.1e}, chain {chain:?}"
    ))
}

// --------------------------------------------------------------- booster

/// Every (feature, boundary between distinct values) pair, with sums taken
/// directly over the rows on each side.
fn brute_force_split(
    x: &[f64],
    width: usize,
    g: &[f64],
    h: &[f64],
    p: SplitParams,
) -> Option<(usize, f64, f64, Vec<bool>)> {
    let n = g.len();
    let (gt, ht): (f64, f64) = (g.iter().sum(), h.iter().sum());
    let mut best: Option<(usize, f64, f64, Vec<bool>)> = None;
    for f in 0..width {
        let mut vals: Vec<f64> = (0..n).map(|i| x[i * width + f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let left: Vec<bool> = (0..n).map(|i| x[i * width + f] < t).collect();
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in (0..n).filter(|&i| left[i]) {
                gl += g[i];
                hl += h[i];
            }
            let (gr, hr) = (gt - gl, ht - hl);
            if hl < p.min_child_weight || hr < p.min_child_weight {
                continue;
            }
            let gain = 0.5
                * (gl * gl / (hl + p.lambda) + gr * gr / (hr + p.lambda)
                    - gt * gt / (ht + p.lambda))
                - p.gamma;
            if best.as_ref().is_none_or(|b| gain > b.2 + 1e-12) {
                best = Some((f, t, gain, left));
            }
        }
    }
    best.filter(|b| b.2 > 0.0)
}

fn booster() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(0xB005);
    let mut splits = 0;
    for case in 0..200 {
        let n = r.random_range(2..=64);
        let width = r.random_range(1..=8);
        let discrete = r.random_bool(0.5);
        let x: Vec<f64> = (0..n * width)
            .map(|_| {
                if discrete {
                    r.random_range(0..5) as f64
                } else {
                    r.random_range(-3.0..3.0)
                }
            })
            .collect();
        let g: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.25)).collect();
        let p = SplitParams {
            lambda: r.random_range(0.0..2.0),
            gamma: if r.random_bool(0.5) {
                0.0
            } else {
                r.random_range(0.0..0.3)
            },
            min_child_weight: if r.random_bool(0.5) {
                0.0
            } else {
                r.random_range(0.0..1.0)
            },
        };
        let rows: Vec<usize> = (0..n).collect();
        match (
            find_best_split(&x, width, &rows, &g, &h, p),
            brute_force_split(&x, width, &g, &h, p),
        ) {
            (None, None) => {}
            (Some(s), Some((f, t, gain, left))) => {
                let got_left: Vec<bool> = (0..n)
                    .map(|i| x[i * width + s.feature] < s.threshold)
                    .collect();
                ensure!(
                    s.feature == f && got_left == left,
                    "case {case}: different split"
                );
                ensure!(
                    (s.threshold - t).abs() < 1e-12,
                    "case {case}: threshold {} vs {t}",
                    s.threshold
                );
                ensure!(
                    (s.gain - gain).abs() <= 1e-10,
                    "case {case}: gain {} vs {gain}",
                    s.gain
                );
                splits += 1;
            }
            (a, b) => {
                return Err(format!(
                    "case {case}: {a:?} vs {:?}",
                    b.map(|b| (b.0, b.1, b.2))
                ))
            }
        }
    }

    for _ in 0..1000 {
        let (g, h, lambda) = (
            r.random_range(-50.0..50.0),
            r.random_range(0.0..20.0),
            r.random_range(0.01..10.0),
        );
        let w = leaf_weight(g, h, lambda).map_err(|e| e.to_string())?;
        let want = -g / (h + lambda);
        ensure!(
            (w - want).abs() <= 1e-15 * want.abs().max(1.0),
            "leaf weight {w} vs {want}"
        );
    }

    let n = 150;
    let x: Vec<f64> = (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<usize> = (0..n)
        .map(|i| {
            if x[i * 3] + 0.5 * x[i * 3 + 1] > 0.2 {
                0
            } else if x[i * 3 + 2] > 0.0 {
                1
            } else {
                2
            }
        })
        .collect();
    let toy = table(3, x, &y);
    let ens = fit_gbt(
        &toy,
        &GbtConfig {
            n_rounds: 40,
            learning_rate: 0.3,
            ..GbtConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let losses = &ens.train_logloss;
    ensure!(
        losses.windows(2).all(|w| w[1] <= w[0] + 1e-9),
        "training log-loss increased: {losses:?}"
    );
    Ok(format!(
        "{splits}/200 splitting cases identical, log-loss {:.4} -> {:.4}",
        losses[0],
        losses[losses.len() - 1]
    ))
}

// --------------------------------------------------------------- metrics

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3E7);
    for case in 0..100 {
        let mut cm = ConfusionMatrix::default();
        for t in 0..N_CLASSES {
            for p in 0..N_CLASSES {
                cm.counts[t][p] = rng.random_range(0..200);
            }
        }
        cm.counts[case % 3][case % 3] += 1;
        let e = exact_metrics(&cm).map_err(|e| e.to_string())?;
        ensure!(
            e.weighted[1] == e.accuracy,
            "case {case}: weighted recall {} vs accuracy {}",
            e.weighted[1],
            e.accuracy
        );
        ensure!(
            e.micro == [e.accuracy; 3],
            "case {case}: micro scores {:?}",
            e.micro
        );
        let r = metrics_from_cm(&cm).map_err(|e| e.to_string())?;
        let direct = cm.correct() as f64 / cm.total() as f64;
        ensure!(
            r.weighted.recall == r.accuracy && r.accuracy == direct,
            "case {case}: float accuracy differs"
        );
        ensure!(
            [r.micro.precision, r.micro.recall, r.micro.f1] == [r.accuracy; 3],
            "case {case}: float micro scores differ"
        );
    }
    let [acc, ..] = binary_metrics(BinaryCounts {
        tp: 5,
        tn: 3,
        fp: 1,
        fn_: 1,
    });
    ensure!(
        *acc.numer() == 4 && *acc.denom() == 5,
        "hand case accuracy {acc}"
    );
    Ok("100 matrices exact, hand case accuracy 4/5".into())
}

// ----------------------------------------------------------------- folds

fn folds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    for case in 0..50 {
        let n = 10 * rng.random_range(3..300);
        let y: Vec<usize> = if case % 2 == 0 {
            (0..n).map(|i| i % 3).collect()
        } else {
            (0..n).map(|_| rng.random_range(0..3)).collect()
        };
        let t = table(1, (0..n).map(|i| i as f64).collect(), &y);
        let plan = stratified_kfold(&t, 10, case as u64).map_err(|e| e.to_string())?;
        let mut seen = vec![0u32; n];
        for f in 0..10 {
            for r in plan.fold_rows(f) {
                seen[r] += 1;
            }
        }
        ensure!(
            seen.iter().all(|&s| s == 1),
            "case {case}: folds do not partition the rows"
        );
        for c in 0..N_CLASSES {
            let per: Vec<usize> = (0..10)
                .map(|f| plan.fold_rows(f).iter().filter(|&&r| y[r] == c).count())
                .collect();
            let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
            ensure!(
                hi - lo <= 1,
                "case {case}: class {c} spread over folds as {per:?}"
            );
        }
        for i in 0..10 {
            let s = materialize_fold(&t, &plan, i).map_err(|e| e.to_string())?;
            let sizes = (s.train.n_rows(), s.val.n_rows(), s.test.n_rows());
            ensure!(
                sizes == (n * 8 / 10, n / 10, n / 10),
                "case {case} fold {i}: sizes {sizes:?} for n = {n}"
            );
        }
    }
    Ok("50 tables partitioned, stratified within one, 80/10/10".into())
}

// ------------------------------------------------------------------ runs

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["meaflow"];
    argv.extend_from_slice(args);
    match meaflow_cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`meaflow {}` exited with {code}", args.join(" "))),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fused = tmp.path().join("fused");
    cli(&[
        "pipeline",
        "--dpi",
        "0",
        "--rows",
        "10000",
        "--out-dir",
        s(&fused),
    ])?;
    let cv: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(fused.join("cv_dpi0.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        cv["n_rows"] == 30_000 && cv["k"] == 10,
        "unexpected run shape"
    );
    ensure!(cv["method"] == "fused", "method {}", cv["method"]);
    ensure!(
        cv["failures"].as_array().is_some_and(Vec::is_empty),
        "failed folds: {}",
        cv["failures"]
    );
    let acc = cv["mean"]["accuracy"].as_f64().ok_or("no mean accuracy")?;
    ensure!(acc >= 0.95, "mean fused accuracy {acc:.4}");
    let t6 = fs::read_to_string(fused.join("table6.csv")).map_err(|e| e.to_string())?;
    ensure!(
        t6.lines().count() == 3 && t6.lines().nth(2).is_some_and(|l| l.starts_with("average,")),
        "table6.csv:\n{t6}"
    );

    let grid = tmp.path().join("grid");
    cli(&[
        "pipeline",
        "--rows",
        "60",
        "--compare",
        "--out-dir",
        s(&grid),
    ])?;
    let t6 = fs::read_to_string(grid.join("table6.csv")).map_err(|e| e.to_string())?;
    ensure!(
        t6.lines().count() == 1 + 5 + 1,
        "table6.csv has {} lines",
        t6.lines().count()
    );
    let g = fs::read_to_string(grid.join("grid.csv")).map_err(|e| e.to_string())?;
    ensure!(
        g.lines().count() == 1 + 5 * 9,
        "grid.csv has {} lines",
        g.lines().count()
    );
    Ok(format!("fused 10-fold mean accuracy {acc:.4} on 30000 rows; per-dpi summary and 9-method grid written"))
}

/// Every file under `dir` except the manifest, as relative path and bytes.
fn outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn replay() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let cfg = root.join("config.toml");
    fs::write(
        &cfg,
        "[eval]\nk = 3\npr_thresholds = 10\nmethods = [\"fused\", \"cnn\", \"random_forest\", \"naive_bayes\"]\n\
         [nn]\nepochs = 2\nconv_filters = [4, 4, 4]\ndense_widths = [8, 8, 8]\n\
         [recording]\nn_channels = 3\nduration_s = 0.5\n",
    )
    .map_err(|e| e.to_string())?;
    let c = s(&cfg);
    let gen = root.join("synth");
    cli(&[
        "--config",
        c,
        "--deterministic",
        "synth",
        "--rows",
        "70",
        "--recordings",
        "--out-dir",
        s(&gen),
    ])?;
    let rec = gen.join("recording_denv2.csv");
    let table = gen.join("control-denv2-zikv_dpi3.csv");
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("synth", vec![]),
        ("filter", vec!["filter", "--input", s(&rec)]),
        ("detect", vec!["detect", "--input", s(&rec)]),
        (
            "preprocess",
            vec!["preprocess", "--input", s(&table), "--dpi", "3"],
        ),
        (
            "train",
            vec![
                "train",
                "--input",
                s(&table),
                "--dpi",
                "3",
                "--method",
                "fused",
            ],
        ),
        (
            "eval",
            vec!["eval", "--rows", "70", "--method", "random_forest"],
        ),
        ("compare", vec!["compare", "--rows", "70"]),
        (
            "pipeline",
            vec![
                "pipeline",
                "--dpi",
                "0",
                "--dpi",
                "7",
                "--rows",
                "70",
                "--compare",
            ],
        ),
    ];
    let mut files = 0;
    for (name, args) in &runs {
        let dir = if *name == "synth" {
            gen.clone()
        } else {
            let dir = root.join(name);
            let mut argv = vec!["--config", c, "--deterministic"];
            argv.extend(args);
            argv.extend(["--out-dir", s(&dir)]);
            cli(&argv)?;
            dir
        };
        let again = root.join(format!("{name}-replay"));
        cli(&["replay", s(&dir), "--out-dir", s(&again)])?;
        let (a, b) = (outputs(&dir), outputs(&again));
        ensure!(!a.is_empty(), "{name}: no outputs");
        for (x, y) in a.iter().zip(&b) {
            ensure!(x == y, "{name}: {} differs on replay", x.0.display());
        }
        ensure!(
            a.len() == b.len(),
            "{name}: {} files, replay wrote {}",
            a.len(),
            b.len()
        );
        files += a.len();
    }
    Ok(format!(
        "{} commands, {files} output files byte-identical on replay",
        runs.len()
    ))
}

// ------------------------------------------------------------------ main

fn main() {
    let criteria: [(&str, fn() -> Check, Option<Duration>); 9] = [
        ("filter design", filter, Some(Duration::from_secs(1))),
        ("spike detector", detector, Some(Duration::from_secs(30))),
        ("preprocessing", preprocessing, None),
        ("cnn math", cnn, Some(Duration::from_secs(60))),
        ("booster math", booster, Some(Duration::from_secs(60))),
        ("metrics", metrics, None),
        (
            "end-to-end benchmark",
            end_to_end,
            Some(Duration::from_secs(15 * 60)),
        ),
        ("cross-validation folds", folds, None),
        ("manifest replay", replay, None),
    ];
    // `cargo test --test acceptance -- 3 9` runs only the listed criteria.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let result = match (result, limit) {
            (Ok(d), Some(l)) if took > l => Err(format!(
                "{d}; took {:.1}s, limit {}s",
                took.as_secs_f64(),
                l.as_secs()
            )),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "{tag} criterion {} {name}: {detail} [{:.2}s]",
            i + 1,
            took.as_secs_f64()
        );
        failed += result.is_err() as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
