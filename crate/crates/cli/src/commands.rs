use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use meaflow::baselines::{
    fit_baseline, predict_baseline, BaselineMethod, BaselineModel, FitContext,
};
use meaflow::dataset::{
    load_feature_table, materialize_fold, save_feature_table, stratified_kfold, table_file_name,
    ClassLabel, Dpi, FeatureTable,
};
use meaflow::eval::{
    compare_methods, confusion_matrix, confusion_svg, cross_validate, metrics_from_cm,
    pr_curves_svg, to_canonical_json, write_comparison_grid, write_confusion_csv, write_pr_csv,
    ComparisonReport, CvReport, Table6,
};
use meaflow::preprocess::{apply_pipeline, fit_pipeline};
use meaflow::rng;
use meaflow::signal::{
    design_highpass_butterworth, detect_recording, filter_recording, load_recording,
    save_recording, save_spike_train, MultichannelRecording,
};
use meaflow::synth::{synth_feature_table, synth_recording};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Command, Stage};

type Res<T> = Result<T, CliError>;

/// Runs one command into `dir` and returns the input files it read.
pub(crate) fn execute(command: &Command, cfg: &RunConfig, dir: &Path) -> Res<Vec<PathBuf>> {
    let out = Out { dir, cfg };
    match command {
        Command::Synth(a) => synth(&out, a.recordings),
        Command::Filter(_) => filter(&out),
        Command::Detect(a) => detect(&out, a.prefiltered),
        Command::Preprocess(t) => preprocess(&out, t.dpi),
        Command::Train(m) => train(&out, m.table.dpi),
        Command::Eval(m) => eval(&out, m.table.dpi),
        Command::Compare(c) => compare(&out, c.table.dpi),
        Command::Pipeline(p) => pipeline(&out, p.compare),
        Command::Replay(_) => Err(CliError::Usage("a manifest cannot record a replay".into())),
    }
}

struct Out<'a> {
    dir: &'a Path,
    cfg: &'a RunConfig,
}

impl Out<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn text(&self, name: &str, text: &str) -> Res<()> {
        fs::write(self.path(name), text).stage("write")
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Res<()> {
        self.text(name, &to_canonical_json(value).stage("write")?)
    }

    fn svg(&self, name: &str, svg: impl FnOnce() -> String) -> Res<()> {
        if self.cfg.io.svg {
            self.text(name, &svg())?;
        }
        Ok(())
    }

    /// Confusion matrix, PR curves and their plots for one report.
    fn cv_files(&self, r: &CvReport, suffix: &str) -> Res<()> {
        write_confusion_csv(
            &self.path(&format!("confusion{suffix}.csv")),
            &r.pooled_confusion,
        )
        .stage("write")?;
        write_pr_csv(&self.path(&format!("pr_curves{suffix}.csv")), &r.pr_curves).stage("write")?;
        let title = format!("{} dpi {}", r.method, r.dpi);
        self.svg(&format!("confusion{suffix}.svg"), || {
            confusion_svg(&r.pooled_confusion, &title)
        })?;
        self.svg(&format!("pr_curves{suffix}.svg"), || {
            pr_curves_svg(&r.pr_curves, &title)
        })?;
        self.text(&format!("folds{suffix}.csv"), &folds_csv(r, self.cfg))
    }
}

fn dpi(day: u8) -> Res<Dpi> {
    Dpi::new(day).map_err(|e| CliError::Config(e.to_string()))
}

/// The configured input table, or a synthetic one.
fn table(cfg: &RunConfig, day: u8, inputs: &mut Vec<PathBuf>) -> Res<FeatureTable> {
    let d = dpi(day)?;
    match &cfg.io.input {
        Some(path) => {
            inputs.push(path.clone());
            load_feature_table(path, d).stage("load")
        }
        None => synth_feature_table(&cfg.synth, d).stage("synth"),
    }
}

fn recording(cfg: &RunConfig, inputs: &mut Vec<PathBuf>) -> Res<MultichannelRecording> {
    let path = cfg
        .io
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --input <recording.csv>".into()))?;
    inputs.push(path.clone());
    load_recording(path).stage("load")
}

fn folds_csv(r: &CvReport, cfg: &RunConfig) -> String {
    let mut s = String::from("fold,n_train,n_val,n_test,n_components,accuracy,precision,recall,f1,val_accuracy,train_seconds\n");
    for f in &r.folds {
        let a = f.metrics.averaged(cfg.eval.averaging);
        let val = f.val_accuracy.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{val},{}",
            f.fold,
            f.n_train,
            f.n_val,
            f.n_test,
            f.n_components,
            f.metrics.accuracy,
            a.precision,
            a.recall,
            a.f1,
            f.metrics.train_seconds
        );
    }
    s
}

fn synth(out: &Out, recordings: bool) -> Res<Vec<PathBuf>> {
    let cfg = out.cfg;
    for &day in &cfg.eval.dpis {
        let t = synth_feature_table(&cfg.synth, dpi(day)?).stage("synth")?;
        save_feature_table(&t, &out.path(&table_file_name(&t))).stage("write")?;
    }
    if recordings {
        for class in ClassLabel::ALL {
            let rec = synth_recording(&cfg.recording, class).stage("synth")?;
            let name = format!("recording_{}.csv", class.as_str().to_ascii_lowercase());
            save_recording(&rec, &out.path(&name)).stage("write")?;
        }
    }
    Ok(Vec::new())
}

fn filter(out: &Out) -> Res<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let rec = recording(out.cfg, &mut inputs)?;
    let sig = &out.cfg.signal;
    let c = design_highpass_butterworth(sig.filter_order, sig.cutoff_hz, rec.fs_hz())
        .stage("filter")?;
    let filtered = filter_recording(&c, &rec).stage("filter")?;
    save_recording(&filtered, &out.path("filtered.csv")).stage("write")?;
    #[derive(Serialize)]
    struct FilterReport {
        coefficients: meaflow::signal::BiquadCoefficients,
        fs_hz: f64,
        cutoff_hz: f64,
        gain_at_cutoff: f64,
        stable: bool,
    }
    out.json(
        "filter.json",
        &FilterReport {
            coefficients: c,
            fs_hz: rec.fs_hz(),
            cutoff_hz: sig.cutoff_hz,
            gain_at_cutoff: c.magnitude(sig.cutoff_hz, rec.fs_hz()),
            stable: c.is_stable(),
        },
    )?;
    Ok(inputs)
}

fn detect(out: &Out, prefiltered: bool) -> Res<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let mut rec = recording(out.cfg, &mut inputs)?;
    let sig = &out.cfg.signal;
    if !prefiltered {
        let c = design_highpass_butterworth(sig.filter_order, sig.cutoff_hz, rec.fs_hz())
            .stage("filter")?;
        rec = filter_recording(&c, &rec).stage("filter")?;
    }
    let train = detect_recording(&rec, &sig.detector).stage("detect")?;
    save_spike_train(&train, &out.path("spikes.csv")).stage("write")?;
    let seconds = rec.n_samples() as f64 / rec.fs_hz();
    let mut s = String::from("channel,events,rate_hz,whole_trace_sigma\n");
    for (i, ch) in train.channels.iter().enumerate() {
        let n = ch.events.len();
        let _ = writeln!(
            s,
            "{},{n},{},{}",
            i + 1,
            n as f64 / seconds,
            ch.whole_trace_sigma
        );
    }
    out.text("detection_summary.csv", &s)?;
    Ok(inputs)
}

fn preprocess(out: &Out, day: u8) -> Res<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let t = table(out.cfg, day, &mut inputs)?;
    let fitted = fit_pipeline(&t, &out.cfg.preprocess).stage("preprocess")?;
    fitted.save(&out.path("preprocessor.json")).stage("write")?;
    let applied = apply_pipeline(&fitted, &t).stage("preprocess")?;
    save_feature_table(&applied, &out.path("preprocessed.csv")).stage("write")?;
    let mut s = String::from("column,importance,kept\n");
    for (j, name) in t.columns().iter().enumerate() {
        let imp = &fitted.importance;
        let _ = writeln!(s, "{name},{},{}", imp.importances[j], imp.mask[j]);
    }
    out.text("importance.csv", &s)?;
    Ok(inputs)
}

fn scrub_model(model: &mut BaselineModel) {
    if let BaselineModel::Cnn { history, .. }
    | BaselineModel::Mlp { history, .. }
    | BaselineModel::Fused { history, .. } = model
    {
        history.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
    }
}

fn train(out: &Out, day: u8) -> Res<Vec<PathBuf>> {
    let cfg = out.cfg;
    let mut inputs = Vec::new();
    let t = table(cfg, day, &mut inputs)?;
    let method = cfg.eval.method;
    let plan = stratified_kfold(&t, cfg.eval.k, cfg.eval.seed).stage("split")?;
    let split = materialize_fold(&t, &plan, 0).stage("split")?;
    let basis = if cfg.preprocess.paper_faithful {
        &t
    } else {
        &split.train
    };
    let fitted = fit_pipeline(basis, &cfg.preprocess).stage("preprocess")?;
    let prep = |x: &FeatureTable| apply_pipeline(&fitted, x).stage("preprocess");
    let (train, val, test) = (prep(&split.train)?, prep(&split.val)?, prep(&split.test)?);
    let ctx = FitContext {
        baselines: &cfg.baselines,
        nn: &cfg.nn,
        gbt: &cfg.gbt,
        tap: cfg.nn.tap,
        seed: rng::derive_seed(cfg.eval.seed, &[0x7A1, 0]),
        val: Some(&val),
    };
    let start = std::time::Instant::now();
    let mut model = fit_baseline(method, &train, &ctx).stage("train")?;
    let seconds = if cfg.deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    };
    let (_, pred) = predict_baseline(&model, &test).stage("evaluate")?;
    let cm = confusion_matrix(&test.label_indices(), &pred).stage("evaluate")?;
    let mut metrics = metrics_from_cm(&cm).stage("evaluate")?;
    metrics.train_seconds = seconds;
    if cfg.deterministic {
        scrub_model(&mut model);
    }
    if let Some(h) = model.history() {
        h.write_csv(&out.path("history.csv"), !cfg.deterministic)
            .stage("write")?;
    }
    fitted.save(&out.path("preprocessor.json")).stage("write")?;
    out.json("model.json", &model)?;
    write_confusion_csv(&out.path("confusion.csv"), &cm).stage("write")?;
    #[derive(Serialize)]
    struct TrainReport {
        method: BaselineMethod,
        dpi: u8,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        n_components: usize,
        final_val_accuracy: Option<f64>,
        test: meaflow::eval::MetricsReport,
    }
    out.json(
        "train_report.json",
        &TrainReport {
            method,
            dpi: day,
            n_train: train.n_rows(),
            n_val: val.n_rows(),
            n_test: test.n_rows(),
            n_components: fitted.n_components(),
            final_val_accuracy: model
                .history()
                .and_then(|h| h.epochs.last())
                .map(|e| e.val_acc),
            test: metrics,
        },
    )?;
    Ok(inputs)
}

fn finish_cv(cfg: &RunConfig, mut r: CvReport) -> CvReport {
    if cfg.deterministic {
        r.scrub_timings();
    }
    r
}

fn eval(out: &Out, day: u8) -> Res<Vec<PathBuf>> {
    let cfg = out.cfg;
    let mut inputs = Vec::new();
    let t = table(cfg, day, &mut inputs)?;
    let r = cross_validate(&t, &cfg.pipeline_spec(cfg.eval.method)).stage("cross-validate")?;
    let r = finish_cv(cfg, r);
    out.json("cv_report.json", &r)?;
    out.cv_files(&r, "")?;
    report_failures(&r);
    Ok(inputs)
}

fn report_failures(r: &CvReport) {
    for f in &r.failures {
        eprintln!(
            "warning: {} dpi {} fold {} failed at {}: {}",
            r.method, r.dpi, f.fold, f.stage, f.message
        );
    }
}

fn run_comparison(
    cfg: &RunConfig,
    t: &FeatureTable,
    methods: &[BaselineMethod],
) -> Res<ComparisonReport> {
    let mut c =
        compare_methods(t, methods, &cfg.pipeline_spec(methods[0])).stage("cross-validate")?;
    if cfg.deterministic {
        c.scrub_timings();
    }
    c.reports.iter().for_each(report_failures);
    Ok(c)
}

fn compare(out: &Out, day: u8) -> Res<Vec<PathBuf>> {
    let cfg = out.cfg;
    let mut inputs = Vec::new();
    let t = table(cfg, day, &mut inputs)?;
    let c = run_comparison(cfg, &t, &cfg.eval.methods)?;
    out.json("comparison.json", &c)?;
    write_comparison_grid(
        &out.path("grid.csv"),
        std::slice::from_ref(&c),
        cfg.eval.averaging,
    )
    .stage("write")?;
    Ok(inputs)
}

/// The table for `day` inside `dir`: the single file ending in `_dpi<day>.csv`.
fn find_day_table(dir: &Path, day: u8) -> Res<PathBuf> {
    let suffix = format!("_dpi{day}.csv");
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .stage("load")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(&suffix))
        })
        .collect();
    hits.sort();
    match hits.len() {
        1 => Ok(hits.pop().expect("one hit")),
        n => Err(CliError::Runtime {
            stage: "load",
            message: format!("expected one *{suffix} in {}, found {n}", dir.display()),
        }),
    }
}

fn pipeline(out: &Out, with_comparison: bool) -> Res<Vec<PathBuf>> {
    let cfg = out.cfg;
    let mut inputs = Vec::new();
    let mut methods = vec![cfg.eval.method];
    if with_comparison {
        methods.extend(cfg.eval.methods.iter().filter(|&&m| m != cfg.eval.method));
    }
    let mut summaries = Vec::new();
    let mut comparisons = Vec::new();
    for &day in &cfg.eval.dpis {
        let t = match &cfg.io.input_dir {
            Some(dir) => {
                let path = find_day_table(dir, day)?;
                let t = load_feature_table(&path, dpi(day)?).stage("load")?;
                inputs.push(path);
                t
            }
            None => table(cfg, day, &mut inputs)?,
        };
        let c = run_comparison(cfg, &t, &methods)?;
        let main = c.reports[0].clone();
        match &main.mean {
            Some(m) => eprintln!("dpi {day}: {} mean accuracy {:.4}", main.method, m.accuracy),
            None => eprintln!("dpi {day}: every {} fold failed", main.method),
        }
        out.json(&format!("cv_dpi{day}.json"), &main)?;
        out.cv_files(&main, &format!("_dpi{day}"))?;
        if with_comparison {
            out.json(&format!("comparison_dpi{day}.json"), &c)?;
        }
        summaries.push(main);
        comparisons.push(c);
    }
    let t6 = Table6::from_reports(&summaries, cfg.eval.averaging).stage("report")?;
    t6.write_csv(&out.path("table6.csv")).stage("write")?;
    out.json("table6.json", &t6)?;
    if with_comparison {
        write_comparison_grid(&out.path("grid.csv"), &comparisons, cfg.eval.averaging)
            .stage("write")?;
    }
    Ok(inputs)
}
