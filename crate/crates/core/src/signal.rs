//! High-pass filtering and threshold spike detection for MEA traces.

use std::f64::consts::{PI, SQRT_2};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::{mea_columns, ClassLabel, Dpi, FeatureTable, N_CHANNELS};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_FS_HZ: f64 = 10_000.0;
pub const DEFAULT_CUTOFF_HZ: f64 = 200.0;

/// Voltage traces (µV), one per electrode, all sampled at `fs_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelRecording {
    fs_hz: f64,
    traces: Vec<Vec<f64>>,
}

impl MultichannelRecording {
    pub fn new(fs_hz: f64, traces: Vec<Vec<f64>>) -> Result<Self> {
        if !(fs_hz > 0.0 && fs_hz.is_finite()) {
            return Err(Error::invalid(format!(
                "sampling rate must be positive, got {fs_hz}"
            )));
        }
        if let Some(first) = traces.first() {
            if traces.iter().any(|t| t.len() != first.len()) {
                return Err(Error::invalid("all traces must have the same length"));
            }
        }
        Ok(MultichannelRecording { fs_hz, traces })
    }

    pub fn fs_hz(&self) -> f64 {
        self.fs_hz
    }

    pub fn n_channels(&self) -> usize {
        self.traces.len()
    }

    pub fn n_samples(&self) -> usize {
        self.traces.first().map_or(0, Vec::len)
    }

    pub fn traces(&self) -> &[Vec<f64>] {
        &self.traces
    }

    pub fn trace(&self, channel: usize) -> &[f64] {
        &self.traces[channel]
    }
}

/// Writes a recording as CSV: a `fs_hz,n_channels` header pair, then a
/// channel-name header and one row per sample.
pub fn save_recording(rec: &MultichannelRecording, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(BufWriter::with_capacity(1 << 20, file));
    w.write_record(["fs_hz", "n_channels"])?;
    w.write_record([rec.fs_hz.to_string(), rec.n_channels().to_string()])?;
    let names: Vec<String> = (1..=rec.n_channels())
        .map(|c| format!("ch{c:02}"))
        .collect();
    w.write_record(&names)?;
    let mut row = Vec::with_capacity(rec.n_channels());
    for t in 0..rec.n_samples() {
        row.clear();
        row.extend(rec.traces.iter().map(|tr| tr[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_recording(path: &Path) -> Result<MultichannelRecording> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::with_capacity(1 << 20, file));
    let err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = r.records();
    let mut next = |what: &str| -> Result<csv::StringRecord> {
        records
            .next()
            .ok_or_else(|| err(0, format!("missing {what}")))?
            .map_err(Error::from)
    };
    let head = next("header")?;
    if head.len() != 2 || &head[0] != "fs_hz" || &head[1] != "n_channels" {
        return Err(err(1, "expected header fs_hz,n_channels".into()));
    }
    let meta = next("fs_hz/n_channels values")?;
    let fs_hz: f64 = meta
        .get(0)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(2, "bad fs_hz".into()))?;
    let n_channels: usize = meta
        .get(1)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(2, "bad n_channels".into()))?;
    let names = next("channel header")?;
    if names.len() != n_channels {
        return Err(err(
            3,
            format!("expected {n_channels} channel names, found {}", names.len()),
        ));
    }
    let mut traces = vec![Vec::new(); n_channels];
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n_channels {
            return Err(err(
                line,
                format!("expected {n_channels} values, found {}", rec.len()),
            ));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(line, format!("bad number {field:?}")))?;
            traces[c].push(v);
        }
    }
    MultichannelRecording::new(fs_hz, traces)
}

/// Second-order section with `a0` normalized to 1:
///
/// `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiquadCoefficients {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadCoefficients {
    /// Frequency response at `f_hz`.
    pub fn response(&self, f_hz: f64, fs_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / fs_hz;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }

    pub fn magnitude(&self, f_hz: f64, fs_hz: f64) -> f64 {
        self.response(f_hz, fs_hz).norm()
    }

    /// Roots of `z² + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }
}

/// Butterworth high-pass via the bilinear transform with the cutoff prewarped.
///
/// Only order 2 (a single biquad) is supported.
pub fn design_highpass_butterworth(
    order: usize,
    fc_hz: f64,
    fs_hz: f64,
) -> Result<BiquadCoefficients> {
    if order != 2 {
        return Err(Error::invalid(format!(
            "only order 2 is supported, got {order}"
        )));
    }
    if !(fs_hz > 0.0 && fc_hz > 0.0 && fc_hz < fs_hz / 2.0) {
        return Err(Error::invalid(format!(
            "cutoff {fc_hz} Hz must lie in (0, {}) for fs = {fs_hz} Hz",
            fs_hz / 2.0
        )));
    }
    let k = (PI * fc_hz / fs_hz).tan();
    let k2 = k * k;
    let norm = 1.0 / (1.0 + SQRT_2 * k + k2);
    Ok(BiquadCoefficients {
        b0: norm,
        b1: -2.0 * norm,
        b2: norm,
        a1: 2.0 * (k2 - 1.0) * norm,
        a2: (1.0 - SQRT_2 * k + k2) * norm,
    })
}

/// Causal transposed direct-form II filtering from zero state.
pub fn filter_trace(c: &BiquadCoefficients, trace: &[f64]) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    Ok(trace
        .iter()
        .map(|&x| {
            let y = c.b0 * x + s1;
            s1 = c.b1 * x - c.a1 * y + s2;
            s2 = c.b2 * x - c.a2 * y;
            y
        })
        .collect())
}

/// Filters every channel (channel-parallel).
pub fn filter_recording(
    c: &BiquadCoefficients,
    rec: &MultichannelRecording,
) -> Result<MultichannelRecording> {
    let traces = par::map(&rec.traces, |t| filter_trace(c, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    MultichannelRecording::new(rec.fs_hz, traces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Threshold on `|x|`.
    #[default]
    Both,
    /// Threshold on `-x`; only downward deflections count.
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub k_sigma: f64,
    pub window_ms: f64,
    pub refractory_ms: f64,
    pub polarity: Polarity,
    /// When set, a fixed threshold in µV replaces `k_sigma · σ`.
    pub fixed_threshold_uv: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            k_sigma: 8.0,
            window_ms: 500.0,
            refractory_ms: 1.0,
            polarity: Polarity::Both,
            fixed_threshold_uv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub sample_index: usize,
    pub amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelSpikes {
    pub events: Vec<SpikeEvent>,
    /// Set when the σ window was longer than the trace and the whole-trace σ
    /// was used instead.
    pub whole_trace_sigma: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub channels: Vec<ChannelSpikes>,
}

impl SpikeTrain {
    pub fn total_events(&self) -> usize {
        self.channels.iter().map(|c| c.events.len()).sum()
    }
}

fn ms_to_samples(ms: f64, fs_hz: f64) -> usize {
    (ms * fs_hz / 1000.0).round() as usize
}

/// Population σ of a sliding window of exactly `w` samples.
///
/// For sample `t` the window is `[t + 1 - w, t]`; samples before the first
/// full window use the first `w` samples.
fn rolling_sigma(trace: &[f64], w: usize) -> Vec<f64> {
    let n = trace.len();
    let shift = trace.iter().sum::<f64>() / n as f64;
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &x) in trace.iter().enumerate() {
        let d = x - shift;
        s1[i + 1] = s1[i] + d;
        s2[i + 1] = s2[i] + d * d;
    }
    let wf = w as f64;
    (0..n)
        .map(|t| {
            let start = (t + 1).saturating_sub(w);
            let (a, b) = (start, start + w);
            let mean = (s1[b] - s1[a]) / wf;
            let var = (s2[b] - s2[a]) / wf - mean * mean;
            var.max(0.0).sqrt()
        })
        .collect()
}

fn population_sigma(trace: &[f64]) -> f64 {
    let n = trace.len() as f64;
    let mean = trace.iter().sum::<f64>() / n;
    (trace.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Threshold detection on one (already filtered) channel.
///
/// A sample is a candidate when its magnitude is a local peak (`≥` the
/// previous sample, `>` the next) and exceeds the threshold. Candidates closer
/// than the refractory gap are merged, keeping the larger magnitude (the
/// earlier one on ties).
pub fn detect_spikes(trace: &[f64], fs_hz: f64, cfg: &DetectorConfig) -> Result<ChannelSpikes> {
    if trace.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let n = trace.len();
    let magnitude = |x: f64| match cfg.polarity {
        Polarity::Both => x.abs(),
        Polarity::Negative => (-x).max(0.0),
    };

    let mut whole_trace_sigma = false;
    let thresholds: Box<dyn Fn(usize) -> f64> = match cfg.fixed_threshold_uv {
        Some(uv) => Box::new(move |_| uv),
        None => {
            let w = ms_to_samples(cfg.window_ms, fs_hz);
            if w < 2 {
                return Err(Error::invalid(format!(
                    "σ window of {} ms at {fs_hz} Hz spans fewer than 2 samples",
                    cfg.window_ms
                )));
            }
            if w > n {
                whole_trace_sigma = true;
                let thr = cfg.k_sigma * population_sigma(trace);
                Box::new(move |_| thr)
            } else {
                let sigma = rolling_sigma(trace, w);
                let k = cfg.k_sigma;
                Box::new(move |t| k * sigma[t])
            }
        }
    };

    let refractory = ms_to_samples(cfg.refractory_ms, fs_hz);
    let mut events: Vec<SpikeEvent> = Vec::new();
    for t in 0..n {
        let a = magnitude(trace[t]);
        if a <= 0.0 {
            continue;
        }
        if t > 0 && a < magnitude(trace[t - 1]) {
            continue;
        }
        if t + 1 < n && a <= magnitude(trace[t + 1]) {
            continue;
        }
        if a <= thresholds(t) {
            continue;
        }
        let ev = SpikeEvent {
            sample_index: t,
            amplitude_uv: trace[t],
        };
        match events.last_mut() {
            Some(last) if t - last.sample_index < refractory => {
                if a > magnitude(last.amplitude_uv) {
                    *last = ev;
                }
            }
            _ => events.push(ev),
        }
    }
    Ok(ChannelSpikes {
        events,
        whole_trace_sigma,
    })
}

/// Detection on every channel (channel-parallel).
pub fn detect_recording(rec: &MultichannelRecording, cfg: &DetectorConfig) -> Result<SpikeTrain> {
    let channels = par::map(&rec.traces, |t| detect_spikes(t, rec.fs_hz, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SpikeTrain { channels })
}

/// Writes `channel,sample_index,amplitude_uV` rows, channels numbered from 1.
pub fn save_spike_train(train: &SpikeTrain, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "channel,sample_index,amplitude_uV").map_err(io)?;
    for (c, ch) in train.channels.iter().enumerate() {
        for ev in &ch.events {
            writeln!(w, "{},{},{}", c + 1, ev.sample_index, ev.amplitude_uv).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Filters a 60-channel recording and lays it out as feature rows: row `t`
/// holds each channel's filtered value at sample `t` and `time = t`.
pub fn recording_to_feature_rows(
    rec: &MultichannelRecording,
    coeffs: &BiquadCoefficients,
    label: ClassLabel,
    dpi: Dpi,
) -> Result<FeatureTable> {
    if rec.n_channels() != N_CHANNELS {
        return Err(Error::DimensionMismatch {
            expected: N_CHANNELS,
            actual: rec.n_channels(),
        });
    }
    let filtered = filter_recording(coeffs, rec)?;
    let n = rec.n_samples();
    let mut features = Vec::with_capacity(n * (N_CHANNELS + 1));
    for t in 0..n {
        features.extend(filtered.traces.iter().map(|tr| tr[t]));
        features.push(t as f64);
    }
    FeatureTable::new(mea_columns(), features, vec![label; n], dpi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_cutoff() {
        let c = design_highpass_butterworth(2, 200.0, 10_000.0).unwrap();
        assert!(c.magnitude(0.0, 10_000.0) < 1e-9);
        assert!((c.magnitude(5_000.0, 10_000.0) - 1.0).abs() < 1e-9);
        assert!((c.magnitude(200.0, 10_000.0) - SQRT_2 / 2.0).abs() < 1e-6);
        assert!(c.is_stable());
    }

    #[test]
    fn rejects_bad_designs() {
        assert!(design_highpass_butterworth(4, 200.0, 10_000.0).is_err());
        assert!(design_highpass_butterworth(2, 5_000.0, 10_000.0).is_err());
        assert!(design_highpass_butterworth(2, 0.0, 10_000.0).is_err());
    }

    #[test]
    fn zero_in_zero_out_and_dc_rejection() {
        let c = design_highpass_butterworth(2, 200.0, 10_000.0).unwrap();
        assert!(filter_trace(&c, &[0.0; 100])
            .unwrap()
            .iter()
            .all(|&y| y == 0.0));
        let y = filter_trace(&c, &vec![5.0; 10_000]).unwrap();
        assert!(y.last().unwrap().abs() < 1e-6 * 5.0);
        assert!(filter_trace(&c, &[]).is_err());
    }

    #[test]
    fn flat_trace_has_no_events() {
        let s = detect_spikes(&[0.0; 6000], 10_000.0, &DetectorConfig::default()).unwrap();
        assert!(s.events.is_empty());
    }

    #[test]
    fn short_trace_falls_back_to_whole_trace_sigma() {
        let mut x = vec![0.0; 100];
        x[10] = 1.0;
        x[50] = -1.0;
        let s = detect_spikes(
            &x,
            10_000.0,
            &DetectorConfig {
                k_sigma: 3.0,
                ..DetectorConfig::default()
            },
        )
        .unwrap();
        assert!(s.whole_trace_sigma);
        assert_eq!(s.events.len(), 2);
    }

    #[test]
    fn negative_polarity_ignores_positive_peaks() {
        let mut x = vec![0.0; 1000];
        x[100] = 50.0;
        x[600] = -50.0;
        let cfg = DetectorConfig {
            polarity: Polarity::Negative,
            fixed_threshold_uv: Some(22.0),
            ..DetectorConfig::default()
        };
        let s = detect_spikes(&x, 10_000.0, &cfg).unwrap();
        assert_eq!(s.events.len(), 1);
        assert_eq!(s.events[0].sample_index, 600);
    }

    #[test]
    fn refractory_merge_keeps_larger_peak() {
        let mut x = vec![0.0; 1000];
        x[100] = -40.0;
        x[105] = 45.0;
        let cfg = DetectorConfig {
            fixed_threshold_uv: Some(22.0),
            ..DetectorConfig::default()
        };
        let s = detect_spikes(&x, 10_000.0, &cfg).unwrap();
        assert_eq!(
            s.events,
            vec![SpikeEvent {
                sample_index: 105,
                amplitude_uv: 45.0
            }]
        );
    }

    #[test]
    fn feature_rows_layout() {
        let traces: Vec<Vec<f64>> = (0..N_CHANNELS)
            .map(|c| (0..100).map(|t| (c * t) as f64).collect())
            .collect();
        let rec = MultichannelRecording::new(10_000.0, traces).unwrap();
        let c = design_highpass_butterworth(2, 200.0, 10_000.0).unwrap();
        let t =
            recording_to_feature_rows(&rec, &c, ClassLabel::Zikv, Dpi::new(3).unwrap()).unwrap();
        assert_eq!(t.n_rows(), 100);
        assert_eq!(t.column(60), (0..100).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(t.column(7), filter_trace(&c, rec.trace(7)).unwrap());
        let bad = MultichannelRecording::new(10_000.0, vec![vec![0.0; 10]; 59]).unwrap();
        assert!(
            recording_to_feature_rows(&bad, &c, ClassLabel::Control, Dpi::new(0).unwrap()).is_err()
        );
    }
}
