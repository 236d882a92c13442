//! Synthetic MEA data: raw recordings for the DSP path and labeled feature
//! tables with a tunable class separation for the classification path.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{mea_columns, ClassLabel, Dpi, FeatureTable, N_CHANNELS, N_CLASSES};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::signal::MultichannelRecording;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRecordingConfig {
    pub fs_hz: f64,
    pub n_channels: usize,
    pub duration_s: f64,
    /// One rate for every channel, or one per channel.
    pub firing_rate_hz: Vec<f64>,
    /// Multiplier on the firing rates per class (Control, DENV2, ZIKV).
    pub class_rate_scale: [f64; N_CLASSES],
    pub amplitude_uv: f64,
    pub width_ms: f64,
    pub noise_sd_uv: f64,
    pub seed: u64,
}

impl Default for SynthRecordingConfig {
    fn default() -> Self {
        SynthRecordingConfig {
            fs_hz: 10_000.0,
            n_channels: N_CHANNELS,
            duration_s: 10.0,
            firing_rate_hz: vec![10.0],
            class_rate_scale: [1.0; N_CLASSES],
            amplitude_uv: 60.0,
            width_ms: 1.2,
            noise_sd_uv: 2.75,
            seed: 0,
        }
    }
}

impl SynthRecordingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs_hz > 0.0 && self.fs_hz.is_finite()) {
            return Err(Error::invalid("fs_hz must be positive"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("duration_s must be positive"));
        }
        if self.n_channels == 0 {
            return Err(Error::invalid("n_channels must be positive"));
        }
        if !(self.firing_rate_hz.len() == 1 || self.firing_rate_hz.len() == self.n_channels) {
            return Err(Error::invalid(
                "firing_rate_hz needs 1 or n_channels entries",
            ));
        }
        let rates = self.firing_rate_hz.iter().chain(&self.class_rate_scale);
        if rates.clone().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid(
                "firing rates must be finite and non-negative",
            ));
        }
        if !(self.noise_sd_uv >= 0.0 && self.width_ms > 0.0 && self.amplitude_uv.is_finite()) {
            return Err(Error::invalid(
                "noise_sd_uv ≥ 0, width_ms > 0 and finite amplitude required",
            ));
        }
        Ok(())
    }

    fn rate(&self, channel: usize, class: ClassLabel) -> f64 {
        let base = if self.firing_rate_hz.len() == 1 {
            self.firing_rate_hz[0]
        } else {
            self.firing_rate_hz[channel]
        };
        base * self.class_rate_scale[class.index()]
    }
}

/// Biphasic action-potential template: a negative lobe then a positive lobe.
pub fn spike_template(amplitude_uv: f64, width_ms: f64, fs_hz: f64) -> Vec<f64> {
    let len = ((width_ms * fs_hz / 1000.0).round() as usize).max(2);
    (0..len)
        .map(|i| -amplitude_uv * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / len as f64).sin())
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthRecording {
    pub recording: MultichannelRecording,
    /// Onset sample of every inserted spike, per channel.
    pub spike_onsets: Vec<Vec<usize>>,
}

pub fn synth_recording(
    cfg: &SynthRecordingConfig,
    class: ClassLabel,
) -> Result<MultichannelRecording> {
    Ok(synth_recording_with_truth(cfg, class)?.recording)
}

/// Poisson spike trains convolved with the template, plus white Gaussian
/// noise. Each channel draws from its own seeded stream.
pub fn synth_recording_with_truth(
    cfg: &SynthRecordingConfig,
    class: ClassLabel,
) -> Result<SynthRecording> {
    cfg.validate()?;
    let n = (cfg.duration_s * cfg.fs_hz).round() as usize;
    let template = spike_template(cfg.amplitude_uv, cfg.width_ms, cfg.fs_hz);
    let channels: Vec<(Vec<f64>, Vec<usize>)> = par::map_range(cfg.n_channels, |ch| {
        let tags = [0x5EC0, class.index() as u64, ch as u64];
        let mut trace = vec![0.0; n];
        let mut onsets = Vec::new();
        let rate = cfg.rate(ch, class);
        if rate > 0.0 {
            let mut spikes = rng::stream(cfg.seed, &[tags[0], tags[1], tags[2], 1]);
            let isi = Exp::new(rate).expect("positive rate");
            let mut t = 0.0;
            loop {
                t += isi.sample(&mut spikes);
                if t >= cfg.duration_s {
                    break;
                }
                let onset = (t * cfg.fs_hz) as usize;
                onsets.push(onset);
                for (x, &v) in trace[onset.min(n)..].iter_mut().zip(&template) {
                    *x += v;
                }
            }
        }
        if cfg.noise_sd_uv > 0.0 {
            let mut noise = rng::stream(cfg.seed, &[tags[0], tags[1], tags[2], 2]);
            let normal = Normal::new(0.0, cfg.noise_sd_uv).expect("finite sd");
            trace
                .iter_mut()
                .for_each(|x| *x += normal.sample(&mut noise));
        }
        (trace, onsets)
    });
    let (traces, spike_onsets) = channels.into_iter().unzip();
    Ok(SynthRecording {
        recording: MultichannelRecording::new(cfg.fs_hz, traces)?,
        spike_onsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeColumn {
    /// The row index, carrying no class information.
    #[default]
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTableConfig {
    pub rows_per_class: usize,
    /// Distance of each class mean from the common baseline, in µV.
    pub separation: f64,
    /// Per-channel noise variance.
    pub covariance_scale: f64,
    /// Size of the per-class, per-dpi mean perturbation, relative to the
    /// separation (so `separation = 0` still gives identical classes).
    pub dpi_effect: f64,
    /// Channels with bounded (uniform) class-independent noise. These and the
    /// time column fall below a 0.5 variance cutoff after robust scaling.
    pub uniform_channels: usize,
    /// Spread of the per-channel baseline offsets.
    pub baseline_spread_uv: f64,
    pub time_column: TimeColumn,
    pub seed: u64,
}

impl Default for SynthTableConfig {
    fn default() -> Self {
        SynthTableConfig {
            rows_per_class: 1000,
            separation: 3.0,
            covariance_scale: 1.0,
            dpi_effect: 0.25,
            uniform_channels: 9,
            baseline_spread_uv: 5.0,
            time_column: TimeColumn::Sequential,
            seed: 0,
        }
    }
}

impl SynthTableConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows_per_class == 0 {
            return Err(Error::invalid("rows_per_class must be positive"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("separation must be finite and ≥ 0"));
        }
        if !(self.covariance_scale > 0.0 && self.covariance_scale.is_finite()) {
            return Err(Error::invalid("covariance_scale must be positive"));
        }
        if !(self.dpi_effect >= 0.0 && self.baseline_spread_uv >= 0.0) {
            return Err(Error::invalid(
                "dpi_effect and baseline_spread_uv must be ≥ 0",
            ));
        }
        if self.uniform_channels + N_CLASSES > N_CHANNELS {
            return Err(Error::invalid(format!(
                "at most {} uniform channels allowed",
                N_CHANNELS - N_CLASSES
            )));
        }
        Ok(())
    }
}

struct TableModel {
    baseline: Vec<f64>,
    uniform: Vec<bool>,
    means: [Vec<f64>; N_CLASSES],
}

fn random_unit(r: &mut impl Rng, support: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; N_CHANNELS];
    for &j in support {
        v[j] = StandardNormal.sample(r);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn table_model(cfg: &SynthTableConfig, dpi: Dpi) -> TableModel {
    let mut r = rng::stream(cfg.seed, &[0x7AB1, 0]);
    let baseline: Vec<f64> = (0..N_CHANNELS)
        .map(|_| {
            cfg.baseline_spread_uv * {
                let z: f64 = StandardNormal.sample(&mut r);
                z
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..N_CHANNELS).collect();
    order.shuffle(&mut r);
    let mut uniform = vec![false; N_CHANNELS];
    for &j in &order[..cfg.uniform_channels] {
        uniform[j] = true;
    }
    let support: Vec<usize> = (0..N_CHANNELS).filter(|&j| !uniform[j]).collect();

    // Orthonormal class directions on the Gaussian channels.
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(N_CLASSES);
    for _ in 0..N_CLASSES {
        let mut v = random_unit(&mut r, &support);
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }

    let mut pr = rng::stream(cfg.seed, &[0x7AB1, 1, dpi.day() as u64]);
    let means = std::array::from_fn(|c| {
        let wobble = random_unit(&mut pr, &support);
        dirs[c]
            .iter()
            .zip(&wobble)
            .map(|(u, w)| cfg.separation * (u + cfg.dpi_effect * w))
            .collect()
    });
    TableModel {
        baseline,
        uniform,
        means,
    }
}

const BLOCK_ROWS: usize = 4096;

/// Balanced three-class table: row `r` has class `r mod 3` and `time = r`.
/// Channel values are class-conditional Gaussians (or uniform noise on the
/// designated channels) around per-channel baselines.
pub fn synth_feature_table(cfg: &SynthTableConfig, dpi: Dpi) -> Result<FeatureTable> {
    cfg.validate()?;
    let model = table_model(cfg, dpi);
    let n = N_CLASSES * cfg.rows_per_class;
    let width = N_CHANNELS + 1;
    let sd = cfg.covariance_scale.sqrt();
    let half_width = (3.0 * cfg.covariance_scale).sqrt();
    let uniform = Uniform::new_inclusive(-half_width, half_width).expect("finite bounds");

    let mut features = vec![0.0; n * width];
    par::chunks_mut(&mut features, BLOCK_ROWS * width, |block, chunk| {
        let mut r = rng::stream(cfg.seed, &[0x7AB1, 2, dpi.day() as u64, block as u64]);
        for (i, row) in chunk.chunks_exact_mut(width).enumerate() {
            let idx = block * BLOCK_ROWS + i;
            let mean = &model.means[idx % N_CLASSES];
            for j in 0..N_CHANNELS {
                let noise = if model.uniform[j] {
                    uniform.sample(&mut r)
                } else {
                    sd * {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z
                    }
                };
                row[j] = model.baseline[j] + mean[j] + noise;
            }
            row[N_CHANNELS] = idx as f64;
        }
    });
    let labels = (0..n).map(|i| ClassLabel::ALL[i % N_CLASSES]).collect();
    FeatureTable::new(mea_columns(), features, labels, dpi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_recording_is_zero() {
        let cfg = SynthRecordingConfig {
            firing_rate_hz: vec![0.0],
            noise_sd_uv: 0.0,
            duration_s: 0.1,
            ..Default::default()
        };
        let rec = synth_recording(&cfg, ClassLabel::Control).unwrap();
        assert_eq!(rec.n_channels(), 60);
        assert_eq!(rec.n_samples(), 1000);
        assert!(rec.traces().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn template_is_negative_first() {
        let t = spike_template(50.0, 1.2, 10_000.0);
        assert_eq!(t.len(), 12);
        assert!(t[2] < -40.0 && t[8] > 40.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SynthRecordingConfig {
            duration_s: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthTableConfig {
            uniform_channels: 58,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn table_shape_and_balance() {
        let cfg = SynthTableConfig {
            rows_per_class: 50,
            ..Default::default()
        };
        let t = synth_feature_table(&cfg, Dpi::new(2).unwrap()).unwrap();
        assert_eq!(t.n_rows(), 150);
        assert_eq!(t.n_features(), 61);
        assert_eq!(t.class_counts(), [50, 50, 50]);
        assert_eq!(t.row(149)[60], 149.0);
    }
}
