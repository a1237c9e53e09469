//! Mel-spectrogram extraction and the audio helpers feeding it.
//!
//! The STFT uses a periodic Hann window with no center padding, so a
//! waveform of exactly one window yields one frame. Magnitudes are projected
//! onto triangular mel filters and clamped at [`MEL_FLOOR`]. Features are
//! quantized through 32-bit floats at creation, matching the on-disk payload
//! so that serialization round trips are bit-exact.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Magnitude floor: the 32-bit representation of 1e-5, applied before any
/// log so the log-domain loss term stays defined.
pub const MEL_FLOOR: f64 = 1e-5_f32 as f64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// Upper band edge; defaults to the Nyquist frequency when `None`.
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { window: 1024, hop: 256, n_mels: 80, fmin: 0.0, fmax: None }
    }
}

/// T×M matrix of mel-band magnitudes plus the framing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub sample_rate: u32,
    pub hop: u32,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor, sample_rate: u32, hop: u32) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(Error::InvalidInput(format!(
                "mel frames must be a non-empty T×M matrix, got {:?}",
                frames.shape()
            )));
        }
        if frames.data().iter().any(|&v| !(v >= MEL_FLOOR)) {
            return Err(Error::InvalidInput(
                "mel magnitudes must be finite and ≥ the 1e-5 floor".into(),
            ));
        }
        Ok(Self { frames, sample_rate, hop })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter bank as an (n_bins × n_mels) matrix over the one-sided
/// spectrum; band centers are equally spaced on the mel scale.
pub(crate) fn mel_filter_bank(cfg: &MelConfig, sample_rate: u32) -> Result<Tensor> {
    let n_bins = cfg.window / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let fmax = cfg.fmax.unwrap_or(nyquist);
    if !(cfg.fmin >= 0.0 && cfg.fmin < fmax && fmax <= nyquist) {
        return Err(Error::Config(format!(
            "mel band edges [{}, {fmax}] invalid for sample rate {sample_rate}",
            cfg.fmin
        )));
    }
    if cfg.n_mels == 0 {
        return Err(Error::Config("mel bank count must be ≥ 1".into()));
    }
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut w = vec![0.0; n_bins * cfg.n_mels];
    for bin in 0..n_bins {
        let f = bin as f64 * sample_rate as f64 / cfg.window as f64;
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let v = if f >= l && f <= c && c > l {
                (f - l) / (c - l)
            } else if f > c && f < r && r > c {
                (r - f) / (r - c)
            } else {
                0.0
            };
            w[bin * cfg.n_mels + m] = v;
        }
    }
    Tensor::matrix(n_bins, cfg.n_mels, w)
}

/// Center frequency of band `m` (used by tests to aim pure tones at bands).
#[cfg(test)]
pub(crate) fn band_center_hz(cfg: &MelConfig, sample_rate: u32, m: usize) -> f64 {
    let nyquist = sample_rate as f64 / 2.0;
    let fmax = cfg.fmax.unwrap_or(nyquist);
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(fmax);
    mel_to_hz(lo + (hi - lo) * (m + 1) as f64 / (cfg.n_mels + 1) as f64)
}

/// STFT magnitudes → mel bands → floor clamp → f32 quantization.
pub fn compute_mel(waveform: &[f64], sample_rate: u32, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if waveform.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    if waveform.len() < cfg.window {
        return Err(Error::InvalidInput(format!(
            "waveform of {} samples is shorter than the {}-sample window",
            waveform.len(),
            cfg.window
        )));
    }
    if cfg.hop == 0 {
        return Err(Error::Config("hop must be ≥ 1".into()));
    }
    let bank = mel_filter_bank(cfg, sample_rate)?;
    let n_bins = cfg.window / 2 + 1;
    let t = 1 + (waveform.len() - cfg.window) / cfg.hop;

    let hann: Vec<f64> = (0..cfg.window)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / cfg.window as f64).cos()))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.window);

    let mut out = vec![0.0; t * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.window];
    let mut mags = vec![0.0; n_bins];
    for frame in 0..t {
        let start = frame * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(waveform[start + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for (i, m) in mags.iter_mut().enumerate() {
            *m = buf[i].norm();
        }
        let row = &mut out[frame * cfg.n_mels..(frame + 1) * cfg.n_mels];
        for (bin, &mag) in mags.iter().enumerate() {
            if mag == 0.0 {
                continue;
            }
            let wrow = &bank.data()[bin * cfg.n_mels..(bin + 1) * cfg.n_mels];
            for (o, &w) in row.iter_mut().zip(wrow) {
                *o += mag * w;
            }
        }
        for v in row.iter_mut() {
            *v = quantize(v.max(MEL_FLOOR));
        }
    }
    MelSpectrogram::new(Tensor::matrix(t, cfg.n_mels, out)?, sample_rate, cfg.hop as u32)
}

/// Round a value through 32-bit precision (the on-disk representation).
pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Linear-interpolation resampler; adequate here, and stated as such.
pub fn resample_linear(samples: &[f64], from_hz: u32, to_hz: u32) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    if from_hz == 0 || to_hz == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if from_hz == to_hz {
        return Ok(samples.to_vec());
    }
    let n_out = (samples.len() as u64 * to_hz as u64 / from_hz as u64) as usize;
    let step = from_hz as f64 / to_hz as f64;
    let mut out = Vec::with_capacity(n_out.max(1));
    for i in 0..n_out.max(1) {
        let pos = i as f64 * step;
        let idx = pos as usize;
        let frac = pos - idx as f64;
        let a = samples[idx.min(samples.len() - 1)];
        let b = samples[(idx + 1).min(samples.len() - 1)];
        out.push(a + (b - a) * frac);
    }
    Ok(out)
}

/// Mono f64 samples in [−1, 1] plus the sample rate; multi-channel input is
/// averaged down.
pub fn load_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::format(path, format!("not a readable WAV file: {e}")))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format(path, "WAV reports zero channels"));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("corrupt samples: {e}")))?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("corrupt samples: {e}")))?,
    };
    if samples.is_empty() {
        return Err(Error::format(path, "WAV contains no samples"));
    }
    let mono: Vec<f64> = samples
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_clamps_to_floor_everywhere() {
        let cfg = MelConfig { n_mels: 8, ..Default::default() };
        let mel = compute_mel(&vec![0.0; 1024 + 256 * 2], 22050, &cfg).unwrap();
        assert_eq!(mel.len(), 3);
        assert!(mel.frames.data().iter().all(|&v| v == MEL_FLOOR));
    }

    #[test]
    fn window_length_input_gives_one_frame() {
        let cfg = MelConfig { n_mels: 8, ..Default::default() };
        let mel = compute_mel(&vec![0.1; 1024], 22050, &cfg).unwrap();
        assert_eq!(mel.len(), 1);
    }

    #[test]
    fn empty_or_short_waveform_rejected() {
        let cfg = MelConfig::default();
        assert!(matches!(compute_mel(&[], 22050, &cfg), Err(Error::InvalidInput(_))));
        assert!(matches!(compute_mel(&[0.0; 100], 22050, &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        let sr = 22050u32;
        let cfg = MelConfig { n_mels: 80, ..Default::default() };
        for band in [20usize, 40, 60] {
            let fc = band_center_hz(&cfg, sr, band);
            // Independent oracle: with a pure tone the filter response is the
            // bank evaluated at the tone frequency, which peaks at `band`.
            let n = 1024 + 256 * 4;
            let wave: Vec<f64> = (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * fc * i as f64 / sr as f64).sin())
                .collect();
            let mel = compute_mel(&wave, sr, &cfg).unwrap();
            let mid = mel.len() / 2;
            let row = &mel.frames.data()[mid * 80..(mid + 1) * 80];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, band, "band {band}: argmax {argmax}");
        }
    }

    #[test]
    fn filter_bank_rows_cover_all_bands() {
        let cfg = MelConfig { n_mels: 16, ..Default::default() };
        let bank = mel_filter_bank(&cfg, 22050).unwrap();
        for m in 0..16 {
            let col_max = (0..bank.rows()).map(|b| bank.get2(b, m)).fold(0.0, f64::max);
            assert!(col_max > 0.0, "band {m} has no support");
        }
    }

    #[test]
    fn resample_identity_and_halving() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(resample_linear(&x, 8000, 8000).unwrap(), x);
        let half = resample_linear(&x, 8000, 4000).unwrap();
        assert_eq!(half.len(), 50);
        assert!((half[10] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn mel_floor_survives_quantization() {
        assert_eq!(quantize(MEL_FLOOR), MEL_FLOOR);
        assert!(MEL_FLOOR <= 1e-5);
    }
}
