use std::sync::Arc;

use difftrack_autodiff::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scene::{FormatTag, MultichannelClip};

pub const SAMPLE_RATE: u32 = 24_000;
pub const WINDOW: usize = 960;
pub const HOP: usize = 480;
pub const FFT_SIZE: usize = 1024;
pub const MEL_BANDS: usize = 64;
/// Feature frames per label frame.
pub const FRAMES_PER_LABEL: usize = 5;
pub const LOG_FLOOR: f64 = 1e-8;
/// Lags kept from each GCC-PHAT curve, centred on zero: `-32..32`.
pub const GCC_LAGS: usize = 64;

const MIC_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// `channels x frames x 64` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub format: FormatTag,
    channels: usize,
    frames: usize,
    data: Vec<f64>,
}

impl FeatureBlock {
    pub fn new(format: FormatTag, frames: usize, data: Vec<f64>) -> Result<Self> {
        let channels = channels_for(format);
        if data.len() != channels * frames * MEL_BANDS {
            return Err(Error::Format(format!(
                "feature data of length {} does not fit {channels}x{frames}x{MEL_BANDS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(Self { format, channels, frames, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        MEL_BANDS
    }

    pub fn hop_seconds(&self) -> f64 {
        HOP as f64 / SAMPLE_RATE as f64
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, c: usize, t: usize, b: usize) -> f64 {
        self.data[(c * self.frames + t) * MEL_BANDS + b]
    }

    /// Frames `[start, start + len)` as a `[C, len, 64]` tensor.
    pub fn window_tensor(&self, start: usize, len: usize) -> Tensor {
        let mut out = Vec::with_capacity(self.channels * len * MEL_BANDS);
        for c in 0..self.channels {
            let base = (c * self.frames + start) * MEL_BANDS;
            out.extend_from_slice(&self.data[base..base + len * MEL_BANDS]);
        }
        Tensor::new(&[self.channels, len, MEL_BANDS], out).expect("sized")
    }

    pub fn to_tensor(&self) -> Tensor {
        self.window_tensor(0, self.frames)
    }
}

pub fn channels_for(format: FormatTag) -> usize {
    match format {
        FormatTag::Foa => 7,
        FormatTag::Mic => 10,
    }
}

/// Triangular HTK-mel filters over the `FFT_SIZE / 2 + 1` bins, `[band][bin]`.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = to_mel(nyquist);
    let edges: Vec<f64> = (0..MEL_BANDS + 2).map(|k| to_hz(top * k as f64 / (MEL_BANDS + 1) as f64)).collect();
    let bins = FFT_SIZE / 2 + 1;
    (0..MEL_BANDS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of feature frames for a clip of `len` samples.
pub fn frame_count(len: usize) -> usize {
    len / HOP
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    mel: Vec<Vec<f64>>,
}

impl Stft {
    fn new() -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        Self {
            fft: planner.plan_fft_forward(FFT_SIZE),
            ifft: planner.plan_fft_inverse(FFT_SIZE),
            window,
            mel: mel_filterbank(),
        }
    }

    /// One-sided spectra `[frame][bin]` of a channel. Frame `t` is centred on
    /// the middle of hop `t`, zero-padded at the edges.
    fn spectra(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let frames = frame_count(x.len());
        let offset = (WINDOW - HOP) / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
        (0..frames)
            .map(|t| {
                buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for (n, w) in self.window.iter().enumerate() {
                    let idx = (t * HOP + n) as isize - offset as isize;
                    if idx >= 0 && (idx as usize) < x.len() {
                        buf[n].re = x[idx as usize] * w;
                    }
                }
                self.fft.process(&mut buf);
                buf[..FFT_SIZE / 2 + 1].to_vec()
            })
            .collect()
    }

    fn mel_project(&self, per_bin: &[f64], out: &mut [f64]) {
        for (o, filt) in out.iter_mut().zip(&self.mel) {
            *o = filt.iter().zip(per_bin).map(|(w, v)| w * v).sum();
        }
    }

    fn log_mel(&self, spec: &[Vec<Complex64>], out: &mut [f64]) {
        let mut power = vec![0.0; FFT_SIZE / 2 + 1];
        for (t, frame) in spec.iter().enumerate() {
            for (p, x) in power.iter_mut().zip(frame) {
                *p = x.norm_sqr();
            }
            let dst = &mut out[t * MEL_BANDS..(t + 1) * MEL_BANDS];
            self.mel_project(&power, dst);
            dst.iter_mut().for_each(|v| *v = (*v + LOG_FLOOR).ln());
        }
    }

    /// PHAT-weighted cross-correlation of one frame pair, lags `-32..32`.
    /// Positive lags mean `b` lags behind `a`.
    fn gcc_phat(&self, a: &[Complex64], b: &[Complex64], out: &mut [f64]) {
        let half = FFT_SIZE / 2;
        let mut full = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
        for k in 0..=half {
            let r = a[k].conj() * b[k];
            let r = r / (r.norm() + LOG_FLOOR);
            full[k] = r;
            if k > 0 && k < half {
                full[FFT_SIZE - k] = r.conj();
            }
        }
        self.ifft.process(&mut full);
        let lags = GCC_LAGS / 2;
        for (i, o) in out.iter_mut().enumerate() {
            let lag = i as isize - lags as isize;
            *o = full[lag.rem_euclid(FFT_SIZE as isize) as usize].re / FFT_SIZE as f64;
        }
    }
}

fn check_clip(clip: &MultichannelClip, format: FormatTag) -> Result<()> {
    if clip.channels() != 4 {
        return Err(Error::Format(format!("expected 4 channels, got {}", clip.channels())));
    }
    if clip.format_tag != format {
        return Err(Error::Format(format!("expected a {format:?} clip, got {:?}", clip.format_tag)));
    }
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!("features need {SAMPLE_RATE} Hz audio, got {}", clip.sample_rate)));
    }
    Ok(())
}

/// Four log-mel channels followed by the mel-aggregated active intensity
/// (x, y, z), each bin normalized by the total energy.
pub fn extract_features_foa(clip: &MultichannelClip) -> Result<FeatureBlock> {
    check_clip(clip, FormatTag::Foa)?;
    let stft = Stft::new();
    let frames = frame_count(clip.len());
    let plane = frames * MEL_BANDS;
    let mut data = vec![0.0; 7 * plane];
    let spectra: Vec<_> = (0..4).map(|c| stft.spectra(clip.channel(c))).collect();
    for (c, spec) in spectra.iter().enumerate() {
        stft.log_mel(spec, &mut data[c * plane..(c + 1) * plane]);
    }
    // channel order W, Y, Z, X
    let (w, y, z, x) = (&spectra[0], &spectra[1], &spectra[2], &spectra[3]);
    let bins = FFT_SIZE / 2 + 1;
    let mut comp = vec![vec![0.0; bins]; 3];
    let mut mel = vec![0.0; MEL_BANDS];
    for t in 0..frames {
        for k in 0..bins {
            let wc = w[t][k].conj();
            let energy =
                w[t][k].norm_sqr() + (x[t][k].norm_sqr() + y[t][k].norm_sqr() + z[t][k].norm_sqr()) / 3.0 + LOG_FLOOR;
            comp[0][k] = (wc * x[t][k]).re / energy;
            comp[1][k] = (wc * y[t][k]).re / energy;
            comp[2][k] = (wc * z[t][k]).re / energy;
        }
        for (axis, per_bin) in comp.iter().enumerate() {
            stft.mel_project(per_bin, &mut mel);
            let base = (4 + axis) * plane + t * MEL_BANDS;
            data[base..base + MEL_BANDS].copy_from_slice(&mel);
        }
    }
    FeatureBlock::new(FormatTag::Foa, frames, data)
}

/// Four log-mel channels followed by GCC-PHAT curves of the six capsule pairs.
pub fn extract_features_mic(clip: &MultichannelClip) -> Result<FeatureBlock> {
    check_clip(clip, FormatTag::Mic)?;
    let stft = Stft::new();
    let frames = frame_count(clip.len());
    let plane = frames * MEL_BANDS;
    let mut data = vec![0.0; 10 * plane];
    let spectra: Vec<_> = (0..4).map(|c| stft.spectra(clip.channel(c))).collect();
    for (c, spec) in spectra.iter().enumerate() {
        stft.log_mel(spec, &mut data[c * plane..(c + 1) * plane]);
    }
    for (p, &(a, b)) in MIC_PAIRS.iter().enumerate() {
        for t in 0..frames {
            let base = (4 + p) * plane + t * MEL_BANDS;
            stft.gcc_phat(&spectra[a][t], &spectra[b][t], &mut data[base..base + GCC_LAGS]);
        }
    }
    FeatureBlock::new(FormatTag::Mic, frames, data)
}

pub fn extract_features(clip: &MultichannelClip) -> Result<FeatureBlock> {
    match clip.format_tag {
        FormatTag::Foa => extract_features_foa(clip),
        FormatTag::Mic => extract_features_mic(clip),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_mel_band_covers_a_bin() {
        let fb = mel_filterbank();
        assert_eq!(fb.len(), MEL_BANDS);
        assert!(fb.iter().all(|band| band.iter().any(|&w| w > 0.0)));
    }

    #[test]
    fn shapes_follow_the_format() {
        let foa = MultichannelClip::silence(SAMPLE_RATE, FormatTag::Foa, 4, 100 * HOP).unwrap();
        let f = extract_features_foa(&foa).unwrap();
        assert_eq!((f.channels(), f.frames(), f.bins()), (7, 100, 64));
        let mic = MultichannelClip::silence(SAMPLE_RATE, FormatTag::Mic, 4, 100 * HOP + 17).unwrap();
        let m = extract_features_mic(&mic).unwrap();
        assert_eq!((m.channels(), m.frames()), (10, 100));
        assert_eq!(m.to_tensor().shape(), &[10, 100, 64]);
    }

    #[test]
    fn silence_sits_at_the_floor() {
        let foa = MultichannelClip::silence(SAMPLE_RATE, FormatTag::Foa, 4, 20 * HOP).unwrap();
        let f = extract_features_foa(&foa).unwrap();
        let floor = LOG_FLOOR.ln();
        for t in 0..20 {
            for b in 0..64 {
                for c in 0..4 {
                    assert!((f.at(c, t, b) - floor).abs() < 1e-12);
                }
                for c in 4..7 {
                    assert_eq!(f.at(c, t, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn wrong_inputs_are_format_errors() {
        let three = MultichannelClip::silence(SAMPLE_RATE, FormatTag::Foa, 3, 1000).unwrap();
        assert!(matches!(extract_features_foa(&three), Err(Error::Format(_))));
        let mic = MultichannelClip::silence(SAMPLE_RATE, FormatTag::Mic, 4, 1000).unwrap();
        assert!(matches!(extract_features_foa(&mic), Err(Error::Format(_))));
        let slow = MultichannelClip::silence(16_000, FormatTag::Foa, 4, 1000).unwrap();
        assert!(matches!(extract_features_foa(&slow), Err(Error::Format(_))));
    }
}
