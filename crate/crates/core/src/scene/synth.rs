use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{scene_rng, SceneTimeline, TrackSpec};
use crate::error::{Error, Result};
use crate::geometry::DoaVector;

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MIC_ARRAY_RADIUS: f64 = 0.042;

/// Half-width in samples of the windowed-sinc fractional-delay kernel.
const SINC_HALF_WIDTH: isize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatTag {
    Foa,
    Mic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelClip {
    pub sample_rate: u32,
    pub format_tag: FormatTag,
    samples: Vec<Vec<f64>>,
}

impl MultichannelClip {
    pub fn new(sample_rate: u32, format_tag: FormatTag, samples: Vec<Vec<f64>>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Argument("clip needs at least one channel".into()));
        }
        let len = samples[0].len();
        if samples.iter().any(|c| c.len() != len) {
            return Err(Error::Argument("channels differ in length".into()));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite sample".into()));
        }
        Ok(Self { sample_rate, format_tag, samples })
    }

    pub fn silence(sample_rate: u32, format_tag: FormatTag, channels: usize, len: usize) -> Result<Self> {
        Self::new(sample_rate, format_tag, vec![vec![0.0; len]; channels])
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c]
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Copy of the samples in `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> MultichannelClip {
        let samples = self
            .samples
            .iter()
            .map(|c| (start..start + len).map(|i| c.get(i).copied().unwrap_or(0.0)).collect())
            .collect();
        MultichannelClip { sample_rate: self.sample_rate, format_tag: self.format_tag, samples }
    }

    pub(crate) fn add_assign(&mut self, other: &MultichannelClip) {
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn energy(&self) -> f64 {
        self.samples.iter().flatten().map(|v| v * v).sum()
    }
}

/// Per-sample gain and direction of one source, interpolating the
/// per-frame envelope linearly between frame centres.
struct SourceRender<'a> {
    spec: &'a TrackSpec,
    frame_period: f64,
}

impl SourceRender<'_> {
    fn gain(&self, elapsed: f64) -> f64 {
        let env = &self.spec.envelope;
        if env.is_empty() || elapsed < 0.0 || elapsed >= self.spec.duration {
            return 0.0;
        }
        let pos = elapsed / self.frame_period - 0.5;
        if pos <= 0.0 {
            return env[0];
        }
        let i = pos.floor() as usize;
        if i + 1 >= env.len() {
            return env[env.len() - 1];
        }
        let frac = pos - i as f64;
        env[i] * (1.0 - frac) + env[i + 1] * frac
    }

    fn span(&self, sample_rate: f64, len: usize) -> (usize, usize) {
        let start = (self.spec.onset * sample_rate).round() as usize;
        let end = ((self.spec.onset + self.spec.duration) * sample_rate).round() as usize;
        (start.min(len), end.min(len))
    }
}

fn check_rate(sample_rate: u32) -> Result<f64> {
    if sample_rate == 0 {
        return Err(Error::Argument("sample rate must be positive".into()));
    }
    Ok(sample_rate as f64)
}

fn clip_len(timeline: &SceneTimeline, sample_rate: f64) -> usize {
    (timeline.n_frames() as f64 * timeline.frame_period * sample_rate).round() as usize
}

/// Anechoic first-order Ambisonics (ACN/SN3D) rendering of the scene's
/// sources as white-noise bursts, plus isotropic diffuse noise at `snr_db`
/// relative to the total source energy (`f64::INFINITY` disables noise).
pub fn synthesize_foa(
    timeline: &SceneTimeline,
    specs: &[TrackSpec],
    sample_rate: u32,
    snr_db: f64,
    seed: u64,
) -> Result<MultichannelClip> {
    let fs = check_rate(sample_rate)?;
    timeline.validate()?;
    let len = clip_len(timeline, fs);
    let mut out = vec![vec![0.0; len]; 4];
    for (k, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut rng = scene_rng(seed, 1 + k as u64);
        let render = SourceRender { spec, frame_period: timeline.frame_period };
        let (start, end) = render.span(fs, len);
        for n in start..end {
            let elapsed = n as f64 / fs - spec.onset;
            let s = render.gain(elapsed) * rng.sample::<f64, _>(StandardNormal);
            let u = spec.doa_at(elapsed).normalized().unwrap_or(spec.start_doa);
            out[0][n] += s;
            out[1][n] += u.y * s;
            out[2][n] += u.z * s;
            out[3][n] += u.x * s;
        }
    }
    let mut clip = MultichannelClip::new(sample_rate, FormatTag::Foa, out)?;
    add_diffuse_noise(&mut clip, snr_db, seed, &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])?;
    Ok(clip)
}

/// Adds independent Gaussian noise with per-channel variance ratios
/// `shape`, scaled so that source energy / noise energy = `snr_db`.
fn add_diffuse_noise(clip: &mut MultichannelClip, snr_db: f64, seed: u64, shape: &[f64]) -> Result<()> {
    if snr_db.is_nan() {
        return Err(Error::Argument("snr_db is NaN".into()));
    }
    if snr_db == f64::INFINITY || clip.is_empty() {
        return Ok(());
    }
    let signal = clip.energy();
    if signal == 0.0 {
        return Ok(());
    }
    let noise_energy = signal / 10f64.powf(snr_db / 10.0);
    let total_shape: f64 = shape.iter().sum();
    let unit_var = noise_energy / (clip.len() as f64 * total_shape);
    let mut rng = scene_rng(seed, 0);
    for (c, chan) in clip.samples.iter_mut().enumerate() {
        let sd = (unit_var * shape[c]).sqrt();
        for v in chan.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(())
}

/// Capsule positions (metres) of the tetrahedral microphone array.
pub fn mic_positions() -> [DoaVector; 4] {
    [(45.0, 35.0), (-45.0, -35.0), (135.0, -35.0), (-135.0, 35.0)]
        .map(|(az, el)| DoaVector::from_az_el_deg(az, el).scaled(MIC_ARRAY_RADIUS))
}

fn windowed_sinc(x: f64) -> f64 {
    let half = SINC_HALF_WIDTH as f64;
    if x.abs() >= half {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (std::f64::consts::PI * x / half).cos());
    let sinc = if x.abs() < 1e-12 { 1.0 } else { (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) };
    sinc * window
}

/// Anechoic rendering at the four capsules of an omnidirectional
/// tetrahedral array. A plane wave from `u` reaches capsule `p` earlier by
/// `p·u / c`; fractional delays use a Hann-windowed sinc.
pub fn synthesize_mic(
    timeline: &SceneTimeline,
    specs: &[TrackSpec],
    sample_rate: u32,
    snr_db: f64,
    seed: u64,
) -> Result<MultichannelClip> {
    let fs = check_rate(sample_rate)?;
    timeline.validate()?;
    let len = clip_len(timeline, fs);
    let mics = mic_positions();
    let mut out = vec![vec![0.0; len]; 4];
    for (k, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut rng = scene_rng(seed, 1 + k as u64);
        let render = SourceRender { spec, frame_period: timeline.frame_period };
        let (start, end) = render.span(fs, len);
        let dry: Vec<f64> = (start..end)
            .map(|n| render.gain(n as f64 / fs - spec.onset) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if dry.is_empty() {
            continue;
        }
        let lo = start.saturating_sub(SINC_HALF_WIDTH as usize);
        let hi = (end + SINC_HALF_WIDTH as usize).min(len);
        for n in lo..hi {
            let elapsed = (n as f64 / fs - spec.onset).clamp(0.0, spec.duration);
            let u = spec.doa_at(elapsed).normalized().unwrap_or(spec.start_doa);
            for (c, p) in mics.iter().enumerate() {
                // position in the dry signal that arrives at this capsule now
                let src = n as f64 + p.dot(u) / SPEED_OF_SOUND * fs - start as f64;
                let centre = src.round() as isize;
                let mut acc = 0.0;
                for m in (centre - SINC_HALF_WIDTH)..=(centre + SINC_HALF_WIDTH) {
                    if m >= 0 && (m as usize) < dry.len() {
                        acc += dry[m as usize] * windowed_sinc(src - m as f64);
                    }
                }
                out[c][n] += acc;
            }
        }
    }
    let mut clip = MultichannelClip::new(sample_rate, FormatTag::Mic, out)?;
    add_diffuse_noise(&mut clip, snr_db, seed, &[1.0; 4])?;
    Ok(clip)
}

pub fn write_wav(path: &Path, clip: &MultichannelClip, format: SampleFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: clip.channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for n in 0..clip.len() {
        for c in 0..clip.channels() {
            let v = clip.samples[c][n];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
                    writer.write_sample(q)?;
                }
                SampleFormat::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path, format_tag: FormatTag) -> Result<MultichannelClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?
        }
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => return Err(Error::Format(format!("unsupported wav sample format {fmt:?}/{bits}"))),
    };
    if channels == 0 || interleaved.len() % channels != 0 {
        return Err(Error::Format("wav sample count does not match channel count".into()));
    }
    let mut samples = vec![Vec::with_capacity(interleaved.len() / channels); channels];
    for frame in interleaved.chunks(channels) {
        for (c, v) in frame.iter().enumerate() {
            samples[c].push(*v);
        }
    }
    MultichannelClip::new(spec.sample_rate, format_tag, samples)
}
