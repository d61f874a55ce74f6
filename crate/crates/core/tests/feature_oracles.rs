use difftrack_core::geometry::DoaVector;
use difftrack_core::localizer::{
    extract_features_foa, extract_features_mic, FeatureBlock, GCC_LAGS, HOP, MEL_BANDS, SAMPLE_RATE,
};
use difftrack_core::scene::{
    generate_scene, random_direction, synthesize_foa, FormatTag, Motion, MultichannelClip, SceneGenConfig,
    SceneTimeline, TrackEntry, TrackSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FRAMES: usize = 40;

fn noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// First-order plane-wave encoding written out independently of the synthesizer.
fn plane_wave(rng: &mut ChaCha8Rng, doa: DoaVector) -> MultichannelClip {
    let s = noise(rng, FRAMES * HOP);
    let gain = |k: f64| s.iter().map(|v| v * k).collect::<Vec<_>>();
    let samples = vec![gain(1.0), gain(doa.y), gain(doa.z), gain(doa.x)];
    MultichannelClip::new(SAMPLE_RATE, FormatTag::Foa, samples).unwrap()
}

fn mean_intensity(f: &FeatureBlock) -> DoaVector {
    let mut acc = [0.0; 3];
    for (axis, a) in acc.iter_mut().enumerate() {
        for t in 0..f.frames() {
            for b in 0..MEL_BANDS {
                *a += f.at(4 + axis, t, b);
            }
        }
    }
    DoaVector::new(acc[0], acc[1], acc[2])
}

fn angle_deg(a: DoaVector, b: DoaVector) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn intensity_points_along_the_plane_wave() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut directions = vec![DoaVector::from_az_el_deg(0.0, 0.0), DoaVector::from_az_el_deg(90.0, 0.0)];
    directions.extend((0..20).map(|_| random_direction(&mut rng)));
    for doa in directions {
        let f = extract_features_foa(&plane_wave(&mut rng, doa)).unwrap();
        let err = angle_deg(mean_intensity(&f), doa);
        assert!(err < 1.0, "direction {doa:?} off by {err} degrees");
    }
}

#[test]
fn synthesized_static_source_agrees_with_the_oracle() {
    let doa = DoaVector::from_az_el_deg(-120.0, 35.0);
    let mut tl = SceneTimeline::empty(8, 0.1, 1);
    for f in &mut tl.frames {
        f.push(TrackEntry { track_id: 0, doa });
    }
    let spec = TrackSpec {
        track_id: 0,
        onset: 0.0,
        duration: 0.8,
        start_doa: doa,
        motion: Motion::Static,
        envelope: vec![1.0; 8],
    };
    let clip = synthesize_foa(&tl, &[spec], SAMPLE_RATE, f64::INFINITY, 3).unwrap();
    let f = extract_features_foa(&clip).unwrap();
    assert!(angle_deg(mean_intensity(&f), doa) < 1.0);
}

#[test]
fn foa_features_are_finite_on_a_generated_scene() {
    let cfg = SceneGenConfig { duration: 4.0, ..SceneGenConfig::default() };
    let (tl, specs) = generate_scene(&cfg, 9).unwrap();
    let clip = synthesize_foa(&tl, &specs, SAMPLE_RATE, 20.0, 9).unwrap();
    let f = extract_features_foa(&clip).unwrap();
    assert_eq!((f.channels(), f.frames()), (7, 200));
    assert!(f.data().iter().all(|v| v.is_finite()));
}

fn delayed_pair(rng: &mut ChaCha8Rng, delay: i64) -> MultichannelClip {
    let len = FRAMES * HOP;
    let s = noise(rng, len + 64);
    let base: Vec<f64> = s[32..32 + len].to_vec();
    let shifted: Vec<f64> = (0..len).map(|n| s[(32 + n as i64 - delay) as usize]).collect();
    let other = noise(rng, len);
    let samples = vec![base, shifted, other.clone(), other];
    MultichannelClip::new(SAMPLE_RATE, FormatTag::Mic, samples).unwrap()
}

/// Peak lag of the first GCC channel in frame `t`.
fn peak_lag(f: &FeatureBlock, t: usize) -> i64 {
    let curve: Vec<f64> = (0..GCC_LAGS).map(|b| f.at(4, t, b)).collect();
    let best = (0..GCC_LAGS).max_by(|&a, &b| curve[a].total_cmp(&curve[b])).unwrap();
    best as i64 - (GCC_LAGS / 2) as i64
}

/// Lag maximizing the plain time-domain cross-correlation of the two inputs.
fn direct_xcorr_lag(a: &[f64], b: &[f64], max_lag: i64) -> i64 {
    (-max_lag..=max_lag)
        .max_by(|&x, &y| {
            let c = |lag: i64| -> f64 {
                (0..a.len() as i64)
                    .filter(|&n| n + lag >= 0 && n + lag < b.len() as i64)
                    .map(|n| a[n as usize] * b[(n + lag) as usize])
                    .sum()
            };
            c(x).total_cmp(&c(y))
        })
        .unwrap()
}

#[test]
fn gcc_peak_sits_at_the_integer_delay() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut delays: Vec<i64> = vec![5, 0];
    delays.extend((0..20).map(|_| rng.gen_range(-20..=20)));
    for delay in delays {
        let clip = delayed_pair(&mut rng, delay);
        assert_eq!(direct_xcorr_lag(clip.channel(0), clip.channel(1), 25), delay);
        let f = extract_features_mic(&clip).unwrap();
        for t in 2..f.frames() - 2 {
            assert_eq!(peak_lag(&f, t), delay, "frame {t}");
        }
    }
}

#[test]
fn identical_channels_peak_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = noise(&mut rng, FRAMES * HOP);
    let clip = MultichannelClip::new(SAMPLE_RATE, FormatTag::Mic, vec![s.clone(); 4]).unwrap();
    let f = extract_features_mic(&clip).unwrap();
    for c in 4..10 {
        for t in 1..f.frames() - 1 {
            let best = (0..GCC_LAGS).max_by(|&a, &b| f.at(c, t, a).total_cmp(&f.at(c, t, b))).unwrap();
            assert_eq!(best, GCC_LAGS / 2);
        }
    }
}

/// Peak of the clip-averaged curve in units of the curve's own spread.
fn peak_score(f: &FeatureBlock) -> f64 {
    let frames = f.frames() - 2;
    let curve: Vec<f64> =
        (0..GCC_LAGS).map(|b| (1..=frames).map(|t| f.at(4, t, b)).sum::<f64>() / frames as f64).collect();
    let mean = curve.iter().sum::<f64>() / GCC_LAGS as f64;
    let std = (curve.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / GCC_LAGS as f64).sqrt();
    curve.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max) / std
}

#[test]
fn independent_noise_has_no_dominant_lag() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exceed = 0;
    let mut scores = Vec::new();
    for _ in 0..100 {
        let len = FRAMES * HOP;
        let samples = (0..4).map(|_| noise(&mut rng, len)).collect();
        let clip = MultichannelClip::new(SAMPLE_RATE, FormatTag::Mic, samples).unwrap();
        let s = peak_score(&extract_features_mic(&clip).unwrap());
        exceed += (s > 3.0) as usize;
        scores.push(s);
    }
    scores.sort_by(f64::total_cmp);
    // the max of 64 roughly Gaussian values passes 3 sigma in about a fifth of trials
    assert!(exceed <= 35, "{exceed} of 100 null trials exceed 3 sigma");
    assert!(scores[50] < 3.0);
    for _ in 0..20 {
        let delay = rng.gen_range(-20..=20);
        assert!(peak_score(&extract_features_mic(&delayed_pair(&mut rng, delay)).unwrap()) > 6.0);
    }
}
