use std::path::Path;

use difftrack_core::geometry::DoaVector;
use difftrack_core::localizer::{extract_features_foa, extract_features_mic, GCC_LAGS, HOP, MEL_BANDS, SAMPLE_RATE};
use difftrack_core::scene::{random_direction, FormatTag, MultichannelClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Verdict};

const DIRECTIONS: usize = 20;
const MAX_ANGLE_DEG: f64 = 1.0;
const DELAYS: usize = 20;
const MAX_DELAY: i64 = 20;
const FRAMES: usize = 40;

fn noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Noiseless first-order plane wave, channels W, Y, Z, X.
fn plane_wave(rng: &mut ChaCha8Rng, u: DoaVector) -> MultichannelClip {
    let s = noise(rng, FRAMES * HOP);
    let ch = |k: f64| s.iter().map(|v| v * k).collect::<Vec<_>>();
    MultichannelClip::new(SAMPLE_RATE, FormatTag::Foa, vec![ch(1.0), ch(u.y), ch(u.z), ch(u.x)]).unwrap()
}

pub fn feature_oracles(_: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..DIRECTIONS {
        let u = random_direction(&mut rng);
        let f = extract_features_foa(&plane_wave(&mut rng, u)).map_err(|e| e.to_string())?;
        let mut v = [0.0; 3];
        for (axis, acc) in v.iter_mut().enumerate() {
            for t in 0..f.frames() {
                for b in 0..MEL_BANDS {
                    *acc += f.at(4 + axis, t, b);
                }
            }
        }
        let est = DoaVector::new(v[0], v[1], v[2]);
        let err = (est.dot(u) / est.norm()).clamp(-1.0, 1.0).acos().to_degrees();
        worst = worst.max(err);
        ensure(err <= MAX_ANGLE_DEG, || format!("intensity off by {err:.3} deg for {u:?}"))?;
    }

    for _ in 0..DELAYS {
        let delay = rng.gen_range(-MAX_DELAY..=MAX_DELAY);
        let len = FRAMES * HOP;
        let s = noise(&mut rng, len + 64);
        let a: Vec<f64> = s[32..32 + len].to_vec();
        let b: Vec<f64> = (0..len).map(|n| s[(32 + n as i64 - delay) as usize]).collect();
        let other = noise(&mut rng, len);
        let clip = MultichannelClip::new(SAMPLE_RATE, FormatTag::Mic, vec![a, b, other.clone(), other])
            .map_err(|e| e.to_string())?;
        let f = extract_features_mic(&clip).map_err(|e| e.to_string())?;
        // frames at the edges see zero padding on one side
        for t in 2..f.frames() - 2 {
            let best = (0..GCC_LAGS).max_by(|&x, &y| f.at(4, t, x).total_cmp(&f.at(4, t, y))).unwrap();
            let lag = best as i64 - (GCC_LAGS / 2) as i64;
            ensure(lag == delay, || format!("frame {t}: GCC peak at {lag}, delay {delay}"))?;
        }
    }
    Ok(format!(
        "intensity within {MAX_ANGLE_DEG} deg at {DIRECTIONS} directions (worst {worst:.4}), GCC peak exact for {DELAYS} delays"
    ))
}
