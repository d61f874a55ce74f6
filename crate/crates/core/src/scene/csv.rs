use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{SceneTimeline, TrackEntry};
use crate::error::{Error, Result};
use crate::geometry::DoaVector;

/// Serialises to `frame_index,track_id,azimuth_deg,elevation_deg` rows
/// without a header, frames ascending and tracks by id.
pub fn timeline_to_csv_string(timeline: &SceneTimeline) -> String {
    let mut out = String::new();
    for (t, frame) in timeline.frames.iter().enumerate() {
        let mut entries = frame.clone();
        entries.sort_by_key(|e| e.track_id);
        for e in entries {
            let (az, el) = e.doa.to_az_el_deg();
            let _ = writeln!(out, "{t},{},{az:.6},{el:.6}", e.track_id);
        }
    }
    out
}

pub fn write_timeline_csv(path: &Path, timeline: &SceneTimeline) -> Result<()> {
    std::fs::write(path, timeline_to_csv_string(timeline))?;
    Ok(())
}

/// Parses 4-column rows (`frame,track,azimuth,elevation`) or 5-column
/// challenge metadata rows (`frame,class,track,azimuth,elevation`). In the
/// latter each distinct (class, track) pair becomes one track id. A leading
/// header line is skipped. The timeline spans at least `min_frames` frames
/// and `n_max` is the largest per-frame overlap.
pub fn timeline_from_csv_str(text: &str, frame_period: f64, min_frames: usize) -> Result<SceneTimeline> {
    let mut rows: Vec<(usize, u32, DoaVector)> = Vec::new();
    let mut pair_ids: BTreeMap<(i64, i64), u32> = BTreeMap::new();
    let mut columns: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        let bad = || Error::Format(format!("line {}: cannot parse '{line}'", lineno + 1));
        match columns {
            None => columns = Some(fields.len()),
            Some(n) if n != fields.len() => return Err(bad()),
            _ => {}
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad());
        let (frame, track, az, el) = match fields.len() {
            4 => {
                let track = int(fields[1])?;
                if track < 0 {
                    return Err(bad());
                }
                (int(fields[0])?, track as u32, num(fields[2])?, num(fields[3])?)
            }
            5 => {
                let key = (int(fields[1])?, int(fields[2])?);
                let next = pair_ids.len() as u32;
                let id = *pair_ids.entry(key).or_insert(next);
                (int(fields[0])?, id, num(fields[3])?, num(fields[4])?)
            }
            _ => return Err(bad()),
        };
        if frame < 0 || !az.is_finite() || !el.is_finite() {
            return Err(bad());
        }
        rows.push((frame as usize, track, DoaVector::from_az_el_deg(az, el)));
    }
    let n_frames = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0).max(min_frames);
    let mut timeline = SceneTimeline::empty(n_frames, frame_period, 0);
    for (frame, track_id, doa) in rows {
        timeline.frames[frame].push(TrackEntry { track_id, doa });
    }
    for frame in &mut timeline.frames {
        frame.sort_by_key(|e| e.track_id);
    }
    timeline.n_max = timeline.max_overlap().max(1);
    timeline.validate()?;
    Ok(timeline)
}

pub fn read_timeline_csv(path: &Path, frame_period: f64, min_frames: usize) -> Result<SceneTimeline> {
    let text = std::fs::read_to_string(path)?;
    timeline_from_csv_str(&text, frame_period, min_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneGenConfig};

    #[test]
    fn roundtrip_within_print_precision() {
        let (tl, _) = generate_scene(&SceneGenConfig { duration: 20.0, ..Default::default() }, 8).unwrap();
        let text = timeline_to_csv_string(&tl);
        let back = timeline_from_csv_str(&text, 0.1, tl.n_frames()).unwrap();
        assert_eq!(back.n_frames(), tl.n_frames());
        for (a, b) in tl.frames.iter().zip(&back.frames) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.track_id, y.track_id);
                assert!(x.doa.sub(y.doa).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn challenge_rows_map_class_track_pairs() {
        let text = "0,3,0,10,0\n0,5,0,-20,10\n1,3,0,11,0\n2,3,1,50,5\n";
        let tl = timeline_from_csv_str(text, 0.1, 0).unwrap();
        assert_eq!(tl.n_frames(), 3);
        assert_eq!(tl.frames[0].len(), 2);
        assert_eq!(tl.frames[0][0].track_id, tl.frames[1][0].track_id);
        assert_ne!(tl.frames[2][0].track_id, tl.frames[1][0].track_id);
        assert_eq!(tl.n_max, 2);
    }

    #[test]
    fn header_is_skipped_and_garbage_rejected() {
        let tl = timeline_from_csv_str("frame,track,azi,ele\n4,0,90,0\n", 0.1, 0).unwrap();
        assert_eq!(tl.n_frames(), 5);
        assert!(timeline_from_csv_str("0,0,90,0\n1,x,2,3\n", 0.1, 0).is_err());
        assert!(timeline_from_csv_str("0,0,90\n", 0.1, 0).is_err());
    }
}
