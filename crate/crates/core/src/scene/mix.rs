use std::collections::BTreeMap;

use super::{MultichannelClip, SceneTimeline, TrackEntry};
use crate::error::{Error, Result};

/// Sums two recordings and merges their annotations. Tracks of `a` keep
/// their ids; tracks of `b` are renumbered after them. Fails when any frame
/// of the union exceeds the overlap budget of `a`.
pub fn mix_scenes(
    a: (&MultichannelClip, &SceneTimeline),
    b: (&MultichannelClip, &SceneTimeline),
) -> Result<(MultichannelClip, SceneTimeline)> {
    let (clip_a, tl_a) = a;
    let (clip_b, tl_b) = b;
    if clip_a.sample_rate != clip_b.sample_rate
        || clip_a.format_tag != clip_b.format_tag
        || clip_a.channels() != clip_b.channels()
        || clip_a.len() != clip_b.len()
    {
        return Err(Error::Augmentation("clips differ in rate, format, channels or length".into()));
    }
    if tl_a.n_frames() != tl_b.n_frames() || (tl_a.frame_period - tl_b.frame_period).abs() > 1e-12 {
        return Err(Error::Augmentation("timelines differ in length or frame period".into()));
    }
    let n_max = tl_a.n_max;
    let offset = tl_a.track_ids().last().map_or(0, |&m| m + 1);
    let remap: BTreeMap<u32, u32> =
        tl_b.track_ids().into_iter().enumerate().map(|(i, id)| (id, offset + i as u32)).collect();

    let mut timeline = tl_a.clone();
    for (t, (dst, src)) in timeline.frames.iter_mut().zip(&tl_b.frames).enumerate() {
        dst.extend(src.iter().map(|e| TrackEntry { track_id: remap[&e.track_id], doa: e.doa }));
        if dst.len() > n_max {
            return Err(Error::Augmentation(format!(
                "frame {t} would hold {} sources, more than {n_max}",
                dst.len()
            )));
        }
        dst.sort_by_key(|e| e.track_id);
    }
    let mut clip = clip_a.clone();
    clip.add_assign(clip_b);
    Ok((clip, timeline))
}
