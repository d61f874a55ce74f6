use difftrack_autodiff::{Graph, ParamStore};

use super::features::{FeatureBlock, FRAMES_PER_LABEL};
use super::model::Localizer;
use crate::error::Result;
use crate::geometry::DoaVector;
use crate::scene::{SceneTimeline, TrackEntry};

pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 0.5;
/// Label frames per forward pass, matching training.
pub const DEFAULT_CHUNK_FRAMES: usize = 60;

/// Raw network outputs at label rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerPrediction {
    pub n_max: usize,
    /// `[frame][regressor]` direction as output by the tanh branch.
    pub doa: Vec<Vec<[f64; 3]>>,
    /// `[frame][regressor]` activity probability.
    pub activity: Vec<Vec<f64>>,
}

/// Contiguous frames in which one regressor stays active.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRun {
    pub start: usize,
    pub doas: Vec<DoaVector>,
}

impl TrajectoryRun {
    pub fn end(&self) -> usize {
        self.start + self.doas.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub frames: usize,
    /// Runs per regressor index, in frame order.
    pub runs: Vec<Vec<TrajectoryRun>>,
}

impl TrajectorySet {
    pub fn is_empty(&self) -> bool {
        self.runs.iter().all(|r| r.is_empty())
    }

    /// Timeline with the regressor index as track id.
    pub fn to_timeline(&self, frame_period: f64) -> SceneTimeline {
        let mut tl = SceneTimeline::empty(self.frames, frame_period, self.runs.len());
        for (k, runs) in self.runs.iter().enumerate() {
            for run in runs {
                for (i, &doa) in run.doas.iter().enumerate() {
                    tl.frames[run.start + i].push(TrackEntry { track_id: k as u32, doa });
                }
            }
        }
        tl
    }
}

impl LocalizerPrediction {
    pub fn frames(&self) -> usize {
        self.doa.len()
    }

    /// Gates each regressor by `threshold` and unit-normalizes what remains.
    /// A zero output vector cannot be normalized and is dropped.
    pub fn trajectories(&self, threshold: f64) -> TrajectorySet {
        let mut runs: Vec<Vec<TrajectoryRun>> = vec![Vec::new(); self.n_max];
        for (k, regressor_runs) in runs.iter_mut().enumerate() {
            let mut open: Option<TrajectoryRun> = None;
            for t in 0..self.frames() {
                let [x, y, z] = self.doa[t][k];
                let emitted = if self.activity[t][k] >= threshold { DoaVector::new(x, y, z).normalized() } else { None };
                match (emitted, open.as_mut()) {
                    (Some(v), Some(run)) => run.doas.push(v),
                    (Some(v), None) => open = Some(TrajectoryRun { start: t, doas: vec![v] }),
                    (None, _) => regressor_runs.extend(open.take()),
                }
            }
            regressor_runs.extend(open.take());
        }
        TrajectorySet { frames: self.frames(), runs }
    }
}

/// Runs the model over `features` (already normalized) in chunks of
/// `chunk_frames` label frames. Trailing feature frames that do not fill a
/// label frame are ignored.
pub fn predict(
    model: &Localizer,
    store: &ParamStore,
    features: &FeatureBlock,
    chunk_frames: usize,
) -> Result<LocalizerPrediction> {
    let n = model.config.n_max;
    let label_frames = features.frames() / FRAMES_PER_LABEL;
    let mut doa = Vec::with_capacity(label_frames);
    let mut activity = Vec::with_capacity(label_frames);
    let mut start = 0;
    while start < label_frames {
        let len = chunk_frames.max(1).min(label_frames - start);
        let mut g = Graph::new();
        let x = g.constant(features.window_tensor(start * FRAMES_PER_LABEL, len * FRAMES_PER_LABEL));
        let out = model.forward(&mut g, store, x)?;
        let (d, a) = (g.value(out.doa).data(), g.value(out.activity).data());
        for t in 0..len {
            doa.push((0..n).map(|k| [d[t * 3 * n + 3 * k], d[t * 3 * n + 3 * k + 1], d[t * 3 * n + 3 * k + 2]]).collect());
            activity.push(a[t * n..(t + 1) * n].to_vec());
        }
        start += len;
    }
    Ok(LocalizerPrediction { n_max: n, doa, activity })
}

/// Normalizes raw features, predicts and gates at `threshold`.
pub fn infer_trajectories(
    model: &Localizer,
    store: &ParamStore,
    raw_features: &FeatureBlock,
    threshold: f64,
    chunk_frames: usize,
) -> Result<TrajectorySet> {
    let features = model.normalize(store, raw_features)?;
    Ok(predict(model, store, &features, chunk_frames)?.trajectories(threshold))
}
