use std::fmt;
use std::str::FromStr;

use difftrack_autodiff::{Adam, AdamConfig, Gradients, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureBlock, FRAMES_PER_LABEL, MEL_BANDS};
use super::infer::{predict, DEFAULT_ACTIVITY_THRESHOLD, DEFAULT_CHUNK_FRAMES};
use super::model::Localizer;
use crate::error::{Error, Result};
use crate::geometry::DoaVector;
use crate::hnet::Hnet;
use crate::loss::{
    activity_loss, combined_loss, derive_activity_reference, distance_tensor, dmota_loss, dmotp_loss, mse_loss,
    FpMode, FrameBatch, LossWeights,
};
use crate::metrics::{EvalOptions, MotAccumulator, MotReport};
use crate::scene::SceneTimeline;

/// Raw (un-normalized) features with the matching reference timeline.
#[derive(Debug, Clone)]
pub struct LabelledClip {
    pub features: FeatureBlock,
    pub timeline: SceneTimeline,
}

impl LabelledClip {
    pub fn new(features: FeatureBlock, timeline: SceneTimeline) -> Self {
        Self { features, timeline }
    }

    /// Label frames covered by both the features and the timeline.
    pub fn label_frames(&self) -> usize {
        (self.features.frames() / FRAMES_PER_LABEL).min(self.timeline.n_frames())
    }
}

/// Training objective of the localizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// dMOTP, dMOTA and activity terms through a frozen association network.
    Tracking { weights: LossWeights, gamma: f64, fp_mode: FpMode },
    /// Regressor `k` regresses the `k`-th listed reference; the activity
    /// branch learns which slots are filled.
    Mse,
}

impl Objective {
    pub fn tracking(weights: LossWeights) -> Self {
        Objective::Tracking { weights, gamma: 1.0, fp_mode: FpMode::default() }
    }

    pub fn needs_hnet(&self) -> bool {
        matches!(self, Objective::Tracking { .. })
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Mse => write!(f, "mse"),
            Objective::Tracking { weights, .. } => write!(f, "{weights}"),
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    /// `mse` or three comma-separated weights for dMOTP, dMOTA and activity.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("mse") {
            return Ok(Objective::Mse);
        }
        Ok(Objective::tracking(LossWeights::parse(s)?))
    }
}

#[derive(Debug, Clone)]
pub struct LocalizerTrainConfig {
    pub objective: Objective,
    pub max_epochs: usize,
    /// Chunks per optimizer step.
    pub batch_chunks: usize,
    /// Label frames per chunk.
    pub chunk_frames: usize,
    pub adam: AdamConfig,
    /// Converged once the best loss of the last `plateau_window` epochs
    /// improves on the earlier best by less than `plateau_tolerance` (relative).
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub activity_threshold: f64,
    pub seed: u64,
}

impl Default for LocalizerTrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::tracking(LossWeights::FULL),
            max_epochs: 60,
            batch_chunks: 4,
            chunk_frames: DEFAULT_CHUNK_FRAMES,
            adam: AdamConfig::default(),
            plateau_window: 10,
            plateau_tolerance: 0.01,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            seed: 0,
        }
    }
}

/// One row of the training curve. Components that the objective does not
/// use are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerEpoch {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_dmotp: f64,
    pub loss_dmota: f64,
    pub loss_act: f64,
    pub val: Option<MotReport>,
}

pub const CURVE_HEADER: &str = "epoch,loss_total,loss_dmotp,loss_dmota,loss_act,val_le_deg,val_lr,val_mota,val_ids";

impl LocalizerEpoch {
    pub fn csv_row(&self) -> String {
        let (le, lr, mota, ids) = match &self.val {
            Some(r) => (r.le_deg, r.lr, r.mota, r.ids.to_string()),
            None => (f64::NAN, f64::NAN, f64::NAN, String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.loss_total, self.loss_dmotp, self.loss_dmota, self.loss_act, le, lr, mota, ids
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<LocalizerEpoch>,
    pub converged: bool,
}

struct Chunk {
    x: Tensor,
    refs: Vec<Vec<(u32, DoaVector)>>,
}

fn make_chunks(model: &Localizer, store: &ParamStore, clips: &[LabelledClip], chunk_frames: usize) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for clip in clips {
        let features = model.normalize(store, &clip.features)?;
        let total = clip.label_frames();
        let mut start = 0;
        while start < total {
            let len = chunk_frames.min(total - start);
            let refs = clip.timeline.frames[start..start + len]
                .iter()
                .map(|f| f.iter().map(|e| (e.track_id, e.doa)).collect())
                .collect();
            out.push(Chunk { x: features.window_tensor(start * FRAMES_PER_LABEL, len * FRAMES_PER_LABEL), refs });
            start += len;
        }
    }
    Ok(out)
}

/// Per-(channel, band) mean and standard deviation over every frame of `clips`.
pub fn feature_statistics(clips: &[LabelledClip]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = clips.first() else {
        return Err(Error::Data("no training clips".into()));
    };
    let k = first.features.channels() * MEL_BANDS;
    let (mut sum, mut sq, mut count) = (vec![0.0; k], vec![0.0; k], 0usize);
    for clip in clips {
        let f = &clip.features;
        if f.channels() * MEL_BANDS != k {
            return Err(Error::Data("training clips mix feature formats".into()));
        }
        for c in 0..f.channels() {
            for t in 0..f.frames() {
                for b in 0..MEL_BANDS {
                    let v = f.at(c, t, b);
                    sum[c * MEL_BANDS + b] += v;
                    sq[c * MEL_BANDS + b] += v * v;
                }
            }
        }
        count += f.frames();
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
    Ok((mean, std))
}

/// Scalar handles of one batch loss.
pub struct BatchLoss {
    pub total: Var,
    pub dmotp: Option<Var>,
    pub dmota: Option<Var>,
    pub activity: Var,
}

/// Builds the objective on the concatenated outputs of `chunks`, each a
/// normalized `[C, 5 L, 64]` tensor with `L` frames of references.
pub fn batch_loss(
    g: &mut Graph,
    model: &Localizer,
    store: &ParamStore,
    hnet: Option<(&Hnet, &ParamStore)>,
    objective: Objective,
    chunks: &[(Var, &[Vec<(u32, DoaVector)>])],
) -> Result<BatchLoss> {
    let n = model.config.n_max;
    let mut doas = Vec::with_capacity(chunks.len());
    let mut acts = Vec::with_capacity(chunks.len());
    let mut refs = Vec::new();
    let mut lens = Vec::with_capacity(chunks.len());
    for &(x, chunk_refs) in chunks {
        let out = model.forward(g, store, x)?;
        if g.shape(out.doa)[0] != chunk_refs.len() {
            return Err(Error::Argument(format!(
                "{} output frames for {} reference frames",
                g.shape(out.doa)[0],
                chunk_refs.len()
            )));
        }
        doas.push(out.doa);
        acts.push(out.activity);
        refs.extend_from_slice(chunk_refs);
        lens.push(chunk_refs.len());
    }
    let doa = g.concat(&doas, 0)?;
    let act = g.concat(&acts, 0)?;
    let frames = refs.len();
    let batch = FrameBatch::new(n, refs, vec![n; frames], lens)?;
    match objective {
        Objective::Tracking { weights, gamma, fp_mode } => {
            let (hnet, hstore) = hnet.ok_or_else(|| Error::Config("tracking losses need an association network".into()))?;
            let d = distance_tensor(g, &batch, doa)?;
            let assoc = hnet.forward(g, hstore, d)?.assoc;
            let dmotp = dmotp_loss(g, &batch, d, assoc)?;
            let dmota = dmota_loss(g, &batch, assoc, act, gamma, fp_mode)?.loss;
            let reference = derive_activity_reference(g.value(assoc))?;
            let activity = activity_loss(g, act, &reference)?;
            let total = combined_loss(g, weights, dmotp, dmota, activity)?;
            Ok(BatchLoss { total, dmotp: Some(dmotp), dmota: Some(dmota), activity })
        }
        Objective::Mse => {
            let mse = mse_loss(g, &batch, doa)?;
            let mut slots = Tensor::zeros(&[frames, n]);
            for (f, r) in batch.refs().iter().enumerate() {
                for k in 0..r.len().min(n) {
                    slots.data_mut()[f * n + k] = 1.0;
                }
            }
            let activity = activity_loss(g, act, &slots)?;
            let total = g.add(mse, activity)?;
            Ok(BatchLoss { total, dmotp: None, dmota: None, activity })
        }
    }
}

/// Validation report of the current model over `clips`.
pub fn evaluate_localizer(
    model: &Localizer,
    store: &ParamStore,
    clips: &[LabelledClip],
    threshold: f64,
    chunk_frames: usize,
) -> Result<MotReport> {
    let mut acc = MotAccumulator::new(EvalOptions::default());
    for clip in clips {
        let features = model.normalize(store, &clip.features)?;
        let frames = clip.label_frames();
        let pred = predict(model, store, &features, chunk_frames)?.trajectories(threshold);
        let mut preds = pred.to_timeline(clip.timeline.frame_period);
        preds.frames.truncate(frames);
        let mut refs = clip.timeline.clone();
        refs.frames.truncate(frames);
        acc.add_sequence(&refs, &preds)?;
    }
    Ok(acc.report())
}

fn plateaued(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || losses.len() <= window {
        return false;
    }
    let (earlier, recent) = losses.split_at(losses.len() - window);
    let best_before = earlier.iter().cloned().fold(f64::INFINITY, f64::min);
    let best_recent = recent.iter().cloned().fold(f64::INFINITY, f64::min);
    best_recent > best_before - tolerance * best_before.abs()
}

/// Trains the localizer until the loss plateaus or `max_epochs` is reached.
/// Feature statistics are fitted on `train` first. The association network,
/// when given, is used read-only.
pub fn train_localizer(
    model: &Localizer,
    store: &mut ParamStore,
    train: &[LabelledClip],
    val: &[LabelledClip],
    hnet: Option<(&Hnet, &ParamStore)>,
    config: &LocalizerTrainConfig,
    mut on_epoch: impl FnMut(&LocalizerEpoch),
) -> Result<TrainOutcome> {
    let frozen = match (config.objective.needs_hnet(), hnet) {
        (true, None) => return Err(Error::Config("tracking losses need an association network".into())),
        (true, Some((h, hs))) => {
            if h.config.n != model.config.n_max {
                return Err(Error::Config(format!(
                    "association network handles {} sources, the localizer {}",
                    h.config.n, model.config.n_max
                )));
            }
            let mut hs = hs.clone();
            hs.set_frozen(true);
            Some((h, hs))
        }
        (false, _) => None,
    };
    if config.batch_chunks == 0 || config.chunk_frames == 0 {
        return Err(Error::Config("batch and chunk sizes must be positive".into()));
    }
    let (mean, std) = feature_statistics(train)?;
    model.set_normalization(store, &mean, &std)?;
    let chunks = make_chunks(model, store, train, config.chunk_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(store, config.adam);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut epochs = Vec::new();
    let mut losses = Vec::new();
    let mut converged = false;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut weight = 0.0;
        for batch in order.chunks(config.batch_chunks) {
            let mut g = Graph::new();
            let inputs: Vec<(Var, &[Vec<(u32, DoaVector)>])> =
                batch.iter().map(|&i| (g.constant(chunks[i].x.clone()), chunks[i].refs.as_slice())).collect();
            let l = batch_loss(&mut g, model, store, frozen.as_ref().map(|(h, s)| (*h, s)), config.objective, &inputs)?;
            let total = g.value(l.total).item();
            if !total.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss in epoch {epoch}")));
            }
            g.backward(l.total)?;
            let mut grads = Gradients::zeros_like(store);
            grads.accumulate(&g.param_grads()?);
            if !grads.all_finite() {
                return Err(Error::Divergence(format!("non-finite gradient in epoch {epoch}")));
            }
            adam.step(store, &grads);
            let w = batch.len() as f64;
            let item = |v: Option<Var>| v.map_or(f64::NAN, |v| g.value(v).item());
            sums[0] += total * w;
            sums[1] += item(l.dmotp) * w;
            sums[2] += item(l.dmota) * w;
            sums[3] += g.value(l.activity).item() * w;
            weight += w;
        }
        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate_localizer(model, store, val, config.activity_threshold, config.chunk_frames)?)
        };
        let log = LocalizerEpoch {
            epoch,
            loss_total: sums[0] / weight,
            loss_dmotp: sums[1] / weight,
            loss_dmota: sums[2] / weight,
            loss_act: sums[3] / weight,
            val: val_report,
        };
        losses.push(log.loss_total);
        on_epoch(&log);
        epochs.push(log);
        if plateaued(&losses, config.plateau_window, config.plateau_tolerance) {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome { epochs, converged })
}
