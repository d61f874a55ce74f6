//! Exact CLEAR-MOT accounting for DOA tracks: localization error, recall,
//! precision, MOTp, MOTa and identity switches.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{build_distance_matrix, hungarian, AssociationMatrix, DistanceKind, DistanceMatrix, Padding};
use crate::error::{Error, Result};
use crate::geometry::{angle_from_chord, chord_from_angle, DoaVector};
use crate::scene::SceneTimeline;

/// One frame's matching with the identities behind its rows and columns.
#[derive(Debug, Clone)]
pub struct FrameAssociation {
    pub t: usize,
    pub assoc: AssociationMatrix,
    pub distances: DistanceMatrix,
    pub kind: DistanceKind,
    /// Track id of each reference column.
    pub ref_track_ids: Vec<u32>,
    /// Identity of each prediction row (the regressor slot for the localizer).
    pub pred_ids: Vec<u32>,
}

impl FrameAssociation {
    /// Matching on angular distance.
    pub fn new(t: usize, preds: &[(u32, DoaVector)], refs: &[(u32, DoaVector)]) -> Result<Self> {
        Self::with_kind(t, preds, refs, DistanceKind::Angular)
    }

    pub fn with_kind(
        t: usize,
        preds: &[(u32, DoaVector)],
        refs: &[(u32, DoaVector)],
        kind: DistanceKind,
    ) -> Result<Self> {
        let n = preds.len().max(refs.len()).max(1);
        let p: Vec<DoaVector> = preds.iter().map(|e| e.1).collect();
        let r: Vec<DoaVector> = refs.iter().map(|e| e.1).collect();
        // fixed padding never reaches the valid block, so the generator is inert
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let distances = build_distance_matrix(&p, &r, n, kind, Padding::TRAINING, &mut rng)?;
        let assoc = hungarian(&distances);
        let ref_track_ids: Vec<u32> = refs.iter().map(|e| e.0).collect();
        for (k, id) in ref_track_ids.iter().enumerate() {
            if ref_track_ids[..k].contains(id) {
                return Err(Error::Evaluation(format!("frame {t} repeats reference track {id}")));
            }
        }
        Ok(Self { t, assoc, distances, kind, ref_track_ids, pred_ids: preds.iter().map(|e| e.0).collect() })
    }

    /// Angle in radians between prediction `i` and reference `j`.
    pub fn angle(&self, i: usize, j: usize) -> f64 {
        let d = self.distances.get(i, j);
        match self.kind {
            DistanceKind::Angular => d,
            DistanceKind::Euclidean => angle_from_chord(d),
        }
    }
}

/// Mean matched angular distance of one frame in degrees, `None` when
/// nothing is matched. `distances` holds angles in radians.
pub fn frame_le(assoc: &AssociationMatrix, distances: &DistanceMatrix) -> Option<f64> {
    let k = assoc.matches();
    if k == 0 {
        return None;
    }
    Some(assoc.cost(distances).to_degrees() / k as f64)
}

/// Most recent prediction identity matched to each reference track.
pub type IdHistory = HashMap<u32, u32>;

/// Counts references matched to a prediction other than their most recent
/// match, then records this frame's matches. Unmatched tracks keep their
/// history.
pub fn count_ids(curr: &FrameAssociation, history: &mut IdHistory) -> usize {
    count_ids_for_pairs(curr, &curr.assoc.pairs(), history)
}

fn count_ids_for_pairs(curr: &FrameAssociation, pairs: &[(usize, usize)], history: &mut IdHistory) -> usize {
    let mut switches = 0;
    for &(i, j) in pairs {
        let track = curr.ref_track_ids[j];
        let pred = curr.pred_ids[i];
        if let Some(prev) = history.insert(track, pred) {
            if prev != pred {
                switches += 1;
            }
        }
    }
    switches
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Matches farther than this count as a miss plus a false alarm.
    pub gate_deg: Option<f64>,
    /// Cost minimised by the frame matching. Angle and chord are monotone
    /// per pair but their sums can rank multi-pair matchings differently.
    pub matching: DistanceKind,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { gate_deg: None, matching: DistanceKind::Angular }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MotReport {
    /// Equal to `motp`, kept under the name used for the frame-wise error.
    pub le_deg: f64,
    pub motp: f64,
    /// Same matches measured as chord length, comparable with training losses.
    pub motp_euclidean: f64,
    pub mota: f64,
    pub ids: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub lr: f64,
    pub lp: f64,
    pub lf1: f64,
    pub n_ref_total: usize,
    pub n_pred_total: usize,
    pub frames: usize,
}

/// Running totals across frames and sequences.
#[derive(Debug, Clone, Default)]
pub struct MotAccumulator {
    options: EvalOptions,
    angle_sum: f64,
    chord_sum: f64,
    ids: usize,
    tp: usize,
    fp: usize,
    fn_: usize,
    n_ref: usize,
    n_pred: usize,
    frames: usize,
}

impl MotAccumulator {
    pub fn new(options: EvalOptions) -> Self {
        Self { options, ..Self::default() }
    }

    /// Adds one frame; `history` carries identity memory within a sequence.
    pub fn add_frame(&mut self, frame: &FrameAssociation, history: &mut IdHistory) {
        let m = frame.distances.valid_rows();
        let n = frame.distances.valid_cols();
        let mut pairs = frame.assoc.pairs();
        if let Some(gate) = self.options.gate_deg {
            pairs.retain(|&(i, j)| frame.angle(i, j).to_degrees() <= gate);
        }
        let k = pairs.len();
        self.tp += k;
        self.fp += m - k;
        self.fn_ += n - k;
        self.n_ref += n;
        self.n_pred += m;
        self.frames += 1;
        for &(i, j) in &pairs {
            let angle = frame.angle(i, j);
            self.angle_sum += angle.to_degrees();
            self.chord_sum += chord_from_angle(angle);
        }
        self.ids += count_ids_for_pairs(frame, &pairs, history);
    }

    pub fn add_sequence(&mut self, refs: &SceneTimeline, preds: &SceneTimeline) -> Result<()> {
        if refs.n_frames() != preds.n_frames() {
            return Err(Error::Evaluation(format!(
                "reference spans {} frames but prediction spans {}",
                refs.n_frames(),
                preds.n_frames()
            )));
        }
        let mut history = IdHistory::new();
        for (t, (r, p)) in refs.frames.iter().zip(&preds.frames).enumerate() {
            let r: Vec<_> = r.iter().map(|e| (e.track_id, e.doa)).collect();
            let p: Vec<_> = p.iter().map(|e| (e.track_id, e.doa)).collect();
            let frame = FrameAssociation::with_kind(t, &p, &r, self.options.matching)?;
            self.add_frame(&frame, &mut history);
        }
        Ok(())
    }

    pub fn report(&self) -> MotReport {
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        let motp = ratio(self.angle_sum, self.tp);
        let lr = ratio(self.tp as f64, self.n_ref);
        let lp = ratio(self.tp as f64, self.n_pred);
        let lf1 = if lr + lp == 0.0 { 0.0 } else { 2.0 * lr * lp / (lr + lp) };
        let errors = (self.fp + self.fn_ + self.ids) as f64;
        // an empty reference counts every false alarm against a unit denominator
        let mota = 1.0 - errors / self.n_ref.max(1) as f64;
        MotReport {
            le_deg: motp,
            motp,
            motp_euclidean: ratio(self.chord_sum, self.tp),
            mota,
            ids: self.ids,
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            lr,
            lp,
            lf1,
            n_ref_total: self.n_ref,
            n_pred_total: self.n_pred,
            frames: self.frames,
        }
    }
}

/// Full accounting of one predicted sequence against its reference.
pub fn evaluate_sequence(refs: &SceneTimeline, preds: &SceneTimeline) -> Result<MotReport> {
    evaluate_sequence_with(refs, preds, EvalOptions::default())
}

pub fn evaluate_sequence_with(refs: &SceneTimeline, preds: &SceneTimeline, options: EvalOptions) -> Result<MotReport> {
    let mut acc = MotAccumulator::new(options);
    acc.add_sequence(refs, preds)?;
    Ok(acc.report())
}
