//! Differentiable tracking objective: soft MOTP, soft MOTA with soft
//! false alarms, misses and identity switches, and the track-activity loss.
//!
//! Frames from all sequences of a batch are stacked along the leading axis.
//! Association and distance tensors are `[frames, n, n]` with prediction
//! rows and reference columns; row `i` is regressor slot `i`.

use std::collections::HashMap;

use difftrack_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DoaVector;
use crate::scene::SceneTimeline;

pub const EPS: f64 = 1e-7;
/// Value of padded cells in training distance matrices.
pub const TRAINING_PAD: f64 = 10.0;
/// Decision threshold for binarizing soft associations and activities.
pub const THRESHOLD: f64 = 0.5;
/// Keeps the square root differentiable when a prediction hits its reference.
const SQRT_FLOOR: f64 = 1e-12;

/// Reference annotations for a stack of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    n: usize,
    refs: Vec<Vec<(u32, DoaVector)>>,
    rows: Vec<usize>,
    seq_lens: Vec<usize>,
}

impl FrameBatch {
    /// `rows[t]` prediction rows are valid in frame `t`; `seq_lens` splits
    /// the frames into sequences that carry identity memory.
    pub fn new(n: usize, refs: Vec<Vec<(u32, DoaVector)>>, rows: Vec<usize>, seq_lens: Vec<usize>) -> Result<Self> {
        if rows.len() != refs.len() || seq_lens.iter().sum::<usize>() != refs.len() {
            return Err(Error::Argument("frame counts of refs, rows and sequences disagree".into()));
        }
        if refs.iter().any(|r| r.len() > n) || rows.iter().any(|&m| m > n) {
            return Err(Error::Argument(format!("a frame exceeds n = {n}")));
        }
        Ok(Self { n, refs, rows, seq_lens })
    }

    /// All `n` regressors active in every frame of every timeline.
    pub fn from_timelines(timelines: &[&SceneTimeline], n: usize) -> Result<Self> {
        let mut refs = Vec::new();
        let mut seq_lens = Vec::new();
        for tl in timelines {
            seq_lens.push(tl.n_frames());
            for frame in &tl.frames {
                refs.push(frame.iter().map(|e| (e.track_id, e.doa)).collect());
            }
        }
        let rows = vec![n; refs.len()];
        Self::new(n, refs, rows, seq_lens)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn frames(&self) -> usize {
        self.refs.len()
    }

    pub fn refs(&self) -> &[Vec<(u32, DoaVector)>] {
        &self.refs
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn seq_lens(&self) -> &[usize] {
        &self.seq_lens
    }

    pub fn total_refs(&self) -> usize {
        self.refs.iter().map(Vec::len).sum()
    }

    fn mask(&self, f: impl Fn(usize, usize, usize) -> bool) -> Tensor {
        let n = self.n;
        let mut t = Tensor::zeros(&[self.frames(), n, n]);
        let data = t.data_mut();
        for b in 0..self.frames() {
            for i in 0..n {
                for j in 0..n {
                    if f(b, i, j) {
                        data[(b * n + i) * n + j] = 1.0;
                    }
                }
            }
        }
        t
    }

    /// 1 on each frame's valid `rows x refs` block.
    pub fn valid_mask(&self) -> Tensor {
        self.mask(|b, i, j| i < self.rows[b] && j < self.refs[b].len())
    }

    fn col_mask(&self) -> Tensor {
        let n = self.n;
        let data = (0..self.frames()).flat_map(|b| (0..n).map(move |j| (j < self.refs[b].len()) as u8 as f64)).collect();
        Tensor::new(&[self.frames(), n], data).expect("shape")
    }

    fn row_mask(&self) -> Tensor {
        let n = self.n;
        let data = (0..self.frames()).flat_map(|b| (0..n).map(move |i| (i < self.rows[b]) as u8 as f64)).collect();
        Tensor::new(&[self.frames(), n], data).expect("shape")
    }
}

/// Euclidean distances between raw regressor outputs `doa` (`[frames, 3n]`)
/// and unit references, padded with [`TRAINING_PAD`]: `[frames, n, n]`.
pub fn distance_tensor(g: &mut Graph, batch: &FrameBatch, doa: Var) -> Result<Var> {
    let (b, n) = (batch.frames(), batch.n);
    if g.shape(doa) != [b, 3 * n] {
        return Err(Error::Argument(format!("regressor output {:?} is not [{b}, {}]", g.shape(doa), 3 * n)));
    }
    let p = g.reshape(doa, &[b, n, 1, 3])?;
    let copies = vec![p; n];
    let p = g.concat(&copies, 2)?;
    let mut r = Tensor::zeros(&[b, n, n, 3]);
    {
        let data = r.data_mut();
        for (f, refs) in batch.refs.iter().enumerate() {
            for i in 0..n {
                for (j, (_, doa)) in refs.iter().enumerate() {
                    let base = ((f * n + i) * n + j) * 3;
                    data[base..base + 3].copy_from_slice(&doa.to_array());
                }
            }
        }
    }
    let r = g.constant(r);
    let diff = g.sub(p, r)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.sum_axis(sq, 3)?;
    let sq = g.add_scalar(sq, SQRT_FLOOR);
    let dist = g.sqrt(sq);
    let mask = batch.valid_mask();
    let mut pad = mask.clone();
    pad.data_mut().iter_mut().for_each(|v| *v = (1.0 - *v) * TRAINING_PAD);
    let mask = g.constant(mask);
    let pad = g.constant(pad);
    let kept = g.mul(dist, mask)?;
    Ok(g.add(kept, pad)?)
}

/// Binary per-frame, per-regressor activity target: 1 where the row maximum
/// of the soft association reaches [`THRESHOLD`].
pub fn derive_activity_reference(assoc: &Tensor) -> Result<Tensor> {
    let s = assoc.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Argument(format!("association {s:?} is not [frames, n, n]")));
    }
    let n = s[1];
    let data = assoc
        .data()
        .chunks(n)
        .map(|row| if row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(&[s[0], n], data)?)
}

/// Soft MOTP: `sum(W * D) / max(eps, sum(W))` with `W` the association
/// restricted to the valid blocks.
pub fn dmotp_loss(g: &mut Graph, batch: &FrameBatch, distances: Var, assoc: Var) -> Result<Var> {
    let mask = g.constant(batch.valid_mask());
    let w = g.mul(assoc, mask)?;
    let wd = g.mul(w, distances)?;
    let num = g.sum(wd);
    let den = g.sum(w);
    let den = g.clamp_min(den, EPS);
    Ok(g.div(num, den)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FpMode {
    /// Unmatched regressors count in proportion to their predicted activity.
    #[default]
    ActivityGated,
    /// Every valid unmatched row counts, activity is ignored.
    AssocOnly,
}

impl std::str::FromStr for FpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activity-gated" => Ok(FpMode::ActivityGated),
            "assoc-only" => Ok(FpMode::AssocOnly),
            other => Err(Error::Config(format!("unknown fp-mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DmotaTerms {
    pub loss: Var,
    pub fn_: Var,
    pub fp: Var,
    pub ids: Var,
}

/// Previous matched row of each reference column, per frame, from the
/// binarized association; columns without an earlier match in their
/// sequence, or without a match now, are absent. Returns the one-hot
/// `[frames, n, n]` tensor and the number of counted columns.
pub fn previous_match_targets(batch: &FrameBatch, assoc: &Tensor) -> (Tensor, usize) {
    let n = batch.n;
    let values = assoc.data();
    let mut out = Tensor::zeros(&[batch.frames(), n, n]);
    let mut counted = 0;
    let mut frame = 0;
    for &len in &batch.seq_lens {
        let mut history: HashMap<u32, usize> = HashMap::new();
        for _ in 0..len {
            let refs = &batch.refs[frame];
            for (j, (track, _)) in refs.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for i in 0..batch.rows[frame] {
                    let v = values[(frame * n + i) * n + j];
                    if v >= THRESHOLD && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((i, v));
                    }
                }
                if let Some((i, _)) = best {
                    if let Some(prev) = history.insert(*track, i) {
                        out.data_mut()[(frame * n + prev) * n + j] = 1.0;
                        counted += 1;
                    }
                }
            }
            frame += 1;
        }
    }
    (out, counted)
}

/// Soft MOTA error `(FN~ + FP~ + gamma * IDS~) / sum N_t`; zero when the
/// batch holds no reference.
pub fn dmota_loss(
    g: &mut Graph,
    batch: &FrameBatch,
    assoc: Var,
    activity: Var,
    gamma: f64,
    fp_mode: FpMode,
) -> Result<DmotaTerms> {
    let (b, n) = (batch.frames(), batch.n);
    if g.shape(assoc) != [b, n, n] || g.shape(activity) != [b, n] {
        return Err(Error::Argument(format!(
            "association {:?} / activity {:?} do not fit {b} frames of size {n}",
            g.shape(assoc),
            g.shape(activity)
        )));
    }
    let mask = g.constant(batch.valid_mask());
    let w = g.mul(assoc, mask)?;

    let col_mask = batch.col_mask();
    let n_cols = col_mask.sum();
    let col_mask = g.constant(col_mask);
    let col_max = g.max_reduce(w, 1)?;
    let covered = g.mul(col_max, col_mask)?;
    let covered = g.sum(covered);
    let fn_ = g.scale(covered, -1.0);
    let fn_ = g.add_scalar(fn_, n_cols);

    let row_max = g.max_reduce(w, 2)?;
    let unmatched = g.scale(row_max, -1.0);
    let unmatched = g.add_scalar(unmatched, 1.0);
    let row_mask = g.constant(batch.row_mask());
    let unmatched = g.mul(unmatched, row_mask)?;
    let fp = match fp_mode {
        FpMode::ActivityGated => g.mul(unmatched, activity)?,
        FpMode::AssocOnly => unmatched,
    };
    let fp = g.sum(fp);

    let (prev, counted) = previous_match_targets(batch, g.value(assoc));
    let prev = g.constant(prev);
    let kept = g.mul(assoc, prev)?;
    let kept = g.sum(kept);
    let ids = g.scale(kept, -1.0);
    let ids = g.add_scalar(ids, counted as f64);

    let weighted_ids = g.scale(ids, gamma);
    let errors = g.add(fn_, fp)?;
    let errors = g.add(errors, weighted_ids)?;
    let total = batch.total_refs();
    let loss = if total == 0 { g.scale(errors, 0.0) } else { g.scale(errors, 1.0 / total as f64) };
    Ok(DmotaTerms { loss, fn_, fp, ids })
}

/// Binary cross-entropy between predicted and reference activities.
pub fn activity_loss(g: &mut Graph, activity: Var, reference: &Tensor) -> Result<Var> {
    let target = g.constant(reference.clone());
    Ok(g.bce(activity, target, EPS)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dmotp: f64,
    pub dmota: f64,
    pub activity: f64,
}

impl LossWeights {
    pub const DMOTP: LossWeights = LossWeights { dmotp: 1.0, dmota: 0.0, activity: 0.0 };
    pub const DMOTP_ACT: LossWeights = LossWeights { dmotp: 1.0, dmota: 0.0, activity: 1.0 };
    pub const FULL: LossWeights = LossWeights { dmotp: 1.0, dmota: 1.0, activity: 1.0 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.dmotp, self.dmota, self.activity];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights {all:?} must be finite and non-negative")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    /// Parses `w_p,w_a,w_act`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad loss weights '{s}'"))))
            .collect::<Result<_>>()?;
        let [dmotp, dmota, activity] = parts[..] else {
            return Err(Error::Config(format!("loss weights need three values, got '{s}'")));
        };
        let w = Self { dmotp, dmota, activity };
        w.validate()?;
        Ok(w)
    }
}

impl std::fmt::Display for LossWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.dmotp, self.dmota, self.activity)
    }
}

/// Weighted sum of the three components; zero-weight terms are skipped.
pub fn combined_loss(g: &mut Graph, weights: LossWeights, dmotp: Var, dmota: Var, activity: Var) -> Result<Var> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    for (w, v) in [(weights.dmotp, dmotp), (weights.dmota, dmota), (weights.activity, activity)] {
        if w == 0.0 {
            continue;
        }
        let term = g.scale(v, w);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("validated weights have a non-zero entry"))
}

/// Control objective: regressor `k` regresses the `k`-th listed reference,
/// absent references are the zero vector; mean squared error.
pub fn mse_loss(g: &mut Graph, batch: &FrameBatch, doa: Var) -> Result<Var> {
    let (b, n) = (batch.frames(), batch.n);
    if g.shape(doa) != [b, 3 * n] {
        return Err(Error::Argument(format!("regressor output {:?} is not [{b}, {}]", g.shape(doa), 3 * n)));
    }
    let mut target = Tensor::zeros(&[b, 3 * n]);
    for (f, refs) in batch.refs.iter().enumerate() {
        for (k, (_, v)) in refs.iter().enumerate() {
            target.data_mut()[f * 3 * n + 3 * k..f * 3 * n + 3 * k + 3].copy_from_slice(&v.to_array());
        }
    }
    let target = g.constant(target);
    let diff = g.sub(doa, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_frame(refs: Vec<(u32, DoaVector)>, n: usize) -> FrameBatch {
        FrameBatch::new(n, vec![refs], vec![n], vec![1]).unwrap()
    }

    #[test]
    fn activity_reference_examples() {
        let a = Tensor::new(&[1, 2, 2], vec![0.9, 0.05, 0.2, 0.3]).unwrap();
        let r = derive_activity_reference(&a).unwrap();
        assert_eq!(r.data(), &[1.0, 0.0]);
        let exact = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(derive_activity_reference(&exact).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn dmotp_single_cell() {
        let batch = single_frame(vec![(0, DoaVector::new(1.0, 0.0, 0.0))], 1);
        let mut g = Graph::new();
        let d = g.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let a = g.constant(Tensor::new(&[1, 1, 1], vec![0.5]).unwrap());
        let l = dmotp_loss(&mut g, &batch, d, a).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uncovered_reference_costs_one_miss() {
        let batch = single_frame(vec![(4, DoaVector::new(0.0, 1.0, 0.0))], 2);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2]));
        let p = g.constant(Tensor::zeros(&[1, 2]));
        let t = dmota_loss(&mut g, &batch, a, p, 1.0, FpMode::ActivityGated).unwrap();
        assert!((g.value(t.fn_).item() - 1.0).abs() < 1e-12);
        assert_eq!(g.value(t.fp).item(), 0.0);
    }

    #[test]
    fn activity_loss_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1, 2], vec![0.9, 0.1]).unwrap());
        let r = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let l = activity_loss(&mut g, p, &r).unwrap();
        assert!((g.value(l).item() - 0.1054).abs() < 1e-4);
        let half = g.constant(Tensor::full(&[3, 2], 0.5));
        let l = activity_loss(&mut g, half, &r.clone().reshaped(&[1, 2]).unwrap());
        assert!(l.is_err());
        let l = activity_loss(&mut g, half, &Tensor::zeros(&[3, 2])).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weights_parse_and_validate() {
        assert_eq!(LossWeights::parse("1,0,1").unwrap(), LossWeights::DMOTP_ACT);
        assert!(matches!(LossWeights::parse("0,0,0"), Err(Error::Config(_))));
        assert!(LossWeights::parse("1,2").is_err());
        assert!(LossWeights::parse("1,-1,0").is_err());
    }

    #[test]
    fn combined_loss_selects_terms() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(5.0));
        let only_p = combined_loss(&mut g, LossWeights::DMOTP, a, b, c).unwrap();
        assert_eq!(g.value(only_p).item(), 2.0);
        let p_act = combined_loss(&mut g, LossWeights::DMOTP_ACT, a, b, c).unwrap();
        assert_eq!(g.value(p_act).item(), 7.0);
        let full = combined_loss(&mut g, LossWeights::FULL, a, b, c).unwrap();
        assert_eq!(g.value(full).item(), 10.0);
    }

    #[test]
    fn distance_tensor_pads_and_measures() {
        let batch = single_frame(vec![(0, DoaVector::new(0.0, 1.0, 0.0))], 2);
        let mut g = Graph::new();
        let doa = g.constant(Tensor::new(&[1, 6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let d = distance_tensor(&mut g, &batch, doa).unwrap();
        let v = g.value(d).data().to_vec();
        assert!((v[0] - 2f64.sqrt()).abs() < 1e-9);
        assert!(v[2] < 1e-5);
        assert_eq!((v[1], v[3]), (TRAINING_PAD, TRAINING_PAD));
    }

    #[test]
    fn mse_targets_follow_listed_order() {
        let e = DoaVector::new(0.0, 0.0, 1.0);
        let batch = single_frame(vec![(9, e)], 2);
        let mut g = Graph::new();
        let doa = g.constant(Tensor::new(&[1, 6], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let l = mse_loss(&mut g, &batch, doa).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
