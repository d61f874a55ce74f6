use difftrack_autodiff::{Adam, AdamConfig, Gradients, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Hnet, HnetDataset};
use crate::error::{Error, Result};
use crate::loss::{EPS, THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnetLossWeights {
    pub assoc: f64,
    pub max_seq: f64,
    pub max_feat: f64,
}

impl Default for HnetLossWeights {
    fn default() -> Self {
        Self { assoc: 1.0, max_seq: 1.0, max_feat: 1.0 }
    }
}

impl HnetLossWeights {
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad weights '{s}'"))))
            .collect::<Result<_>>()?;
        let [assoc, max_seq, max_feat] = v[..] else {
            return Err(Error::Config(format!("weights need three values, got '{s}'")));
        };
        if v.iter().any(|w| !w.is_finite() || *w < 0.0) || v.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!("weights '{s}' must be non-negative and not all zero")));
        }
        Ok(Self { assoc, max_seq, max_feat })
    }
}

#[derive(Debug, Clone)]
pub struct HnetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: HnetLossWeights,
    /// Stop after this many epochs without a better validation F-score.
    pub patience: usize,
    pub seed: u64,
}

impl Default for HnetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            weights: HnetLossWeights::default(),
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_assoc: f64,
    pub loss_max_seq: f64,
    pub loss_max_feat: f64,
    pub val_fscore: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HnetEval {
    /// Micro-averaged F1 over every matrix cell, threshold 0.5.
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    /// Share of samples whose binarized output has at most one 1 per row and column.
    pub discipline: f64,
    pub samples: usize,
}

struct LossVars {
    total: Var,
    assoc: Var,
    max_seq: Var,
    max_feat: Var,
}

fn batch_loss(
    g: &mut Graph,
    model: &Hnet,
    store: &ParamStore,
    data: &HnetDataset,
    indices: &[usize],
    weights: HnetLossWeights,
) -> Result<LossVars> {
    let (d, a, maxt, maxf) = data.batch(indices);
    let d = g.constant(d);
    let out = model.forward(g, store, d)?;
    let a = g.constant(a);
    let maxt = g.constant(maxt);
    let maxf = g.constant(maxf);
    let assoc = g.bce(out.assoc, a, EPS)?;
    let seq = g.sigmoid(out.max_seq_logits);
    let max_seq = g.bce(seq, maxt, EPS)?;
    let feat = g.sigmoid(out.max_feat_logits);
    let max_feat = g.bce(feat, maxf, EPS)?;
    let mut total = g.scale(assoc, weights.assoc);
    let t = g.scale(max_seq, weights.max_seq);
    total = g.add(total, t)?;
    let f = g.scale(max_feat, weights.max_feat);
    total = g.add(total, f)?;
    Ok(LossVars { total, assoc, max_seq, max_feat })
}

/// Mean loss of the initial model over `data`, mainly for sanity checks.
pub fn hnet_loss(model: &Hnet, store: &ParamStore, data: &HnetDataset, weights: HnetLossWeights) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(1024) {
        let mut g = Graph::new();
        let l = batch_loss(&mut g, model, store, data, chunk, weights)?;
        total += g.value(l.total).item() * chunk.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Binarized-output statistics against the exact labels.
pub fn eval_hnet(model: &Hnet, store: &ParamStore, data: &HnetDataset) -> Result<HnetEval> {
    let n = model.config.n;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut disciplined = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(1024) {
        let (d, a, _, _) = data.batch(chunk);
        let mut g = Graph::new();
        let d = g.constant(d);
        let out = model.forward(&mut g, store, d)?;
        let pred = g.value(out.assoc).data();
        let truth = a.data();
        for (p_block, t_block) in pred.chunks(n * n).zip(truth.chunks(n * n)) {
            let bin: Vec<bool> = p_block.iter().map(|&v| v >= THRESHOLD).collect();
            for (&p, &t) in bin.iter().zip(t_block) {
                match (p, t == 1.0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let ok = (0..n).all(|i| {
                (0..n).filter(|&j| bin[i * n + j]).count() <= 1 && (0..n).filter(|&j| bin[j * n + i]).count() <= 1
            });
            disciplined += ok as usize;
        }
    }
    Ok(summarize(tp, fp, fn_, disciplined, data.len()))
}

fn summarize(tp: usize, fp: usize, fn_: usize, disciplined: usize, samples: usize) -> HnetEval {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // no positive cells anywhere and none predicted is a perfect score
    let fscore = if tp + fp + fn_ == 0 { 1.0 } else { ratio(2 * tp, 2 * tp + fp + fn_) };
    HnetEval { fscore, precision, recall, discipline: ratio(disciplined, samples), samples }
}

/// Micro F1 of binary predictions against binary labels.
pub fn micro_fscore(pred: &[u8], truth: &[u8]) -> f64 {
    let mut c = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == 1, t == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    summarize(c.0, c.1, c.2, 0, 0).fscore
}

/// Minibatch Adam on the weighted three-part loss with early stopping on the
/// validation F-score. On return `store` holds the best validation state.
/// A non-finite loss aborts with [`Error::Divergence`], leaving `store` at
/// the last finite parameters.
pub fn train_hnet(
    model: &Hnet,
    store: &mut ParamStore,
    train: &HnetDataset,
    val: &HnetDataset,
    config: &HnetTrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train.n != model.config.n || val.n != model.config.n {
        return Err(Error::Config(format!(
            "dataset matrices are {}x{}, the model expects {}",
            train.n, train.n, model.config.n
        )));
    }
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("training needs samples and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(store, config.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let l = batch_loss(&mut g, model, store, train, chunk, config.weights)?;
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
            let w = chunk.len() as f64;
            sums[0] += total * w;
            sums[1] += g.value(l.assoc).item() * w;
            sums[2] += g.value(l.max_seq).item() * w;
            sums[3] += g.value(l.max_feat).item() * w;
        }
        let count = train.len() as f64;
        let val_fscore = if val.is_empty() { f64::NAN } else { eval_hnet(model, store, val)?.fscore };
        let log = EpochLog {
            epoch,
            loss: sums[0] / count,
            loss_assoc: sums[1] / count,
            loss_max_seq: sums[2] / count,
            loss_max_feat: sums[3] / count,
            val_fscore,
        };
        on_epoch(&log);
        logs.push(log);
        if val.is_empty() {
            continue;
        }
        if best.as_ref().map_or(true, |(f, _)| val_fscore > *f) {
            best = Some((val_fscore, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        *store = params;
    }
    Ok(logs)
}
