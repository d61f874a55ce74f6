use std::collections::HashMap;
use std::path::Path;

use difftrack_autodiff::{Graph, Tensor};
use difftrack_core::assignment::{build_distance_matrix, hungarian, DistanceKind, DistanceMatrix, Padding};
use difftrack_core::geometry::DoaVector;
use difftrack_core::loss::{distance_tensor, dmota_loss, dmotp_loss, FpMode, FrameBatch};
use difftrack_core::metrics::{evaluate_sequence, evaluate_sequence_with, EvalOptions};
use difftrack_core::scene::{random_direction, SceneTimeline, TrackEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Verdict};

const SMALL_BLOCKS: usize = 10_000;
const LARGE_BLOCKS: usize = 100;
const MOT_SEQUENCES: usize = 500;
const LE_TOLERANCE: f64 = 1e-9;
const LIMIT_SEQUENCES: usize = 100;
const LIMIT_FRAMES: usize = 50;
const LIMIT_TOLERANCE: f64 = 1e-9;

/// Minimum over every injection of rows into columns (rows <= cols), summed in row order.
fn min_over_permutations(block: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(block: &[f64], cols: usize, i: usize, rows: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if i == rows {
            *best = best.min(acc);
            return;
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                go(block, cols, i + 1, rows, used, acc + block[i * cols + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(block, cols, 0, rows, &mut vec![false; cols], 0.0, &mut best);
    best
}

fn check_block(rng: &mut ChaCha8Rng, n: usize) -> Result<(), String> {
    let rows = rng.gen_range(0..=n);
    let cols = rng.gen_range(0..=n);
    let block: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..2.0)).collect();
    let mut values = vec![10.0; n * n];
    for i in 0..rows {
        for j in 0..cols {
            values[i * n + j] = block[i * cols + j];
        }
    }
    let d = DistanceMatrix::from_values(n, values, rows, cols).map_err(|e| e.to_string())?;
    let a = hungarian(&d);
    let mut pairs = a.pairs();
    pairs.sort();
    ensure(pairs.len() == rows.min(cols), || format!("{rows}x{cols} block got {} matches", pairs.len()))?;
    let expected = if rows == 0 || cols == 0 {
        0.0
    } else if rows <= cols {
        min_over_permutations(&block, rows, cols)
    } else {
        let t: Vec<f64> = (0..cols * rows).map(|k| block[(k % rows) * cols + k / rows]).collect();
        min_over_permutations(&t, cols, rows)
    };
    // sum in the order the brute force uses so equal matchings give equal bits
    let cost = if rows <= cols {
        pairs.iter().map(|&(i, j)| block[i * cols + j]).fold(0.0, |acc, v| acc + v)
    } else {
        let mut by_col = pairs.clone();
        by_col.sort_by_key(|p| p.1);
        by_col.iter().map(|&(i, j)| block[i * cols + j]).fold(0.0, |acc, v| acc + v)
    };
    ensure(cost == expected, || format!("{rows}x{cols} block: solver {cost}, brute force {expected}"))
}

pub fn hungarian_oracle(_: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..SMALL_BLOCKS {
        check_block(&mut rng, 4)?;
    }
    for _ in 0..LARGE_BLOCKS {
        check_block(&mut rng, 8)?;
    }
    Ok(format!("{SMALL_BLOCKS} blocks up to 4x4 and {LARGE_BLOCKS} up to 8x8 match exactly"))
}

fn angle(a: DoaVector, b: DoaVector) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
}

/// Every maximal matching between `m` predictions and `n` references.
fn matchings(m: usize, n: usize) -> Vec<Vec<(usize, usize)>> {
    let k = m.min(n);
    let mut out = Vec::new();
    let mut stack = vec![(0usize, Vec::<(usize, usize)>::new())];
    while let Some((i, cur)) = stack.pop() {
        if cur.len() == k {
            out.push(cur);
            continue;
        }
        if i == m {
            continue;
        }
        for j in 0..n {
            if cur.iter().all(|p| p.1 != j) {
                let mut next = cur.clone();
                next.push((i, j));
                stack.push((i + 1, next));
            }
        }
        if m - i > k - cur.len() {
            stack.push((i + 1, cur));
        }
    }
    out
}

fn random_frames(rng: &mut ChaCha8Rng, frames: usize, max_sources: usize, ids: u32) -> SceneTimeline {
    let mut tl = SceneTimeline::empty(frames, 0.1, max_sources);
    for frame in &mut tl.frames {
        let k = rng.gen_range(0..=max_sources);
        let mut pool: Vec<u32> = (0..ids).collect();
        for _ in 0..k {
            let id = pool.swap_remove(rng.gen_range(0..pool.len()));
            frame.push(TrackEntry { track_id: id, doa: random_direction(rng) });
        }
        frame.sort_by_key(|e| e.track_id);
    }
    tl
}

pub fn mot_oracle(_: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in 0..MOT_SEQUENCES {
        let refs = random_frames(&mut rng, 3, 3, 4);
        let preds = random_frames(&mut rng, 3, 3, 3);
        let report = evaluate_sequence(&refs, &preds).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fn_, mut ids, mut sum) = (0, 0, 0, 0, 0.0);
        let mut last: HashMap<u32, u32> = HashMap::new();
        for (r, p) in refs.frames.iter().zip(&preds.frames) {
            let (cost, best) = matchings(p.len(), r.len())
                .into_iter()
                .map(|mm| (mm.iter().map(|&(i, j)| angle(p[i].doa, r[j].doa)).sum::<f64>(), mm))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("at least the empty matching");
            tp += best.len();
            fp += p.len() - best.len();
            fn_ += r.len() - best.len();
            sum += cost.to_degrees();
            for &(i, j) in &best {
                if let Some(prev) = last.insert(r[j].track_id, p[i].track_id) {
                    ids += usize::from(prev != p[i].track_id);
                }
            }
        }
        let n_ref: usize = refs.frames.iter().map(Vec::len).sum();
        let le = if tp == 0 { 0.0 } else { sum / tp as f64 };
        let mota = 1.0 - (fp + fn_ + ids) as f64 / n_ref.max(1) as f64;
        ensure((report.tp, report.fp, report.fn_, report.ids) == (tp, fp, fn_, ids), || {
            format!("sequence {s}: counts {:?} vs {:?}", (report.tp, report.fp, report.fn_, report.ids), (tp, fp, fn_, ids))
        })?;
        ensure((report.le_deg - le).abs() <= LE_TOLERANCE, || format!("sequence {s}: LE {} vs {le}", report.le_deg))?;
        ensure((report.mota - mota).abs() <= LE_TOLERANCE, || format!("sequence {s}: MOTa {} vs {mota}", report.mota))?;
    }
    Ok(format!("{MOT_SEQUENCES} sequences: counts exact, LE within {LE_TOLERANCE:e}"))
}

pub fn hard_limit(_: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 3;
    let opts = EvalOptions { matching: DistanceKind::Euclidean, ..EvalOptions::default() };
    let mut worst: f64 = 0.0;
    for s in 0..LIMIT_SEQUENCES {
        let frames = LIMIT_FRAMES;
        let mut refs_tl = SceneTimeline::empty(frames, 0.1, n);
        let mut preds_tl = SceneTimeline::empty(frames, 0.1, n);
        let mut refs = Vec::new();
        let mut rows = Vec::new();
        let mut doa = Tensor::zeros(&[frames, 3 * n]);
        let mut assoc = Tensor::zeros(&[frames, n, n]);
        let mut presence = Tensor::zeros(&[frames, n]);
        for t in 0..frames {
            let k = rng.gen_range(0..=n);
            let mut pool: Vec<u32> = (0..n as u32 + 2).collect();
            let mut frame: Vec<(u32, DoaVector)> =
                (0..k).map(|_| (pool.swap_remove(rng.gen_range(0..pool.len())), random_direction(&mut rng))).collect();
            frame.sort_by_key(|e| e.0);
            let m = rng.gen_range(0..=n);
            let preds: Vec<DoaVector> = (0..m).map(|_| random_direction(&mut rng)).collect();
            for (i, p) in preds.iter().enumerate() {
                doa.data_mut()[t * 3 * n + 3 * i..t * 3 * n + 3 * i + 3].copy_from_slice(&p.to_array());
                presence.data_mut()[t * n + i] = 1.0;
                preds_tl.frames[t].push(TrackEntry { track_id: i as u32, doa: *p });
            }
            let r: Vec<DoaVector> = frame.iter().map(|e| e.1).collect();
            let d = build_distance_matrix(&preds, &r, n, DistanceKind::Euclidean, Padding::TRAINING, &mut rng)
                .map_err(|e| e.to_string())?;
            for (i, j) in hungarian(&d).pairs() {
                assoc.data_mut()[(t * n + i) * n + j] = 1.0;
            }
            refs_tl.frames[t] = frame.iter().map(|&(track_id, doa)| TrackEntry { track_id, doa }).collect();
            refs.push(frame);
            rows.push(m);
        }
        let batch = FrameBatch::new(n, refs, rows, vec![frames]).map_err(|e| e.to_string())?;
        let report = evaluate_sequence_with(&refs_tl, &preds_tl, opts).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let x = g.constant(doa);
        let d = distance_tensor(&mut g, &batch, x).map_err(|e| e.to_string())?;
        let a = g.constant(assoc);
        let p = g.constant(presence);
        let motp = dmotp_loss(&mut g, &batch, d, a).map_err(|e| e.to_string())?;
        let terms = dmota_loss(&mut g, &batch, a, p, 1.0, FpMode::ActivityGated).map_err(|e| e.to_string())?;
        let pairs = [
            ("MOTp", g.value(motp).item(), if report.tp == 0 { 0.0 } else { report.motp_euclidean }),
            ("FN", g.value(terms.fn_).item(), report.fn_ as f64),
            ("FP", g.value(terms.fp).item(), report.fp as f64),
            ("IDS", g.value(terms.ids).item(), report.ids as f64),
        ];
        for (name, soft, exact) in pairs {
            let err = (soft - exact).abs();
            worst = worst.max(err);
            ensure(err <= LIMIT_TOLERANCE, || format!("sequence {s}: soft {name} {soft} vs exact {exact}"))?;
        }
    }
    Ok(format!("{LIMIT_SEQUENCES} sequences of {LIMIT_FRAMES} frames, worst deviation {worst:.1e}"))
}
