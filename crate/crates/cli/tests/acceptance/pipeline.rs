use std::path::{Path, PathBuf};

use crate::args;
use crate::cli::{num, p, read_json, run, status};
use crate::{ensure, Verdict};

const HNET_TRAIN_SAMPLES: usize = 63_000;
const HNET_SEED: u64 = 0;
const MIN_FSCORE: f64 = 0.99;

const TRAIN_SCENES: usize = 200;
const TEST_SCENES: usize = 40;
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 2;
const SCENE_SECONDS: &str = "6";
const EVENT_MAX: &str = "6";
const GAP_MAX: &str = "2";

const LR: &str = "0.0003";
const CHUNK_FRAMES: &str = "20";
const PLATEAU_WINDOW: &str = "10";
const MAX_EPOCHS: &str = "250";

const LE_RATIO: f64 = 0.8;
const SEEDS: [u64; 3] = [0, 1, 2];

fn hnet_checkpoint(work: &Path) -> Result<PathBuf, String> {
    let dir = work.join("hnet");
    let ckpt = dir.join("model").join("hnet.ckpt");
    if ckpt.exists() {
        return Ok(ckpt);
    }
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let data = dir.join("data");
    run(
        &args!["gen-hungarian-data", "--count", HNET_TRAIN_SAMPLES, "--seed", HNET_SEED, "--out", p(&data)],
        &dir.join("gen.log"),
    )?;
    run(&args!["train-hnet", "--data", p(&data), "--seed", HNET_SEED, "--out", p(&dir.join("model"))], &dir.join("train.log"))?;
    Ok(ckpt)
}

pub fn hnet_fscore(work: &Path) -> Verdict {
    let ckpt = hnet_checkpoint(work)?;
    let dir = work.join("hnet");
    let eval = dir.join("eval");
    let code = status(
        &args!["eval-hnet", "--model", p(&ckpt), "--data", p(&dir.join("data")), "--split", "val", "--check", "--min-fscore", MIN_FSCORE, "--out", p(&eval)],
        &dir.join("eval.log"),
    )?;
    let report = read_json(&eval.join("eval.json"))?;
    let f1 = num(&report, "fscore")?;
    let samples = num(&report, "samples")?;
    ensure(code == 0 && f1 >= MIN_FSCORE, || format!("held-out F1 {f1:.4} on {samples} samples (need {MIN_FSCORE}), exit {code}"))?;
    Ok(format!("held-out micro F1 {f1:.4} >= {MIN_FSCORE} on {samples} samples"))
}

fn scenes(work: &Path) -> Result<(PathBuf, PathBuf), String> {
    let dir = work.join("bench");
    let (train, test) = (dir.join("train"), dir.join("test"));
    for (out, count, seed) in [(&train, TRAIN_SCENES, TRAIN_SEED), (&test, TEST_SCENES, TEST_SEED)] {
        if out.join("manifest.txt").exists() {
            continue;
        }
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        run(
            &args![
                "gen-scenes", "--count", count, "--seed", seed, "--duration", SCENE_SECONDS, "--event-max", EVENT_MAX,
                "--gap-max", GAP_MAX, "--format", "foa", "--out", p(out)
            ],
            &dir.join("gen.log"),
        )?;
    }
    Ok((train, test))
}

/// Trains one localizer on the benchmark unless an earlier criterion did.
fn localizer_run(work: &Path, objective: &str, threshold: &str, seed: u64) -> Result<PathBuf, String> {
    let (train, test) = scenes(work)?;
    let name = format!("{}-t{threshold}-s{seed}", objective.replace(',', ""));
    let out = work.join("bench").join(&name);
    if out.join("outcome.json").exists() {
        return Ok(out);
    }
    let mut a = args![
        "train-doanet", "--train", p(&train), "--val", p(&test), "--objective", objective, "--threshold", threshold,
        "--seed", seed, "--lr", LR, "--chunk-frames", CHUNK_FRAMES, "--plateau-window", PLATEAU_WINDOW,
        "--epochs", MAX_EPOCHS, "--out", p(&out)
    ];
    if objective != "mse" {
        a.extend(args!["--hnet", p(&hnet_checkpoint(work)?)]);
    }
    run(&a, &work.join("bench").join(format!("{name}.log")))?;
    Ok(out)
}

struct RunResult {
    dir: PathBuf,
    le: f64,
    mota: f64,
    ids: f64,
    epochs: f64,
    converged: bool,
}

fn result(dir: PathBuf) -> Result<RunResult, String> {
    let report = read_json(&dir.join("report.json"))?;
    let outcome = read_json(&dir.join("outcome.json"))?;
    Ok(RunResult {
        le: num(&report, "le_deg")?,
        mota: num(&report, "mota")?,
        ids: num(&report, "ids")?,
        epochs: num(&outcome, "epochs")?,
        converged: outcome["converged"].as_bool().unwrap_or(false),
        dir,
    })
}

pub fn dmotp_vs_mse(work: &Path) -> Verdict {
    // without an activity branch every regressor emits, so both are scored at threshold 0
    let mse = result(localizer_run(work, "mse", "0", 0)?)?;
    let dmotp = result(localizer_run(work, "1,0,0", "0", 0)?)?;
    let detail = format!(
        "LE dMOTp {:.2} vs MSE {:.2} (ratio {:.3}, need <= {LE_RATIO}); converged after {} and {} epochs",
        dmotp.le,
        mse.le,
        dmotp.le / mse.le,
        dmotp.epochs,
        mse.epochs
    );
    ensure(mse.converged && dmotp.converged, || format!("not converged: {detail}"))?;
    ensure(dmotp.le <= LE_RATIO * mse.le, || detail.clone())?;
    Ok(detail)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Run whose MOTa is the median of its configuration.
fn median_run(runs: &[RunResult]) -> &RunResult {
    let m = median(runs.iter().map(|r| r.mota).collect());
    runs.iter().find(|r| r.mota == m).expect("median is a member")
}

pub fn dmota_effect(work: &Path) -> Verdict {
    let mut act = Vec::new();
    let mut full = Vec::new();
    for seed in SEEDS {
        act.push(result(localizer_run(work, "1,0,1", "0.5", seed)?)?);
        full.push(result(localizer_run(work, "1,1,1", "0.5", seed)?)?);
    }
    let ids = |r: &[RunResult]| median(r.iter().map(|x| x.ids).collect());
    let mota = |r: &[RunResult]| median(r.iter().map(|x| x.mota).collect());
    let detail = format!(
        "median IDS {} -> {}, median MOTa {:.4} -> {:.4}",
        ids(&act),
        ids(&full),
        mota(&act),
        mota(&full)
    );
    ensure(ids(&full) <= ids(&act) && mota(&full) >= mota(&act), || detail.clone())?;

    let dmotp = localizer_run(work, "1,0,0", "0", 0)?;
    let out = work.join("bench").join("report");
    let _ = std::fs::remove_dir_all(&out);
    let runs = [dmotp, median_run(&act).dir.clone(), median_run(&full).dir.clone()];
    let code = status(
        &args![
            "report", "--runs", runs.iter().map(|r| p(r)).collect::<Vec<_>>().join(","), "--labels",
            "dMOTp,dMOTp+Act,dMOTp+dMOTa+Act", "--check", "--out", p(&out)
        ],
        &work.join("bench").join("report.log"),
    )?;
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap_or_default();
    let rows = table.lines().count().saturating_sub(1);
    ensure(code == 0 && rows == 3, || format!("{detail}; report --check exited {code} with {rows} rows: {table}"))?;
    Ok(format!("{detail}; 3-row report has monotone MOTa"))
}

fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = e.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("inside").display().to_string();
                out.push((rel, std::fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Runs `args` into `dir`, then again from the manifest into a sibling, and compares bytes.
fn rerun_matches(work: &Path, name: &str, mut a: Vec<String>) -> Result<usize, String> {
    let first = work.join(name);
    let second = work.join(format!("{name}-rerun"));
    a.extend(args!["--out", p(&first)]);
    run(&a, &work.join(format!("{name}.log")))?;
    let cmd = a[0].clone();
    run(
        &args![cmd, "--config", p(&first.join("manifest.txt")), "--out", p(&second)],
        &work.join(format!("{name}-rerun.log")),
    )?;
    let (x, y) = (snapshot(&first)?, snapshot(&second)?);
    ensure(x.len() == y.len(), || format!("{name}: {} vs {} files", x.len(), y.len()))?;
    for ((na, ba), (nb, bb)) in x.iter().zip(&y) {
        ensure(na == nb && ba == bb, || format!("{name}: {na} differs from {nb}"))?;
    }
    Ok(x.len())
}

pub fn determinism(work: &Path) -> Verdict {
    let w = work.join("determinism");
    std::fs::create_dir_all(&w).map_err(|e| e.to_string())?;
    let mut files = 0;
    files += rerun_matches(&w, "shards", args!["gen-hungarian-data", "--count", 700, "--shard-size", 300, "--seed", 5])?;
    files += rerun_matches(&w, "hnet", args!["train-hnet", "--data", p(&w.join("shards")), "--epochs", 2, "--hidden", 16])?;
    let ckpt = w.join("hnet").join("hnet.ckpt");
    files += rerun_matches(&w, "hnet-eval", args!["eval-hnet", "--model", p(&ckpt), "--data", p(&w.join("shards"))])?;
    files += rerun_matches(&w, "scenes", args!["gen-scenes", "--count", 3, "--seed", 7, "--duration", 4, "--event-max", 3])?;
    let scenes = w.join("scenes");
    files += rerun_matches(&w, "augmented", args!["augment", "--scenes", p(&scenes), "--n-max", 4, "--multiplier", 2])?;
    files += rerun_matches(
        &w,
        "localizer",
        args!["train-doanet", "--train", p(&scenes), "--val", p(&scenes), "--hnet", p(&ckpt), "--epochs", 2, "--width", 4],
    )?;
    let model = w.join("localizer").join("localizer.ckpt");
    files += rerun_matches(&w, "inferred", args!["infer", "--model", p(&model), "--audio", p(&scenes)])?;
    files += rerun_matches(&w, "evaluated", args!["evaluate", "--refs", p(&scenes), "--preds", p(&w.join("inferred"))])?;
    files += rerun_matches(&w, "report", args!["report", "--runs", p(&w.join("localizer"))])?;

    // a changed configuration must not overwrite an existing run
    let code = status(&args!["gen-scenes", "--count", 3, "--seed", 8, "--out", p(&scenes)], &w.join("mismatch.log"))?;
    ensure(code == 7, || format!("config-hash mismatch exited {code}, expected 7"))?;
    Ok(format!("9 subcommands rerun from their manifests, {files} files byte-identical; changed config refused"))
}
