use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use difftrack_autodiff::{AdamConfig, ParamStore};
use difftrack_core::assignment::DistanceKind;
use difftrack_core::hnet::{
    eval_hnet, generate_hnet_dataset, load_dataset_dir, train_hnet, write_dataset_dir, Hnet, HnetConfig,
    HnetDataset, HnetEval, HnetLossWeights, HnetTrainConfig, SequenceAxis, VAL_STREAM,
};
use difftrack_core::localizer::{
    evaluate_localizer, extract_features, infer_trajectories, parse_format, train_localizer, LabelledClip, Localizer,
    LocalizerConfig, LocalizerTrainConfig, Objective, CURVE_HEADER, FRAMES_PER_LABEL, HOP, PAPER_WIDTH,
};
use difftrack_core::loss::FpMode;
use difftrack_core::metrics::{EvalOptions, MotAccumulator, MotReport};
use difftrack_core::scene::{
    generate_scene, mix_scenes, read_timeline_csv, read_wav, scene_rng, synthesize_foa, synthesize_mic,
    write_timeline_csv, write_wav, FormatTag, MultichannelClip, SampleFormat, SceneGenConfig, SceneTimeline,
};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::manifest::OutputDir;

/// Flag key, default value and help text.
pub type Key = (&'static str, &'static str, &'static str);

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
    /// Keys accepted as bare switches.
    pub switches: &'static [&'static str],
    pub run: fn(&Settings, &OutputDir) -> CliResult<()>,
}

pub const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "gen-hungarian-data",
        about: "Generate distance/association shards for the association network",
        keys: &[
            ("count", "63000", "training samples"),
            ("val_fraction", "0.1", "validation samples as a fraction of count"),
            ("full", "false", "use the 405000-sample training set"),
            ("n_max", "2", "matrix size"),
            ("shard_size", "10000", "records per shard file"),
            ("seed", "0", "master seed"),
        ],
        switches: &["full"],
        run: gen_hungarian_data,
    },
    CommandSpec {
        name: "train-hnet",
        about: "Train the association network",
        keys: &[
            ("data", "", "directory written by gen-hungarian-data"),
            ("weights", "1,1,1", "association, row-max and column-max loss weights"),
            ("epochs", "100", "maximum epochs"),
            ("batch_size", "32", "minibatch size"),
            ("lr", "0.001", "Adam learning rate"),
            ("patience", "20", "epochs without validation improvement before stopping"),
            ("hidden", "128", "recurrent and attention width"),
            ("sequence_axis", "rows", "axis fed to the recurrent layer (rows|cols)"),
            ("seed", "0", "initialization and shuffling seed"),
        ],
        switches: &[],
        run: train_hnet_cmd,
    },
    CommandSpec {
        name: "eval-hnet",
        about: "Score an association network on a stored split or fresh samples",
        keys: &[
            ("model", "", "hnet.ckpt"),
            ("data", "", "shard directory; empty generates fresh samples"),
            ("split", "val", "split read from the shard directory"),
            ("count", "6300", "fresh samples when no data is given"),
            ("seed", "1", "seed of the fresh samples"),
            ("check", "false", "fail unless the thresholds are met"),
            ("min_fscore", "0.99", "F-score required by the check"),
            ("min_discipline", "0.95", "share of one-to-one outputs required by the check"),
        ],
        switches: &["check"],
        run: eval_hnet_cmd,
    },
    CommandSpec {
        name: "gen-scenes",
        about: "Synthesize annotated multichannel scenes",
        keys: &[
            ("count", "10", "number of scenes"),
            ("seed", "0", "master seed"),
            ("duration", "60", "scene length in seconds"),
            ("frame_period", "0.1", "label frame period in seconds"),
            ("n_max", "2", "maximum simultaneous sources"),
            ("format", "foa", "foa|mic"),
            ("snr_db", "20", "diffuse noise level below the sources"),
            ("event_min", "1", "shortest event in seconds"),
            ("event_max", "10", "longest event in seconds"),
            ("gap_min", "0", "shortest silence between events of one voice"),
            ("gap_max", "4", "longest silence between events of one voice"),
            ("p_moving", "0.5", "probability that an event moves"),
            ("speed_min", "5", "slowest angular speed in degrees per second"),
            ("speed_max", "40", "fastest angular speed in degrees per second"),
            ("sample_format", "float32", "float32|pcm16"),
        ],
        switches: &[],
        run: gen_scenes,
    },
    CommandSpec {
        name: "augment",
        about: "Add mixtures of scene pairs to a scene set",
        keys: &[
            ("scenes", "", "scene directory"),
            ("format", "foa", "foa|mic"),
            ("n_max", "2", "overlap budget of a mixture"),
            ("frame_period", "0.1", "label frame period in seconds"),
            ("multiplier", "2", "output size as a multiple of the input"),
            ("seed", "0", "partner selection seed"),
        ],
        switches: &[],
        run: augment,
    },
    CommandSpec {
        name: "train-doanet",
        about: "Train the DOA localizer",
        keys: &[
            ("train", "", "training scene directory"),
            ("val", "", "validation scene directory"),
            ("hnet", "", "association network checkpoint (not needed for mse)"),
            ("format", "foa", "foa|mic"),
            ("n_max", "2", "number of regressors"),
            ("frame_period", "0.1", "label frame period in seconds"),
            ("objective", "1,1,1", "mse, or dMOTp,dMOTa,activity weights"),
            ("gamma", "1", "identity-switch weight inside dMOTa"),
            ("fp_mode", "activity-gated", "activity-gated|assoc-only"),
            ("width", "32", "conv filters and recurrent units"),
            ("paper_width", "false", "use 128 filters and units"),
            ("epochs", "60", "maximum epochs"),
            ("batch_chunks", "4", "chunks per optimizer step"),
            ("chunk_frames", "60", "label frames per chunk"),
            ("lr", "0.001", "Adam learning rate"),
            ("plateau_window", "10", "epochs in the convergence window"),
            ("plateau_tolerance", "0.01", "relative improvement that counts as progress"),
            ("threshold", "0.5", "activity threshold for validation"),
            ("seed", "0", "initialization and shuffling seed"),
        ],
        switches: &["paper_width"],
        run: train_doanet,
    },
    CommandSpec {
        name: "evaluate",
        about: "CLEAR-MOT scores of predicted against reference annotations",
        keys: &[
            ("refs", "", "reference csv file or directory"),
            ("preds", "", "predicted csv file or directory"),
            ("frame_period", "0.1", "label frame period in seconds"),
            ("gate_deg", "", "matches farther than this are misses; empty disables"),
            ("matching", "angular", "angular|euclidean"),
        ],
        switches: &[],
        run: evaluate,
    },
    CommandSpec {
        name: "infer",
        about: "Write DOA trajectories for audio files",
        keys: &[
            ("model", "", "localizer.ckpt"),
            ("audio", "", "wav file or directory"),
            ("threshold", "0.5", "activity threshold"),
            ("chunk_frames", "60", "label frames per forward pass"),
            ("frame_period", "0.1", "label frame period in seconds"),
        ],
        switches: &[],
        run: infer,
    },
    CommandSpec {
        name: "report",
        about: "Aggregate localizer runs into a results table and curves",
        keys: &[
            ("runs", "", "comma-separated train-doanet output directories"),
            ("labels", "", "comma-separated row labels; defaults to directory names"),
            ("check", "false", "fail unless MOTa does not decrease along the runs"),
        ],
        switches: &["check"],
        run: report,
    },
];

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))
}

fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} does not exist", path.display())))
    }
}

fn gen_hungarian_data(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let count = if s.flag("full")? { 405_000 } else { s.get::<usize>("count")? };
    let fraction: f64 = s.get("val_fraction")?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CliError::Config("val_fraction must lie in [0, 1]".into()));
    }
    let val = (count as f64 * fraction).round() as usize;
    let n: usize = s.get("n_max")?;
    let written = write_dataset_dir(out.root(), n, count, val, s.get("seed")?, s.get("shard_size")?)?;
    eprintln!("wrote {count} training and {val} validation samples in {} shards", written.len());
    Ok(())
}

fn hnet_split(dir: &Path, split: &str) -> CliResult<HnetDataset> {
    require_exists(dir)?;
    Ok(load_dataset_dir(dir, split)?)
}

fn train_hnet_cmd(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let dir = s.path("data")?;
    let train = hnet_split(&dir, "train")?;
    let val = hnet_split(&dir, "val")?;
    let seed: u64 = s.get("seed")?;
    let config = HnetConfig { n: train.n, hidden: s.get("hidden")?, axis: s.get::<SequenceAxis>("sequence_axis")? };
    let train_cfg = HnetTrainConfig {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        adam: AdamConfig { lr: s.get("lr")?, ..AdamConfig::default() },
        weights: HnetLossWeights::parse(s.raw("weights"))?,
        patience: s.get("patience")?,
        seed,
    };
    let mut store = ParamStore::new();
    let model = Hnet::new(&mut store, config, seed);
    let mut log = String::new();
    let result = train_hnet(&model, &mut store, &train, &val, &train_cfg, |e| {
        eprintln!("epoch {:3}  loss {:.5}  val F1 {:.4}", e.epoch, e.loss, e.val_fscore);
        log.push_str(&serde_json::to_string(e).expect("plain struct"));
        log.push('\n');
    });
    std::fs::write(out.file("train_log.jsonl"), &log)?;
    model.save(&store, &out.file("hnet.ckpt"), &BTreeMap::new())?;
    result?;
    let eval = eval_hnet(&model, &store, &val)?;
    eprintln!("validation F1 {:.4}, one-to-one {:.4}", eval.fscore, eval.discipline);
    write_json(&out.file("eval.json"), &eval)
}

fn eval_hnet_cmd(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let path = s.path("model")?;
    require_exists(&path)?;
    let (model, store) = Hnet::load(&path)?;
    let data = match s.raw("data") {
        "" => HnetDataset::from_records(
            model.config.n,
            &generate_hnet_dataset(s.get("count")?, model.config.n, s.get("seed")?, VAL_STREAM)?,
        )?,
        dir => hnet_split(Path::new(dir), s.raw("split"))?,
    };
    let eval: HnetEval = eval_hnet(&model, &store, &data)?;
    write_json(&out.file("eval.json"), &eval)?;
    println!(
        "F1 {:.4}  precision {:.4}  recall {:.4}  one-to-one {:.4}  samples {}",
        eval.fscore, eval.precision, eval.recall, eval.discipline, eval.samples
    );
    if s.flag("check")? {
        let (f, d): (f64, f64) = (s.get("min_fscore")?, s.get("min_discipline")?);
        if eval.fscore < f || eval.discipline < d {
            return Err(CliError::Check(format!(
                "F1 {:.4} (need {f}), one-to-one {:.4} (need {d})",
                eval.fscore, eval.discipline
            )));
        }
    }
    Ok(())
}

fn scene_name(i: usize) -> String {
    format!("scene-{i:03}")
}

fn gen_scenes(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let cfg = SceneGenConfig {
        duration: s.get("duration")?,
        frame_period: s.get("frame_period")?,
        n_max: s.get("n_max")?,
        event_min: s.get("event_min")?,
        event_max: s.get("event_max")?,
        gap_min: s.get("gap_min")?,
        gap_max: s.get("gap_max")?,
        p_moving: s.get("p_moving")?,
        speed_min: s.get("speed_min")?,
        speed_max: s.get("speed_max")?,
        ..SceneGenConfig::default()
    };
    let format = parse_format(s.raw("format"))?;
    let sample_format = match s.raw("sample_format") {
        "float32" => SampleFormat::Float32,
        "pcm16" => SampleFormat::Pcm16,
        other => return Err(CliError::Config(format!("unknown sample_format '{other}'"))),
    };
    let snr: f64 = s.get("snr_db")?;
    let seed: u64 = s.get("seed")?;
    let count: usize = s.get("count")?;
    for i in 0..count {
        let scene_seed = scene_rng(seed, 1 + i as u64).next_u64();
        let (tl, specs) = generate_scene(&cfg, scene_seed)?;
        let clip = match format {
            FormatTag::Foa => synthesize_foa(&tl, &specs, difftrack_core::localizer::SAMPLE_RATE, snr, scene_seed)?,
            FormatTag::Mic => synthesize_mic(&tl, &specs, difftrack_core::localizer::SAMPLE_RATE, snr, scene_seed)?,
        };
        let name = scene_name(i);
        write_wav(&out.file(&format!("{name}.wav")), &clip, sample_format)?;
        write_timeline_csv(&out.file(&format!("{name}.csv")), &tl)?;
    }
    eprintln!("wrote {count} scenes");
    Ok(())
}

/// Annotated recording on disk.
struct Scene {
    name: String,
    wav: PathBuf,
    csv: PathBuf,
    clip: MultichannelClip,
    timeline: SceneTimeline,
}

/// Every `<name>.wav` of `dir` with its `<name>.csv`, in name order.
fn load_scenes(dir: &Path, format: FormatTag, frame_period: f64, n_max: usize) -> CliResult<Vec<Scene>> {
    require_exists(dir)?;
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(CliError::Data(format!("no wav files in {}", dir.display())));
    }
    wavs.into_iter()
        .map(|wav| {
            let csv = wav.with_extension("csv");
            require_exists(&csv)?;
            let clip = read_wav(&wav, format)?;
            let label_frames = clip.len() / (HOP * FRAMES_PER_LABEL);
            let mut timeline = read_timeline_csv(&csv, frame_period, label_frames)?;
            if timeline.n_max > n_max {
                return Err(CliError::Data(format!(
                    "{} has {} overlapping sources, more than n_max {n_max}",
                    csv.display(),
                    timeline.n_max
                )));
            }
            timeline.n_max = n_max;
            let name = wav.file_stem().expect("listed file").to_string_lossy().into_owned();
            Ok(Scene { name, wav, csv, clip, timeline })
        })
        .collect()
}

fn augment(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let format = parse_format(s.raw("format"))?;
    let scenes = load_scenes(&s.path("scenes")?, format, s.get("frame_period")?, s.get("n_max")?)?;
    let multiplier: usize = s.get("multiplier")?;
    if multiplier == 0 {
        return Err(CliError::Config("multiplier must be at least 1".into()));
    }
    let mut rng = scene_rng(s.get("seed")?, 0);
    let mut mixes = 0;
    let mut skipped = 0;
    for (i, scene) in scenes.iter().enumerate() {
        std::fs::copy(&scene.wav, out.file(&format!("{}.wav", scene.name)))?;
        std::fs::copy(&scene.csv, out.file(&format!("{}.csv", scene.name)))?;
        let mut partners: Vec<usize> = (0..scenes.len()).filter(|&j| j != i).collect();
        partners.shuffle(&mut rng);
        let mut made = 0;
        for j in partners {
            if made + 1 >= multiplier {
                break;
            }
            let other = &scenes[j];
            match mix_scenes((&scene.clip, &scene.timeline), (&other.clip, &other.timeline)) {
                Ok((clip, timeline)) => {
                    let name = format!("{}-mix{made}", scene.name);
                    write_wav(&out.file(&format!("{name}.wav")), &clip, SampleFormat::Float32)?;
                    write_timeline_csv(&out.file(&format!("{name}.csv")), &timeline)?;
                    made += 1;
                }
                Err(difftrack_core::Error::Augmentation(_)) => skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
        mixes += made;
    }
    eprintln!("wrote {} originals and {mixes} mixtures, {skipped} pairs over budget", scenes.len());
    Ok(())
}

fn labelled_clips(scenes: Vec<Scene>) -> CliResult<Vec<LabelledClip>> {
    scenes.into_iter().map(|sc| Ok(LabelledClip::new(extract_features(&sc.clip)?, sc.timeline))).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct OutcomeFile {
    objective: String,
    epochs: usize,
    converged: bool,
    final_loss: f64,
}

fn train_doanet(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let format = parse_format(s.raw("format"))?;
    let n_max: usize = s.get("n_max")?;
    let frame_period: f64 = s.get("frame_period")?;
    let mut objective: Objective = s.raw("objective").parse()?;
    if let Objective::Tracking { gamma, fp_mode, .. } = &mut objective {
        *gamma = s.get("gamma")?;
        *fp_mode = s.raw("fp_mode").parse::<FpMode>()?;
    }
    let train = labelled_clips(load_scenes(&s.path("train")?, format, frame_period, n_max)?)?;
    let val = match s.raw("val") {
        "" => Vec::new(),
        dir => labelled_clips(load_scenes(Path::new(dir), format, frame_period, n_max)?)?,
    };
    let hnet = match (objective.needs_hnet(), s.raw("hnet")) {
        (false, _) => None,
        (true, "") => return Err(CliError::Config("tracking objectives need 'hnet'".into())),
        (true, path) => {
            require_exists(Path::new(path))?;
            let (model, mut store) = Hnet::load(Path::new(path))?;
            store.set_frozen(true);
            Some((model, store))
        }
    };
    let width = if s.flag("paper_width")? { PAPER_WIDTH } else { s.get("width")? };
    let seed: u64 = s.get("seed")?;
    let threshold: f64 = s.get("threshold")?;
    let chunk_frames: usize = s.get("chunk_frames")?;
    let config = LocalizerTrainConfig {
        objective,
        max_epochs: s.get("epochs")?,
        batch_chunks: s.get("batch_chunks")?,
        chunk_frames,
        adam: AdamConfig { lr: s.get("lr")?, ..AdamConfig::default() },
        plateau_window: s.get("plateau_window")?,
        plateau_tolerance: s.get("plateau_tolerance")?,
        activity_threshold: threshold,
        seed,
    };
    let mut store = ParamStore::new();
    let model = Localizer::new(&mut store, LocalizerConfig { format, n_max, width }, seed);
    let mut curve = format!("{CURVE_HEADER}\n");
    let result = train_localizer(&model, &mut store, &train, &val, hnet.as_ref().map(|(m, s)| (m, s)), &config, |e| {
        let val = e.val.as_ref().map_or(String::new(), |r| format!("  val LE {:.2}  MOTa {:.3}", r.le_deg, r.mota));
        eprintln!("epoch {:3}  loss {:.5}{val}", e.epoch, e.loss_total);
        curve.push_str(&e.csv_row());
        curve.push('\n');
    });
    std::fs::write(out.file("curve.csv"), &curve)?;
    model.save(&store, &out.file("localizer.ckpt"), &BTreeMap::new())?;
    let outcome = result?;
    let report = if val.is_empty() { None } else { Some(evaluate_localizer(&model, &store, &val, threshold, chunk_frames)?) };
    write_json(&out.file("report.json"), &report)?;
    write_json(
        &out.file("outcome.json"),
        &OutcomeFile {
            objective: objective.to_string(),
            epochs: outcome.epochs.len(),
            converged: outcome.converged,
            final_loss: outcome.epochs.last().map_or(f64::NAN, |e| e.loss_total),
        },
    )
}

/// `path` itself, or its `*.csv` files in name order.
fn csv_inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    require_exists(path)?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Serialize)]
struct EvaluationFile {
    sequences: Vec<String>,
    report: MotReport,
}

fn evaluate(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let refs_path = s.path("refs")?;
    let preds_path = s.path("preds")?;
    let frame_period: f64 = s.get("frame_period")?;
    let matching = match s.raw("matching") {
        "angular" => DistanceKind::Angular,
        "euclidean" => DistanceKind::Euclidean,
        other => return Err(CliError::Config(format!("unknown matching '{other}'"))),
    };
    let options = EvalOptions { gate_deg: s.optional("gate_deg")?, matching };
    let refs = csv_inputs(&refs_path)?;
    let pairs: Vec<(PathBuf, PathBuf)> = if preds_path.is_dir() {
        refs.into_iter()
            .map(|r| {
                let p = preds_path.join(r.file_name().expect("listed file"));
                (r, p)
            })
            .collect()
    } else {
        if refs.len() != 1 {
            return Err(CliError::Config("a single prediction file needs a single reference file".into()));
        }
        vec![(refs[0].clone(), preds_path)]
    };
    if pairs.is_empty() {
        return Err(CliError::Data(format!("no reference csv files in {}", refs_path.display())));
    }
    let mut acc = MotAccumulator::new(options);
    let mut sequences = Vec::new();
    for (r, p) in &pairs {
        require_exists(p)?;
        let mut rt = read_timeline_csv(r, frame_period, 0)?;
        let mut pt = read_timeline_csv(p, frame_period, 0)?;
        let frames = rt.n_frames().max(pt.n_frames());
        for tl in [&mut rt, &mut pt] {
            tl.frames.resize(frames, Vec::new());
        }
        acc.add_sequence(&rt, &pt)?;
        sequences.push(r.file_name().expect("listed file").to_string_lossy().into_owned());
    }
    let report = acc.report();
    println!(
        "LE {:.2} deg  MOTa {:.4}  IDS {}  LR {:.4}  frames {}",
        report.le_deg, report.mota, report.ids, report.lr, report.frames
    );
    write_json(&out.file("report.json"), &EvaluationFile { sequences, report })
}

fn infer(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let model_path = s.path("model")?;
    require_exists(&model_path)?;
    let (model, store) = Localizer::load(&model_path)?;
    let audio = s.path("audio")?;
    require_exists(&audio)?;
    let files = if audio.is_file() {
        vec![audio]
    } else {
        let mut f: Vec<PathBuf> = std::fs::read_dir(&audio)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        f.sort();
        f
    };
    let threshold: f64 = s.get("threshold")?;
    let chunk_frames: usize = s.get("chunk_frames")?;
    let frame_period: f64 = s.get("frame_period")?;
    for wav in &files {
        let clip = read_wav(wav, model.config.format)?;
        let features = extract_features(&clip)?;
        let set = infer_trajectories(&model, &store, &features, threshold, chunk_frames)?;
        let stem = wav.file_stem().expect("listed file").to_string_lossy().into_owned();
        write_timeline_csv(&out.file(&format!("{stem}.csv")), &set.to_timeline(frame_period))?;
    }
    eprintln!("wrote {} trajectory files", files.len());
    Ok(())
}

fn split_list(raw: &str) -> Vec<String> {
    raw.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

fn report(s: &Settings, out: &OutputDir) -> CliResult<()> {
    let runs = split_list(s.raw("runs"));
    if runs.is_empty() {
        return Err(CliError::Config("'runs' is required".into()));
    }
    let mut labels = split_list(s.raw("labels"));
    if labels.is_empty() {
        labels = runs
            .iter()
            .map(|r| Path::new(r).file_name().map_or(r.clone(), |f| f.to_string_lossy().into_owned()))
            .collect();
    }
    if labels.len() != runs.len() {
        return Err(CliError::Config(format!("{} labels for {} runs", labels.len(), runs.len())));
    }
    let mut table = String::from("config,le_deg,mota,ids,lr\n");
    let mut curves = format!("config,{CURVE_HEADER}\n");
    let mut metrics = serde_json::Map::new();
    let mut motas = Vec::new();
    for (run, label) in runs.iter().zip(&labels) {
        let dir = Path::new(run);
        require_exists(dir)?;
        let report: Option<MotReport> = read_json(&dir.join("report.json"))?;
        let report =
            report.ok_or_else(|| CliError::Data(format!("{run} was trained without validation scenes")))?;
        let _ = writeln!(table, "{label},{},{},{},{}", report.le_deg, report.mota, report.ids, report.lr);
        let curve = std::fs::read_to_string(dir.join("curve.csv"))
            .map_err(|e| CliError::Data(format!("{run}/curve.csv: {e}")))?;
        for line in curve.lines().skip(1) {
            let _ = writeln!(curves, "{label},{line}");
        }
        motas.push(report.mota);
        metrics.insert(label.clone(), serde_json::to_value(&report)?);
    }
    std::fs::write(out.file("table.csv"), &table)?;
    std::fs::write(out.file("curves.csv"), &curves)?;
    write_json(&out.file("metrics.json"), &metrics)?;
    print!("{table}");
    if s.flag("check")? {
        if let Some(k) = motas.windows(2).position(|w| w[1] < w[0]) {
            return Err(CliError::Check(format!(
                "MOTa drops from {} ({}) to {} ({})",
                labels[k],
                motas[k],
                labels[k + 1],
                motas[k + 1]
            )));
        }
    }
    Ok(())
}
