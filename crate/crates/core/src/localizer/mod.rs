//! Direction-of-arrival network: spatial features, a CRNN with DOA and
//! activity branches, training through the frozen association network, and
//! thresholded trajectory inference.

mod features;
mod infer;
mod model;
mod train;

pub use features::{
    channels_for, extract_features, extract_features_foa, extract_features_mic, frame_count, mel_filterbank,
    FeatureBlock, FFT_SIZE, FRAMES_PER_LABEL, GCC_LAGS, HOP, LOG_FLOOR, MEL_BANDS, SAMPLE_RATE, WINDOW,
};
pub use infer::{
    infer_trajectories, predict, LocalizerPrediction, TrajectoryRun, TrajectorySet, DEFAULT_ACTIVITY_THRESHOLD,
    DEFAULT_CHUNK_FRAMES,
};
pub use model::{format_name, parse_format, Localizer, LocalizerConfig, LocalizerOutput, DESK_WIDTH, PAPER_WIDTH, POOLS};
pub use train::{
    batch_loss, evaluate_localizer, feature_statistics, train_localizer, BatchLoss, LabelledClip, LocalizerEpoch,
    LocalizerTrainConfig, Objective, TrainOutcome, CURVE_HEADER,
};
