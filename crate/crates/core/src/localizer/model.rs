use std::collections::BTreeMap;
use std::path::Path;

use difftrack_autodiff::params::{read_manifest, write_manifest};
use difftrack_autodiff::{seeded_rng, BiGru, Conv2d, ConvBlock, Dense, Graph, ParamStore, Tensor, Var};

use super::features::{channels_for, FeatureBlock, FRAMES_PER_LABEL, MEL_BANDS};
use crate::error::{Error, Result};
use crate::hnet::manifest_path;
use crate::scene::FormatTag;

/// (time, frequency) pooling per conv block: 5 feature frames become one
/// label frame and 64 bands become 8.
pub const POOLS: [(usize, usize); 3] = [(FRAMES_PER_LABEL, 4), (1, 2), (1, 1)];
pub const DESK_WIDTH: usize = 32;
pub const PAPER_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizerConfig {
    pub format: FormatTag,
    pub n_max: usize,
    /// Conv filters and GRU units.
    pub width: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { format: FormatTag::Foa, n_max: 2, width: DESK_WIDTH }
    }
}

#[derive(Debug, Clone)]
pub struct Localizer {
    pub config: LocalizerConfig,
    blocks: Vec<ConvBlock>,
    gru1: BiGru,
    gru2: BiGru,
    doa_head: Dense,
    activity_head: Dense,
    feature_mean: difftrack_autodiff::ParamId,
    feature_std: difftrack_autodiff::ParamId,
}

/// `doa` is `[T', 3 n_max]` in `[-1, 1]`, `activity` is `[T', n_max]` in `(0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct LocalizerOutput {
    pub doa: Var,
    pub activity: Var,
}

impl Localizer {
    pub fn new(store: &mut ParamStore, config: LocalizerConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let w = config.width;
        let mut in_ch = channels_for(config.format);
        let blocks = POOLS
            .iter()
            .enumerate()
            .map(|(i, &pool)| {
                let conv = Conv2d::new(store, &format!("localizer.conv{i}"), in_ch, w, (3, 3), &mut rng);
                in_ch = w;
                ConvBlock { conv, pool }
            })
            .collect();
        let bands = MEL_BANDS / POOLS.iter().map(|p| p.1).product::<usize>();
        let gru1 = BiGru::new(store, "localizer.gru1", w * bands, w, &mut rng);
        let gru2 = BiGru::new(store, "localizer.gru2", 2 * w, w, &mut rng);
        let doa_head = Dense::new(store, "localizer.doa", 2 * w, 3 * config.n_max, &mut rng);
        let activity_head = Dense::new(store, "localizer.activity", 2 * w, config.n_max, &mut rng);
        let stats = channels_for(config.format) * MEL_BANDS;
        let feature_mean = store.add("localizer.feature_mean", Tensor::zeros(&[stats]));
        let feature_std = store.add("localizer.feature_std", Tensor::full(&[stats], 1.0));
        Self { config, blocks, gru1, gru2, doa_head, activity_head, feature_mean, feature_std }
    }

    /// Stores per-(channel, band) statistics used by [`Localizer::normalize`].
    pub fn set_normalization(&self, store: &mut ParamStore, mean: &[f64], std: &[f64]) -> Result<()> {
        let len = store.value(self.feature_mean).len();
        if mean.len() != len || std.len() != len {
            return Err(Error::Argument(format!("normalization statistics need {len} values")));
        }
        store.value_mut(self.feature_mean).data_mut().copy_from_slice(mean);
        let std: Vec<f64> = std.iter().map(|s| s.max(1e-6)).collect();
        store.value_mut(self.feature_std).data_mut().copy_from_slice(&std);
        Ok(())
    }

    /// Standardized copy of `features`.
    pub fn normalize(&self, store: &ParamStore, features: &FeatureBlock) -> Result<FeatureBlock> {
        if features.channels() != channels_for(self.config.format) || features.format != self.config.format {
            return Err(Error::Argument(format!(
                "{:?} features with {} channels do not fit a {:?} model",
                features.format,
                features.channels(),
                self.config.format
            )));
        }
        let mean = store.value(self.feature_mean).data();
        let std = store.value(self.feature_std).data();
        let mut out = features.clone();
        let frames = out.frames();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / (frames * MEL_BANDS);
            let b = i % MEL_BANDS;
            let k = c * MEL_BANDS + b;
            *v = (*v - mean[k]) / std[k];
        }
        Ok(out)
    }

    /// `x` is a normalized `[C, T, 64]` tensor with `T` a multiple of 5.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<LocalizerOutput> {
        let s = g.shape(x).to_vec();
        let c = channels_for(self.config.format);
        if s.len() != 3 || s[0] != c || s[2] != MEL_BANDS || s[1] == 0 || s[1] % FRAMES_PER_LABEL != 0 {
            return Err(Error::Argument(format!(
                "feature tensor {s:?} is not [{c}, 5k, {MEL_BANDS}] for a {:?} model",
                self.config.format
            )));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
        }
        let hs = g.shape(h).to_vec();
        let (w, t, bands) = (hs[0], hs[1], hs[2]);
        let h = g.permute(h, &[1, 0, 2])?;
        let h = g.reshape(h, &[t, w * bands])?;
        let h = self.gru1.forward_seq(g, store, h)?;
        let h = self.gru2.forward_seq(g, store, h)?;
        let doa = self.doa_head.forward(g, store, h)?;
        let doa = g.tanh(doa);
        let activity = self.activity_head.forward(g, store, h)?;
        let activity = g.sigmoid(activity);
        Ok(LocalizerOutput { doa, activity })
    }

    pub fn save(&self, store: &ParamStore, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        store.save(path)?;
        let mut manifest = extra.clone();
        manifest.insert("model".into(), "localizer".into());
        manifest.insert("format".into(), format_name(self.config.format).into());
        manifest.insert("n_max".into(), self.config.n_max.to_string());
        manifest.insert("width".into(), self.config.width.to_string());
        manifest.insert("parameters".into(), store.num_scalars().to_string());
        write_manifest(&manifest_path(path), &manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let manifest = read_manifest(&manifest_path(path))?;
        let get = |k: &str| {
            manifest.get(k).cloned().ok_or_else(|| Error::Config(format!("{}: manifest lacks '{k}'", path.display())))
        };
        if get("model")? != "localizer" {
            return Err(Error::Config(format!("{} is not a localizer checkpoint", path.display())));
        }
        let parse = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("{}: bad manifest value for '{k}'", path.display())))
        };
        let config =
            LocalizerConfig { format: parse_format(&get("format")?)?, n_max: parse("n_max")?, width: parse("width")? };
        let mut store = ParamStore::new();
        let model = Localizer::new(&mut store, config, 0);
        store.load_values_from(&ParamStore::load(path)?)?;
        Ok((model, store))
    }
}

pub fn format_name(format: FormatTag) -> &'static str {
    match format {
        FormatTag::Foa => "foa",
        FormatTag::Mic => "mic",
    }
}

pub fn parse_format(s: &str) -> Result<FormatTag> {
    match s.to_ascii_lowercase().as_str() {
        "foa" => Ok(FormatTag::Foa),
        "mic" => Ok(FormatTag::Mic),
        other => Err(Error::Config(format!("unknown audio format '{other}'"))),
    }
}
