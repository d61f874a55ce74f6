//! Learned, differentiable stand-in for the Hungarian algorithm: a GRU over
//! the rows of a padded distance matrix, single-head self-attention with a
//! residual path and a dense sigmoid head producing a soft association matrix.

mod data;
mod train;

pub use data::{
    combos, generate_hnet_dataset, load_dataset_dir, write_dataset_dir, HnetDataset, HnetSample, COMBOS_N2, GRID_RESOLUTIONS,
    TRAIN_STREAM, VAL_STREAM,
};
pub use train::{eval_hnet, hnet_loss, micro_fscore, train_hnet, EpochLog, HnetEval, HnetLossWeights, HnetTrainConfig};

use std::collections::BTreeMap;
use std::path::Path;

use difftrack_autodiff::params::{read_manifest, write_manifest};
use difftrack_autodiff::{seeded_rng, Dense, Graph, Gru, ParamStore, SelfAttention, Var};

use crate::error::{Error, Result};

/// Which matrix axis the recurrent layer walks along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceAxis {
    Rows,
    Cols,
}

impl SequenceAxis {
    fn as_str(self) -> &'static str {
        match self {
            SequenceAxis::Rows => "rows",
            SequenceAxis::Cols => "cols",
        }
    }
}

impl std::str::FromStr for SequenceAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(SequenceAxis::Rows),
            "cols" => Ok(SequenceAxis::Cols),
            other => Err(Error::Config(format!("unknown sequence axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnetConfig {
    pub n: usize,
    pub hidden: usize,
    pub axis: SequenceAxis,
}

impl Default for HnetConfig {
    fn default() -> Self {
        Self { n: 2, hidden: 128, axis: SequenceAxis::Rows }
    }
}

#[derive(Debug, Clone)]
pub struct Hnet {
    pub config: HnetConfig,
    gru: Gru,
    attention: SelfAttention,
    head: Dense,
}

/// Graph handles of one forward pass, all `[batch, n, n]` or `[batch, n]`.
#[derive(Debug, Clone, Copy)]
pub struct HnetOutput {
    pub logits: Var,
    /// Sigmoid of the logits.
    pub assoc: Var,
    /// Logits maximised over the sequence axis, one per column.
    pub max_seq_logits: Var,
    /// Logits maximised over the feature axis, one per row.
    pub max_feat_logits: Var,
}

impl Hnet {
    pub fn new(store: &mut ParamStore, config: HnetConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let gru = Gru::new(store, "hnet.gru", config.n, config.hidden, &mut rng);
        let attention = SelfAttention::new(store, "hnet.attention", config.hidden, &mut rng);
        let head = Dense::new(store, "hnet.head", config.hidden, config.n, &mut rng);
        Self { config, gru, attention, head }
    }

    /// Soft association for a `[batch, n, n]` distance tensor.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, d: Var) -> Result<HnetOutput> {
        let n = self.config.n;
        let s = g.shape(d).to_vec();
        if s.len() != 3 || s[1] != n || s[2] != n {
            return Err(Error::Argument(format!("distance tensor {s:?} is not [batch, {n}, {n}]")));
        }
        let b = s[0];
        let d = match self.config.axis {
            SequenceAxis::Rows => d,
            SequenceAxis::Cols => g.permute(d, &[0, 2, 1])?,
        };
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let row = g.slice(d, 1, i, 1)?;
            steps.push(g.reshape(row, &[b, n])?);
        }
        let hidden = self.gru.forward_steps(g, store, &steps)?;
        let (attended, _) = self.attention.forward_steps(g, store, &hidden)?;
        let mut rows = Vec::with_capacity(n);
        // residual around the attention, then tanh before the head
        for (h, &state) in attended.into_iter().zip(&hidden) {
            let h = g.add(h, state)?;
            let h = g.tanh(h);
            let logits = self.head.forward(g, store, h)?;
            rows.push(g.reshape(logits, &[b, 1, n])?);
        }
        let logits = g.concat(&rows, 1)?;
        let logits = match self.config.axis {
            SequenceAxis::Rows => logits,
            SequenceAxis::Cols => g.permute(logits, &[0, 2, 1])?,
        };
        let assoc = g.sigmoid(logits);
        let max_seq_logits = g.max_reduce(logits, 1)?;
        let max_feat_logits = g.max_reduce(logits, 2)?;
        Ok(HnetOutput { logits, assoc, max_seq_logits, max_feat_logits })
    }

    /// Writes the parameters to `path` and the architecture next to it.
    pub fn save(&self, store: &ParamStore, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        store.save(path)?;
        let mut manifest = extra.clone();
        manifest.insert("model".into(), "hnet".into());
        manifest.insert("n_max".into(), self.config.n.to_string());
        manifest.insert("hidden".into(), self.config.hidden.to_string());
        manifest.insert("sequence_axis".into(), self.config.axis.as_str().into());
        manifest.insert("parameters".into(), store.num_scalars().to_string());
        write_manifest(&manifest_path(path), &manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let manifest = read_manifest(&manifest_path(path))?;
        let get = |k: &str| {
            manifest.get(k).cloned().ok_or_else(|| Error::Config(format!("{}: manifest lacks '{k}'", path.display())))
        };
        if get("model")? != "hnet" {
            return Err(Error::Config(format!("{} is not an association network checkpoint", path.display())));
        }
        let parse = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("{}: bad manifest value for '{k}'", path.display())))
        };
        let config = HnetConfig { n: parse("n_max")?, hidden: parse("hidden")?, axis: get("sequence_axis")?.parse()? };
        let mut store = ParamStore::new();
        let model = Hnet::new(&mut store, config, 0);
        let loaded = ParamStore::load(path)?;
        store.load_values_from(&loaded)?;
        Ok((model, store))
    }
}

/// `<checkpoint>.manifest`
pub fn manifest_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}
