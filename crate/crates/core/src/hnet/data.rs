use std::path::Path;

use difftrack_autodiff::Tensor;
use rand::Rng;

use crate::assignment::{hungarian, read_shard, DistanceMatrix, ShardRecord, ShardWriter};
use crate::error::{Error, Result};
use crate::geometry::{euclidean_distance, sample_equiangular_grid, DoaVector};
use crate::scene::scene_rng;

pub const GRID_RESOLUTIONS: [u32; 9] = [1, 2, 3, 4, 5, 10, 15, 20, 30];
pub const COMBOS_N2: [(usize, usize); 7] = [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2)];

const PAD_LOW: f64 = 3.0;
const PAD_HIGH: f64 = 10.0;

/// (predictions, references) count pairs differing by at most one.
pub fn combos(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for m in 0..=n {
        for k in 0..=n {
            if m.abs_diff(k) <= 1 {
                out.push((m, k));
            }
        }
    }
    out
}

/// One labelled matrix with its auxiliary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct HnetSample {
    pub n: usize,
    pub d: Vec<f64>,
    pub a: Vec<u8>,
    /// Column-wise maximum of `a`.
    pub a_maxt: Vec<u8>,
    /// Row-wise maximum of `a`.
    pub a_maxf: Vec<u8>,
}

impl HnetSample {
    pub fn from_record(n: usize, record: &ShardRecord) -> Result<Self> {
        let a = record.assoc.clone();
        for i in 0..n {
            let row: u32 = a[i * n..(i + 1) * n].iter().map(|&v| v as u32).sum();
            let col: u32 = (0..n).map(|k| a[k * n + i] as u32).sum();
            if row > 1 || col > 1 {
                return Err(Error::Data("association label is not a matching".into()));
            }
        }
        let a_maxt = (0..n).map(|j| (0..n).map(|i| a[i * n + j]).max().unwrap_or(0)).collect();
        let a_maxf = (0..n).map(|i| a[i * n..(i + 1) * n].iter().copied().max().unwrap_or(0)).collect();
        Ok(Self { n, d: record.distances.iter().map(|&v| v as f64).collect(), a, a_maxt, a_maxf })
    }
}

fn make_record(rng: &mut impl Rng, n: usize, combo: (usize, usize), grid: &[DoaVector]) -> Result<ShardRecord> {
    let (m, k) = combo;
    let preds: Vec<DoaVector> = (0..m).map(|_| grid[rng.gen_range(0..grid.len())]).collect();
    let refs: Vec<DoaVector> = (0..k).map(|_| grid[rng.gen_range(0..grid.len())]).collect();
    let mut distances = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            distances[i * n + j] = if i < m && j < k {
                euclidean_distance(preds[i], refs[j]) as f32
            } else {
                rng.gen_range(PAD_LOW..=PAD_HIGH) as f32
            };
        }
    }
    // label the matrix the network will actually see
    let values: Vec<f64> = distances.iter().map(|&v| v as f64).collect();
    let d = DistanceMatrix::from_values(n, values, m, k)?;
    let assoc = hungarian(&d).values().to_vec();
    Ok(ShardRecord { distances, assoc })
}

/// `count` samples cycling through every (combo, grid resolution) cell so
/// each cell is equally represented. `stream` separates splits.
pub fn generate_hnet_dataset(count: usize, n: usize, seed: u64, stream: u64) -> Result<Vec<ShardRecord>> {
    if n == 0 {
        return Err(Error::Argument("n_max must be positive".into()));
    }
    let grids: Vec<Vec<DoaVector>> =
        GRID_RESOLUTIONS.iter().map(|&r| sample_equiangular_grid(r)).collect::<Result<_>>()?;
    let combos = combos(n);
    let mut rng = scene_rng(seed, stream);
    (0..count)
        .map(|s| {
            let combo = combos[s % combos.len()];
            let grid = &grids[(s / combos.len()) % grids.len()];
            make_record(&mut rng, n, combo, grid)
        })
        .collect()
}

pub const TRAIN_STREAM: u64 = 1;
pub const VAL_STREAM: u64 = 2;

/// Writes `train-*.hnet` and `val-*.hnet` shards of at most `shard_size` records.
pub fn write_dataset_dir(
    dir: &Path,
    n: usize,
    train_count: usize,
    val_count: usize,
    seed: u64,
    shard_size: usize,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (split, count, stream) in [("train", train_count, TRAIN_STREAM), ("val", val_count, VAL_STREAM)] {
        let records = generate_hnet_dataset(count, n, seed, stream)?;
        for (k, chunk) in records.chunks(shard_size.max(1)).enumerate() {
            let path = dir.join(format!("{split}-{k:03}.hnet"));
            let mut w = ShardWriter::create(&path, n)?;
            for r in chunk {
                w.push(r)?;
            }
            w.finish()?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Dense in-memory copy of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct HnetDataset {
    pub n: usize,
    d: Vec<f64>,
    a: Vec<f64>,
}

impl HnetDataset {
    pub fn from_records(n: usize, records: &[ShardRecord]) -> Result<Self> {
        let mut d = Vec::with_capacity(records.len() * n * n);
        let mut a = Vec::with_capacity(records.len() * n * n);
        for r in records {
            let s = HnetSample::from_record(n, r)?;
            d.extend(s.d);
            a.extend(s.a.iter().map(|&v| v as f64));
        }
        Ok(Self { n, d, a })
    }

    pub fn len(&self) -> usize {
        self.d.len() / (self.n * self.n)
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn sample(&self, i: usize) -> HnetSample {
        let cells = self.n * self.n;
        let record = ShardRecord {
            distances: self.d[i * cells..(i + 1) * cells].iter().map(|&v| v as f32).collect(),
            assoc: self.a[i * cells..(i + 1) * cells].iter().map(|&v| v as u8).collect(),
        };
        HnetSample::from_record(self.n, &record).expect("validated on load")
    }

    /// Distances, labels and both auxiliary targets for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor, Tensor, Tensor) {
        let n = self.n;
        let cells = n * n;
        let b = indices.len();
        let mut d = Vec::with_capacity(b * cells);
        let mut a = Vec::with_capacity(b * cells);
        let mut maxt = Vec::with_capacity(b * n);
        let mut maxf = Vec::with_capacity(b * n);
        for &i in indices {
            let block = &self.a[i * cells..(i + 1) * cells];
            d.extend_from_slice(&self.d[i * cells..(i + 1) * cells]);
            a.extend_from_slice(block);
            maxt.extend((0..n).map(|j| (0..n).map(|r| block[r * n + j]).fold(0.0, f64::max)));
            maxf.extend((0..n).map(|r| block[r * n..(r + 1) * n].iter().cloned().fold(0.0, f64::max)));
        }
        let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape, v).expect("sized");
        (t(&[b, n, n], d), t(&[b, n, n], a), t(&[b, n], maxt), t(&[b, n], maxf))
    }
}

/// Loads every `<split>-*.hnet` shard of `dir` in name order.
pub fn load_dataset_dir(dir: &Path, split: &str) -> Result<HnetDataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "hnet")
                && p.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.starts_with(&format!("{split}-")))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no {split} shards in {}", dir.display())));
    }
    let mut n = None;
    let mut records = Vec::new();
    for p in &paths {
        let (pn, recs) = read_shard(p)?;
        if n.is_some_and(|m| m != pn) {
            return Err(Error::Data(format!("{} has matrix size {pn}, other shards differ", p.display())));
        }
        n = Some(pn);
        records.extend(recs);
    }
    HnetDataset::from_records(n.expect("non-empty"), &records)
}
