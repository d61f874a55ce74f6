//! Padded distance matrices and the exact minimum-cost assignment.

mod shard;

pub use shard::{read_shard, ShardRecord, ShardWriter};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angular_distance, euclidean_distance, DoaVector};

/// Value written outside the valid block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Padding {
    Fixed(f64),
    Uniform { low: f64, high: f64 },
}

impl Padding {
    pub const TRAINING: Padding = Padding::Fixed(10.0);
    pub const RANDOM: Padding = Padding::Uniform { low: 3.0, high: 10.0 };

    fn draw(self, rng: &mut impl Rng) -> f64 {
        match self {
            Padding::Fixed(v) => v,
            Padding::Uniform { low, high } => rng.gen_range(low..=high),
        }
    }

    fn validate(self) -> Result<()> {
        let ok = match self {
            Padding::Fixed(v) => v > 2.0 && v.is_finite(),
            Padding::Uniform { low, high } => low > 2.0 && high >= low && high.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("padding {self:?} must stay above 2")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    /// Chord length between unit vectors, in [0, 2].
    Euclidean,
    /// Great-circle angle in radians, in [0, pi].
    Angular,
}

/// Square `n x n` matrix whose top-left `valid_rows x valid_cols` block
/// holds prediction-to-reference distances (rows are predictions).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
    valid_rows: usize,
    valid_cols: usize,
    padding: Padding,
}

impl DistanceMatrix {
    /// Wraps raw values; entries outside the valid block must exceed 2.
    pub fn from_values(n: usize, values: Vec<f64>, valid_rows: usize, valid_cols: usize) -> Result<Self> {
        if values.len() != n * n || valid_rows > n || valid_cols > n {
            return Err(Error::Argument(format!(
                "distance matrix needs {n}x{n} values with valid block inside, got {} values and {valid_rows}x{valid_cols}",
                values.len()
            )));
        }
        let mut pad_min = f64::INFINITY;
        let mut pad_max = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Argument(format!("entry ({i},{j}) = {v} is not a distance")));
                }
                if i >= valid_rows || j >= valid_cols {
                    if v <= 2.0 {
                        return Err(Error::Argument(format!("padded entry ({i},{j}) = {v} is not above 2")));
                    }
                    pad_min = pad_min.min(v);
                    pad_max = pad_max.max(v);
                }
            }
        }
        let padding = if pad_min > pad_max || pad_min == pad_max {
            Padding::Fixed(if pad_min.is_finite() { pad_min } else { 10.0 })
        } else {
            Padding::Uniform { low: pad_min, high: pad_max }
        };
        Ok(Self { n, values, valid_rows, valid_cols, padding })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn valid_rows(&self) -> usize {
        self.valid_rows
    }

    pub fn valid_cols(&self) -> usize {
        self.valid_cols
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row-major copy of the valid block.
    pub fn valid_block(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.valid_rows * self.valid_cols);
        for i in 0..self.valid_rows {
            out.extend_from_slice(&self.values[i * self.n..i * self.n + self.valid_cols]);
        }
        out
    }
}

/// Binary association matrix over the same padded layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMatrix {
    n: usize,
    values: Vec<u8>,
    valid_rows: usize,
    valid_cols: usize,
}

impl AssociationMatrix {
    pub fn empty(n: usize, valid_rows: usize, valid_cols: usize) -> Self {
        Self { n, values: vec![0; n * n], valid_rows, valid_cols }
    }

    /// Builds from matched `(row, col)` pairs, checking the matching invariants.
    pub fn from_pairs(n: usize, valid_rows: usize, valid_cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n, valid_rows, valid_cols);
        for &(i, j) in pairs {
            if i >= valid_rows || j >= valid_cols {
                return Err(Error::Argument(format!("pair ({i},{j}) lies outside the valid block")));
            }
            if a.row_sum(i) > 0 || a.col_sum(j) > 0 {
                return Err(Error::Argument(format!("pair ({i},{j}) reuses a row or column")));
            }
            a.values[i * n + j] = 1;
        }
        Ok(a)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn valid_rows(&self) -> usize {
        self.valid_rows
    }

    pub fn valid_cols(&self) -> usize {
        self.valid_cols
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.values[i * self.n..(i + 1) * self.n].iter().map(|&v| v as usize).sum()
    }

    pub fn col_sum(&self, j: usize) -> usize {
        (0..self.n).map(|i| self.values[i * self.n + j] as usize).sum()
    }

    /// Number of ones, K_t.
    pub fn matches(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Matched `(row, col)` pairs in row order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.values[i * self.n + j] == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Prediction row matched to reference column `j`.
    pub fn row_for_col(&self, j: usize) -> Option<usize> {
        (0..self.n).find(|&i| self.values[i * self.n + j] == 1)
    }

    pub fn cost(&self, d: &DistanceMatrix) -> f64 {
        self.pairs().iter().map(|&(i, j)| d.get(i, j)).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Pairwise distances between predictions (rows) and references (columns),
/// padded to `n_max x n_max`.
pub fn build_distance_matrix(
    preds: &[DoaVector],
    refs: &[DoaVector],
    n_max: usize,
    kind: DistanceKind,
    padding: Padding,
    rng: &mut impl Rng,
) -> Result<DistanceMatrix> {
    if preds.len() > n_max || refs.len() > n_max {
        return Err(Error::Argument(format!(
            "{} predictions and {} references exceed n_max = {n_max}",
            preds.len(),
            refs.len()
        )));
    }
    padding.validate()?;
    let mut values = vec![0.0; n_max * n_max];
    for i in 0..n_max {
        for j in 0..n_max {
            values[i * n_max + j] = if i < preds.len() && j < refs.len() {
                match kind {
                    DistanceKind::Euclidean => euclidean_distance(preds[i], refs[j]),
                    DistanceKind::Angular => angular_distance(preds[i], refs[j])?,
                }
            } else {
                padding.draw(rng)
            };
        }
    }
    Ok(DistanceMatrix { n: n_max, values, valid_rows: preds.len(), valid_cols: refs.len(), padding })
}

/// Minimum-cost matching of `rows x cols` costs (row-major) with
/// `rows <= cols`, every row matched. Shortest augmenting paths with
/// potentials, rows inserted in increasing index order. Returns the column
/// of each row.
fn solve_rows_le_cols(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    // 1-based potentials and matching; column 0 is the virtual source
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact minimum-cost matching of the valid block; padding never matches.
pub fn hungarian(d: &DistanceMatrix) -> AssociationMatrix {
    let (m, n) = (d.valid_rows, d.valid_cols);
    let mut a = AssociationMatrix::empty(d.n, m, n);
    if m == 0 || n == 0 {
        return a;
    }
    let block = d.valid_block();
    if m <= n {
        for (i, j) in solve_rows_le_cols(&block, m, n).into_iter().enumerate() {
            a.values[i * d.n + j] = 1;
        }
    } else {
        let mut transposed = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                transposed[j * m + i] = block[i * n + j];
            }
        }
        for (j, i) in solve_rows_le_cols(&transposed, n, m).into_iter().enumerate() {
            a.values[i * d.n + j] = 1;
        }
    }
    a
}
