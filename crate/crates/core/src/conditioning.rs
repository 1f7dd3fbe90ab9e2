//! Label conditioning mechanisms.
//!
//! Two mechanisms are provided and kept A/B-comparable:
//!
//! * `legacy` — the label vector times an `(N x d)` embedding matrix. An
//!   all-zero label vector maps to the zero embedding, so neutral samples
//!   carry no conditioning signal. Kept as a regression contract.
//! * `nle` — a per-label two-row table of shape `(N, 2, d)`: row 0 encodes
//!   "label absent", row 1 "label present". The `N` gathered rows are folded
//!   to one `d`-vector by a trainable 1x1 convolution (`N` weights plus an
//!   optional scalar bias). Neutral samples get their own trainable code.
//!
//! An optional padding row (outside the table) backs a padding label entry;
//! it is a hook only, no guidance-style training is implemented here.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One entry of a label vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelEntry {
    Zero,
    One,
    Pad,
}

/// Multilabel condition: one entry per label, each 0/1 or PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<LabelEntry>);

impl LabelVector {
    pub fn new(entries: Vec<LabelEntry>) -> Self {
        LabelVector(entries)
    }

    /// Build from 0/1 bits.
    pub fn from_bits(bits: &[u8]) -> Self {
        LabelVector(
            bits.iter()
                .map(|b| if *b == 0 { LabelEntry::Zero } else { LabelEntry::One })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_pad(&self) -> bool {
        self.0.iter().any(|e| *e == LabelEntry::Pad)
    }

    /// The 0/1 value at `index`, or `None` for PAD.
    pub fn bit(&self, index: usize) -> Option<u8> {
        match self.0[index] {
            LabelEntry::Zero => Some(0),
            LabelEntry::One => Some(1),
            LabelEntry::Pad => None,
        }
    }

    /// Bits for serialization; errors if any entry is PAD.
    pub fn to_bits(&self) -> Result<Vec<u8>> {
        self.0
            .iter()
            .map(|e| match e {
                LabelEntry::Zero => Ok(0),
                LabelEntry::One => Ok(1),
                LabelEntry::Pad => Err(Error::Dataset(
                    "PAD entries cannot be serialized as label bits".into(),
                )),
            })
            .collect()
    }
}

/// Legacy `(N x d)` embedding matrix, stored row-major.
#[derive(Debug, Clone)]
pub struct LegacyEmbeddingMatrix {
    pub n_labels: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl LegacyEmbeddingMatrix {
    pub fn init(n_labels: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let rows = (0..n_labels * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        LegacyEmbeddingMatrix { n_labels, dim, rows }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Two-row-per-label embedding table `(N, 2, d)` plus the optional padding
/// row kept outside the table.
#[derive(Debug, Clone)]
pub struct LabelEmbeddingTable {
    pub n_labels: usize,
    pub dim: usize,
    /// Row-major `(N, 2, d)`.
    pub rows: Vec<f64>,
    pub pad_row: Option<Vec<f64>>,
}

impl LabelEmbeddingTable {
    pub fn init(n_labels: usize, dim: usize, with_pad: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut draw = |count: usize| -> Vec<f64> {
            (0..count)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect()
        };
        LabelEmbeddingTable {
            n_labels,
            dim,
            rows: draw(n_labels * 2 * dim),
            pad_row: if with_pad { Some(draw(dim)) } else { None },
        }
    }

    /// The table row for label `i`, value `v` (0 or 1).
    pub fn row(&self, i: usize, v: usize) -> &[f64] {
        let base = (i * 2 + v) * self.dim;
        &self.rows[base..base + self.dim]
    }
}

/// Trainable 1x1 fold of `N` gathered rows into one `d`-vector.
#[derive(Debug, Clone)]
pub struct FoldConv {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl FoldConv {
    /// Uniform `1/N` weights and zero bias: unbiased mixing at start.
    pub fn init(n_labels: usize) -> Self {
        FoldConv {
            weights: vec![1.0 / n_labels as f64; n_labels],
            bias: 0.0,
        }
    }
}

/// Legacy mechanism: `sum_i y_i e_i`. PAD is unsupported here.
pub fn embed_legacy(matrix: &LegacyEmbeddingMatrix, y: &LabelVector) -> Result<Vec<f64>> {
    if y.len() != matrix.n_labels {
        return Err(Error::LabelCount {
            expected: matrix.n_labels,
            got: y.len(),
        });
    }
    let mut out = vec![0.0; matrix.dim];
    for i in 0..matrix.n_labels {
        match y.bit(i) {
            Some(0) => {}
            Some(_) => {
                for (slot, v) in out.iter_mut().zip(matrix.row(i)) {
                    *slot += v;
                }
            }
            None => return Err(Error::PadUnsupportedByLegacy),
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to the legacy matrix, given the
/// cotangent of the embedding output. Zero labels contribute nothing, which
/// is exactly the legacy mechanism's blind spot.
pub fn embed_legacy_backward(
    matrix: &LegacyEmbeddingMatrix,
    y: &LabelVector,
    d_out: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; matrix.n_labels * matrix.dim];
    for i in 0..matrix.n_labels {
        match y.bit(i) {
            Some(0) => {}
            Some(_) => {
                grad[i * matrix.dim..(i + 1) * matrix.dim].copy_from_slice(d_out);
            }
            None => return Err(Error::PadUnsupportedByLegacy),
        }
    }
    Ok(grad)
}

/// nle mechanism: gather `r_i = E[i, y_i, :]` (or the padding row), then
/// fold: `out = sum_i w_i r_i + bias`.
pub fn embed_nle(
    table: &LabelEmbeddingTable,
    fold: &FoldConv,
    y: &LabelVector,
) -> Result<Vec<f64>> {
    if y.len() != table.n_labels {
        return Err(Error::LabelCount {
            expected: table.n_labels,
            got: y.len(),
        });
    }
    let mut out = vec![fold.bias; table.dim];
    for i in 0..table.n_labels {
        let row = match y.bit(i) {
            Some(v) => table.row(i, v as usize),
            None => table
                .pad_row
                .as_deref()
                .ok_or(Error::PadRowMissing)?,
        };
        let w = fold.weights[i];
        for (slot, v) in out.iter_mut().zip(row) {
            *slot += w * v;
        }
    }
    Ok(out)
}

/// Gradients for the nle mechanism given the output cotangent.
pub struct NleGrads {
    /// Same layout as `LabelEmbeddingTable::rows`.
    pub d_rows: Vec<f64>,
    pub d_pad_row: Option<Vec<f64>>,
    pub d_weights: Vec<f64>,
    pub d_bias: f64,
}

pub fn embed_nle_backward(
    table: &LabelEmbeddingTable,
    fold: &FoldConv,
    y: &LabelVector,
    d_out: &[f64],
) -> Result<NleGrads> {
    let dim = table.dim;
    let mut d_rows = vec![0.0; table.rows.len()];
    let mut d_pad_row = table.pad_row.as_ref().map(|_| vec![0.0; dim]);
    let mut d_weights = vec![0.0; table.n_labels];
    for i in 0..table.n_labels {
        let w = fold.weights[i];
        match y.bit(i) {
            Some(v) => {
                let base = (i * 2 + v as usize) * dim;
                let row = &table.rows[base..base + dim];
                d_weights[i] = dot(d_out, row);
                for (j, g) in d_out.iter().enumerate() {
                    d_rows[base + j] += w * g;
                }
            }
            None => {
                let pad = table.pad_row.as_deref().ok_or(Error::PadRowMissing)?;
                d_weights[i] = dot(d_out, pad);
                let slot = d_pad_row.as_mut().expect("pad row present");
                for (j, g) in d_out.iter().enumerate() {
                    slot[j] += w * g;
                }
            }
        }
    }
    Ok(NleGrads {
        d_rows,
        d_pad_row,
        d_weights,
        d_bias: d_out.iter().sum(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_of_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Diagnostic for the neutral-sample fix: the minimum embedding gap between
/// flipping a single label from 0 to 1 with all other labels at 0. Positive
/// after initialization because the two rows per label are drawn
/// independently.
pub fn neutral_distinguishability(table: &LabelEmbeddingTable, fold: &FoldConv) -> Result<f64> {
    let zeros = LabelVector::from_bits(&vec![0; table.n_labels]);
    let base = embed_nle(table, fold, &zeros)?;
    let mut min_gap = f64::INFINITY;
    for i in 0..table.n_labels {
        let mut bits = vec![0u8; table.n_labels];
        bits[i] = 1;
        let flipped = embed_nle(table, fold, &LabelVector::from_bits(&bits))?;
        min_gap = min_gap.min(norm_of_diff(&base, &flipped));
    }
    Ok(min_gap)
}

/// The legacy analogue of [`neutral_distinguishability`]: flipping label `i`
/// moves the embedding from 0-contribution to `e_i`, so the gap is `||e_i||`.
pub fn neutral_distinguishability_legacy(matrix: &LegacyEmbeddingMatrix) -> f64 {
    (0..matrix.n_labels)
        .map(|i| dot(matrix.row(i), matrix.row(i)).sqrt())
        .fold(f64::INFINITY, f64::min)
}
