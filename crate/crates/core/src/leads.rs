//! 12-lead / 8-lead conversions.
//!
//! Only 8 of the standard 12 leads are linearly independent; the limb leads
//! III, aVR, aVL, aVF follow from I and II:
//!
//! ```text
//! III = II - I
//! aVR = -(I + II) / 2
//! aVL = I - II / 2
//! aVF = II - I / 2
//! ```
//!
//! Training uses the reduced 8-lead form; the full 12-lead record is
//! reconstructed for output.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const LEAD_NAMES_12: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

pub const LEAD_NAMES_8: [&str; 8] = ["I", "II", "V1", "V2", "V3", "V4", "V5", "V6"];

/// A full 12-lead record, rows ordered as [`LEAD_NAMES_12`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeadSet12 {
    pub signal: Array2<f32>,
}

/// The 8 linearly independent leads, rows ordered as [`LEAD_NAMES_8`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeadSet8 {
    pub signal: Array2<f32>,
}

fn reorder(names: &[String], signal: &Array2<f32>, want: &[&str]) -> Result<Array2<f32>> {
    if names.len() != signal.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} lead names", signal.nrows()),
            got: format!("{}", names.len()),
        });
    }
    let mut out = Array2::zeros((want.len(), signal.ncols()));
    for (row, lead) in want.iter().enumerate() {
        let src = names
            .iter()
            .position(|n| n == lead)
            .ok_or_else(|| Error::Dataset(format!("missing lead {lead}")))?;
        out.row_mut(row).assign(&signal.row(src));
    }
    Ok(out)
}

impl LeadSet12 {
    /// Build from arbitrarily ordered named channels; errors on a missing
    /// lead.
    pub fn from_named(names: &[String], signal: &Array2<f32>) -> Result<Self> {
        Ok(LeadSet12 {
            signal: reorder(names, signal, &LEAD_NAMES_12)?,
        })
    }
}

impl LeadSet8 {
    pub fn from_named(names: &[String], signal: &Array2<f32>) -> Result<Self> {
        Ok(LeadSet8 {
            signal: reorder(names, signal, &LEAD_NAMES_8)?,
        })
    }
}

/// Keep I, II, V1..V6; drop the four derived limb leads.
pub fn reduce_to_independent(r: &LeadSet12) -> LeadSet8 {
    let cols = r.signal.ncols();
    let mut signal = Array2::zeros((8, cols));
    // Source rows in LEAD_NAMES_12 order: I, II, then V1..V6.
    let src_rows = [0usize, 1, 6, 7, 8, 9, 10, 11];
    for (dst, src) in src_rows.iter().enumerate() {
        signal.row_mut(dst).assign(&r.signal.row(*src));
    }
    LeadSet8 { signal }
}

/// Derive III, aVR, aVL, aVF pointwise from I and II.
pub fn reconstruct_full(r: &LeadSet8) -> LeadSet12 {
    let cols = r.signal.ncols();
    let mut signal = Array2::zeros((12, cols));
    signal.row_mut(0).assign(&r.signal.row(0)); // I
    signal.row_mut(1).assign(&r.signal.row(1)); // II
    for k in 0..cols {
        let i = r.signal[[0, k]];
        let ii = r.signal[[1, k]];
        signal[[2, k]] = ii - i; // III
        signal[[3, k]] = -(i + ii) / 2.0; // aVR
        signal[[4, k]] = i - ii / 2.0; // aVL
        signal[[5, k]] = ii - i / 2.0; // aVF
    }
    for v in 0..6 {
        signal.row_mut(6 + v).assign(&r.signal.row(2 + v)); // V1..V6
    }
    LeadSet12 { signal }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names12() -> Vec<String> {
        LEAD_NAMES_12.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reconstruct_constant_leads() {
        // I = 0.5, II = 1.0 -> III = 0.5, aVR = -0.75, aVL = 0.0, aVF = 0.75
        let mut signal = Array2::zeros((8, 4));
        signal.row_mut(0).fill(0.5);
        signal.row_mut(1).fill(1.0);
        let full = reconstruct_full(&LeadSet8 { signal });
        for k in 0..4 {
            assert_eq!(full.signal[[2, k]], 0.5);
            assert_eq!(full.signal[[3, k]], -0.75);
            assert_eq!(full.signal[[4, k]], 0.0);
            assert_eq!(full.signal[[5, k]], 0.75);
        }
    }

    #[test]
    fn zero_limb_leads_stay_zero() {
        let signal = Array2::zeros((8, 10));
        let full = reconstruct_full(&LeadSet8 { signal });
        for row in 2..6 {
            assert!(full.signal.row(row).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn einthoven_and_goldberger_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let signal = Array2::from_shape_simple_fn((8, 64), || rng.gen_range(-2.0f32..2.0));
        let full = reconstruct_full(&LeadSet8 { signal });
        for k in 0..64 {
            let (i, ii, iii) = (full.signal[[0, k]], full.signal[[1, k]], full.signal[[2, k]]);
            assert!((i + iii - ii).abs() < 1e-6);
            let (avr, avl, avf) = (full.signal[[3, k]], full.signal[[4, k]], full.signal[[5, k]]);
            assert!((avr + avl + avf).abs() < 1e-6);
        }
    }

    #[test]
    fn reduce_then_reconstruct_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eight = Array2::from_shape_simple_fn((8, 32), || rng.gen_range(-2.0f32..2.0));
        let full = reconstruct_full(&LeadSet8 {
            signal: eight.clone(),
        });
        // reduce(reconstruct(x)) == x exactly: pure row selection.
        let back = reduce_to_independent(&full);
        assert_eq!(back.signal, eight);
        // reconstruct(reduce(r)) == r when r satisfies the identities.
        let again = reconstruct_full(&back);
        for (a, b) in again.signal.iter().zip(full.signal.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reduce_preserves_samples_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let signal = Array2::from_shape_simple_fn((12, 16), || rng.gen_range(-2.0f32..2.0));
        let full = LeadSet12 {
            signal: signal.clone(),
        };
        let eight = reduce_to_independent(&full);
        for (dst, src) in [0usize, 1, 6, 7, 8, 9, 10, 11].iter().enumerate() {
            assert_eq!(eight.signal.row(dst), signal.row(*src));
        }
        let zeros = LeadSet12 {
            signal: Array2::zeros((12, 16)),
        };
        assert!(reduce_to_independent(&zeros).signal.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn named_construction_checks_channels() {
        let signal = Array2::zeros((12, 8));
        assert!(LeadSet12::from_named(&names12(), &signal).is_ok());

        let mut missing = names12();
        missing[3] = "X".to_string();
        assert!(LeadSet12::from_named(&missing, &signal).is_err());

        // Order-insensitive: shuffled names land in canonical rows.
        let mut shuffled = names12();
        shuffled.swap(0, 5);
        let mut sig = Array2::zeros((12, 8));
        sig.row_mut(0).fill(7.0); // carries lead aVF after the swap
        let set = LeadSet12::from_named(&shuffled, &sig).unwrap();
        assert!(set.signal.row(5).iter().all(|v| *v == 7.0));
        assert!(set.signal.row(0).iter().all(|v| *v == 0.0));
    }
}
