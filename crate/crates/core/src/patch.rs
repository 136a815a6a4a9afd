//! Patch grids, patch importance, and mixed-precision bit allocation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A matrix zero-padded to multiples of `p` and cut into raster-ordered
/// `p x p` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub original_shape: (usize, usize),
    pub padded_shape: (usize, usize),
    pub patches: Vec<Matrix<f64>>,
}

/// Padded shape and patch-grid dimensions for a matrix of `shape`.
pub fn grid_dims(shape: (usize, usize), p: usize) -> (usize, usize) {
    (shape.0.div_ceil(p), shape.1.div_ceil(p))
}

/// Number of patches covering a matrix of `shape`.
pub fn patch_count(shape: (usize, usize), p: usize) -> usize {
    let (gr, gc) = grid_dims(shape, p);
    gr * gc
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patches per row of the grid.
    pub fn grid_cols(&self) -> usize {
        self.padded_shape.1 / self.patch_size
    }
}

/// Largest accepted patch side.
pub const MAX_PATCH_SIZE: usize = 4096;

/// Splits `matrix` into `p x p` patches, zero-padding the bottom and right edges.
pub fn patchlize(matrix: &Matrix<f32>, p: usize) -> Result<PatchGrid> {
    if p == 0 {
        return Err(Error::InvalidPatchSize(p));
    }
    if matrix.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (rows, cols) = matrix.shape();
    let (gr, gc) = grid_dims((rows, cols), p);
    let mut patches = Vec::with_capacity(gr * gc);
    for pr in 0..gr {
        for pc in 0..gc {
            patches.push(Matrix::from_fn(p, p, |i, j| {
                let (r, c) = (pr * p + i, pc * p + j);
                if r < rows && c < cols {
                    f64::from(matrix.get(r, c))
                } else {
                    0.0
                }
            }));
        }
    }
    Ok(PatchGrid {
        patch_size: p,
        original_shape: (rows, cols),
        padded_shape: (gr * p, gc * p),
        patches,
    })
}

/// Places patches back at their raster positions and crops the padding.
pub fn reassemble(grid: &PatchGrid) -> Result<Matrix<f32>> {
    let p = grid.patch_size;
    if p == 0 {
        return Err(Error::InvalidPatchSize(p));
    }
    let (rows, cols) = grid.original_shape;
    let (pr_total, pc_total) = grid.padded_shape;
    if pr_total % p != 0 || pc_total % p != 0 || grid_dims((rows, cols), p) != (pr_total / p, pc_total / p)
    {
        return Err(Error::DimensionMismatch(format!(
            "padded shape {:?} inconsistent with original {:?} at patch size {p}",
            grid.padded_shape, grid.original_shape
        )));
    }
    let gc = pc_total / p;
    let expected = (pr_total / p) * gc;
    if grid.patches.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "grid holds {} patches, padded shape needs {expected}",
            grid.patches.len()
        )));
    }
    if let Some(bad) = grid.patches.iter().position(|q| q.shape() != (p, p)) {
        return Err(Error::DimensionMismatch(format!("patch {bad} is not {p}x{p}")));
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let patch = &grid.patches[(r / p) * gc + c / p];
            out.set(r, c, patch.get(r % p, c % p) as f32);
        }
    }
    Ok(out)
}

/// Per-patch importance: the L2 (Frobenius) norm of each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector(pub Vec<f64>);

impl ImportanceVector {
    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn importance_scores(grid: &PatchGrid) -> ImportanceVector {
    ImportanceVector(grid.patches.iter().map(Matrix::frobenius_norm).collect())
}

/// One precision level of a mixed-precision plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitLevel {
    pub bits: u8,
    pub ratio: f64,
}

/// Mixed-precision configuration and, once allocated, the per-patch widths.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlan {
    pub levels: Vec<BitLevel>,
    pub per_patch: Option<Vec<u8>>,
}

const RATIO_TOLERANCE: f64 = 1e-9;

impl BitPlan {
    pub fn new(levels: Vec<BitLevel>) -> Result<Self> {
        let plan = Self {
            levels,
            per_patch: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// 2-bit on half the patches and 0-bit on the rest.
    pub fn headline() -> Self {
        Self::new(vec![
            BitLevel { bits: 2, ratio: 0.5 },
            BitLevel { bits: 0, ratio: 0.5 },
        ])
        .unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidBitPlan("no levels".into()));
        }
        for l in &self.levels {
            if l.bits > 32 {
                return Err(Error::BitWidthTooLarge(u32::from(l.bits)));
            }
            if !(0.0..=1.0).contains(&l.ratio) {
                return Err(Error::InvalidBitPlan(format!(
                    "ratio {} for {}-bit level is outside [0, 1]",
                    l.ratio, l.bits
                )));
            }
        }
        if self.levels.windows(2).any(|w| w[0].bits <= w[1].bits) {
            return Err(Error::InvalidBitPlan(
                "bit widths must be strictly decreasing".into(),
            ));
        }
        let sum: f64 = self.levels.iter().map(|l| l.ratio).sum();
        if (sum - 1.0).abs() > RATIO_TOLERANCE {
            return Err(Error::InvalidBitPlan(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Largest-remainder conversion of ratios into patch counts summing to `m`.
    ///
    /// Each level first gets `floor(r * m)`; leftover patches go one per level
    /// in descending order of fractional part, ties going to the higher width.
    pub fn level_counts(&self, m: usize) -> Vec<usize> {
        let mf = m as f64;
        let mut counts = Vec::with_capacity(self.levels.len());
        let mut fracs = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            let mut exact = l.ratio * mf;
            // Ratios like 0.1 are not exact in binary; snap products that are
            // integral up to rounding noise.
            if (exact - exact.round()).abs() <= RATIO_TOLERANCE * mf.max(1.0) {
                exact = exact.round();
            }
            let floor = exact.floor();
            counts.push(floor as usize);
            fracs.push(exact - floor);
        }
        let assigned: usize = counts.iter().sum();
        let mut leftover = m.saturating_sub(assigned);
        // Levels are stored in descending width, so a stable sort on the
        // fractional part keeps higher widths first among ties.
        let mut order: Vec<usize> = (0..self.levels.len()).collect();
        order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]));
        let mut i = 0;
        while leftover > 0 {
            counts[order[i % order.len()]] += 1;
            leftover -= 1;
            i += 1;
        }
        counts
    }

    /// Average stored code bits per parameter, ignoring range overhead.
    pub fn mean_bits(&self) -> f64 {
        self.levels.iter().map(|l| f64::from(l.bits) * l.ratio).sum()
    }
}

impl Default for BitPlan {
    fn default() -> Self {
        Self::headline()
    }
}

impl fmt::Display for BitPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", l.bits, l.ratio)?;
        }
        Ok(())
    }
}

/// Parses `bit:ratio` pairs separated by commas, e.g. `8:0.1,3:0.4,2:0.5`.
impl FromStr for BitPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut levels = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let (b, r) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidBitPlan(format!("`{part}` is not bit:ratio")))?;
            let bits: u8 = b
                .trim()
                .parse()
                .map_err(|_| Error::InvalidBitPlan(format!("bad bit width `{b}`")))?;
            let ratio: f64 = r
                .trim()
                .parse()
                .map_err(|_| Error::InvalidBitPlan(format!("bad ratio `{r}`")))?;
            if !ratio.is_finite() {
                return Err(Error::InvalidBitPlan(format!("bad ratio `{r}`")));
            }
            levels.push(BitLevel { bits, ratio });
        }
        BitPlan::new(levels)
    }
}

/// Assigns one bit width per patch: higher scores get wider levels.
///
/// Patches are ranked by descending score, ties by ascending raster index.
pub fn allocate_bits(scores: &ImportanceVector, plan: &BitPlan) -> Result<BitPlan> {
    plan.validate()?;
    let m = scores.len();
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    if scores.0.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(Some("importance scores".into())));
    }
    let counts = plan.level_counts(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));

    let mut per_patch = vec![0u8; m];
    let mut ranked = order.into_iter();
    for (level, count) in plan.levels.iter().zip(counts) {
        for idx in ranked.by_ref().take(count) {
            per_patch[idx] = level.bits;
        }
    }
    Ok(BitPlan {
        levels: plan.levels.clone(),
        per_patch: Some(per_patch),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan(s: &str) -> BitPlan {
        s.parse().unwrap()
    }

    #[test]
    fn four_by_four_into_four_patches() {
        let m = Matrix::from_fn(4, 4, |r, c| (r * 4 + c) as f32);
        let g = patchlize(&m, 2).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.patches[0], Matrix::from_rows(&[[0.0, 1.0], [4.0, 5.0]]));
        assert_eq!(g.patches[1], Matrix::from_rows(&[[2.0, 3.0], [6.0, 7.0]]));
        assert_eq!(g.patches[2], Matrix::from_rows(&[[8.0, 9.0], [12.0, 13.0]]));
    }

    #[test]
    fn ragged_shape_is_padded_with_zeros() {
        let m = Matrix::from_fn(5, 3, |r, c| (1 + r * 3 + c) as f32);
        let g = patchlize(&m, 4).unwrap();
        assert_eq!(g.padded_shape, (8, 4));
        assert_eq!(g.len(), 2);
        assert_eq!(g.patches[0].get(0, 3), 0.0);
        let second = &g.patches[1];
        assert_eq!(second.get(0, 0), 13.0);
        assert!(second.as_slice()[4..].iter().all(|&v| v == 0.0));
        let back = reassemble(&g).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn single_patch_reassembles_verbatim() {
        let m = Matrix::from_rows(&[[1.5f32, -2.0], [0.25, 8.0]]);
        let g = patchlize(&m, 2).unwrap();
        assert_eq!(reassemble(&g).unwrap(), m);
    }

    #[test]
    fn rejects_zero_patch_size_and_bad_grids() {
        let m = Matrix::<f32>::zeros(2, 2);
        assert!(matches!(patchlize(&m, 0), Err(Error::InvalidPatchSize(0))));
        assert!(matches!(patchlize(&Matrix::<f32>::zeros(0, 0), 2), Err(Error::EmptyInput)));
        let mut g = patchlize(&Matrix::<f32>::zeros(4, 4), 2).unwrap();
        g.patches.pop();
        assert!(reassemble(&g).is_err());
    }

    #[test]
    fn importance_is_patch_norm() {
        let m = Matrix::from_rows(&[[3.0f32, 0.0, 0.0, 0.0], [0.0, 4.0, 0.0, 0.0]]);
        let s = importance_scores(&patchlize(&m, 2).unwrap());
        assert_eq!(s.0, vec![5.0, 0.0]);
    }

    #[test]
    fn plan_parsing_and_validation() {
        assert_eq!(plan("2:0.5,0:0.5"), BitPlan::headline());
        assert_eq!(plan("8:0.1, 3:0.4, 2:0.5").levels.len(), 3);
        assert_eq!(plan("1:1.0").levels, vec![BitLevel { bits: 1, ratio: 1.0 }]);
        for bad in ["", "2", "2:0.5", "0:0.5,2:0.5", "2:0.5,2:0.5", "33:1", "2:x", "2:1.5,0:-0.5", "2:nan"] {
            assert!(bad.parse::<BitPlan>().is_err(), "{bad} should fail");
        }
        assert_eq!(plan("8:0.1,3:0.4,2:0.5").to_string(), "8:0.1,3:0.4,2:0.5");
    }

    #[test]
    fn allocation_follows_score_order() {
        let s = ImportanceVector(vec![3.0, 1.0, 2.0, 0.5]);
        let a = allocate_bits(&s, &BitPlan::headline()).unwrap();
        assert_eq!(a.per_patch.unwrap(), vec![2, 0, 2, 0]);
    }

    #[test]
    fn odd_count_remainder_goes_to_higher_width() {
        assert_eq!(BitPlan::headline().level_counts(5), vec![3, 2]);
        assert_eq!(BitPlan::headline().level_counts(1), vec![1, 0]);
        assert_eq!(plan("8:0.1,3:0.4,2:0.5").level_counts(10), vec![1, 4, 5]);
        // floor = (0, 2, 3); fractions (.7, .8, .5): the 3-bit level takes the spare, then 8-bit.
        assert_eq!(plan("8:0.1,3:0.4,2:0.5").level_counts(7), vec![1, 3, 3]);
    }

    #[test]
    fn equal_scores_follow_raster_order() {
        let s = ImportanceVector(vec![1.0; 6]);
        let a = allocate_bits(&s, &plan("4:0.5,1:0.5")).unwrap();
        assert_eq!(a.per_patch.unwrap(), vec![4, 4, 4, 1, 1, 1]);
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(allocate_bits(&ImportanceVector(vec![]), &BitPlan::headline()).is_err());
    }

    proptest! {
        #[test]
        fn patch_round_trip(rows in 1usize..20, cols in 1usize..20, p in 1usize..9, seed in any::<u64>()) {
            let m = Matrix::from_fn(rows, cols, |r, c| {
                let h = seed.wrapping_mul(6364136223846793005).wrapping_add((r * 31 + c) as u64);
                ((h >> 40) as f32 / 65536.0) - 128.0
            });
            let g = patchlize(&m, p).unwrap();
            prop_assert_eq!(g.len(), (g.padded_shape.0 / p) * (g.padded_shape.1 / p));
            prop_assert_eq!(reassemble(&g).unwrap(), m.clone());
            // Padding contributes nothing to the norms.
            let total: f64 = importance_scores(&g).0.iter().map(|s| s * s).sum();
            let direct: f64 = m.as_slice().iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            prop_assert!((total - direct).abs() <= 1e-9 * direct.max(1.0));
        }

        #[test]
        fn allocation_is_monotone_and_exact(scores in proptest::collection::vec(0.0f64..10.0, 1..80)) {
            let p = plan("8:0.1,3:0.4,2:0.5");
            let a = allocate_bits(&ImportanceVector(scores.clone()), &p).unwrap();
            let widths = a.per_patch.unwrap();
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] > scores[j] {
                        prop_assert!(widths[i] >= widths[j]);
                    }
                }
            }
            let counts = p.level_counts(scores.len());
            prop_assert_eq!(counts.iter().sum::<usize>(), scores.len());
            for (l, c) in p.levels.iter().zip(&counts) {
                prop_assert_eq!(widths.iter().filter(|&&w| w == l.bits).count(), *c);
            }
        }
    }
}
