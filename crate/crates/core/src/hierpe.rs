//! Hierarchical coordinate decomposition and scale-aware rescaled bases.
//!
//! A coordinate is expressed in a mixed-radix system whose digits select
//! cells in successive latent-grid levels. Bases (and the weights that
//! rescale them) are listed coarse-to-fine: index 0 is the coarsest level
//! with the largest stride, the last index the finest with stride 1.
//!
//! Scaled decomposition runs the same long division in real arithmetic,
//! flooring each quotient and carrying the real remainder down, so the
//! digits recompose to the input exactly even for non-integer effective
//! bases; only the finest digit keeps a fractional part. With k = 1 this
//! reduces bit-exactly to the integer decomposition.

use crate::error::{CodecError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightPolicy {
    /// Log-evenly spaced weights, finest level pinned to 1.
    LogEven,
    /// All levels share k^(1/L).
    Uniform,
}

/// Per-level bases and rescale weights, coarse-to-fine.
#[derive(Clone, Debug)]
pub struct BaseSchedule {
    bases: Vec<u32>,
    weights: Vec<f64>,
    k: f64,
    policy: WeightPolicy,
}

/// Weights for scale ratio k over L levels, coarse-to-fine, product k.
pub fn solve_weights(levels: usize, k: f64, policy: WeightPolicy) -> Result<Vec<f64>> {
    if levels == 0 {
        return Err(CodecError::Param("level count must be >= 1".into()));
    }
    if k < 1.0 {
        return Err(CodecError::Param(format!("scale ratio {} < 1", k)));
    }
    if levels == 1 {
        return Ok(vec![k]);
    }
    let l = levels as f64;
    let ws = match policy {
        WeightPolicy::LogEven => (1..=levels)
            .map(|i| (2.0 * (l - i as f64) * k.ln() / (l * (l - 1.0))).exp())
            .collect(),
        WeightPolicy::Uniform => vec![k.powf(1.0 / l); levels],
    };
    Ok(ws)
}

impl BaseSchedule {
    pub fn new(bases: &[u32], k: f64, policy: WeightPolicy) -> Result<BaseSchedule> {
        if bases.is_empty() {
            return Err(CodecError::Param("empty base list".into()));
        }
        if bases.iter().any(|&b| b < 1) {
            return Err(CodecError::Param("bases must be >= 1".into()));
        }
        let weights = solve_weights(bases.len(), k, policy)?;
        let sched = BaseSchedule {
            bases: bases.to_vec(),
            weights,
            k,
            policy,
        };
        sched.check_weight_law()?;
        Ok(sched)
    }

    fn check_weight_law(&self) -> Result<()> {
        let prod: f64 = self.weights.iter().product();
        if (prod - self.k).abs() > 1e-9 * self.k.max(1.0) {
            return Err(CodecError::Param(format!(
                "weight product {} != k {}",
                prod, self.k
            )));
        }
        for w in self.weights.windows(2) {
            if w[0] < w[1] - 1e-12 {
                return Err(CodecError::Param("weights must be non-increasing".into()));
            }
        }
        if *self.weights.last().unwrap() < 1.0 - 1e-12 {
            return Err(CodecError::Param("finest weight below 1".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[u32] {
        &self.bases
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn policy(&self) -> WeightPolicy {
        self.policy
    }

    /// Product of all integer bases: the k = 1 coordinate range.
    pub fn total_range(&self) -> u64 {
        self.bases.iter().map(|&b| b as u64).product()
    }

    pub fn effective_base(&self, i: usize) -> f64 {
        self.bases[i] as f64 * self.weights[i]
    }

    /// Stride of digit i: product of all finer (later-listed) bases.
    pub fn stride(&self, i: usize) -> u64 {
        self.bases[i + 1..].iter().map(|&b| b as u64).product()
    }

    pub fn scaled_stride(&self, i: usize) -> f64 {
        (i + 1..self.levels()).map(|j| self.effective_base(j)).product()
    }

    /// Total coordinate range under scaling: product of effective bases.
    pub fn scaled_range(&self) -> f64 {
        (0..self.levels()).map(|i| self.effective_base(i)).product()
    }

    /// Integer mixed-radix digits of pos, coarse-to-fine.
    pub fn decompose(&self, pos: u64) -> Result<Vec<u64>> {
        if pos >= self.total_range() {
            return Err(CodecError::Coord(format!(
                "position {} outside range {}",
                pos,
                self.total_range()
            )));
        }
        let mut digits = Vec::with_capacity(self.levels());
        let mut rem = pos;
        for i in 0..self.levels() {
            let stride = self.stride(i);
            digits.push(rem / stride);
            rem %= stride;
        }
        Ok(digits)
    }

    /// Recompose integer digits: sum of digit * stride.
    pub fn recompose(&self, digits: &[u64]) -> u64 {
        digits
            .iter()
            .enumerate()
            .map(|(i, &d)| d * self.stride(i))
            .sum()
    }

    /// Real-arithmetic digits of pos under the rescaled bases.
    ///
    /// Long division coarse-to-fine with real remainders: every digit but
    /// the finest is an integer count of its effective base, the finest
    /// carries the fractional residue. Digits satisfy
    /// `sum(digit * scaled_stride) == pos` exactly.
    pub fn decompose_scaled(&self, pos: f64) -> Result<Vec<f64>> {
        if !(0.0..self.scaled_range()).contains(&pos) {
            return Err(CodecError::Coord(format!(
                "position {} outside scaled range {}",
                pos,
                self.scaled_range()
            )));
        }
        let levels = self.levels();
        let mut digits = Vec::with_capacity(levels);
        let mut rem = pos;
        for i in 0..levels {
            if i + 1 == levels {
                digits.push(rem);
            } else {
                let stride = self.scaled_stride(i);
                let d = (rem / stride).floor();
                digits.push(d);
                rem -= d * stride;
            }
        }
        Ok(digits)
    }

    /// Recompose scaled digits: sum of digit * scaled stride.
    pub fn recompose_scaled(&self, digits: &[f64]) -> f64 {
        digits
            .iter()
            .enumerate()
            .map(|(i, &d)| d * self.scaled_stride(i))
            .sum()
    }

    /// Cumulative shrink of a fine-first grid level (0 = finest).
    ///
    /// The finest level keeps its resolution (weight 1); coarser levels
    /// absorb progressively more of the scale ratio, up to k at the top.
    pub fn level_shrink(&self, fine_level: usize) -> f64 {
        let l = self.levels();
        debug_assert!(fine_level < l);
        self.weights[l - 1 - fine_level..].iter().product()
    }
}

/// Bilinear query of a rescale/shift latent grid at local coordinates.
///
/// `grid` holds gamma and beta concatenated channel-wise (2C, H, W);
/// returns (gamma, beta), each (C, len).
pub fn query_latent(grid: &Tensor, coords: &[(f32, f32)]) -> Result<(Tensor, Tensor)> {
    let shape = grid.shape();
    if shape.len() != 3 || shape[0] % 2 != 0 {
        return Err(CodecError::Shape(format!(
            "latent grid must be (2C,H,W), got {:?}",
            shape
        )));
    }
    let c = shape[0] / 2;
    let sampled = grid.interp_bilinear(coords)?;
    let gamma = sampled.slice_axis(0, 0, c)?;
    let beta = sampled.slice_axis(0, c, c)?;
    Ok((gamma, beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(bases: &[u32], k: f64) -> BaseSchedule {
        BaseSchedule::new(bases, k, WeightPolicy::LogEven).unwrap()
    }

    #[test]
    fn decompose_zero() {
        assert_eq!(sched(&[2, 2, 2], 1.0).decompose(0).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn decompose_examples() {
        // Digits coarse-to-fine; strides are products of finer bases.
        let s = sched(&[2, 2, 2], 1.0);
        assert_eq!(s.decompose(5).unwrap(), vec![1, 0, 1]);
        assert_eq!(1 * 4 + 0 * 2 + 1, 5);
        let s2 = sched(&[4, 2], 1.0);
        assert_eq!(s2.decompose(7).unwrap(), vec![3, 1]);
        assert_eq!(3 * 2 + 1, 7);
    }

    #[test]
    fn decompose_out_of_range() {
        assert!(matches!(
            sched(&[2, 2], 1.0).decompose(4),
            Err(CodecError::Coord(_))
        ));
    }

    #[test]
    fn recomposition_identity_brute_force() {
        // Mixed-radix oracle over every position of assorted schedules.
        for bases in [vec![2, 2, 2], vec![4, 2], vec![3, 5, 2], vec![1, 7], vec![8]] {
            let s = sched(&bases, 1.0);
            for pos in 0..s.total_range() {
                let d = s.decompose(pos).unwrap();
                assert_eq!(s.recompose(&d), pos, "bases {:?} pos {}", bases, pos);
                for (i, &di) in d.iter().enumerate() {
                    assert!(di < s.bases()[i] as u64);
                }
            }
        }
    }

    #[test]
    fn solve_weights_log_even() {
        let w = solve_weights(3, 8.0, WeightPolicy::LogEven).unwrap();
        assert!((w[0] - 4.0).abs() < 1e-9);
        assert!((w[1] - 2.0).abs() < 1e-9);
        assert!((w[2] - 1.0).abs() < 1e-9);
        // Product, ordering, equal log gaps.
        let prod: f64 = w.iter().product();
        assert!((prod - 8.0).abs() < 1e-9 * 8.0);
        let gap0 = w[0].ln() - w[1].ln();
        let gap1 = w[1].ln() - w[2].ln();
        assert!((gap0 - gap1).abs() < 1e-9);
    }

    #[test]
    fn solve_weights_identity_and_single() {
        for l in 1..=6 {
            let w = solve_weights(l, 1.0, WeightPolicy::LogEven).unwrap();
            assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        }
        let w = solve_weights(1, 3.0, WeightPolicy::LogEven).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_weights_rejects_bad_k() {
        assert!(matches!(
            solve_weights(3, 0.5, WeightPolicy::LogEven),
            Err(CodecError::Param(_))
        ));
    }

    #[test]
    fn weight_law_over_grid() {
        for l in 1..=6usize {
            for &k in &[1.0, 2.0, 8.0, 64.0] {
                let w = solve_weights(l, k, WeightPolicy::LogEven).unwrap();
                let prod: f64 = w.iter().product();
                assert!((prod - k).abs() <= 1e-9 * k, "L={} k={}", l, k);
                for pair in w.windows(2) {
                    assert!(pair[0] >= pair[1] - 1e-12);
                }
                assert!(*w.last().unwrap() >= 1.0 - 1e-12);
                if k > 1.0 && l >= 2 {
                    // Monotone pressure: coarse absorbs more scaling.
                    assert!(w[0] > *w.last().unwrap());
                }
            }
        }
    }

    #[test]
    fn uniform_policy_product() {
        let w = solve_weights(4, 16.0, WeightPolicy::Uniform).unwrap();
        assert!(w.iter().all(|&x| (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn scaled_reduces_to_integer_at_k1() {
        for bases in [vec![2, 2, 2], vec![4, 2], vec![3, 5, 2]] {
            let s = sched(&bases, 1.0);
            for pos in 0..s.total_range() {
                let di = s.decompose(pos).unwrap();
                let ds = s.decompose_scaled(pos as f64).unwrap();
                for (a, b) in di.iter().zip(&ds) {
                    assert_eq!(*a as f64, *b, "bit-identical digits at k=1");
                }
            }
        }
    }

    #[test]
    fn scaled_example_recomposes_exactly() {
        // B=[2,2] (coarse, fine), k=4 => w=(4,1), effective bases (8,2).
        let s = sched(&[2, 2], 4.0);
        assert!((s.effective_base(0) - 8.0).abs() < 1e-12);
        assert!((s.effective_base(1) - 2.0).abs() < 1e-12);
        let d = s.decompose_scaled(9.0).unwrap();
        assert!((s.recompose_scaled(&d) - 9.0).abs() < 1e-9);
        assert!(d[0] >= 0.0 && d[0] < 8.0);
        assert!(d[1] >= 0.0 && d[1] < 2.0);
    }

    #[test]
    fn scaled_zero_gives_zero_digits() {
        for (bases, k) in [(vec![2, 2], 4.0), (vec![3, 2, 2], 2.0), (vec![4], 1.0)] {
            let s = sched(&bases, k);
            let d = s.decompose_scaled(0.0).unwrap();
            assert!(d.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn scaled_recomposition_random_positions() {
        let s = sched(&[2, 2, 2], 2.0);
        let range = s.scaled_range();
        let mut x = 0.137f64;
        for _ in 0..500 {
            x = (x * 9301.0 + 49297.0) % 1.0;
            let pos = x * (range - 1e-6);
            let d = s.decompose_scaled(pos).unwrap();
            assert!((s.recompose_scaled(&d) - pos).abs() < 1e-9);
            for (i, &di) in d.iter().enumerate() {
                assert!(di >= 0.0 && di < s.effective_base(i) + 1e-12);
            }
        }
    }

    #[test]
    fn scaled_out_of_range() {
        let s = sched(&[2, 2], 4.0);
        assert!(matches!(s.decompose_scaled(16.0), Err(CodecError::Coord(_))));
        assert!(matches!(s.decompose_scaled(-0.5), Err(CodecError::Coord(_))));
    }

    #[test]
    fn level_shrink_fine_to_coarse() {
        let s = sched(&[2, 2, 2], 8.0);
        assert!((s.level_shrink(0) - 1.0).abs() < 1e-12);
        assert!((s.level_shrink(1) - 2.0).abs() < 1e-12);
        assert!((s.level_shrink(2) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn query_latent_exact_and_constant() {
        // 2 gamma + 2 beta channels on a 2x2 grid.
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let grid = Tensor::from_slice(&data, &[4, 2, 2]).unwrap();
        let (g, b) = query_latent(&grid, &[(0.0, 1.0), (1.0, 0.0)]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(b.data(), &[9.0, 10.0, 13.0, 14.0]);

        let grid_const = Tensor::full(&[2, 3, 3], 4.25);
        let (g2, b2) = query_latent(&grid_const, &[(0.5, 0.5), (1.7, 2.0)]).unwrap();
        for &v in g2.data().iter().chain(b2.data()) {
            assert!((v - 4.25).abs() < 1e-6);
        }
    }

    #[test]
    fn query_latent_out_of_range() {
        let grid = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            query_latent(&grid, &[(0.0, 3.0)]),
            Err(CodecError::Coord(_))
        ));
    }
}
