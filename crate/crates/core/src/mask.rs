//! Multiplicative occlusion masks for incomplete training data: a hard
//! rectangular mask that zeroes an alpha x alpha box at a random center, and
//! a soft radial mask `1 - exp(-d^2 / (2 beta^2))`. Masks are applied to
//! training images only, never to labels.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Ideal,
    Gaussian,
}

/// Mask shape parameters. The occluded extent is derived from `lambda` and
/// the grid: side `alpha = round(lambda * min(H, W))` for the ideal mask,
/// radius `beta = lambda * min(H, W)` for the Gaussian mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub lambda: f64,
    #[serde(default)]
    pub paper_literal_center_range: bool,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(CoreError::MaskSpec(format!(
                "lambda must lie in (0, 1), got {lambda}"
            )));
        }
        Ok(MaskSpec {
            kind,
            lambda,
            paper_literal_center_range: false,
        })
    }

    /// Ideal-mask side for a given grid.
    pub fn side(&self, h: usize, w: usize) -> usize {
        (self.lambda * h.min(w) as f64).round() as usize
    }

    /// Gaussian-mask radius for a given grid.
    pub fn radius(&self, h: usize, w: usize) -> f64 {
        self.lambda * h.min(w) as f64
    }
}

/// A concrete mask grid with the center it was sampled at.
#[derive(Debug, Clone)]
pub struct MaskRealization {
    pub spec: MaskSpec,
    pub center: (usize, usize),
    pub grid: Array2<f64>,
}

/// Admissible center interval along one axis of length `n` for box side
/// `alpha`: `[ceil(alpha/2), n - floor(alpha/2) - 1]`. Near `alpha = n` that
/// interval is empty while the box still fits; the exact-containment
/// interval `[floor(alpha/2), n - ceil(alpha/2)]` is used instead.
fn center_range(alpha: usize, n: usize) -> Result<(usize, usize)> {
    if alpha == 0 {
        return Err(CoreError::MaskSpec("mask side alpha must be >= 1".into()));
    }
    if alpha > n {
        return Err(CoreError::MaskSpec(format!(
            "mask side alpha = {alpha} exceeds grid extent {n}"
        )));
    }
    let lo = alpha.div_ceil(2);
    let hi = n - alpha / 2;
    if lo < hi {
        Ok((lo, hi - 1))
    } else {
        Ok((alpha / 2, n - alpha.div_ceil(2)))
    }
}

fn center_range_paper_literal(alpha: usize, n: usize) -> Result<(usize, usize)> {
    let lo = alpha.div_ceil(2);
    let hi = (n - alpha.min(n)) / 2;
    if lo > hi {
        return Err(CoreError::MaskSpec(format!(
            "literal center range [{lo}, {hi}] is empty for alpha = {alpha}, extent {n}"
        )));
    }
    Ok((lo, hi))
}

/// Draws a uniformly random center such that the occlusion box lies fully
/// inside an `h x w` grid.
pub fn sample_center(
    spec: &MaskSpec,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    let alpha = spec.side(h, w);
    let range = if spec.paper_literal_center_range {
        center_range_paper_literal
    } else {
        center_range
    };
    let (ulo, uhi) = range(alpha, h)?;
    let (vlo, vhi) = range(alpha, w)?;
    let u = rng.random_range(ulo..=uhi);
    let v = rng.random_range(vlo..=vhi);
    Ok((u, v))
}

/// Binary mask: 0 inside the `alpha x alpha` box anchored so that the center
/// pixel is at `(u_c, v_c)` (box start = center - floor(alpha/2)), 1 outside.
pub fn ideal_mask(h: usize, w: usize, center: (usize, usize), alpha: usize) -> Result<Array2<f64>> {
    let (uc, vc) = center;
    let half = alpha / 2;
    if uc < half || vc < half || uc - half + alpha > h || vc - half + alpha > w {
        return Err(CoreError::MaskSpec(format!(
            "box of side {alpha} at center ({uc}, {vc}) exits the {h}x{w} grid"
        )));
    }
    let mut grid = Array2::<f64>::ones((h, w));
    for u in (uc - half)..(uc - half + alpha) {
        for v in (vc - half)..(vc - half + alpha) {
            grid[[u, v]] = 0.0;
        }
    }
    Ok(grid)
}

/// Soft radial mask `1 - exp(-d^2 / (2 beta^2))`; exactly 0 at the center
/// pixel and strictly increasing in distance from it.
pub fn gaussian_mask(h: usize, w: usize, center: (usize, usize), beta: f64) -> Array2<f64> {
    debug_assert!(beta > 0.0);
    let (uc, vc) = (center.0 as f64, center.1 as f64);
    Array2::from_shape_fn((h, w), |(u, v)| {
        let du = u as f64 - uc;
        let dv = v as f64 - vc;
        1.0 - (-(du * du + dv * dv) / (2.0 * beta * beta)).exp()
    })
}

/// Samples a fresh realization (center + grid) for one image visit.
pub fn sample_realization(
    spec: &MaskSpec,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskRealization> {
    let center = sample_center(spec, h, w, rng)?;
    let grid = match spec.kind {
        MaskKind::Ideal => ideal_mask(h, w, center, spec.side(h, w))?,
        MaskKind::Gaussian => gaussian_mask(h, w, center, spec.radius(h, w)),
    };
    Ok(MaskRealization {
        spec: *spec,
        center,
        grid,
    })
}

/// Elementwise product of an image with a mask grid. Labels must never pass
/// through here.
pub fn apply_mask(image: &Array2<f64>, mask: &Array2<f64>) -> Result<Array2<f64>> {
    if image.dim() != mask.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            image.dim(),
            mask.dim()
        )));
    }
    Ok(image * mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ideal_spec(lambda: f64) -> MaskSpec {
        MaskSpec::new(MaskKind::Ideal, lambda).unwrap()
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        assert!(MaskSpec::new(MaskKind::Ideal, 0.0).is_err());
        assert!(MaskSpec::new(MaskKind::Ideal, 1.0).is_err());
        assert!(MaskSpec::new(MaskKind::Ideal, -0.2).is_err());
    }

    #[test]
    fn center_range_matches_enumeration() {
        // h = w = 160, lambda = 0.25 -> alpha = 40, centers in [20, 139].
        let spec = ideal_spec(0.25);
        assert_eq!(spec.side(160, 160), 40);
        assert_eq!(center_range(40, 160).unwrap(), (20, 139));
        // Every admissible center keeps the box inside the grid.
        for uc in 20..=139 {
            assert!(ideal_mask(160, 160, (uc, 80), 40).is_ok());
        }
        // Just outside the range the box exits the grid or the range.
        assert!(ideal_mask(160, 160, (19, 80), 40).is_err());
        assert!(ideal_mask(160, 160, (141, 80), 40).is_err());
    }

    #[test]
    fn alpha_equal_to_extent_gives_single_center() {
        let (lo, hi) = center_range(8, 8).unwrap();
        assert_eq!((lo, hi), (4, 4));
        let mask = ideal_mask(8, 8, (4, 4), 8).unwrap();
        assert!(mask.iter().all(|&x| x == 0.0));
        // Odd side too.
        let (lo, hi) = center_range(7, 7).unwrap();
        assert_eq!((lo, hi), (3, 3));
        assert!(ideal_mask(7, 7, (3, 3), 7).is_ok());
    }

    #[test]
    fn alpha_larger_than_grid_rejected() {
        assert!(center_range(5, 4).is_err());
        assert!(center_range(0, 4).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = ideal_spec(0.25);
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_center(&spec, 160, 160, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn ideal_mask_zero_count_is_alpha_squared() {
        let mask = ideal_mask(160, 160, (31, 100), 40).unwrap();
        assert_eq!(mask.iter().filter(|&&x| x == 0.0).count(), 1600);
        assert!(mask.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn ideal_mask_side_one() {
        let mask = ideal_mask(16, 16, (5, 9), 1).unwrap();
        assert_eq!(mask.iter().filter(|&&x| x == 0.0).count(), 1);
        assert_eq!(mask[[5, 9]], 0.0);
    }

    #[test]
    fn different_centers_same_zero_count_different_zero_sets() {
        let a = ideal_mask(64, 64, (20, 20), 10).unwrap();
        let b = ideal_mask(64, 64, (40, 44), 10).unwrap();
        let zeros = |m: &Array2<f64>| {
            m.indexed_iter()
                .filter(|(_, &x)| x == 0.0)
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        };
        assert_eq!(zeros(&a).len(), zeros(&b).len());
        assert_ne!(zeros(&a), zeros(&b));
    }

    #[test]
    fn gaussian_mask_center_and_half_value() {
        // beta chosen so the half-value distance beta * sqrt(2 ln 2) is the
        // integer 5; confirmed by bisection on g(d) = 1 - exp(-d^2/2b^2) - 1/2.
        let beta = 5.0 / (2.0 * (2.0f64).ln()).sqrt();
        let (mut lo, mut hi) = (0.0f64, 20.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let g = 1.0 - (-(mid * mid) / (2.0 * beta * beta)).exp() - 0.5;
            if g < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - 5.0).abs() < 1e-9);

        let mask = gaussian_mask(32, 32, (10, 10), beta);
        assert_eq!(mask[[10, 10]], 0.0);
        assert!((mask[[10, 15]] - 0.5).abs() < 1e-9);
        assert!((mask[[15, 10]] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gaussian_mask_is_radially_monotone_and_bounded() {
        let mask = gaussian_mask(64, 64, (31, 33), 12.0);
        let mut by_dist: Vec<(f64, f64)> = mask
            .indexed_iter()
            .map(|((u, v), &x)| {
                let du = u as f64 - 31.0;
                let dv = v as f64 - 33.0;
                ((du * du + dv * dv).sqrt(), x)
            })
            .collect();
        by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in by_dist.windows(2) {
            if pair[1].0 > pair[0].0 {
                assert!(pair[1].1 > pair[0].1);
            }
        }
        assert!(mask.iter().all(|&x| (0.0..1.0).contains(&x)));
        assert_eq!(mask.iter().filter(|&&x| x == 0.0).count(), 1);
    }

    #[test]
    fn apply_mask_identities() {
        let img = Array2::from_elem((8, 8), 3.0);
        let ones = Array2::ones((8, 8));
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        let zeros = Array2::zeros((8, 8));
        assert!(apply_mask(&img, &zeros).unwrap().iter().all(|&x| x == 0.0));
        let bad = Array2::ones((8, 9));
        assert!(apply_mask(&img, &bad).is_err());
    }

    #[test]
    fn masked_constant_image_has_alpha_squared_zeros() {
        let img = Array2::from_elem((160, 160), 3.0);
        let mask = ideal_mask(160, 160, (80, 80), 40).unwrap();
        let out = apply_mask(&img, &mask).unwrap();
        assert_eq!(out.iter().filter(|&&x| x == 0.0).count(), 1600);
        assert!(out.iter().all(|&x| x == 0.0 || x == 3.0));
    }

    #[test]
    fn paper_literal_range_stays_upper_left() {
        let mut spec = ideal_spec(0.25);
        spec.paper_literal_center_range = true;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (u, v) = sample_center(&spec, 160, 160, &mut rng).unwrap();
            assert!((20..=60).contains(&u));
            assert!((20..=60).contains(&v));
        }
        // For alpha/2 > (H - alpha)/2 the literal range is empty.
        let mut big = ideal_spec(0.6);
        big.paper_literal_center_range = true;
        assert!(sample_center(&big, 20, 20, &mut rng).is_err());
    }
}
