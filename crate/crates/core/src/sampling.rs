//! Bilinear sampling of grid fields at continuous pixel positions.

use crate::field::{FeatureMap, ScalarField};

/// The four neighbor taps of one bilinear lookup.
///
/// `indices` are flattened grid offsets (`row * w + col`) and `weights` are
/// the matching convex coefficients. Out-of-bounds lookups have all-zero
/// weights and `in_bounds == false`; nothing is clamped to the border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearSample {
    pub indices: [usize; 4],
    pub weights: [f64; 4],
    pub in_bounds: bool,
}

impl BilinearSample {
    pub fn invalid() -> Self {
        Self { indices: [0; 4], weights: [0.0; 4], in_bounds: false }
    }
}

/// Taps and weights for sampling at `(x, y)` on an `h x w` grid.
///
/// The valid domain is `[0, w-1] x [0, h-1]`; the right and bottom borders
/// are included (the fractional weight of the off-grid neighbor is zero
/// there).
pub fn bilinear_weights(h: usize, w: usize, x: f64, y: f64) -> BilinearSample {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return BilinearSample::invalid();
    }
    let mut x0 = x.floor() as usize;
    let mut y0 = y.floor() as usize;
    // Keep the 2x2 stencil on the grid when sitting exactly on the far edge.
    if x0 >= w - 1 {
        x0 = w - 2;
    }
    if y0 >= h - 1 {
        y0 = h - 2;
    }
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let base = y0 * w + x0;
    BilinearSample {
        indices: [base, base + 1, base + w, base + w + 1],
        weights: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        in_bounds: true,
    }
}

/// Applies the taps to a scalar field. Returns 0 for out-of-bounds samples.
pub fn sample_scalar(field: &ScalarField, taps: &BilinearSample) -> f64 {
    if !taps.in_bounds {
        return 0.0;
    }
    let data = field.as_slice();
    taps.indices.iter().zip(taps.weights.iter()).map(|(&i, &w)| data[i] * w).sum()
}

/// Applies the taps to every channel of a feature map, writing into `out`.
/// Out-of-bounds samples write zeros.
pub fn sample_features(map: &FeatureMap, taps: &BilinearSample, out: &mut [f64]) {
    debug_assert_eq!(out.len(), map.channels());
    out.fill(0.0);
    if !taps.in_bounds {
        return;
    }
    for (&idx, &w) in taps.indices.iter().zip(taps.weights.iter()) {
        if w == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(map.pixel_flat(idx)) {
            *o += w * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn center_of_two_by_two_grid() {
        let taps = bilinear_weights(2, 2, 0.5, 0.5);
        assert!(taps.in_bounds);
        for w in taps.weights {
            assert_relative_eq!(w, 0.25, epsilon = 1e-15);
        }
        assert_relative_eq!(taps.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn integer_pixel_gets_unit_weight() {
        let taps = bilinear_weights(4, 5, 3.0, 2.0);
        assert!(taps.in_bounds);
        assert_relative_eq!(taps.weights[0], 1.0, epsilon = 1e-15);
        assert_eq!(taps.indices[0], 2 * 5 + 3);
        assert_relative_eq!(taps.weights[1] + taps.weights[2] + taps.weights[3], 0.0);
    }

    #[test]
    fn out_of_bounds_is_all_zero() {
        for (x, y) in [(-0.2, 1.0), (4.01, 1.0), (1.0, -0.001), (1.0, 3.2)] {
            let taps = bilinear_weights(4, 5, x, y);
            assert!(!taps.in_bounds);
            assert_eq!(taps.weights, [0.0; 4]);
        }
    }

    #[test]
    fn far_edges_are_inside() {
        let taps = bilinear_weights(4, 5, 4.0, 3.0);
        assert!(taps.in_bounds);
        assert_relative_eq!(taps.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // All mass on the corner pixel.
        let corner = 3 * 5 + 4;
        let mass: f64 = taps
            .indices
            .iter()
            .zip(taps.weights.iter())
            .filter(|(&i, _)| i == corner)
            .map(|(_, &w)| w)
            .sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_sum_to_one_inside() {
        for k in 0..200 {
            let x = (k as f64) * 0.019;
            let y = (k as f64) * 0.013;
            let taps = bilinear_weights(4, 5, x, y);
            if taps.in_bounds {
                assert_relative_eq!(taps.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn scalar_sampling_interpolates_linearly() {
        // A field linear in x and y is reproduced exactly by bilinear taps.
        let mut f = ScalarField::filled(3, 4, 0.0);
        for r in 0..3 {
            for c in 0..4 {
                f.set(r, c, 2.0 * c as f64 - 0.5 * r as f64 + 1.0);
            }
        }
        for (x, y) in [(0.25, 0.75), (1.5, 1.5), (2.9, 0.1), (3.0, 2.0)] {
            let taps = bilinear_weights(3, 4, x, y);
            let got = sample_scalar(&f, &taps);
            assert_relative_eq!(got, 2.0 * x - 0.5 * y + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn feature_sampling_matches_per_channel_scalar() {
        let mut m = FeatureMap::zeros(3, 4, 2);
        for r in 0..3 {
            for c in 0..4 {
                m.pixel_mut(r, c).copy_from_slice(&[r as f64 + c as f64, r as f64 * c as f64]);
            }
        }
        let taps = bilinear_weights(3, 4, 1.3, 0.6);
        let mut out = [0.0; 2];
        sample_features(&m, &taps, &mut out);
        for ch in 0..2 {
            let mut scalar = ScalarField::filled(3, 4, 0.0);
            for r in 0..3 {
                for c in 0..4 {
                    scalar.set(r, c, m.pixel(r, c)[ch]);
                }
            }
            assert_relative_eq!(out[ch], sample_scalar(&scalar, &taps), epsilon = 1e-14);
        }
    }
}
