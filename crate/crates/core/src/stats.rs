//! Histograms, spatial mean grids and summary moments.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 101;
pub const DEFAULT_SIGMAS: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` uniformly spaced, strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub total: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    /// Index of the most populated bin (first on ties).
    pub fn mode_bin(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    pub fn bin_contains(&self, k: usize, v: f64) -> bool {
        self.edges[k] <= v && v < self.edges[k + 1]
    }
}

/// Uniform half-open bins `[e_k, e_{k+1})` over `[min, max)`.
pub fn histogram(values: &[f64], min: f64, max: f64, bins: usize) -> Result<Histogram> {
    if bins == 0 || !(min < max) || !min.is_finite() || !max.is_finite() {
        return Err(Error::Contract(format!("histogram needs bins ≥ 1 and min < max, got {bins} bins on [{min}, {max})")));
    }
    let width = (max - min) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|k| if k == bins { max } else { min + k as f64 * width })
        .collect();
    let mut counts = vec![0u64; bins];
    let (mut underflow, mut overflow) = (0, 0);
    for &v in values {
        if v.is_nan() {
            return Err(Error::Numeric("NaN passed to histogram".into()));
        }
        if v < min {
            underflow += 1;
        } else if v >= max {
            overflow += 1;
        } else {
            let mut k = (((v - min) / width) as usize).min(bins - 1);
            // float rounding near an edge
            if v < edges[k] {
                k -= 1;
            } else if v >= edges[k + 1] {
                k += 1;
            }
            counts[k] += 1;
        }
    }
    Ok(Histogram {
        edges,
        counts,
        underflow,
        overflow,
        total: values.len() as u64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn moments(values: &[f64]) -> Result<Moments> {
    if values.is_empty() {
        return Err(Error::Contract("moments of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in sample".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Moments {
        count: values.len(),
        mean,
        std: var.sqrt(),
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Histogram over `mean ± sigmas·std`; a zero-spread sample gets a range of
/// at least ±0.5 around its value.
pub fn default_histogram(values: &[f64], bins: usize, sigmas: f64) -> Result<Histogram> {
    let m = moments(values)?;
    let half = if m.std > 0.0 { sigmas * m.std } else { 0.5f64.max(m.mean.abs()) };
    histogram(values, m.mean - half, m.mean + half, bins)
}

/// Mean of the values landing in each of `side²` cells; `None` marks a cell
/// that received nothing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub side: usize,
    pub cells: Vec<Option<f64>>,
}

impl Grid {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.side + col]
    }

    /// Mean over filled cells selected by `pick(row, col)`.
    pub fn region_mean(&self, pick: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let vals: Vec<f64> = (0..self.cells.len())
            .filter(|&i| pick(i / self.side, i % self.side))
            .filter_map(|i| self.cells[i])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Cells on the outer ring.
    pub fn border_mean(&self) -> Option<f64> {
        let s = self.side;
        self.region_mean(|r, c| r == 0 || c == 0 || r + 1 == s || c + 1 == s)
    }

    /// The central `k × k` block, `k = max(2, side / 4)` rounded to the
    /// parity of `side`.
    pub fn center_mean(&self) -> Option<f64> {
        let s = self.side;
        let mut k = (s / 4).max(2).min(s);
        if (s - k) % 2 == 1 {
            k += 1;
        }
        let lo = (s - k.min(s)) / 2;
        self.region_mean(|r, c| (lo..lo + k).contains(&r) && (lo..lo + k).contains(&c))
    }
}

pub fn spatial_grid(values: impl IntoIterator<Item = (usize, f64)>, side: usize) -> Result<Grid> {
    let n = side * side;
    let mut sum = vec![0.0f64; n];
    let mut cnt = vec![0u64; n];
    for (i, v) in values {
        if i >= n {
            return Err(Error::Index {
                what: "grid cell",
                index: i,
                len: n,
            });
        }
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN at grid cell {i}")));
        }
        sum[i] += v;
        cnt[i] += 1;
    }
    Ok(Grid {
        side,
        cells: sum
            .iter()
            .zip(&cnt)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
    })
}

/// `q`-quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("quantile of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn boundary_conventions() {
        let h = histogram(&[0.0], 0.0, 1.0, 4).unwrap();
        assert_eq!(h.counts, vec![1, 0, 0, 0]);
        let h = histogram(&[1.0, -0.1, 0.25], 0.0, 1.0, 4).unwrap();
        assert_eq!((h.overflow, h.underflow), (1, 1));
        assert_eq!(h.counts, vec![0, 1, 0, 0]);
    }

    #[test]
    fn bad_arguments() {
        assert!(histogram(&[], 1.0, 1.0, 3).is_err());
        assert!(histogram(&[], 0.0, 1.0, 0).is_err());
        assert!(matches!(histogram(&[f64::NAN], 0.0, 1.0, 2), Err(Error::Numeric(_))));
    }

    #[test]
    fn uniform_counts_within_five_sigma() {
        let mut r = rng::seeded(11);
        let vals: Vec<f64> = (0..10_000).map(|_| rng::uniform(&mut r, 0.0, 1.0) as f64).collect();
        let bins = 20;
        let h = histogram(&vals, 0.0, 1.0, bins).unwrap();
        let p = 1.0 / bins as f64;
        let expect = 10_000.0 * p;
        let sigma = (10_000.0 * p * (1.0 - p)).sqrt();
        for &c in &h.counts {
            assert!((c as f64 - expect).abs() < 5.0 * sigma, "{c}");
        }
    }

    #[test]
    fn zero_spike_lands_in_one_bin_containing_zero() {
        let h = default_histogram(&[0.0; 50], DEFAULT_BINS, DEFAULT_SIGMAS).unwrap();
        let k = h.mode_bin();
        assert_eq!(h.counts[k], 50);
        assert!(h.bin_contains(k, 0.0));
    }

    #[test]
    fn grid_examples() {
        let g = spatial_grid((0..4).map(|i| (i, i as f64)), 2).unwrap();
        assert_eq!(g.cells, vec![Some(0.0), Some(1.0), Some(2.0), Some(3.0)]);
        let dup = spatial_grid((0..4).chain(0..4).map(|i| (i, i as f64)), 2).unwrap();
        assert_eq!(dup, g);
        let side = 6;
        let checker = spatial_grid((0..36).map(|i| (i, ((i / side + i % side) % 2) as f64)), side).unwrap();
        for r in 0..side {
            for c in 0..side {
                assert_eq!(checker.get(r, c), Some(((r + c) % 2) as f64));
            }
        }
        let sparse = spatial_grid([(3, 0.0)], 2).unwrap();
        assert_eq!(sparse.cells, vec![None, None, None, Some(0.0)]);
        assert!(spatial_grid([(4, 1.0)], 2).is_err());
    }

    #[test]
    fn centre_and_border_regions() {
        let g = spatial_grid((0..64).map(|i| (i, if (i / 8 == 0) || (i % 8 == 0) || i / 8 == 7 || i % 8 == 7 { 0.0 } else { 1.0 })), 8).unwrap();
        assert_eq!(g.border_mean(), Some(0.0));
        assert_eq!(g.center_mean(), Some(1.0));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25).unwrap(), 0.25);
    }

    proptest! {
        #[test]
        fn histogram_conserves_mass(vals in proptest::collection::vec(-10.0f64..10.0, 0..200), bins in 1usize..40) {
            let h = histogram(&vals, -3.0, 4.0, bins).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<u64>() + h.underflow + h.overflow, h.total);
            prop_assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
            for &v in &vals {
                if (-3.0..4.0).contains(&v) {
                    prop_assert!((0..bins).any(|k| h.bin_contains(k, v) && h.counts[k] > 0));
                }
            }
        }

        #[test]
        fn grid_ignores_record_order(vals in proptest::collection::vec((0usize..9, -5.0f64..5.0), 0..50), seed in any::<u64>()) {
            let a = spatial_grid(vals.iter().cloned(), 3).unwrap();
            let perm = rng::permutation(vals.len(), seed);
            let b = spatial_grid(perm.iter().map(|&i| vals[i]), 3).unwrap();
            for (x, y) in a.cells.iter().zip(&b.cells) {
                match (x, y) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
        }
    }
}
