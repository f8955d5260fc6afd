//! Region masks derived from split ratios along the horizontal axis.
//!
//! All masks are `H × W` row-major with column index fastest. Regions are
//! contiguous column bands, left to right in ratio order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub ratios: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl RegionLayout {
    pub fn new(ratios: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        let layout = Self {
            ratios,
            height,
            width,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn even(k: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k], height, width)
    }

    pub fn k(&self) -> usize {
        self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::Layout("at least one region is required".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Layout("canvas must be non-empty".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Layout(format!("ratio {r} is not positive")));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Layout(format!("ratios sum to {sum}, not 1")));
        }
        if self.k() > self.width {
            return Err(Error::Layout(format!(
                "{} regions do not fit in {} columns",
                self.k(),
                self.width
            )));
        }
        Ok(())
    }

    /// Column boundaries `[0, c_1, …, W]` from half-away-from-zero rounding
    /// of the cumulative ratio sums.
    pub fn column_edges(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let mut edges = Vec::with_capacity(self.k() + 1);
        edges.push(0);
        let mut cum = 0.0;
        for (i, r) in self.ratios.iter().enumerate() {
            cum += r;
            let edge = if i + 1 == self.k() {
                self.width
            } else {
                (self.width as f64 * cum).round() as usize
            };
            edges.push(edge.min(self.width));
        }
        for k in 0..self.k() {
            if edges[k + 1] <= edges[k] {
                return Err(Error::Layout(format!("region {} receives no columns", k + 1)));
            }
        }
        Ok(edges)
    }
}

/// Disjoint, covering binary masks, one contiguous column band per region.
#[derive(Clone, Debug, PartialEq)]
pub struct HardMasks {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Vec<f64>>,
}

impl HardMasks {
    pub fn k(&self) -> usize {
        self.masks.len()
    }

    /// Masks stacked as a `K × (H·W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        stack(&self.masks, self.height * self.width)
    }

    /// Pixel count per region.
    pub fn counts(&self) -> Vec<f64> {
        self.masks.iter().map(|m| m.iter().sum()).collect()
    }

    /// Column range `[start, end)` of every region.
    pub fn column_ranges(&self) -> Result<Vec<(usize, usize)>> {
        self.masks
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let cols: Vec<usize> = (0..self.width).filter(|&x| m[x] > 0.5).collect();
                match (cols.first(), cols.last()) {
                    (Some(&a), Some(&b)) => Ok((a, b + 1)),
                    _ => Err(Error::Layout(format!("region {} is empty", k + 1))),
                }
            })
            .collect()
    }
}

/// Soft masks forming a partition of unity.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMasks {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub masks: Vec<Vec<f64>>,
}

impl SoftMasks {
    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        stack(&self.masks, self.height * self.width)
    }
}

fn stack(masks: &[Vec<f64>], n: usize) -> Tensor {
    let mut data = Vec::with_capacity(masks.len() * n);
    for m in masks {
        data.extend_from_slice(m);
    }
    Tensor::from_parts(vec![masks.len(), n], data)
}

/// Region index per pixel, 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionIndexMap {
    pub height: usize,
    pub width: usize,
    pub index: Vec<usize>,
}

impl RegionIndexMap {
    /// Rebuild one binary mask per region.
    pub fn to_masks(&self, k: usize) -> HardMasks {
        let masks = (1..=k)
            .map(|j| self.index.iter().map(|&i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        HardMasks {
            height: self.height,
            width: self.width,
            masks,
        }
    }
}

pub fn masks_from_ratios(layout: &RegionLayout) -> Result<HardMasks> {
    let edges = layout.column_edges()?;
    let (h, w) = (layout.height, layout.width);
    let masks = (0..layout.k())
        .map(|k| {
            let mut m = vec![0.0; h * w];
            for y in 0..h {
                for x in edges[k]..edges[k + 1] {
                    m[y * w + x] = 1.0;
                }
            }
            m
        })
        .collect();
    Ok(HardMasks {
        height: h,
        width: w,
        masks,
    })
}

/// Gaussian blur of each mask along the split axis, followed by pixelwise
/// renormalisation. The kernel is truncated at `3σ` and renormalised, and
/// columns beyond the canvas replicate the edge column.
pub fn soften_masks(hard: &HardMasks, sigma: f64) -> Result<SoftMasks> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let (h, w) = (hard.height, hard.width);
    if sigma == 0.0 {
        return Ok(SoftMasks {
            height: h,
            width: w,
            sigma,
            masks: hard.masks.clone(),
        });
    }
    let radius = (3.0 * sigma).floor() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ks: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= ks);

    let mut blurred: Vec<Vec<f64>> = hard
        .masks
        .iter()
        .map(|m| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, kv) in kernel.iter().enumerate() {
                        let xx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                        acc += kv * m[y * w + xx];
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        })
        .collect();
    for p in 0..h * w {
        let s: f64 = blurred.iter().map(|m| m[p]).sum();
        for m in blurred.iter_mut() {
            m[p] /= s;
        }
    }
    Ok(SoftMasks {
        height: h,
        width: w,
        sigma,
        masks: blurred,
    })
}

pub fn region_index_map(hard: &HardMasks) -> Result<RegionIndexMap> {
    let n = hard.height * hard.width;
    let mut index = vec![0usize; n];
    for p in 0..n {
        let active: Vec<usize> = (0..hard.k()).filter(|&k| hard.masks[k][p] == 1.0).collect();
        if active.len() != 1 {
            return Err(Error::Layout(format!(
                "pixel ({}, {}) is covered by {} regions",
                p % hard.width,
                p / hard.width,
                active.len()
            )));
        }
        index[p] = active[0] + 1;
    }
    Ok(RegionIndexMap {
        height: hard.height,
        width: hard.width,
        index,
    })
}

/// Area-average pooling of an `H × W` mask onto an `h × w` grid. Target
/// cells whose preimage straddles source pixels take fractional weights.
pub fn downsample_mask(mask: &[f64], src_h: usize, src_w: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if mask.len() != src_h * src_w {
        return Err(Error::InvalidArgument(format!(
            "mask has {} values, expected {src_h}×{src_w}",
            mask.len()
        )));
    }
    if h == 0 || w == 0 || h > src_h || w > src_w {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {src_h}×{src_w} onto {h}×{w}"
        )));
    }
    let wy = overlap_weights(src_h, h);
    let wx = overlap_weights(src_w, w);
    let mut out = vec![0.0; h * w];
    for (ty, rows) in wy.iter().enumerate() {
        for (tx, cols) in wx.iter().enumerate() {
            let mut acc = 0.0;
            let mut area = 0.0;
            for &(sy, fy) in rows {
                for &(sx, fx) in cols {
                    acc += fy * fx * mask[sy * src_w + sx];
                    area += fy * fx;
                }
            }
            out[ty * w + tx] = (acc / area).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// For each target cell along one axis, the overlapping source cells and
/// their overlap lengths.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let (a, b) = (t as f64 * scale, (t + 1) as f64 * scale);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let ov = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                    (ov > 0.0).then_some((s, ov))
                })
                .collect()
        })
        .collect()
}

/// Column ranges `[start, end)` on either side of one internal boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPair {
    pub boundary: usize,
    pub left: (usize, usize),
    pub right: (usize, usize),
}

impl BandPair {
    /// Binary masks (left, right) of the bands over an `H × W` canvas.
    pub fn masks(&self, height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
        let band = |(a, b): (usize, usize)| {
            let mut m = vec![0.0; height * width];
            for y in 0..height {
                for x in a..b {
                    m[y * width + x] = 1.0;
                }
            }
            m
        };
        (band(self.left), band(self.right))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryBands {
    pub pairs: Vec<BandPair>,
    /// Bands that were clipped to a region narrower than the requested width.
    pub warnings: Vec<String>,
}

pub fn boundary_bands(hard: &HardMasks, band_px: usize) -> Result<BoundaryBands> {
    if band_px == 0 {
        return Err(Error::InvalidArgument("band width must be at least 1".into()));
    }
    let ranges = hard.column_ranges()?;
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for k in 0..ranges.len().saturating_sub(1) {
        let c = ranges[k + 1].0;
        let left = (c.saturating_sub(band_px).max(ranges[k].0), c);
        let right = (c, (c + band_px).min(ranges[k + 1].1));
        for (side, (a, b)) in [("left", left), ("right", right)] {
            if b - a < band_px {
                let msg = format!(
                    "{side} band at boundary {c} clipped to {} of {band_px} columns",
                    b - a
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        pairs.push(BandPair {
            boundary: c,
            left,
            right,
        });
    }
    Ok(BoundaryBands { pairs, warnings })
}

/// Band width at an evaluation canvas of `width` columns, keeping 32 px at
/// a 1024 px reference width.
pub fn scaled_band_px(width: usize) -> usize {
    ((32.0 * width as f64 / 1024.0).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols_of(m: &[f64], w: usize) -> Vec<usize> {
        (0..w).filter(|&x| m[x] == 1.0).collect()
    }

    #[test]
    fn even_split_on_four_columns() {
        let hm = masks_from_ratios(&RegionLayout::even(2, 1, 4).unwrap()).unwrap();
        assert_eq!(cols_of(&hm.masks[0], 4), vec![0, 1]);
        assert_eq!(cols_of(&hm.masks[1], 4), vec![2, 3]);
    }

    #[test]
    fn single_region_is_all_ones() {
        let hm = masks_from_ratios(&RegionLayout::new(vec![1.0], 3, 5).unwrap()).unwrap();
        assert!(hm.masks[0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn three_regions_cumulative_rounding() {
        // Oracle: brute-force cumulative rounding of 10·(0.2, 0.5, 1.0).
        let brute: Vec<usize> = [0.2f64, 0.2 + 0.3]
            .iter()
            .map(|c| (10.0 * c).round() as usize)
            .collect();
        assert_eq!(brute, vec![2, 5]);
        let l = RegionLayout::new(vec![0.2, 0.3, 0.5], 2, 10).unwrap();
        assert_eq!(l.column_edges().unwrap(), vec![0, 2, 5, 10]);
    }

    #[test]
    fn zero_column_region_is_rejected() {
        let l = RegionLayout::new(vec![0.01, 0.99], 1, 10).unwrap();
        match masks_from_ratios(&l) {
            Err(Error::Layout(msg)) => assert!(msg.contains("region 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(RegionLayout::new(vec![0.5, 0.6], 1, 10).is_err());
        assert!(RegionLayout::new(vec![0.5; 2], 1, 1).is_err());
    }

    #[test]
    fn soft_masks_zero_sigma_and_seam() {
        let hm = masks_from_ratios(&RegionLayout::even(2, 1, 8).unwrap()).unwrap();
        assert_eq!(soften_masks(&hm, 0.0).unwrap().masks, hm.masks);
        let sm = soften_masks(&hm, 1.0).unwrap();
        let m1 = &sm.masks[0];
        let m2 = &sm.masks[1];
        assert!(m1[3] > 0.5 && m1[3] < 1.0);
        assert!(m1[4] > 0.0 && m1[4] < 0.5);
        assert!((m1[3] - m2[4]).abs() < 1e-15);
        assert!((m1[4] - m2[3]).abs() < 1e-15);
        // By hand: weights exp(-d²/2) for d in -3..=3, normalised; column 3
        // collects the kernel mass at offsets -3..=0.
        let k: Vec<f64> = (-3..=3).map(|d: i32| (-(d * d) as f64 / 2.0).exp()).collect();
        let s: f64 = k.iter().sum();
        let expect = k[..4].iter().sum::<f64>() / s;
        assert!((m1[3] - expect).abs() < 1e-12);
        for p in 0..8 {
            assert!((m1[p] + m2[p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn index_map_round_trip() {
        let hm = masks_from_ratios(&RegionLayout::even(2, 4, 4).unwrap()).unwrap();
        let im = region_index_map(&hm).unwrap();
        for y in 0..4 {
            assert_eq!(&im.index[y * 4..y * 4 + 4], &[1, 1, 2, 2]);
        }
        assert_eq!(im.to_masks(2), hm);
        let single = masks_from_ratios(&RegionLayout::new(vec![1.0], 2, 2).unwrap()).unwrap();
        assert!(region_index_map(&single).unwrap().index.iter().all(|&i| i == 1));

        let mut bad = hm.clone();
        bad.masks[0][3] = 1.0;
        assert!(region_index_map(&bad).is_err());
    }

    #[test]
    fn downsample_cases() {
        let ones = vec![1.0; 16];
        assert!(downsample_mask(&ones, 4, 4, 3, 3).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let mut single = vec![0.0; 16];
        single[0] = 1.0;
        assert_eq!(downsample_mask(&single, 4, 4, 2, 2).unwrap(), vec![0.25, 0.0, 0.0, 0.0]);

        let hm = masks_from_ratios(&RegionLayout::even(2, 128, 128).unwrap()).unwrap();
        let d: Vec<Vec<f64>> = hm
            .masks
            .iter()
            .map(|m| downsample_mask(m, 128, 128, 14, 14).unwrap())
            .collect();
        for y in 0..14 {
            let row: f64 = (0..14).map(|x| d[0][y * 14 + x] + d[1][y * 14 + x]).sum();
            assert!((row - 14.0).abs() < 1e-6);
        }
        assert!(downsample_mask(&ones, 4, 4, 5, 2).is_err());
    }

    #[test]
    fn bands_at_full_scale() {
        let hm = masks_from_ratios(&RegionLayout::even(2, 1, 128).unwrap()).unwrap();
        let b = boundary_bands(&hm, 32).unwrap();
        assert_eq!(b.pairs.len(), 1);
        assert_eq!(b.pairs[0].left, (32, 64));
        assert_eq!(b.pairs[0].right, (64, 96));
        assert!(b.warnings.is_empty());
        assert_eq!(scaled_band_px(1024), 32);
    }

    #[test]
    fn bands_three_regions_and_single() {
        let hm = masks_from_ratios(&RegionLayout::new(vec![0.2, 0.3, 0.5], 1, 10).unwrap()).unwrap();
        let b = boundary_bands(&hm, 2).unwrap();
        let got: Vec<_> = b.pairs.iter().map(|p| (p.left, p.right)).collect();
        assert_eq!(got, vec![((0, 2), (2, 4)), ((3, 5), (5, 7))]);

        let one = masks_from_ratios(&RegionLayout::new(vec![1.0], 1, 10).unwrap()).unwrap();
        assert!(boundary_bands(&one, 2).unwrap().pairs.is_empty());

        let clipped = boundary_bands(&hm, 4).unwrap();
        assert_eq!(clipped.pairs[0].left, (0, 2));
        assert!(!clipped.warnings.is_empty());
    }
}
