//! Dense row-major arrays and the few spatial operations the detectors need.
//!
//! Layouts are fixed: images and feature maps are stored `(h, w, c)` with the
//! channel index varying fastest. The binary formats in [`crate::io`] depend on
//! this ordering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H×W×C` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "image data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::dim(format!("image intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }
}

/// `F(x)`: an `H×W×D` map of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::dim(format!(
                "feature map data length {} != {height}x{width}x{depth}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::dim("feature map contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self {
            height,
            width,
            depth,
            data: vec![0.0; height * width * depth],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Number of spatial locations `H·W`.
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// The `D`-vector at spatial location index `loc = h·W + w`.
    #[inline]
    pub fn vector(&self, loc: usize) -> &[f64] {
        &self.data[loc * self.depth..(loc + 1) * self.depth]
    }

    /// Global max pooling over `(h, w)`.
    pub fn max_pool(&self) -> Vec<f64> {
        let mut pooled = vec![f64::NEG_INFINITY; self.depth];
        for loc in 0..self.locations() {
            for (p, &v) in pooled.iter_mut().zip(self.vector(loc)) {
                if v > *p {
                    *p = v;
                }
            }
        }
        pooled
    }
}

/// A 2-D map of reals over spatial locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "map data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `out[h,w] = Σ_d fmap[h,w,d]·kernel[d]`.
pub fn correlate_1x1(fmap: &FeatureMap, kernel: &[f64]) -> Result<Map2> {
    if kernel.len() != fmap.depth {
        return Err(Error::dim(format!(
            "kernel length {} != feature depth {}",
            kernel.len(),
            fmap.depth
        )));
    }
    let data = (0..fmap.locations())
        .map(|loc| dot(fmap.vector(loc), kernel))
        .collect();
    Ok(Map2 {
        height: fmap.height,
        width: fmap.width,
        data,
    })
}

/// Max-stabilized softmax over all entries of the map.
pub fn spatial_softmax(map: &Map2) -> Result<Map2> {
    if map.is_empty() {
        return Err(Error::dim("softmax of an empty map"));
    }
    let m = map.max();
    let mut data: Vec<f64> = map.data.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = data.iter().sum();
    for v in &mut data {
        *v /= z;
    }
    Ok(Map2 {
        height: map.height,
        width: map.width,
        data,
    })
}

/// 3×3 box sum with zero padding.
pub fn smooth_3x3(map: &Map2) -> Result<Map2> {
    if map.is_empty() {
        return Err(Error::dim("smoothing an empty map"));
    }
    let (hh, ww) = (map.height, map.width);
    let mut data = vec![0.0; hh * ww];
    for h in 0..hh {
        for w in 0..ww {
            let mut acc = 0.0;
            for nh in neighborhood(h, hh) {
                for nw in neighborhood(w, ww) {
                    acc += map.get(nh, nw);
                }
            }
            data[h * ww + w] = acc;
        }
    }
    Ok(Map2 {
        height: hh,
        width: ww,
        data,
    })
}

/// Location of the maximum; ties go to the smallest `h`, then smallest `w`.
pub fn argmax2(map: &Map2) -> (usize, usize) {
    let idx = argmax(&map.data);
    (idx / map.width.max(1), idx % map.width.max(1))
}

/// Index of the first maximum entry. Returns 0 for an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// In-bounds indices of the 3-wide window centred on `i` along an axis of length `len`.
#[inline]
pub(crate) fn neighborhood(i: usize, len: usize) -> std::ops::Range<usize> {
    i.saturating_sub(1)..(i + 2).min(len)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmap(h: usize, w: usize, d: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(h, w, d, data).unwrap()
    }

    #[test]
    fn correlate_ones() {
        let f = fmap(2, 2, 3, vec![1.0; 12]);
        let out = correlate_1x1(&f, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.data(), &[3.0; 4]);
    }

    #[test]
    fn correlate_zero_kernel_and_hand_dot() {
        let f = fmap(2, 2, 3, (0..12).map(|i| i as f64 * 0.7 - 2.0).collect());
        let out = correlate_1x1(&f, &[0.0; 3]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let f = fmap(1, 1, 2, vec![2.0, -1.0]);
        let out = correlate_1x1(&f, &[0.5, 2.0]).unwrap();
        assert_eq!(out.data(), &[-1.0]);
    }

    #[test]
    fn correlate_rejects_wrong_kernel() {
        let f = FeatureMap::zeros(2, 2, 3);
        assert!(matches!(
            correlate_1x1(&f, &[1.0; 2]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let u = Map2::new(2, 2, vec![0.7; 4]).unwrap();
        for v in spatial_softmax(&u).unwrap().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let m = Map2::from_rows(&[&[0.0, 3f64.ln()]]).unwrap();
        let s = spatial_softmax(&m).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(spatial_softmax(&Map2::new(0, 0, vec![]).unwrap()).is_err());
    }

    #[test]
    fn softmax_survives_huge_inputs() {
        let m = Map2::new(1, 3, vec![1e300, 0.0, -1e300]).unwrap();
        let s = spatial_softmax(&m).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn smooth_examples() {
        let one = Map2::new(1, 1, vec![4.5]).unwrap();
        assert_eq!(smooth_3x3(&one).unwrap().data(), &[4.5]);

        let mut center = vec![0.0; 9];
        center[4] = 1.0;
        let out = smooth_3x3(&Map2::new(3, 3, center).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0; 9]);

        let zeros = Map2::new(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(smooth_3x3(&zeros).unwrap().data(), &[0.0; 6]);
    }

    #[test]
    fn smooth_corner_sees_four_cells() {
        let out = smooth_3x3(&Map2::new(3, 3, vec![1.0; 9]).unwrap()).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(
            argmax2(&Map2::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]).unwrap()),
            (0, 1)
        );
        assert_eq!(argmax2(&Map2::new(3, 3, vec![2.0; 9]).unwrap()), (0, 0));
        assert_eq!(
            argmax2(&Map2::from_rows(&[&[1.0], &[9.0]]).unwrap()),
            (1, 0)
        );
    }

    fn small_map() -> impl Strategy<Value = Map2> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            prop::collection::vec(-50.0f64..50.0, h * w)
                .prop_map(move |d| Map2::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(m in small_map()) {
            let s: f64 = spatial_softmax(&m).unwrap().data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(m in small_map(), c in -100.0f64..100.0) {
            let shifted = Map2::new(m.height(), m.width(), m.data().iter().map(|v| v + c).collect()).unwrap();
            let a = spatial_softmax(&m).unwrap();
            let b = spatial_softmax(&shifted).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn correlate_linear_in_kernel(
            vals in prop::collection::vec(-3.0f64..3.0, 3 * 4 * 5),
            k1 in prop::collection::vec(-2.0f64..2.0, 5),
            k2 in prop::collection::vec(-2.0f64..2.0, 5),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let f = FeatureMap::new(3, 4, 5, vals).unwrap();
            let combo: Vec<f64> = k1.iter().zip(&k2).map(|(x, y)| a * x + b * y).collect();
            let lhs = correlate_1x1(&f, &combo).unwrap();
            let r1 = correlate_1x1(&f, &k1).unwrap();
            let r2 = correlate_1x1(&f, &k2).unwrap();
            for i in 0..lhs.data().len() {
                let rhs = a * r1.data()[i] + b * r2.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-10);
            }
        }
    }
}
