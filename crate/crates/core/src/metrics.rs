//! Image metrics: PSNR, a depth-based cross-view reprojection error, and
//! min/max/mean aggregation over sampling seeds.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::ViewRing;
use crate::image::Image;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("missing depth or mask for view {0}")]
    MissingDepth(usize),
    #[error("{views} views for a ring of {ring}")]
    ViewCount { views: usize, ring: usize },
    #[error("no pixel is visible in more than one view")]
    NoOverlap,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images with values in [0, 1].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_size(b) {
        return Err(MetricsError::Shape(a.width(), a.height(), b.width(), b.height()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// A reprojected point counts as visible in the other view only when every
/// bilinear tap lies on the object at a depth within this distance.
pub const OCCLUSION_TOL: f64 = 0.06;

/// Mean absolute color error between each view and its neighbours warped
/// through ground-truth depth.
///
/// For every ordered pair `(i, j)`, masked pixels of view `j` are lifted to 3D
/// with `depths[j]`, projected into view `i` and compared against a bilinear
/// sample of `views[i]`. Points that land off the image, on background or
/// behind another surface in view `i` are skipped. The result is the mean of
/// the per-pair errors.
pub fn reprojection_consistency(views: &[Image], depths: &[Vec<f32>], masks: &[Vec<u8>], ring: &ViewRing) -> Result<f64> {
    let n = ring.len();
    if views.len() != n {
        return Err(MetricsError::ViewCount { views: views.len(), ring: n });
    }
    let (w, h) = (views[0].width(), views[0].height());
    for (k, v) in views.iter().enumerate() {
        if !v.same_size(&views[0]) {
            return Err(MetricsError::Shape(w, h, v.width(), v.height()));
        }
        let ok = |len: Option<usize>| len == Some(w * h);
        if !ok(depths.get(k).map(Vec::len)) || !ok(masks.get(k).map(Vec::len)) {
            return Err(MetricsError::MissingDepth(k));
        }
    }
    let mut pair_errors = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if let Some(e) = pair_error(views, depths, masks, ring, i, j) {
                pair_errors.push(e);
            }
        }
    }
    if pair_errors.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    Ok(pair_errors.iter().sum::<f64>() / pair_errors.len() as f64)
}

fn pair_error(views: &[Image], depths: &[Vec<f32>], masks: &[Vec<u8>], ring: &ViewRing, i: usize, j: usize) -> Option<f64> {
    let (w, h) = (views[0].width(), views[0].height());
    let (cam_i, cam_j) = (&ring.targets[i], &ring.targets[j]);
    let (mut sum, mut count) = (0.0, 0usize);
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            if masks[j][p] == 0 || !depths[j][p].is_finite() {
                continue;
            }
            let x = cam_j.unproject(col as f64 + 0.5, row as f64 + 0.5, depths[j][p] as f64);
            let proj = cam_i.project(&x);
            if proj.behind_camera() {
                continue;
            }
            let (fx, fy) = (proj.u - 0.5, proj.v - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (w - 1) as f64 || y0 + 1.0 > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (x0 as usize, y0 as usize);
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let taps = [
                (y0, x0, (1.0 - ay) * (1.0 - ax)),
                (y0, x0 + 1, (1.0 - ay) * ax),
                (y0 + 1, x0, ay * (1.0 - ax)),
                (y0 + 1, x0 + 1, ay * ax),
            ];
            let visible = taps.iter().all(|&(r, c, _)| {
                let q = r * w + c;
                masks[i][q] != 0 && (depths[i][q] as f64 - proj.depth).abs() < OCCLUSION_TOL
            });
            if !visible {
                continue;
            }
            let mut err = 0.0;
            for ch in 0..3 {
                let s: f64 = taps.iter().map(|&(r, c, wt)| wt * views[i].get(ch, r, c) as f64).sum();
                err += (s - views[j].get(ch, row, col) as f64).abs();
            }
            sum += err / 3.0;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Min, max and mean of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Clamp guards the mean against rounding outside [min, max].
        let mean = (values.iter().sum::<f64>() / values.len() as f64).clamp(min, max);
        Some(Self {
            min,
            max,
            mean,
            count: values.len(),
        })
    }
}

/// Per-object, per-metric results over seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    /// `(object, metric, per-seed values)` in insertion order.
    rows: Vec<(usize, String, Vec<f64>)>,
}

pub const REPORT_HEADER: &str = "object,metric,seeds,min,max,mean";

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one seed's value of `metric` for `object`.
    pub fn push(&mut self, object: usize, metric: &str, value: f64) {
        match self.rows.iter_mut().find(|(o, m, _)| *o == object && m == metric) {
            Some(row) => row.2.push(value),
            None => self.rows.push((object, metric.to_string(), vec![value])),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &str, Summary)> {
        self.rows
            .iter()
            .map(|(o, m, v)| (*o, m.as_str(), Summary::of(v).expect("rows are never empty")))
    }

    /// Summary over all objects and seeds of one metric.
    pub fn overall(&self, metric: &str) -> Option<Summary> {
        let all: Vec<f64> = self.rows.iter().filter(|(_, m, _)| m == metric).flat_map(|(_, _, v)| v.iter().copied()).collect();
        Summary::of(&all)
    }

    /// Mean over objects of each object's seed-mean for `metric`.
    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        let means: Vec<f64> = self.rows().filter(|(_, m, _)| *m == metric).map(|(_, _, s)| s.mean).collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for (o, m, s) in self.rows() {
            writeln!(out, "{o},{m},{},{:.6},{:.6},{:.6}", s.count, s.min, s.max, s.mean).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RingSpec;
    use crate::synthdata::{make_dataset, ObjectParams};
    use crate::tensor::Rng;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, [0.6, 0.6, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(4, 3, [0.0; 3])).is_err());
    }

    fn gt_views(sample: &crate::synthdata::Sample, size: usize) -> Vec<Image> {
        sample.targets.iter().map(|t| Image::new(size, size, t.clone()).unwrap()).collect()
    }

    #[test]
    fn ground_truth_is_self_consistent() {
        let spec = RingSpec::desk();
        let data = make_dataset(24, 5, &spec, &ObjectParams::default()).unwrap();
        let mut worst: f64 = 0.0;
        for s in &data.samples {
            let ring = spec.build(s.input_elevation).unwrap();
            let e = reprojection_consistency(&gt_views(s, spec.image_size), &s.depths, &s.masks, &ring).unwrap();
            worst = worst.max(e);
        }
        assert!(worst < 0.08, "worst GT error {worst}");
    }

    #[test]
    fn noise_views_are_inconsistent() {
        let spec = RingSpec::desk();
        let data = make_dataset(4, 6, &spec, &ObjectParams::default()).unwrap();
        let mut rng = Rng::new(1);
        let n = spec.image_size;
        for s in &data.samples {
            let ring = spec.build(s.input_elevation).unwrap();
            let views: Vec<Image> = (0..ring.len())
                .map(|_| Image::new(n, n, (0..3 * n * n).map(|_| rng.uniform() as f32).collect()).unwrap())
                .collect();
            let e = reprojection_consistency(&views, &s.depths, &s.masks, &ring).unwrap();
            // Bilinear blending of four taps lowers E|U − U'| = 1/3 slightly.
            assert!(e > 0.2 && e < 0.34, "noise error {e}");
        }
    }

    #[test]
    fn global_shift_cancels() {
        let spec = RingSpec::desk();
        let data = make_dataset(2, 8, &spec, &ObjectParams::default()).unwrap();
        let s = &data.samples[1];
        let ring = spec.build(s.input_elevation).unwrap();
        let mut rng = Rng::new(3);
        let n = spec.image_size;
        let views: Vec<Image> = (0..ring.len())
            .map(|_| Image::new(n, n, (0..3 * n * n).map(|_| 0.2 + 0.5 * rng.uniform() as f32).collect()).unwrap())
            .collect();
        let shifted: Vec<Image> = views
            .iter()
            .map(|v| Image::new(n, n, v.data().iter().map(|x| x + 0.125).collect()).unwrap())
            .collect();
        let a = reprojection_consistency(&views, &s.depths, &s.masks, &ring).unwrap();
        let b = reprojection_consistency(&shifted, &s.depths, &s.masks, &ring).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn missing_depth_is_an_error() {
        let spec = RingSpec::desk();
        let data = make_dataset(1, 8, &spec, &ObjectParams::default()).unwrap();
        let s = &data.samples[0];
        let ring = spec.build(s.input_elevation).unwrap();
        let views = gt_views(s, spec.image_size);
        assert!(matches!(
            reprojection_consistency(&views, &s.depths[..3], &s.masks, &ring),
            Err(MetricsError::MissingDepth(3))
        ));
        assert!(reprojection_consistency(&views[..2], &s.depths, &s.masks, &ring).is_err());
    }

    #[test]
    fn report_aggregates() {
        let mut r = MetricsReport::new();
        r.push(0, "psnr", 10.0);
        r.push(0, "psnr", 14.0);
        r.push(1, "psnr", 12.0);
        r.push(0, "reprojection", 0.1);
        let rows: Vec<_> = r.rows().collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].2, Summary { min: 10.0, max: 14.0, mean: 12.0, count: 2 });
        assert_eq!(rows[1].2.min, rows[1].2.max);
        assert_eq!(r.mean_of("psnr"), Some(12.0));
        assert_eq!(r.overall("psnr").unwrap().count, 3);
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }
}
