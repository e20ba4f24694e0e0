//! Per-pixel target assignment: a pixel is positive iff its center lies
//! strictly inside a ground-truth box and the box's maximum regression
//! distance falls in the level's scale range; ties go to the smallest box.
//! No center sampling.

use crate::data::Annotation;
use ndarray::{Array3, Array4};

/// Class target value for background pixels.
pub const BACKGROUND: i64 = -1;

pub struct LevelTargets {
    pub stride: usize,
    /// [N, H, W]; class index or [`BACKGROUND`].
    pub class_target: Array3<i64>,
    /// [N, H, W] in [0, 1]; zero at background.
    pub centerness_target: Array3<f64>,
    /// [N, 4, H, W] left/top/right/bottom in stride-normalized units.
    pub regression_target: Array4<f64>,
}

impl LevelTargets {
    pub fn num_positives(&self) -> usize {
        self.class_target.iter().filter(|&&c| c != BACKGROUND).count()
    }
}

pub struct TargetMaps {
    pub levels: Vec<LevelTargets>,
}

impl TargetMaps {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.num_positives()).sum()
    }
}

/// `pyramid_shapes`: (H, W) per level, matching `strides` and
/// `scale_ranges` (half-open (lo, hi] on the max regression distance in
/// input pixels).
pub fn assign_targets(
    annotations: &[Annotation],
    pyramid_shapes: &[(usize, usize)],
    strides: &[usize],
    scale_ranges: &[(f64, f64)],
) -> TargetMaps {
    assert_eq!(pyramid_shapes.len(), strides.len());
    assert_eq!(scale_ranges.len(), strides.len());
    let n = annotations.len();
    let mut levels = Vec::with_capacity(strides.len());
    for (li, (&(h, w), &stride)) in pyramid_shapes.iter().zip(strides).enumerate() {
        let (lo, hi) = scale_ranges[li];
        let mut class_target = Array3::<i64>::from_elem((n, h, w), BACKGROUND);
        let mut centerness_target = Array3::<f64>::zeros((n, h, w));
        let mut regression_target = Array4::<f64>::zeros((n, 4, h, w));
        for (ni, ann) in annotations.iter().enumerate() {
            for yi in 0..h {
                for xi in 0..w {
                    let px = (xi * stride) as f64 + stride as f64 / 2.0;
                    let py = (yi * stride) as f64 + stride as f64 / 2.0;
                    let mut best: Option<(f64, usize)> = None; // (area, box index)
                    for (bi, b) in ann.boxes.iter().enumerate() {
                        let l = px - b.x1;
                        let t = py - b.y1;
                        let r = b.x2 - px;
                        let btm = b.y2 - py;
                        if l <= 0.0 || t <= 0.0 || r <= 0.0 || btm <= 0.0 {
                            continue;
                        }
                        let max_dist = l.max(t).max(r).max(btm);
                        if max_dist <= lo || max_dist > hi {
                            continue;
                        }
                        let area = b.area();
                        if best.is_none() || area < best.unwrap().0 {
                            best = Some((area, bi));
                        }
                    }
                    if let Some((_, bi)) = best {
                        let b = &ann.boxes[bi];
                        let l = px - b.x1;
                        let t = py - b.y1;
                        let r = b.x2 - px;
                        let btm = b.y2 - py;
                        class_target[[ni, yi, xi]] = ann.labels[bi] as i64;
                        let s = stride as f64;
                        regression_target[[ni, 0, yi, xi]] = l / s;
                        regression_target[[ni, 1, yi, xi]] = t / s;
                        regression_target[[ni, 2, yi, xi]] = r / s;
                        regression_target[[ni, 3, yi, xi]] = btm / s;
                        let cw = (l.min(r) / l.max(r)) * (t.min(btm) / t.max(btm));
                        centerness_target[[ni, yi, xi]] = cw.sqrt();
                    }
                }
            }
        }
        levels.push(LevelTargets {
            stride,
            class_target,
            centerness_target,
            regression_target,
        });
    }
    TargetMaps { levels }
}
