//! Greedy, overlap-limited patch selection on a class activation map.
//!
//! Locations are visited from the highest activation down (ties broken in
//! row-major order). A location's patch is kept when its IoU with every
//! patch kept so far is strictly below the threshold, until the budget is
//! reached.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::crop;
use crate::rf::{PatchBox, RfState};
use crate::tensor::{Real, Tensor};

/// Single-channel activation map over the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    class_id: usize,
}

impl Cam {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize, class_id: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid("activation map is empty".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} activations for a {rows}x{cols} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("activation map has non-finite values".into()));
        }
        Ok(Cam {
            values,
            rows,
            cols,
            class_id,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Grid locations from highest to lowest activation, ties row-major.
    pub fn ranked_locations(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| {
            self.values[b]
                .partial_cmp(&self.values[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.into_iter().map(|i| (i / self.cols, i % self.cols)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelectionConfig {
    pub iou_threshold: f64,
    pub max_patches: usize,
}

impl Default for SelectionConfig {
    /// Threshold 0.3 and four patches: with the resized image as the first
    /// input, a sequence holds at most five inputs.
    fn default() -> Self {
        SelectionConfig {
            iou_threshold: 0.3,
            max_patches: 4,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Invalid(format!(
                "IoU threshold {} outside [0, 1]",
                self.iou_threshold
            )));
        }
        if self.max_patches == 0 {
            return Err(Error::Invalid("at least one patch must be allowed".into()));
        }
        Ok(())
    }
}

/// Pixel-count intersection over union.
pub fn iou(a: &PatchBox, b: &PatchBox) -> f64 {
    let ih = a.bottom().min(b.bottom()).saturating_sub(a.top.max(b.top));
    let iw = a.right().min(b.right()).saturating_sub(a.left.max(b.left));
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelectedPatch {
    /// Feature-grid coordinate.
    pub location: (usize, usize),
    pub patch: PatchBox,
    pub activation: f64,
}

pub fn select_patches(
    cam: &Cam,
    rf: &RfState,
    input: (usize, usize),
    cfg: &SelectionConfig,
) -> Result<Vec<SelectedPatch>> {
    cfg.validate()?;
    let grid = rf.num_locations(input)?;
    if grid != cam.dims() {
        return Err(Error::Shape(format!(
            "activation map {:?} does not match location grid {grid:?}",
            cam.dims()
        )));
    }
    let mut kept: Vec<SelectedPatch> = Vec::with_capacity(cfg.max_patches);
    for loc in cam.ranked_locations() {
        if kept.len() == cfg.max_patches {
            break;
        }
        let patch = rf.map_location(loc, input)?;
        if kept.iter().all(|k| iou(&k.patch, &patch) < cfg.iou_threshold) {
            kept.push(SelectedPatch {
                location: loc,
                patch,
                activation: cam.at(loc.0, loc.1),
            });
        }
    }
    Ok(kept)
}

/// Exact pixel crop of `patch` from a batch-1 image.
pub fn extract_patch<T: Real>(image: &Tensor<T>, patch: &PatchBox) -> Result<Tensor<T>> {
    let s = image.shape();
    if !patch.fits_in(s.h, s.w) {
        return Err(Error::BoxOutOfBounds(format!("{patch} in {}x{}", s.h, s.w)));
    }
    crop(image, patch.top, patch.left, patch.height, patch.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn iou_cases() {
        let a = PatchBox::new(0, 0, 95, 95);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &PatchBox::new(95, 0, 95, 95)), 0.0);
        let b = PatchBox::new(0, 8, 95, 95);
        assert!((iou(&a, &b) - 8265.0 / 9785.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn one_location_map() {
        let rf = RfState::from_layers(&[(95, 8)]).unwrap();
        let cam = Cam::new(vec![0.3], 1, 1, 0).unwrap();
        let sel = select_patches(&cam, &rf, (95, 95), &SelectionConfig::default()).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].patch, PatchBox::new(0, 0, 95, 95));
    }

    #[test]
    fn grid_mismatch_and_empty_map() {
        let rf = RfState::from_layers(&[(95, 8)]).unwrap();
        let cam = Cam::new(vec![0.0; 4], 2, 2, 0).unwrap();
        assert!(select_patches(&cam, &rf, (224, 224), &SelectionConfig::default()).is_err());
        assert!(Cam::new(vec![], 0, 0, 0).is_err());
        assert!(Cam::new(vec![f64::NAN], 1, 1, 0).is_err());
    }

    #[test]
    fn ties_break_row_major() {
        let cam = Cam::new(vec![1.0, 2.0, 2.0, 0.0], 2, 2, 0).unwrap();
        assert_eq!(cam.ranked_locations(), vec![(0, 1), (1, 0), (0, 0), (1, 1)]);
    }

    #[test]
    fn crop_cases() {
        let img = Tensor::<f32>::from_fn(Shape::new(1, 3, 224, 224), |_, c, y, x| {
            if y < 95 && x < 95 {
                7.0
            } else {
                (c * 100000 + y * 1000 + x) as f32
            }
        });
        let p = extract_patch(&img, &PatchBox::new(0, 0, 95, 95)).unwrap();
        assert!(p.data().iter().all(|&v| v == 7.0));
        let q = extract_patch(&img, &PatchBox::new(8, 16, 95, 95)).unwrap();
        for c in 0..3 {
            for y in 0..95 {
                for x in 0..95 {
                    assert_eq!(q.at(0, c, y, x), img.at(0, c, y + 8, x + 16));
                }
            }
        }
        assert!(extract_patch(&img, &PatchBox::new(130, 0, 95, 95)).is_err());
    }
}
