//! Receptive-field arithmetic for padding-free networks.
//!
//! Pushing a layer with kernel `k` and stride `s` onto a stack whose
//! accumulated field is `K` with accumulated stride `S` yields
//! `K' = K + (k - 1) * S` and `S' = S * s`. Because no layer pads, feature
//! location `(i, j)` of the last layer sees exactly the input window
//! `[i*S, i*S + K) × [j*S, j*S + K)`, and an `H × W` input produces
//! `(⌊(H-K)/S⌋ + 1) × (⌊(W-K)/S⌋ + 1)` locations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv_forward, ConvKernel};
use crate::tensor::{Shape, Tensor};

/// Accumulated receptive field and stride of a layer stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfState {
    rf: usize,
    stride: usize,
    layers: Vec<(usize, usize)>,
}

impl RfState {
    /// State after the first layer: `K = k`, `S = s`.
    pub fn first(kernel: usize, stride: usize) -> Result<Self> {
        check_layer(kernel, stride)?;
        Ok(RfState {
            rf: kernel,
            stride,
            layers: vec![(kernel, stride)],
        })
    }

    /// The empty stack: a 1-pixel field with unit stride.
    pub fn identity() -> Self {
        RfState {
            rf: 1,
            stride: 1,
            layers: Vec::new(),
        }
    }

    pub fn push_layer(&self, kernel: usize, stride: usize) -> Result<Self> {
        check_layer(kernel, stride)?;
        let mut layers = self.layers.clone();
        layers.push((kernel, stride));
        Ok(RfState {
            rf: self.rf + (kernel - 1) * self.stride,
            stride: self.stride * stride,
            layers,
        })
    }

    pub fn from_layers(layers: &[(usize, usize)]) -> Result<Self> {
        layers
            .iter()
            .try_fold(RfState::identity(), |st, &(k, s)| st.push_layer(k, s))
    }

    pub fn rf(&self) -> usize {
        self.rf
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `(kernel, stride)` of every pushed layer in order.
    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    fn check_fits(&self, input: (usize, usize)) -> Result<()> {
        let (h, w) = input;
        if self.rf > h.min(w) {
            return Err(Error::RfConstraint {
                rf: self.rf,
                height: h,
                width: w,
            });
        }
        Ok(())
    }

    /// Size of the feature grid on an `input = (H, W)` image.
    pub fn num_locations(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        self.check_fits(input)?;
        let (h, w) = input;
        Ok((
            (h - self.rf) / self.stride + 1,
            (w - self.rf) / self.stride + 1,
        ))
    }

    /// Input window seen by feature location `loc = (i, j)`.
    pub fn map_location(&self, loc: (usize, usize), input: (usize, usize)) -> Result<PatchBox> {
        let (rows, cols) = self.num_locations(input)?;
        let (row, col) = loc;
        if row >= rows || col >= cols {
            return Err(Error::OutOfGrid {
                row,
                col,
                rows,
                cols,
            });
        }
        Ok(PatchBox {
            top: row * self.stride,
            left: col * self.stride,
            height: self.rf,
            width: self.rf,
        })
    }
}

fn check_layer(kernel: usize, stride: usize) -> Result<()> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Invalid(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    Ok(())
}

/// Integer rectangle in input pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        PatchBox {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom()).contains(&y) && (self.left..self.right()).contains(&x)
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.bottom() <= height && self.right() <= width
    }
}

impl fmt::Display for PatchBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(top {}, left {}, {}x{})",
            self.top, self.left, self.height, self.width
        )
    }
}

/// A padding-free network whose spatial output can be probed.
pub trait SpatialStack {
    fn rf_state(&self) -> RfState;
    fn in_channels(&self) -> usize;
    /// Runs the stack on a batch-1 input and returns its last feature map.
    fn forward_map(&self, input: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Plain sequence of valid convolutions, no nonlinearity.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<ConvKernel<f64>>,
}

impl SpatialStack for ConvStack {
    fn rf_state(&self) -> RfState {
        let layers: Vec<(usize, usize)> = self
            .layers
            .iter()
            .map(|k| (k.kernel_size().0, k.stride.0))
            .collect();
        RfState::from_layers(&layers).expect("positive kernels")
    }

    fn in_channels(&self) -> usize {
        self.layers
            .first()
            .map_or(1, |k| k.weights.shape().c * k.groups)
    }

    fn forward_map(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut x = input.clone();
        for k in &self.layers {
            x = conv_forward(&x, &k.weights, k.stride, k.groups)?;
        }
        Ok(x)
    }
}

/// Outcome of [`verify_by_sensitivity`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sensitivity {
    /// Every probe agreed with [`RfState::map_location`].
    Exact,
    /// The feature grid itself differs from the predicted one.
    GridMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    /// Perturbing `pixel` changed (or failed to change) feature `location`
    /// against the prediction.
    Disagreement {
        location: (usize, usize),
        pixel: (usize, usize),
        predicted_inside: bool,
    },
}

impl Sensitivity {
    pub fn is_exact(&self) -> bool {
        matches!(self, Sensitivity::Exact)
    }
}

/// Deterministic probe pixels: edges of a few predicted boxes (just inside
/// and just outside) plus a scattered sample.
fn probe_pixels(state: &RfState, grid: (usize, usize), input: (usize, usize)) -> Vec<(usize, usize)> {
    let (h, w) = input;
    let mut locs = vec![
        (0, 0),
        (grid.0 - 1, grid.1 - 1),
        (grid.0 / 2, grid.1 / 2),
        (0, grid.1 - 1),
    ];
    locs.dedup();
    let mut pixels = Vec::new();
    for &loc in &locs {
        let b = state.map_location(loc, input).expect("in grid");
        let rows = [
            b.top.checked_sub(1),
            Some(b.top),
            Some(b.top + b.height / 2),
            Some(b.bottom() - 1),
            Some(b.bottom()),
        ];
        let cols = [
            b.left.checked_sub(1),
            Some(b.left),
            Some(b.left + b.width / 2),
            Some(b.right() - 1),
            Some(b.right()),
        ];
        for r in rows.iter().flatten() {
            for c in cols.iter().flatten() {
                if *r < h && *c < w {
                    pixels.push((*r, *c));
                }
            }
        }
    }
    // scattered probes from a fixed LCG so runs are reproducible
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    for _ in 0..16 {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let r = (s >> 33) as usize % h;
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let c = (s >> 33) as usize % w;
        pixels.push((r, c));
    }
    pixels.sort_unstable();
    pixels.dedup();
    pixels
}

/// Checks the exact-mapping claim of a stack by perturbation.
///
/// Each probe adds to one input pixel (all channels) and reruns the stack.
/// A feature location must change iff the pixel lies inside its predicted
/// window. One forward pass checks a probe against every location at once.
pub fn verify_by_sensitivity<S: SpatialStack + ?Sized>(
    stack: &S,
    input: (usize, usize),
) -> Result<Sensitivity> {
    let state = stack.rf_state();
    let expected = state.num_locations(input)?;
    let (h, w) = input;
    let c = stack.in_channels();
    // smooth positive base image so that no probe lands on a degenerate point
    let base = Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| {
        0.5 + 0.25 * ((y as f64 * 0.37 + ch as f64).sin() * (x as f64 * 0.23).cos())
    });
    let reference = stack.forward_map(&base)?;
    let rs = reference.shape();
    if (rs.h, rs.w) != expected {
        return Ok(Sensitivity::GridMismatch {
            expected,
            actual: (rs.h, rs.w),
        });
    }
    for (py, px) in probe_pixels(&state, expected, input) {
        let mut probe = base.clone();
        for ch in 0..c {
            let v = probe.at(0, ch, py, px);
            probe.set(0, ch, py, px, v + 1.0);
        }
        let out = stack.forward_map(&probe)?;
        for i in 0..expected.0 {
            for j in 0..expected.1 {
                let changed = (0..rs.c).any(|ch| out.at(0, ch, i, j) != reference.at(0, ch, i, j));
                let inside = state.map_location((i, j), input)?.contains(py, px);
                if changed != inside {
                    return Ok(Sensitivity::Disagreement {
                        location: (i, j),
                        pixel: (py, px),
                        predicted_inside: inside,
                    });
                }
            }
        }
    }
    Ok(Sensitivity::Exact)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rf_column() {
        let mut st = RfState::first(3, 2).unwrap();
        let mut rfs = vec![st.rf()];
        for &(k, s) in &[(3, 2), (3, 2), (3, 1), (3, 1), (3, 1), (3, 1), (3, 1)] {
            st = st.push_layer(k, s).unwrap();
            rfs.push(st.rf());
        }
        assert_eq!(rfs, vec![3, 7, 15, 31, 47, 63, 79, 95]);
        assert_eq!(st.stride(), 8);
    }

    #[test]
    fn pointwise_layer_is_identity() {
        let st = RfState::first(7, 4).unwrap();
        let next = st.push_layer(1, 1).unwrap();
        assert_eq!((next.rf(), next.stride()), (7, 4));
    }

    #[test]
    fn two_layer_stack() {
        let st = RfState::first(5, 1).unwrap().push_layer(5, 1).unwrap();
        assert_eq!((st.rf(), st.stride()), (9, 1));
        assert!(RfState::first(0, 1).is_err());
    }

    #[test]
    fn location_counts() {
        let big = RfState::from_layers(&[(200, 8)]).unwrap();
        assert_eq!(big.num_locations((224, 224)).unwrap(), (4, 4));
        let anchor = RfState::from_layers(&[(95, 8)]).unwrap();
        assert_eq!(anchor.num_locations((224, 224)).unwrap(), (17, 17));
        assert_eq!(anchor.num_locations((95, 95)).unwrap(), (1, 1));
        assert!(matches!(
            anchor.num_locations((94, 224)),
            Err(Error::RfConstraint { rf: 95, .. })
        ));
    }

    #[test]
    fn mapped_boxes() {
        let st = RfState::from_layers(&[(95, 8)]).unwrap();
        let full = (224, 224);
        assert_eq!(st.map_location((0, 0), full).unwrap(), PatchBox::new(0, 0, 95, 95));
        let last = st.map_location((16, 16), full).unwrap();
        assert_eq!(last, PatchBox::new(128, 128, 95, 95));
        assert_eq!(last.bottom() - 1, 222);
        assert!(last.fits_in(224, 224));
        assert_eq!(st.map_location((2, 5), full).unwrap(), PatchBox::new(16, 40, 95, 95));
        assert!(matches!(
            st.map_location((17, 0), full),
            Err(Error::OutOfGrid { .. })
        ));
    }

    #[test]
    fn single_conv_is_exact() {
        let k = ConvKernel::new(Tensor::full(Shape::new(1, 1, 3, 3), 0.5), 1, 1);
        let stack = ConvStack { layers: vec![k] };
        assert_eq!(stack.rf_state().rf(), 3);
        assert!(verify_by_sensitivity(&stack, (5, 5)).unwrap().is_exact());
    }
}
