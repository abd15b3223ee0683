//! Parameter-free spatial shifts that move each channel quarter one step
//! along width or height.
//!
//! Positions vacated by a shift keep their original value; every other
//! position takes the value of its neighbor before the shift.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Width,
    Height,
}

/// Direction of travel: `Forward` moves content toward larger indices
/// (`out[i] = in[i - 1]`), `Backward` toward smaller ones (`out[i] = in[i + 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Axis/direction assignment for each of the four channel quarters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSpec {
    pub groups: [(Axis, Direction); 4],
}

impl ShiftSpec {
    /// Quarters move +width, -width, +height, -height.
    pub const FIRST: ShiftSpec = ShiftSpec {
        groups: [
            (Axis::Width, Direction::Forward),
            (Axis::Width, Direction::Backward),
            (Axis::Height, Direction::Forward),
            (Axis::Height, Direction::Backward),
        ],
    };

    /// Same directions with the roles of width and height exchanged.
    pub const SECOND: ShiftSpec = ShiftSpec {
        groups: [
            (Axis::Height, Direction::Forward),
            (Axis::Height, Direction::Backward),
            (Axis::Width, Direction::Forward),
            (Axis::Width, Direction::Backward),
        ],
    };

    /// Quarter index (0..4) that channel `ch` of a `c`-channel map belongs to.
    pub fn group_of(channel: usize, channels: usize) -> usize {
        channel / (channels / 4)
    }

    /// Source position read by output position `(w, h)` for `group`.
    fn source(&self, group: usize, w: usize, h: usize, width: usize, height: usize) -> (usize, usize) {
        let (axis, dir) = self.groups[group];
        let step = |i: usize, n: usize| match dir {
            Direction::Forward if i >= 1 => i - 1,
            Direction::Backward if i + 1 < n => i + 1,
            _ => i,
        };
        match axis {
            Axis::Width => (step(w, width), h),
            Axis::Height => (w, step(h, height)),
        }
    }

    /// Applies the shift out of place.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, width, height, c) = check(x)?;
        let q = c / 4;
        let src = x.data();
        let mut out = src.to_vec();
        for bi in 0..b {
            let base = bi * width * height;
            for w in 0..width {
                for h in 0..height {
                    let dst = (base + w * height + h) * c;
                    for g in 0..4 {
                        let (sw, sh) = self.source(g, w, h, width, height);
                        let s = (base + sw * height + sh) * c;
                        out[dst + g * q..dst + (g + 1) * q]
                            .copy_from_slice(&src[s + g * q..s + (g + 1) * q]);
                    }
                }
            }
        }
        Tensor::new(x.dims().to_vec(), out)
    }

    /// Transpose of [`ShiftSpec::apply`]: every output gradient is added back
    /// to the position it was read from.
    pub fn adjoint<T: Scalar>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, width, height, c) = check(g)?;
        let q = c / 4;
        let src = g.data();
        let mut out = vec![T::zero(); g.len()];
        for bi in 0..b {
            let base = bi * width * height;
            for w in 0..width {
                for h in 0..height {
                    let from = (base + w * height + h) * c;
                    for grp in 0..4 {
                        let (sw, sh) = self.source(grp, w, h, width, height);
                        let to = (base + sw * height + sh) * c;
                        for j in grp * q..(grp + 1) * q {
                            out[to + j] += src[from + j];
                        }
                    }
                }
            }
        }
        Tensor::new(g.dims().to_vec(), out)
    }
}

fn check<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = x.feature_dims()?;
    if dims.3 % 4 != 0 {
        return Err(Error::config(format!(
            "spatial shift needs a channel count divisible by 4, got {}",
            dims.3
        )));
    }
    Ok(dims)
}

/// First shift: quarters move +width, -width, +height, -height.
pub fn spatial_shift1<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ShiftSpec::FIRST.apply(x)
}

/// Second (asymmetric) shift: quarters move +height, -height, +width, -width.
pub fn spatial_shift2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ShiftSpec::SECOND.apply(x)
}

pub fn spatial_shift1_adjoint<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    ShiftSpec::FIRST.adjoint(g)
}

pub fn spatial_shift2_adjoint<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    ShiftSpec::SECOND.adjoint(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coded() -> Tensor<f64> {
        // value = 100 w + 10 h + ch
        Tensor::from_fn([1, 2, 2, 4], |i| {
            let (w, h, ch) = (i / 8, (i / 4) % 2, i % 4);
            (100 * w + 10 * h + ch) as f64
        })
        .unwrap()
    }

    fn at(t: &Tensor<f64>, w: usize, h: usize) -> Vec<f64> {
        (0..4).map(|c| t.at(&[0, w, h, c])).collect()
    }

    #[test]
    fn first_shift_hand_trace() {
        let y = spatial_shift1(&coded()).unwrap();
        assert_eq!(at(&y, 0, 0), [0.0, 101.0, 2.0, 13.0]);
        assert_eq!(at(&y, 0, 1), [10.0, 111.0, 2.0, 13.0]);
        assert_eq!(at(&y, 1, 0), [0.0, 101.0, 102.0, 113.0]);
        assert_eq!(at(&y, 1, 1), [10.0, 111.0, 102.0, 113.0]);
    }

    #[test]
    fn second_shift_hand_trace() {
        let y = spatial_shift2(&coded()).unwrap();
        assert_eq!(at(&y, 0, 0), [0.0, 11.0, 2.0, 103.0]);
        assert_eq!(at(&y, 0, 1), [0.0, 11.0, 12.0, 113.0]);
        assert_eq!(at(&y, 1, 0), [100.0, 111.0, 2.0, 103.0]);
        assert_eq!(at(&y, 1, 1), [100.0, 111.0, 12.0, 113.0]);
    }

    #[test]
    fn constant_and_degenerate_maps_are_fixed_points() {
        let x = Tensor::<f64>::full([2, 3, 5, 8], 1.5).unwrap();
        assert_eq!(spatial_shift1(&x).unwrap(), x);
        assert_eq!(spatial_shift2(&x).unwrap(), x);

        let x = Tensor::<f64>::from_fn([3, 1, 1, 8], |i| i as f64).unwrap();
        assert_eq!(spatial_shift1(&x).unwrap(), x);
        assert_eq!(spatial_shift2(&x).unwrap(), x);
    }

    #[test]
    fn channel_count_must_divide_by_four() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 6]).unwrap();
        assert!(matches!(spatial_shift1(&x), Err(Error::Config(_))));
        assert!(matches!(spatial_shift2(&x), Err(Error::Config(_))));
    }

    #[test]
    fn border_row_is_retained() {
        let x = Tensor::<f64>::from_fn([1, 4, 3, 8], |i| (i * 7 % 11) as f64).unwrap();
        let y = spatial_shift1(&x).unwrap();
        for h in 0..3 {
            for c in 0..2 {
                assert_eq!(y.at(&[0, 0, h, c]), x.at(&[0, 0, h, c]));
            }
        }
    }

    #[test]
    fn shift_is_not_idempotent() {
        let x = Tensor::<f64>::from_fn([1, 4, 4, 8], |i| i as f64).unwrap();
        for shift in [spatial_shift1::<f64>, spatial_shift2::<f64>] {
            let once = shift(&x).unwrap();
            assert_ne!(once, x);
            assert_ne!(shift(&once).unwrap(), once);
        }
    }

    #[test]
    fn adjoint_of_single_axis_matches_closed_form() {
        // 1 x n x 1 x 4 map: only quarters 0 and 1 move (along width).
        let n = 5;
        let g = Tensor::<f64>::from_fn([1, n, 1, 4], |i| (i + 1) as f64).unwrap();
        let a = spatial_shift1_adjoint(&g).unwrap();
        let go = |j: usize| g.at(&[0, j, 0, 0]);
        assert_eq!(a.at(&[0, 0, 0, 0]), go(0) + go(1));
        for j in 1..n - 1 {
            assert_eq!(a.at(&[0, j, 0, 0]), go(j + 1));
        }
        assert_eq!(a.at(&[0, n - 1, 0, 0]), 0.0);
    }
}
