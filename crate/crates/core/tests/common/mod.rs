#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2mlp::Tensor;

/// Per-element shift oracle. `moves[g]` is the `(dw, dh)` displacement of
/// channel quarter `g`: output position `(w, h)` reads input `(w - dw, h - dh)`
/// when that lies inside the map and keeps its own value otherwise.
pub fn shift_oracle(x: &Tensor<f64>, moves: [(i64, i64); 4]) -> Tensor<f64> {
    let d = x.dims().to_vec();
    let (b, w, h, c) = (d[0], d[1], d[2], d[3]);
    let quarter = c / 4;
    let mut out = vec![0.0; x.len()];
    let mut n = 0;
    for bi in 0..b {
        for wi in 0..w {
            for hi in 0..h {
                for ch in 0..c {
                    let (dw, dh) = moves[ch / quarter];
                    let sw = wi as i64 - dw;
                    let sh = hi as i64 - dh;
                    let inside = sw >= 0 && sw < w as i64 && sh >= 0 && sh < h as i64;
                    out[n] = if inside {
                        x.at(&[bi, sw as usize, sh as usize, ch])
                    } else {
                        x.at(&[bi, wi, hi, ch])
                    };
                    n += 1;
                }
            }
        }
    }
    Tensor::new(d, out).unwrap()
}

/// Quarter moves of the first shift: +width, -width, +height, -height.
pub const FIRST_MOVES: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
/// Quarter moves of the second shift: +height, -height, +width, -width.
pub const SECOND_MOVES: [(i64, i64); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

/// Random integer-valued map with `1..=max_side` spatial extents and a
/// channel count in `{4, 8, .., max_channels}`.
pub fn random_integer_map(rng: &mut ChaCha8Rng, max_side: usize, max_channels: usize) -> Tensor<f64> {
    let b = rng.random_range(1..=2);
    let w = rng.random_range(1..=max_side);
    let h = rng.random_range(1..=max_side);
    let c = 4 * rng.random_range(1..=max_channels / 4);
    Tensor::from_fn([b, w, h, c], |_| rng.random_range(-50..=50) as f64).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff<T: s2mlp::tensor::Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
