//! Binary morphology with cubic (26-connected) structuring elements.
//!
//! A cube of radius `r` is separable, so dilation and erosion run as three 1D
//! max / min passes. Voxels outside the grid are ignored.

use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{Mask, Shape3};

fn line_pass(data: &mut [u8], shape: Shape3, axis: usize, radius: usize, dilate: bool) {
    let dims = shape.to_array();
    let n = dims[axis];
    let stride = match axis {
        0 => shape.w * shape.l,
        1 => shape.l,
        _ => 1,
    };
    let mut line = vec![0u8; n];
    for start in 0..data.len() {
        // first element of each line along `axis`
        if (start / stride) % n != 0 {
            continue;
        }
        for (k, v) in line.iter_mut().enumerate() {
            *v = data[start + k * stride];
        }
        for k in 0..n {
            let lo = k.saturating_sub(radius);
            let hi = (k + radius).min(n - 1);
            let window = &line[lo..=hi];
            data[start + k * stride] = if dilate {
                u8::from(window.iter().any(|v| *v != 0))
            } else {
                u8::from(window.iter().all(|v| *v != 0))
            };
        }
    }
}

fn morph(mask: &Mask, radius: usize, dilate: bool) -> Mask {
    let mut out = mask.map(|v| u8::from(*v != 0));
    if radius == 0 {
        return out;
    }
    let shape = mask.shape();
    for axis in 0..3 {
        line_pass(out.data_mut(), shape, axis, radius, dilate);
    }
    out
}

/// Dilation by a cube of half-width `radius`.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    morph(mask, radius, true)
}

/// Erosion by a cube of half-width `radius`.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    morph(mask, radius, false)
}

/// Voxels within `radius` steps (26-connectivity) of the label / background
/// interface, on either side of it. Empty for `radius == 0`.
pub fn border_band(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.map(|_| 0);
    }
    let grown = dilate(mask, radius);
    let shrunk = erode(mask, radius);
    let data: Vec<u8> = grown
        .data()
        .iter()
        .zip(shrunk.data())
        .map(|(g, s)| u8::from(*g != 0 && *s == 0))
        .collect();
    Mask::new(mask.shape(), mask.spacing(), data).expect("same geometry")
}
