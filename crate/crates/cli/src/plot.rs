//! Slice renderings of displacement fields: RGB PPM of the components and a
//! grayscale PGM of the Jacobian determinant.

use std::fmt;
use std::str::FromStr;

use morphreg_core::metrics::jacobian_determinant;
use morphreg_core::volume::DisplacementField;
use morphreg_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(format!("axis must be x, y or z, got {s:?}")),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// Voxel coordinates of a slice as `(width, height, coords(col, row))`.
/// Slices normal to z span (x, y); normal to y span (x, z); normal to x span (y, z).
fn slice_geometry(dims: [usize; 3], axis: Axis, k: usize) -> Result<(usize, usize, impl Fn(usize, usize) -> [usize; 3])> {
    let a = axis as usize;
    if k >= dims[a] {
        return Err(Error::Invalid(format!("slice {k} outside 0..{} along {axis}", dims[a])));
    }
    let (u, v) = match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    };
    let at = move |col: usize, row: usize| {
        let mut p = [0; 3];
        p[a] = k;
        p[u] = col;
        p[v] = row;
        p
    };
    Ok((dims[u], dims[v], at))
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

/// Maps `[−a, a]` linearly to `[0, 255]`; `a = 0` gives mid gray.
pub fn component_byte(u: f32, a: f32) -> u8 {
    if a == 0.0 {
        return 128;
    }
    (127.5 + 127.5 * (u / a) as f64).round().clamp(0.0, 255.0) as u8
}

/// Folding voxels are black; positive determinants map `(0, 2]` onto `[1, 255]`.
pub fn determinant_byte(det: f64) -> u8 {
    if det <= 0.0 || det.is_nan() {
        return 0;
    }
    1 + (254.0 * det.min(2.0) / 2.0).round() as u8
}

/// Binary PPM (P6) of slice `k` with `(u_x, u_y, u_z)` as (R, G, B), scaled by the
/// largest absolute component of the whole field.
pub fn field_ppm(field: &DisplacementField, axis: Axis, k: usize) -> Result<Vec<u8>> {
    let (w, h, at) = slice_geometry(field.dims(), axis, k)?;
    let a = field.max_abs();
    let mut out = header("P6", w, h);
    for row in 0..h {
        for col in 0..w {
            let [x, y, z] = at(col, row);
            out.extend((0..3).map(|c| component_byte(field.get(c, x, y, z), a)));
        }
    }
    Ok(out)
}

/// Binary PGM (P5) of the Jacobian determinant on slice `k`.
pub fn jacobian_pgm(field: &DisplacementField, axis: Axis, k: usize) -> Result<Vec<u8>> {
    let dims = field.dims();
    let (w, h, at) = slice_geometry(dims, axis, k)?;
    let det = jacobian_determinant(field);
    let mut out = header("P5", w, h);
    for row in 0..h {
        for col in 0..w {
            let [x, y, z] = at(col, row);
            out.push(determinant_byte(det[(z * dims[1] + y) * dims[0] + x]));
        }
    }
    Ok(out)
}
