//! Applying displacement fields to volumes, label masks and points.

use crate::error::{Error, Result};
use crate::tensor::{sample_point, Graph, Tensor};
use crate::volume::{mm_to_voxel, voxel_to_mm, DisplacementField, Landmark, LandmarkSet, LabelMask, Volume};

fn check_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::Dims(format!("grid {a:?} does not match field {b:?}")));
    }
    Ok(())
}

/// `m∘φ` by trilinear sampling at `p + u(p)`, clamped to the border.
pub fn warp_volume(moving: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_dims(moving.dims(), field.dims())?;
    let out = warp_tensor(&moving.to_tensor(), &field.to_tensor())?;
    Volume::from_tensor(&out, moving.spacing())
}

/// Trilinear warp of a multichannel `[C, Z, Y, X]` tensor.
pub fn warp_tensor(moving: &Tensor, field: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let m = g.constant(moving.clone());
    let u = g.constant(field.clone());
    Ok(g.value(g.warp(m, u)?))
}

/// Nearest-neighbor label warp (evaluation path): label at `round(p + u(p))`,
/// clamped to the grid.
pub fn warp_labels(mask: &LabelMask, field: &DisplacementField) -> Result<LabelMask> {
    check_dims(mask.dims(), field.dims())?;
    let [nx, ny, nz] = mask.dims();
    let nearest = |v: f32, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    LabelMask::from_fn(mask.dims(), mask.spacing(), |x, y, z| {
        let sx = nearest(x as f32 + field.get(0, x, y, z), nx);
        let sy = nearest(y as f32 + field.get(1, x, y, z), ny);
        let sz = nearest(z as f32 + field.get(2, x, y, z), nz);
        mask.get(sx, sy, sz)
    })
}

/// Maps points given in millimeters through `φ(p) = p + u(p)`, with `u`
/// sampled trilinearly at `p`.
pub fn map_landmarks(points: &LandmarkSet, field: &DisplacementField) -> Result<LandmarkSet> {
    let t = field.to_tensor();
    let spacing = field.spacing();
    let mut out = Vec::with_capacity(points.len());
    for lm in points.points() {
        let v = mm_to_voxel(lm.position, spacing);
        let mut mapped = [0.0; 3];
        for c in 0..3 {
            mapped[c] = v[c] + sample_point(&t, c, v)? as f64;
        }
        out.push(Landmark {
            name: lm.name.clone(),
            position: voxel_to_mm(mapped, spacing),
        });
    }
    LandmarkSet::new(out)
}
