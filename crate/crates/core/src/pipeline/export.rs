//! OBJ export of posed bodies and atomic file writes.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::body::{BodyParams, BodyTemplate, Capsule, PosedBody};
use crate::error::Result;
use crate::geometry::any_orthogonal;

/// Vertices around each ring of a capsule.
const SEGMENTS: usize = 16;
/// Rings per hemispherical end cap, excluding the pole.
const CAP_RINGS: usize = 4;

/// Closed, outward-facing triangle mesh of a capsule. Vertices are returned
/// bottom pole first, then rings from `a` to `b`, then the top pole; faces
/// index into them from zero.
pub fn capsule_mesh(c: &Capsule) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let axis = c.b - c.a;
    let d = if axis.norm() > 0.0 { axis.normalize() } else { Vector3::z() };
    let u = any_orthogonal(&d).normalize();
    let w = d.cross(&u);
    // rings: (centre, radius), bottom cap rising to the equator, then the top cap
    let mut rings = Vec::with_capacity(2 * CAP_RINGS);
    for k in 1..=CAP_RINGS {
        let phi = -PI / 2.0 + PI / 2.0 * k as f64 / CAP_RINGS as f64;
        rings.push((c.a + d * (c.radius * phi.sin()), c.radius * phi.cos()));
    }
    for k in 0..CAP_RINGS {
        let phi = PI / 2.0 * k as f64 / CAP_RINGS as f64;
        rings.push((c.b + d * (c.radius * phi.sin()), c.radius * phi.cos()));
    }
    let mut vertices = vec![c.a - d * c.radius];
    for (centre, rho) in &rings {
        for i in 0..SEGMENTS {
            let th = 2.0 * PI * i as f64 / SEGMENTS as f64;
            vertices.push(centre + (u * th.cos() + w * th.sin()) * *rho);
        }
    }
    vertices.push(c.b + d * c.radius);
    let top = vertices.len() - 1;
    let at = |ring: usize, i: usize| 1 + ring * SEGMENTS + i % SEGMENTS;
    let mut faces = Vec::new();
    for i in 0..SEGMENTS {
        faces.push([0, at(0, i + 1), at(0, i)]);
    }
    for r in 0..rings.len() - 1 {
        for i in 0..SEGMENTS {
            faces.push([at(r, i), at(r, i + 1), at(r + 1, i + 1)]);
            faces.push([at(r, i), at(r + 1, i + 1), at(r + 1, i)]);
        }
    }
    let last = rings.len() - 1;
    for i in 0..SEGMENTS {
        faces.push([top, at(last, i), at(last, i + 1)]);
    }
    (vertices, faces)
}

/// Wavefront OBJ of every subject's capsules, one object per subject and one
/// group per bone.
pub fn export_obj(template: &BodyTemplate, subjects: &[BodyParams]) -> Result<String> {
    let mut out = String::from("# posed capsule bodies, metres\n");
    let mut base = 1usize;
    for (s, params) in subjects.iter().enumerate() {
        let body = PosedBody::new(template, params)?;
        let _ = writeln!(out, "o subject_{s}");
        for (b, capsule) in body.capsules_for(template).capsules.iter().enumerate() {
            let (vertices, faces) = capsule_mesh(capsule);
            let _ = writeln!(out, "g subject_{s}_bone_{b}");
            for v in &vertices {
                let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
            }
            for f in &faces {
                let _ = writeln!(out, "f {} {} {}", f[0] + base, f[1] + base, f[2] + base);
            }
            base += vertices.len();
        }
    }
    Ok(out)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    if let Err(e) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}
