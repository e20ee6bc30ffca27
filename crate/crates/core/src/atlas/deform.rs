use nalgebra::Vector3;

use super::{signed_volume, AtlasMesh};

/// Log deformation prior (up to a constant) and its gradient with respect to the
/// deformed vertex positions. `value` is `-inf` (and the gradient empty) when any
/// tetrahedron is folded.
#[derive(Debug, Clone)]
pub struct DeformationPrior {
    pub value: f64,
    pub gradient: Vec<Vector3<f64>>,
}

/// Volume-ratio penalty `c(r) = (r - 1)^2 + (r - 1) - ln r` and its derivative.
/// Convex, minimal with value 0 at `r = 1`, and unbounded as `r -> 0+`.
#[inline]
pub fn volume_penalty(r: f64) -> (f64, f64) {
    let d = r - 1.0;
    (d * d + d - r.ln(), 2.0 * d + 1.0 - 1.0 / r)
}

pub fn deformation_log_prior(mesh: &AtlasMesh) -> DeformationPrior {
    let mut value = 0.0;
    let mut gradient = vec![Vector3::zeros(); mesh.vertices.len()];
    for tet in &mesh.tets {
        let v_ref = signed_volume(&mesh.reference_vertices, tet);
        let p = tet.map(|j| mesh.vertices[j]);
        let (a, b, c) = (p[1] - p[0], p[2] - p[0], p[3] - p[0]);
        let vol = a.dot(&b.cross(&c)) / 6.0;
        if !(vol > 0.0) {
            return DeformationPrior { value: f64::NEG_INFINITY, gradient: Vec::new() };
        }
        let (pen, dpen) = volume_penalty(vol / v_ref);
        value -= mesh.stiffness * pen;
        let scale = -mesh.stiffness * dpen / v_ref / 6.0;
        let g1 = b.cross(&c) * scale;
        let g2 = c.cross(&a) * scale;
        let g3 = a.cross(&b) * scale;
        gradient[tet[0]] -= g1 + g2 + g3;
        gradient[tet[1]] += g1;
        gradient[tet[2]] += g2;
        gradient[tet[3]] += g3;
    }
    DeformationPrior { value, gradient }
}
