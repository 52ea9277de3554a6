/// Linearization of `h(p_a, p_b) = d_min² − ‖p_a − p_b‖² ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvoidanceLinearization {
    pub residual: f64,
    pub grad_a: [f64; 2],
    pub grad_b: [f64; 2],
}

const COINCIDENT: f64 = 1e-12;

/// Uses `+x` as the separation direction for coincident points.
pub fn linearize_avoidance(p_a: [f64; 2], p_b: [f64; 2], d_min: f64) -> AvoidanceLinearization {
    linearize_avoidance_with(p_a, p_b, d_min, [1.0, 0.0])
}

/// Coincident points get gradients `∓2·d_min·fallback`, which push `p_a`
/// along `fallback` and `p_b` against it.
pub fn linearize_avoidance_with(p_a: [f64; 2], p_b: [f64; 2], d_min: f64, fallback: [f64; 2]) -> AvoidanceLinearization {
    let diff = [p_a[0] - p_b[0], p_a[1] - p_b[1]];
    let dist_sq = diff[0] * diff[0] + diff[1] * diff[1];
    let residual = d_min * d_min - dist_sq;
    if dist_sq.sqrt() <= COINCIDENT * d_min.max(1.0) {
        let norm = fallback[0].hypot(fallback[1]);
        let n = if norm > 0.0 { [fallback[0] / norm, fallback[1] / norm] } else { [1.0, 0.0] };
        let g = [-2.0 * d_min * n[0], -2.0 * d_min * n[1]];
        return AvoidanceLinearization { residual, grad_a: g, grad_b: [-g[0], -g[1]] };
    }
    AvoidanceLinearization {
        residual,
        grad_a: [-2.0 * diff[0], -2.0 * diff[1]],
        grad_b: [2.0 * diff[0], 2.0 * diff[1]],
    }
}
