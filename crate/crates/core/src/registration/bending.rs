//! Discrete bending energy on the control lattice.
//!
//! For every control point whose stencil fits inside the lattice, second
//! differences of the coefficients are scaled by the control spacing:
//!
//! ```text
//! d_aa = (c[k+e_a] - 2 c[k] + c[k-e_a]) / s_a
//! d_ab = (c[k+e_a+e_b] - c[k+e_a-e_b] - c[k-e_a+e_b] + c[k-e_a-e_b]) / (4 sqrt(s_a s_b))
//! E    = (1/N) sum_k sum_comp [ sum_a d_aa^2 + 2 sum_{a<b} d_ab^2 ]
//! ```
//!
//! `N` is the number of control points. Affine coefficient fields give zero.

use nalgebra::Vector3;

use super::ControlPointGrid;

/// A linear stencil: offsets with weights, plus the energy multiplicity.
struct Stencil {
    taps: Vec<([isize; 3], f64)>,
    multiplicity: f64,
    /// Axes that need one neighbour on either side.
    axes: Vec<usize>,
}

fn stencils(spacing: [f64; 3]) -> Vec<Stencil> {
    let mut out = Vec::with_capacity(6);
    for a in 0..3 {
        let mut e = [0isize; 3];
        e[a] = 1;
        let neg = e.map(|v| -v);
        let inv = 1.0 / spacing[a];
        out.push(Stencil {
            taps: vec![(e, inv), ([0; 3], -2.0 * inv), (neg, inv)],
            multiplicity: 1.0,
            axes: vec![a],
        });
    }
    for a in 0..3 {
        for b in a + 1..3 {
            let inv = 1.0 / (4.0 * (spacing[a] * spacing[b]).sqrt());
            let off = |sa: isize, sb: isize| {
                let mut o = [0isize; 3];
                o[a] = sa;
                o[b] = sb;
                o
            };
            out.push(Stencil {
                taps: vec![
                    (off(1, 1), inv),
                    (off(1, -1), -inv),
                    (off(-1, 1), -inv),
                    (off(-1, -1), inv),
                ],
                multiplicity: 2.0,
                axes: vec![a, b],
            });
        }
    }
    out
}

/// Bending energy and its gradient with respect to every coefficient.
pub fn bending_energy(grid: &ControlPointGrid) -> (f64, Vec<Vector3<f64>>) {
    let [mx, my, mz] = grid.dims;
    let n = grid.len();
    let mut grad = vec![Vector3::zeros(); n];
    if n == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / n as f64;
    let mut energy = 0.0;
    let stencils = stencils(grid.spacing);
    let dims = [mx, my, mz];
    for k in 0..mz {
        for j in 0..my {
            for i in 0..mx {
                let c = [i, j, k];
                for st in &stencils {
                    if st.axes.iter().any(|&a| c[a] == 0 || c[a] + 1 >= dims[a]) {
                        continue;
                    }
                    let idx = |o: &[isize; 3]| {
                        grid.linear_index(
                            (i as isize + o[0]) as usize,
                            (j as isize + o[1]) as usize,
                            (k as isize + o[2]) as usize,
                        )
                    };
                    let mut d = Vector3::zeros();
                    for (o, w) in &st.taps {
                        d += grid.coefficients[idx(o)] * *w;
                    }
                    energy += st.multiplicity * d.norm_squared() * norm;
                    let scale = 2.0 * st.multiplicity * norm;
                    for (o, w) in &st.taps {
                        grad[idx(o)] += d * (scale * w);
                    }
                }
            }
        }
    }
    (energy, grad)
}
