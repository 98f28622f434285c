//! Thin-plate-spline transforms over normalized `[-1, 1]^2` coordinates.
//!
//! A transform is an affine map plus a radial-basis part with kernel
//! `phi(r) = r^2 ln r`. Fitting solves the standard bordered system
//! `[K P; P^T 0]` so the RBF weights satisfy the polynomial side conditions;
//! the polynomial correction is folded into the stored affine. Evaluation at
//! a control point reproduces `control + displacement` exactly (up to solver
//! round-off), which the augmentation and the equivariance losses rely on.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Ratio of affine-perturbation sigma to control-displacement sigma in
/// [`random_tps`]. Keeps strength-0.15 draws comfortably inside the
/// `[-1.5, 1.5]^2` working box.
const AFFINE_SIGMA_RATIO: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct TpsTransform {
    control_points: Vec<[f64; 2]>,
    displacements: Vec<[f64; 2]>,
    /// Row-major 2x3: `[a, b, tx; c, d, ty]`, including the fit correction.
    affine: [[f64; 3]; 2],
    weights: Vec<[f64; 2]>,
}

#[inline]
fn kernel(q: f64) -> f64 {
    // q = r^2; phi(r) = r^2 ln r = 0.5 * q * ln q
    if q <= 0.0 {
        0.0
    } else {
        0.5 * q * q.ln()
    }
}

impl TpsTransform {
    /// Identity map with the given control points (zero displacements).
    pub fn identity(control_points: Vec<[f64; 2]>) -> Self {
        let n = control_points.len();
        TpsTransform {
            control_points,
            displacements: vec![[0.0, 0.0]; n],
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            weights: vec![[0.0, 0.0]; n],
        }
    }

    /// Pure translation by `t` (useful for constructing oracle cases).
    pub fn translation(control_points: Vec<[f64; 2]>, t: [f64; 2]) -> Self {
        let n = control_points.len();
        TpsTransform {
            control_points,
            displacements: vec![t; n],
            affine: [[1.0, 0.0, t[0]], [0.0, 1.0, t[1]]],
            weights: vec![[0.0, 0.0]; n],
        }
    }

    /// Fit the interpolating TPS that maps each control point to
    /// `control + displacement`, on top of `base_affine`.
    pub fn fit(
        control_points: Vec<[f64; 2]>,
        displacements: Vec<[f64; 2]>,
        base_affine: [[f64; 3]; 2],
    ) -> Result<Self> {
        let n = control_points.len();
        if n < 3 {
            return Err(Error::Contract(format!(
                "tps fit needs at least 3 control points, got {n}"
            )));
        }
        if displacements.len() != n {
            return Err(Error::Contract(
                "tps fit: displacement count must match control points".into(),
            ));
        }
        let dim = n + 3;
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dx = control_points[i][0] - control_points[j][0];
                    let dy = control_points[i][1] - control_points[j][1];
                    a[(i, j)] = kernel(dx * dx + dy * dy);
                }
            }
            a[(i, n)] = 1.0;
            a[(i, n + 1)] = control_points[i][0];
            a[(i, n + 2)] = control_points[i][1];
            a[(n, i)] = 1.0;
            a[(n + 1, i)] = control_points[i][0];
            a[(n + 2, i)] = control_points[i][1];
        }
        let mut rhs = DMatrix::<f64>::zeros(dim, 2);
        for i in 0..n {
            let [px, py] = control_points[i];
            let base_x = base_affine[0][0] * px + base_affine[0][1] * py + base_affine[0][2];
            let base_y = base_affine[1][0] * px + base_affine[1][1] * py + base_affine[1][2];
            rhs[(i, 0)] = px + displacements[i][0] - base_x;
            rhs[(i, 1)] = py + displacements[i][1] - base_y;
        }
        let lu = a.lu();
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Contract("tps fit: singular system (degenerate control points)".into()))?;
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            weights.push([sol[(i, 0)], sol[(i, 1)]]);
        }
        let mut affine = base_affine;
        for r in 0..2 {
            affine[r][2] += sol[(n, r)];
            affine[r][0] += sol[(n + 1, r)];
            affine[r][1] += sol[(n + 2, r)];
        }
        Ok(TpsTransform {
            control_points,
            displacements,
            affine,
            weights,
        })
    }

    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.control_points
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.displacements
    }

    pub fn affine(&self) -> &[[f64; 3]; 2] {
        &self.affine
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [
            self.affine[0][0] * p[0] + self.affine[0][1] * p[1] + self.affine[0][2],
            self.affine[1][0] * p[0] + self.affine[1][1] * p[1] + self.affine[1][2],
        ];
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let k = kernel(dx * dx + dy * dy);
            out[0] += w[0] * k;
            out[1] += w[1] * k;
        }
        out
    }

    /// Analytic 2x2 spatial derivative, row = output coordinate.
    pub fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let mut j = [
            [self.affine[0][0], self.affine[0][1]],
            [self.affine[1][0], self.affine[1][1]],
        ];
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let q = dx * dx + dy * dy;
            if q <= 0.0 {
                continue;
            }
            // grad phi = (ln q + 1) * (p - c)
            let f = q.ln() + 1.0;
            j[0][0] += w[0] * f * dx;
            j[0][1] += w[0] * f * dy;
            j[1][0] += w[1] * f * dx;
            j[1][1] += w[1] * f * dy;
        }
        j
    }

    /// Derivative of the jacobian entries w.r.t. the evaluation point:
    /// `out[r][c2][c] = d J[r][c2] / d p[c]`. Log-singular at control points;
    /// the squared distance is floored to keep values finite.
    pub fn jacobian_derivative(&self, p: [f64; 2]) -> [[[f64; 2]; 2]; 2] {
        let mut out = [[[0.0; 2]; 2]; 2];
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            let d = [p[0] - c[0], p[1] - c[1]];
            let q = (d[0] * d[0] + d[1] * d[1]).max(1e-9);
            let f = q.ln() + 1.0;
            for r in 0..2 {
                for c2 in 0..2 {
                    for cc in 0..2 {
                        let mut term = 2.0 * d[c2] * d[cc] / q;
                        if c2 == cc {
                            term += f;
                        }
                        out[r][c2][cc] += w[r] * term;
                    }
                }
            }
        }
        out
    }

    /// Evaluate on the pixel-center grid of an `(h, w)` image: `(h, w, 2)`.
    pub fn grid(&self, h: usize, w: usize) -> Array3<f64> {
        let mut g = Array3::zeros((h, w, 2));
        for i in 0..h {
            let gy = crate::tensor::norm_coord(i, h);
            for j in 0..w {
                let gx = crate::tensor::norm_coord(j, w);
                let q = self.eval([gx, gy]);
                g[[i, j, 0]] = q[0];
                g[[i, j, 1]] = q[1];
            }
        }
        g
    }

    /// Invert by Newton iteration (for small smooth deformations).
    pub fn invert(&self, target: [f64; 2]) -> [f64; 2] {
        let mut x = target;
        for _ in 0..12 {
            let f = self.eval(x);
            let ex = f[0] - target[0];
            let ey = f[1] - target[1];
            if ex * ex + ey * ey < 1e-22 {
                break;
            }
            let j = self.jacobian(x);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-9 {
                break;
            }
            x[0] -= (j[1][1] * ex - j[0][1] * ey) / det;
            x[1] -= (-j[1][0] * ex + j[0][0] * ey) / det;
        }
        x
    }
}

/// The 5x5 control grid over `[-1, 1]^2` used by the augmentation family.
pub fn control_grid_5x5() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(25);
    for i in 0..5 {
        for j in 0..5 {
            pts.push([-1.0 + 0.5 * j as f64, -1.0 + 0.5 * i as f64]);
        }
    }
    pts
}

/// Random TPS augmentation: i.i.d. Gaussian control displacements with
/// standard deviation `strength` and an identity-plus-noise affine part.
pub fn random_tps<R: Rng + ?Sized>(rng: &mut R, strength: f64) -> Result<TpsTransform> {
    if strength <= 0.0 {
        return Err(Error::Contract(format!(
            "random_tps: strength must be positive, got {strength}"
        )));
    }
    let control = control_grid_5x5();
    let normal = StandardNormal;
    let displacements: Vec<[f64; 2]> = (0..control.len())
        .map(|_| {
            [
                strength * <StandardNormal as Distribution<f64>>::sample(&normal, rng),
                strength * <StandardNormal as Distribution<f64>>::sample(&normal, rng),
            ]
        })
        .collect();
    let s_aff = AFFINE_SIGMA_RATIO * strength;
    let mut affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    for row in affine.iter_mut() {
        for entry in row.iter_mut() {
            *entry += s_aff * <StandardNormal as Distribution<f64>>::sample(&normal, rng);
        }
    }
    TpsTransform::fit(control, displacements, affine)
}
