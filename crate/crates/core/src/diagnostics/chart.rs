//! Hyperspherical coordinate chart and a finite-difference divergence
//! computed entirely inside the chart, `(1/√g) Σ_j ∂_j(√g X^j)`.
//!
//! Chart coordinates `u = (u_0, …, u_{n-1})` map to
//! `z_k = (Π_{i<k} sin u_i) cos u_k` for `k < n` and `z_n = Π_{i<n} sin u_i`.
//! `u_0..u_{n-2}` are polar angles in `(0, π)`, `u_{n-1}` is the azimuth.
//! The coordinate frame is orthogonal, so the metric is diagonal.

use rand::Rng;

/// Polar cap excluded around chart singularities.
pub const POLE_MARGIN: f64 = 0.1;

pub fn embed(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut z = Vec::with_capacity(n + 1);
    let mut prod = 1.0;
    for &ui in u {
        z.push(prod * ui.cos());
        prod *= ui.sin();
    }
    z.push(prod);
    z
}

/// Inverse of [`embed`] for points whose polar angles are in `(0, π)`.
pub fn coords_of(z: &[f64]) -> Vec<f64> {
    let n = z.len() - 1;
    let mut u = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let tail: f64 = z[k + 1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        u.push(tail.atan2(z[k]));
    }
    u.push(z[n].atan2(z[n - 1]));
    u
}

/// True if all polar angles stay at least [`POLE_MARGIN`] away from 0 and π.
pub fn is_interior(u: &[f64]) -> bool {
    let n = u.len();
    u[..n - 1]
        .iter()
        .all(|a| *a > POLE_MARGIN && *a < std::f64::consts::PI - POLE_MARGIN)
}

pub fn random_interior_coords<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut u: Vec<f64> = (0..n - 1)
        .map(|_| rng.gen_range(POLE_MARGIN + 0.05..PI - POLE_MARGIN - 0.05))
        .collect();
    u.push(rng.gen_range(-PI..PI));
    u
}

/// Columns `∂z/∂u_j` of the chart Jacobian.
fn frame(u: &[f64]) -> Vec<Vec<f64>> {
    let n = u.len();
    (0..n)
        .map(|j| {
            let mut col = vec![0.0; n + 1];
            for (k, ck) in col.iter_mut().enumerate() {
                if j > k && k < n {
                    continue;
                }
                let mut prod = 1.0;
                for (i, &ui) in u.iter().enumerate().take(k.min(n)) {
                    prod *= if i == j { ui.cos() } else { ui.sin() };
                }
                *ck = if k == n {
                    prod
                } else if j == k {
                    -prod * u[k].sin()
                } else {
                    prod * u[k].cos()
                };
            }
            col
        })
        .collect()
}

/// `√g` and the chart components `X^j` of an ambient tangent vector at `u`.
fn density_weighted_components(field: &dyn Fn(&[f64]) -> Vec<f64>, u: &[f64]) -> Vec<f64> {
    let z = embed(u);
    let x = field(&z);
    let e = frame(u);
    let norms2: Vec<f64> = e.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let sqrt_g: f64 = norms2.iter().map(|v| v.sqrt()).product();
    e.iter()
        .zip(&norms2)
        .map(|(c, n2)| {
            let comp: f64 = c.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / n2;
            sqrt_g * comp
        })
        .collect()
}

/// Riemannian divergence of an ambient tangent field at chart point `u`,
/// by central differences with step `h`.
pub fn divergence(field: &dyn Fn(&[f64]) -> Vec<f64>, u: &[f64], h: f64) -> f64 {
    let n = u.len();
    let e = frame(u);
    let sqrt_g: f64 = e
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .product();
    let mut acc = 0.0;
    for j in 0..n {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[j] += h;
        dn[j] -= h;
        let fp = density_weighted_components(field, &up)[j];
        let fm = density_weighted_components(field, &dn)[j];
        acc += (fp - fm) / (2.0 * h);
    }
    acc / sqrt_g
}
