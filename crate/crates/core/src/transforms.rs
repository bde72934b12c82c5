//! Discrete Legendre and c-transforms on the grid, finite-difference gradients,
//! and mass-conserving pushforward of densities.
//!
//! The Legendre transform `phi*(y) = max_x x.y - phi(x)` is taken over cell
//! centers only and computed exactly by nested 1D transforms (rows, then
//! columns), each in linear time through the lower convex hull of the samples.
//! For the quadratic cost `(w/2)|x - y|^2` the c-transform reduces to it via
//! `f^c(y) = w (|y|^2/2 - phi*(y))` with `phi(x) = |x|^2/2 - f(x)/w`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid2D, PotentialField};

/// How a pushforward deposits mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplatMode {
    /// Bilinear weights onto the four surrounding cell centers.
    #[default]
    Bilinear,
    /// All mass onto the nearest cell center (debugging aid).
    Nearest,
}

fn check_weight(w: f64) -> Result<()> {
    if !(w.is_finite() && w > 0.0) {
        return Err(Error::NonpositiveWeight(w));
    }
    Ok(())
}

/// Lower convex hull of `(xs[i], phi[i])` for ascending `xs`, as indices.
fn lower_hull(xs: &[f64], phi: &[f64], hull: &mut Vec<usize>) {
    hull.clear();
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (xs[b] - xs[a]) * (phi[i] - phi[a]) - (phi[b] - phi[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
}

/// 1D discrete Legendre transform: `out[j] = max_i xs[i] * ys[j] - phi[i]`
/// for ascending `xs` and `ys`. Optionally records the maximizing index.
fn legendre_1d(
    xs: &[f64],
    phi: &[f64],
    ys: &[f64],
    out: &mut [f64],
    mut argmax: Option<&mut [usize]>,
    hull: &mut Vec<usize>,
) {
    lower_hull(xs, phi, hull);
    let mut k = 0;
    for (j, &y) in ys.iter().enumerate() {
        let mut best = xs[hull[k]] * y - phi[hull[k]];
        while k + 1 < hull.len() {
            let next = xs[hull[k + 1]] * y - phi[hull[k + 1]];
            if next > best {
                best = next;
                k += 1;
            } else {
                break;
            }
        }
        out[j] = best;
        if let Some(am) = argmax.as_deref_mut() {
            am[j] = hull[k];
        }
    }
}

fn transpose(src: &[f64], nx: usize, ny: usize, dst: &mut [f64]) {
    for j in 0..ny {
        for i in 0..nx {
            dst[i * ny + j] = src[j * nx + i];
        }
    }
}

/// Nested 2D Legendre transform on raw row-major values. When `argmax` is
/// given it receives the maximizing linear cell index for every output cell.
fn legendre_2d(grid: Grid2D, phi: &[f64], argmax: Option<&mut [usize]>) -> Vec<f64> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let xs: Vec<f64> = (0..nx).map(|i| grid.x(i)).collect();
    let ys: Vec<f64> = (0..ny).map(|j| grid.y(j)).collect();
    let track = argmax.is_some();

    // rows: g(p, j) = max_i x_i p - phi(i, j)
    let mut rows = vec![0.0; nx * ny];
    let mut row_arg = if track { vec![0usize; nx * ny] } else { Vec::new() };
    if track {
        rows.par_chunks_mut(nx)
            .zip(row_arg.par_chunks_mut(nx))
            .zip(phi.par_chunks(nx))
            .for_each_init(Vec::new, |hull, ((out, am), src)| {
                legendre_1d(&xs, src, &xs, out, Some(am), hull)
            });
    } else {
        rows.par_chunks_mut(nx)
            .zip(phi.par_chunks(nx))
            .for_each_init(Vec::new, |hull, (out, src)| legendre_1d(&xs, src, &xs, out, None, hull));
    }

    // columns: phi*(p, q) = max_j y_j q - (-g(p, j))
    let mut cols = vec![0.0; nx * ny];
    transpose(&rows, nx, ny, &mut cols);
    cols.iter_mut().for_each(|v| *v = -*v);
    let mut out_t = vec![0.0; nx * ny];
    let mut col_arg = if track { vec![0usize; nx * ny] } else { Vec::new() };
    if track {
        out_t
            .par_chunks_mut(ny)
            .zip(col_arg.par_chunks_mut(ny))
            .zip(cols.par_chunks(ny))
            .for_each_init(Vec::new, |hull, ((out, am), src)| {
                legendre_1d(&ys, src, &ys, out, Some(am), hull)
            });
    } else {
        out_t
            .par_chunks_mut(ny)
            .zip(cols.par_chunks(ny))
            .for_each_init(Vec::new, |hull, (out, src)| legendre_1d(&ys, src, &ys, out, None, hull));
    }
    let mut out = vec![0.0; nx * ny];
    transpose(&out_t, ny, nx, &mut out);

    if let Some(am) = argmax {
        for q in 0..ny {
            for p in 0..nx {
                let j = col_arg[p * ny + q];
                let i = row_arg[j * nx + p];
                am[q * nx + p] = j * nx + i;
            }
        }
    }
    out
}

/// Discrete Legendre transform `phi*(y) = max over cell centers x of x.y - phi(x)`.
pub fn legendre_transform(phi: &PotentialField) -> PotentialField {
    let grid = phi.grid();
    PotentialField::from_raw(grid, legendre_2d(grid, phi.values(), None))
}

fn c_transform_impl(f: &PotentialField, w: f64, argmin: Option<&mut [usize]>) -> Result<PotentialField> {
    check_weight(w)?;
    let grid = f.grid();
    let phi: Vec<f64> = f
        .values()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (x, y) = grid.center(k);
            0.5 * (x * x + y * y) - v / w
        })
        .collect();
    let mut star = legendre_2d(grid, &phi, argmin);
    star.iter_mut().enumerate().for_each(|(k, s)| {
        let (x, y) = grid.center(k);
        *s = w * (0.5 * (x * x + y * y) - *s);
    });
    Ok(PotentialField::from_raw(grid, star))
}

/// `f^c(y) = min over cell centers x of (w/2)|x - y|^2 - f(x)`.
pub fn c_transform(f: &PotentialField, w: f64) -> Result<PotentialField> {
    c_transform_impl(f, w, None)
}

/// c-transform together with the minimizing cell of every output cell.
pub fn c_transform_with_argmin(f: &PotentialField, w: f64) -> Result<(PotentialField, Vec<usize>)> {
    let mut arg = vec![0usize; f.grid().len()];
    let out = c_transform_impl(f, w, Some(&mut arg))?;
    Ok((out, arg))
}

/// `f^{cc}`: the smallest c-concave function above `f`.
pub fn double_c_transform_tightening(f: &PotentialField, w: f64) -> Result<PotentialField> {
    c_transform(&c_transform(f, w)?, w)
}

/// Per-cell gradient of a potential.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub grid: Grid2D,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Centered differences in the interior, one-sided at boundary cells.
pub fn gradient_field(f: &PotentialField) -> GradientField {
    let grid = f.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let v = f.values();
    let mut dx = vec![0.0; grid.len()];
    let mut dy = vec![0.0; grid.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = grid.index(i, j);
            dx[k] = if i == 0 {
                (v[k + 1] - v[k]) / hx
            } else if i == nx - 1 {
                (v[k] - v[k - 1]) / hx
            } else {
                (v[k + 1] - v[k - 1]) / (2.0 * hx)
            };
            dy[k] = if j == 0 {
                (v[k + nx] - v[k]) / hy
            } else if j == ny - 1 {
                (v[k] - v[k - nx]) / hy
            } else {
                (v[k + nx] - v[k - nx]) / (2.0 * hy)
            };
        }
    }
    GradientField { grid, dx, dy }
}

/// Position along one axis, clamped to the outermost cell centers, as a
/// fractional cell index in `[0, n - 1]`.
#[inline]
fn fractional_index(pos: f64, n: usize) -> f64 {
    (pos * n as f64 - 0.5).clamp(0.0, (n - 1) as f64)
}

/// `(S_f)_# mu` for `S(x) = x - grad f(x) / w`.
pub fn pushforward(f_prime: &PotentialField, mu: &DensityField, w: f64) -> Result<DensityField> {
    pushforward_with(f_prime, mu, w, SplatMode::Bilinear)
}

pub fn pushforward_with(
    f_prime: &PotentialField,
    mu: &DensityField,
    w: f64,
    mode: SplatMode,
) -> Result<DensityField> {
    check_weight(w)?;
    let grid = mu.grid();
    grid.ensure_same(&f_prime.grid())?;
    let grad = gradient_field(f_prime);
    let (nx, ny) = (grid.nx(), grid.ny());
    // work with cell masses a*mu; the cell area cancels on output
    let mut out = vec![0.0; grid.len()];
    for (k, &m) in mu.values().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let (x, y) = grid.center(k);
        let sx = fractional_index(x - grad.dx[k] / w, nx);
        let sy = fractional_index(y - grad.dy[k] / w, ny);
        match mode {
            SplatMode::Nearest => {
                let i = sx.round() as usize;
                let j = sy.round() as usize;
                out[grid.index(i, j)] += m;
            }
            SplatMode::Bilinear => {
                let i0 = (sx.floor() as usize).min(nx - 2);
                let j0 = (sy.floor() as usize).min(ny - 2);
                let tx = sx - i0 as f64;
                let ty = sy - j0 as f64;
                let k00 = grid.index(i0, j0);
                out[k00] += m * (1.0 - tx) * (1.0 - ty);
                out[k00 + 1] += m * tx * (1.0 - ty);
                out[k00 + nx] += m * (1.0 - tx) * ty;
                out[k00 + nx + 1] += m * tx * ty;
            }
        }
    }
    Ok(DensityField::from_raw(grid, out))
}

/// Moves the mass of every cell `k` to cell `target[k]`.
pub fn pushforward_by_map(mu: &DensityField, target: &[usize]) -> Result<DensityField> {
    let grid = mu.grid();
    grid.ensure_len(target.len())?;
    let mut out = vec![0.0; grid.len()];
    for (k, &m) in mu.values().iter().enumerate() {
        out[target[k]] += m;
    }
    Ok(DensityField::from_raw(grid, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::l1_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_c_transform(f: &PotentialField, w: f64) -> Vec<f64> {
        let g = f.grid();
        (0..g.len())
            .map(|q| {
                let (yx, yy) = g.center(q);
                (0..g.len())
                    .map(|p| {
                        let (xx, xy) = g.center(p);
                        0.5 * w * ((xx - yx).powi(2) + (xy - yy).powi(2)) - f.values()[p]
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn brute_legendre(phi: &PotentialField) -> Vec<f64> {
        let g = phi.grid();
        (0..g.len())
            .map(|q| {
                let (yx, yy) = g.center(q);
                (0..g.len())
                    .map(|p| {
                        let (xx, xy) = g.center(p);
                        xx * yx + xy * yy - phi.values()[p]
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    fn random_field(grid: Grid2D, rng: &mut ChaCha8Rng, scale: f64) -> PotentialField {
        PotentialField::new(grid, (0..grid.len()).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn legendre_matches_brute_force_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Grid2D::new(8, 8).unwrap();
        for _ in 0..20 {
            let phi = random_field(grid, &mut rng, 1.0);
            let fast = legendre_transform(&phi);
            assert!(max_diff(fast.values(), &brute_legendre(&phi)) < 1e-14);
        }
    }

    #[test]
    fn legendre_of_half_square_norm() {
        let grid = Grid2D::new(16, 16).unwrap();
        let phi = PotentialField::from_fn(grid, |x, y| 0.5 * (x * x + y * y));
        let star = legendre_transform(&phi);
        for (k, &v) in star.values().iter().enumerate() {
            let (x, y) = grid.center(k);
            assert!((v - 0.5 * (x * x + y * y)).abs() < 1e-15);
        }
    }

    #[test]
    fn legendre_of_zero_is_corner_maximum() {
        let grid = Grid2D::new(5, 7).unwrap();
        let star = legendre_transform(&PotentialField::zeros(grid));
        let xm = grid.x(grid.nx() - 1);
        let ym = grid.y(grid.ny() - 1);
        for (k, &v) in star.values().iter().enumerate() {
            let (x, y) = grid.center(k);
            // all coordinates are positive, so the top-right corner wins
            assert!((v - (xm * x + ym * y)).abs() < 1e-15);
        }
    }

    #[test]
    fn c_transform_of_constants() {
        let grid = Grid2D::new(9, 6).unwrap();
        let zero = c_transform(&PotentialField::zeros(grid), 1.7).unwrap();
        assert!(zero.values().iter().all(|v| v.abs() < 1e-15));
        let a = c_transform(&PotentialField::constant(grid, 0.3), 1.0).unwrap();
        assert!(a.values().iter().all(|v| (v + 0.3).abs() < 1e-15));
    }

    #[test]
    fn c_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(nx, ny, w) in &[(8, 8, 1.0), (8, 8, 0.25), (13, 5, 3.0), (2, 2, 1.0)] {
            let grid = Grid2D::new(nx, ny).unwrap();
            for _ in 0..10 {
                let f = random_field(grid, &mut rng, 0.2);
                let fast = c_transform(&f, w).unwrap();
                assert!(max_diff(fast.values(), &brute_c_transform(&f, w)) < 1e-14);
            }
        }
    }

    #[test]
    fn c_transform_argmin_attains_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = Grid2D::new(10, 7).unwrap();
        let f = random_field(grid, &mut rng, 0.3);
        let (fc, arg) = c_transform_with_argmin(&f, 2.0).unwrap();
        for (q, &a) in arg.iter().enumerate() {
            let (yx, yy) = grid.center(q);
            let (xx, xy) = grid.center(a);
            let val = (xx - yx).powi(2) + (xy - yy).powi(2) - f.values()[a];
            assert!((val - fc.values()[q]).abs() < 1e-14);
        }
    }

    #[test]
    fn c_transform_rejects_bad_weight() {
        let grid = Grid2D::new(3, 3).unwrap();
        let f = PotentialField::zeros(grid);
        assert!(matches!(c_transform(&f, 0.0), Err(Error::NonpositiveWeight(_))));
        assert!(matches!(c_transform(&f, -1.0), Err(Error::NonpositiveWeight(_))));
    }

    #[test]
    fn double_transform_of_c_concave_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = Grid2D::new(12, 12).unwrap();
        let g = random_field(grid, &mut rng, 0.5);
        let f = c_transform(&g, 1.0).unwrap();
        let fcc = double_c_transform_tightening(&f, 1.0).unwrap();
        assert!(max_diff(f.values(), fcc.values()) < 1e-14);
        let zero = double_c_transform_tightening(&PotentialField::zeros(grid), 1.0).unwrap();
        assert!(zero.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn double_transform_removes_upward_spike() {
        let grid = Grid2D::new(10, 10).unwrap();
        let mut f = PotentialField::zeros(grid);
        let spike = grid.index(4, 5);
        f.values_mut()[spike] = 1.0;
        let fcc = double_c_transform_tightening(&f, 1.0).unwrap();
        for (a, b) in fcc.values().iter().zip(f.values()) {
            assert!(a + 1e-14 >= *b);
        }
        // the spike survives only because the quadratic cost is too flat to
        // lift neighbours by more than (w/2)h^2 per cell away
        assert!((fcc.values()[spike] - 1.0).abs() < 1e-14);
        let nb = fcc.values()[grid.index(5, 5)];
        assert!(nb > 0.0 && nb < 1.0);
    }

    #[test]
    fn c_transform_reverses_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = Grid2D::new(11, 9).unwrap();
        for _ in 0..10 {
            let f = random_field(grid, &mut rng, 0.4);
            let bump = random_field(grid, &mut rng, 0.1);
            let g = PotentialField::new(grid, f.values().iter().zip(bump.values()).map(|(a, b)| a + b.abs()).collect())
                .unwrap();
            let (fc, gc) = (c_transform(&f, 1.3).unwrap(), c_transform(&g, 1.3).unwrap());
            assert!(fc.values().iter().zip(gc.values()).all(|(a, b)| a >= b));
        }
    }

    #[test]
    fn triple_transform_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for &(n, w) in &[(8, 1.0), (16, 0.5), (24, 2.0)] {
            let grid = Grid2D::square(n).unwrap();
            for _ in 0..5 {
                let f = random_field(grid, &mut rng, 0.3);
                let fc = c_transform(&f, w).unwrap();
                let fcc = c_transform(&fc, w).unwrap();
                assert!(fcc.values().iter().zip(f.values()).all(|(a, b)| a + 1e-14 >= *b));
                let fccc = c_transform(&fcc, w).unwrap();
                assert!(max_diff(fccc.values(), fc.values()) < 1e-14);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn c_transform_agrees_with_brute_force(
            nx in 2usize..10,
            ny in 2usize..10,
            w in 0.1f64..4.0,
            seed in 0u64..1000,
        ) {
            let grid = Grid2D::new(nx, ny).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(grid, &mut rng, 1.0);
            let fast = c_transform(&f, w).unwrap();
            proptest::prop_assert!(max_diff(fast.values(), &brute_c_transform(&f, w)) < 1e-13);
        }

        #[test]
        fn pushforward_conserves_mass(
            n in 3usize..20,
            w in 0.1f64..3.0,
            seed in 0u64..1000,
        ) {
            let grid = Grid2D::square(n).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu = DensityField::normalized(grid, (0..grid.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
            let f = random_field(grid, &mut rng, 2.0);
            let out = pushforward(&f, &mu, w).unwrap();
            proptest::prop_assert!((out.mass() - 1.0).abs() < 1e-12);
            let (_, arg) = c_transform_with_argmin(&f, w).unwrap();
            let out = pushforward_by_map(&mu, &arg).unwrap();
            proptest::prop_assert!((out.mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_linear_and_quadratic() {
        let grid = Grid2D::new(16, 12).unwrap();
        let c = gradient_field(&PotentialField::constant(grid, 2.0));
        assert!(c.dx.iter().chain(&c.dy).all(|v| *v == 0.0));

        let lin = gradient_field(&PotentialField::from_fn(grid, |x, _| 3.0 * x));
        assert!(lin.dx.iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!(lin.dy.iter().all(|v| v.abs() < 1e-12));

        let q = gradient_field(&PotentialField::from_fn(grid, |x, y| 0.5 * (x * x + y * y)));
        for j in 1..grid.ny() - 1 {
            for i in 1..grid.nx() - 1 {
                let k = grid.index(i, j);
                assert!((q.dx[k] - grid.x(i)).abs() < 1e-12);
                assert!((q.dy[k] - grid.y(j)).abs() < 1e-12);
            }
        }
    }

    fn blob(grid: Grid2D, cx: f64, cy: f64, r: f64) -> DensityField {
        DensityField::normalized(
            grid,
            (0..grid.len())
                .map(|k| {
                    let (x, y) = grid.center(k);
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    (1.0 - d2 / (r * r)).max(0.0)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pushforward_identity_for_zero_potential() {
        let grid = Grid2D::new(20, 20).unwrap();
        let mu = blob(grid, 0.4, 0.6, 0.2);
        for mode in [SplatMode::Bilinear, SplatMode::Nearest] {
            let out = pushforward_with(&PotentialField::zeros(grid), &mu, 1.0, mode).unwrap();
            assert!(max_diff(out.values(), mu.values()) < 1e-12);
        }
    }

    #[test]
    fn pushforward_integer_translation_is_exact() {
        let grid = Grid2D::new(32, 32).unwrap();
        let w = 2.0;
        let t = 8.0 / 32.0;
        let mu = blob(grid, 0.6, 0.5, 0.15);
        // f'(x) = w t x  =>  S(x) = x - t
        let f = PotentialField::from_fn(grid, |x, _| w * t * x);
        let out = pushforward(&f, &mu, w).unwrap();
        let expected = blob(grid, 0.6 - t, 0.5, 0.15);
        assert!(l1_distance(&out, &expected).unwrap() < 1e-12);
    }

    #[test]
    fn pushforward_conserves_mass_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = Grid2D::new(17, 9).unwrap();
        let mu = DensityField::normalized(grid, (0..grid.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
        let f = random_field(grid, &mut rng, 3.0);
        for mode in [SplatMode::Bilinear, SplatMode::Nearest] {
            let out = pushforward_with(&f, &mu, 0.7, mode).unwrap();
            assert!((out.mass() - 1.0).abs() < 1e-12);
            assert!(out.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn pushforward_by_argmin_map() {
        let grid = Grid2D::new(4, 4).unwrap();
        let mu = DensityField::uniform(grid);
        let out = pushforward_by_map(&mu, &[0; 16]).unwrap();
        assert_eq!(out.values()[0], 16.0);
        assert!((out.mass() - 1.0).abs() < 1e-15);
    }
}
