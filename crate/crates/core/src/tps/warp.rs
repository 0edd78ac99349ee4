//! Thin-plate-spline warps.
//!
//! `t(x) = a0 + A x + Σ c_i φ(|x - ω_i|)` with `φ(r) = r² ln r`, fitted to
//! interpolate `K` control-point correspondences exactly. The affine part
//! makes the system well posed; the coefficients obey `Σ c_i = 0` and
//! `Σ c_i ω_iᵀ = 0`.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::image::Image;

pub type Point = [f64; 2];

/// Thin-plate kernel, `φ(0) = 0`.
#[inline]
pub fn kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpsWarp {
    control_points: Vec<Point>,
    coefficients: Vec<Point>,
    /// Row `k` maps `[1, x, y]` to output component `k`.
    affine: [[f64; 3]; 2],
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_configuration(points: &[Point]) -> Result<()> {
    ensure!(
        points.len() >= 3,
        Error::InvalidArgument(format!("need at least 3 control points, got {}", points.len()))
    );
    ensure!(
        points.iter().all(|p| p[0].is_finite() && p[1].is_finite()),
        Error::InvalidArgument("control points must be finite".into())
    );
    let extent = points
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let eps = 1e-9 * extent;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            ensure!(
                dist(points[i], points[j]) > eps,
                Error::InvalidArgument(format!("duplicate control points {i} and {j}"))
            );
        }
    }
    let o = points[0];
    let spread = points.iter().enumerate().any(|(i, a)| {
        points[i + 1..].iter().any(|b| {
            let cross = (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
            cross.abs() > eps * extent
        })
    });
    ensure!(spread, Error::InvalidArgument("control points are collinear".into()));
    Ok(())
}

/// Fit the interpolating spline taking `source[i]` to `target[i]`.
pub fn fit_tps(source: &[Point], target: &[Point]) -> Result<TpsWarp> {
    ensure!(
        source.len() == target.len(),
        Error::DimensionMismatch(format!(
            "{} source vs {} target points",
            source.len(),
            target.len()
        ))
    );
    check_configuration(source)?;
    ensure!(
        target.iter().all(|p| p[0].is_finite() && p[1].is_finite()),
        Error::InvalidArgument("target points must be finite".into())
    );
    let k = source.len();
    let n = k + 3;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..k {
        for j in 0..k {
            l[(i, j)] = kernel(dist(source[i], source[j]));
        }
        let row = [1.0, source[i][0], source[i][1]];
        for (c, &v) in row.iter().enumerate() {
            l[(i, k + c)] = v;
            l[(k + c, i)] = v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(n, 2);
    for i in 0..k {
        rhs[(i, 0)] = target[i][0];
        rhs[(i, 1)] = target[i][1];
    }
    let lu = l.clone().lu();
    let singular = || Error::InvalidArgument("singular thin-plate system".into());
    let mut sol = lu.solve(&rhs).ok_or_else(singular)?;
    // One step of iterative refinement.
    let residual = &rhs - &l * &sol;
    if let Some(delta) = lu.solve(&residual) {
        sol += delta;
    }
    ensure!(sol.iter().all(|v| v.is_finite()), singular());

    let coefficients = (0..k).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(k, 0)], sol[(k + 1, 0)], sol[(k + 2, 0)]],
        [sol[(k, 1)], sol[(k + 1, 1)], sol[(k + 2, 1)]],
    ];
    Ok(TpsWarp {
        control_points: source.to_vec(),
        coefficients,
        affine,
    })
}

impl TpsWarp {
    pub fn identity(control_points: Vec<Point>) -> Result<Self> {
        check_configuration(&control_points)?;
        let k = control_points.len();
        Ok(Self {
            control_points,
            coefficients: vec![[0.0; 2]; k],
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        })
    }

    pub fn control_points(&self) -> &[Point] {
        &self.control_points
    }

    pub fn coefficients(&self) -> &[Point] {
        &self.coefficients
    }

    pub fn affine(&self) -> [[f64; 3]; 2] {
        self.affine
    }

    pub fn apply(&self, x: Point) -> Point {
        let mut out = [
            self.affine[0][0] + self.affine[0][1] * x[0] + self.affine[0][2] * x[1],
            self.affine[1][0] + self.affine[1][1] * x[0] + self.affine[1][2] * x[1],
        ];
        for (w, c) in self.control_points.iter().zip(&self.coefficients) {
            let u = kernel(dist(x, *w));
            out[0] += c[0] * u;
            out[1] += c[1] * u;
        }
        out
    }

    /// Analytic Jacobian `∂t/∂x`, row-major.
    pub fn jacobian(&self, x: Point) -> [[f64; 2]; 2] {
        let mut j = [
            [self.affine[0][1], self.affine[0][2]],
            [self.affine[1][1], self.affine[1][2]],
        ];
        for (w, c) in self.control_points.iter().zip(&self.coefficients) {
            let dx = x[0] - w[0];
            let dy = x[1] - w[1];
            let r2 = dx * dx + dy * dy;
            if r2 == 0.0 {
                continue;
            }
            // d/dx (r² ln r) = (2 ln r + 1) (x - ω)
            let g = r2.ln() + 1.0;
            for k in 0..2 {
                j[k][0] += c[k] * g * dx;
                j[k][1] += c[k] * g * dy;
            }
        }
        j
    }

    /// `Σ c_i` and `Σ c_i ω_iᵀ` (should vanish).
    pub fn side_conditions(&self) -> (Point, [[f64; 2]; 2]) {
        let mut sum = [0.0; 2];
        let mut moment = [[0.0; 2]; 2];
        for (w, c) in self.control_points.iter().zip(&self.coefficients) {
            for k in 0..2 {
                sum[k] += c[k];
                moment[k][0] += c[k] * w[0];
                moment[k][1] += c[k] * w[1];
            }
        }
        (sum, moment)
    }
}

/// Backward warp: `output(x) = image(t(x))`, bilinear with edge clamping.
pub fn warp_image(image: &Image, warp: &TpsWarp) -> Image {
    Image::from_fn(image.nx(), image.ny(), |x, y| {
        let p = warp.apply([x as f64, y as f64]);
        image.sample_bilinear(p[0], p[1]) as f32
    })
}

/// Regular `gx × gy` grid spanning `[0, side-1]²`.
pub fn control_grid(gx: usize, gy: usize, side: usize) -> Result<Vec<Point>> {
    ensure!(
        gx >= 2 && gy >= 2,
        Error::InvalidArgument(format!("control grid {gx}x{gy} needs at least 2x2 points"))
    );
    ensure!(side >= 2, Error::InvalidArgument("warp domain too small".into()));
    let span = (side - 1) as f64;
    let mut pts = Vec::with_capacity(gx * gy);
    for j in 0..gy {
        for i in 0..gx {
            pts.push([span * i as f64 / (gx - 1) as f64, span * j as f64 / (gy - 1) as f64]);
        }
    }
    Ok(pts)
}

/// Random warp on a `gx × gy` control grid over a `side × side` domain, with
/// each control point displaced uniformly within `±max_displacement` grid
/// spacings per axis.
pub fn random_tps_on_grid(
    grid: (usize, usize),
    side: usize,
    max_displacement: f64,
    rng: &mut impl Rng,
) -> Result<TpsWarp> {
    ensure!(
        (0.0..=0.5).contains(&max_displacement),
        Error::InvalidArgument("max_displacement must lie in [0, 0.5]".into())
    );
    let source = control_grid(grid.0, grid.1, side)?;
    let span = (side - 1) as f64;
    let dx = max_displacement * span / (grid.0 - 1) as f64;
    let dy = max_displacement * span / (grid.1 - 1) as f64;
    let target: Vec<Point> = source
        .iter()
        .map(|p| {
            let ox = if dx > 0.0 { rng.random_range(-dx..=dx) } else { 0.0 };
            let oy = if dy > 0.0 { rng.random_range(-dy..=dy) } else { 0.0 };
            [p[0] + ox, p[1] + oy]
        })
        .collect();
    fit_tps(&source, &target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn grid4() -> Vec<Point> {
        control_grid(4, 4, 64).unwrap()
    }

    #[test]
    fn identity_fit() {
        let pts = grid4();
        let w = fit_tps(&pts, &pts).unwrap();
        assert!(w.coefficients().iter().flatten().all(|c| c.abs() <= 1e-10));
        let a = w.affine();
        let expect = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for k in 0..2 {
            for c in 0..3 {
                assert!((a[k][c] - expect[k][c]).abs() <= 1e-10, "{a:?}");
            }
        }
    }

    #[test]
    fn translation_is_exact_everywhere() {
        let pts = grid4();
        let moved: Vec<Point> = pts.iter().map(|p| [p[0] + 5.0, p[1] - 3.0]).collect();
        let w = fit_tps(&pts, &moved).unwrap();
        for x in [[0.0, 0.0], [13.3, 40.1], [63.0, 63.0], [-10.0, 80.0]] {
            let t = w.apply(x);
            assert!((t[0] - x[0] - 5.0).abs() < 1e-9 && (t[1] - x[1] + 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_configurations_fail() {
        let line = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(fit_tps(&line, &line).is_err());
        let dup = vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(fit_tps(&dup, &dup).is_err());
        assert!(fit_tps(&line[..2], &line[..2]).is_err());
    }

    #[test]
    fn identity_warp_preserves_image() {
        let img = Image::from_fn(20, 15, |x, y| ((x * 3 + y * 7) % 13) as f32 / 13.0);
        let w = fit_tps(&control_grid(3, 3, 20).unwrap(), &control_grid(3, 3, 20).unwrap()).unwrap();
        let out = warp_image(&img, &w);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(16, 16, 0.42);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = random_tps_on_grid((4, 4), 16, 0.4, &mut rng).unwrap();
        assert!(warp_image(&img, &w).data().iter().all(|&v| v == 0.42));
    }

    #[test]
    fn integer_translation_shifts_interior() {
        let img = Image::from_fn(24, 24, |x, y| ((x * x + 3 * y) % 17) as f32 / 17.0);
        let src = control_grid(3, 3, 24).unwrap();
        let dst: Vec<Point> = src.iter().map(|p| [p[0] + 3.0, p[1] + 2.0]).collect();
        let out = warp_image(&img, &fit_tps(&src, &dst).unwrap());
        for y in 0..20 {
            for x in 0..20 {
                assert!((out.get(x, y) - img.get(x + 3, y + 2)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_displacement_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let w = random_tps_on_grid((4, 4), 64, 0.0, &mut rng).unwrap();
        assert!(w.coefficients().iter().flatten().all(|c| c.abs() <= 1e-10));
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let w = random_tps_on_grid((4, 4), 64, 0.3, &mut rng).unwrap();
        let h = 1e-5;
        for x in [[10.2, 7.7], [31.0, 40.5], [60.1, 2.3]] {
            let j = w.jacobian(x);
            for c in 0..2 {
                let mut p = x;
                let mut m = x;
                p[c] += h;
                m[c] -= h;
                let (tp, tm) = (w.apply(p), w.apply(m));
                for k in 0..2 {
                    let fd = (tp[k] - tm[k]) / (2.0 * h);
                    assert!((fd - j[k][c]).abs() < 1e-6, "{fd} vs {}", j[k][c]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fitted_warps_interpolate_and_satisfy_side_conditions(
            seed in any::<u64>(),
            gx in 3usize..6,
            gy in 3usize..6,
            mag in 0.0f64..0.5,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let src = control_grid(gx, gy, 64).unwrap();
            let dst: Vec<Point> = src
                .iter()
                .map(|p| [p[0] + rng.random_range(-1.0..=1.0) * mag * 20.0, p[1] + rng.random_range(-1.0..=1.0) * mag * 20.0])
                .collect();
            let w = fit_tps(&src, &dst).unwrap();
            for (s, d) in src.iter().zip(&dst) {
                let t = w.apply(*s);
                prop_assert!((t[0] - d[0]).abs() < 1e-8 && (t[1] - d[1]).abs() < 1e-8);
            }
            let (sum, moment) = w.side_conditions();
            prop_assert!(sum.iter().all(|v| v.abs() < 1e-8));
            prop_assert!(moment.iter().flatten().all(|v| v.abs() < 1e-8));
        }
    }
}
