//! Discrete orthonormal Tchebichef polynomials and the moment transforms
//! built on them.
//!
//! Values satisfy
//!
//! ```text
//! t0(x) = 1 / sqrt(N)
//! t1(x) = (2x + 1 - N) * sqrt(3 / (N (N^2 - 1)))
//! tn(x) = a1 (2x + 1 - N) t(n-1)(x) + a2 t(n-2)(x)
//! ```
//!
//! but iterating that recurrence in `n` loses orthogonality fast (about 1e-8
//! at N = 32, garbage by N = 64). Instead each polynomial is seeded at x = 0
//! and 1 and run forward in `x` over half the support, then mirrored with
//! `tn(N-1-x) = (-1)^n tn(x)`. That stays near machine precision into the
//! hundreds. The factorial closed form overflows and is never evaluated.
//!
//! For an `N x N` block `G`, the moments are `T = P G P^T` where row `p` of `P`
//! holds `t_p(0..N)`. `P` is orthogonal, so `G = P^T T P`.

use std::io::Write;

use ndarray::{s, Array2, Array3};

use crate::error::{invalid, Result};
use crate::plane::{ImagePlane, ValueRange};

/// Side of the kernels used by the transform-domain layers.
pub const KERNEL_SIZE: usize = 8;
/// Number of 8x8 basis kernels.
pub const NUM_KERNELS: usize = KERNEL_SIZE * KERNEL_SIZE;
/// Zero padding placed before the first row/column for "same" correlation
/// with an 8x8 kernel. The remaining `KERNEL_SIZE - 1 - PAD_BEFORE` goes after.
pub const PAD_BEFORE: usize = (KERNEL_SIZE - 1) / 2;

/// Orthonormal Tchebichef polynomials on `n_points` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TchebichefBasis {
    n_points: usize,
    poly: Array2<f64>,
    /// Zig-zag ordered (p, q) pairs and their outer-product kernels; only
    /// populated for the 8-point basis.
    order: Vec<(usize, usize)>,
    kernels: Vec<Array2<f64>>,
}

/// Tchebichef moments of a square block.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    pub coeffs: Array2<f64>,
}

/// Builds the `n_points`-point orthonormal basis.
pub fn make_basis(n_points: usize) -> Result<TchebichefBasis> {
    if n_points < 2 {
        return invalid(format!("basis needs at least 2 points, got {n_points}"));
    }
    let big_n = n_points as f64;
    let mut poly = Array2::<f64>::zeros((n_points, n_points));

    poly[[0, 0]] = 1.0 / big_n.sqrt();
    for n in 1..n_points {
        let nf = n as f64;
        poly[[n, 0]] = -((big_n - nf) / (big_n + nf)).sqrt()
            * ((2.0 * nf + 1.0) / (2.0 * nf - 1.0)).sqrt()
            * poly[[n - 1, 0]];
    }
    let half = n_points.div_ceil(2);
    for n in 0..n_points {
        let nn = (n * (n + 1)) as f64;
        poly[[n, 1]] = (1.0 + nn / (1.0 - big_n)) * poly[[n, 0]];
        for x in 2..half {
            let xf = x as f64;
            let denom = xf * (big_n - xf);
            let g1 = (-nn - (2.0 * xf - 1.0) * (xf - big_n - 1.0) - xf) / denom;
            let g2 = (xf - 1.0) * (xf - big_n - 1.0) / denom;
            poly[[n, x]] = g1 * poly[[n, x - 1]] + g2 * poly[[n, x - 2]];
        }
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        for x in half..n_points {
            poly[[n, x]] = sign * poly[[n, n_points - 1 - x]];
        }
    }

    let (order, kernels) = if n_points == KERNEL_SIZE {
        let order = zigzag_order(KERNEL_SIZE);
        let kernels = order.iter().map(|&(p, q)| outer(&poly, p, q)).collect();
        (order, kernels)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(TchebichefBasis {
        n_points,
        poly,
        order,
        kernels,
    })
}

fn outer(poly: &Array2<f64>, p: usize, q: usize) -> Array2<f64> {
    let n = poly.ncols();
    Array2::from_shape_fn((n, n), |(a, b)| poly[[p, a]] * poly[[q, b]])
}

/// JPEG-style zig-zag scan of a `grid_size x grid_size` index grid.
///
/// Anti-diagonals `row + col = s` are visited in increasing `s`; even
/// diagonals run bottom-left to top-right, odd ones the other way.
pub fn zigzag_order(grid_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(grid_size * grid_size);
    if grid_size == 0 {
        return out;
    }
    for s in 0..(2 * grid_size - 1) {
        let lo = s.saturating_sub(grid_size - 1);
        let hi = s.min(grid_size - 1);
        if s % 2 == 0 {
            out.extend((lo..=hi).rev().map(|row| (row, s - row)));
        } else {
            out.extend((lo..=hi).map(|row| (row, s - row)));
        }
    }
    out
}

impl TchebichefBasis {
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// `N x N` matrix whose row `p` holds `t_p(0..N)`.
    pub fn poly_matrix(&self) -> &Array2<f64> {
        &self.poly
    }

    /// Basis image `w_pq = t_p^T t_q` for any `p, q < N`.
    pub fn kernel_pq(&self, p: usize, q: usize) -> Array2<f64> {
        outer(&self.poly, p, q)
    }

    /// The 64 zig-zag ordered 8x8 kernels; empty unless `N = 8`.
    pub fn kernels(&self) -> &[Array2<f64>] {
        &self.kernels
    }

    /// `(p, q)` polynomial orders for each entry of [`kernels`](Self::kernels).
    pub fn kernel_orders(&self) -> &[(usize, usize)] {
        &self.order
    }

    fn require_kernels(&self) -> Result<()> {
        if self.n_points != KERNEL_SIZE {
            return invalid(format!(
                "transform-domain layers need the {KERNEL_SIZE}-point basis, got N = {}",
                self.n_points
            ));
        }
        Ok(())
    }

    /// Kernels packed as a `64 x 1 x 8 x 8` weight buffer (channel-major).
    pub fn kernel_weights(&self) -> Result<Vec<f64>> {
        self.require_kernels()?;
        Ok(self
            .kernels
            .iter()
            .flat_map(|k| k.iter().copied())
            .collect())
    }

    /// Writes the polynomial matrix, one row per line, 17 significant digits.
    pub fn write_matrix_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.poly.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Lays square kernels out on a grid of `cols` columns with a one-pixel gap
/// (left at mid-grey). Each tile is normalised by its own largest magnitude,
/// so zero maps to 0.5 and a constant kernel renders as a flat tile.
pub fn tile_grid(kernels: &[Array2<f64>], cols: usize) -> Result<ImagePlane> {
    let Some(first) = kernels.first() else {
        return invalid("no kernels to tile");
    };
    let k = first.nrows();
    if cols == 0 || kernels.iter().any(|t| t.dim() != (k, k)) {
        return invalid("kernels must be square and equally sized");
    }
    let rows = kernels.len().div_ceil(cols);
    let step = k + 1;
    let mut img = Array2::from_elem((rows * step - 1, cols * step - 1), 0.5);
    for (i, t) in kernels.iter().enumerate() {
        let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { 0.5 / peak } else { 0.0 };
        let (r0, c0) = ((i / cols) * step, (i % cols) * step);
        img.slice_mut(s![r0..r0 + k, c0..c0 + k])
            .assign(&t.mapv(|v| 0.5 + v * scale));
    }
    ImagePlane::new(img, ValueRange::UNIT)
}

/// `T = P G P^T` for a square `N x N` plane.
pub fn forward_moments(image: &ImagePlane, basis: &TchebichefBasis) -> Result<MomentMatrix> {
    let n = basis.n_points;
    if image.dims() != (n, n) {
        return invalid(format!(
            "forward moments need a {n}x{n} block, got {:?}",
            image.dims()
        ));
    }
    let p = &basis.poly;
    let coeffs = p.dot(image.pixels()).dot(&p.t());
    Ok(MomentMatrix { coeffs })
}

/// `G = P^T T P`; the reconstructed plane is declared in `range`.
pub fn inverse_moments(
    moments: &MomentMatrix,
    basis: &TchebichefBasis,
    range: ValueRange,
) -> Result<ImagePlane> {
    let n = basis.n_points;
    if moments.coeffs.dim() != (n, n) {
        return invalid(format!(
            "inverse moments need {n}x{n} coefficients, got {:?}",
            moments.coeffs.dim()
        ));
    }
    let p = &basis.poly;
    ImagePlane::new(p.t().dot(&moments.coeffs).dot(p), range)
}

/// Correlates the plane with all 64 zig-zag kernels (stride 1, zero "same"
/// padding of 3 before and 4 after). Returns a `64 x H x W` stack.
///
/// Output pixel `(r + 3, c + 3)` of channel `i` equals moment `(p_i, q_i)` of
/// the block whose top-left corner is `(r, c)`.
pub fn tcl_transform(image: &ImagePlane, basis: &TchebichefBasis) -> Result<Array3<f64>> {
    basis.require_kernels()?;
    let (h, w) = image.dims();
    if h < KERNEL_SIZE || w < KERNEL_SIZE {
        return invalid(format!(
            "image {h}x{w} is smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} kernels"
        ));
    }
    let k = KERNEL_SIZE;
    let mut padded = Array2::<f64>::zeros((h + k - 1, w + k - 1));
    padded
        .slice_mut(s![PAD_BEFORE..PAD_BEFORE + h, PAD_BEFORE..PAD_BEFORE + w])
        .assign(image.pixels());

    // Separable evaluation: first project rows of every 8-tall window onto
    // each polynomial, then columns.
    let poly = &basis.poly;
    let mut by_rows = Array3::<f64>::zeros((k, h, w + k - 1));
    for p in 0..k {
        for y in 0..h {
            for x in 0..w + k - 1 {
                let mut acc = 0.0;
                for a in 0..k {
                    acc += poly[[p, a]] * padded[[y + a, x]];
                }
                by_rows[[p, y, x]] = acc;
            }
        }
    }
    let mut maps = Array3::<f64>::zeros((NUM_KERNELS, h, w));
    for (i, &(p, q)) in basis.order.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for b in 0..k {
                    acc += poly[[q, b]] * by_rows[[p, y, x + b]];
                }
                maps[[i, y, x]] = acc;
            }
        }
    }
    Ok(maps)
}

/// Per-channel mean |coefficient| of `hr` minus that of `lr`.
pub fn coefficient_loss_profile(
    hr: &ImagePlane,
    lr: &ImagePlane,
    basis: &TchebichefBasis,
) -> Result<[f64; NUM_KERNELS]> {
    if hr.dims() != lr.dims() {
        return invalid(format!(
            "HR {:?} and LR {:?} planes differ in size",
            hr.dims(),
            lr.dims()
        ));
    }
    let hr_maps = tcl_transform(hr, basis)?;
    let lr_maps = tcl_transform(lr, basis)?;
    let mut out = [0.0; NUM_KERNELS];
    for (i, slot) in out.iter_mut().enumerate() {
        let mean_abs =
            |m: &Array3<f64>| m.slice(s![i, .., ..]).mapv(f64::abs).mean().unwrap_or(0.0);
        *slot = mean_abs(&hr_maps) - mean_abs(&lr_maps);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_identity_error(p: &Array2<f64>) -> f64 {
        let prod = p.dot(&p.t());
        prod.indexed_iter()
            .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(make_basis(0).is_err());
        assert!(make_basis(1).is_err());
        assert!(make_basis(2).is_ok());
    }

    #[test]
    fn eight_point_initial_rows() {
        let b = make_basis(8).unwrap();
        for x in 0..8 {
            assert_abs_diff_eq!(
                b.poly_matrix()[[0, x]],
                0.353_553_390_593_273_7,
                epsilon = 1e-15
            );
        }
        // -7 * sqrt(3 / 504), evaluated independently.
        assert_abs_diff_eq!(b.poly_matrix()[[1, 0]], -0.540_061_724_867, epsilon = 1e-12);
        assert!(max_identity_error(b.poly_matrix()) < 1e-10);
    }

    #[test]
    fn orthonormal_for_common_sizes() {
        for n in [2, 3, 4, 5, 8, 16, 32, 64, 128] {
            let b = make_basis(n).unwrap();
            assert!(max_identity_error(b.poly_matrix()) < 1e-10, "N = {n}");
        }
    }

    #[test]
    fn agrees_with_order_recurrence_for_small_n() {
        // Where the order recurrence is still accurate it must give the same values.
        let n_pts = 8usize;
        let big_n = n_pts as f64;
        let mut p = Array2::<f64>::zeros((n_pts, n_pts));
        for x in 0..n_pts {
            let xs = 2.0 * x as f64 + 1.0 - big_n;
            p[[0, x]] = 1.0 / big_n.sqrt();
            p[[1, x]] = xs * (3.0 / (big_n * (big_n * big_n - 1.0))).sqrt();
        }
        for n in 2..n_pts {
            let nf = n as f64;
            let a1 = ((4.0 * nf * nf - 1.0) / (big_n * big_n - nf * nf)).sqrt() / nf;
            let a2 = (1.0 - nf) / nf
                * ((2.0 * nf + 1.0) / (2.0 * nf - 3.0)).sqrt()
                * ((big_n * big_n - (nf - 1.0).powi(2)) / (big_n * big_n - nf * nf)).sqrt();
            for x in 0..n_pts {
                let xs = 2.0 * x as f64 + 1.0 - big_n;
                p[[n, x]] = a1 * xs * p[[n - 1, x]] + a2 * p[[n - 2, x]];
            }
        }
        let b = make_basis(n_pts).unwrap();
        for (a, e) in b.poly_matrix().iter().zip(p.iter()) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn zigzag_small_cases() {
        assert_eq!(zigzag_order(1), vec![(0, 0)]);
        assert_eq!(zigzag_order(2), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let z = zigzag_order(8);
        assert_eq!(&z[..4], &[(0, 0), (0, 1), (1, 0), (2, 0)]);
        assert_eq!(z[63], (7, 7));
        let mut seen = z.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn constant_block_has_only_dc() {
        let b = make_basis(8).unwrap();
        let img = ImagePlane::filled(8, 8, 0.25, ValueRange::UNIT);
        let m = forward_moments(&img, &b).unwrap();
        for ((p, q), v) in m.coeffs.indexed_iter() {
            let want = if (p, q) == (0, 0) { 8.0 * 0.25 } else { 0.0 };
            assert_abs_diff_eq!(*v, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn dc_moment_inverts_to_constant() {
        let b = make_basis(8).unwrap();
        let mut coeffs = Array2::zeros((8, 8));
        coeffs[[0, 0]] = 8.0;
        let g = inverse_moments(&MomentMatrix { coeffs }, &b, ValueRange::UNIT).unwrap();
        for v in g.pixels() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn moment_dimension_mismatch() {
        let b = make_basis(8).unwrap();
        let img = ImagePlane::filled(4, 8, 0.0, ValueRange::UNIT);
        assert!(forward_moments(&img, &b).is_err());
        let m = MomentMatrix {
            coeffs: Array2::zeros((4, 4)),
        };
        assert!(inverse_moments(&m, &b, ValueRange::UNIT).is_err());
    }

    #[test]
    fn zero_image_and_moments() {
        let b = make_basis(8).unwrap();
        let img = ImagePlane::filled(8, 8, 0.0, ValueRange::UNIT);
        let m = forward_moments(&img, &b).unwrap();
        assert!(m.coeffs.iter().all(|v| *v == 0.0));
        let back = inverse_moments(&m, &b, ValueRange::UNIT).unwrap();
        assert!(back.pixels().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tcl_of_constant_image() {
        let b = make_basis(8).unwrap();
        let img = ImagePlane::filled(16, 16, 0.5, ValueRange::UNIT);
        let maps = tcl_transform(&img, &b).unwrap();
        // Fully interior outputs are rows/cols 3..=11 for a 16x16 image.
        for y in 3..=11 {
            for x in 3..=11 {
                assert_abs_diff_eq!(maps[[0, y, x]], 4.0, epsilon = 1e-12);
                for i in 1..64 {
                    assert_abs_diff_eq!(maps[[i, y, x]], 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn tcl_requires_eight_point_basis_and_large_image() {
        let b4 = make_basis(4).unwrap();
        let img = ImagePlane::filled(16, 16, 0.5, ValueRange::UNIT);
        assert!(tcl_transform(&img, &b4).is_err());
        let b = make_basis(8).unwrap();
        let small = ImagePlane::filled(7, 16, 0.5, ValueRange::UNIT);
        assert!(tcl_transform(&small, &b).is_err());
    }

    #[test]
    fn loss_profile_of_identical_planes_is_zero() {
        let b = make_basis(8).unwrap();
        let img = ImagePlane::from_vec(
            12,
            12,
            (0..144).map(|i| ((i * 37) % 11) as f64 / 10.0).collect(),
            ValueRange::UNIT,
        )
        .unwrap();
        let prof = coefficient_loss_profile(&img, &img, &b).unwrap();
        assert!(prof.iter().all(|v| *v == 0.0));
        let other = ImagePlane::filled(12, 13, 0.0, ValueRange::UNIT);
        assert!(coefficient_loss_profile(&img, &other, &b).is_err());
    }

    #[test]
    fn matrix_dump_has_seventeen_digits() {
        let b = make_basis(4).unwrap();
        let mut buf = Vec::new();
        b.write_matrix_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let first: f64 = lines[0].split(' ').next().unwrap().parse().unwrap();
        assert_eq!(first, b.poly_matrix()[[0, 0]]);
        let mantissa = lines[0]
            .split(' ')
            .next()
            .unwrap()
            .split('e')
            .next()
            .unwrap();
        assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
    }
}
