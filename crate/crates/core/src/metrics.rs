//! PSNR / SSIM scoring and directory evaluation on the luminance plane.
//!
//! Scores are computed on the 8-bit scale (peak 255) after shaving `scale`
//! pixels from every border, the usual single-image SR protocol.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::data::{degrade, list_images, load_luma};
use crate::error::{invalid, Result};
use crate::plane::{ImagePlane, ValueRange};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`,
/// which aggregates skip.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return invalid(format!("psnr: {:?} vs {:?}", a.dims(), b.dims()));
    }
    if peak <= 0.0 || !peak.is_finite() {
        return invalid(format!("psnr peak must be positive, got {peak}"));
    }
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with a symmetric 1-D kernel.
fn filter_valid(src: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        let row = src.row(r);
        for c in 0..ow {
            tmp[[r, c]] = (0..n).map(|i| k[i] * row[c + i]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..n).map(|i| k[i] * tmp[[r + i, c]]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over
/// every fully-contained window position.
pub fn ssim(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return invalid(format!("ssim: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ));
    }
    if peak <= 0.0 || !peak.is_finite() {
        return invalid(format!("ssim peak must be positive, got {peak}"));
    }
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (pa, pb) = (a.pixels(), b.pixels());
    let mu_a = filter_valid(pa, &k);
    let mu_b = filter_valid(pb, &k);
    let e_aa = filter_valid(&(pa * pa), &k);
    let e_bb = filter_valid(&(pb * pb), &k);
    let e_ab = filter_valid(&(pa * pb), &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let var_a = e_aa.as_slice().unwrap()[i] - ma * ma;
        let var_b = e_bb.as_slice().unwrap()[i] - mb * mb;
        let cov = e_ab.as_slice().unwrap()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// PSNR and SSIM of two unit-range planes on the 8-bit scale, with `border`
/// pixels removed from each side.
pub fn score_y(output: &ImagePlane, reference: &ImagePlane, border: usize) -> Result<(f64, f64)> {
    let to8 =
        |p: &ImagePlane| -> Result<ImagePlane> { p.rescaled(ValueRange::EIGHT_BIT).shave(border) };
    let (o, r) = (to8(output)?, to8(reference)?);
    Ok((psnr(&o, &r, 255.0)?, ssim(&o, &r, 255.0)?))
}

/// Anything that turns a bicubic-enlarged unit-range Y plane into an
/// estimate of the HR plane.
pub trait Upscaler: Sync {
    fn name(&self) -> &str;
    fn enhance(&self, upsampled: &ImagePlane) -> Result<ImagePlane>;
}

/// The baseline: returns the bicubic enlargement unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bicubic;

impl Upscaler for Bicubic {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn enhance(&self, upsampled: &ImagePlane) -> Result<ImagePlane> {
        Ok(upsampled.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub path: PathBuf,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bicubic_psnr_db: f64,
    pub bicubic_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub model: String,
    pub scale: usize,
    pub images: Vec<ImageScore>,
}

/// Mean of the finite values; `INFINITY` if there are none (all identical).
fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

impl ScoreReport {
    pub fn mean_psnr(&self) -> f64 {
        finite_mean(self.images.iter().map(|s| s.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        finite_mean(self.images.iter().map(|s| s.ssim))
    }

    pub fn mean_bicubic_psnr(&self) -> f64 {
        finite_mean(self.images.iter().map(|s| s.bicubic_psnr_db))
    }

    pub fn mean_bicubic_ssim(&self) -> f64 {
        finite_mean(self.images.iter().map(|s| s.bicubic_ssim))
    }

    /// One row per image: path, psnr, ssim, bicubic psnr, bicubic ssim.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "path\tpsnr_db\tssim\tbicubic_psnr_db\tbicubic_ssim")?;
        for s in &self.images {
            writeln!(
                out,
                "{}\t{:.4}\t{:.6}\t{:.4}\t{:.6}",
                s.path.display(),
                s.psnr_db,
                s.ssim,
                s.bicubic_psnr_db,
                s.bicubic_ssim
            )?;
        }
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "model {} at x{} on {} images",
            self.model,
            self.scale,
            self.images.len()
        )?;
        for s in &self.images {
            writeln!(
                out,
                "  {}: {:.2} dB / {:.4} (bicubic {:.2} dB / {:.4})",
                s.path.display(),
                s.psnr_db,
                s.ssim,
                s.bicubic_psnr_db,
                s.bicubic_ssim
            )?;
        }
        writeln!(
            out,
            "mean: {:.2} dB / {:.4} (bicubic {:.2} dB / {:.4})",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_bicubic_psnr(),
            self.mean_bicubic_ssim()
        )?;
        Ok(())
    }
}

/// Scores one HR plane: degrade, enhance, and compare both the model output
/// and the bicubic input against the (cropped) original.
pub fn score_image(
    model: &dyn Upscaler,
    hr: &ImagePlane,
    scale: usize,
    path: &Path,
) -> Result<ImageScore> {
    let pair = degrade(&hr.rescaled(ValueRange::UNIT), scale)?;
    let out = model.enhance(&pair.lr)?.clamped();
    let (psnr_db, ssim) = score_y(&out, &pair.hr, scale)?;
    let (bicubic_psnr_db, bicubic_ssim) = score_y(&pair.lr, &pair.hr, scale)?;
    Ok(ImageScore {
        path: path.to_path_buf(),
        psnr_db,
        ssim,
        bicubic_psnr_db,
        bicubic_ssim,
    })
}

/// Evaluates every PNG/BMP in `hr_dir` (sorted by name).
pub fn evaluate_dir(
    model: &dyn Upscaler,
    hr_dir: impl AsRef<Path>,
    scale: usize,
) -> Result<ScoreReport> {
    let paths = list_images(hr_dir.as_ref())?;
    if paths.is_empty() {
        return invalid(format!(
            "no PNG/BMP images in {}",
            hr_dir.as_ref().display()
        ));
    }
    evaluate_paths(model, &paths, scale)
}

pub fn evaluate_paths(
    model: &dyn Upscaler,
    paths: &[PathBuf],
    scale: usize,
) -> Result<ScoreReport> {
    let one = |p: &PathBuf| score_image(model, &load_luma(p)?, scale, p);
    #[cfg(feature = "parallel")]
    let scored: Vec<Result<ImageScore>> = {
        use rayon::prelude::*;
        paths.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let scored: Vec<Result<ImageScore>> = paths.iter().map(one).collect();
    Ok(ScoreReport {
        model: model.name().to_string(),
        scale,
        images: scored.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random8(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
        ImagePlane::from_vec(
            h,
            w,
            (0..h * w).map(|_| rng.random_range(0.0..255.0)).collect(),
            ValueRange::EIGHT_BIT,
        )
        .unwrap()
    }

    /// Window-by-window SSIM with an explicitly built 2-D Gaussian.
    fn reference_ssim(a: &ImagePlane, b: &ImagePlane, peak: f64) -> f64 {
        let n = 11usize;
        let mut win = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let c1 = (0.01 * peak) * (0.01 * peak);
        let c2 = (0.03 * peak) * (0.03 * peak);
        let (h, w) = a.dims();
        let mut acc = 0.0;
        let mut count = 0;
        for r in 0..=h - n {
            for c in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let g = win[i][j] / total;
                        ma += g * a.get(r + i, c + j);
                        mb += g * b.get(r + i, c + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let g = win[i][j] / total;
                        let (da, db) = (a.get(r + i, c + j) - ma, b.get(r + i, c + j) - mb);
                        va += g * da * da;
                        vb += g * db * db;
                        cov += g * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImagePlane::filled(10, 12, 100.0, ValueRange::EIGHT_BIT);
        let b = ImagePlane::filled(10, 12, 116.0, ValueRange::EIGHT_BIT);
        // 10 log10(65025 / 256)
        assert_abs_diff_eq!(
            psnr(&a, &b, 255.0).unwrap(),
            24.048_403_955_560_61,
            epsilon = 1e-9
        );
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        let one = ImagePlane::filled(4, 4, 1.0, ValueRange::EIGHT_BIT);
        let zero = ImagePlane::filled(4, 4, 0.0, ValueRange::EIGHT_BIT);
        assert_abs_diff_eq!(
            psnr(&one, &zero, 255.0).unwrap(),
            20.0 * 255f64.log10(),
            epsilon = 1e-9
        );
        assert!(psnr(&a, &one, 255.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random8(32, 32, &mut rng);
        let noise: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = [2.0, 8.0, 32.0]
            .iter()
            .map(|amp| {
                let mut p = a.pixels().clone();
                p.iter_mut().zip(&noise).for_each(|(v, n)| *v += amp * n);
                psnr(
                    &a,
                    &ImagePlane::new(p, ValueRange::EIGHT_BIT).unwrap(),
                    255.0,
                )
                .unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn ssim_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = rng.random_range(11..24);
            let w = rng.random_range(11..24);
            let a = random8(h, w, &mut rng);
            let mix: f64 = rng.random();
            let noise = random8(h, w, &mut rng);
            let b = ImagePlane::new(
                a.pixels() * (1.0 - mix) + noise.pixels() * mix,
                ValueRange::EIGHT_BIT,
            )
            .unwrap();
            let got = ssim(&a, &b, 255.0).unwrap();
            let want = reference_ssim(&a, &b, 255.0);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn ssim_identity_inversion_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random8(24, 24, &mut rng);
        assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);

        let checker = ImagePlane::from_vec(
            24,
            24,
            (0..576)
                .map(|i| {
                    if (i / 24 / 3 + i % 24 / 3) % 2 == 0 {
                        255.0
                    } else {
                        0.0
                    }
                })
                .collect(),
            ValueRange::EIGHT_BIT,
        )
        .unwrap();
        let inverted = checker.map(|v| 255.0 - v);
        assert!(ssim(&checker, &inverted, 255.0).unwrap() < 0.3);

        let noisy = |amp: f64, rng: &mut ChaCha8Rng| {
            ImagePlane::new(
                a.pixels().mapv(|v| v + amp * rng.random_range(-1.0..1.0)),
                ValueRange::EIGHT_BIT,
            )
            .unwrap()
        };
        let slight = noisy(1.0, &mut rng);
        let heavy = noisy(60.0, &mut rng);
        assert!(ssim(&a, &slight, 255.0).unwrap() > ssim(&a, &heavy, 255.0).unwrap());
        let small = ImagePlane::filled(10, 30, 0.0, ValueRange::EIGHT_BIT);
        assert!(ssim(&small, &small, 255.0).is_err());
    }

    #[test]
    fn report_means_and_tsv() {
        let mk = |p: f64, s: f64| ImageScore {
            path: PathBuf::from("x.png"),
            psnr_db: p,
            ssim: s,
            bicubic_psnr_db: p - 1.0,
            bicubic_ssim: s,
        };
        let report = ScoreReport {
            model: "m".into(),
            scale: 3,
            images: vec![mk(30.0, 0.9), mk(32.0, 0.8), mk(f64::INFINITY, 1.0)],
        };
        assert_abs_diff_eq!(report.mean_psnr(), 31.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_ssim(), 0.9, epsilon = 1e-12);
        let mut buf = Vec::new();
        report.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("x.png\t30.0000\t0.900000"));
    }

    #[test]
    fn bicubic_model_equals_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hr = random8(40, 41, &mut rng);
        let s = score_image(&Bicubic, &hr, 3, Path::new("r")).unwrap();
        assert_eq!(s.psnr_db, s.bicubic_psnr_db);
        assert_eq!(s.ssim, s.bicubic_ssim);
    }

    #[test]
    fn evaluate_dir_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(evaluate_dir(&Bicubic, dir.path(), 3).is_err());
    }
}
