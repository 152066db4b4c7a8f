//! Image quality metrics: PSNR and global (whole-image) SSIM, plus batch
//! evaluation reports.
//!
//! PSNR is `10·log10(L²/MSE)` with `L` the dynamic range (1.0 for the
//! internal [0,1] representation). A zero-MSE pair yields an infinite PSNR
//! sentinel; per-image CSV rows serialize it as `inf` and the aggregate mean
//! caps it at 100 dB with a note. SSIM uses per-channel population
//! statistics and the constants C₁=(0.01L)², C₂=(0.03L)², C₃=C₂/2; channel
//! results are averaged.

use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR value assigned to identical images when aggregating.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const REPORT_CSV_HEADER: &str = "id,psnr_db,ssim";

/// Mean squared error over all elements (channels included).
pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(CoreError::dim("mse", format!("shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let d = a.to_f64_lossy() - b.to_f64_lossy();
        acc += d * d;
    }
    Ok(acc / x.numel() as f64)
}

/// Peak signal-to-noise ratio in decibels; `f64::INFINITY` when MSE is zero.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(CoreError::Usage("psnr: peak must be positive".into()));
    }
    let err = mse(x, y)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

fn ssim_channel(x: &[f64], y: &[f64], peak: f64) -> f64 {
    let n = x.len() as f64;
    let mean_x: f64 = x.iter().sum::<f64>() / n;
    let mean_y: f64 = y.iter().sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        var_x += (a - mean_x) * (a - mean_x);
        var_y += (b - mean_y) * (b - mean_y);
        cov += (a - mean_x) * (b - mean_y);
    }
    var_x /= n;
    var_y /= n;
    cov /= n;

    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let c3 = c2 / 2.0;
    let (sd_x, sd_y) = (var_x.sqrt(), var_y.sqrt());

    let luminance = (2.0 * mean_x * mean_y + c1) / (mean_x * mean_x + mean_y * mean_y + c1);
    let contrast = (2.0 * sd_x * sd_y + c2) / (var_x + var_y + c2);
    let structure = (cov + c3) / (sd_x * sd_y + c3);
    luminance * contrast * structure
}

/// Global SSIM: brightness, contrast and structure comparisons computed per
/// channel over the whole image and multiplied, then averaged over channels.
/// Accepts `C×H×W` or a single-channel 2-d image.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(CoreError::dim("ssim", format!("shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    if peak <= 0.0 {
        return Err(CoreError::Usage("ssim: peak must be positive".into()));
    }
    let (channels, plane) = match x.shape() {
        [c, h, w] => (*c, h * w),
        [h, w] => (1, h * w),
        other => {
            return Err(CoreError::dim("ssim", format!("expected C×H×W or H×W, got {other:?}")));
        }
    };
    let xd: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    let yd: Vec<f64> = y.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut acc = 0.0;
    for c in 0..channels {
        acc += ssim_channel(&xd[c * plane..(c + 1) * plane], &yd[c * plane..(c + 1) * plane], peak);
    }
    Ok(acc / channels as f64)
}

#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics plus aggregates; aggregation caps infinite PSNR at
/// [`PSNR_CAP_DB`] and records how often that happened in `notes`.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub count: usize,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(CoreError::Data("metric report over an empty image set".into()));
        }
        let count = per_image.len();
        let mut capped = 0usize;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for m in &per_image {
            if m.psnr_db.is_finite() {
                psnr_sum += m.psnr_db.min(PSNR_CAP_DB);
                if m.psnr_db > PSNR_CAP_DB {
                    capped += 1;
                }
            } else {
                psnr_sum += PSNR_CAP_DB;
                capped += 1;
            }
            ssim_sum += m.ssim;
        }
        let mut notes = Vec::new();
        if capped > 0 {
            notes.push(format!("{capped} image(s) with PSNR capped at {PSNR_CAP_DB} dB in the aggregate"));
        }
        Ok(MetricReport {
            per_image,
            mean_psnr_db: psnr_sum / count as f64,
            mean_ssim: ssim_sum / count as f64,
            count,
            notes,
        })
    }

    /// CSV with one row per image and a trailing aggregate row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{REPORT_CSV_HEADER}")?;
        for m in &self.per_image {
            if m.psnr_db.is_finite() {
                writeln!(f, "{},{},{}", m.id, m.psnr_db, m.ssim)?;
            } else {
                writeln!(f, "{},inf,{}", m.id, m.ssim)?;
            }
        }
        writeln!(f, "aggregate,{},{}", self.mean_psnr_db, self.mean_ssim)?;
        Ok(())
    }
}

/// Metrics for candidate/reference pairs in [0,1] at peak 1.0. `ids` and the
/// tensors are aligned by index; unreadable or misshapen pairs are skipped
/// and listed in the notes rather than failing the whole batch.
pub fn evaluate_pairs<T: Scalar>(pairs: &[(String, Tensor<T>, Tensor<T>)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(CoreError::Data("evaluate_pairs: empty pair set".into()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let mut skipped = Vec::new();
    for (id, candidate, reference) in pairs {
        match (psnr(candidate, reference, 1.0), ssim(candidate, reference, 1.0)) {
            (Ok(p), Ok(s)) => per_image.push(ImageMetrics { id: id.clone(), psnr_db: p, ssim: s }),
            _ => skipped.push(id.clone()),
        }
    }
    if per_image.is_empty() {
        return Err(CoreError::Data("evaluate_pairs: no valid pairs".into()));
    }
    let mut report = MetricReport::from_images(per_image)?;
    if !skipped.is_empty() {
        report.notes.push(format!("skipped {} unreadable/unaligned pair(s): {}", skipped.len(), skipped.join(" ")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::ssim_channel_reference;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_of_identical_images_is_zero() {
        let x = Tensor::<f64>::filled(&[3, 2, 2], 0.4);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mse_single_pixel() {
        let x = Tensor::<f64>::filled(&[1, 1, 1], 0.75);
        let y = Tensor::<f64>::filled(&[1, 1, 1], 0.25);
        assert!((mse(&x, &y).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = Tensor::<f64>::rand_unit(&[3, 4, 4], &mut rng);
        let y = Tensor::<f64>::rand_unit(&[3, 4, 4], &mut rng);
        let mut acc = 0.0;
        for i in 0..x.numel() {
            let d = x.data()[i] - y.data()[i];
            acc += d * d;
        }
        assert!((mse(&x, &y).unwrap() - acc / 48.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_eight_bit_unit_mse() {
        // L=255, MSE=1  →  20·log10(255) dB.
        let mut x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let y = Tensor::<f64>::filled(&[1, 2, 2], 1.0);
        for v in x.data_mut() {
            *v = 0.0;
        }
        // (x-y)² = 1 everywhere → MSE = 1.
        let p = psnr(&x, &y, 255.0).unwrap();
        assert!((p - 48.1308).abs() < 1e-3, "got {p}");
    }

    #[test]
    fn psnr_zero_db_when_mse_equals_peak_squared() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1]);
        let y = Tensor::<f64>::filled(&[1, 1, 1], 3.0);
        let p = psnr(&x, &y, 3.0).unwrap();
        assert!(p.abs() < 1e-12);
    }

    #[test]
    fn psnr_identical_images_is_infinite() {
        let x = Tensor::<f64>::filled(&[2, 2], 0.5);
        assert!(psnr(&x, &x, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_invariant_to_joint_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = Tensor::<f64>::rand_unit(&[2, 3, 3], &mut rng);
        let y = Tensor::<f64>::rand_unit(&[2, 3, 3], &mut rng);
        let base = psnr(&x, &y, 1.0).unwrap();
        let k = 37.5;
        let xs = x.map(|v| v * k);
        let ys = y.map(|v| v * k);
        let scaled = psnr(&xs, &ys, k).unwrap();
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = Tensor::<f64>::rand_unit(&[3, 4, 4], &mut rng);
        assert!((ssim(&x, &x, 1.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x = Tensor::<f64>::rand_unit(&[3, 4, 4], &mut rng);
        let y = Tensor::<f64>::rand_unit(&[3, 4, 4], &mut rng);
        let a = ssim(&x, &y, 1.0).unwrap();
        let b = ssim(&y, &x, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for _ in 0..50 {
            let x = Tensor::<f64>::rand_unit(&[4, 4], &mut rng);
            let y = Tensor::<f64>::rand_unit(&[4, 4], &mut rng);
            let got = ssim(&x, &y, 1.0).unwrap();
            let want = ssim_channel_reference(x.data(), y.data(), 1.0);
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn report_on_identical_pairs_has_unit_ssim_and_capped_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let pairs: Vec<_> = (0..3)
            .map(|i| {
                let img = Tensor::<f64>::rand_unit(&[3, 4, 4], &mut rng);
                (format!("img{i}"), img.clone(), img)
            })
            .collect();
        let report = evaluate_pairs(&pairs).unwrap();
        assert!((report.mean_ssim - 1.0).abs() < 1e-9);
        assert_eq!(report.mean_psnr_db, PSNR_CAP_DB);
        assert_eq!(report.notes.len(), 1);
    }

    #[test]
    fn empty_pair_set_is_an_error() {
        assert!(evaluate_pairs::<f64>(&[]).is_err());
    }

    #[test]
    fn report_csv_has_stable_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let report = MetricReport::from_images(vec![
            ImageMetrics { id: "a".into(), psnr_db: 20.0, ssim: 0.9 },
            ImageMetrics { id: "b".into(), psnr_db: f64::INFINITY, ssim: 1.0 },
        ])
        .unwrap();
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), REPORT_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "a,20,0.9");
        assert_eq!(lines.next().unwrap(), "b,inf,1");
        assert!(lines.next().unwrap().starts_with("aggregate,60,"));
    }

    proptest! {
        #[test]
        fn psnr_strictly_decreases_as_mse_grows(delta in 0.01f64..0.5, extra in 0.01f64..0.4) {
            let x = Tensor::<f64>::zeros(&[1, 2, 2]);
            let y1 = Tensor::<f64>::filled(&[1, 2, 2], delta);
            let y2 = Tensor::<f64>::filled(&[1, 2, 2], delta + extra);
            let p1 = psnr(&x, &y1, 1.0).unwrap();
            let p2 = psnr(&x, &y2, 1.0).unwrap();
            prop_assert!(p1 > p2);
        }

        #[test]
        fn ssim_bounded_for_unit_range_images(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::rand_unit(&[2, 3, 3], &mut rng);
            let y = Tensor::<f64>::rand_unit(&[2, 3, 3], &mut rng);
            let s = ssim(&x, &y, 1.0).unwrap();
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
