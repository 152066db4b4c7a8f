//! Dataset handling: PNG I/O, synthetic paired cloudy/clear image
//! generation, paired-directory ingestion, and the 80/20 split.
//!
//! The synthetic generator stands in for externally supplied imagery at desk
//! scale: clear images are seeded procedural textures and thin clouds are
//! alpha-composited on top of them with a smooth multi-octave value-noise
//! opacity field against a near-white tint.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_CSV_HEADER: &str = "id,split";

/// (train, test) halves of a dataset.
pub type Split<T> = (Vec<ImagePair<T>>, Vec<ImagePair<T>>);

/// A paired cloudy/clear sample, both `3×H×W` in [0,1].
#[derive(Debug, Clone)]
pub struct ImagePair<T: Scalar> {
    pub id: String,
    pub cloudy: Tensor<T>,
    pub clear: Tensor<T>,
}

/// Controls for the synthetic cloud opacity field.
#[derive(Debug, Clone)]
pub struct CloudParams {
    pub octaves: usize,
    /// Upper bound of the opacity field, in (0, 1].
    pub alpha_max: f64,
    pub seed: u64,
}

impl Default for CloudParams {
    fn default() -> Self {
        CloudParams { octaves: 3, alpha_max: 0.9, seed: 0 }
    }
}

// ---------------------------------------------------------------------------
// Image I/O (8-bit RGB PNG, mapped to [0,1] by /255)
// ---------------------------------------------------------------------------

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    {
        let data = t.data_mut();
        for (x, y, pixel) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] =
                    T::from_f64_lossy(pixel.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Quantize to 8-bit with round-half-up and write a PNG. Goes through a
/// temporary file and a rename so interrupted writes never leave a partial
/// image behind.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(CoreError::dim("save_image", format!("expected 3×H×W, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = t.data()[c * h * w + y * w + x].to_f64_lossy();
                px[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic imagery
// ---------------------------------------------------------------------------

/// Bilinearly interpolated value noise from a seeded coarse grid.
fn value_noise<R: Rng>(side: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; side * side];
    let scale = cells as f64 / side as f64;
    for y in 0..side {
        let gy = y as f64 * scale;
        let y0 = (gy as usize).min(cells - 1);
        let fy = gy - y0 as f64;
        for x in 0..side {
            let gx = x as f64 * scale;
            let x0 = (gx as usize).min(cells - 1);
            let fx = gx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
            let bot = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
            out[y * side + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Seeded procedural clear image: a mixture of an oriented gradient, a
/// checkerboard, and low-passed value noise, independently weighted per
/// channel and clamped to [0,1].
pub fn synth_clear_image<T: Scalar>(side: usize, seed: u64) -> Result<Tensor<T>> {
    if side < 8 {
        return Err(CoreError::Usage(format!("synth_clear_image: side {side} < 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let checker_cells = 2 + rng.random_range(0..4usize);
    let checker_phase = rng.random::<f64>();
    let noise = value_noise(side, 4, &mut rng);

    let mut t = Tensor::zeros(&[3, side, side]);
    for c in 0..3 {
        let w_grad = 0.25 + 0.5 * rng.random::<f64>();
        let w_check = 0.1 + 0.3 * rng.random::<f64>();
        let w_noise = 1.0 - w_grad - w_check * 0.5;
        let offset = 0.1 * rng.random::<f64>();
        for y in 0..side {
            for x in 0..side {
                let u = x as f64 / side as f64;
                let v = y as f64 / side as f64;
                let gradient = 0.5 + 0.5 * (dx * (u - 0.5) + dy * (v - 0.5));
                let cell = ((u * checker_cells as f64 + checker_phase).floor()
                    + (v * checker_cells as f64).floor()) as i64;
                let checker = if cell.rem_euclid(2) == 0 { 0.35 } else { 0.65 };
                let n = noise[y * side + x];
                let val = (w_grad * gradient + w_check * checker + w_noise * n + offset).clamp(0.0, 1.0);
                t.data_mut()[c * side * side + y * side + x] = T::from_f64_lossy(val);
            }
        }
    }
    Ok(t)
}

/// Multi-octave smooth opacity field, rescaled so its range is exactly
/// [0, alpha_max].
pub fn synth_cloud_field<T: Scalar>(side: usize, params: &CloudParams) -> Result<Tensor<T>> {
    if side < 8 {
        return Err(CoreError::Usage(format!("synth_cloud_field: side {side} < 8")));
    }
    if !(0.0..=1.0).contains(&params.alpha_max) || params.alpha_max == 0.0 {
        return Err(CoreError::Config(format!("alpha_max {} outside (0, 1]", params.alpha_max)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut field = vec![0.0f64; side * side];
    let mut amplitude = 1.0;
    for octave in 0..params.octaves.max(1) {
        let cells = (2usize << octave).min(side / 2);
        let layer = value_noise(side, cells, &mut rng);
        for (f, l) in field.iter_mut().zip(&layer) {
            *f += amplitude * l;
        }
        amplitude *= 0.5;
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut t = Tensor::zeros(&[side, side]);
    for (o, f) in t.data_mut().iter_mut().zip(&field) {
        *o = T::from_f64_lossy((f - lo) / span * params.alpha_max);
    }
    Ok(t)
}

/// Alpha-composite a cloud layer over a clear image:
/// `cloudy = (1−α)·clear + α·tint`, per channel.
pub fn apply_cloud<T: Scalar>(clear: &Tensor<T>, alpha: &Tensor<T>, tint: [T; 3]) -> Result<Tensor<T>> {
    let shape = clear.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(CoreError::dim("apply_cloud", format!("clear must be 3×H×W, got {shape:?}")));
    }
    if alpha.shape() != [shape[1], shape[2]] {
        return Err(CoreError::dim(
            "apply_cloud",
            format!("alpha {:?} must match spatial dims of {:?}", alpha.shape(), shape),
        ));
    }
    let plane = shape[1] * shape[2];
    let mut out = Tensor::zeros(shape);
    {
        let (cd, ad, od) = (clear.data(), alpha.data(), out.data_mut());
        for c in 0..3 {
            for i in 0..plane {
                let a = ad[i];
                od[c * plane + i] = (T::one() - a) * cd[c * plane + i] + a * tint[c];
            }
        }
    }
    Ok(out)
}

/// Generate one synthetic pair from a per-image seed.
fn synth_pair<T: Scalar>(side: usize, id: String, seed: u64, params: &CloudParams) -> Result<ImagePair<T>> {
    let clear = synth_clear_image::<T>(side, seed)?;
    let cloud_params = CloudParams { seed: seed.wrapping_add(0x5EED), ..params.clone() };
    let alpha = synth_cloud_field::<T>(side, &cloud_params)?;
    let mut tint_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x71A7));
    let tint = std::array::from_fn(|_| T::from_f64_lossy(0.9 + 0.1 * tint_rng.random::<f64>()));
    let cloudy = apply_cloud(&clear, &alpha, tint)?;
    Ok(ImagePair { id, cloudy, clear })
}

fn split_ids(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    // Deterministic shuffle then prefix split; test share is floor(n/5).
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5711_7A8C_0FFE_E000);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let test_count = n / 5;
    let test = order[..test_count].to_vec();
    let train = order[test_count..].to_vec();
    (train, test)
}

/// Synthesize `n` pairs and split them 80/20 deterministically.
/// Per-image streams are derived by xor-ing the dataset seed with the index.
pub fn make_dataset<T: Scalar>(
    n: usize,
    side: usize,
    seed: u64,
    params: &CloudParams,
) -> Result<Split<T>> {
    if n < 5 {
        return Err(CoreError::Usage(format!("make_dataset: n {n} < 5")));
    }
    let pairs: Vec<ImagePair<T>> = (0..n)
        .map(|i| synth_pair(side, format!("{i:04}"), seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), params))
        .collect::<Result<_>>()?;
    let (train_idx, test_idx) = split_ids(n, seed);
    let mut pairs: Vec<Option<ImagePair<T>>> = pairs.into_iter().map(Some).collect();
    let train = train_idx.iter().map(|&i| pairs[i].take().unwrap()).collect();
    let test = test_idx.iter().map(|&i| pairs[i].take().unwrap()).collect();
    Ok((train, test))
}

/// Write pairs to `<root>/cloud/<id>.png`, `<root>/label/<id>.png` plus
/// `manifest.csv` recording the split membership.
pub fn write_dataset<T: Scalar>(root: &Path, train: &[ImagePair<T>], test: &[ImagePair<T>]) -> Result<()> {
    let cloud_dir = root.join("cloud");
    let label_dir = root.join("label");
    std::fs::create_dir_all(&cloud_dir)?;
    std::fs::create_dir_all(&label_dir)?;
    let mut rows: Vec<(String, &str)> = Vec::new();
    for (pairs, split) in [(train, "train"), (test, "test")] {
        for p in pairs {
            save_image(&p.cloudy, &cloud_dir.join(format!("{}.png", p.id)))?;
            save_image(&p.clear, &label_dir.join(format!("{}.png", p.id)))?;
            rows.push((p.id.clone(), split));
        }
    }
    rows.sort();
    let tmp = root.join("manifest.csv.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        writeln!(f, "{MANIFEST_CSV_HEADER}")?;
        for (id, split) in rows {
            writeln!(f, "{id},{split}")?;
        }
    }
    std::fs::rename(tmp, root.join("manifest.csv"))?;
    Ok(())
}

/// Load paired images by matching filenames in the two directories.
///
/// When `<cloud_dir>/../manifest.csv` exists its split column is honored;
/// otherwise ids are split 80/20 by a deterministic shuffle with `seed`.
/// Files present on only one side abort the load (listing the offenders)
/// unless `allow_skip` is set, in which case they are skipped.
pub fn load_paired_dir<T: Scalar>(
    cloud_dir: &Path,
    label_dir: &Path,
    seed: u64,
    allow_skip: bool,
) -> Result<Split<T>> {
    let list = |dir: &Path| -> Result<BTreeMap<String, std::path::PathBuf>> {
        let mut out = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), path.clone());
                }
            }
        }
        Ok(out)
    };
    let clouds = list(cloud_dir)?;
    let labels = list(label_dir)?;

    let unpaired: Vec<String> = clouds
        .keys()
        .filter(|id| !labels.contains_key(*id))
        .chain(labels.keys().filter(|id| !clouds.contains_key(*id)))
        .cloned()
        .collect();
    if !unpaired.is_empty() && !allow_skip {
        return Err(CoreError::Data(format!(
            "unpaired files (rerun with --allow-skip to ignore): {}",
            unpaired.join(" ")
        )));
    }

    let ids: Vec<String> = clouds.keys().filter(|id| labels.contains_key(*id)).cloned().collect();
    if ids.is_empty() {
        return Err(CoreError::Data("no paired images found".into()));
    }
    let mut pairs = Vec::with_capacity(ids.len());
    for id in &ids {
        pairs.push(ImagePair {
            id: id.clone(),
            cloudy: load_image(&clouds[id])?,
            clear: load_image(&labels[id])?,
        });
    }

    // Prefer the manifest split when the dataset ships one.
    let manifest = cloud_dir.parent().map(|p| p.join("manifest.csv"));
    if let Some(manifest) = manifest.filter(|m| m.exists()) {
        let text = std::fs::read_to_string(manifest)?;
        let mut split_of = BTreeMap::new();
        for line in text.lines().skip(1) {
            if let Some((id, split)) = line.split_once(',') {
                split_of.insert(id.to_string(), split.to_string());
            }
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for p in pairs {
            match split_of.get(&p.id).map(String::as_str) {
                Some("test") => test.push(p),
                _ => train.push(p),
            }
        }
        return Ok((train, test));
    }

    let (train_idx, test_idx) = split_ids(pairs.len(), seed);
    let mut pairs: Vec<Option<ImagePair<T>>> = pairs.into_iter().map(Some).collect();
    let train = train_idx.iter().map(|&i| pairs[i].take().unwrap()).collect();
    let test = test_idx.iter().map(|&i| pairs[i].take().unwrap()).collect();
    Ok((train, test))
}
