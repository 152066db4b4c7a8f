//! Adversarial losses and the alternating training loop.
//!
//! Per step the discriminator is updated on `−mean(log D(x, real)) −
//! mean(log(1 − D(x, fake)))` with the fake detached, then the generator on
//! the non-saturating `−mean(log D(x, G(x)))` plus the per-channel-weighted
//! L1 reconstruction term (mean of `λ_c·|gt − gen|` over all elements). The
//! saturating `+mean(log(1 − D(x, G(x))))` form is available behind a flag.
//! All probabilities pass through a clamped log, so losses stay finite; a
//! non-finite loss aborts the run instead of training on garbage.
//!
//! Determinism contract: a fixed seed fixes the batch order (per-epoch
//! seeded shuffles addressed by absolute step), the parameter init, and the
//! optimizer trajectory, so metric traces are bitwise reproducible and a run
//! resumed from a checkpoint continues the exact trace of an uninterrupted
//! run. Checkpoints therefore carry the optimizer moments next to the
//! parameters.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImagePair;
use crate::error::{CoreError, Result};
use crate::metrics::{self, MetricReport};
use crate::models::{Checkpoint, Discriminator, Generator};
use crate::scalar::Scalar;
use crate::tape::{Param, Tape, ValueId};
use crate::tensor::Tensor;

pub const TRAIN_CSV_HEADER: &str = "step,d_loss,g_adv,l1,value,psnr_eval,ssim_eval";

/// Loss shaping: per-channel L1 weights and the probability log clamp.
#[derive(Debug, Clone)]
pub struct GanLossParams {
    pub lambda: Vec<f64>,
    pub log_eps: f64,
}

impl Default for GanLossParams {
    fn default() -> Self {
        GanLossParams { lambda: vec![100.0; 3], log_eps: 1e-7 }
    }
}

impl GanLossParams {
    pub fn uniform(lambda: f64, channels: usize) -> Self {
        GanLossParams { lambda: vec![lambda; channels], log_eps: 1e-7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_empty() || self.lambda.iter().any(|&l| l <= 0.0) {
            return Err(CoreError::Config("lambda weights must be positive".into()));
        }
        if self.log_eps <= 0.0 || self.log_eps >= 0.5 {
            return Err(CoreError::Config("log_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total steps (absolute; a resumed run continues up to this count).
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub loss: GanLossParams,
    /// Use the saturating `+mean(log(1−D))` generator loss instead of the
    /// default non-saturating `−mean(log D)`.
    pub literal_adv_loss: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            d_steps: 1,
            loss: GanLossParams::default(),
            literal_adv_loss: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.d_steps == 0 || self.lr <= 0.0 || self.log_every == 0 {
            return Err(CoreError::Config("train config: all rates and counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::Config("train config: moment decays must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

// ---------------------------------------------------------------------------
// Losses (pure forms + tape forms)
// ---------------------------------------------------------------------------

/// Per-element weight map for the L1 term: `λ_c / (C·H·W)`.
fn l1_weight_map<T: Scalar>(shape: &[usize], lambda: &[f64]) -> Result<Tensor<T>> {
    let [c, h, w] = *shape else {
        return Err(CoreError::dim("l1_loss", format!("expected C×H×W, got {shape:?}")));
    };
    if lambda.len() != c {
        return Err(CoreError::dim("l1_loss", format!("{} lambda weights for {c} channels", lambda.len())));
    }
    let norm = (c * h * w) as f64;
    let mut map = Tensor::zeros(shape);
    for ch in 0..c {
        let v = T::from_f64_lossy(lambda[ch] / norm);
        for e in &mut map.data_mut()[ch * h * w..(ch + 1) * h * w] {
            *e = v;
        }
    }
    Ok(map)
}

/// Mean over all elements of `λ_c·|gt − gen|`.
pub fn l1_loss<T: Scalar>(gt: &Tensor<T>, gen: &Tensor<T>, lambda: &[f64]) -> Result<f64> {
    if gt.shape() != gen.shape() {
        return Err(CoreError::dim("l1_loss", format!("shapes {:?} vs {:?}", gt.shape(), gen.shape())));
    }
    let map = l1_weight_map::<T>(gt.shape(), lambda)?;
    let mut acc = 0.0f64;
    for ((&a, &b), &w) in gt.data().iter().zip(gen.data()).zip(map.data()) {
        acc += w.to_f64_lossy() * (a.to_f64_lossy() - b.to_f64_lossy()).abs();
    }
    Ok(acc)
}

/// Tape form of [`l1_loss`].
pub fn l1_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    gt: ValueId,
    gen: ValueId,
    lambda: &[f64],
) -> Result<ValueId> {
    let map = l1_weight_map::<T>(tape.value(gt).shape(), lambda)?;
    let weights = tape.leaf(map, false);
    let diff = tape.sub(gt, gen)?;
    let absdiff = tape.abs(diff);
    let weighted = tape.mul(absdiff, weights)?;
    tape.reduce_sum(weighted, &[])
}

fn mean_log_clamped<T: Scalar>(t: &Tensor<T>, eps: f64) -> f64 {
    let lo = eps;
    let hi = 1.0 - eps;
    let sum: f64 = t.data().iter().map(|v| v.to_f64_lossy().clamp(lo, hi).ln()).sum();
    sum / t.numel() as f64
}

/// Discriminator loss: `−mean(log d_real) − mean(log(1 − d_fake))`.
pub fn d_loss<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>, log_eps: f64) -> f64 {
    let fake_flipped: Vec<f64> = d_fake.data().iter().map(|v| 1.0 - v.to_f64_lossy()).collect();
    let mean_fake: f64 = fake_flipped
        .iter()
        .map(|&v| v.clamp(log_eps, 1.0 - log_eps).ln())
        .sum::<f64>()
        / fake_flipped.len() as f64;
    -mean_log_clamped(d_real, log_eps) - mean_fake
}

/// Non-saturating generator adversarial loss: `−mean(log d_fake)`.
pub fn g_adv_loss<T: Scalar>(d_fake: &Tensor<T>, log_eps: f64) -> f64 {
    -mean_log_clamped(d_fake, log_eps)
}

/// Diagnostic two-player objective value: `mean(log d_real) + mean(log(1 −
/// d_fake))`. Equal to `−d_loss` on the same tensors (logged, not trained).
pub fn minimax_value<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>, log_eps: f64) -> f64 {
    -d_loss(d_real, d_fake, log_eps)
}

fn d_loss_tape<T: Scalar>(tape: &mut Tape<T>, d_real: ValueId, d_fake: ValueId, log_eps: f64) -> Result<ValueId> {
    let eps = T::from_f64_lossy(log_eps);
    let log_real = tape.log_clamped(d_real, eps);
    let mean_real = tape.reduce_mean(log_real, &[])?;
    let flipped = tape.affine(d_fake, -T::one(), T::one());
    let log_fake = tape.log_clamped(flipped, eps);
    let mean_fake = tape.reduce_mean(log_fake, &[])?;
    let total = tape.add(mean_real, mean_fake)?;
    Ok(tape.scale(total, -T::one()))
}

fn g_adv_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    d_fake: ValueId,
    log_eps: f64,
    literal: bool,
) -> Result<ValueId> {
    let eps = T::from_f64_lossy(log_eps);
    if literal {
        // Saturating form: minimize +mean(log(1 − D(fake))).
        let flipped = tape.affine(d_fake, -T::one(), T::one());
        let log_fake = tape.log_clamped(flipped, eps);
        tape.reduce_mean(log_fake, &[])
    } else {
        let log_fake = tape.log_clamped(d_fake, eps);
        let mean = tape.reduce_mean(log_fake, &[])?;
        Ok(tape.scale(mean, -T::one()))
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with bias correction. Consumes and zeroes the
/// parameter gradient accumulators on every step.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, params: &[Param<T>]) -> Self {
        Adam {
            lr: T::from_f64_lossy(lr),
            beta1: T::from_f64_lossy(beta1),
            beta2: T::from_f64_lossy(beta2),
            eps: T::from_f64_lossy(1e-8),
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Param<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer bound to a different parameter set");
        self.t += 1;
        let t = self.t as i32;
        let bias1 = T::one() - self.beta1.powi(t);
        let bias2 = T::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }

    pub fn state(&self) -> (&[Tensor<T>], &[Tensor<T>], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(CoreError::Checkpoint("optimizer state length mismatch".into()));
        }
        for (got, want) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if got.shape() != want.shape() {
                return Err(CoreError::Checkpoint("optimizer state shape mismatch".into()));
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub value: f64,
}

fn apply_grads<T: Scalar>(params: &mut [Param<T>], ids: &[ValueId], grads: &crate::tape::Gradients<T>) {
    for (p, &id) in params.iter_mut().zip(ids) {
        if let Some(g) = grads.get(id) {
            let acc = p.grad.data_mut();
            for (a, &gv) in acc.iter_mut().zip(g.data()) {
                *a += gv;
            }
        }
    }
}

/// One discriminator update over a batch. Returns (d_loss, minimax value).
pub fn discriminator_step<T: Scalar>(
    gen: &Generator<T>,
    disc: &mut Discriminator<T>,
    opt_d: &mut Adam<T>,
    batch: &[&ImagePair<T>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let gen_ids = gen.bind(&mut tape, false);
    let disc_ids = disc.bind(&mut tape, true);
    let scale = T::from_f64_lossy(1.0 / batch.len() as f64);

    let mut total: Option<ValueId> = None;
    let mut loss_value = 0.0;
    let mut value = 0.0;
    for pair in batch {
        let cloudy = tape.leaf(pair.cloudy.clone(), false);
        let clear = tape.leaf(pair.clear.clone(), false);
        // Generator leaves carry no gradient, so the fake is detached from G.
        let fake = gen.forward_tape(&mut tape, cloudy, &gen_ids)?;
        let d_real = disc.forward_tape(&mut tape, cloudy, clear, &disc_ids)?;
        let d_fake = disc.forward_tape(&mut tape, cloudy, fake, &disc_ids)?;
        let loss = d_loss_tape(&mut tape, d_real, d_fake, cfg.loss.log_eps)?;
        loss_value += tape.value(loss).item()?.to_f64_lossy() / batch.len() as f64;
        value += minimax_value(tape.value(d_real), tape.value(d_fake), cfg.loss.log_eps) / batch.len() as f64;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let total = tape.scale(total.expect("non-empty batch"), scale);
    let grads = tape.backward(total)?;
    apply_grads(&mut disc.params, &disc_ids, &grads);
    opt_d.step(&mut disc.params);
    Ok((loss_value, value))
}

/// One generator update over a batch. Returns (g_adv, l1).
pub fn generator_step<T: Scalar>(
    gen: &mut Generator<T>,
    disc: &Discriminator<T>,
    opt_g: &mut Adam<T>,
    batch: &[&ImagePair<T>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let gen_ids = gen.bind(&mut tape, true);
    let disc_ids = disc.bind(&mut tape, false);
    let scale = T::from_f64_lossy(1.0 / batch.len() as f64);

    let mut total: Option<ValueId> = None;
    let mut g_adv_value = 0.0;
    let mut l1_value = 0.0;
    for pair in batch {
        let cloudy = tape.leaf(pair.cloudy.clone(), false);
        let clear = tape.leaf(pair.clear.clone(), false);
        let fake = gen.forward_tape(&mut tape, cloudy, &gen_ids)?;
        let d_fake = disc.forward_tape(&mut tape, cloudy, fake, &disc_ids)?;
        let adv = g_adv_loss_tape(&mut tape, d_fake, cfg.loss.log_eps, cfg.literal_adv_loss)?;
        let l1 = l1_loss_tape(&mut tape, clear, fake, &cfg.loss.lambda)?;
        g_adv_value += tape.value(adv).item()?.to_f64_lossy() / batch.len() as f64;
        l1_value += tape.value(l1).item()?.to_f64_lossy() / batch.len() as f64;
        let sample = tape.add(adv, l1)?;
        total = Some(match total {
            None => sample,
            Some(acc) => tape.add(acc, sample)?,
        });
    }
    let total = tape.scale(total.expect("non-empty batch"), scale);
    let grads = tape.backward(total)?;
    apply_grads(&mut gen.params, &gen_ids, &grads);
    opt_g.step(&mut gen.params);
    Ok((g_adv_value, l1_value))
}

/// One full alternating step: `d_steps` discriminator updates, then one
/// generator update. Aborts on a non-finite loss.
pub fn train_step<T: Scalar>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    opt_g: &mut Adam<T>,
    opt_d: &mut Adam<T>,
    batch: &[&ImagePair<T>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(CoreError::Usage("train_step: empty batch".into()));
    }
    let mut d_metrics = (0.0, 0.0);
    for _ in 0..cfg.d_steps {
        d_metrics = discriminator_step(gen, disc, opt_d, batch, cfg)?;
    }
    let (g_adv, l1) = generator_step(gen, disc, opt_g, batch, cfg)?;
    let metrics = StepMetrics { step, d_loss: d_metrics.0, g_adv, l1, value: d_metrics.1 };
    if !(metrics.d_loss.is_finite() && metrics.g_adv.is_finite() && metrics.l1.is_finite()) {
        return Err(CoreError::NanLoss {
            step,
            detail: format!("d_loss={} g_adv={} l1={}", metrics.d_loss, metrics.g_adv, metrics.l1),
        });
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub value: f64,
    pub psnr_eval: f64,
    pub ssim_eval: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<LogRow>,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Batch membership for an absolute step: a per-epoch seeded shuffle,
/// addressed by position, so a resumed run sees the same stream.
fn batch_indices(n: usize, batch: usize, step: u64, seed: u64) -> Vec<usize> {
    let usable = n - n % batch;
    let cursor = (step as usize * batch) % usable;
    let epoch = (step as usize * batch) / usable;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order[cursor..cursor + batch].to_vec()
}

/// Generated-vs-clear metrics over a pair set.
pub fn eval_generator<T: Scalar>(gen: &Generator<T>, pairs: &[ImagePair<T>]) -> Result<MetricReport> {
    let evaluated: Vec<(String, Tensor<T>, Tensor<T>)> = pairs
        .iter()
        .map(|p| Ok((p.id.clone(), gen.forward(&p.cloudy)?, p.clear.clone())))
        .collect::<Result<_>>()?;
    metrics::evaluate_pairs(&evaluated)
}

fn checkpoint_entries<T: Scalar>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    opt_g: &Adam<T>,
    opt_d: &Adam<T>,
) -> Vec<(String, Tensor<f32>)> {
    let mut entries = Vec::new();
    for p in &gen.params {
        entries.push((format!("gen.{}", p.name), p.value.convert::<f32>()));
    }
    for p in &disc.params {
        entries.push((format!("disc.{}", p.name), p.value.convert::<f32>()));
    }
    for (opt, model_params, tag) in [
        (opt_g, &gen.params, "opt_g"),
        (opt_d, &disc.params, "opt_d"),
    ] {
        let (m, v, t) = opt.state();
        for (moment, kind) in [(m, "m"), (v, "v")] {
            for (tensor, p) in moment.iter().zip(model_params.iter()) {
                entries.push((format!("{tag}.{kind}.{}", p.name), tensor.convert::<f32>()));
            }
        }
        entries.push((format!("{tag}.t"), Tensor::from_vec(vec![1], vec![t as f32]).unwrap()));
    }
    entries
}

fn restore_optimizer<T: Scalar>(
    opt: &mut Adam<T>,
    params: &[Param<T>],
    ckpt: &Checkpoint,
    tag: &str,
) -> Result<()> {
    let map = ckpt.entry_map();
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for p in params {
        for (kind, bucket) in [("m", &mut m), ("v", &mut v)] {
            let key = format!("{tag}.{kind}.{}", p.name);
            let tensor = map
                .get(&key)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing optimizer state {key}")))?;
            bucket.push(tensor.convert::<T>());
        }
    }
    let t = map
        .get(&format!("{tag}.t"))
        .ok_or_else(|| CoreError::Checkpoint(format!("missing optimizer step counter {tag}.t")))?
        .item()
        .map_err(|_| CoreError::Checkpoint("optimizer step counter is not scalar".into()))? as u64;
    opt.restore(m, v, t)
}

/// Run (or resume) training: `cfg.steps` alternating updates over seeded
/// shuffled batches, periodic held-out evaluation, a metrics CSV and a final
/// checkpoint under `out_dir`.
pub fn train_loop<T: Scalar>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    train: &[ImagePair<T>],
    test: &[ImagePair<T>],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Data("train_loop: empty training set".into()));
    }
    if cfg.batch_size > train.len() {
        return Err(CoreError::Config(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &gen.params);
    let mut opt_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &disc.params);
    let mut start_step = 0u64;
    if let Some(ckpt) = resume {
        let map = ckpt.entry_map();
        gen.load_params(&map, "gen.")?;
        disc.load_params(&map, "disc.")?;
        restore_optimizer(&mut opt_g, &gen.params, ckpt, "opt_g")?;
        restore_optimizer(&mut opt_d, &disc.params, ckpt, "opt_d")?;
        start_step = ckpt.step;
        if start_step > cfg.steps {
            return Err(CoreError::Usage(format!(
                "checkpoint is at step {start_step}, beyond the requested {} total steps",
                cfg.steps
            )));
        }
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = std::fs::File::create(&metrics_path)?;
    writeln!(csv, "{TRAIN_CSV_HEADER}")?;

    let mut rows = Vec::new();
    for step in start_step..cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, step, cfg.seed);
        let batch: Vec<&ImagePair<T>> = idx.iter().map(|&i| &train[i]).collect();
        let m = train_step(gen, disc, &mut opt_g, &mut opt_d, &batch, cfg, step + 1)?;

        let logged = (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps;
        if logged {
            let report = if test.is_empty() { None } else { Some(eval_generator(gen, test)?) };
            let (p, s) = report.map_or((f64::NAN, f64::NAN), |r| (r.mean_psnr_db, r.mean_ssim));
            let row = LogRow {
                step: m.step,
                d_loss: m.d_loss,
                g_adv: m.g_adv,
                l1: m.l1,
                value: m.value,
                psnr_eval: p,
                ssim_eval: s,
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                row.step, row.d_loss, row.g_adv, row.l1, row.value, row.psnr_eval, row.ssim_eval
            )?;
            rows.push(row);
        }
    }
    drop(csv);

    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    let ckpt = Checkpoint {
        step: cfg.steps,
        seed: cfg.seed,
        entries: checkpoint_entries(gen, disc, &opt_g, &opt_d),
    };
    ckpt.save(&checkpoint_path)?;

    let (final_psnr, final_ssim) = if test.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let report = eval_generator(gen, test)?;
        (report.mean_psnr_db, report.mean_ssim)
    };
    Ok(TrainOutcome { rows, final_psnr, final_ssim, checkpoint_path, metrics_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CloudParams;
    use crate::models::{DiscriminatorConfig, EncoderKind, GeneratorConfig};

    fn tiny_gen_cfg() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 2,
            levels: 2,
            heads: 1,
            side: 8,
            encoder: EncoderKind::Attention,
            ..Default::default()
        }
    }

    fn tiny_disc_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig { image_channels: 3, widths: vec![4, 8] }
    }

    fn tiny_dataset(n: usize) -> (Vec<ImagePair<f32>>, Vec<ImagePair<f32>>) {
        crate::data::make_dataset(n, 8, 77, &CloudParams::default()).unwrap()
    }

    fn tiny_train_cfg(steps: u64) -> TrainConfig {
        TrainConfig { steps, log_every: 2, seed: 5, ..Default::default() }
    }

    #[test]
    fn l1_loss_of_identical_tensors_is_zero() {
        let x = Tensor::<f64>::filled(&[3, 2, 2], 0.3);
        assert_eq!(l1_loss(&x, &x, &[100.0, 100.0, 100.0]).unwrap(), 0.0);
    }

    #[test]
    fn l1_loss_single_element() {
        let gt = Tensor::<f64>::filled(&[1, 1, 1], 0.75);
        let gen = Tensor::<f64>::filled(&[1, 1, 1], 0.25);
        assert!((l1_loss(&gt, &gen, &[1.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let gt = Tensor::<f64>::rand_unit(&[3, 4, 5], &mut rng);
        let gen = Tensor::<f64>::rand_unit(&[3, 4, 5], &mut rng);
        let lambda = [100.0, 50.0, 25.0];
        let got = l1_loss(&gt, &gen, &lambda).unwrap();
        let mut want = 0.0;
        for c in 0..3 {
            for h in 0..4 {
                for w in 0..5 {
                    want += lambda[c] * (gt.at(&[c, h, w]) - gen.at(&[c, h, w])).abs();
                }
            }
        }
        want /= 60.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn l1_loss_symmetric_nonnegative_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let a = Tensor::<f64>::rand_unit(&[3, 3, 3], &mut rng);
        let b = Tensor::<f64>::rand_unit(&[3, 3, 3], &mut rng);
        let lambda = [100.0; 3];
        let ab = l1_loss(&a, &b, &lambda).unwrap();
        let ba = l1_loss(&b, &a, &lambda).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn d_loss_at_half_is_two_ln_two() {
        let d = Tensor::<f64>::filled(&[1, 2, 2], 0.5);
        let got = d_loss(&d, &d, 1e-7);
        assert!((got - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{got}");
    }

    #[test]
    fn d_loss_for_perfect_discriminator_is_near_zero() {
        let real = Tensor::<f64>::filled(&[1, 2, 2], 1.0);
        let fake = Tensor::<f64>::filled(&[1, 2, 2], 0.0);
        let got = d_loss(&real, &fake, 1e-7);
        assert!(got.abs() < 1e-5, "{got}");
    }

    #[test]
    fn g_adv_loss_at_half_is_ln_two() {
        let d = Tensor::<f64>::filled(&[1, 2, 2], 0.5);
        assert!((g_adv_loss(&d, 1e-7) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn minimax_value_examples() {
        let half = Tensor::<f64>::filled(&[1, 2, 2], 0.5);
        let v = minimax_value(&half, &half, 1e-7);
        assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // Monotone in d_real with d_fake fixed.
        let better = Tensor::<f64>::filled(&[1, 2, 2], 0.8);
        assert!(minimax_value(&better, &half, 1e-7) > v);
    }

    #[test]
    fn minimax_value_is_negated_d_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let real = Tensor::<f64>::rand_unit(&[1, 3, 3], &mut rng).map(|v| 0.05 + 0.9 * v);
        let fake = Tensor::<f64>::rand_unit(&[1, 3, 3], &mut rng).map(|v| 0.05 + 0.9 * v);
        let v = minimax_value(&real, &fake, 1e-7);
        let d = d_loss(&real, &fake, 1e-7);
        assert!((v + d).abs() < 1e-12);
    }

    #[test]
    fn generator_step_descends_adversarial_loss_with_frozen_d() {
        let mut gen = Generator::<f32>::build(tiny_gen_cfg(), 1).unwrap();
        let disc = Discriminator::<f32>::build(tiny_disc_cfg(), 2).unwrap();
        let (train, _) = tiny_dataset(5);
        let batch: Vec<&ImagePair<f32>> = train.iter().take(2).collect();
        let mut cfg = tiny_train_cfg(1);
        cfg.loss.lambda = vec![1e-9; 3]; // lambda must stay positive; effectively zero
        cfg.lr = 1e-3;

        let eval_adv = |gen: &Generator<f32>| -> f64 {
            batch
                .iter()
                .map(|p| {
                    let fake = gen.forward(&p.cloudy).unwrap();
                    let d_fake = disc.forward(&p.cloudy, &fake).unwrap();
                    g_adv_loss(&d_fake, cfg.loss.log_eps)
                })
                .sum::<f64>()
                / batch.len() as f64
        };

        let before = eval_adv(&gen);
        let mut opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &gen.params);
        generator_step(&mut gen, &disc, &mut opt_g, &batch, &cfg).unwrap();
        let after = eval_adv(&gen);
        assert!(after < before, "g_adv did not descend: {before} -> {after}");
    }

    #[test]
    fn single_step_changes_parameters() {
        let mut gen = Generator::<f32>::build(tiny_gen_cfg(), 1).unwrap();
        let mut disc = Discriminator::<f32>::build(tiny_disc_cfg(), 2).unwrap();
        let before = gen.params[0].value.clone();
        let (train, _) = tiny_dataset(5);
        let batch: Vec<&ImagePair<f32>> = train.iter().take(1).collect();
        let cfg = tiny_train_cfg(1);
        let mut opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &gen.params);
        let mut opt_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &disc.params);
        train_step(&mut gen, &mut disc, &mut opt_g, &mut opt_d, &batch, &cfg, 1).unwrap();
        assert_ne!(gen.params[0].value, before);
    }

    #[test]
    fn fixed_seed_reproduces_the_metric_trace() {
        let (train, test) = tiny_dataset(6);
        let run = || {
            let mut gen = Generator::<f32>::build(tiny_gen_cfg(), 1).unwrap();
            let mut disc = Discriminator::<f32>::build(tiny_disc_cfg(), 2).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let out = train_loop(&mut gen, &mut disc, &train, &test, &tiny_train_cfg(6), dir.path(), None)
                .unwrap();
            out.rows
                .iter()
                .map(|r| format!("{},{},{},{},{},{},{}", r.step, r.d_loss, r.g_adv, r.l1, r.value, r.psnr_eval, r.ssim_eval))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_steps_leaves_parameters_at_init() {
        let (train, test) = tiny_dataset(5);
        let mut gen = Generator::<f32>::build(tiny_gen_cfg(), 1).unwrap();
        let mut disc = Discriminator::<f32>::build(tiny_disc_cfg(), 2).unwrap();
        let init = Generator::<f32>::build(tiny_gen_cfg(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&mut gen, &mut disc, &train, &test, &tiny_train_cfg(0), dir.path(), None).unwrap();
        for (a, b) in gen.params.iter().zip(&init.params) {
            assert_eq!(a.value, b.value);
        }
        let ckpt = Checkpoint::load(&out.checkpoint_path).unwrap();
        let map = ckpt.entry_map();
        for p in &init.params {
            assert_eq!(map[&format!("gen.{}", p.name)], p.value);
        }
    }

    #[test]
    fn resumed_run_reproduces_the_continuation_trace() {
        let (train, test) = tiny_dataset(6);
        let full = {
            let mut gen = Generator::<f32>::build(tiny_gen_cfg(), 1).unwrap();
            let mut disc = Discriminator::<f32>::build(tiny_disc_cfg(), 2).unwrap();
            let dir = tempfile::tempdir().unwrap();
            train_loop(&mut gen, &mut disc, &train, &test, &tiny_train_cfg(8), dir.path(), None).unwrap()
        };
        let resumed = {
            let dir_a = tempfile::tempdir().unwrap();
            let mut gen = Generator::<f32>::build(tiny_gen_cfg(), 1).unwrap();
            let mut disc = Discriminator::<f32>::build(tiny_disc_cfg(), 2).unwrap();
            train_loop(&mut gen, &mut disc, &train, &test, &tiny_train_cfg(4), dir_a.path(), None).unwrap();
            let ckpt = Checkpoint::load(&dir_a.path().join("checkpoint.ckpt")).unwrap();

            let dir_b = tempfile::tempdir().unwrap();
            let mut gen2 = Generator::<f32>::build(tiny_gen_cfg(), 99).unwrap();
            let mut disc2 = Discriminator::<f32>::build(tiny_disc_cfg(), 98).unwrap();
            train_loop(&mut gen2, &mut disc2, &train, &test, &tiny_train_cfg(8), dir_b.path(), Some(&ckpt))
                .unwrap()
        };
        let tail: Vec<_> = full.rows.iter().filter(|r| r.step > 4).collect();
        assert_eq!(tail.len(), resumed.rows.len());
        for (a, b) in tail.iter().zip(&resumed.rows) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.d_loss.to_bits(), b.d_loss.to_bits());
            assert_eq!(a.g_adv.to_bits(), b.g_adv.to_bits());
            assert_eq!(a.l1.to_bits(), b.l1.to_bits());
            assert_eq!(a.psnr_eval.to_bits(), b.psnr_eval.to_bits());
        }
    }
}
