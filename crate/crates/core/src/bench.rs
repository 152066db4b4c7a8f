//! Scaling benchmark for the two attention kernels.
//!
//! Wall time is the median of `reps` runs after one excluded warmup run.
//! Memory is the peak transient element count from the thread-local
//! allocation counter, measured on a dedicated run with the counter reset
//! after the inputs exist — so it covers only buffers the kernel allocates
//! internally. Everything runs single-threaded at f32 (the compute
//! precision).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention;
use crate::error::{CoreError, Result};
use crate::tensor::{alloc_stats, Tensor};

pub const BENCH_CSV_HEADER: &str = "kernel,n,d,wall_time_ns,peak_transient_elements";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Softmax,
    Linear,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Softmax => "softmax",
            KernelKind::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub kernel: KernelKind,
    pub n: usize,
    pub d: usize,
    pub wall_time_ns: u128,
    pub peak_transient_elements: i64,
}

fn run_kernel(kernel: KernelKind, q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Result<Tensor<f32>> {
    match kernel {
        KernelKind::Softmax => attention::softmax_attention(q, k, v),
        KernelKind::Linear => Ok(attention::linear_attention(q, k, v, 1e-6)?.values),
    }
}

/// Benchmark both kernels at each sequence length. `sizes` must be
/// ascending; `reps` must be at least 5 (median reported, warmup excluded).
pub fn run_scaling_bench(sizes: &[usize], d: usize, reps: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CoreError::Usage("bench: sizes must be non-empty and strictly ascending".into()));
    }
    if reps < 5 {
        return Err(CoreError::Usage(format!("bench: reps {reps} < 5 (median needs repetitions)")));
    }
    if d == 0 {
        return Err(CoreError::Usage("bench: dims must be positive".into()));
    }

    let mut records = Vec::new();
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let q = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);

        for kernel in [KernelKind::Softmax, KernelKind::Linear] {
            // Warmup, excluded from timing.
            std::hint::black_box(run_kernel(kernel, &q, &k, &v)?);

            // Peak transient buffer accounting, on its own run.
            alloc_stats::reset();
            let out = run_kernel(kernel, &q, &k, &v)?;
            let peak = alloc_stats::peak_elements();
            std::hint::black_box(out);

            let mut times: Vec<u128> = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                let out = run_kernel(kernel, &q, &k, &v)?;
                times.push(start.elapsed().as_nanos());
                std::hint::black_box(out);
            }
            times.sort_unstable();
            let median = if reps % 2 == 1 {
                times[reps / 2]
            } else {
                (times[reps / 2 - 1] + times[reps / 2]) / 2
            };
            records.push(BenchRecord { kernel, n, d, wall_time_ns: median, peak_transient_elements: peak });
        }
    }
    Ok(records)
}

pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{BENCH_CSV_HEADER}")?;
    for r in records {
        writeln!(f, "{},{},{},{},{}", r.kernel.name(), r.n, r.d, r.wall_time_ns, r.peak_transient_elements)?;
    }
    Ok(())
}
