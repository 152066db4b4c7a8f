//! Attention kernels.
//!
//! Three forms live here:
//!
//! * [`softmax_attention`] — the quadratic reference. It materializes the
//!   full N×N weight matrix on purpose; that cost is what the linear kernel
//!   removes.
//! * [`kernel_attention`] — generalized attention for any nonnegative
//!   feature maps `φ(Q)`, `ψ(K)`, computed in the factored form that never
//!   builds an N×N intermediate.
//! * [`linear_attention`] — the O(N) kernel with the first-order similarity
//!   `1 + q̂ᵀk̂` on l2-normalized rows. The key/value summaries are computed
//!   once and reused across queries.
//!
//! [`brute_force_linear_attention`] is the O(N²) double-loop evaluation of
//! the same similarity and exists only as a test oracle for the factored
//! form. Tape-recorded compositions (`*_tape`) mirror the pure kernels for
//! training.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Param, Tape, ValueId};
use crate::tensor::Tensor;

/// Ablation-selected default head count.
pub const DEFAULT_HEADS: usize = 4;

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub head_key_dim: usize,
    pub head_value_dim: usize,
    /// Denominator guard for the normalization terms.
    pub eps: f64,
}

impl AttentionConfig {
    /// Even split of `model_dim` across `heads`; query and key dims are equal
    /// by construction and `heads · head_value_dim` matches the concatenated
    /// width fed to the output projection.
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim == 0 {
            return Err(CoreError::Config("attention: heads and model_dim must be positive".into()));
        }
        if !model_dim.is_multiple_of(heads) {
            return Err(CoreError::Config(format!(
                "attention: model_dim {model_dim} not divisible by heads {heads}"
            )));
        }
        let per_head = model_dim / heads;
        Ok(AttentionConfig {
            heads,
            model_dim,
            head_key_dim: per_head,
            head_value_dim: per_head,
            eps: 1e-6,
        })
    }

    pub fn concat_dim(&self) -> usize {
        self.heads * self.head_value_dim
    }
}

/// Per-head projection weights.
#[derive(Debug, Clone)]
pub struct HeadParams<T: Scalar> {
    pub w_q: Param<T>,
    pub w_k: Param<T>,
    pub w_v: Param<T>,
}

/// Projection weights for all heads plus the output projection.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T: Scalar> {
    pub heads: Vec<HeadParams<T>>,
    pub w_o: Param<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// He-normal init (std² = 2/fan_in) for every projection.
    pub fn init<R: Rng>(input_dim: usize, cfg: &AttentionConfig, prefix: &str, rng: &mut R) -> Self {
        let std_proj = T::from_f64_lossy((2.0 / input_dim as f64).sqrt());
        let std_out = T::from_f64_lossy((2.0 / cfg.concat_dim() as f64).sqrt());
        let heads = (0..cfg.heads)
            .map(|h| HeadParams {
                w_q: Param::new(
                    format!("{prefix}.h{h}.wq"),
                    Tensor::randn(&[input_dim, cfg.head_key_dim], std_proj, rng),
                ),
                w_k: Param::new(
                    format!("{prefix}.h{h}.wk"),
                    Tensor::randn(&[input_dim, cfg.head_key_dim], std_proj, rng),
                ),
                w_v: Param::new(
                    format!("{prefix}.h{h}.wv"),
                    Tensor::randn(&[input_dim, cfg.head_value_dim], std_proj, rng),
                ),
            })
            .collect();
        let w_o = Param::new(
            format!("{prefix}.wo"),
            Tensor::randn(&[cfg.concat_dim(), cfg.model_dim], std_out, rng),
        );
        AttentionWeights { heads, w_o }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::with_capacity(self.heads.len() * 3 + 1);
        for h in &self.heads {
            out.push(&h.w_q);
            out.push(&h.w_k);
            out.push(&h.w_v);
        }
        out.push(&self.w_o);
        out
    }

    /// Push every weight onto a tape (in `params()` order) and return the ids.
    pub fn bind(&self, tape: &mut Tape<T>, needs_grad: bool) -> AttentionWeightIds {
        let heads = self
            .heads
            .iter()
            .map(|h| AttentionHeadIds {
                w_q: tape.leaf(h.w_q.value.clone(), needs_grad),
                w_k: tape.leaf(h.w_k.value.clone(), needs_grad),
                w_v: tape.leaf(h.w_v.value.clone(), needs_grad),
            })
            .collect();
        let w_o = tape.leaf(self.w_o.value.clone(), needs_grad);
        AttentionWeightIds { heads, w_o }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionHeadIds {
    pub w_q: ValueId,
    pub w_k: ValueId,
    pub w_v: ValueId,
}

#[derive(Debug, Clone)]
pub struct AttentionWeightIds {
    pub heads: Vec<AttentionHeadIds>,
    pub w_o: ValueId,
}

/// Kernel output plus the number of rows whose denominator hit the eps guard.
#[derive(Debug, Clone)]
pub struct Attended<T: Scalar> {
    pub values: Tensor<T>,
    pub clamped_rows: usize,
}

fn check_qkv<T: Scalar>(op: &'static str, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(CoreError::dim(op, "Q, K, V must be 2-d".to_string()));
    }
    let (n, dk) = (q.shape()[0], q.shape()[1]);
    if k.shape() != [n, dk] {
        return Err(CoreError::dim(
            op,
            format!("K shape {:?} must match Q shape {:?}", k.shape(), q.shape()),
        ));
    }
    if v.shape()[0] != n {
        return Err(CoreError::dim(op, format!("V has {} rows, expected {n}", v.shape()[0])));
    }
    Ok((n, dk, v.shape()[1]))
}

/// Q, K, V projections for one head: `X·W_q`, `X·W_k`, `X·W_v`.
pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    head: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let h = w
        .heads
        .get(head)
        .ok_or_else(|| CoreError::dim("project_qkv", format!("head {head} out of range ({})", w.heads.len())))?;
    Ok((
        ops::matmul(x, &h.w_q.value)?,
        ops::matmul(x, &h.w_k.value)?,
        ops::matmul(x, &h.w_v.value)?,
    ))
}

/// Quadratic reference: row-softmax of `QKᵀ` applied to `V`. Materializes
/// the N×N weight matrix.
pub fn softmax_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_qkv("softmax_attention", q, k, v)?;
    let weights = softmax_attention_weights(q, k)?;
    ops::matmul(&weights, v)
}

/// The row-stochastic N×N weight matrix of the softmax reference.
pub fn softmax_attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let mut scores = ops::matmul_nt(q, k)?;
    let n = scores.shape()[1];
    for row in scores.data_mut().chunks_mut(n) {
        ops::softmax_row_in_place(row);
    }
    Ok(scores)
}

/// Generalized attention over precomputed feature maps, in factored form:
/// the key/value summary `ψ(K)ᵀV` and key sums are built once, then each
/// output row is `φ_i·(ψᵀV) / max(φ_i·Σψ_j, eps)`. No N×N intermediate.
pub fn kernel_attention<T: Scalar>(
    phi_q: &Tensor<T>,
    psi_k: &Tensor<T>,
    v: &Tensor<T>,
    eps: T,
) -> Result<Attended<T>> {
    let (n, df, dv) = check_qkv("kernel_attention", phi_q, psi_k, v)?;
    let kv = ops::matmul_tn(psi_k, v)?; // Df×Dv
    let psum = ops::reduce_sum(psi_k, &[0])?; // Df

    let mut out = Tensor::zeros(&[n, dv]);
    let mut clamped = 0usize;
    {
        let (pd, kvd, sd, od) = (phi_q.data(), kv.data(), psum.data(), out.data_mut());
        for i in 0..n {
            let prow = &pd[i * df..(i + 1) * df];
            let mut denom = T::zero();
            for d in 0..df {
                denom += prow[d] * sd[d];
            }
            if denom < eps {
                denom = eps;
                clamped += 1;
            }
            let orow = &mut od[i * dv..(i + 1) * dv];
            for (d, &p) in prow.iter().enumerate() {
                let kvrow = &kvd[d * dv..(d + 1) * dv];
                for j in 0..dv {
                    orow[j] += p * kvrow[j];
                }
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
    }
    if !out.all_finite() {
        return Err(CoreError::NonFinite { op: "kernel_attention" });
    }
    Ok(Attended { values: out, clamped_rows: clamped })
}

/// O(N) attention with similarity `1 + q̂ᵀk̂` on l2-normalized rows.
///
/// Row i of the output is `(Σ_j v_j + q̂_i·Σ_j k̂_j v_jᵀ) / (N + q̂_i·Σ_j k̂_j)`;
/// both summaries are computed once. The denominator is clamped below at
/// `eps` (it can only degenerate when every k̂ is exactly opposite to q̂).
pub fn linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, eps: T) -> Result<Attended<T>> {
    let (n, dk, dv) = check_qkv("linear_attention", q, k, v)?;
    let qn = ops::l2_normalize_rows(q, eps)?;
    let kn = ops::l2_normalize_rows(k, eps)?;
    let kv = ops::matmul_tn(&kn, v)?; // Dk×Dv
    let ksum = ops::reduce_sum(&kn, &[0])?; // Dk
    let vsum = ops::reduce_sum(v, &[0])?; // Dv

    let n_t = T::from_usize(n).unwrap();
    let mut out = Tensor::zeros(&[n, dv]);
    let mut clamped = 0usize;
    {
        let (qd, kvd, ksd, vsd, od) = (qn.data(), kv.data(), ksum.data(), vsum.data(), out.data_mut());
        for i in 0..n {
            let qrow = &qd[i * dk..(i + 1) * dk];
            let mut denom = n_t;
            for d in 0..dk {
                denom += qrow[d] * ksd[d];
            }
            if denom < eps {
                denom = eps;
                clamped += 1;
            }
            let orow = &mut od[i * dv..(i + 1) * dv];
            orow.copy_from_slice(vsd);
            for (d, &qv) in qrow.iter().enumerate() {
                let kvrow = &kvd[d * dv..(d + 1) * dv];
                for j in 0..dv {
                    orow[j] += qv * kvrow[j];
                }
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
    }
    if !out.all_finite() {
        return Err(CoreError::NonFinite { op: "linear_attention" });
    }
    Ok(Attended { values: out, clamped_rows: clamped })
}

/// O(N²) double-loop evaluation of the normalized `1 + q̂ᵀk̂` similarity.
/// Test oracle for [`linear_attention`]; never used by the library.
pub fn brute_force_linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, dk, dv) = check_qkv("brute_force_linear_attention", q, k, v)?;
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let qrow = &q.data()[i * dk..(i + 1) * dk];
        let qnorm = qrow.iter().map(|&x| x * x).sum::<T>().sqrt();
        let mut wsum = T::zero();
        let mut acc = vec![T::zero(); dv];
        for j in 0..n {
            let krow = &k.data()[j * dk..(j + 1) * dk];
            let knorm = krow.iter().map(|&x| x * x).sum::<T>().sqrt();
            let mut dot = T::zero();
            for d in 0..dk {
                dot += qrow[d] * krow[d];
            }
            let sim = T::one() + dot / (qnorm * knorm);
            wsum += sim;
            for d in 0..dv {
                acc[d] += sim * v.data()[j * dv + d];
            }
        }
        for d in 0..dv {
            out.data_mut()[i * dv + d] = acc[d] / wsum;
        }
    }
    if !out.all_finite() {
        return Err(CoreError::NonFinite { op: "brute_force_linear_attention" });
    }
    Ok(out)
}

/// Multi-head linear attention: per-head projections feed the O(N) kernel,
/// head outputs are concatenated on the feature axis and projected by `W_o`.
pub fn multi_head_linear_attention<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
) -> Result<Attended<T>> {
    if w.heads.len() != cfg.heads {
        return Err(CoreError::Config(format!(
            "weights have {} heads, config says {}",
            w.heads.len(),
            cfg.heads
        )));
    }
    let eps = T::from_f64_lossy(cfg.eps);
    let mut head_outs = Vec::with_capacity(cfg.heads);
    let mut clamped = 0usize;
    for h in 0..cfg.heads {
        let (q, k, v) = project_qkv(x, w, h)?;
        let att = linear_attention(&q, &k, &v, eps)?;
        clamped += att.clamped_rows;
        head_outs.push(att.values);
    }
    let refs: Vec<&Tensor<T>> = head_outs.iter().collect();
    let cat = ops::concat(&refs, 1)?;
    let values = ops::matmul(&cat, &w.w_o.value)?;
    Ok(Attended { values, clamped_rows: clamped })
}

// ---------------------------------------------------------------------------
// Tape-recorded compositions (training path)
// ---------------------------------------------------------------------------

/// Tape version of [`linear_attention`], built from differentiable
/// primitives. Forward values match the pure kernel.
pub fn linear_attention_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    eps: T,
) -> Result<ValueId> {
    let n = tape.value(q).shape()[0];
    let dk = tape.value(q).shape()[1];
    let dv = tape.value(v).shape()[1];

    let qn = tape.l2_normalize_rows(q, eps)?;
    let kn = tape.l2_normalize_rows(k, eps)?;
    let knt = tape.transpose(kn)?;
    let kv = tape.matmul(knt, v)?; // Dk×Dv
    let qkv = tape.matmul(qn, kv)?; // N×Dv

    let vsum = tape.reduce_sum(v, &[0])?;
    let vsum_row = tape.reshape(vsum, &[1, dv])?;
    let ones_col = tape.leaf(Tensor::ones(&[n, 1]), false);
    let vsum_bcast = tape.matmul(ones_col, vsum_row)?; // N×Dv
    let numer = tape.add(qkv, vsum_bcast)?;

    let ksum = tape.reduce_sum(kn, &[0])?;
    let ksum_col = tape.reshape(ksum, &[dk, 1])?;
    let qk = tape.matmul(qn, ksum_col)?; // N×1
    let denom = tape.affine(qk, T::one(), T::from_usize(n).unwrap());
    let inv_denom = tape.recip_clamped(denom, eps);
    let ones_row = tape.leaf(Tensor::ones(&[1, dv]), false);
    let inv_bcast = tape.matmul(inv_denom, ones_row)?; // N×Dv
    tape.mul(numer, inv_bcast)
}

/// Tape version of [`multi_head_linear_attention`].
pub fn multi_head_linear_attention_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    ids: &AttentionWeightIds,
    cfg: &AttentionConfig,
) -> Result<ValueId> {
    let eps = T::from_f64_lossy(cfg.eps);
    let mut head_outs = Vec::with_capacity(ids.heads.len());
    for h in &ids.heads {
        let q = tape.matmul(x, h.w_q)?;
        let k = tape.matmul(x, h.w_k)?;
        let v = tape.matmul(x, h.w_v)?;
        head_outs.push(linear_attention_tape(tape, q, k, v, eps)?);
    }
    let cat = tape.concat(&head_outs, 1)?;
    tape.matmul(cat, ids.w_o)
}

/// Attention over a `C×H×W` feature map with a residual connection: spatial
/// positions become the N = H·W sequence rows (row-major, W fastest), the
/// multi-head kernel runs on them, and the result is reshaped back and added
/// to the input.
pub fn attention_block_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    ids: &AttentionWeightIds,
    cfg: &AttentionConfig,
) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::dim("attention_block", format!("expected C×H×W, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[c, h * w])?;
    let seq = tape.transpose(flat)?; // N×C
    let att = multi_head_linear_attention_tape(tape, seq, ids, cfg)?;
    let back = tape.transpose(att)?;
    let spatial = tape.reshape(back, &[c, h, w])?;
    tape.add(x, spatial)
}

/// Pure forward of [`attention_block_tape`] for evaluation and tests.
pub fn attention_block<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), false);
    let ids = w.bind(&mut tape, false);
    let out = attention_block_tape(&mut tape, xid, &ids, cfg)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| crate::rel_err(x, y))
            .fold(0.0, f64::max)
    }

    fn identity(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    fn weights_with(cfg: &AttentionConfig, make: impl Fn(usize, usize, usize) -> Tensor<f64>) -> AttentionWeights<f64> {
        // make(head, rows, cols) builds each projection; w_o made separately.
        let heads = (0..cfg.heads)
            .map(|h| HeadParams {
                w_q: Param::new(format!("h{h}.wq"), make(h, cfg.model_dim, cfg.head_key_dim)),
                w_k: Param::new(format!("h{h}.wk"), make(h, cfg.model_dim, cfg.head_key_dim)),
                w_v: Param::new(format!("h{h}.wv"), make(h, cfg.model_dim, cfg.head_value_dim)),
            })
            .collect();
        let w_o = Param::new("wo", identity(cfg.concat_dim()));
        AttentionWeights { heads, w_o }
    }

    #[test]
    fn default_head_count_is_four() {
        assert_eq!(DEFAULT_HEADS, 4);
        let cfg = AttentionConfig::new(32, DEFAULT_HEADS).unwrap();
        assert_eq!(cfg.head_key_dim, 8);
        assert_eq!(cfg.concat_dim(), 32);
    }

    #[test]
    fn project_qkv_identity_weights_pass_input_through() {
        let cfg = AttentionConfig::new(3, 1).unwrap();
        let mut w = weights_with(&cfg, |_, r, _c| identity(r));
        w.w_o = Param::new("wo", identity(3));
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let (q, k, v) = project_qkv(&x, &w, 0).unwrap();
        assert_eq!(q, x);
        assert_eq!(k, x);
        assert_eq!(v, x);
    }

    #[test]
    fn project_qkv_zero_input_gives_zero() {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let w = AttentionWeights::<f64>::init(4, &cfg, "a", &mut rng);
        let x = Tensor::<f64>::zeros(&[3, 4]);
        let (q, k, v) = project_qkv(&x, &w, 1).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
        assert!(k.data().iter().all(|&v| v == 0.0));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn project_qkv_matches_matmul_oracle() {
        let cfg = AttentionConfig::new(6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = AttentionWeights::<f64>::init(6, &cfg, "a", &mut rng);
        let x = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let (q, _, _) = project_qkv(&x, &w, 0).unwrap();
        // Triple loop over the same projection.
        for i in 0..5 {
            for j in 0..cfg.head_key_dim {
                let mut acc = 0.0;
                for d in 0..6 {
                    acc += x.at(&[i, d]) * w.heads[0].w_q.value.at(&[d, j]);
                }
                assert!((q.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_attention_single_row_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let q = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng);
        let out = softmax_attention(&q, &k, &v).unwrap();
        assert!(max_rel_err(&out, &v) < 1e-14);
    }

    #[test]
    fn softmax_attention_identical_keys_average_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let krow = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let mut k = Tensor::<f64>::zeros(&[3, 4]);
        for i in 0..3 {
            k.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(krow.data());
        }
        let v = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let out = softmax_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            for d in 0..2 {
                let mean = (v.at(&[0, d]) + v.at(&[1, d]) + v.at(&[2, d])) / 3.0;
                assert!((out.at(&[i, d]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_attention_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let q = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let got = softmax_attention(&q, &k, &v).unwrap();
        let want = oracles::softmax_attention_reference(&q, &k, &v);
        assert!(max_rel_err(&got, &want) < 1e-12);
    }

    #[test]
    fn kernel_attention_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // Nonnegative feature maps, as the contract requires.
        let phi = Tensor::<f64>::rand_unit(&[6, 5], &mut rng).map(|v| v + 0.1);
        let psi = Tensor::<f64>::rand_unit(&[6, 5], &mut rng).map(|v| v + 0.1);
        let v = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        let got = kernel_attention(&phi, &psi, &v, 1e-12).unwrap();
        assert_eq!(got.clamped_rows, 0);
        let want = oracles::kernel_attention_reference(&phi, &psi, &v);
        assert!(max_rel_err(&got.values, &want) < 1e-10);
    }

    #[test]
    fn kernel_attention_basis_features_average_v() {
        // φ and ψ rows all equal to e₁ makes every weight 1/N: output is the mean of V.
        let n = 5;
        let mut phi = Tensor::<f64>::zeros(&[n, 3]);
        let mut psi = Tensor::<f64>::zeros(&[n, 3]);
        for i in 0..n {
            phi.data_mut()[i * 3] = 1.0;
            psi.data_mut()[i * 3] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let v = Tensor::<f64>::randn(&[n, 2], 1.0, &mut rng);
        let out = kernel_attention(&phi, &psi, &v, 1e-12).unwrap();
        let mean = crate::ops::reduce_mean(&v, &[0]).unwrap();
        for i in 0..n {
            for d in 0..2 {
                assert!((out.values.at(&[i, d]) - mean.at(&[d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_attention_single_row_returns_v() {
        let phi = Tensor::from_vec(vec![1, 2], vec![0.3, 0.9]).unwrap();
        let psi = Tensor::from_vec(vec![1, 2], vec![0.7, 0.2]).unwrap();
        let v = Tensor::from_vec(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let out = kernel_attention(&phi, &psi, &v, 1e-12).unwrap();
        assert!(max_rel_err(&out.values, &v) < 1e-12);
    }

    #[test]
    fn linear_attention_single_row_returns_v() {
        let q = Tensor::from_vec(vec![1, 3], vec![0.2, -0.4, 1.0]).unwrap();
        let k = Tensor::from_vec(vec![1, 3], vec![0.9, 0.1, -0.3]).unwrap();
        let v = Tensor::from_vec(vec![1, 2], vec![4.0, -1.5]).unwrap();
        let out = linear_attention(&q, &k, &v, 1e-6).unwrap();
        assert_eq!(out.clamped_rows, 0);
        assert!(max_rel_err(&out.values, &v) < 1e-12);
    }

    #[test]
    fn linear_attention_orthogonal_queries_average_v() {
        // Q lives in dims {0,1}, K in dims {2,3}: q̂·k̂ = 0 so the similarity
        // is uniformly 1 and every output row is the mean of V.
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let n = 6;
        let mut q = Tensor::<f64>::zeros(&[n, 4]);
        let mut k = Tensor::<f64>::zeros(&[n, 4]);
        for i in 0..n {
            q.data_mut()[i * 4] = 1.0 + i as f64;
            q.data_mut()[i * 4 + 1] = -0.5 * i as f64;
            k.data_mut()[i * 4 + 2] = 2.0 - i as f64;
            k.data_mut()[i * 4 + 3] = 0.3 + i as f64;
        }
        let v = Tensor::<f64>::randn(&[n, 3], 1.0, &mut rng);
        let out = linear_attention(&q, &k, &v, 1e-6).unwrap();
        let mean = crate::ops::reduce_mean(&v, &[0]).unwrap();
        for i in 0..n {
            for d in 0..3 {
                assert!((out.values.at(&[i, d]) - mean.at(&[d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_attention_degenerate_denominator_clamps() {
        // 1-d rows normalize to ±1; with the key opposite to the query the
        // similarity is exactly zero, the raw form is 0/0, and the guard
        // must clamp and flag instead of emitting NaN.
        let q = Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap();
        let k = Tensor::from_vec(vec![1, 1], vec![-3.0]).unwrap();
        let v = Tensor::from_vec(vec![1, 2], vec![5.0, -1.0]).unwrap();
        let out = linear_attention(&q, &k, &v, 1e-6).unwrap();
        assert_eq!(out.clamped_rows, 1);
        assert!(out.values.all_finite());
        assert!(brute_force_linear_attention(&q, &k, &v).is_err(), "reference is 0/0 here");
    }

    #[test]
    fn linear_attention_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let q = Tensor::<f64>::randn(&[8, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[8, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[8, 4], 1.0, &mut rng);
        let got = linear_attention(&q, &k, &v, 1e-12).unwrap();
        let want = brute_force_linear_attention(&q, &k, &v).unwrap();
        assert!(max_rel_err(&got.values, &want) < 1e-10);
    }

    #[test]
    fn brute_force_weights_are_bounded_by_cosine_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        for i in 0..5 {
            let qrow = &q.data()[i * 3..(i + 1) * 3];
            let qn = qrow.iter().map(|&x| x * x).sum::<f64>().sqrt();
            for j in 0..5 {
                let krow = &k.data()[j * 3..(j + 1) * 3];
                let kn = krow.iter().map(|&x| x * x).sum::<f64>().sqrt();
                let dot: f64 = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                let sim = 1.0 + dot / (qn * kn);
                assert!((0.0..=2.0).contains(&sim), "sim {sim} out of [0,2]");
            }
        }
    }

    #[test]
    fn brute_force_single_row_returns_v() {
        let q = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let k = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let v = Tensor::from_vec(vec![1, 2], vec![7.0, -3.0]).unwrap();
        let out = brute_force_linear_attention(&q, &k, &v).unwrap();
        assert!(max_rel_err(&out, &v) < 1e-14);
    }

    #[test]
    fn single_head_with_identity_output_projection_is_plain_linear_attention() {
        let cfg = AttentionConfig::new(4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut w = AttentionWeights::<f64>::init(4, &cfg, "a", &mut rng);
        w.w_o = Param::new("wo", identity(4));
        let x = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let got = multi_head_linear_attention(&x, &w, &cfg).unwrap();
        let (q, k, v) = project_qkv(&x, &w, 0).unwrap();
        let want = linear_attention(&q, &k, &v, 1e-6).unwrap();
        assert!(max_rel_err(&got.values, &want.values) < 1e-14);
    }

    #[test]
    fn two_heads_match_manual_composition() {
        let cfg = AttentionConfig::new(6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let w = AttentionWeights::<f64>::init(6, &cfg, "a", &mut rng);
        let x = Tensor::<f64>::randn(&[7, 6], 1.0, &mut rng);
        let got = multi_head_linear_attention(&x, &w, &cfg).unwrap();

        let (q0, k0, v0) = project_qkv(&x, &w, 0).unwrap();
        let (q1, k1, v1) = project_qkv(&x, &w, 1).unwrap();
        let h0 = linear_attention(&q0, &k0, &v0, 1e-6).unwrap();
        let h1 = linear_attention(&q1, &k1, &v1, 1e-6).unwrap();
        let cat = crate::ops::concat(&[&h0.values, &h1.values], 1).unwrap();
        let want = crate::ops::matmul(&cat, &w.w_o.value).unwrap();
        assert!(max_rel_err(&got.values, &want) < 1e-14);
    }

    #[test]
    fn tape_forward_matches_pure_kernel() {
        let cfg = AttentionConfig::new(8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let w = AttentionWeights::<f64>::init(8, &cfg, "a", &mut rng);
        let x = Tensor::<f64>::randn(&[9, 8], 1.0, &mut rng);
        let pure = multi_head_linear_attention(&x, &w, &cfg).unwrap();

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), false);
        let ids = w.bind(&mut tape, false);
        let out = multi_head_linear_attention_tape(&mut tape, xid, &ids, &cfg).unwrap();
        assert!(max_rel_err(tape.value(out), &pure.values) < 1e-12);
    }

    #[test]
    fn attention_block_zero_weights_is_identity() {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let heads = (0..2)
            .map(|h| HeadParams {
                w_q: Param::new(format!("h{h}.wq"), Tensor::<f64>::zeros(&[4, 2])),
                w_k: Param::new(format!("h{h}.wk"), Tensor::zeros(&[4, 2])),
                w_v: Param::new(format!("h{h}.wv"), Tensor::zeros(&[4, 2])),
            })
            .collect();
        let w = AttentionWeights { heads, w_o: Param::new("wo", Tensor::zeros(&[4, 4])) };
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x = Tensor::<f64>::rand_unit(&[4, 3, 3], &mut rng);
        let out = attention_block(&x, &w, &cfg).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn attention_block_single_pixel_adds_projected_value() {
        // With one spatial position the attention weight is 1, so the block
        // output is input + W_o-projected V row.
        let cfg = AttentionConfig::new(4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let w = AttentionWeights::<f64>::init(4, &cfg, "a", &mut rng);
        let x = Tensor::<f64>::rand_unit(&[4, 1, 1], &mut rng);
        let out = attention_block(&x, &w, &cfg).unwrap();

        let seq = x.reshaped(&[4, 1]).unwrap();
        let seq = crate::ops::transpose(&seq).unwrap(); // 1×4
        let (_, _, v) = project_qkv(&seq, &w, 0).unwrap();
        let proj = crate::ops::matmul(&v, &w.w_o.value).unwrap(); // 1×4
        for c in 0..4 {
            let want = x.at(&[c, 0, 0]) + proj.at(&[0, c]);
            assert!((out.at(&[c, 0, 0]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_block_is_equivariant_to_spatial_permutation() {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let w = AttentionWeights::<f64>::init(4, &cfg, "a", &mut rng);
        let x = Tensor::<f64>::rand_unit(&[4, 2, 3], &mut rng);

        // Reverse the 6 spatial sites in every channel.
        let mut xp = Tensor::<f64>::zeros(&[4, 2, 3]);
        for c in 0..4 {
            for s in 0..6 {
                xp.data_mut()[c * 6 + s] = x.data()[c * 6 + (5 - s)];
            }
        }
        let out = attention_block(&x, &w, &cfg).unwrap();
        let out_p = attention_block(&xp, &w, &cfg).unwrap();
        for c in 0..4 {
            for s in 0..6 {
                let a = out_p.data()[c * 6 + s];
                let b = out.data()[c * 6 + (5 - s)];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
