//! Independent reference implementations used by the test suites.
//!
//! Everything here is written as direct scalar loops over the defining
//! formulas, deliberately sharing no code with the production kernels it
//! checks. Nothing in this module is used by the library itself.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Double-loop softmax attention: per query row, weights are exponentials of
/// raw dot products normalized over all keys, applied to value rows.
pub fn softmax_attention_reference<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let n = q.shape()[0];
    let dk = q.shape()[1];
    let dv = v.shape()[1];
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let mut weights = vec![T::zero(); n];
        let mut wsum = T::zero();
        for j in 0..n {
            let mut dot = T::zero();
            for d in 0..dk {
                dot += q.data()[i * dk + d] * k.data()[j * dk + d];
            }
            weights[j] = dot.exp();
            wsum += weights[j];
        }
        for j in 0..n {
            let w = weights[j] / wsum;
            for d in 0..dv {
                out.data_mut()[i * dv + d] += w * v.data()[j * dv + d];
            }
        }
    }
    out
}

/// Double-loop generalized kernel attention: weights are feature-map dot
/// products `φ(q_i)·ψ(k_j)`, normalized per query row.
pub fn kernel_attention_reference<T: Scalar>(phi_q: &Tensor<T>, psi_k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let n = phi_q.shape()[0];
    let df = phi_q.shape()[1];
    let dv = v.shape()[1];
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let mut wsum = T::zero();
        let mut acc = vec![T::zero(); dv];
        for j in 0..n {
            let mut sim = T::zero();
            for d in 0..df {
                sim += phi_q.data()[i * df + d] * psi_k.data()[j * df + d];
            }
            wsum += sim;
            for d in 0..dv {
                acc[d] += sim * v.data()[j * dv + d];
            }
        }
        for d in 0..dv {
            out.data_mut()[i * dv + d] = acc[d] / wsum;
        }
    }
    out
}

/// Scalar structural-similarity reference for one channel: luminance,
/// contrast and structure comparisons multiplied together, with population
/// statistics and the C₃ = C₂/2 convention.
pub fn ssim_channel_reference(x: &[f64], y: &[f64], peak: f64) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    for i in 0..x.len() {
        mean_x += x[i];
        mean_y += y[i];
    }
    mean_x /= n;
    mean_y /= n;

    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mean_x;
        let dy = y[i] - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    var_x /= n;
    var_y /= n;
    cov /= n;

    let sd_x = var_x.sqrt();
    let sd_y = var_y.sqrt();
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let c3 = c2 / 2.0;

    let luminance = (2.0 * mean_x * mean_y + c1) / (mean_x * mean_x + mean_y * mean_y + c1);
    let contrast = (2.0 * sd_x * sd_y + c2) / (var_x + var_y + c2);
    let structure = (cov + c3) / (sd_x * sd_y + c3);
    luminance * contrast * structure
}
