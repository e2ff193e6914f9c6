//! Task descriptors: softmax location weights over candidate branches and
//! the gated mixture of branch predictions.

use serde::{Deserialize, Serialize};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Gradient with respect to softmax logits given the gradient with respect
/// to its output probabilities `p`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Location weights `z = softmax(alpha)`.
pub fn descriptor_weights(alpha: &[f64]) -> Vec<f64> {
    softmax(alpha)
}

/// `y = Y z`, where `branch_probs[i]` is column `i` of `Y`.
pub fn mix(branch_probs: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let n = branch_probs.first().map_or(0, Vec::len);
    let mut y = vec![0.0; n];
    for (col, &w) in branch_probs.iter().zip(z) {
        for (yc, pc) in y.iter_mut().zip(col) {
            *yc += w * pc;
        }
    }
    y
}

/// Gradient of a loss with respect to descriptor logits `alpha`, holding the
/// branch probabilities fixed. `grad_mixed` is the loss gradient with
/// respect to the mixed prediction.
pub fn alpha_gradient(z: &[f64], branch_probs: &[Vec<f64>], grad_mixed: &[f64]) -> Vec<f64> {
    let grad_z: Vec<f64> = branch_probs
        .iter()
        .map(|p| p.iter().zip(grad_mixed).map(|(a, b)| a * b).sum())
        .collect::<Vec<f64>>();
    // z_i * sum_j z_j (g_i - g_j): the same quantity as the softmax backward
    // pass, but exactly zero when every branch receives the same gradient.
    z.iter()
        .zip(&grad_z)
        .map(|(zi, gi)| zi * z.iter().zip(&grad_z).map(|(zj, gj)| zj * (gi - gj)).sum::<f64>())
        .collect()
}

/// First index of the maximum; ties go to the smaller index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Branch chosen for each task: `argmax_i z_{i,j}`.
pub fn finalize_branches(alphas: &[Vec<f64>]) -> Vec<usize> {
    alphas.iter().map(|a| argmax(&descriptor_weights(a))).collect()
}

/// Learnable branch-location logits for one auxiliary task, optionally
/// frozen to a single branch after finalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub alpha: Vec<f64>,
    pub fixed: Option<usize>,
}

impl TaskDescriptor {
    pub fn uniform(n_taps: usize) -> Self {
        TaskDescriptor {
            alpha: vec![0.0; n_taps],
            fixed: None,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match self.fixed {
            Some(i) => {
                let mut z = vec![0.0; self.alpha.len()];
                z[i] = 1.0;
                z
            }
            None => descriptor_weights(&self.alpha),
        }
    }

    pub fn finalize(&mut self) -> usize {
        let i = argmax(&descriptor_weights(&self.alpha));
        self.fixed = Some(i);
        i
    }
}
