//! Convolutional classifier head.
//!
//! Four parallel 1-D convolutions (widths 3..=6) run along the token axis of
//! a fused representation. Each branch is followed by batch normalization,
//! ReLU and a global max-pool; the pooled vectors are concatenated, passed
//! through dropout and mapped to label logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CbrError;
use crate::par_map;
use crate::tensor::{axpy, dot, Matrix};

pub const FILTER_WIDTHS: [usize; 4] = [3, 4, 5, 6];
pub const DEFAULT_FILTERS: usize = 256;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, no dropout.
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBranch {
    pub width: usize,
    /// filters × (width · in_dim)
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub id: usize,
    pub in_dim: usize,
    pub filters: usize,
    pub dropout: f64,
    pub branches: Vec<ConvBranch>,
    /// labels × (4 · filters)
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
    pub num_labels: usize,
}

/// Batch statistics observed in one training forward pass, per branch:
/// (mean, unbiased variance).
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

#[derive(Debug, Clone)]
struct BranchCache {
    positions: usize,
    /// per sample: positions × filters
    xhat: Vec<Vec<f64>>,
    /// per sample: positions × filters, post-BN pre-ReLU
    z: Vec<Vec<f64>>,
    /// per sample: filters
    argmax: Vec<Vec<usize>>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    branches: Vec<BranchCache>,
    /// per sample: pooled features after dropout
    features: Vec<Vec<f64>>,
    /// per sample: dropout multipliers (empty when no dropout)
    dropout: Vec<Vec<f64>>,
}

pub struct HeadOutput {
    pub logits: Vec<Vec<f64>>,
    pub cache: HeadCache,
    pub stats: BatchStats,
}

fn conv_positions(seq_len: usize, width: usize) -> usize {
    seq_len.max(width) - width + 1
}

/// Input rows `p..p+width` flattened, zero-padded past the end.
fn window<'a>(input: &'a Matrix, p: usize, width: usize, scratch: &'a mut Vec<f64>) -> &'a [f64] {
    let d = input.cols;
    if p + width <= input.rows {
        &input.data[p * d..(p + width) * d]
    } else {
        scratch.clear();
        scratch.resize(width * d, 0.0);
        let avail = input.rows.saturating_sub(p);
        scratch[..avail * d].copy_from_slice(&input.data[p * d..(p + avail) * d]);
        scratch
    }
}

impl ConvBranch {
    /// Raw convolution output, positions × filters.
    pub fn convolve(&self, input: &Matrix, filters: usize) -> Vec<f64> {
        let span = self.width * input.cols;
        let positions = conv_positions(input.rows, self.width);
        let mut out = vec![0.0; positions * filters];
        let mut scratch = Vec::new();
        for p in 0..positions {
            let win = window(input, p, self.width, &mut scratch);
            for f in 0..filters {
                out[p * filters + f] = self.b[f] + dot(&self.w[f * span..(f + 1) * span], win);
            }
        }
        out
    }
}

impl ClassifierHead {
    pub fn new(id: usize, in_dim: usize, filters: usize, num_labels: usize, dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches = FILTER_WIDTHS
            .iter()
            .map(|&width| {
                let a = (1.0 / (width * in_dim) as f64).sqrt();
                ConvBranch {
                    width,
                    w: (0..filters * width * in_dim).map(|_| rng.gen_range(-a..a)).collect(),
                    b: vec![0.0; filters],
                    gamma: vec![1.0; filters],
                    beta: vec![0.0; filters],
                    running_mean: vec![0.0; filters],
                    running_var: vec![1.0; filters],
                }
            })
            .collect();
        let feat = FILTER_WIDTHS.len() * filters;
        let a = (1.0 / feat as f64).sqrt();
        Self {
            id,
            in_dim,
            filters,
            dropout,
            branches,
            out_w: (0..num_labels * feat).map(|_| rng.gen_range(-a..a)).collect(),
            out_b: vec![0.0; num_labels],
            num_labels,
        }
    }

    pub fn feature_dim(&self) -> usize {
        FILTER_WIDTHS.len() * self.filters
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut v: Vec<&Vec<f64>> = Vec::new();
        for br in &self.branches {
            v.extend([&br.w, &br.b, &br.gamma, &br.beta]);
        }
        v.extend([&self.out_w, &self.out_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = Vec::new();
        for br in &mut self.branches {
            v.push(&mut br.w);
            v.push(&mut br.b);
            v.push(&mut br.gamma);
            v.push(&mut br.beta);
        }
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for br in &self.branches {
            for p in ["conv_w", "conv_b", "bn_gamma", "bn_beta"] {
                v.push(format!("head{}.w{}.{p}", self.id, br.width));
            }
        }
        v.push(format!("head{}.out_w", self.id));
        v.push(format!("head{}.out_b", self.id));
        v
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        for (br, (mean, var)) in self.branches.iter_mut().zip(stats) {
            for f in 0..self.filters {
                br.running_mean[f] = (1.0 - momentum) * br.running_mean[f] + momentum * mean[f];
                br.running_var[f] = (1.0 - momentum) * br.running_var[f] + momentum * var[f];
            }
        }
    }

    pub fn forward(
        &self,
        inputs: &[&Matrix],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadOutput, CbrError> {
        let batch = inputs.len();
        let filters = self.filters;
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        let mut stats = Vec::with_capacity(self.branches.len());
        let mut features = vec![vec![0.0; self.feature_dim()]; batch];

        for (bi, br) in self.branches.iter().enumerate() {
            let conv: Vec<Vec<f64>> = par_map(inputs, |x| br.convolve(x, filters));
            let positions = conv_positions(inputs[0].rows, br.width);
            let count = (batch * positions) as f64;

            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; filters];
                    for y in &conv {
                        for p in 0..positions {
                            axpy(1.0, &y[p * filters..(p + 1) * filters], &mut mean);
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count);
                    let mut var = vec![0.0; filters];
                    for y in &conv {
                        for p in 0..positions {
                            for f in 0..filters {
                                let c = y[p * filters + f] - mean[f];
                                var[f] += c * c;
                            }
                        }
                    }
                    let unbiased: Vec<f64> = var
                        .iter()
                        .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
                        .collect();
                    var.iter_mut().for_each(|v| *v /= count);
                    stats.push((mean.clone(), unbiased));
                    (mean, var)
                }
                Mode::Infer => (br.running_mean.clone(), br.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

            let mut xhat_all = Vec::with_capacity(batch);
            let mut z_all = Vec::with_capacity(batch);
            let mut argmax_all = Vec::with_capacity(batch);
            for (s, y) in conv.into_iter().enumerate() {
                let mut xhat = y;
                let mut z = vec![0.0; xhat.len()];
                let mut best = vec![f64::NEG_INFINITY; filters];
                let mut arg = vec![0usize; filters];
                for p in 0..positions {
                    for f in 0..filters {
                        let i = p * filters + f;
                        xhat[i] = (xhat[i] - mean[f]) * inv_std[f];
                        z[i] = br.gamma[f] * xhat[i] + br.beta[f];
                        let r = z[i].max(0.0);
                        if r > best[f] {
                            best[f] = r;
                            arg[f] = p;
                        }
                    }
                }
                if best.iter().any(|v| !v.is_finite()) {
                    return Err(CbrError::NonFinite { head: self.id });
                }
                features[s][bi * filters..(bi + 1) * filters].copy_from_slice(&best);
                xhat_all.push(xhat);
                z_all.push(z);
                argmax_all.push(arg);
            }
            branch_caches.push(BranchCache {
                positions,
                xhat: xhat_all,
                z: z_all,
                argmax: argmax_all,
                inv_std,
            });
        }

        let mut dropout = Vec::new();
        if mode == Mode::Train && self.dropout > 0.0 {
            if let Some(rng) = rng {
                let keep = 1.0 - self.dropout;
                for feat in features.iter_mut() {
                    let mask: Vec<f64> = (0..feat.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    feat.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    dropout.push(mask);
                }
            }
        }

        let fd = self.feature_dim();
        let logits: Vec<Vec<f64>> = features
            .iter()
            .map(|h| {
                (0..self.num_labels)
                    .map(|c| self.out_b[c] + dot(&self.out_w[c * fd..(c + 1) * fd], h))
                    .collect::<Vec<f64>>()
            })
            .collect();
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CbrError::NonFinite { head: self.id });
        }
        Ok(HeadOutput {
            logits,
            cache: HeadCache {
                branches: branch_caches,
                features,
                dropout,
            },
            stats,
        })
    }

    /// Training-mode backward pass. Returns parameter gradients in the order
    /// of [`ClassifierHead::params`] and the gradient w.r.t. each input.
    pub fn backward(
        &self,
        inputs: &[&Matrix],
        cache: &HeadCache,
        dlogits: &[Vec<f64>],
    ) -> (Vec<Vec<f64>>, Vec<Matrix>) {
        let batch = inputs.len();
        let filters = self.filters;
        let fd = self.feature_dim();
        let mut d_out_w = vec![0.0; self.out_w.len()];
        let mut d_out_b = vec![0.0; self.num_labels];
        let mut dfeat = vec![vec![0.0; fd]; batch];
        for s in 0..batch {
            for c in 0..self.num_labels {
                let g = dlogits[s][c];
                d_out_b[c] += g;
                axpy(g, &cache.features[s], &mut d_out_w[c * fd..(c + 1) * fd]);
                axpy(g, &self.out_w[c * fd..(c + 1) * fd], &mut dfeat[s]);
            }
            if let Some(mask) = cache.dropout.get(s) {
                dfeat[s].iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
        }

        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut dinputs: Vec<Matrix> = inputs.iter().map(|x| Matrix::zeros(x.rows, x.cols)).collect();
        for (bi, br) in self.branches.iter().enumerate() {
            let bc = &cache.branches[bi];
            let positions = bc.positions;
            let count = (batch * positions) as f64;
            // max-pool and ReLU: gradient reaches only the winning position
            let mut dz: Vec<Vec<f64>> = vec![vec![0.0; positions * filters]; batch];
            for s in 0..batch {
                for f in 0..filters {
                    let p = bc.argmax[s][f];
                    let i = p * filters + f;
                    if bc.z[s][i] > 0.0 {
                        dz[s][i] = dfeat[s][bi * filters + f];
                    }
                }
            }
            let mut dgamma = vec![0.0; filters];
            let mut dbeta = vec![0.0; filters];
            for s in 0..batch {
                for i in 0..positions * filters {
                    let f = i % filters;
                    dgamma[f] += dz[s][i] * bc.xhat[s][i];
                    dbeta[f] += dz[s][i];
                }
            }
            // batch-norm backward: dy = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let mut sum_dxhat = vec![0.0; filters];
            let mut sum_dxhat_xhat = vec![0.0; filters];
            for s in 0..batch {
                for i in 0..positions * filters {
                    let f = i % filters;
                    let dx = dz[s][i] * br.gamma[f];
                    sum_dxhat[f] += dx;
                    sum_dxhat_xhat[f] += dx * bc.xhat[s][i];
                }
            }
            let dy: Vec<Vec<f64>> = (0..batch)
                .map(|s| {
                    (0..positions * filters)
                        .map(|i| {
                            let f = i % filters;
                            let dx = dz[s][i] * br.gamma[f];
                            bc.inv_std[f] / count
                                * (count * dx - sum_dxhat[f] - bc.xhat[s][i] * sum_dxhat_xhat[f])
                        })
                        .collect()
                })
                .collect();

            let span = br.width * self.in_dim;
            let per_sample: Vec<(Vec<f64>, Vec<f64>, Matrix)> = par_map(
                &(0..batch).collect::<Vec<_>>(),
                |&s| {
                    let x = inputs[s];
                    let mut dw = vec![0.0; filters * span];
                    let mut db = vec![0.0; filters];
                    let mut dwin_full = Matrix::zeros(x.rows.max(br.width) + br.width, x.cols);
                    let mut scratch = Vec::new();
                    let mut dwin = vec![0.0; span];
                    for p in 0..positions {
                        let win = window(x, p, br.width, &mut scratch);
                        dwin.fill(0.0);
                        for f in 0..filters {
                            let g = dy[s][p * filters + f];
                            if g == 0.0 {
                                continue;
                            }
                            db[f] += g;
                            axpy(g, win, &mut dw[f * span..(f + 1) * span]);
                            axpy(g, &br.w[f * span..(f + 1) * span], &mut dwin);
                        }
                        let d = x.cols;
                        axpy(1.0, &dwin, &mut dwin_full.data[p * d..p * d + span]);
                    }
                    dwin_full.data.truncate(x.rows * x.cols);
                    dwin_full.rows = x.rows;
                    (dw, db, dwin_full)
                },
            );
            let mut dw = vec![0.0; filters * span];
            let mut db = vec![0.0; filters];
            for (s, (w, b, dx)) in per_sample.into_iter().enumerate() {
                axpy(1.0, &w, &mut dw);
                axpy(1.0, &b, &mut db);
                axpy(1.0, &dx.data, &mut dinputs[s].data);
            }
            grads.extend([dw, db, dgamma, dbeta]);
        }
        grads.push(d_out_w);
        grads.push(d_out_b);
        (grads, dinputs)
    }
}
