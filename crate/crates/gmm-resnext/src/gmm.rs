//! Diagonal-covariance Gaussian mixture models trained by EM, and the
//! log Gaussian probability (LGP) features derived from them.
//!
//! The LGP feature of a frame x is, per component i,
//! `y_i = -1/2 x' S_i^-1 x + x' S_i^-1 mu_i` (constant term dropped),
//! followed by per-component mean/std normalization over the training pool.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::features::{AcousticFeatureMatrix, FeatureKind};

pub const STD_FLOOR: f64 = 1e-6;
pub const VARIANCE_FLOOR_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LgpNormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DiagGmm {
    pub weights: Array1<f64>,
    /// N x D component means.
    pub means: Array2<f64>,
    /// N x D diagonal covariances, floored at training time.
    pub variances: Array2<f64>,
    pub norm_stats: Option<LgpNormStats>,
}

impl DiagGmm {
    pub fn n_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Full log-density of x under component i (constant terms included).
    pub fn component_log_density(&self, i: usize, x: ArrayView1<f64>) -> f64 {
        let d = self.dim() as f64;
        let mut log_det = 0.0;
        let mut quad = 0.0;
        for (j, &v) in x.iter().enumerate() {
            let var = self.variances[[i, j]];
            log_det += var.ln();
            let diff = v - self.means[[i, j]];
            quad += diff * diff / var;
        }
        -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * quad
    }

    /// Mixture log-likelihood of a single frame.
    pub fn frame_log_likelihood(&self, x: ArrayView1<f64>) -> f64 {
        let logs: Vec<f64> = (0..self.n_components())
            .map(|i| self.weights[i].ln() + self.component_log_density(i, x))
            .collect();
        log_sum_exp(&logs)
    }

    /// Mean per-frame log-likelihood over a frame matrix.
    pub fn mean_log_likelihood(&self, frames: ArrayView2<f64>) -> f64 {
        let mut acc = 0.0;
        for row in frames.rows() {
            acc += self.frame_log_likelihood(row);
        }
        acc / frames.nrows() as f64
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Result of EM training: the model plus the mean per-frame log-likelihood
/// recorded at every E-step and once after the final M-step.
pub struct EmOutcome {
    pub gmm: DiagGmm,
    pub log_likelihoods: Vec<f64>,
}

/// Seeded k-means++ center selection.
fn kmeans_pp_centers(
    frames: ArrayView2<f64>,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<usize> {
    let n = frames.nrows();
    let mut centers = Vec::with_capacity(k);
    centers.push(rng.gen_range(0..n));
    let mut min_d2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = frames.row(*centers.last().unwrap());
        for (i, row) in frames.rows().into_iter().enumerate() {
            let mut d2 = 0.0;
            for (a, b) in row.iter().zip(last.iter()) {
                let diff = a - b;
                d2 += diff * diff;
            }
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
        let total: f64 = min_d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d2) in min_d2.iter().enumerate() {
                acc += d2;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(next);
    }
    centers
}

/// Train a diagonal GMM for `n_iters` EM iterations. Initialization is seeded
/// k-means++ on a frame subsample followed by one hard-assignment M-step.
/// Deterministic in (frames, n_components, n_iters, seed).
pub fn em_train(
    frames: ArrayView2<f64>,
    n_components: usize,
    n_iters: usize,
    seed: u64,
) -> Result<EmOutcome> {
    let n = frames.nrows();
    let d = frames.ncols();
    if n < 10 * n_components {
        return Err(Error::NotEnoughData(format!(
            "{n} frames for {n_components} components (need >= {})",
            10 * n_components
        )));
    }
    if n_iters < 1 {
        return Err(Error::Config("n_iters must be >= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // global per-dimension stats for the variance floor and reinitialization
    let global_mean: Array1<f64> = frames.mean_axis(ndarray::Axis(0)).unwrap();
    let mut global_var = Array1::<f64>::zeros(d);
    for row in frames.rows() {
        for (j, &v) in row.iter().enumerate() {
            let diff = v - global_mean[j];
            global_var[j] += diff * diff;
        }
    }
    global_var.mapv_inplace(|v| (v / n as f64).max(1e-12));
    let floor: Array1<f64> = global_var.mapv(|v| v * VARIANCE_FLOOR_SCALE);

    // k-means++ on a subsample
    let max_init = 20_000.min(n);
    let sub_idx: Vec<usize> = if max_init < n {
        rand::seq::index::sample(&mut rng, n, max_init).into_vec()
    } else {
        (0..n).collect()
    };
    let sub = frames.select(ndarray::Axis(0), &sub_idx);
    let center_idx = kmeans_pp_centers(sub.view(), n_components, &mut rng);
    let centers: Vec<ArrayView1<f64>> = center_idx.iter().map(|&i| sub.row(i)).collect();

    // one hard-assignment M-step over all frames
    let mut counts = vec![0usize; n_components];
    let mut sum = Array2::<f64>::zeros((n_components, d));
    let mut sumsq = Array2::<f64>::zeros((n_components, d));
    for row in frames.rows() {
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (i, c) in centers.iter().enumerate() {
            let mut d2 = 0.0;
            for (a, b) in row.iter().zip(c.iter()) {
                let diff = a - b;
                d2 += diff * diff;
            }
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        counts[best] += 1;
        for (j, &v) in row.iter().enumerate() {
            sum[[best, j]] += v;
            sumsq[[best, j]] += v * v;
        }
    }
    let mut weights = Array1::<f64>::zeros(n_components);
    let mut means = Array2::<f64>::zeros((n_components, d));
    let mut variances = Array2::<f64>::zeros((n_components, d));
    for i in 0..n_components {
        if counts[i] == 0 {
            weights[i] = 1.0 / n as f64;
            means.row_mut(i).assign(&centers[i]);
            variances.row_mut(i).assign(&global_var);
            continue;
        }
        let c = counts[i] as f64;
        weights[i] = c / n as f64;
        for j in 0..d {
            let m = sum[[i, j]] / c;
            means[[i, j]] = m;
            variances[[i, j]] = (sumsq[[i, j]] / c - m * m).max(floor[j]);
        }
    }
    let wsum: f64 = weights.sum();
    weights.mapv_inplace(|w| w / wsum);

    let mut gmm = DiagGmm {
        weights,
        means,
        variances,
        norm_stats: None,
    };

    let mut log_likelihoods = Vec::with_capacity(n_iters + 1);
    for _ in 0..n_iters {
        // E-step in the log domain, fixed accumulation order
        let mut ll = 0.0;
        let mut nk = vec![0.0f64; n_components];
        let mut sum = Array2::<f64>::zeros((n_components, d));
        let mut sumsq = Array2::<f64>::zeros((n_components, d));
        let log_consts: Vec<f64> = (0..n_components)
            .map(|i| {
                let mut log_det = 0.0;
                for j in 0..d {
                    log_det += gmm.variances[[i, j]].ln();
                }
                gmm.weights[i].ln()
                    - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * log_det
            })
            .collect();
        let mut logp = vec![0.0f64; n_components];
        for row in frames.rows() {
            for i in 0..n_components {
                let mut quad = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let diff = v - gmm.means[[i, j]];
                    quad += diff * diff / gmm.variances[[i, j]];
                }
                logp[i] = log_consts[i] - 0.5 * quad;
            }
            let lse = log_sum_exp(&logp);
            ll += lse;
            for i in 0..n_components {
                let r = (logp[i] - lse).exp();
                nk[i] += r;
                for (j, &v) in row.iter().enumerate() {
                    sum[[i, j]] += r * v;
                    sumsq[[i, j]] += r * v * v;
                }
            }
        }
        log_likelihoods.push(ll / n as f64);

        // M-step with per-iteration variance flooring
        for i in 0..n_components {
            if nk[i] <= f64::EPSILON * n as f64 {
                // degenerate component: reseed from the frame farthest from
                // the global mean, with global variance
                eprintln!("gmm: reinitializing degenerate component {i}");
                let mut far = 0;
                let mut far_d2 = -1.0;
                for (t, row) in frames.rows().into_iter().enumerate() {
                    let mut d2 = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        let diff = v - global_mean[j];
                        d2 += diff * diff;
                    }
                    if d2 > far_d2 {
                        far_d2 = d2;
                        far = t;
                    }
                }
                gmm.weights[i] = 1.0 / n as f64;
                gmm.means.row_mut(i).assign(&frames.row(far));
                gmm.variances.row_mut(i).assign(&global_var);
                continue;
            }
            gmm.weights[i] = nk[i] / n as f64;
            for j in 0..d {
                let m = sum[[i, j]] / nk[i];
                gmm.means[[i, j]] = m;
                gmm.variances[[i, j]] = (sumsq[[i, j]] / nk[i] - m * m).max(floor[j]);
            }
        }
        let wsum: f64 = gmm.weights.sum();
        gmm.weights.mapv_inplace(|w| w / wsum);
    }
    log_likelihoods.push(gmm.mean_log_likelihood(frames));

    Ok(EmOutcome {
        gmm,
        log_likelihoods,
    })
}

/// LGP score of one frame against every component, constant term dropped.
pub fn lgp_frame(gmm: &DiagGmm, x: ArrayView1<f64>) -> Array1<f64> {
    assert_eq!(x.len(), gmm.dim(), "frame dimension mismatch");
    let mut y = Array1::<f64>::zeros(gmm.n_components());
    for i in 0..gmm.n_components() {
        let mut acc = 0.0;
        for (j, &v) in x.iter().enumerate() {
            let inv_var = 1.0 / gmm.variances[[i, j]];
            acc += (-0.5 * v * v + v * gmm.means[[i, j]]) * inv_var;
        }
        y[i] = acc;
    }
    y
}

/// Framewise LGP extraction: T x D MFCC in, T x N LGP out, frame order kept.
pub fn lgp_extract(gmm: &DiagGmm, feat: &AcousticFeatureMatrix) -> Result<AcousticFeatureMatrix> {
    if feat.feature_kind != FeatureKind::Mfcc {
        return Err(Error::DimMismatch(
            "lgp_extract expects MFCC input".into(),
        ));
    }
    if feat.dim() != gmm.dim() {
        return Err(Error::DimMismatch(format!(
            "feature dim {} vs gmm dim {}",
            feat.dim(),
            gmm.dim()
        )));
    }
    let t = feat.n_frames();
    let n = gmm.n_components();
    // precomputed 1/var and mu/var make the frame loop a pair of dot products
    let inv_var = gmm.variances.mapv(|v| 1.0 / v);
    let mu_over_var = &gmm.means * &inv_var;
    let mut out = Array2::<f32>::zeros((t, n));
    let mut x = vec![0.0f64; feat.dim()];
    for ti in 0..t {
        for (j, v) in x.iter_mut().enumerate() {
            *v = feat.data[[ti, j]] as f64;
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (j, &v) in x.iter().enumerate() {
                acc += -0.5 * v * v * inv_var[[i, j]] + v * mu_over_var[[i, j]];
            }
            out[[ti, i]] = acc as f32;
        }
    }
    Ok(AcousticFeatureMatrix {
        data: out,
        frame_shift: feat.frame_shift,
        feature_kind: FeatureKind::Lgp,
    })
}

/// One-pass mean/std of LGP scores pooled over all frames of the training
/// features. Population convention; std floored at `STD_FLOOR`.
pub fn fit_norm_stats<'a>(
    gmm: &DiagGmm,
    training_feats: impl IntoIterator<Item = &'a AcousticFeatureMatrix>,
) -> Result<LgpNormStats> {
    let n = gmm.n_components();
    let mut count = 0usize;
    let mut sum = Array1::<f64>::zeros(n);
    let mut sumsq = Array1::<f64>::zeros(n);
    for feat in training_feats {
        let lgp = lgp_extract(gmm, feat)?;
        for row in lgp.data.rows() {
            count += 1;
            for (i, &v) in row.iter().enumerate() {
                let v = v as f64;
                sum[i] += v;
                sumsq[i] += v * v;
            }
        }
    }
    if count == 0 {
        return Err(Error::NotEnoughData("empty training stream".into()));
    }
    let c = count as f64;
    let mean = sum.mapv(|s| s / c);
    let std = (0..n)
        .map(|i| ((sumsq[i] / c - mean[i] * mean[i]).max(0.0)).sqrt().max(STD_FLOOR))
        .collect::<Array1<f64>>();
    Ok(LgpNormStats { mean, std })
}

/// Per-column affine normalization of an LGP matrix.
pub fn lgp_normalize(feat: &AcousticFeatureMatrix, stats: &LgpNormStats) -> AcousticFeatureMatrix {
    assert_eq!(feat.dim(), stats.mean.len(), "stats width mismatch");
    let mut out = feat.data.clone();
    for (i, mut col) in out.columns_mut().into_iter().enumerate() {
        let m = stats.mean[i];
        let s = stats.std[i];
        col.mapv_inplace(|v| ((v as f64 - m) / s) as f32);
    }
    AcousticFeatureMatrix {
        data: out,
        frame_shift: feat.frame_shift,
        feature_kind: feat.feature_kind,
    }
}

const GMM_MAGIC: &[u8; 8] = b"GMMv1\0\0\0";

/// GMM file: magic, N, D, config hash, variance floor scale, stats flag,
/// then f64 arrays (weights, means, variances, norm mean, norm std), LE.
pub fn write_gmm(path: &Path, gmm: &DiagGmm, config_hash: u64) -> Result<()> {
    let n = gmm.n_components();
    let d = gmm.dim();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(GMM_MAGIC);
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&config_hash.to_le_bytes());
    bytes.extend_from_slice(&VARIANCE_FLOOR_SCALE.to_le_bytes());
    bytes.push(gmm.norm_stats.is_some() as u8);
    bytes.extend_from_slice(&[0u8; 7]);
    let mut push_all = |vals: &mut dyn Iterator<Item = f64>| {
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    push_all(&mut gmm.weights.iter().cloned());
    push_all(&mut gmm.means.iter().cloned());
    push_all(&mut gmm.variances.iter().cloned());
    if let Some(stats) = &gmm.norm_stats {
        push_all(&mut stats.mean.iter().cloned());
        push_all(&mut stats.std.iter().cloned());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_gmm(path: &Path, expected_hash: Option<u64>) -> Result<DiagGmm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 40 || &bytes[..8] != GMM_MAGIC {
        return Err(fail("bad magic"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let hash = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if let Some(expected) = expected_hash {
        if hash != expected {
            return Err(Error::ConfigHashMismatch {
                path: path.to_path_buf(),
            });
        }
    }
    let has_stats = bytes[32] != 0;
    let mut off = 40;
    let mut take = |count: usize| -> Result<Vec<f64>> {
        if bytes.len() < off + count * 8 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "truncated payload".into(),
            });
        }
        let vals = (0..count)
            .map(|i| f64::from_le_bytes(bytes[off + i * 8..off + i * 8 + 8].try_into().unwrap()))
            .collect();
        off += count * 8;
        Ok(vals)
    };
    let weights = Array1::from_vec(take(n)?);
    let means = Array2::from_shape_vec((n, d), take(n * d)?).unwrap();
    let variances = Array2::from_shape_vec((n, d), take(n * d)?).unwrap();
    let norm_stats = if has_stats {
        Some(LgpNormStats {
            mean: Array1::from_vec(take(n)?),
            std: Array1::from_vec(take(n)?),
        })
    } else {
        None
    };
    Ok(DiagGmm {
        weights,
        means,
        variances,
        norm_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn feat(data: Array2<f32>) -> AcousticFeatureMatrix {
        AcousticFeatureMatrix {
            data,
            frame_shift: 0.01,
            feature_kind: FeatureKind::Mfcc,
        }
    }

    #[test]
    fn single_component_closed_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let frames = Array2::from_shape_fn((200, 3), |_| rng.gen_range(-2.0..2.0));
        let out = em_train(frames.view(), 1, 5, 0).unwrap();
        let gmm = out.gmm;
        assert!((gmm.weights[0] - 1.0).abs() < 1e-12);
        for j in 0..3 {
            let col = frames.column(j);
            let mean = col.sum() / 200.0;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 200.0;
            assert!((gmm.means[[0, j]] - mean).abs() < 1e-9);
            assert!((gmm.variances[[0, j]] - var).abs() < 1e-9);
        }
    }

    #[test]
    fn two_separated_gaussians_recovered() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let n1 = Normal::new(-3.0, 0.5).unwrap();
        let n2 = Normal::new(3.0, 0.5).unwrap();
        let mut data = Vec::new();
        for _ in 0..500 {
            data.push([n1.sample(&mut rng), n1.sample(&mut rng)]);
        }
        for _ in 0..500 {
            data.push([n2.sample(&mut rng), n2.sample(&mut rng)]);
        }
        let frames =
            Array2::from_shape_fn((1000, 2), |(i, j)| data[i][j]);
        let out = em_train(frames.view(), 2, 30, 7).unwrap();
        let gmm = out.gmm;
        let mut means: Vec<f64> = (0..2).map(|i| gmm.means[[i, 0]]).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] + 3.0).abs() < 0.1, "got {means:?}");
        assert!((means[1] - 3.0).abs() < 0.1, "got {means:?}");
    }

    #[test]
    fn em_loglik_nondecreasing() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let frames = Array2::from_shape_fn((400, 4), |_| rng.gen_range(-1.0..1.0));
        let out = em_train(frames.view(), 4, 15, 3).unwrap();
        for w in out.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "LL decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_deterministic_in_seed() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let frames = Array2::from_shape_fn((300, 3), |_| rng.gen_range(-1.0..1.0));
        let a = em_train(frames.view(), 4, 10, 5).unwrap().gmm;
        let b = em_train(frames.view(), 4, 10, 5).unwrap().gmm;
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.means, b.means);
        assert_eq!(a.variances, b.variances);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let frames = Array2::from_shape_fn((300, 3), |_| rng.gen_range(-1.0..1.0));
        let gmm = em_train(frames.view(), 8, 10, 5).unwrap().gmm;
        assert!((gmm.weights.sum() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn lgp_zero_frame_is_zero() {
        let gmm = DiagGmm {
            weights: array![0.5, 0.5],
            means: array![[1.0, -2.0], [0.3, 0.7]],
            variances: array![[0.5, 2.0], [1.0, 1.0]],
            norm_stats: None,
        };
        let y = lgp_frame(&gmm, array![0.0, 0.0].view());
        assert_eq!(y, array![0.0, 0.0]);
    }

    #[test]
    fn lgp_hand_values() {
        let gmm = DiagGmm {
            weights: array![1.0],
            means: array![[1.0, 0.0]],
            variances: array![[1.0, 1.0]],
            norm_stats: None,
        };
        let y = lgp_frame(&gmm, array![1.0, 0.0].view());
        assert!((y[0] - 0.5).abs() < 1e-12);

        let gmm1 = DiagGmm {
            weights: array![1.0],
            means: array![[0.0]],
            variances: array![[4.0]],
            norm_stats: None,
        };
        let y = lgp_frame(&gmm1, array![2.0].view());
        assert!((y[0] + 0.5).abs() < 1e-12);
    }

    /// Restoring the dropped constant must recover the full log-density.
    #[test]
    fn lgp_equals_log_density_plus_constant() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for _ in 0..50 {
            let d = rng.gen_range(1..6);
            let n = rng.gen_range(1..4);
            let gmm = DiagGmm {
                weights: Array1::from_elem(n, 1.0 / n as f64),
                means: Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0)),
                variances: Array2::from_shape_fn((n, d), |_| rng.gen_range(0.2..3.0)),
                norm_stats: None,
            };
            let x = Array1::from_shape_fn(d, |_| rng.gen_range(-3.0..3.0));
            let y = lgp_frame(&gmm, x.view());
            for i in 0..n {
                let mut c = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
                for j in 0..d {
                    c -= 0.5 * gmm.variances[[i, j]].ln();
                    c -= 0.5 * gmm.means[[i, j]] * gmm.means[[i, j]] / gmm.variances[[i, j]];
                }
                let direct = gmm.component_log_density(i, x.view());
                assert!((y[i] + c - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lgp_extract_shape_and_rowwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let gmm = DiagGmm {
            weights: array![0.5, 0.5],
            means: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            variances: Array2::from_shape_fn((2, 3), |_| rng.gen_range(0.5..2.0)),
            norm_stats: None,
        };
        let f = feat(Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0f32..1.0)));
        let lgp = lgp_extract(&gmm, &f).unwrap();
        assert_eq!(lgp.n_frames(), 5);
        assert_eq!(lgp.dim(), 2);
        assert_eq!(lgp.feature_kind, FeatureKind::Lgp);
        for t in 0..5 {
            let x: Array1<f64> = f.data.row(t).mapv(|v| v as f64);
            let y = lgp_frame(&gmm, x.view());
            for i in 0..2 {
                assert_eq!(lgp.data[[t, i]], y[i] as f32);
            }
        }
        // permuting rows permutes output rows
        let mut perm = f.clone();
        perm.data = f.data.select(ndarray::Axis(0), &[4, 2, 0, 1, 3]);
        let lgp_perm = lgp_extract(&gmm, &perm).unwrap();
        assert_eq!(lgp_perm.data, lgp.data.select(ndarray::Axis(0), &[4, 2, 0, 1, 3]));
    }

    #[test]
    fn norm_stats_hand_case_and_floor() {
        let gmm = DiagGmm {
            weights: array![1.0],
            means: array![[1.0]],
            variances: array![[1.0]],
            norm_stats: None,
        };
        // frames x=0 and x=2: y = -x^2/2 + x -> {0.0, 0.0}? no: x=0 -> 0, x=2 -> -2+2 = 0
        // use x = 0 and x = 2 with mean 2 instead
        let gmm2 = DiagGmm {
            weights: array![1.0],
            means: array![[2.0]],
            variances: array![[1.0]],
            norm_stats: None,
        };
        // y(0)=0, y(2)=-2+4=2 -> mean 1, std 1 (population)
        let f = feat(array![[0.0f32], [2.0]]);
        let stats = fit_norm_stats(&gmm2, [&f]).unwrap();
        assert!((stats.mean[0] - 1.0).abs() < 1e-9);
        assert!((stats.std[0] - 1.0).abs() < 1e-9);

        // single frame repeated: std at floor
        let f1 = feat(array![[0.5f32], [0.5], [0.5]]);
        let stats = fit_norm_stats(&gmm, [&f1]).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
    }

    #[test]
    fn one_pass_stats_match_two_pass_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let gmm = DiagGmm {
            weights: array![0.5, 0.5],
            means: Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)),
            variances: Array2::from_shape_fn((2, 4), |_| rng.gen_range(0.5..2.0)),
            norm_stats: None,
        };
        let feats: Vec<AcousticFeatureMatrix> = (0..3)
            .map(|_| feat(Array2::from_shape_fn((30, 4), |_| rng.gen_range(-1.0f32..1.0))))
            .collect();
        let stats = fit_norm_stats(&gmm, feats.iter()).unwrap();
        // two-pass reference
        let mut all: Vec<Array1<f64>> = Vec::new();
        for f in &feats {
            for row in f.data.rows() {
                all.push(lgp_frame(&gmm, row.mapv(|v| v as f64).view()));
            }
        }
        for i in 0..2 {
            let vals: Vec<f64> = all.iter().map(|y| y[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!((stats.mean[i] - mean).abs() < 1e-7);
            assert!((stats.std[i] - var.sqrt()).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_training_pool_is_standardized() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let gmm = DiagGmm {
            weights: array![0.5, 0.5],
            means: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            variances: Array2::from_shape_fn((2, 3), |_| rng.gen_range(0.5..2.0)),
            norm_stats: None,
        };
        let f = feat(Array2::from_shape_fn((200, 3), |_| rng.gen_range(-2.0f32..2.0)));
        let stats = fit_norm_stats(&gmm, [&f]).unwrap();
        let lgp = lgp_extract(&gmm, &f).unwrap();
        let normed = lgp_normalize(&lgp, &stats);
        for col in normed.data.columns() {
            let vals: Vec<f64> = col.iter().map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_identity_and_zero_cases() {
        let stats = LgpNormStats {
            mean: array![0.0, 0.0],
            std: array![1.0, 1.0],
        };
        let f = feat(array![[0.5f32, -1.0], [2.0, 3.0]]);
        let out = lgp_normalize(&f, &stats);
        assert_eq!(out.data, f.data);

        let stats2 = LgpNormStats {
            mean: array![0.5, -1.0],
            std: array![2.0, 3.0],
        };
        let f2 = feat(array![[0.5f32, -1.0], [0.5, -1.0]]);
        let out2 = lgp_normalize(&f2, &stats2);
        assert!(out2.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gmm_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.gmm");
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let gmm = DiagGmm {
            weights: array![0.3, 0.7],
            means: Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0)),
            variances: Array2::from_shape_fn((2, 4), |_| rng.gen_range(0.5..2.0)),
            norm_stats: Some(LgpNormStats {
                mean: array![0.1, -0.2],
                std: array![1.5, 2.5],
            }),
        };
        write_gmm(&path, &gmm, 99).unwrap();
        let back = read_gmm(&path, Some(99)).unwrap();
        assert_eq!(back.weights, gmm.weights);
        assert_eq!(back.means, gmm.means);
        assert_eq!(back.variances, gmm.variances);
        assert_eq!(back.norm_stats, gmm.norm_stats);
        assert!(matches!(
            read_gmm(&path, Some(98)),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }
}
