//! MFCC extraction and feature-matrix utilities.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataio::WaveBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Mfcc,
    Lgp,
}

/// Frame-by-coefficient matrix, time-major (row = frame).
#[derive(Debug, Clone)]
pub struct AcousticFeatureMatrix {
    pub data: Array2<f32>,
    pub frame_shift: f32,
    pub feature_kind: FeatureKind,
}

impl AcousticFeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MfccConfig {
    pub n_mels: usize,
    pub n_ceps: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            n_mels: 80,
            n_ceps: 80,
            win_length: 400, // 25 ms at 16 kHz
            hop_length: 160, // 10 ms
            fft_size: 512,
            f_min: 20.0,
            f_max: 7600.0,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT power-spectrum bins.
pub fn mel_filterbank(cfg: &MfccConfig, sample_rate: f64) -> Array2<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate / cfg.fft_size as f64;
            let w = if f >= lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            bank[[m, k]] = w;
        }
    }
    bank
}

/// Orthonormal DCT-II matrix mapping n_mels log energies to n_ceps coefficients.
pub fn dct_matrix(n_ceps: usize, n_mels: usize) -> Array2<f64> {
    let mut dct = Array2::zeros((n_ceps, n_mels));
    for j in 0..n_ceps {
        let scale = if j == 0 {
            (1.0 / n_mels as f64).sqrt()
        } else {
            (2.0 / n_mels as f64).sqrt()
        };
        for m in 0..n_mels {
            dct[[j, m]] = scale
                * (std::f64::consts::PI * j as f64 * (m as f64 + 0.5) / n_mels as f64).cos();
        }
    }
    dct
}

pub fn mfcc(wave: &WaveBuffer, cfg: &MfccConfig) -> Result<AcousticFeatureMatrix> {
    let data = mfcc_f64(wave, cfg)?;
    Ok(AcousticFeatureMatrix {
        data: data.mapv(|v| v as f32),
        frame_shift: cfg.hop_length as f32 / wave.sample_rate as f32,
        feature_kind: FeatureKind::Mfcc,
    })
}

/// Full-precision MFCC pipeline; `mfcc` is this plus a cast to f32 storage.
pub fn mfcc_f64(wave: &WaveBuffer, cfg: &MfccConfig) -> Result<Array2<f64>> {
    if cfg.n_mels < cfg.n_ceps {
        return Err(Error::Config("n_mels must be >= n_ceps".into()));
    }
    if wave.samples.len() < cfg.win_length {
        return Err(Error::TooShort {
            got: wave.samples.len(),
            need: cfg.win_length,
        });
    }
    let sr = wave.sample_rate as f64;
    // pre-emphasis over the whole waveform, first sample passed through
    let mut emphasized: Vec<f64> = Vec::with_capacity(wave.samples.len());
    emphasized.push(wave.samples[0] as f64);
    for i in 1..wave.samples.len() {
        emphasized.push(wave.samples[i] as f64 - cfg.pre_emphasis * wave.samples[i - 1] as f64);
    }

    let n_frames = 1 + (emphasized.len() - cfg.win_length) / cfg.hop_length;
    let window: Vec<f64> = (0..cfg.win_length)
        .map(|n| {
            0.54 - 0.46
                * (2.0 * std::f64::consts::PI * n as f64 / (cfg.win_length - 1) as f64).cos()
        })
        .collect();
    let bank = mel_filterbank(cfg, sr);
    let dct = dct_matrix(cfg.n_ceps, cfg.n_mels);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.fft_size / 2 + 1;

    let mut out = Array2::<f64>::zeros((n_frames, cfg.n_ceps));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for i in 0..cfg.fft_size {
            let v = if i < cfg.win_length {
                emphasized[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        let log_mel: Vec<f64> = (0..cfg.n_mels)
            .map(|m| {
                let mut e = 0.0;
                for k in 0..n_bins {
                    e += bank[[m, k]] * power[k];
                }
                e.max(cfg.log_floor).ln()
            })
            .collect();
        for j in 0..cfg.n_ceps {
            let mut acc = 0.0;
            for (m, &lm) in log_mel.iter().enumerate() {
                acc += dct[[j, m]] * lm;
            }
            out[[t, j]] = acc;
        }
    }
    Ok(out)
}

/// Subtract the per-coefficient mean over the utterance.
pub fn mean_normalize(feat: &AcousticFeatureMatrix) -> AcousticFeatureMatrix {
    let t = feat.n_frames() as f64;
    let mut out = feat.data.clone();
    for mut col in out.columns_mut() {
        let mean = (col.iter().map(|&v| v as f64).sum::<f64>() / t) as f32;
        col.mapv_inplace(|v| v - mean);
    }
    AcousticFeatureMatrix {
        data: out,
        frame_shift: feat.frame_shift,
        feature_kind: feat.feature_kind,
    }
}

/// Random contiguous crop to `target_frames`, or wrap-around padding when the
/// utterance is shorter.
pub fn crop_or_pad(
    feat: &AcousticFeatureMatrix,
    target_frames: usize,
    rng: &mut impl Rng,
) -> AcousticFeatureMatrix {
    let t = feat.n_frames();
    let d = feat.dim();
    let mut out = Array2::<f32>::zeros((target_frames, d));
    if t >= target_frames {
        let offset = rng.gen_range(0..=(t - target_frames));
        out.assign(&feat.data.slice(ndarray::s![offset..offset + target_frames, ..]));
    } else {
        for i in 0..target_frames {
            out.row_mut(i).assign(&feat.data.row(i % t));
        }
    }
    AcousticFeatureMatrix {
        data: out,
        frame_shift: feat.frame_shift,
        feature_kind: feat.feature_kind,
    }
}

const FEAT_MAGIC: &[u8; 8] = b"FEATv1\0\0";

/// Binary feature file: magic, dtype (1 = f32), feature kind, T, D,
/// frame shift, producing-config hash, then row-major f32 payload, little-endian.
pub fn write_feat(path: &Path, feat: &AcousticFeatureMatrix, config_hash: u64) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + feat.data.len() * 4);
    bytes.extend_from_slice(FEAT_MAGIC);
    bytes.push(1u8); // dtype f32
    bytes.push(match feat.feature_kind {
        FeatureKind::Mfcc => 0u8,
        FeatureKind::Lgp => 1u8,
    });
    bytes.extend_from_slice(&[0u8; 2]);
    bytes.extend_from_slice(&(feat.n_frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(feat.dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&feat.frame_shift.to_le_bytes());
    bytes.extend_from_slice(&config_hash.to_le_bytes());
    for &v in feat.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feat(path: &Path, expected_hash: Option<u64>) -> Result<AcousticFeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 32 || &bytes[..8] != FEAT_MAGIC {
        return Err(fail("bad magic"));
    }
    if bytes[8] != 1 {
        return Err(fail("unsupported dtype"));
    }
    let kind = match bytes[9] {
        0 => FeatureKind::Mfcc,
        1 => FeatureKind::Lgp,
        _ => return Err(fail("unknown feature kind")),
    };
    let t = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let frame_shift = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let hash = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    if let Some(expected) = expected_hash {
        if hash != expected {
            return Err(Error::ConfigHashMismatch {
                path: path.to_path_buf(),
            });
        }
    }
    if bytes.len() != 32 + t * d * 4 {
        return Err(fail("payload size mismatch"));
    }
    let mut data = Array2::<f32>::zeros((t, d));
    for (i, v) in data.iter_mut().enumerate() {
        let off = 32 + i * 4;
        *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    }
    Ok(AcousticFeatureMatrix {
        data,
        frame_shift,
        feature_kind: kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tone(freq: f64, n: usize) -> WaveBuffer {
        let samples = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
            .collect();
        WaveBuffer {
            samples,
            sample_rate: 16_000,
        }
    }

    #[test]
    fn frame_count_for_two_seconds() {
        let wave = tone(440.0, 32_000);
        let feat = mfcc(&wave, &MfccConfig::default()).unwrap();
        assert_eq!(feat.n_frames(), 198);
        assert_eq!(feat.dim(), 80);
        assert!(feat.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_waveform_gives_constant_frames() {
        let wave = WaveBuffer {
            samples: vec![0.0; 8000],
            sample_rate: 16_000,
        };
        let feat = mfcc(&wave, &MfccConfig::default()).unwrap();
        let first = feat.data.row(0).to_owned();
        for row in feat.data.rows() {
            for (a, b) in row.iter().zip(first.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn too_short_rejected() {
        let wave = tone(440.0, 399);
        assert!(matches!(
            mfcc(&wave, &MfccConfig::default()),
            Err(Error::TooShort { got: 399, .. })
        ));
    }

    /// Direct, unoptimized reimplementation of the pipeline: O(N^2) DFT,
    /// filterbank and DCT evaluated from their definitions.
    fn mfcc_oracle(wave: &WaveBuffer, cfg: &MfccConfig) -> Array2<f64> {
        let sr = wave.sample_rate as f64;
        let x: Vec<f64> = wave.samples.iter().map(|&v| v as f64).collect();
        let mut pre = vec![x[0]];
        for i in 1..x.len() {
            pre.push(x[i] - cfg.pre_emphasis * x[i - 1]);
        }
        let n_frames = 1 + (pre.len() - cfg.win_length) / cfg.hop_length;
        let n_bins = cfg.fft_size / 2 + 1;
        let mel_lo = hz_to_mel(cfg.f_min);
        let mel_hi = hz_to_mel(cfg.f_max);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut out = Array2::zeros((n_frames, cfg.n_ceps));
        for t in 0..n_frames {
            let frame: Vec<f64> = (0..cfg.fft_size)
                .map(|i| {
                    if i < cfg.win_length {
                        let w = 0.54
                            - 0.46
                                * (2.0 * std::f64::consts::PI * i as f64
                                    / (cfg.win_length - 1) as f64)
                                    .cos();
                        pre[t * cfg.hop_length + i] * w
                    } else {
                        0.0
                    }
                })
                .collect();
            let power: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let mut re = 0.0;
                    let mut im = 0.0;
                    for (n, &v) in frame.iter().enumerate() {
                        let phase =
                            -2.0 * std::f64::consts::PI * k as f64 * n as f64 / cfg.fft_size as f64;
                        re += v * phase.cos();
                        im += v * phase.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let log_mel: Vec<f64> = (0..cfg.n_mels)
                .map(|m| {
                    let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
                    let mut e = 0.0;
                    for k in 0..n_bins {
                        let f = k as f64 * sr / cfg.fft_size as f64;
                        let w = if f >= lo && f <= c {
                            (f - lo) / (c - lo)
                        } else if f > c && f <= hi {
                            (hi - f) / (hi - c)
                        } else {
                            0.0
                        };
                        e += w * power[k];
                    }
                    e.max(cfg.log_floor).ln()
                })
                .collect();
            for j in 0..cfg.n_ceps {
                let scale = if j == 0 {
                    (1.0 / cfg.n_mels as f64).sqrt()
                } else {
                    (2.0 / cfg.n_mels as f64).sqrt()
                };
                let mut acc = 0.0;
                for (m, &lm) in log_mel.iter().enumerate() {
                    acc += scale
                        * (std::f64::consts::PI * j as f64 * (m as f64 + 0.5)
                            / cfg.n_mels as f64)
                            .cos()
                        * lm;
                }
                out[[t, j]] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_direct_oracle_on_tone() {
        let cfg = MfccConfig::default();
        // pure tone at the center of mel filter 40
        let bank_points = {
            let mel_lo = hz_to_mel(cfg.f_min);
            let mel_hi = hz_to_mel(cfg.f_max);
            mel_to_hz(mel_lo + (mel_hi - mel_lo) * 41.0 / 81.0)
        };
        let wave = tone(bank_points, 2000);
        let fast = mfcc_f64(&wave, &cfg).unwrap();
        let slow = mfcc_oracle(&wave, &cfg);
        assert_eq!(fast.nrows(), slow.nrows());
        for t in 0..fast.nrows() {
            for j in 0..fast.ncols() {
                let diff = (fast[[t, j]] - slow[[t, j]]).abs();
                assert!(diff < 1e-6, "t={t} j={j} diff={diff}");
            }
        }
    }

    #[test]
    fn translation_covariance_one_hop() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let base: Vec<f32> = (0..4000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let shifted: Vec<f32> = base[160..].to_vec();
        let cfg = MfccConfig::default();
        let a = mfcc(&WaveBuffer { samples: base, sample_rate: 16_000 }, &cfg).unwrap();
        let b = mfcc(&WaveBuffer { samples: shifted, sample_rate: 16_000 }, &cfg).unwrap();
        // interior frames: b[t] should equal a[t+1] (frame 0 of b differs via pre-emphasis edge)
        for t in 1..b.n_frames() {
            for j in 0..b.dim() {
                let diff = (b.data[[t, j]] - a.data[[t + 1, j]]).abs();
                assert!(diff < 1e-4, "t={t} j={j} diff={diff}");
            }
        }
    }

    #[test]
    fn mean_normalize_zero_mean_and_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((50, 8), |_| rng.gen_range(-1.0f32..1.0));
        let feat = AcousticFeatureMatrix {
            data,
            frame_shift: 0.01,
            feature_kind: FeatureKind::Mfcc,
        };
        let norm = mean_normalize(&feat);
        // tolerances account for f32 storage of the normalized matrix
        for col in norm.data.columns() {
            let mean: f64 = col.iter().map(|&v| v as f64).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6);
        }
        let twice = mean_normalize(&norm);
        for (a, b) in twice.data.iter().zip(norm.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // pairwise frame differences preserved up to f32 rounding
        for j in 0..8 {
            let orig = feat.data[[3, j]] - feat.data[[17, j]];
            let after = norm.data[[3, j]] - norm.data[[17, j]];
            assert!((orig - after).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_normalize_constant_is_zero() {
        let feat = AcousticFeatureMatrix {
            data: Array2::from_elem((5, 4), 3.25),
            frame_shift: 0.01,
            feature_kind: FeatureKind::Mfcc,
        };
        let norm = mean_normalize(&feat);
        assert!(norm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_identity_when_exact() {
        let data = Array2::from_shape_fn((198, 4), |(i, j)| (i * 4 + j) as f32);
        let feat = AcousticFeatureMatrix {
            data: data.clone(),
            frame_shift: 0.01,
            feature_kind: FeatureKind::Mfcc,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let out = crop_or_pad(&feat, 198, &mut rng);
        assert_eq!(out.data, data);
    }

    #[test]
    fn crop_is_contiguous_slice() {
        let data = Array2::from_shape_fn((300, 2), |(i, j)| (i * 2 + j) as f32);
        let feat = AcousticFeatureMatrix {
            data,
            frame_shift: 0.01,
            feature_kind: FeatureKind::Mfcc,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let out = crop_or_pad(&feat, 200, &mut rng);
        assert_eq!(out.n_frames(), 200);
        let offset = (out.data[[0, 0]] / 2.0) as usize;
        for i in 0..200 {
            assert_eq!(out.data[[i, 0]], ((offset + i) * 2) as f32);
        }
    }

    #[test]
    fn pad_wraps_around() {
        let data = Array2::from_shape_fn((100, 3), |(i, j)| (i * 3 + j) as f32);
        let feat = AcousticFeatureMatrix {
            data,
            frame_shift: 0.01,
            feature_kind: FeatureKind::Mfcc,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let out = crop_or_pad(&feat, 200, &mut rng);
        for i in 100..200 {
            for j in 0..3 {
                assert_eq!(out.data[[i, j]], out.data[[i - 100, j]]);
            }
        }
    }

    #[test]
    fn feat_file_roundtrip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let feat = AcousticFeatureMatrix {
            data: Array2::from_shape_fn((7, 5), |(i, j)| (i as f32) * 0.5 - j as f32),
            frame_shift: 0.01,
            feature_kind: FeatureKind::Lgp,
        };
        write_feat(&path, &feat, 0xDEADBEEF).unwrap();
        let back = read_feat(&path, Some(0xDEADBEEF)).unwrap();
        assert_eq!(back.data, feat.data);
        assert_eq!(back.feature_kind, FeatureKind::Lgp);
        assert!(matches!(
            read_feat(&path, Some(1)),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }
}
