//! The embedding extractor: stem conv, four stages of depthwise residual
//! blocks with SE gating, multi-layer feature aggregation (MFA), attentive
//! statistics pooling (ASP), and a fully connected projection. Plus the
//! dual-path variant that fuses embeddings from two gender-specific paths.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Mode, ParamTree, Scalar, Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const ASP_VAR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// LGP input channels (GMM component count).
    pub n_gaussians: usize,
    /// Input channels when the GMM layer is ablated (raw MFCC).
    pub mfcc_dim: usize,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    /// SE bottleneck = channels / se_reduction.
    pub se_reduction: usize,
    pub asp_bottleneck: usize,
    pub embedding_dim: usize,
    pub ablate_mfa: bool,
    pub ablate_gmm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_gaussians: 512,
            mfcc_dim: 80,
            stage_blocks: [3, 3, 9, 3],
            stage_channels: [256, 256, 256, 256],
            se_reduction: 4,
            asp_bottleneck: 128,
            embedding_dim: 256,
            ablate_mfa: false,
            ablate_gmm: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile for fast experiments and tests.
    pub fn tiny(n_gaussians: usize) -> Self {
        ModelConfig {
            n_gaussians,
            mfcc_dim: 80,
            stage_blocks: [1, 1, 1, 1],
            stage_channels: [32, 32, 32, 32],
            se_reduction: 4,
            asp_bottleneck: 32,
            embedding_dim: 64,
            ablate_mfa: false,
            ablate_gmm: false,
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.ablate_gmm {
            self.mfcc_dim
        } else {
            self.n_gaussians
        }
    }

    pub fn asp_input_channels(&self) -> usize {
        if self.ablate_mfa {
            self.stage_channels[3]
        } else {
            self.stage_channels.iter().sum()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &c in &self.stage_channels {
            if c % self.se_reduction != 0 {
                return Err(Error::Config(format!(
                    "stage channels {c} not divisible by se_reduction {}",
                    self.se_reduction
                )));
            }
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("stage_blocks must be >= 1".into()));
        }
        Ok(())
    }
}

fn normal_init<T: Scalar>(
    rng: &mut ChaCha20Rng,
    shape: &[usize],
    std: f64,
) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::from_f64(dist.sample(rng)))
}

fn insert_conv<T: Scalar>(
    tree: &mut ParamTree<T>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    cout: usize,
    cin_g: usize,
    k: usize,
) {
    let std = (2.0 / (cin_g * k) as f64).sqrt();
    tree.insert(
        &format!("{prefix}.weight"),
        normal_init(rng, &[cout, cin_g, k], std),
        true,
        true,
    );
    tree.insert(
        &format!("{prefix}.bias"),
        ArrayD::zeros(IxDyn(&[cout])),
        true,
        false,
    );
}

fn insert_linear<T: Scalar>(
    tree: &mut ParamTree<T>,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
) {
    let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
    tree.insert(
        &format!("{prefix}.weight"),
        normal_init(rng, &[out_dim, in_dim], std),
        true,
        true,
    );
    tree.insert(
        &format!("{prefix}.bias"),
        ArrayD::zeros(IxDyn(&[out_dim])),
        true,
        false,
    );
}

fn insert_bn<T: Scalar>(tree: &mut ParamTree<T>, prefix: &str, c: usize) {
    tree.insert(
        &format!("{prefix}.gamma"),
        ArrayD::from_elem(IxDyn(&[c]), T::one()),
        true,
        false,
    );
    tree.insert(
        &format!("{prefix}.beta"),
        ArrayD::zeros(IxDyn(&[c])),
        true,
        false,
    );
    tree.insert(
        &format!("{prefix}.running_mean"),
        ArrayD::zeros(IxDyn(&[c])),
        false,
        false,
    );
    tree.insert(
        &format!("{prefix}.running_var"),
        ArrayD::from_elem(IxDyn(&[c]), T::one()),
        false,
        false,
    );
}

/// Initialize all embedding-model parameters under `prefix` ("" for the
/// single-path model).
pub fn init_params<T: Scalar>(cfg: &ModelConfig, prefix: &str, seed: u64) -> ParamTree<T> {
    let mut tree = ParamTree::new();
    init_params_into(&mut tree, cfg, prefix, seed);
    tree
}

pub fn init_params_into<T: Scalar>(
    tree: &mut ParamTree<T>,
    cfg: &ModelConfig,
    prefix: &str,
    seed: u64,
) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p = |s: &str| format!("{prefix}{s}");

    insert_conv(tree, &mut rng, &p("stem.conv"), cfg.stage_channels[0], cfg.input_channels(), 3);
    insert_bn(tree, &p("stem.bn"), cfg.stage_channels[0]);

    let mut prev_c = cfg.stage_channels[0];
    for (s, (&blocks, &c)) in cfg.stage_blocks.iter().zip(&cfg.stage_channels).enumerate() {
        if c != prev_c {
            insert_conv(tree, &mut rng, &p(&format!("transition{s}.conv")), c, prev_c, 1);
            insert_bn(tree, &p(&format!("transition{s}.bn")), c);
        }
        for b in 0..blocks {
            let bp = p(&format!("stage{s}.block{b}"));
            insert_conv(tree, &mut rng, &format!("{bp}.conv1"), c, c, 1);
            insert_bn(tree, &format!("{bp}.bn1"), c);
            insert_conv(tree, &mut rng, &format!("{bp}.dw"), c, 1, 3);
            insert_conv(tree, &mut rng, &format!("{bp}.conv2"), c, c, 1);
            insert_bn(tree, &format!("{bp}.bn2"), c);
            let se_bottleneck = c / cfg.se_reduction;
            insert_linear(tree, &mut rng, &format!("{bp}.se.fc1"), se_bottleneck, c);
            insert_linear(tree, &mut rng, &format!("{bp}.se.fc2"), c, se_bottleneck);
        }
        prev_c = c;
    }

    let asp_in = cfg.asp_input_channels();
    insert_bn(tree, &p("mfa.bn"), asp_in);
    insert_conv(tree, &mut rng, &p("asp.att1"), cfg.asp_bottleneck, asp_in, 1);
    insert_conv(tree, &mut rng, &p("asp.att2"), 1, cfg.asp_bottleneck, 1);
    insert_linear(tree, &mut rng, &p("head.fc"), cfg.embedding_dim, 2 * asp_in);
}

/// Parameters of the dual-path model: two full paths plus the fusion layer.
pub fn init_dual_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamTree<T> {
    let mut tree = ParamTree::new();
    init_params_into(&mut tree, cfg, "pathm.", seed);
    init_params_into(&mut tree, cfg, "pathf.", seed.wrapping_add(1));
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(2));
    insert_linear(
        &mut tree,
        &mut rng,
        "fusion.fc",
        cfg.embedding_dim,
        2 * cfg.embedding_dim,
    );
    tree
}

/// Batch norm whose gamma/beta/running stats live in the tree under `prefix`.
fn bn<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    prefix: &str,
    x: Var,
    mode: Mode,
) -> Var {
    let gamma = tape.param(tree, &format!("{prefix}.gamma"));
    let beta = tape.param(tree, &format!("{prefix}.beta"));
    let mut rm = tree.get(&format!("{prefix}.running_mean")).value.clone();
    let mut rv = tree.get(&format!("{prefix}.running_var")).value.clone();
    let y = tape.batchnorm(
        x,
        gamma,
        beta,
        &mut rm,
        &mut rv,
        mode,
        T::from_f64(BN_EPS),
        T::from_f64(BN_MOMENTUM),
    );
    if mode == Mode::Train {
        tree.get_mut(&format!("{prefix}.running_mean")).value = rm;
        tree.get_mut(&format!("{prefix}.running_var")).value = rv;
    }
    y
}

fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    prefix: &str,
    x: Var,
    padding: usize,
    groups: usize,
) -> Var {
    let w = tape.param(tree, &format!("{prefix}.weight"));
    let b = tape.param(tree, &format!("{prefix}.bias"));
    tape.conv1d(x, w, Some(b), 1, padding, groups)
}

fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    prefix: &str,
    x: Var,
) -> Var {
    let w = tape.param(tree, &format!("{prefix}.weight"));
    let b = tape.param(tree, &format!("{prefix}.bias"));
    let y = tape.matmul_nt(x, w);
    tape.add_bias(y, b)
}

/// Squeeze-and-excitation gate: bottlenecked transform of the temporal mean,
/// sigmoid, broadcast multiply over time.
pub fn se_block<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    prefix: &str,
    x: Var,
) -> Var {
    let squeeze = tape.mean_time(x);
    let z = linear(tape, tree, &format!("{prefix}.fc1"), squeeze);
    let z = tape.relu(z);
    let z = linear(tape, tree, &format!("{prefix}.fc2"), z);
    let gates = tape.sigmoid(z);
    tape.scale_channels(x, gates)
}

/// DW-ResBlock: pointwise conv -> BN -> ReLU -> depthwise k=3 -> pointwise
/// conv -> BN -> SE -> residual add -> ReLU. Time length preserved.
pub fn dw_resblock<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    prefix: &str,
    x: Var,
    mode: Mode,
) -> Var {
    let c = tape.value(x).shape()[1];
    let h = conv(tape, tree, &format!("{prefix}.conv1"), x, 0, 1);
    let h = bn(tape, tree, &format!("{prefix}.bn1"), h, mode);
    let h = tape.relu(h);
    let h = conv(tape, tree, &format!("{prefix}.dw"), h, 1, c);
    let h = conv(tape, tree, &format!("{prefix}.conv2"), h, 0, 1);
    let h = bn(tape, tree, &format!("{prefix}.bn2"), h, mode);
    let h = se_block(tape, tree, &format!("{prefix}.se"), h);
    let sum = tape.add(x, h);
    tape.relu(sum)
}

/// Multi-layer feature aggregation: channel concat of all stage outputs
/// followed by BN; with `ablate_mfa`, BN of the last stage output only.
pub fn mfa<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    prefix: &str,
    stage_outputs: &[Var],
    ablate_mfa: bool,
    mode: Mode,
) -> Var {
    let h = if ablate_mfa {
        *stage_outputs.last().unwrap()
    } else {
        tape.concat_axis1(stage_outputs)
    };
    bn(tape, tree, &format!("{prefix}mfa.bn"), h, mode)
}

/// Attentive statistics pooling: frame attention from a bottleneck,
/// softmax over time, weighted mean and std concatenated.
pub fn asp<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    prefix: &str,
    h: Var,
) -> Var {
    let e = conv(tape, tree, &format!("{prefix}asp.att1"), h, 0, 1);
    let e = tape.relu(e);
    let e = conv(tape, tree, &format!("{prefix}asp.att2"), e, 0, 1);
    let alpha = tape.softmax_time(e);
    let weighted = tape.scale_frames(h, alpha);
    let mean = tape.sum_time(weighted);
    let h2 = tape.square(h);
    let weighted2 = tape.scale_frames(h2, alpha);
    let m2 = tape.sum_time(weighted2);
    let mean_sq = tape.square(mean);
    let var = tape.sub(m2, mean_sq);
    let var = tape.clamp_min(var, T::from_f64(ASP_VAR_FLOOR));
    let std = tape.sqrt(var);
    tape.concat_axis1(&[mean, std])
}

/// Full embedding forward: input B x C x T, output B x embedding_dim.
pub fn forward_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    cfg: &ModelConfig,
    prefix: &str,
    input: ArrayD<T>,
    mode: Mode,
) -> Var {
    assert_eq!(
        input.shape()[1],
        cfg.input_channels(),
        "input channel mismatch"
    );
    let p = |s: &str| format!("{prefix}{s}");
    let x = tape.constant(input);
    let h = conv(tape, tree, &p("stem.conv"), x, 1, 1);
    let h = bn(tape, tree, &p("stem.bn"), h, mode);
    let mut h = tape.relu(h);

    let mut stage_outputs = Vec::with_capacity(4);
    let mut prev_c = cfg.stage_channels[0];
    for (s, (&blocks, &c)) in cfg.stage_blocks.iter().zip(&cfg.stage_channels).enumerate() {
        if c != prev_c {
            let t = conv(tape, tree, &p(&format!("transition{s}.conv")), h, 0, 1);
            let t = bn(tape, tree, &p(&format!("transition{s}.bn")), t, mode);
            h = tape.relu(t);
        }
        for b in 0..blocks {
            h = dw_resblock(tape, tree, &p(&format!("stage{s}.block{b}")), h, mode);
        }
        stage_outputs.push(h);
        prev_c = c;
    }

    let agg = mfa(tape, tree, prefix, &stage_outputs, cfg.ablate_mfa, mode);
    let pooled = asp(tape, tree, prefix, agg);
    linear(tape, tree, &p("head.fc"), pooled)
}

/// Dual-path forward: embed the male-GMM and female-GMM feature variants of
/// the same utterances, concatenate, and project through the fusion layer.
pub fn dual_forward<T: Scalar>(
    tape: &mut Tape<T>,
    tree: &mut ParamTree<T>,
    cfg: &ModelConfig,
    lgp_male: ArrayD<T>,
    lgp_female: ArrayD<T>,
    mode: Mode,
) -> Var {
    let em = forward_embedding(tape, tree, cfg, "pathm.", lgp_male, mode);
    let ef = forward_embedding(tape, tree, cfg, "pathf.", lgp_female, mode);
    let cat = tape.concat_axis1(&[em, ef]);
    linear(tape, tree, "fusion.fc", cat)
}

const CKPT_MAGIC: &[u8; 8] = b"CKPTv1\0\0";

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamTree<f32>,
}

/// Checkpoint: magic, config hash, model config (canonical JSON), then every
/// leaf in sorted-name order as f32 little-endian (BN running stats included).
pub fn write_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ParamTree<f32>,
    config_hash: u64,
) -> Result<()> {
    let cfg_json = serde_json::to_vec(config).expect("config serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&config_hash.to_le_bytes());
    bytes.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&cfg_json);
    let n_leaves = params.iter().count() as u32;
    bytes.extend_from_slice(&n_leaves.to_le_bytes());
    for (name, leaf) in params.iter() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(leaf.trainable as u8);
        bytes.push(leaf.decay as u8);
        bytes.extend_from_slice(&(leaf.value.ndim() as u32).to_le_bytes());
        for &d in leaf.value.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in leaf.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes.push(0u8); // no optimizer section
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path, expected_hash: Option<u64>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(fail("bad magic"));
    }
    let hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if let Some(expected) = expected_hash {
        if hash != expected {
            return Err(Error::ConfigHashMismatch {
                path: path.to_path_buf(),
            });
        }
    }
    let mut off = 16;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() < off + n {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "truncated".into(),
            });
        }
        let s = &bytes[off..off + n];
        off += n;
        Ok(s)
    };
    let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let config: ModelConfig =
        serde_json::from_slice(take(cfg_len)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad config: {e}"),
        })?;
    let n_leaves = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut params = ParamTree::new();
    for _ in 0..n_leaves {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| fail("bad leaf name"))?;
        let trainable = take(1)?[0] != 0;
        let decay = take(1)?[0] != 0;
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product();
        let data = take(len * 4)?;
        let values: Vec<f32> = (0..len)
            .map(|i| f32::from_le_bytes(data[i * 4..i * 4 + 4].try_into().unwrap()))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|_| fail("bad leaf shape"))?;
        params.insert(&name, value, trainable, decay);
    }
    Ok(Checkpoint { config, params })
}
