//! Training: additive-angular-margin softmax over cosine logits, Adam with
//! decoupled weight decay, an exponentially decaying learning-rate schedule,
//! and the single-path / dual-path (two-step) training loops.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::features::{crop_or_pad, AcousticFeatureMatrix};
use crate::model::{dual_forward, forward_embedding, init_dual_params, init_params, ModelConfig};
use crate::nncore::{Mode, ParamTree, Tape, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs for the fusion stage of two-step dual-path training.
    pub step2_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub scale: f64,
    /// Frames per training crop.
    pub target_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            step2_epochs: 5,
            batch_size: 32,
            lr0: 0.001,
            lr_decay: 0.97,
            weight_decay: 2e-5,
            margin: 0.2,
            scale: 30.0,
            target_frames: 200,
            seed: 0,
        }
    }
}

pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// One utterance of LGP features (frames x components) with its speaker index.
pub struct Utterance {
    pub feat: AcousticFeatureMatrix,
    pub speaker: usize,
}

/// One utterance scored against both gender GMMs.
pub struct DualUtterance {
    pub feat_male: AcousticFeatureMatrix,
    pub feat_female: AcousticFeatureMatrix,
    pub speaker: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Margin-softmax head: cosine logits between L2-normalized embeddings and
/// L2-normalized class weights, additive angular margin at the target class,
/// fixed scale, mean cross-entropy. Returns the loss node and the batch
/// accuracy of the unmargined cosine logits.
pub fn aam_softmax_loss(
    tape: &mut Tape<f32>,
    tree: &mut ParamTree<f32>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
    scale: f64,
) -> (Var, f64) {
    let norm_emb = tape.l2_normalize_rows(embeddings);
    let w = tape.param(tree, "classifier.weight");
    let norm_w = tape.l2_normalize_rows(w);
    let cos = tape.matmul_nt(norm_emb, norm_w);

    let cv = tape.value(cos).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mut correct = 0usize;
    for (b, &lab) in labels.iter().enumerate() {
        let row = cv.row(b);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == lab {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / labels.len() as f64;

    let margined = tape.aam_margin(cos, labels, margin as f32);
    let scaled = tape.scale(margined, scale as f32);
    let loss = tape.cross_entropy_mean(scaled, labels);
    (loss, accuracy)
}

/// First-moment/second-moment state for Adam, keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update over every trainable leaf, with decoupled weight decay
/// applied only to leaves flagged for decay (weights, not biases or BN).
pub fn adam_step(
    tree: &mut ParamTree<f32>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (name, leaf) in tree.iter_mut() {
        if !leaf.trainable {
            continue;
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(leaf.value.raw_dim()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(leaf.value.raw_dim()));
        for ((w, &g), (mi, vi)) in leaf
            .value
            .iter_mut()
            .zip(leaf.grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g as f64;
            let new_m = ADAM_BETA1 * (*mi as f64) + (1.0 - ADAM_BETA1) * g;
            let new_v = ADAM_BETA2 * (*vi as f64) + (1.0 - ADAM_BETA2) * g * g;
            *mi = new_m as f32;
            *vi = new_v as f32;
            let m_hat = new_m / bc1;
            let v_hat = new_v / bc2;
            let mut step = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if leaf.decay {
                step += lr * weight_decay * (*w as f64);
            }
            *w = (*w as f64 - step) as f32;
        }
    }
}

fn classifier_init(tree: &mut ParamTree<f32>, n_speakers: usize, dim: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
    let w = ArrayD::from_shape_simple_fn(IxDyn(&[n_speakers, dim]), || {
        dist.sample(&mut rng) as f32
    });
    tree.insert("classifier.weight", w, true, true);
}

/// Stack random fixed-length crops of the selected utterances into a
/// batch tensor of shape B x D x T.
fn batch_tensor(
    feats: &[&AcousticFeatureMatrix],
    target_frames: usize,
    rng: &mut ChaCha20Rng,
) -> ArrayD<f32> {
    let d = feats[0].dim();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[feats.len(), d, target_frames]));
    for (b, feat) in feats.iter().enumerate() {
        let cropped = crop_or_pad(feat, target_frames, rng);
        out.slice_mut(ndarray::s![b, .., ..])
            .assign(&cropped.data.t());
    }
    out
}

/// Shared epoch loop. `forward` builds the embedding batch for the given
/// item indices; the margin-softmax head, backprop, and Adam update are
/// common to all training modes.
fn run_training<F>(
    tree: &mut ParamTree<f32>,
    cfg: &TrainConfig,
    epochs: usize,
    n_items: usize,
    labels: &[usize],
    seed: u64,
    mut forward: F,
) -> Vec<EpochLog>
where
    F: FnMut(&mut Tape<f32>, &mut ParamTree<f32>, &[usize], &mut ChaCha20Rng) -> Var,
{
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut adam = AdamState::new();
    let mut logs = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 0..epochs {
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let emb = forward(&mut tape, tree, chunk, &mut rng);
            let (loss, acc) =
                aam_softmax_loss(&mut tape, tree, emb, &batch_labels, cfg.margin, cfg.scale);
            let loss_value = tape.value(loss).iter().next().copied().unwrap() as f64;
            tree.zero_grads();
            tape.backward(loss, tree);
            adam_step(tree, &mut adam, lr, cfg.weight_decay);
            loss_sum += loss_value;
            acc_sum += acc;
            n_batches += 1;
        }
        logs.push(EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / n_batches as f64,
            accuracy: acc_sum / n_batches as f64,
        });
    }
    logs
}

pub struct TrainOutcome {
    /// Model parameters plus the classifier head.
    pub params: ParamTree<f32>,
    pub logs: Vec<EpochLog>,
}

pub fn train_single_path(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    utterances: &[Utterance],
    n_speakers: usize,
) -> TrainOutcome {
    let mut tree = init_params::<f32>(model_cfg, "", cfg.seed);
    classifier_init(&mut tree, n_speakers, model_cfg.embedding_dim, cfg.seed ^ 0xC1A5);
    let labels: Vec<usize> = utterances.iter().map(|u| u.speaker).collect();
    let logs = run_training(
        &mut tree,
        cfg,
        cfg.epochs,
        utterances.len(),
        &labels,
        cfg.seed,
        |tape, tree, idx, rng| {
            let feats: Vec<&AcousticFeatureMatrix> =
                idx.iter().map(|&i| &utterances[i].feat).collect();
            let input = batch_tensor(&feats, cfg.target_frames, rng);
            forward_embedding(tape, tree, model_cfg, "", input, Mode::Train)
        },
    );
    TrainOutcome { params: tree, logs }
}

pub struct DualTrainOutcome {
    pub params: ParamTree<f32>,
    pub step1_male_logs: Vec<EpochLog>,
    pub step1_female_logs: Vec<EpochLog>,
    pub step2_logs: Vec<EpochLog>,
}

/// Crop both feature variants of each utterance at the same frame offsets.
fn dual_batch_tensors(
    utterances: &[DualUtterance],
    idx: &[usize],
    target_frames: usize,
    rng: &mut ChaCha20Rng,
) -> (ArrayD<f32>, ArrayD<f32>) {
    let d = utterances[idx[0]].feat_male.dim();
    let mut out_m = ArrayD::<f32>::zeros(IxDyn(&[idx.len(), d, target_frames]));
    let mut out_f = ArrayD::<f32>::zeros(IxDyn(&[idx.len(), d, target_frames]));
    for (b, &i) in idx.iter().enumerate() {
        let crop_seed: u64 = rng.gen();
        let mut rm = ChaCha20Rng::seed_from_u64(crop_seed);
        let mut rf = ChaCha20Rng::seed_from_u64(crop_seed);
        let cm = crop_or_pad(&utterances[i].feat_male, target_frames, &mut rm);
        let cf = crop_or_pad(&utterances[i].feat_female, target_frames, &mut rf);
        out_m.slice_mut(ndarray::s![b, .., ..]).assign(&cm.data.t());
        out_f.slice_mut(ndarray::s![b, .., ..]).assign(&cf.data.t());
    }
    (out_m, out_f)
}

/// Dual-path training. With `two_step`, each path is first trained on its own
/// feature stream with its own classifier; the paths are then frozen and only
/// the fusion projection plus a fresh classifier are trained on the fused
/// embedding. Without it, the whole dual network is trained jointly.
pub fn train_dual_path(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    utterances: &[DualUtterance],
    n_speakers: usize,
    two_step: bool,
) -> DualTrainOutcome {
    let labels: Vec<usize> = utterances.iter().map(|u| u.speaker).collect();
    if !two_step {
        let mut tree = init_dual_params::<f32>(model_cfg, cfg.seed);
        classifier_init(&mut tree, n_speakers, model_cfg.embedding_dim, cfg.seed ^ 0xC1A5);
        let logs = run_training(
            &mut tree,
            cfg,
            cfg.epochs,
            utterances.len(),
            &labels,
            cfg.seed,
            |tape, tree, idx, rng| {
                let (lm, lf) = dual_batch_tensors(utterances, idx, cfg.target_frames, rng);
                dual_forward(tape, tree, model_cfg, lm, lf, Mode::Train)
            },
        );
        return DualTrainOutcome {
            params: tree,
            step1_male_logs: Vec::new(),
            step1_female_logs: Vec::new(),
            step2_logs: logs,
        };
    }

    // Step 1: each path alone, with its own classifier head.
    let train_path = |which_male: bool, seed: u64| -> (ParamTree<f32>, Vec<EpochLog>) {
        let mut tree = init_params::<f32>(model_cfg, "", seed);
        classifier_init(&mut tree, n_speakers, model_cfg.embedding_dim, seed ^ 0xC1A5);
        let logs = run_training(
            &mut tree,
            cfg,
            cfg.epochs,
            utterances.len(),
            &labels,
            seed,
            |tape, tree, idx, rng| {
                let feats: Vec<&AcousticFeatureMatrix> = idx
                    .iter()
                    .map(|&i| {
                        if which_male {
                            &utterances[i].feat_male
                        } else {
                            &utterances[i].feat_female
                        }
                    })
                    .collect();
                let input = batch_tensor(&feats, cfg.target_frames, rng);
                forward_embedding(tape, tree, model_cfg, "", input, Mode::Train)
            },
        );
        (tree, logs)
    };
    let (tree_m, step1_male_logs) = train_path(true, cfg.seed);
    let (tree_f, step1_female_logs) = train_path(false, cfg.seed.wrapping_add(1));

    // Step 2: frozen paths, train fusion + a fresh classifier.
    let mut fused = ParamTree::<f32>::new();
    for (name, leaf) in tree_m.iter() {
        if !name.starts_with("classifier.") {
            fused.insert(&format!("pathm.{name}"), leaf.value.clone(), leaf.trainable, leaf.decay);
        }
    }
    for (name, leaf) in tree_f.iter() {
        if !name.starts_with("classifier.") {
            fused.insert(&format!("pathf.{name}"), leaf.value.clone(), leaf.trainable, leaf.decay);
        }
    }
    fused.freeze_prefix("pathm.");
    fused.freeze_prefix("pathf.");
    {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        let dim = 2 * model_cfg.embedding_dim;
        let dist = Normal::new(0.0, (2.0 / (dim + model_cfg.embedding_dim) as f64).sqrt()).unwrap();
        let w = ArrayD::from_shape_simple_fn(
            IxDyn(&[model_cfg.embedding_dim, dim]),
            || dist.sample(&mut rng) as f32,
        );
        fused.insert("fusion.fc.weight", w, true, true);
        fused.insert(
            "fusion.fc.bias",
            ArrayD::zeros(IxDyn(&[model_cfg.embedding_dim])),
            true,
            false,
        );
    }
    classifier_init(
        &mut fused,
        n_speakers,
        model_cfg.embedding_dim,
        cfg.seed ^ 0xC1A6,
    );
    let step2_logs = run_training(
        &mut fused,
        cfg,
        cfg.step2_epochs,
        utterances.len(),
        &labels,
        cfg.seed.wrapping_add(3),
        |tape, tree, idx, rng| {
            let (lm, lf) = dual_batch_tensors(utterances, idx, cfg.target_frames, rng);
            // Frozen paths run in eval mode so their normalization statistics
            // stay fixed; only fusion layers are learned here.
            let em = forward_embedding(tape, tree, model_cfg, "pathm.", lm, Mode::Eval);
            let ef = forward_embedding(tape, tree, model_cfg, "pathf.", lf, Mode::Eval);
            let cat = tape.concat_axis1(&[em, ef]);
            let w = tape.param(tree, "fusion.fc.weight");
            let b = tape.param(tree, "fusion.fc.bias");
            let y = tape.matmul_nt(cat, w);
            tape.add_bias(y, b)
        },
    );
    DualTrainOutcome {
        params: fused,
        step1_male_logs,
        step1_female_logs,
        step2_logs,
    }
}

/// Eval-mode embeddings for a batch of full-length feature matrices, using a
/// trained parameter tree. Single-path when `dual` is false.
pub fn embed_utterance(
    model_cfg: &ModelConfig,
    params: &mut ParamTree<f32>,
    feat: &AcousticFeatureMatrix,
    feat_female: Option<&AcousticFeatureMatrix>,
) -> Vec<f32> {
    let to_input = |f: &AcousticFeatureMatrix| {
        let d = f.dim();
        let t = f.n_frames();
        let mut x = ArrayD::<f32>::zeros(IxDyn(&[1, d, t]));
        x.slice_mut(ndarray::s![0, .., ..]).assign(&f.data.t());
        x
    };
    let mut tape = Tape::new();
    let emb = match feat_female {
        None => forward_embedding(&mut tape, params, model_cfg, "", to_input(feat), Mode::Eval),
        Some(ff) => dual_forward(
            &mut tape,
            params,
            model_cfg,
            to_input(feat),
            to_input(ff),
            Mode::Eval,
        ),
    };
    tape.value(emb)
        .index_axis(Axis(0), 0)
        .iter()
        .copied()
        .collect()
}
