//! Staged pipeline over a working directory: corpus synthesis, MFCC
//! extraction, GMM training, LGP extraction, embedding-model training,
//! scoring, and evaluation. Each stage reads and writes the on-disk formats
//! of the owning modules and embeds the run-configuration hash in every
//! artifact.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{
    load_wav, make_trials, parse_manifest, parse_trials, split_manifest, synth_corpus,
    write_manifest, write_trials, Gender, UtteranceManifestEntry,
};
use crate::error::{Error, Result};
use crate::eval::{
    compute_report, cosine, write_scores, DcfParams, EvalReport, TrialScore,
};
use crate::features::{
    mean_normalize, mfcc, read_feat, write_feat, AcousticFeatureMatrix, MfccConfig,
};
use crate::gmm::{em_train, fit_norm_stats, lgp_extract, lgp_normalize, read_gmm, write_gmm};
use crate::model::{read_checkpoint, write_checkpoint, ModelConfig};
use crate::train::{
    embed_utterance, train_dual_path, train_single_path, DualUtterance, EpochLog, TrainConfig,
    Utterance,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub eval_per_speaker: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_speakers: 16,
            utts_per_speaker: 14,
            eval_per_speaker: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GmmConfig {
    pub n_components: usize,
    pub n_iters: usize,
    /// Cap on pooled training frames; larger pools are subsampled
    /// deterministically.
    pub max_train_frames: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            n_components: 512,
            n_iters: 30,
            max_train_frames: 200_000,
        }
    }
}

/// Full run configuration: one section per pipeline stage plus the master
/// seed. Serialized as TOML for humans; hashed over its canonical JSON form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub mfcc: MfccConfig,
    pub gmm: GmmConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dcf: DcfParams,
}

impl RunConfig {
    /// Desk-scale profile: tiny model, small GMM, short training run.
    pub fn desk(seed: u64) -> Self {
        let gmm = GmmConfig {
            n_components: 64,
            n_iters: 30,
            max_train_frames: 40_000,
        };
        let model = ModelConfig::tiny(gmm.n_components);
        RunConfig {
            seed,
            data: DataConfig::default(),
            mfcc: MfccConfig::default(),
            gmm,
            model: model.clone(),
            train: TrainConfig {
                epochs: 40,
                step2_epochs: 8,
                batch_size: 32,
                target_frames: 200,
                seed,
                ..TrainConfig::default()
            },
            dcf: DcfParams::default(),
        }
    }
}

fn hash_json(value: &serde_json::Value) -> u64 {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// First eight little-endian bytes of the SHA-256 of the canonical JSON
/// serialization of the full configuration.
pub fn config_hash(cfg: &RunConfig) -> u64 {
    hash_json(&serde_json::to_value(cfg).expect("config serializes"))
}

/// Artifacts embed the hash of the configuration prefix that determines
/// them, so a stage-level override (e.g. GMM component count) invalidates
/// its downstream artifacts without invalidating upstream ones.
pub fn feat_config_hash(cfg: &RunConfig) -> u64 {
    hash_json(&serde_json::json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "mfcc": cfg.mfcc,
    }))
}

pub fn gmm_config_hash(cfg: &RunConfig) -> u64 {
    hash_json(&serde_json::json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "mfcc": cfg.mfcc,
        "gmm": cfg.gmm,
    }))
}

pub fn ckpt_config_hash(cfg: &RunConfig) -> u64 {
    hash_json(&serde_json::json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "mfcc": cfg.mfcc,
        "gmm": cfg.gmm,
        "model": cfg.model,
        "train": cfg.train,
    }))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A run directory plus its configuration and hash; all stage functions
/// operate on this.
pub struct Workspace {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub hash: u64,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, cfg: RunConfig) -> Self {
        let hash = config_hash(&cfg);
        Workspace {
            root: root.into(),
            cfg,
            hash,
        }
    }

    pub fn feat_hash(&self) -> u64 {
        feat_config_hash(&self.cfg)
    }
    pub fn gmm_hash(&self) -> u64 {
        gmm_config_hash(&self.cfg)
    }
    pub fn ckpt_hash(&self) -> u64 {
        ckpt_config_hash(&self.cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.csv")
    }
    pub fn train_manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest_train.csv")
    }
    pub fn eval_manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest_eval.csv")
    }
    pub fn trials_path(&self) -> PathBuf {
        self.data_dir().join("trials.txt")
    }
    pub fn mfcc_dir(&self) -> PathBuf {
        self.root.join("feats").join("mfcc")
    }
    /// tag: "all", "male", or "female".
    pub fn lgp_dir(&self, tag: &str) -> PathBuf {
        self.root.join("feats").join(format!("lgp_{tag}"))
    }
    pub fn gmm_path(&self, tag: &str) -> PathBuf {
        self.root.join("gmm").join(format!("{tag}.gmm"))
    }
    pub fn checkpoint_path(&self, dual: bool) -> PathBuf {
        self.root
            .join("model")
            .join(if dual { "dual.ckpt" } else { "single.ckpt" })
    }
    pub fn train_log_path(&self, name: &str) -> PathBuf {
        self.root.join("model").join(format!("{name}.jsonl"))
    }
    pub fn scores_path(&self) -> PathBuf {
        self.root.join("scores.txt")
    }
    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    fn feat_path(dir: &Path, utt_id: &str) -> PathBuf {
        dir.join(format!("{utt_id}.feat"))
    }
}

/// Synthesize the corpus, write full/train/eval manifests, build the
/// all-pairs trial list over the eval split, and record the configuration.
pub fn stage_synth_data(ws: &Workspace) -> Result<()> {
    std::fs::create_dir_all(ws.data_dir()).map_err(|e| Error::io(&ws.data_dir(), e))?;
    let entries = synth_corpus(
        &ws.data_dir().join("wav"),
        ws.cfg.data.n_speakers,
        ws.cfg.data.utts_per_speaker,
        ws.cfg.seed,
    )?;
    write_manifest(&ws.manifest_path(), &entries)?;
    let (train, eval) = split_manifest(&entries, ws.cfg.data.eval_per_speaker);
    write_manifest(&ws.train_manifest_path(), &train)?;
    write_manifest(&ws.eval_manifest_path(), &eval)?;
    write_trials(&ws.trials_path(), &make_trials(&eval))?;
    save_config(&ws.root.join("config.toml"), &ws.cfg)
}

/// Extract per-utterance mean-normalized MFCC for every manifest entry.
pub fn stage_extract_mfcc(ws: &Workspace) -> Result<()> {
    let dir = ws.mfcc_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in parse_manifest(&ws.manifest_path())? {
        let wave = load_wav(&entry.path)?;
        let feat = mean_normalize(&mfcc(&wave, &ws.cfg.mfcc)?);
        write_feat(&Workspace::feat_path(&dir, &entry.utt_id), &feat, ws.feat_hash())?;
    }
    Ok(())
}

fn pool_frames(
    ws: &Workspace,
    entries: &[UtteranceManifestEntry],
    seed: u64,
) -> Result<Array2<f64>> {
    let dir = ws.mfcc_dir();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = 0;
    for entry in entries {
        let feat = read_feat(&Workspace::feat_path(&dir, &entry.utt_id), Some(ws.feat_hash()))?;
        dim = feat.dim();
        for row in feat.data.rows() {
            rows.push(row.iter().map(|&v| v as f64).collect());
        }
    }
    if rows.len() > ws.cfg.gmm.max_train_frames {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(ws.cfg.gmm.max_train_frames);
        idx.sort_unstable();
        rows = idx.into_iter().map(|i| std::mem::take(&mut rows[i])).collect();
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((n, dim), flat).expect("pooled frame shape"))
}

fn gender_tag(gender: Option<Gender>) -> &'static str {
    match gender {
        None => "all",
        Some(Gender::Male) => "male",
        Some(Gender::Female) => "female",
        Some(Gender::Unknown) => "unknown",
    }
}

/// Train a GMM on the pooled training-split MFCC frames (optionally one
/// gender only), fit the LGP normalization statistics on the same stream,
/// and write the model.
pub fn stage_train_gmm(ws: &Workspace, gender: Option<Gender>) -> Result<()> {
    let tag = gender_tag(gender);
    let entries: Vec<UtteranceManifestEntry> = parse_manifest(&ws.train_manifest_path())?
        .into_iter()
        .filter(|e| gender.map_or(true, |g| e.gender == g))
        .collect();
    if entries.is_empty() {
        return Err(Error::NotEnoughData(format!(
            "no training utterances for gender '{tag}'"
        )));
    }
    let seed = ws.cfg.seed.wrapping_add(match tag {
        "male" => 1,
        "female" => 2,
        _ => 0,
    });
    let frames = pool_frames(ws, &entries, seed)?;
    let outcome = em_train(
        frames.view(),
        ws.cfg.gmm.n_components,
        ws.cfg.gmm.n_iters,
        seed,
    )?;
    let mut gmm = outcome.gmm;
    let dir = ws.mfcc_dir();
    let feats: Vec<AcousticFeatureMatrix> = entries
        .iter()
        .map(|e| read_feat(&Workspace::feat_path(&dir, &e.utt_id), Some(ws.feat_hash())))
        .collect::<Result<_>>()?;
    gmm.norm_stats = Some(fit_norm_stats(&gmm, feats.iter())?);
    let path = ws.gmm_path(tag);
    std::fs::create_dir_all(path.parent().unwrap())
        .map_err(|e| Error::io(path.parent().unwrap(), e))?;
    write_gmm(&path, &gmm, ws.gmm_hash())
}

/// Score every utterance (train and eval) against the tagged GMM and write
/// normalized LGP features.
pub fn stage_extract_lgp(ws: &Workspace, gender: Option<Gender>) -> Result<()> {
    let tag = gender_tag(gender);
    let gmm = read_gmm(&ws.gmm_path(tag), Some(ws.gmm_hash()))?;
    let stats = gmm
        .norm_stats
        .clone()
        .ok_or_else(|| Error::Config(format!("GMM '{tag}' has no normalization stats")))?;
    let out_dir = ws.lgp_dir(tag);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mfcc_dir = ws.mfcc_dir();
    for entry in parse_manifest(&ws.manifest_path())? {
        let feat = read_feat(&Workspace::feat_path(&mfcc_dir, &entry.utt_id), Some(ws.feat_hash()))?;
        let lgp = lgp_normalize(&lgp_extract(&gmm, &feat)?, &stats);
        write_feat(&Workspace::feat_path(&out_dir, &entry.utt_id), &lgp, ws.gmm_hash())?;
    }
    Ok(())
}

/// Sorted speaker ids of a manifest, fixing the label indexing.
fn speaker_index(entries: &[UtteranceManifestEntry]) -> Vec<String> {
    let mut speakers: Vec<String> = entries.iter().map(|e| e.speaker_id.clone()).collect();
    speakers.sort();
    speakers.dedup();
    speakers
}

fn write_train_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap())
        .map_err(|e| Error::io(path.parent().unwrap(), e))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for log in logs {
        writeln!(file, "{}", serde_json::to_string(log).expect("log serializes"))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Feature directory used by the single-path model: normalized LGP, or raw
/// mean-normalized MFCC when the GMM layer is ablated.
fn single_feature_dir(ws: &Workspace) -> PathBuf {
    if ws.cfg.model.ablate_gmm {
        ws.mfcc_dir()
    } else {
        ws.lgp_dir("all")
    }
}

fn single_feature_hash(ws: &Workspace) -> u64 {
    if ws.cfg.model.ablate_gmm {
        ws.feat_hash()
    } else {
        ws.gmm_hash()
    }
}

/// Train the single-path model on the training split; write checkpoint and
/// per-epoch JSONL log.
pub fn stage_train(ws: &Workspace) -> Result<Vec<EpochLog>> {
    let entries = parse_manifest(&ws.train_manifest_path())?;
    let speakers = speaker_index(&entries);
    if speakers.len() < 2 {
        return Err(Error::SingleClass);
    }
    let dir = single_feature_dir(ws);
    let utterances: Vec<Utterance> = entries
        .iter()
        .map(|e| {
            Ok(Utterance {
                feat: read_feat(&Workspace::feat_path(&dir, &e.utt_id), Some(single_feature_hash(ws)))?,
                speaker: speakers.binary_search(&e.speaker_id).unwrap(),
            })
        })
        .collect::<Result<_>>()?;
    let outcome = train_single_path(&ws.cfg.model, &ws.cfg.train, &utterances, speakers.len());
    let ckpt = ws.checkpoint_path(false);
    std::fs::create_dir_all(ckpt.parent().unwrap())
        .map_err(|e| Error::io(ckpt.parent().unwrap(), e))?;
    write_checkpoint(&ckpt, &ws.cfg.model, &outcome.params, ws.ckpt_hash())?;
    write_train_log(&ws.train_log_path("train_log"), &outcome.logs)?;
    Ok(outcome.logs)
}

/// Train the dual-path model (two-step unless `no_two_step`); write
/// checkpoint and logs.
pub fn stage_train_dual(ws: &Workspace, two_step: bool) -> Result<Vec<EpochLog>> {
    let entries = parse_manifest(&ws.train_manifest_path())?;
    let speakers = speaker_index(&entries);
    if speakers.len() < 2 {
        return Err(Error::SingleClass);
    }
    let male_dir = ws.lgp_dir("male");
    let female_dir = ws.lgp_dir("female");
    let utterances: Vec<DualUtterance> = entries
        .iter()
        .map(|e| {
            Ok(DualUtterance {
                feat_male: read_feat(&Workspace::feat_path(&male_dir, &e.utt_id), Some(ws.gmm_hash()))?,
                feat_female: read_feat(
                    &Workspace::feat_path(&female_dir, &e.utt_id),
                    Some(ws.gmm_hash()),
                )?,
                speaker: speakers.binary_search(&e.speaker_id).unwrap(),
            })
        })
        .collect::<Result<_>>()?;
    let outcome = train_dual_path(
        &ws.cfg.model,
        &ws.cfg.train,
        &utterances,
        speakers.len(),
        two_step,
    );
    let ckpt = ws.checkpoint_path(true);
    std::fs::create_dir_all(ckpt.parent().unwrap())
        .map_err(|e| Error::io(ckpt.parent().unwrap(), e))?;
    write_checkpoint(&ckpt, &ws.cfg.model, &outcome.params, ws.ckpt_hash())?;
    write_train_log(&ws.train_log_path("train_log_step1_male"), &outcome.step1_male_logs)?;
    write_train_log(
        &ws.train_log_path("train_log_step1_female"),
        &outcome.step1_female_logs,
    )?;
    write_train_log(&ws.train_log_path("train_log_step2"), &outcome.step2_logs)?;
    Ok(outcome.step2_logs)
}

/// Embed every unique trial utterance once (full length, eval mode) and
/// score all trials by cosine similarity.
pub fn stage_score(ws: &Workspace, dual: bool) -> Result<Vec<TrialScore>> {
    let ckpt = read_checkpoint(&ws.checkpoint_path(dual), Some(ws.ckpt_hash()))?;
    let mut params = ckpt.params;
    let trials = parse_trials(&ws.trials_path())?;
    let eval_entries = parse_manifest(&ws.eval_manifest_path())?;
    let known: std::collections::HashSet<&str> =
        eval_entries.iter().map(|e| e.utt_id.as_str()).collect();

    let mut cache: HashMap<String, Vec<f32>> = HashMap::new();
    let mut embed = |utt_id: &str, params: &mut crate::nncore::ParamTree<f32>| -> Result<Vec<f32>> {
        if !known.contains(utt_id) {
            return Err(Error::UnresolvedUttId(utt_id.to_string()));
        }
        if let Some(e) = cache.get(utt_id) {
            return Ok(e.clone());
        }
        let emb = if dual {
            let fm = read_feat(
                &Workspace::feat_path(&ws.lgp_dir("male"), utt_id),
                Some(ws.gmm_hash()),
            )?;
            let ff = read_feat(
                &Workspace::feat_path(&ws.lgp_dir("female"), utt_id),
                Some(ws.gmm_hash()),
            )?;
            embed_utterance(&ckpt.config, params, &fm, Some(&ff))
        } else {
            let feat = read_feat(
                &Workspace::feat_path(&single_feature_dir(ws), utt_id),
                Some(single_feature_hash(ws)),
            )?;
            embed_utterance(&ckpt.config, params, &feat, None)
        };
        cache.insert(utt_id.to_string(), emb.clone());
        Ok(emb)
    };

    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials {
        let a = embed(&t.enroll_utt, &mut params)?;
        let b = embed(&t.test_utt, &mut params)?;
        scores.push(TrialScore {
            label: t.label,
            enroll_utt: t.enroll_utt.clone(),
            test_utt: t.test_utt.clone(),
            score: cosine(&a, &b)?,
        });
    }
    write_scores(&ws.scores_path(), &scores)?;
    Ok(scores)
}

/// Compute the metric report from the written scores and trials.
pub fn stage_eval(ws: &Workspace) -> Result<EvalReport> {
    let trials = parse_trials(&ws.trials_path())?;
    let scores = crate::eval::read_scores(&ws.scores_path(), &trials)?;
    let report = compute_report(&scores, &ws.cfg.dcf)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(ws.report_path(), json + "\n")
        .map_err(|e| Error::io(&ws.report_path(), e))?;
    Ok(report)
}

/// All stages for the single-path system, start to finish.
pub fn run_pipeline(ws: &Workspace) -> Result<EvalReport> {
    stage_synth_data(ws)?;
    stage_extract_mfcc(ws)?;
    if ws.cfg.model.ablate_gmm {
        stage_train(ws)?;
    } else {
        stage_train_gmm(ws, None)?;
        stage_extract_lgp(ws, None)?;
        stage_train(ws)?;
    }
    stage_score(ws, false)?;
    stage_eval(ws)
}

/// All stages for the dual-path system.
pub fn run_pipeline_dual(ws: &Workspace, two_step: bool) -> Result<EvalReport> {
    stage_synth_data(ws)?;
    stage_extract_mfcc(ws)?;
    stage_train_gmm(ws, Some(Gender::Male))?;
    stage_train_gmm(ws, Some(Gender::Female))?;
    stage_extract_lgp(ws, Some(Gender::Male))?;
    stage_extract_lgp(ws, Some(Gender::Female))?;
    stage_train_dual(ws, two_step)?;
    stage_score(ws, true)?;
    stage_eval(ws)
}

pub const ABLATION_VARIANTS: [&str; 4] = ["base", "no_gmm", "no_mfa", "no_2s"];

/// Run a named ablation variant in its own sub-workspace and return the
/// report. `base`, `no_gmm`, and `no_mfa` are single-path systems; `no_2s`
/// is the dual-path system trained jointly.
pub fn run_variant(root: &Path, cfg: &RunConfig, variant: &str) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    let dir = root.join(variant);
    match variant {
        "base" => run_pipeline(&Workspace::new(dir, cfg)),
        "no_gmm" => {
            cfg.model.ablate_gmm = true;
            run_pipeline(&Workspace::new(dir, cfg))
        }
        "no_mfa" => {
            cfg.model.ablate_mfa = true;
            run_pipeline(&Workspace::new(dir, cfg))
        }
        "no_2s" => run_pipeline_dual(&Workspace::new(dir, cfg), false),
        other => Err(Error::Config(format!("unknown ablation variant '{other}'"))),
    }
}

/// Run the base system plus the requested variants; write a comparison table
/// (text and JSON) under `root`.
pub fn run_ablation(
    root: &Path,
    cfg: &RunConfig,
    variants: &[String],
) -> Result<Vec<(String, EvalReport)>> {
    let mut rows = Vec::new();
    let mut names: Vec<String> = vec!["base".to_string()];
    for v in variants {
        if v != "base" && !names.contains(v) {
            names.push(v.clone());
        }
    }
    for name in &names {
        let report = run_variant(root, cfg, name)?;
        rows.push((name.clone(), report));
    }
    let mut table = format!("{:<10} {:>8} {:>10}\n", "variant", "EER", "minDCF");
    for (name, r) in &rows {
        table += &format!("{:<10} {:>7.2}% {:>10.4}\n", name, r.eer * 100.0, r.min_dcf);
    }
    std::fs::write(root.join("ablation.txt"), &table)
        .map_err(|e| Error::io(&root.join("ablation.txt"), e))?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|(name, r)| {
            serde_json::json!({
                "variant": name,
                "eer": r.eer,
                "min_dcf": r.min_dcf,
            })
        })
        .collect();
    std::fs::write(
        root.join("ablation.json"),
        serde_json::to_string_pretty(&json).expect("serializes") + "\n",
    )
    .map_err(|e| Error::io(&root.join("ablation.json"), e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::desk(7);
        let b = RunConfig::desk(7);
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = RunConfig::desk(8);
        assert_ne!(config_hash(&a), config_hash(&c));
        let mut d = RunConfig::desk(7);
        d.gmm.n_components = 32;
        assert_ne!(config_hash(&a), config_hash(&d));
    }

    #[test]
    fn config_toml_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let cfg = RunConfig::desk(3);
        save_config(&path, &cfg).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(config_hash(&cfg), config_hash(&back));
    }

    fn micro_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::desk(seed);
        cfg.data = DataConfig {
            n_speakers: 4,
            utts_per_speaker: 5,
            eval_per_speaker: 2,
        };
        cfg.gmm.n_components = 8;
        cfg.gmm.n_iters = 5;
        cfg.gmm.max_train_frames = 2_000;
        cfg.model = ModelConfig {
            n_gaussians: 8,
            stage_channels: [8, 8, 8, 8],
            stage_blocks: [1, 1, 1, 1],
            asp_bottleneck: 4,
            embedding_dim: 16,
            ..ModelConfig::default()
        };
        cfg.train.epochs = 2;
        cfg.train.step2_epochs = 1;
        cfg.train.batch_size = 8;
        cfg.train.target_frames = 50;
        cfg
    }

    #[test]
    fn micro_pipeline_end_to_end_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(11);
        let r1 = run_pipeline(&Workspace::new(dir.path().join("a"), cfg.clone())).unwrap();
        let r2 = run_pipeline(&Workspace::new(dir.path().join("b"), cfg)).unwrap();
        assert!(r1.eer >= 0.0 && r1.eer <= 1.0);
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        let ja = std::fs::read(dir.path().join("a/report.json")).unwrap();
        let jb = std::fs::read(dir.path().join("b/report.json")).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn stage_composition_matches_monolithic_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(13);
        let mono = run_pipeline(&Workspace::new(dir.path().join("mono"), cfg.clone())).unwrap();
        let ws = Workspace::new(dir.path().join("staged"), cfg);
        stage_synth_data(&ws).unwrap();
        stage_extract_mfcc(&ws).unwrap();
        stage_train_gmm(&ws, None).unwrap();
        stage_extract_lgp(&ws, None).unwrap();
        stage_train(&ws).unwrap();
        stage_score(&ws, false).unwrap();
        let staged = stage_eval(&ws).unwrap();
        assert_eq!(
            serde_json::to_string(&mono).unwrap(),
            serde_json::to_string(&staged).unwrap()
        );
    }

    #[test]
    fn micro_dual_pipeline_runs() {
        let dir = tempfile::tempdir().unwrap();
        let report =
            run_pipeline_dual(&Workspace::new(dir.path(), micro_config(17)), true).unwrap();
        assert!(report.eer >= 0.0 && report.eer <= 1.0);
    }

    #[test]
    fn hash_mismatch_rejected_across_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(19);
        let ws = Workspace::new(dir.path(), cfg.clone());
        stage_synth_data(&ws).unwrap();
        stage_extract_mfcc(&ws).unwrap();
        // a workspace with a different seed sees mismatched feature hashes
        let mut other = cfg;
        other.seed = 20;
        let ws2 = Workspace {
            root: dir.path().to_path_buf(),
            hash: config_hash(&other),
            cfg: other,
        };
        assert!(matches!(
            stage_train_gmm(&ws2, None),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }
}
