//! Command-line interface: one subcommand per pipeline stage plus the
//! composed pipeline and the ablation matrix.

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::dataio::{parse_manifest, Gender};
use crate::error::{Error, Result};
use crate::features::read_feat;
use crate::model::read_checkpoint;
use crate::pipeline::{
    load_config, run_ablation, run_pipeline, run_pipeline_dual, stage_eval, stage_extract_lgp,
    stage_extract_mfcc, stage_score, stage_synth_data, stage_train, stage_train_dual,
    stage_train_gmm, RunConfig, Workspace,
};
use crate::train::embed_utterance;

pub const SEED_ENV_VAR: &str = "GMMRESNEXT_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "gmm-resnext",
    version,
    about = "Speaker verification with log Gaussian probability features and a ResNext-style embedding extractor"
)]
pub struct Cli {
    /// Run configuration (TOML). Defaults to the desk-scale profile when
    /// omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Working directory holding all artifacts of this run.
    #[arg(long, global = true, default_value = "work")]
    pub workdir: PathBuf,

    /// Override the GMM component count (and the model's input width).
    #[arg(long, global = true)]
    pub components: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenderArg {
    All,
    Male,
    Female,
}

impl GenderArg {
    fn to_filter(self) -> Option<Gender> {
        match self {
            GenderArg::All => None,
            GenderArg::Male => Some(Gender::Male),
            GenderArg::Female => Some(Gender::Female),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus, manifests, and trial list.
    SynthData,
    /// Extract mean-normalized MFCC features for every utterance.
    ExtractMfcc,
    /// Train a diagonal GMM on the training split.
    TrainGmm {
        #[arg(long, value_enum, default_value_t = GenderArg::All)]
        gender: GenderArg,
    },
    /// Extract normalized LGP features with a trained GMM.
    ExtractLgp {
        #[arg(long, value_enum, default_value_t = GenderArg::All)]
        gender: GenderArg,
    },
    /// Train the single-path embedding model.
    Train,
    /// Train the dual-path model (two-step unless --no-two-step).
    TrainDual {
        #[arg(long)]
        no_two_step: bool,
    },
    /// Write embeddings of the evaluation utterances to a text file.
    Embed {
        #[arg(long)]
        dual: bool,
        #[arg(long, default_value = "embeddings.txt")]
        out: PathBuf,
    },
    /// Score all trials with a trained checkpoint.
    Score {
        #[arg(long)]
        dual: bool,
    },
    /// Compute EER/minDCF from the written scores.
    Eval,
    /// Run every stage in order.
    Pipeline {
        #[arg(long)]
        dual: bool,
        #[arg(long)]
        no_two_step: bool,
    },
    /// Run the base system plus ablation variants and emit a comparison
    /// table.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = [
            "no_gmm".to_string(), "no_mfa".to_string(), "no_2s".to_string()
        ])]
        variants: Vec<String>,
    },
}

/// Process exit code for an error: 1 for configuration/usage problems, 3 for
/// numeric/degenerate-data failures, 2 for data and I/O errors.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::SingleClass | Error::ZeroVector | Error::NotEnoughData(_) => 3,
        _ => 2,
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::desk(0),
    };
    if let Ok(text) = std::env::var(SEED_ENV_VAR) {
        let seed: u64 = text
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}='{text}' is not a u64")))?;
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(n) = cli.components {
        cfg.gmm.n_components = n;
        if !cfg.model.ablate_gmm {
            cfg.model.n_gaussians = n;
        }
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn write_embeddings(ws: &Workspace, dual: bool, out: &PathBuf) -> Result<()> {
    let ckpt = read_checkpoint(&ws.checkpoint_path(dual), Some(ws.ckpt_hash()))?;
    let mut params = ckpt.params;
    let mut file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    for entry in parse_manifest(&ws.eval_manifest_path())? {
        let emb = if dual {
            let fm = read_feat(
                &ws.lgp_dir("male").join(format!("{}.feat", entry.utt_id)),
                Some(ws.gmm_hash()),
            )?;
            let ff = read_feat(
                &ws.lgp_dir("female").join(format!("{}.feat", entry.utt_id)),
                Some(ws.gmm_hash()),
            )?;
            embed_utterance(&ckpt.config, &mut params, &fm, Some(&ff))
        } else {
            let dir = if ws.cfg.model.ablate_gmm {
                ws.mfcc_dir()
            } else {
                ws.lgp_dir("all")
            };
            let hash = if ws.cfg.model.ablate_gmm {
                ws.feat_hash()
            } else {
                ws.gmm_hash()
            };
            let feat = read_feat(&dir.join(format!("{}.feat", entry.utt_id)), Some(hash))?;
            embed_utterance(&ckpt.config, &mut params, &feat, None)
        };
        let values: Vec<String> = emb.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{} {}", entry.utt_id, values.join(" "))
            .map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

/// Execute a parsed invocation. Stage progress goes to stdout; errors are
/// returned for the binary to map to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let ws = Workspace::new(&cli.workdir, cfg);
    match cli.command {
        Command::SynthData => stage_synth_data(&ws)?,
        Command::ExtractMfcc => stage_extract_mfcc(&ws)?,
        Command::TrainGmm { gender } => stage_train_gmm(&ws, gender.to_filter())?,
        Command::ExtractLgp { gender } => stage_extract_lgp(&ws, gender.to_filter())?,
        Command::Train => {
            let logs = stage_train(&ws)?;
            for log in &logs {
                println!(
                    "epoch {:>3}  lr {:.6}  loss {:.4}  acc {:.3}",
                    log.epoch, log.lr, log.mean_loss, log.accuracy
                );
            }
        }
        Command::TrainDual { no_two_step } => {
            let logs = stage_train_dual(&ws, !no_two_step)?;
            for log in &logs {
                println!(
                    "epoch {:>3}  lr {:.6}  loss {:.4}  acc {:.3}",
                    log.epoch, log.lr, log.mean_loss, log.accuracy
                );
            }
        }
        Command::Embed { dual, out } => write_embeddings(&ws, dual, &out)?,
        Command::Score { dual } => {
            let scores = stage_score(&ws, dual)?;
            println!("scored {} trials -> {}", scores.len(), ws.scores_path().display());
        }
        Command::Eval => {
            let report = stage_eval(&ws)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
        Command::Pipeline { dual, no_two_step } => {
            let report = if dual {
                run_pipeline_dual(&ws, !no_two_step)?
            } else {
                run_pipeline(&ws)?
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
        Command::Ablate { variants } => {
            let rows = run_ablation(&ws.root, &ws.cfg, &variants)?;
            println!("{:<10} {:>8} {:>10}", "variant", "EER", "minDCF");
            for (name, r) in &rows {
                println!("{:<10} {:>7.2}% {:>10.4}", name, r.eer * 100.0, r.min_dcf);
            }
        }
    }
    Ok(())
}
