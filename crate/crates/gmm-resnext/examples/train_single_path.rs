//! Run the staged single-path pipeline end to end at a micro scale:
//! synthesize a corpus, extract MFCCs, fit a GMM, extract LGP features,
//! train the embedding network, score the trials, and report EER/minDCF.
//!
//! Run with: cargo run --release --example train_single_path

use gmm_resnext::model::ModelConfig;
use gmm_resnext::pipeline::{
    run_pipeline, DataConfig, RunConfig, Workspace,
};

fn micro_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk(seed);
    cfg.data = DataConfig {
        n_speakers: 6,
        utts_per_speaker: 6,
        eval_per_speaker: 2,
    };
    cfg.gmm.n_components = 16;
    cfg.gmm.n_iters = 8;
    cfg.gmm.max_train_frames = 8_000;
    cfg.model = ModelConfig {
        n_gaussians: 16,
        stage_channels: [16, 16, 16, 16],
        stage_blocks: [1, 1, 1, 1],
        asp_bottleneck: 8,
        embedding_dim: 32,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 6;
    cfg.train.batch_size = 12;
    cfg.train.target_frames = 100;
    cfg
}

fn main() -> gmm_resnext::Result<()> {
    let root = std::env::temp_dir().join("gmm_resnext_example_single");
    let _ = std::fs::remove_dir_all(&root);
    let ws = Workspace::new(&root, micro_config(5));

    let report = run_pipeline(&ws)?;

    let log = std::fs::read_to_string(ws.train_log_path("train_log"))
        .expect("pipeline wrote the training log");
    println!("training log:");
    for line in log.lines() {
        let v: gmm_resnext::train::EpochLog = serde_json::from_str(line).unwrap();
        println!(
            "  epoch {} lr {:.6} loss {:.4} acc {:.3}",
            v.epoch, v.lr, v.mean_loss, v.accuracy
        );
    }
    println!(
        "EER {:.2}%  minDCF {:.4}  ({} target / {} nontarget trials)",
        report.eer * 100.0,
        report.min_dcf,
        report.n_target,
        report.n_nontarget
    );
    println!("artifacts under {}", ws.root.display());
    Ok(())
}
