//! Train the gender-conditioned dual-path model with the two-step recipe:
//! step 1 trains each path on its own gender-specific LGP features, step 2
//! freezes both paths and trains a fusion layer on their concatenated
//! embeddings.
//!
//! Run with: cargo run --release --example train_dual_two_step

use gmm_resnext::model::ModelConfig;
use gmm_resnext::pipeline::{
    run_pipeline_dual, DataConfig, RunConfig, Workspace,
};

fn main() -> gmm_resnext::Result<()> {
    let root = std::env::temp_dir().join("gmm_resnext_example_dual");
    let _ = std::fs::remove_dir_all(&root);

    let mut cfg = RunConfig::desk(9);
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
    cfg.train.epochs = 4;
    cfg.train.step2_epochs = 3;
    cfg.train.batch_size = 12;
    cfg.train.target_frames = 100;

    let ws = Workspace::new(&root, cfg);
    let report = run_pipeline_dual(&ws, true)?;

    for name in ["train_log_step1_male", "train_log_step1_female", "train_log_step2"] {
        let log = std::fs::read_to_string(ws.train_log_path(name))
            .expect("pipeline wrote the stage log");
        println!("{name}:");
        for line in log.lines() {
            let v: gmm_resnext::train::EpochLog = serde_json::from_str(line).unwrap();
            println!(
                "  epoch {} loss {:.4} acc {:.3}",
                v.epoch, v.mean_loss, v.accuracy
            );
        }
    }
    println!(
        "dual-path EER {:.2}%  minDCF {:.4}",
        report.eer * 100.0,
        report.min_dcf
    );
    Ok(())
}
