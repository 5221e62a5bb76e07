//! Run the base system and its ablation variants (raw MFCC input instead of
//! LGP, no multi-layer feature aggregation, dual path trained jointly
//! instead of in two steps) and print the comparison table.
//!
//! Run with: cargo run --release --example ablation_matrix

use gmm_resnext::model::ModelConfig;
use gmm_resnext::pipeline::{run_ablation, DataConfig, RunConfig};

fn main() -> gmm_resnext::Result<()> {
    let root = std::env::temp_dir().join("gmm_resnext_example_ablation");
    let _ = std::fs::remove_dir_all(&root);

    let mut cfg = RunConfig::desk(13);
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

    let variants = ["no_gmm", "no_mfa", "no_2s"].map(String::from);
    let rows = run_ablation(&root, &cfg, &variants)?;
    println!("{:<10} {:>8} {:>10}", "variant", "EER", "minDCF");
    for (name, report) in &rows {
        println!(
            "{:<10} {:>7.2}% {:>10.4}",
            name,
            report.eer * 100.0,
            report.min_dcf
        );
    }
    Ok(())
}
