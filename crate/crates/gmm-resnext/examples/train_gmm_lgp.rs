//! Fit a diagonal GMM with EM on pooled MFCC frames and turn the frames of
//! one utterance into normalized log Gaussian probability (LGP) features.
//!
//! Run with: cargo run --release --example train_gmm_lgp

use gmm_resnext::dataio::{load_wav, synth_corpus};
use gmm_resnext::features::{mean_normalize, mfcc, MfccConfig};
use gmm_resnext::gmm::{em_train, fit_norm_stats, lgp_extract, lgp_normalize};
use ndarray::Array2;

fn main() -> gmm_resnext::Result<()> {
    let dir = std::env::temp_dir().join("gmm_resnext_example_gmm");
    let _ = std::fs::remove_dir_all(&dir);
    let entries = synth_corpus(&dir, 4, 4, 11)?;

    let cfg = MfccConfig::default();
    let feats: Vec<_> = entries
        .iter()
        .map(|e| Ok(mean_normalize(&mfcc(&load_wav(&e.path)?, &cfg)?)))
        .collect::<gmm_resnext::Result<_>>()?;

    // pool every frame of the corpus into one training matrix, in f64
    let dim = feats[0].dim();
    let n_frames: usize = feats.iter().map(|f| f.n_frames()).sum();
    let mut pooled = Array2::<f64>::zeros((n_frames, dim));
    let mut row = 0;
    for f in &feats {
        for frame in f.data.rows() {
            for (dst, &src) in pooled.row_mut(row).iter_mut().zip(frame) {
                *dst = src as f64;
            }
            row += 1;
        }
    }
    println!("pooled {n_frames} frames of dimension {dim}");

    let outcome = em_train(pooled.view(), 8, 10, 3)?;
    println!("EM mean log-likelihood per iteration:");
    for (i, ll) in outcome.log_likelihoods.iter().enumerate() {
        println!("  iter {i:>2}: {ll:.4}");
    }
    let monotone = outcome
        .log_likelihoods
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-8);
    println!("non-decreasing: {monotone}");

    let stats = fit_norm_stats(&outcome.gmm, feats.iter())?;
    let lgp = lgp_normalize(&lgp_extract(&outcome.gmm, &feats[0])?, &stats);
    println!(
        "LGP features for {}: {} frames x {} components, first frame: {:?}",
        entries[0].utt_id,
        lgp.n_frames(),
        lgp.dim(),
        &lgp.data.row(0).to_vec()[..4]
    );
    Ok(())
}
