//! Generate a small deterministic synthetic corpus and extract
//! mean-normalized MFCC features from it.
//!
//! Run with: cargo run --release --example synthesize_corpus

use gmm_resnext::dataio::{load_wav, make_trials, split_manifest, synth_corpus};
use gmm_resnext::features::{mean_normalize, mfcc, MfccConfig};

fn main() -> gmm_resnext::Result<()> {
    let dir = std::env::temp_dir().join("gmm_resnext_example_corpus");
    let _ = std::fs::remove_dir_all(&dir);

    let entries = synth_corpus(&dir, 4, 5, 7)?;
    println!("wrote {} utterances to {}", entries.len(), dir.display());

    let (train, eval) = split_manifest(&entries, 2);
    let trials = make_trials(&eval);
    let n_target = trials.iter().filter(|t| t.label == gmm_resnext::dataio::TrialLabel::Target).count();
    println!(
        "split: {} train / {} eval utterances, {} trials ({} target)",
        train.len(),
        eval.len(),
        trials.len(),
        n_target
    );

    let cfg = MfccConfig::default();
    for entry in entries.iter().take(3) {
        let wave = load_wav(&entry.path)?;
        let feat = mean_normalize(&mfcc(&wave, &cfg)?);
        let col0_mean: f32 =
            feat.data.column(0).sum() / feat.n_frames() as f32;
        println!(
            "{}: {} samples -> {} frames x {} coeffs (post-normalization \
             mean of c0 = {:.2e})",
            entry.utt_id,
            wave.samples.len(),
            feat.n_frames(),
            feat.dim(),
            col0_mean
        );
    }
    Ok(())
}
