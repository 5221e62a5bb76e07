//! Verify the reverse-mode gradients of a small embedding network against
//! central finite differences, in f64.
//!
//! Run with: cargo run --release --example gradient_check

use gmm_resnext::model::{forward_embedding, init_params, ModelConfig};
use gmm_resnext::nncore::gradcheck::finite_diff_check;
use gmm_resnext::nncore::Mode;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let cfg = ModelConfig {
        n_gaussians: 12,
        stage_channels: [6, 6, 6, 6],
        stage_blocks: [1, 1, 1, 1],
        asp_bottleneck: 4,
        embedding_dim: 8,
        ..ModelConfig::default()
    };
    let mut tree = init_params::<f64>(&cfg, "", 3);
    let mut rng = ChaCha20Rng::seed_from_u64(300);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 12, 8]), || {
        rng.gen_range(-1.0..1.0)
    });

    let report = finite_diff_check(
        &mut tree,
        |tape, tree| {
            let e = forward_embedding(tape, tree, &cfg, "", x.clone(), Mode::Train);
            let s = tape.square(e);
            tape.sum_all(s)
        },
        1e-4,
        1e-3,
    );
    println!(
        "checked {} parameter gradients; worst relative error {:.3e}; \
         failures: {}",
        report.n_checked,
        report.worst_rel_error,
        report.failures.len()
    );
    for f in report.failures.iter().take(5) {
        println!(
            "  {}[{}]: analytic {:.6e}, numeric {:.6e}",
            f.leaf, f.index, f.analytic, f.numeric
        );
    }
    assert!(report.ok());
    println!("all gradients match central differences");
}
