//! Generate the synthetic talking-blob corpus and inspect its ground truth.
//!
//! Each clip is a colored blob whose aperture opens and closes in sync with a
//! scripted audio energy envelope — so lip-sync, identity, and boundary
//! metrics all have known answers.
//!
//! Run with: cargo run --release --example synthetic_corpus

use rest::config::ModelConfig;
use rest::corpus::{make_synthetic_corpus, save_corpus, MotionParams};

fn main() -> rest::error::Result<()> {
    let cfg = ModelConfig::desk(4);
    let motion = MotionParams::default();
    let clips = make_synthetic_corpus(42, 3, &cfg.video, &cfg.speech, &motion)?;

    for clip in &clips {
        println!(
            "{}: video {:?}, speech features {:?}, identity {:?}",
            clip.id,
            clip.video.dims(),
            clip.features.dims(),
            clip.identity
        );
        let n = clip.energy.len().min(6);
        println!("  energy envelope head: {:?}", &clip.energy[..n]);
        println!("  aperture head:        {:?}", &clip.aperture[..n]);
    }

    let dir = std::env::temp_dir().join("rest_example_corpus");
    std::fs::create_dir_all(&dir)?;
    save_corpus(&dir, 42, &cfg.video, &cfg.speech, &motion, &clips)?;
    println!("saved corpus with manifest to {}", dir.display());
    Ok(())
}
