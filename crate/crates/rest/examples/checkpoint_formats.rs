//! The two on-disk formats: single-tensor dumps and multi-tensor checkpoints.
//!
//! Tensor files ("RESTTNSR") hold one f32 tensor with its shape; checkpoint
//! files ("RESTCKPT") hold a name-sorted list of tensors. Both are
//! little-endian, versioned, and byte-stable: saving the same data twice
//! produces identical files, so artifact hashes are reproducible.
//!
//! Run with: cargo run --release --example checkpoint_formats

use rest::config::ModelConfig;
use rest::model::checkpoint::{load_checkpoint, save_checkpoint};
use rest::model::DitParams;
use rest::rng::Rng;
use rest::tensor::io::{load_tensor, save_tensor};
use rest::tensor::Tensor;

fn main() -> rest::error::Result<()> {
    let dir = std::env::temp_dir().join("rest_example_formats");
    std::fs::create_dir_all(&dir)?;

    // Single tensor round trip.
    let mut rng = Rng::new(77);
    let t = Tensor::randn(&[3, 4, 5], &mut rng);
    let tpath = dir.join("latents.tnsr");
    save_tensor(&tpath, &t)?;
    let back = load_tensor(&tpath)?;
    assert_eq!(back.dims(), t.dims());
    assert_eq!(back.data(), t.data());
    println!("tensor round trip ok: {:?} ({} bytes)", t.dims(), std::fs::metadata(&tpath)?.len());

    // Whole-model checkpoint round trip through named parameters.
    let cfg = ModelConfig::tiny(2, 2, 3);
    let p = DitParams::init(cfg, &mut Rng::new(5))?;
    let cpath = dir.join("model.ckpt");
    save_checkpoint(&cpath, &p.named_params())?;
    let entries = load_checkpoint(&cpath)?;
    let restored = DitParams::from_named(cfg, &entries)?;
    for ((name, a), b) in p.named_params().iter().zip(restored.named_params()) {
        assert_eq!(a.data(), b.1.data(), "mismatch in {name}");
    }
    println!(
        "checkpoint round trip ok: {} tensors, {} parameters, {} bytes",
        entries.len(),
        p.param_count(),
        std::fs::metadata(&cpath)?.len()
    );

    // Determinism: identical bytes on re-save.
    let cpath2 = dir.join("model2.ckpt");
    save_checkpoint(&cpath2, &p.named_params())?;
    assert_eq!(std::fs::read(&cpath)?, std::fs::read(&cpath2)?);
    println!("re-saved checkpoint is byte-identical");
    Ok(())
}
