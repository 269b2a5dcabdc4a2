//! Train the non-streaming teacher with asynchronous per-chunk noise levels.
//!
//! Every training step draws an independent noise level for each chunk, so
//! the model learns to denoise a chunk while its neighbors sit at different
//! points on the path — the property the streaming student later relies on.
//!
//! Run with: cargo run --release --example teacher_training

use rest::codec::{train_speech_codec, train_video_codec, SpeechCodec, VideoCodec};
use rest::config::{ModelConfig, TrainConfig};
use rest::corpus::{make_synthetic_corpus, MotionParams};
use rest::model::DitParams;
use rest::rng::Rng;
use rest::train::{encode_clip, train_teacher};

fn main() -> rest::error::Result<()> {
    let cfg = ModelConfig::tiny(2, 2, 3);
    let motion = MotionParams::default();
    let corpus = make_synthetic_corpus(21, 2, &cfg.video, &cfg.speech, &motion)?;

    // Codecs first: the diffusion model lives in their latent spaces.
    let mut rng = Rng::new(3);
    let mut vc = VideoCodec::init(cfg.video, &mut rng)?;
    let mut sc = SpeechCodec::init(cfg.speech, &mut rng)?;
    let videos: Vec<_> = corpus.iter().map(|c| c.video.clone()).collect();
    let feats: Vec<_> = corpus.iter().map(|c| c.features.clone()).collect();
    train_video_codec(&mut vc, &videos, 60, 1e-2)?;
    train_speech_codec(&mut sc, &feats, 60, 1e-2)?;

    let clips: Vec<_> = corpus
        .iter()
        .map(|c| encode_clip(c, &vc, &sc))
        .collect::<rest::error::Result<_>>()?;

    let mut teacher = DitParams::init(cfg, &mut Rng::new(4))?;
    println!("teacher parameters: {}", teacher.param_count());

    let tc = TrainConfig { lr: 1e-3, steps: 300, seed: 21, ..TrainConfig::default() };
    let rows = train_teacher(&mut teacher, &clips, &tc)?;
    for r in rows.iter().step_by(60) {
        println!("step {:4}  flow loss {:.4}  grad norm {:.3}", r.step, r.flow, r.grad_norm);
    }
    let last = rows.last().unwrap();
    println!("final flow loss {:.4}", last.flow);
    assert!(last.flow < rows[0].flow, "loss should decrease");
    Ok(())
}
