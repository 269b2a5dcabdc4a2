//! End-to-end guided generation with the evaluation metrics.
//!
//! Trains a small teacher briefly, distills a streaming student, generates
//! with joint classifier-free guidance (one scale over audio + identity
//! conditions), decodes, and scores boundary seamlessness, identity drift,
//! and audio sync against the synthetic clip's ground truth.
//!
//! Run with: cargo run --release --example guided_generation_metrics

use rest::codec::{train_speech_codec, train_video_codec, SpeechCodec, VideoCodec};
use rest::config::{ModelConfig, TrainConfig};
use rest::corpus::{make_clip, make_synthetic_corpus, MotionParams};
use rest::infer::{evaluate, generate, CacheKind};
use rest::model::DitParams;
use rest::rng::Rng;
use rest::train::{encode_clip, train_student, train_teacher};

fn main() -> rest::error::Result<()> {
    let cfg = ModelConfig::tiny(2, 2, 3);
    let motion = MotionParams::default();
    let corpus = make_synthetic_corpus(31, 2, &cfg.video, &cfg.speech, &motion)?;

    let mut rng = Rng::new(14);
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

    let mut teacher = DitParams::init(cfg, &mut Rng::new(15))?;
    let tc = TrainConfig { lr: 1e-3, steps: 250, seed: 31, ..TrainConfig::default() };
    train_teacher(&mut teacher, &clips, &tc)?;
    let mut student = DitParams::init(cfg, &mut Rng::new(16))?;
    let stc = TrainConfig { lr: 1e-3, steps: 250, seed: 32, ..TrainConfig::default() };
    train_student(&mut student, Some(&teacher), &clips, &stc)?;

    // Held-out clip: new identity and audio script.
    let clip = make_clip(909, "eval".into(), [0.2, 0.7, 0.9], &cfg.video, &cfg.speech, &motion)?;
    let latents = encode_clip(&clip, &vc, &sc)?;
    let stream =
        generate(&student, Some(latents.reference.clone()), &latents.audio, 5, CacheKind::Ring)?;
    let decoded = vc.decode(&stream.latents)?.detach();

    let report = evaluate(
        &stream,
        &decoded,
        &clip.reference_frame()?,
        &clip.energy,
        &student.cfg,
        motion.background,
    )?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    println!(
        "\nboundary_discontinuity ~1 means chunk seams look like interior motion;\n\
         identity_drift is 1 - cosine similarity to the reference identity;\n\
         sync_proxy is rank correlation of decoded mouth aperture vs audio energy."
    );
    Ok(())
}
