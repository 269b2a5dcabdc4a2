//! Distill a streaming student from a frozen teacher.
//!
//! The student denoises chunk by chunk against the cache (write-once identity
//! sink + previous-chunk keys and values). Its loss combines the flow
//! objective, a contrastive term pulling student features toward the
//! teacher's for the same chunk, and a temporal smoothness penalty on second
//! differences of the output.
//!
//! Run with: cargo run --release --example distillation

use rest::codec::{train_speech_codec, train_video_codec, SpeechCodec, VideoCodec};
use rest::config::{ModelConfig, TrainConfig};
use rest::corpus::{make_synthetic_corpus, MotionParams};
use rest::model::DitParams;
use rest::rng::Rng;
use rest::train::{encode_clip, train_student, train_teacher};

fn main() -> rest::error::Result<()> {
    let cfg = ModelConfig::tiny(2, 2, 3);
    let motion = MotionParams::default();
    let corpus = make_synthetic_corpus(77, 2, &cfg.video, &cfg.speech, &motion)?;

    let mut rng = Rng::new(8);
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

    let mut teacher = DitParams::init(cfg, &mut Rng::new(9))?;
    let tc = TrainConfig { lr: 1e-3, steps: 200, seed: 77, ..TrainConfig::default() };
    train_teacher(&mut teacher, &clips, &tc)?;
    println!("teacher trained for {} steps", tc.steps);

    let mut student = DitParams::init(cfg, &mut Rng::new(10))?;
    let stc = TrainConfig {
        lr: 1e-3,
        steps: 200,
        seed: 78,
        lambda_con: 0.25,
        lambda_smo: 0.25,
        temperature: 0.07,
        ..TrainConfig::default()
    };
    let rows = train_student(&mut student, Some(&teacher), &clips, &stc)?;
    println!("step   flow     contrastive  smoothness  total");
    for r in rows.iter().step_by(40) {
        println!(
            "{:4}  {:.4}   {:.4}       {:.4}      {:.4}",
            r.step, r.flow, r.contrastive, r.smoothness, r.total
        );
    }
    let last = rows.last().unwrap();
    assert!(last.total < rows[0].total, "total loss should decrease");
    println!("final total loss {:.4}", last.total);
    Ok(())
}
