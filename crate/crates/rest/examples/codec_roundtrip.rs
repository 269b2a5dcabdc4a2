//! Train the toy video and speech codecs and measure reconstruction quality.
//!
//! The video codec is a linear patch autoencoder (spatial and temporal
//! downsampling into a latent grid); the speech codec compresses windowed
//! audio features into per-latent-frame vectors aligned with the video
//! latents.
//!
//! Run with: cargo run --release --example codec_roundtrip

use rest::codec::{train_speech_codec, train_video_codec, SpeechCodec, VideoCodec};
use rest::config::ModelConfig;
use rest::corpus::{make_synthetic_corpus, MotionParams};
use rest::rng::Rng;

fn main() -> rest::error::Result<()> {
    let cfg = ModelConfig::desk(3);
    let motion = MotionParams::default();
    let clips = make_synthetic_corpus(5, 3, &cfg.video, &cfg.speech, &motion)?;

    let mut rng = Rng::new(99);
    let mut vc = VideoCodec::init(cfg.video, &mut rng)?;
    let mut sc = SpeechCodec::init(cfg.speech, &mut rng)?;

    let videos: Vec<_> = clips.iter().map(|c| c.video.clone()).collect();
    let feats: Vec<_> = clips.iter().map(|c| c.features.clone()).collect();

    let before = vc.recon_loss(&videos[0])?.item();
    let v_rows = train_video_codec(&mut vc, &videos, 120, 1e-2)?;
    let s_rows = train_speech_codec(&mut sc, &feats, 120, 1e-2)?;
    let after = vc.recon_loss(&videos[0])?.item();
    println!("video recon MSE: {before:.4} -> {after:.4} ({} epochs)", v_rows.len());
    println!("speech recon MSE final: {:.5}", s_rows.last().unwrap());

    // Shapes through the bottleneck.
    let z = vc.encode(&videos[0])?;
    let x = vc.decode(&z)?;
    println!(
        "video {:?} -> latents {:?} -> decoded {:?}",
        videos[0].dims(),
        z.dims(),
        x.dims()
    );
    let e = sc.encode(&feats[0])?;
    println!("speech features {:?} -> latents {:?}", feats[0].dims(), e.dims());
    Ok(())
}
