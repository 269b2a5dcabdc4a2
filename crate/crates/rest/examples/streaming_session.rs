//! Chunk-by-chunk streaming inference with the incremental session API.
//!
//! A `StreamSession` holds the guidance branches' caches across chunks: the
//! identity sink is written once from the reference frame, and each denoising
//! step's keys/values from chunk i are read back at the same step of chunk
//! i+1. Feeding per-chunk noise and audio yields denoised chunks as soon as
//! their inner denoising loop finishes.
//!
//! Run with: cargo run --release --example streaming_session

use rest::chunk::{segment, stitch};
use rest::codec::{train_speech_codec, train_video_codec, SpeechCodec, VideoCodec};
use rest::config::ModelConfig;
use rest::corpus::{make_clip, MotionParams};
use rest::infer::{generate, CacheKind, StreamSession};
use rest::model::DitParams;
use rest::rng::Rng;
use rest::tensor::Tensor;
use rest::train::encode_clip;

fn main() -> rest::error::Result<()> {
    let cfg = ModelConfig::tiny(2, 2, 4);
    let motion = MotionParams::default();
    let clip = make_clip(123, "demo".into(), [0.8, 0.3, 0.5], &cfg.video, &cfg.speech, &motion)?;

    let mut rng = Rng::new(1);
    let mut vc = VideoCodec::init(cfg.video, &mut rng)?;
    let mut sc = SpeechCodec::init(cfg.speech, &mut rng)?;
    train_video_codec(&mut vc, &[clip.video.clone()], 40, 1e-2)?;
    train_speech_codec(&mut sc, &[clip.features.clone()], 40, 1e-2)?;
    let latents = encode_clip(&clip, &vc, &sc)?;

    // Untrained weights — this demo is about the streaming mechanics.
    let p = DitParams::init(cfg, &mut Rng::new(2))?;
    let layout = p.cfg.layout()?;

    // One noise field for the whole stream, segmented per chunk, so the
    // shared boundary frame starts from identical noise in both neighbors.
    let mut noise_rng = Rng::new(55);
    let eps = Tensor::randn(
        &[
            p.cfg.video.latent_h(),
            p.cfg.video.latent_w(),
            p.cfg.f_total(),
            p.cfg.video.latent_channels,
        ],
        &mut noise_rng,
    );
    let noise_chunks = segment(&eps, &layout)?;

    let mut session = StreamSession::new(&p, Some(latents.reference.clone()), CacheKind::Ring)?;
    let mut chunks = Vec::new();
    for (j, noise) in noise_chunks.iter().enumerate() {
        let (s, e) = layout.frame_range(j);
        let audio = latents.audio.slice(0, s, e - s + 1)?;
        let out = session.next_chunk(noise, &audio)?;
        println!(
            "chunk {j}: {:.1} ms, cache {} bytes, latents {:?}",
            out.latency_ms,
            out.cache_bytes,
            out.latents.dims()
        );
        chunks.push(out.latents);
    }
    let stream = stitch(&chunks, &layout)?;
    println!("stitched stream latents: {:?}", stream.dims());

    // The one-shot driver does exactly this internally (same seed, same
    // cache discipline => bit-identical output).
    let g = generate(&p, Some(latents.reference.clone()), &latents.audio, 55, CacheKind::Ring)?;
    assert_eq!(g.latents.data(), stream.data());
    println!("one-shot generate() matches the incremental session bit for bit");

    let decoded = vc.decode(&stream)?;
    println!("decoded video: {:?}", decoded.dims());
    Ok(())
}
