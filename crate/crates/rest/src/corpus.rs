//! Deterministic synthetic audio/video corpus.
//!
//! Each clip renders a Gaussian blob on a dark background. The blob color is
//! the clip's identity code, the blob center follows a smooth per-clip path,
//! and the blob aperture (its sigma in pixels) is an affine function of the
//! audio energy envelope. Energy levels are quantized to a coarse grid so the
//! aperture rank order survives decoding, which is what the sync-proxy metric
//! measures. Everything is a pure function of (seed, clip index).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{speech_feature_extract, SpeechShape, VideoShape};
use crate::error::{RestError, Result};
use crate::rng::Rng;
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    /// Blob sigma range in pixels.
    pub aperture_min: f32,
    pub aperture_max: f32,
    /// Center wander amplitude in pixels.
    pub motion_amp: f32,
    /// Minimum L2 distance between identity colors of different clips.
    pub identity_margin: f32,
    /// Background gray level.
    pub background: f32,
    /// Number of quantized energy levels.
    pub energy_levels: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            aperture_min: 2.0,
            aperture_max: 5.0,
            motion_amp: 4.0,
            identity_margin: 0.3,
            background: 0.05,
            energy_levels: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub id: String,
    pub seed: u64,
    /// RGB identity code of the blob.
    pub identity: [f32; 3],
    /// [H, W, F, Dv] pixels in [0, 1].
    pub video: Tensor,
    /// Raw waveform, `samples_per_frame * F` samples.
    pub wave: Vec<f32>,
    /// [F, D_A] extracted features.
    pub features: Tensor,
    /// Per-frame audio energy envelope (ground truth).
    pub energy: Vec<f32>,
    /// Per-frame blob sigma (ground truth).
    pub aperture: Vec<f32>,
}

impl SyntheticClip {
    /// The reference image: pixel frame 0 as [H, W, 1, Dv].
    pub fn reference_frame(&self) -> Result<Tensor> {
        let d = self.video.dims();
        let (h, w, f, c) = (d[0], d[1], d[2], d[3]);
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let base = ((y * w + x) * f) * c;
                out.extend_from_slice(&self.video.data()[base..base + c]);
            }
        }
        Tensor::from_vec(&[h, w, 1, c], out)
    }
}

fn pick_identity(rng: &mut Rng, taken: &[[f32; 3]], margin: f32) -> [f32; 3] {
    loop {
        let c = [
            rng.uniform_range(0.25, 0.95),
            rng.uniform_range(0.25, 0.95),
            rng.uniform_range(0.25, 0.95),
        ];
        let ok = taken.iter().all(|t| {
            let d: f32 = t.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d.sqrt() >= margin
        });
        if ok {
            return c;
        }
    }
}

fn render_frame(
    video: &mut [f32],
    frame: usize,
    shape: &VideoShape,
    center: (f32, f32),
    sigma: f32,
    identity: &[f32; 3],
    bg: f32,
) {
    let (h, w, f, c) = (shape.height, shape.width, shape.frames, shape.pixel_channels);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f32 - center.1;
            let dx = x as f32 - center.0;
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let base = ((y * w + x) * f + frame) * c;
            for ch in 0..c {
                let col = if ch < 3 { identity[ch] } else { bg };
                video[base + ch] = bg + (col - bg) * g;
            }
        }
    }
}

pub fn make_clip(
    seed: u64,
    id: String,
    identity: [f32; 3],
    video_shape: &VideoShape,
    speech_shape: &SpeechShape,
    motion: &MotionParams,
) -> Result<SyntheticClip> {
    video_shape.validate()?;
    speech_shape.validate()?;
    if speech_shape.feature_frames != video_shape.frames {
        return Err(RestError::Alignment(format!(
            "speech frames {} != video frames {}",
            speech_shape.feature_frames, video_shape.frames
        )));
    }
    let frames = video_shape.frames;
    let mut rng = Rng::new(seed);

    // Smooth quantized energy envelope.
    let f1 = rng.uniform_range(0.5, 1.5);
    let f2 = rng.uniform_range(1.5, 3.0);
    let p1 = rng.uniform_range(0.0, std::f32::consts::TAU);
    let p2 = rng.uniform_range(0.0, std::f32::consts::TAU);
    let levels = motion.energy_levels.max(2) as f32;
    let energy: Vec<f32> = (0..frames)
        .map(|t| {
            let x = t as f32 / frames as f32;
            let raw = 0.5
                + 0.35 * (std::f32::consts::TAU * f1 * x + p1).sin()
                + 0.15 * (std::f32::consts::TAU * f2 * x + p2).sin();
            let clamped = raw.clamp(0.0, 1.0);
            ((clamped * (levels - 1.0)).round() + 1.0) / levels
        })
        .collect();

    // Aperture tracks the energy envelope exactly.
    let aperture: Vec<f32> = energy
        .iter()
        .map(|&e| motion.aperture_min + (motion.aperture_max - motion.aperture_min) * e)
        .collect();

    // Smooth center path.
    let mf1 = rng.uniform_range(0.5, 1.2);
    let mf2 = rng.uniform_range(0.6, 1.4);
    let mp1 = rng.uniform_range(0.0, std::f32::consts::TAU);
    let mp2 = rng.uniform_range(0.0, std::f32::consts::TAU);
    let cx0 = video_shape.width as f32 / 2.0;
    let cy0 = video_shape.height as f32 / 2.0;

    let mut video = vec![0.0f32; video_shape.height * video_shape.width * frames * video_shape.pixel_channels];
    for t in 0..frames {
        let x = t as f32 / frames as f32;
        let cx = cx0 + motion.motion_amp * (std::f32::consts::TAU * mf1 * x + mp1).sin();
        let cy = cy0 + motion.motion_amp * (std::f32::consts::TAU * mf2 * x + mp2).sin();
        render_frame(
            &mut video,
            t,
            video_shape,
            (cx, cy),
            aperture[t],
            &identity,
            motion.background,
        );
    }

    // Tone whose per-window energy follows the envelope.
    let spf = speech_shape.samples_per_frame;
    let mut wave = vec![0.0f32; spf * frames];
    for t in 0..frames {
        let amp = (2.0 * energy[t]).sqrt();
        for n in 0..spf {
            wave[t * spf + n] =
                amp * (std::f32::consts::TAU * 3.0 * n as f32 / spf as f32).sin();
        }
    }
    let features = speech_feature_extract(&wave, speech_shape)?;

    Ok(SyntheticClip {
        id,
        seed,
        identity,
        video: Tensor::from_vec(&video_shape.pixel_dims(), video)?,
        wave,
        features,
        energy,
        aperture,
    })
}

pub fn make_synthetic_corpus(
    seed: u64,
    n_clips: usize,
    video_shape: &VideoShape,
    speech_shape: &SpeechShape,
    motion: &MotionParams,
) -> Result<Vec<SyntheticClip>> {
    let root = Rng::new(seed);
    let mut identities: Vec<[f32; 3]> = Vec::with_capacity(n_clips);
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let mut id_rng = root.split(1000 + i as u64);
        let identity = pick_identity(&mut id_rng, &identities, motion.identity_margin);
        identities.push(identity);
        let clip_seed = root.split(i as u64).next_u64();
        clips.push(make_clip(
            clip_seed,
            format!("clip_{i:03}"),
            identity,
            video_shape,
            speech_shape,
            motion,
        )?);
    }
    Ok(clips)
}

// ---------------------------------------------------------------------------
// On-disk layout: per-clip tensor dumps plus a JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    pub seed: u64,
    pub identity: [f32; 3],
    pub energy: Vec<f32>,
    pub aperture: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub video: VideoShape,
    pub speech: SpeechShape,
    pub motion: MotionParams,
    pub clips: Vec<ClipEntry>,
}

pub fn save_corpus(
    dir: &Path,
    seed: u64,
    video: &VideoShape,
    speech: &SpeechShape,
    motion: &MotionParams,
    clips: &[SyntheticClip],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for clip in clips {
        let cdir = dir.join(&clip.id);
        std::fs::create_dir_all(&cdir)?;
        save_tensor(&cdir.join("video.tnsr"), &clip.video)?;
        save_tensor(&cdir.join("features.tnsr"), &clip.features)?;
        save_tensor(
            &cdir.join("wave.tnsr"),
            &Tensor::from_vec(&[clip.wave.len()], clip.wave.clone())?,
        )?;
    }
    let manifest = CorpusManifest {
        version: 1,
        seed,
        video: *video,
        speech: *speech,
        motion: *motion,
        clips: clips
            .iter()
            .map(|c| ClipEntry {
                id: c.id.clone(),
                seed: c.seed,
                identity: c.identity,
                energy: c.energy.clone(),
                aperture: c.aperture.clone(),
            })
            .collect(),
    };
    crate::config::save_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<SyntheticClip>)> {
    let manifest: CorpusManifest = crate::config::load_json(&dir.join("manifest.json"))?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let cdir = dir.join(&entry.id);
        let video = load_tensor(&cdir.join("video.tnsr"))?;
        let features = load_tensor(&cdir.join("features.tnsr"))?;
        let wave = load_tensor(&cdir.join("wave.tnsr"))?.data().to_vec();
        clips.push(SyntheticClip {
            id: entry.id.clone(),
            seed: entry.seed,
            identity: entry.identity,
            video,
            wave,
            features,
            energy: entry.energy.clone(),
            aperture: entry.aperture.clone(),
        });
    }
    Ok((manifest, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> (VideoShape, SpeechShape, MotionParams) {
        (
            VideoShape::desk(9),
            SpeechShape::desk(9),
            MotionParams::default(),
        )
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (v, s, m) = desk();
        let a = make_synthetic_corpus(5, 3, &v, &s, &m).unwrap();
        let b = make_synthetic_corpus(5, 3, &v, &s, &m).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ca.video), bits(&cb.video));
            assert_eq!(bits(&ca.features), bits(&cb.features));
            assert_eq!(ca.energy, cb.energy);
        }
    }

    #[test]
    fn aperture_constant_where_energy_constant() {
        let (v, s, m) = desk();
        let clips = make_synthetic_corpus(6, 2, &v, &s, &m).unwrap();
        for clip in &clips {
            for t in 1..clip.energy.len() {
                if clip.energy[t] == clip.energy[t - 1] {
                    assert_eq!(clip.aperture[t], clip.aperture[t - 1]);
                }
            }
        }
    }

    #[test]
    fn identity_codes_respect_margin() {
        let (v, s, m) = desk();
        let clips = make_synthetic_corpus(7, 5, &v, &s, &m).unwrap();
        for i in 0..clips.len() {
            for j in i + 1..clips.len() {
                let d: f32 = clips[i]
                    .identity
                    .iter()
                    .zip(&clips[j].identity)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d.sqrt() >= m.identity_margin, "clips {i},{j}");
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let (v, s, m) = desk();
        let clips = make_synthetic_corpus(8, 2, &v, &s, &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), 8, &v, &s, &m, &clips).unwrap();
        let (manifest, back) = load_corpus(dir.path()).unwrap();
        assert_eq!(manifest.seed, 8);
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].video.data(), clips[0].video.data());
        assert_eq!(back[1].wave, clips[1].wave);
    }

    #[test]
    fn reference_frame_is_frame_zero() {
        let (v, s, m) = desk();
        let clip = &make_synthetic_corpus(9, 1, &v, &s, &m).unwrap()[0];
        let r = clip.reference_frame().unwrap();
        assert_eq!(r.dims(), &[32, 32, 1, 3]);
        // Spot-check one pixel.
        let d = clip.video.dims();
        let idx = |y: usize, x: usize, f: usize, c: usize| ((y * d[1] + x) * d[2] + f) * d[3] + c;
        assert_eq!(r.data()[(5 * 32 + 7) * 3 + 1], clip.video.data()[idx(5, 7, 0, 1)]);
    }
}
