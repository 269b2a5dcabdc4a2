//! Toy latent codecs: a linear patch video autoencoder and a matching speech
//! autoencoder, plus the windowed-energy speech feature extractor.
//!
//! Temporal compression is first-frame-preserving: latent frame 0 covers
//! pixel frame 0 alone; latent frame t >= 1 covers pixel frames
//! 1+(t-1)*rF .. t*rF. So f = 1 + (F-1)/rF and no pixel is shared between
//! patches, which makes patch-space MSE equal pixel-space MSE exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RestError, Result};
use crate::rng::Rng;
use crate::tensor::adam::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VideoShape {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub ratio_h: usize,
    pub ratio_w: usize,
    pub ratio_f: usize,
    pub pixel_channels: usize,
    pub latent_channels: usize,
}

impl VideoShape {
    /// Desk-scale default: 32x32 pixels, 8x8x4 compression, 8 latent channels.
    pub fn desk(frames: usize) -> Self {
        VideoShape {
            height: 32,
            width: 32,
            frames,
            ratio_h: 8,
            ratio_w: 8,
            ratio_f: 4,
            pixel_channels: 3,
            latent_channels: 8,
        }
    }

    /// Full-scale preset (shape arithmetic only): 512x512, 32x32x8.
    pub fn full_scale() -> Self {
        VideoShape {
            height: 512,
            width: 512,
            frames: 121,
            ratio_h: 32,
            ratio_w: 32,
            ratio_f: 8,
            pixel_channels: 3,
            latent_channels: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % self.ratio_h != 0 {
            return Err(RestError::Shape(format!(
                "height {} not divisible by ratio_h {}",
                self.height, self.ratio_h
            )));
        }
        if self.width % self.ratio_w != 0 {
            return Err(RestError::Shape(format!(
                "width {} not divisible by ratio_w {}",
                self.width, self.ratio_w
            )));
        }
        if self.frames == 0 || (self.frames - 1) % self.ratio_f != 0 {
            return Err(RestError::Shape(format!(
                "frames {} must satisfy (F-1) % {} == 0",
                self.frames, self.ratio_f
            )));
        }
        Ok(())
    }

    pub fn latent_h(&self) -> usize {
        self.height / self.ratio_h
    }

    pub fn latent_w(&self) -> usize {
        self.width / self.ratio_w
    }

    /// f = 1 + (F - 1) / rF.
    pub fn latent_frames(&self) -> usize {
        1 + (self.frames - 1) / self.ratio_f
    }

    /// Patch length for the first (unaggregated) frame.
    pub fn patch0_dim(&self) -> usize {
        self.ratio_h * self.ratio_w * self.pixel_channels
    }

    /// Patch length for the temporally aggregated frames.
    pub fn patch_dim(&self) -> usize {
        self.ratio_h * self.ratio_w * self.ratio_f * self.pixel_channels
    }

    pub fn pixel_dims(&self) -> [usize; 4] {
        [self.height, self.width, self.frames, self.pixel_channels]
    }

    pub fn latent_dims(&self) -> [usize; 4] {
        [
            self.latent_h(),
            self.latent_w(),
            self.latent_frames(),
            self.latent_channels,
        ]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpeechShape {
    /// Waveform samples per video pixel frame.
    pub samples_per_frame: usize,
    /// Feature rows (one per video pixel frame).
    pub feature_frames: usize,
    /// Temporal compression ratio; must equal the video ratio_f.
    pub ratio_f: usize,
    /// Audio slots per latent frame (h_w).
    pub window: usize,
    /// Raw feature dim (D_A).
    pub feature_dim: usize,
    /// Latent feature dim (d_A).
    pub latent_dim: usize,
}

impl SpeechShape {
    pub fn desk(feature_frames: usize) -> Self {
        SpeechShape {
            samples_per_frame: 64,
            feature_frames,
            ratio_f: 4,
            window: 4,
            feature_dim: 8,
            latent_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_frames == 0 || (self.feature_frames - 1) % self.ratio_f != 0 {
            return Err(RestError::Alignment(format!(
                "feature frames {} must satisfy (F-1) % {} == 0",
                self.feature_frames, self.ratio_f
            )));
        }
        Ok(())
    }

    /// Compressed temporal slots; matches the video latent frame count.
    pub fn latent_frames(&self) -> usize {
        1 + (self.feature_frames - 1) / self.ratio_f
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        [self.latent_frames(), self.window, self.latent_dim]
    }
}

/// Log-energy in `feature_dim` frequency bands per frame window.
/// Silence maps to exactly zero features.
pub fn speech_feature_extract(wave: &[f32], shape: &SpeechShape) -> Result<Tensor> {
    let spf = shape.samples_per_frame;
    let frames = shape.feature_frames;
    if wave.len() != spf * frames {
        return Err(RestError::Alignment(format!(
            "waveform has {} samples, expected {} frames x {} samples",
            wave.len(),
            frames,
            spf
        )));
    }
    let bands = shape.feature_dim;
    let mut out = vec![0.0f32; frames * bands];
    for fr in 0..frames {
        let win = &wave[fr * spf..(fr + 1) * spf];
        for k in 0..bands {
            // Band k probes frequency bin k+1 of the window (naive DFT).
            let freq = (k + 1) as f64;
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for (n, &x) in win.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * freq * n as f64 / spf as f64;
                re += x as f64 * phase.cos();
                im += x as f64 * phase.sin();
            }
            let energy = (re * re + im * im) / spf as f64;
            out[fr * bands + k] = (energy.ln_1p()) as f32;
        }
    }
    Tensor::from_vec(&[frames, bands], out)
}

// ---------------------------------------------------------------------------
// Video codec
// ---------------------------------------------------------------------------

pub struct VideoCodec {
    pub shape: VideoShape,
    pub enc_w0: Tensor,
    pub enc_b0: Tensor,
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub dec_w0: Tensor,
    pub dec_b0: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

fn lin_init(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let scale = (1.0 / rows as f32).sqrt();
    let data = rng.normal_vec(rows * cols).iter().map(|v| v * scale).collect();
    Tensor::param(&[rows, cols], data).unwrap()
}

impl VideoCodec {
    pub fn init(shape: VideoShape, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let (p0, p, dv) = (shape.patch0_dim(), shape.patch_dim(), shape.latent_channels);
        Ok(VideoCodec {
            shape,
            enc_w0: lin_init(rng, p0, dv),
            enc_b0: Tensor::param(&[dv], vec![0.0; dv])?,
            enc_w: lin_init(rng, p, dv),
            enc_b: Tensor::param(&[dv], vec![0.0; dv])?,
            dec_w0: lin_init(rng, dv, p0),
            dec_b0: Tensor::param(&[p0], vec![0.0; p0])?,
            dec_w: lin_init(rng, dv, p),
            dec_b: Tensor::param(&[p], vec![0.0; p])?,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc_w0,
            &mut self.enc_b0,
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.dec_w0,
            &mut self.dec_b0,
            &mut self.dec_w,
            &mut self.dec_b,
        ]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("codec.video.enc_w0".into(), &self.enc_w0),
            ("codec.video.enc_b0".into(), &self.enc_b0),
            ("codec.video.enc_w".into(), &self.enc_w),
            ("codec.video.enc_b".into(), &self.enc_b),
            ("codec.video.dec_w0".into(), &self.dec_w0),
            ("codec.video.dec_b0".into(), &self.dec_b0),
            ("codec.video.dec_w".into(), &self.dec_w),
            ("codec.video.dec_b".into(), &self.dec_b),
        ]
    }

    /// Split pixels into the first-frame patch matrix [h*w, p0] and the
    /// aggregated patch matrix [(f-1)*h*w, p], t-major.
    pub fn patchify(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = &self.shape;
        if x.dims() != s.pixel_dims() {
            return Err(RestError::Shape(format!(
                "video shape {:?}, expected {:?}",
                x.dims(),
                s.pixel_dims()
            )));
        }
        let (h, w) = (s.latent_h(), s.latent_w());
        let f = s.latent_frames();
        let (rh, rw, rf, dc) = (s.ratio_h, s.ratio_w, s.ratio_f, s.pixel_channels);
        let (wp, fp) = (s.width, s.frames);
        let idx = |py: usize, px: usize, pf: usize, c: usize| ((py * wp + px) * fp + pf) * dc + c;
        let d = x.data();

        let mut p0 = Vec::with_capacity(h * w * s.patch0_dim());
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..rh {
                    for dx in 0..rw {
                        for c in 0..dc {
                            p0.push(d[idx(y * rh + dy, xx * rw + dx, 0, c)]);
                        }
                    }
                }
            }
        }
        let mut pr = Vec::with_capacity((f - 1) * h * w * s.patch_dim());
        for t in 1..f {
            for y in 0..h {
                for xx in 0..w {
                    for dt in 0..rf {
                        let pf = 1 + (t - 1) * rf + dt;
                        for dy in 0..rh {
                            for dx in 0..rw {
                                for c in 0..dc {
                                    pr.push(d[idx(y * rh + dy, xx * rw + dx, pf, c)]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(&[h * w, s.patch0_dim()], p0)?,
            Tensor::from_vec(&[(f - 1) * h * w, s.patch_dim()], pr)?,
        ))
    }

    /// Inverse of `patchify` on raw rows.
    fn unpatchify(&self, p0: &[f32], pr: &[f32]) -> Tensor {
        let s = &self.shape;
        let (h, w) = (s.latent_h(), s.latent_w());
        let f = s.latent_frames();
        let (rh, rw, rf, dc) = (s.ratio_h, s.ratio_w, s.ratio_f, s.pixel_channels);
        let (wp, fp) = (s.width, s.frames);
        let mut out = vec![0.0f32; s.height * wp * fp * dc];
        let idx = |py: usize, px: usize, pf: usize, c: usize| ((py * wp + px) * fp + pf) * dc + c;
        let mut k = 0usize;
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..rh {
                    for dx in 0..rw {
                        for c in 0..dc {
                            out[idx(y * rh + dy, xx * rw + dx, 0, c)] = p0[k];
                            k += 1;
                        }
                    }
                }
            }
        }
        k = 0;
        for t in 1..f {
            for y in 0..h {
                for xx in 0..w {
                    for dt in 0..rf {
                        let pf = 1 + (t - 1) * rf + dt;
                        for dy in 0..rh {
                            for dx in 0..rw {
                                for c in 0..dc {
                                    out[idx(y * rh + dy, xx * rw + dx, pf, c)] = pr[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&s.pixel_dims(), out).unwrap()
    }

    /// Encode pixels [H, W, F, Dv] into latents [h, w, f, dv].
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (p0, pr) = self.patchify(x)?;
        let s = &self.shape;
        let (h, w, f, dv) = (s.latent_h(), s.latent_w(), s.latent_frames(), s.latent_channels);
        let z0 = p0
            .matmul(&self.enc_w0)?
            .add(&self.enc_b0.broadcast_rows(h * w)?)?;
        let zr = pr
            .matmul(&self.enc_w)?
            .add(&self.enc_b.broadcast_rows((f - 1) * h * w)?)?;
        // Assemble [h, w, f, dv] from the t-major row matrices.
        let mut out = vec![0.0f32; h * w * f * dv];
        for y in 0..h {
            for xx in 0..w {
                let row = y * w + xx;
                for c in 0..dv {
                    out[((y * w + xx) * f) * dv + c] = z0.data()[row * dv + c];
                }
                for t in 1..f {
                    let src = ((t - 1) * h * w + row) * dv;
                    for c in 0..dv {
                        out[((y * w + xx) * f + t) * dv + c] = zr.data()[src + c];
                    }
                }
            }
        }
        Tensor::from_vec(&[h, w, f, dv], out)
    }

    /// Decode latents [h, w, f, dv] back to pixels [H, W, F, Dv].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let s = &self.shape;
        let (h, w, f, dv) = (s.latent_h(), s.latent_w(), s.latent_frames(), s.latent_channels);
        if z.dims() != s.latent_dims() {
            return Err(RestError::Shape(format!(
                "latent shape {:?}, expected {:?}",
                z.dims(),
                s.latent_dims()
            )));
        }
        // Re-split into the row-matrix layout.
        let mut z0 = vec![0.0f32; h * w * dv];
        let mut zr = vec![0.0f32; (f - 1) * h * w * dv];
        for y in 0..h {
            for xx in 0..w {
                let row = y * w + xx;
                for t in 0..f {
                    let src = ((y * w + xx) * f + t) * dv;
                    if t == 0 {
                        z0[row * dv..row * dv + dv].copy_from_slice(&z.data()[src..src + dv]);
                    } else {
                        let dst = ((t - 1) * h * w + row) * dv;
                        zr[dst..dst + dv].copy_from_slice(&z.data()[src..src + dv]);
                    }
                }
            }
        }
        let z0 = Tensor::from_vec(&[h * w, dv], z0)?;
        let zr = Tensor::from_vec(&[(f - 1) * h * w, dv], zr)?;
        let p0 = z0
            .matmul(&self.dec_w0)?
            .add(&self.dec_b0.broadcast_rows(h * w)?)?;
        let pr = zr
            .matmul(&self.dec_w)?
            .add(&self.dec_b.broadcast_rows((f - 1) * h * w)?)?;
        Ok(self.unpatchify(p0.data(), pr.data()))
    }

    /// Pixel-space reconstruction MSE expressed on patch matrices, as a graph
    /// node suitable for training.
    pub fn recon_loss(&self, x: &Tensor) -> Result<Tensor> {
        let (p0, pr) = self.patchify(x)?;
        let s = &self.shape;
        let (h, w, f) = (s.latent_h(), s.latent_w(), s.latent_frames());
        let z0 = p0
            .matmul(&self.enc_w0)?
            .add(&self.enc_b0.broadcast_rows(h * w)?)?;
        let zr = pr
            .matmul(&self.enc_w)?
            .add(&self.enc_b.broadcast_rows((f - 1) * h * w)?)?;
        let r0 = z0
            .matmul(&self.dec_w0)?
            .add(&self.dec_b0.broadcast_rows(h * w)?)?;
        let rr = zr
            .matmul(&self.dec_w)?
            .add(&self.dec_b.broadcast_rows((f - 1) * h * w)?)?;
        let n0 = p0.numel() as f32;
        let nr = pr.numel() as f32;
        let m0 = r0.mse(&p0)?;
        let mr = rr.mse(&pr)?;
        // Weighted so the combined value equals the overall pixel MSE.
        m0.scale(n0 / (n0 + nr)).add(&mr.scale(nr / (n0 + nr)))
    }

    /// Fold a latent scaling factor into the codec: encode outputs shrink by
    /// `scale`, decode compensates. encode/decode round-trips are unchanged.
    pub fn fold_latent_scale(&mut self, scale: f32) {
        let inv = 1.0 / scale;
        self.enc_w0 = self.enc_w0.scale(inv).requiring_grad();
        self.enc_b0 = self.enc_b0.scale(inv).requiring_grad();
        self.enc_w = self.enc_w.scale(inv).requiring_grad();
        self.enc_b = self.enc_b.scale(inv).requiring_grad();
        let dup = |t: &Tensor, rows: usize| {
            let mut d = t.data().to_vec();
            for v in d.iter_mut() {
                *v *= scale;
            }
            Tensor::param(&[rows, t.numel() / rows], d).unwrap()
        };
        self.dec_w0 = dup(&self.dec_w0, self.shape.latent_channels);
        self.dec_w = dup(&self.dec_w, self.shape.latent_channels);
        // Decoder biases act after the matmul and are unaffected.
    }

    /// Rebuild from checkpoint entries; extra names are ignored so video and
    /// speech codecs can share one file.
    pub fn from_named(shape: VideoShape, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut c = VideoCodec::init(shape, &mut Rng::new(0))?;
        load_codec_params(
            "codec.video",
            entries,
            &mut [
                ("enc_w0", &mut c.enc_w0),
                ("enc_b0", &mut c.enc_b0),
                ("enc_w", &mut c.enc_w),
                ("enc_b", &mut c.enc_b),
                ("dec_w0", &mut c.dec_w0),
                ("dec_b0", &mut c.dec_b0),
                ("dec_w", &mut c.dec_w),
                ("dec_b", &mut c.dec_b),
            ],
        )?;
        Ok(c)
    }
}

fn load_codec_params(
    prefix: &str,
    entries: &[(String, Tensor)],
    slots: &mut [(&str, &mut Tensor)],
) -> Result<()> {
    for (suffix, slot) in slots.iter_mut() {
        let name = format!("{prefix}.{suffix}");
        let found = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| RestError::Format(format!("checkpoint missing tensor '{name}'")))?;
        if found.1.dims() != slot.dims() {
            return Err(RestError::Format(format!(
                "tensor '{name}' has dims {:?}, expected {:?}",
                found.1.dims(),
                slot.dims()
            )));
        }
        **slot = found.1.detach().requiring_grad();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Speech codec
// ---------------------------------------------------------------------------

pub struct SpeechCodec {
    pub shape: SpeechShape,
    pub enc_w0: Tensor,
    pub enc_b0: Tensor,
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub dec_w0: Tensor,
    pub dec_b0: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

impl SpeechCodec {
    pub fn init(shape: SpeechShape, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let d_in = shape.feature_dim;
        let d_out = shape.window * shape.latent_dim;
        let g = shape.ratio_f * d_in;
        Ok(SpeechCodec {
            shape,
            enc_w0: lin_init(rng, d_in, d_out),
            enc_b0: Tensor::param(&[d_out], vec![0.0; d_out])?,
            enc_w: lin_init(rng, g, d_out),
            enc_b: Tensor::param(&[d_out], vec![0.0; d_out])?,
            dec_w0: lin_init(rng, d_out, d_in),
            dec_b0: Tensor::param(&[d_in], vec![0.0; d_in])?,
            dec_w: lin_init(rng, d_out, g),
            dec_b: Tensor::param(&[g], vec![0.0; g])?,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc_w0,
            &mut self.enc_b0,
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.dec_w0,
            &mut self.dec_b0,
            &mut self.dec_w,
            &mut self.dec_b,
        ]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("codec.speech.enc_w0".into(), &self.enc_w0),
            ("codec.speech.enc_b0".into(), &self.enc_b0),
            ("codec.speech.enc_w".into(), &self.enc_w),
            ("codec.speech.enc_b".into(), &self.enc_b),
            ("codec.speech.dec_w0".into(), &self.dec_w0),
            ("codec.speech.dec_b0".into(), &self.dec_b0),
            ("codec.speech.dec_w".into(), &self.dec_w),
            ("codec.speech.dec_b".into(), &self.dec_b),
        ]
    }

    /// Group feature rows to match the video frame grouping: row 0 alone,
    /// then `ratio_f` rows per latent frame. Returns ([1, D_A], [f-1, rF*D_A]).
    fn group(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let sh = &self.shape;
        if s.dims() != [sh.feature_frames, sh.feature_dim] {
            return Err(RestError::Alignment(format!(
                "speech features {:?}, expected [{}, {}]",
                s.dims(),
                sh.feature_frames,
                sh.feature_dim
            )));
        }
        let f = sh.latent_frames();
        let d = sh.feature_dim;
        let g0 = Tensor::from_vec(&[1, d], s.data()[..d].to_vec())?;
        let gr = Tensor::from_vec(
            &[f - 1, sh.ratio_f * d],
            s.data()[d..].to_vec(),
        )?;
        Ok((g0, gr))
    }

    /// Encode features [F, D_A] into latents [f, h_w, d_A].
    pub fn encode(&self, s: &Tensor) -> Result<Tensor> {
        let (g0, gr) = self.group(s)?;
        let sh = &self.shape;
        let f = sh.latent_frames();
        let e0 = g0.matmul(&self.enc_w0)?.add(&self.enc_b0.broadcast_rows(1)?)?;
        let er = gr
            .matmul(&self.enc_w)?
            .add(&self.enc_b.broadcast_rows(f - 1)?)?;
        crate::tensor::concat(&[e0, er], 0)?.reshape(&[f, sh.window, sh.latent_dim])
    }

    /// Decode latents [f, h_w, d_A] back to features [F, D_A].
    pub fn decode(&self, e: &Tensor) -> Result<Tensor> {
        let sh = &self.shape;
        let f = sh.latent_frames();
        if e.dims() != sh.latent_dims() {
            return Err(RestError::Alignment(format!(
                "speech latents {:?}, expected {:?}",
                e.dims(),
                sh.latent_dims()
            )));
        }
        let flat = e.reshape(&[f, sh.window * sh.latent_dim])?;
        let e0 = flat.slice(0, 0, 1)?;
        let er = flat.slice(0, 1, f - 1)?;
        let s0 = e0.matmul(&self.dec_w0)?.add(&self.dec_b0.broadcast_rows(1)?)?;
        let sr = er
            .matmul(&self.dec_w)?
            .add(&self.dec_b.broadcast_rows(f - 1)?)?;
        let sr = sr.reshape(&[(f - 1) * sh.ratio_f, sh.feature_dim])?;
        crate::tensor::concat(&[s0, sr], 0)
    }

    pub fn recon_loss(&self, s: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(s)?)?.mse(s)
    }
}

/// Train the video codec with Adam on reconstruction MSE. Returns the
/// per-epoch mean loss curve.
pub fn train_video_codec(
    codec: &mut VideoCodec,
    inputs: &[Tensor],
    epochs: usize,
    lr: f32,
) -> Result<Vec<f32>> {
    let cfg = AdamConfig::with_lr(lr);
    let mut state = {
        let refs: Vec<&Tensor> = codec.params_mut().into_iter().map(|p| &*p).collect();
        AdamState::new(&refs)
    };
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut epoch_loss = 0.0f64;
        for x in inputs {
            let loss = codec.recon_loss(x)?;
            loss.assert_finite("video codec loss")?;
            epoch_loss += loss.item() as f64;
            loss.backward()?;
            adam_step(&mut codec.params_mut(), &mut state, &cfg)?;
        }
        curve.push((epoch_loss / inputs.len() as f64) as f32);
    }
    Ok(curve)
}

/// Train the speech codec the same way.
pub fn train_speech_codec(
    codec: &mut SpeechCodec,
    inputs: &[Tensor],
    epochs: usize,
    lr: f32,
) -> Result<Vec<f32>> {
    let cfg = AdamConfig::with_lr(lr);
    let mut state = {
        let refs: Vec<&Tensor> = codec.params_mut().into_iter().map(|p| &*p).collect();
        AdamState::new(&refs)
    };
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut epoch_loss = 0.0f64;
        for s in inputs {
            let loss = codec.recon_loss(s)?;
            loss.assert_finite("speech codec loss")?;
            epoch_loss += loss.item() as f64;
            loss.backward()?;
            adam_step(&mut codec.params_mut(), &mut state, &cfg)?;
        }
        curve.push((epoch_loss / inputs.len() as f64) as f32);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Raw video dump
// ---------------------------------------------------------------------------

/// Raw-frame dump header: magic, version u32 LE, then H, W, F, C as u32 LE,
/// then F frames of H*W*C f32 LE values, frame-major.
pub const VID_MAGIC: &[u8; 8] = b"RESTVIDF";
pub const VID_VERSION: u32 = 1;

pub fn save_video_dump(path: &Path, pixels: &Tensor) -> Result<()> {
    use std::io::Write;
    let d = pixels.dims();
    if d.len() != 4 {
        return Err(RestError::Shape(format!(
            "video dump wants [H, W, F, C] pixels, got {:?}",
            d
        )));
    }
    let (h, w, f, c) = (d[0], d[1], d[2], d[3]);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(VID_MAGIC)?;
    out.write_all(&VID_VERSION.to_le_bytes())?;
    for v in [h, w, f, c] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let data = pixels.data();
    for fr in 0..f {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = data[((y * w + x) * f + fr) * c + ch];
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_video_dump(path: &Path) -> Result<Tensor> {
    use std::io::Read;
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != VID_MAGIC {
        return Err(RestError::Format("bad video dump magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VID_VERSION {
        return Err(RestError::Format(format!("video dump version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        r.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let (h, w, f, c) = (dims[0], dims[1], dims[2], dims[3]);
    let mut data = vec![0.0f32; h * w * f * c];
    for fr in 0..f {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    r.read_exact(&mut u32buf)?;
                    data[((y * w + x) * f + fr) * c + ch] = f32::from_le_bytes(u32buf);
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, f, c], data)
}

impl SpeechCodec {
    /// Counterpart of `VideoCodec::from_named` for the speech tensors.
    pub fn from_named(shape: SpeechShape, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut c = SpeechCodec::init(shape, &mut Rng::new(0))?;
        load_codec_params(
            "codec.speech",
            entries,
            &mut [
                ("enc_w0", &mut c.enc_w0),
                ("enc_b0", &mut c.enc_b0),
                ("enc_w", &mut c.enc_w),
                ("enc_b", &mut c.enc_b),
                ("dec_w0", &mut c.dec_w0),
                ("dec_b0", &mut c.dec_b0),
                ("dec_w", &mut c.dec_w),
                ("dec_b", &mut c.dec_b),
            ],
        )?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codecs_round_trip_through_named_entries() {
        let mut rng = Rng::new(77);
        let vs = VideoShape::desk(9);
        let ss = SpeechShape::desk(9);
        let vc = VideoCodec::init(vs, &mut rng).unwrap();
        let sc = SpeechCodec::init(ss, &mut rng).unwrap();
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in vc.named_params().into_iter().chain(sc.named_params()) {
            entries.push((n, t.clone()));
        }
        let vc2 = VideoCodec::from_named(vs, &entries).unwrap();
        let sc2 = SpeechCodec::from_named(ss, &entries).unwrap();
        assert_eq!(vc.enc_w.data(), vc2.enc_w.data());
        assert_eq!(sc.dec_b.data(), sc2.dec_b.data());
        // Missing tensors are an error.
        assert!(VideoCodec::from_named(vs, &entries[..3]).is_err());
    }

    #[test]
    fn video_dump_round_trips() {
        let mut rng = Rng::new(78);
        let t = Tensor::randn(&[4, 5, 3, 2], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvf");
        save_video_dump(&path, &t).unwrap();
        let back = load_video_dump(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn full_scale_shape_arithmetic() {
        let s = VideoShape::full_scale();
        s.validate().unwrap();
        assert_eq!(s.latent_h(), 16);
        assert_eq!(s.latent_w(), 16);
        assert_eq!(s.latent_frames(), 16); // 1 + 120/8
    }

    #[test]
    fn desk_shape_arithmetic() {
        let s = VideoShape::desk(9);
        s.validate().unwrap();
        assert_eq!(s.latent_h(), 4);
        assert_eq!(s.latent_w(), 4);
        assert_eq!(s.latent_frames(), 3); // 1 + 8/4
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut s = VideoShape::desk(9);
        s.frames = 10;
        assert!(matches!(s.validate(), Err(RestError::Shape(_))));
    }

    #[test]
    fn encode_decode_shape_round_trip() {
        let mut rng = Rng::new(1);
        let s = VideoShape::desk(9);
        let codec = VideoCodec::init(s, &mut rng).unwrap();
        let x = Tensor::randn(&s.pixel_dims(), &mut rng);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.dims(), s.latent_dims());
        let xr = codec.decode(&z).unwrap();
        assert_eq!(xr.dims(), x.dims());
    }

    #[test]
    fn untrained_codec_does_not_reconstruct() {
        let mut rng = Rng::new(2);
        let s = VideoShape::desk(9);
        let codec = VideoCodec::init(s, &mut rng).unwrap();
        let x = Tensor::randn(&s.pixel_dims(), &mut rng);
        let xr = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        let mse = xr.mse(&x).unwrap().item();
        assert!(mse > 0.1, "untrained codec unexpectedly reconstructs: {mse}");
    }

    #[test]
    fn patchify_is_a_permutation() {
        let mut rng = Rng::new(3);
        let s = VideoShape::desk(9);
        let codec = VideoCodec::init(s, &mut rng).unwrap();
        let x = Tensor::randn(&s.pixel_dims(), &mut rng);
        let (p0, pr) = codec.patchify(&x).unwrap();
        let back = codec.unpatchify(p0.data(), pr.data());
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn silence_maps_to_zero_features() {
        let shape = SpeechShape::desk(9);
        let wave = vec![0.0f32; shape.samples_per_frame * 9];
        let s = speech_feature_extract(&wave, &shape).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_tone_dominates_its_band() {
        let shape = SpeechShape::desk(9);
        let spf = shape.samples_per_frame;
        // Tone at DFT bin 3 -> band index 2.
        let wave: Vec<f32> = (0..spf * 9)
            .map(|n| {
                let t = (n % spf) as f32;
                (2.0 * std::f32::consts::PI * 3.0 * t / spf as f32).sin()
            })
            .collect();
        let s = speech_feature_extract(&wave, &shape).unwrap();
        let row = &s.data()[..shape.feature_dim];
        let (argmax, _) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(argmax, 2, "row {row:?}");
    }

    #[test]
    fn feature_rows_match_frame_count() {
        let shape = SpeechShape::desk(121);
        let wave = vec![0.1f32; shape.samples_per_frame * 121];
        let s = speech_feature_extract(&wave, &shape).unwrap();
        assert_eq!(s.dims(), &[121, 8]);
    }

    #[test]
    fn speech_latent_slots_match_video_frames() {
        let shape = SpeechShape {
            ratio_f: 8,
            feature_frames: 121,
            ..SpeechShape::desk(121)
        };
        assert_eq!(shape.latent_frames(), 16);
        let mut rng = Rng::new(4);
        let codec = SpeechCodec::init(shape, &mut rng).unwrap();
        let s = Tensor::randn(&[121, 8], &mut rng);
        let e = codec.encode(&s).unwrap();
        assert_eq!(e.dims(), &[16, shape.window, shape.latent_dim]);
        let back = codec.decode(&e).unwrap();
        assert_eq!(back.dims(), s.dims());
    }

    #[test]
    fn zero_features_give_bias_only_latents() {
        let shape = SpeechShape::desk(9);
        let mut rng = Rng::new(5);
        let codec = SpeechCodec::init(shape, &mut rng).unwrap();
        let s = Tensor::zeros(&[9, 8]);
        let e = codec.encode(&s).unwrap();
        // Encoder biases start at zero, so zero input gives zero latents.
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fold_latent_scale_preserves_round_trip() {
        let mut rng = Rng::new(6);
        let s = VideoShape::desk(9);
        let mut codec = VideoCodec::init(s, &mut rng).unwrap();
        let x = Tensor::randn(&s.pixel_dims(), &mut rng);
        let before = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        codec.fold_latent_scale(2.5);
        let z = codec.encode(&x).unwrap();
        let after = codec.decode(&z).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
