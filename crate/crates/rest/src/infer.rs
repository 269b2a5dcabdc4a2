//! Dual-loop streaming inference, classifier-free guidance, quality metrics,
//! and the cache scaling benchmark.
//!
//! The outer loop walks chunks left to right; the inner loop runs the full
//! denoising schedule on the current chunk. Keys and values cached at step s
//! of chunk i are read back at step s of chunk i+1, so cached context always
//! sits at the same noise level as the chunk reading it. Guidance runs two
//! branches with separate caches: the conditional branch sees audio and the
//! reference, the unconditional branch sees both zeroed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::chunk::ChunkLayout;
use crate::codec::VideoShape;
use crate::config::ModelConfig;
use crate::error::{RestError, Result};
use crate::flow::{euler_step, TimeSchedule};
use crate::model::{
    forward_chunk, tokens_to_latents, CacheRoute, ChunkInput, DitParams, FullHistoryCache,
    IdContextCache,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Joint guidance: both conditions share one unconditional branch,
/// v = v_uncond + alpha * (v_cond - v_uncond). alpha = 1 is no guidance.
pub fn joint_cfg(v_cond: &Tensor, v_uncond: &Tensor, alpha: f32) -> Result<Tensor> {
    v_uncond.add(&v_cond.sub(v_uncond)?.scale(alpha))
}

/// Which cache discipline a stream runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheKind {
    /// Constant-size ID-sink + previous-chunk ring (production).
    Ring,
    /// Unbounded history with brute-force attention (oracle / naive baseline).
    FullHistory,
}

enum Caches {
    Ring(IdContextCache, IdContextCache),
    Full(FullHistoryCache, FullHistoryCache),
}

/// Incremental generator: feed per-chunk noise and audio, receive denoised
/// chunks. Holds the two guidance branches' caches across chunks.
pub struct StreamSession<'a> {
    p: &'a DitParams,
    schedule: TimeSchedule,
    caches: Caches,
    reference: Option<Tensor>,
    zero_reference: Option<Tensor>,
    chunk_index: usize,
}

/// One emitted chunk with its bookkeeping.
pub struct ChunkOutput {
    /// Denoised latents [h, w, chunk_len, dv] (including the shared leading
    /// boundary frame for chunks after the first).
    pub latents: Tensor,
    pub latency_ms: f64,
    pub cache_bytes: usize,
}

impl<'a> StreamSession<'a> {
    pub fn new(p: &'a DitParams, reference: Option<Tensor>, kind: CacheKind) -> Result<Self> {
        let cfg = &p.cfg;
        cfg.validate()?;
        if cfg.ablation.no_id_sink && reference.is_some() {
            return Err(RestError::Usage(
                "reference supplied while the ID sink is ablated".into(),
            ));
        }
        if !cfg.ablation.no_id_sink && reference.is_none() {
            return Err(RestError::Usage(
                "streaming needs a reference latent unless the ID sink is ablated".into(),
            ));
        }
        let zero_reference = reference.as_ref().map(|r| Tensor::zeros(r.dims()));
        let caches = match kind {
            CacheKind::Ring => Caches::Ring(
                IdContextCache::zeros(cfg.blocks, cfg.steps),
                IdContextCache::zeros(cfg.blocks, cfg.steps),
            ),
            CacheKind::FullHistory => Caches::Full(
                FullHistoryCache::zeros(cfg.blocks, cfg.steps),
                FullHistoryCache::zeros(cfg.blocks, cfg.steps),
            ),
        };
        Ok(StreamSession {
            p,
            schedule: TimeSchedule::uniform(cfg.steps),
            caches,
            reference,
            zero_reference,
            chunk_index: 0,
        })
    }

    pub fn chunks_done(&self) -> usize {
        self.chunk_index
    }

    pub fn cache_bytes(&self) -> usize {
        match &self.caches {
            Caches::Ring(c, u) => c.bytes() + u.bytes(),
            Caches::Full(c, u) => c.bytes() + u.bytes(),
        }
    }

    /// Hash of the conditional branch's ID sink (ring cache only), for
    /// immutability checks.
    pub fn sink_hash(&self) -> Option<u64> {
        match &self.caches {
            Caches::Ring(c, _) => Some(c.sink_hash()),
            Caches::Full(..) => None,
        }
    }

    /// Denoise one chunk from its noise sample. `audio` covers exactly this
    /// chunk's frames.
    pub fn next_chunk(&mut self, noise: &Tensor, audio: &Tensor) -> Result<ChunkOutput> {
        let cfg = &self.p.cfg;
        let first = self.chunk_index == 0;
        let start = Instant::now();
        let mut z = noise.detach();
        let zero_audio = Tensor::zeros(audio.dims());
        for s in 0..self.schedule.transitions() {
            let t_from = self.schedule.steps[s];
            let t_to = self.schedule.steps[s + 1];
            let t_frames = vec![t_from; z.dims()[2]];
            let run = |reference: Option<&Tensor>,
                       aud: &Tensor,
                       route: &mut CacheRoute|
             -> Result<Tensor> {
                let input = ChunkInput {
                    latents: &z,
                    reference,
                    audio: aud,
                    t_frames: &t_frames,
                    frame_offset: 0,
                };
                forward_chunk(self.p, &input, s, route)
            };
            let reference = if first { self.reference.clone() } else { None };
            let zero_ref = if first { self.zero_reference.clone() } else { None };
            let (v_cond, v_uncond) = match &mut self.caches {
                Caches::Ring(c, u) => (
                    run(reference.as_ref(), audio, &mut CacheRoute::Ring(c))?,
                    run(zero_ref.as_ref(), &zero_audio, &mut CacheRoute::Ring(u))?,
                ),
                Caches::Full(c, u) => (
                    run(reference.as_ref(), audio, &mut CacheRoute::Full(c))?,
                    run(zero_ref.as_ref(), &zero_audio, &mut CacheRoute::Full(u))?,
                ),
            };
            let v = joint_cfg(&v_cond.detach(), &v_uncond.detach(), cfg.cfg_alpha)?;
            let v = tokens_to_latents(&v, cfg.video.latent_h(), cfg.video.latent_w())?;
            z = euler_step(&z, &v, t_from, t_to)?;
        }
        match &mut self.caches {
            Caches::Ring(c, u) => {
                c.detach_all();
                u.detach_all();
                c.advance_chunk();
                u.advance_chunk();
            }
            Caches::Full(c, u) => {
                c.advance_chunk();
                u.advance_chunk();
            }
        }
        self.chunk_index += 1;
        z.assert_finite("denoised chunk")?;
        Ok(ChunkOutput {
            latents: z,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            cache_bytes: self.cache_bytes(),
        })
    }
}

/// A complete generated stream.
pub struct GeneratedStream {
    /// Stitched latents [h, w, f_total, dv].
    pub latents: Tensor,
    /// Per-chunk denoised latents, boundary frames still duplicated.
    pub chunks: Vec<Tensor>,
    pub per_chunk_latency_ms: Vec<f64>,
    pub cache_bytes: Vec<usize>,
}

/// Stream the whole clip: sample one noise field for all frames (so the
/// shared boundary frame starts from the same noise in both neighbors), then
/// denoise chunk by chunk.
pub fn generate(
    p: &DitParams,
    reference: Option<Tensor>,
    audio: &Tensor,
    seed: u64,
    kind: CacheKind,
) -> Result<GeneratedStream> {
    let cfg = &p.cfg;
    let layout = cfg.layout()?;
    if audio.dims()[0] != cfg.f_total() {
        return Err(RestError::Alignment(format!(
            "audio covers {} latent frames, stream needs {}",
            audio.dims()[0],
            cfg.f_total()
        )));
    }
    let mut rng = Rng::new(seed);
    let eps = Tensor::randn(
        &[
            cfg.video.latent_h(),
            cfg.video.latent_w(),
            cfg.f_total(),
            cfg.video.latent_channels,
        ],
        &mut rng,
    );
    let noise_chunks = crate::chunk::segment(&eps, &layout)?;
    let mut session = StreamSession::new(p, reference, kind)?;
    let mut chunks = Vec::with_capacity(layout.k);
    let mut latency = Vec::with_capacity(layout.k);
    let mut bytes = Vec::with_capacity(layout.k);
    for (j, noise) in noise_chunks.iter().enumerate() {
        let (start, end) = layout.frame_range(j);
        let a = audio.slice(0, start, end - start + 1)?;
        let out = session.next_chunk(noise, &a)?;
        chunks.push(out.latents.clone());
        latency.push(out.latency_ms);
        bytes.push(out.cache_bytes);
    }
    let latents = crate::chunk::stitch(&chunks, &layout)?;
    Ok(GeneratedStream { latents, chunks, per_chunk_latency_ms: latency, cache_bytes: bytes })
}

/// Non-streaming sampler: full attention over [reference || all frames] at
/// every step, same schedule and guidance. The baseline the streaming path is
/// distilled from; for a single chunk the two must agree.
pub fn generate_teacher(
    p: &DitParams,
    reference: Option<Tensor>,
    audio: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let cfg = &p.cfg;
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut z = Tensor::randn(
        &[
            cfg.video.latent_h(),
            cfg.video.latent_w(),
            cfg.f_total(),
            cfg.video.latent_channels,
        ],
        &mut rng,
    );
    let zero_audio = Tensor::zeros(audio.dims());
    let zero_ref = reference.as_ref().map(|r| Tensor::zeros(r.dims()));
    let schedule = TimeSchedule::uniform(cfg.steps);
    for s in 0..schedule.transitions() {
        let t_from = schedule.steps[s];
        let t_to = schedule.steps[s + 1];
        let t_frames = vec![t_from; cfg.f_total()];
        let run = |r: Option<&Tensor>, a: &Tensor| -> Result<Tensor> {
            let input = ChunkInput {
                latents: &z,
                reference: r,
                audio: a,
                t_frames: &t_frames,
                frame_offset: 0,
            };
            forward_chunk(p, &input, s, &mut CacheRoute::None)
        };
        let v_cond = run(reference.as_ref(), audio)?;
        let v_uncond = run(zero_ref.as_ref(), &zero_audio)?;
        let v = joint_cfg(&v_cond.detach(), &v_uncond.detach(), cfg.cfg_alpha)?;
        let v = tokens_to_latents(&v, cfg.video.latent_h(), cfg.video.latent_w())?;
        z = euler_step(&z, &v, t_from, t_to)?;
    }
    z.assert_finite("teacher sample")?;
    Ok(z)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb) as f32
}

fn average_ranks(x: &[f32]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// Estimate the blob aperture (sigma in pixels) of one decoded frame from
/// the second spatial moment of above-background luminance.
pub fn estimate_aperture(pixels: &Tensor, frame: usize, background: f32) -> f32 {
    let d = pixels.dims();
    let (h, w, f, c) = (d[0], d[1], d[2], d[3]);
    let lum = |y: usize, x: usize| {
        let base = ((y * w + x) * f + frame) * c;
        let mut s = 0.0f32;
        for ch in 0..c.min(3) {
            s += pixels.data()[base + ch];
        }
        (s / c.min(3) as f32 - background).max(0.0)
    };
    let mut total = 0.0f64;
    let mut cx = 0.0f64;
    let mut cy = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let v = lum(y, x) as f64;
            total += v;
            cx += v * x as f64;
            cy += v * y as f64;
        }
    }
    if total <= 1e-9 {
        return 0.0;
    }
    cx /= total;
    cy /= total;
    let mut m2 = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let v = lum(y, x) as f64;
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            m2 += v * r2;
        }
    }
    ((m2 / total) / 2.0).sqrt() as f32
}

/// Mean above-background color of one frame: the identity statistic.
fn identity_stat(pixels: &Tensor, frame: usize, background: f32) -> Vec<f64> {
    let d = pixels.dims();
    let (h, w, f, c) = (d[0], d[1], d[2], d[3]);
    let mut acc = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let base = ((y * w + x) * f + frame) * c;
            for ch in 0..c {
                acc[ch] += (pixels.data()[base + ch] - background) as f64;
            }
        }
    }
    acc
}

fn cos64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean second-difference norm at chunk-boundary latent frames divided by
    /// the interior mean; 1.0 means boundaries are as smooth as the interior.
    pub boundary_discontinuity: f32,
    /// 1 - mean over chunks of cosine similarity between the chunk's decoded
    /// identity statistic and the reference frame's; 0.0 is no drift.
    pub identity_drift: f32,
    /// Spearman rank correlation between the decoded per-frame aperture and
    /// the ground-truth audio energy envelope.
    pub sync_proxy: f32,
    pub per_chunk_latency_ms: Vec<f64>,
    pub cache_bytes: Vec<usize>,
}

/// Second-difference norm of latent frame i (1-based interior index).
fn frame_second_diff_norm(z: &Tensor, i: usize) -> Result<f32> {
    let prev = z.slice(2, i - 1, 1)?;
    let mid = z.slice(2, i, 1)?;
    let next = z.slice(2, i + 1, 1)?;
    let d = next.add(&prev)?.sub(&mid.scale(2.0))?;
    let sq: f64 = d.data().iter().map(|&v| (v as f64).powi(2)).sum();
    Ok(sq.sqrt() as f32)
}

/// Ratio of boundary to interior second-difference norms on generated
/// latents. Needs at least one interior non-boundary frame.
pub fn boundary_discontinuity(z: &Tensor, layout: &ChunkLayout) -> Result<f32> {
    let f = layout.f_total;
    let boundaries = layout.boundary_frames();
    if boundaries.is_empty() {
        return Err(RestError::Layout(
            "boundary metric needs at least two chunks".into(),
        ));
    }
    let mut b_acc = 0.0f64;
    let mut i_acc = 0.0f64;
    let mut i_count = 0usize;
    for i in 1..f - 1 {
        let norm = frame_second_diff_norm(z, i)? as f64;
        if boundaries.contains(&i) {
            b_acc += norm;
        } else {
            i_acc += norm;
            i_count += 1;
        }
    }
    if i_count == 0 {
        return Err(RestError::Layout(
            "boundary metric needs interior frames between boundaries".into(),
        ));
    }
    let interior = i_acc / i_count as f64;
    if interior <= 1e-12 {
        return Ok(1.0);
    }
    Ok((b_acc / boundaries.len() as f64 / interior) as f32)
}

/// Identity drift of decoded pixels against the reference frame.
pub fn identity_drift(
    pixels: &Tensor,
    reference: &Tensor,
    layout: &ChunkLayout,
    shape: &VideoShape,
    background: f32,
) -> Result<f32> {
    let ref_stat = identity_stat(reference, 0, background);
    let mut sims = Vec::with_capacity(layout.k);
    for j in 0..layout.k {
        let (lo, hi) = layout.owned_range(j);
        // Latent frame t covers pixel frames 1+(t-1)*rF .. t*rF (t >= 1).
        let p_lo = if lo == 0 { 0 } else { 1 + (lo - 1) * shape.ratio_f };
        let p_hi = hi * shape.ratio_f;
        let mut stat = vec![0.0f64; shape.pixel_channels];
        for fr in p_lo..=p_hi.min(shape.frames - 1) {
            let s = identity_stat(pixels, fr, background);
            for (a, b) in stat.iter_mut().zip(&s) {
                *a += b;
            }
        }
        sims.push(cos64(&stat, &ref_stat));
    }
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    Ok((1.0 - mean) as f32)
}

/// Audio-visual synchrony proxy: rank correlation between decoded aperture
/// and the ground-truth energy envelope, per pixel frame.
pub fn sync_proxy(pixels: &Tensor, energy: &[f32], background: f32) -> Result<f32> {
    let f = pixels.dims()[2];
    if energy.len() != f {
        return Err(RestError::Alignment(format!(
            "{} energy values for {f} decoded frames",
            energy.len()
        )));
    }
    let apertures: Vec<f32> = (0..f)
        .map(|fr| estimate_aperture(pixels, fr, background))
        .collect();
    Ok(spearman(&apertures, energy))
}

/// Assemble the full report for one generated stream.
pub fn evaluate(
    stream: &GeneratedStream,
    decoded: &Tensor,
    reference_pixels: &Tensor,
    energy: &[f32],
    cfg: &ModelConfig,
    background: f32,
) -> Result<MetricsReport> {
    let layout = cfg.layout()?;
    Ok(MetricsReport {
        boundary_discontinuity: boundary_discontinuity(&stream.latents, &layout)?,
        identity_drift: identity_drift(decoded, reference_pixels, &layout, &cfg.video, background)?,
        sync_proxy: sync_proxy(decoded, energy, background)?,
        per_chunk_latency_ms: stream.per_chunk_latency_ms.clone(),
        cache_bytes: stream.cache_bytes.clone(),
    })
}

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub chunks: usize,
    pub ring_last_chunk_ms: f64,
    pub ring_cache_bytes: usize,
    pub full_last_chunk_ms: f64,
    pub full_cache_bytes: usize,
    pub ring_flops_per_chunk: u64,
    pub full_attention_flops: u64,
}

/// Generate streams of increasing length under both cache disciplines and
/// record per-chunk latency and cache footprint.
pub fn bench_scaling(chunk_counts: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(chunk_counts.len());
    for &k in chunk_counts {
        let cfg = ModelConfig::desk(k);
        let mut rng = Rng::new(seed);
        let p = DitParams::init(cfg, &mut rng)?;
        let reference = Tensor::randn(
            &[cfg.video.latent_h(), cfg.video.latent_w(), 1, cfg.video.latent_channels],
            &mut rng,
        );
        let audio = Tensor::randn(
            &[cfg.f_total(), cfg.speech.window, cfg.speech.latent_dim],
            &mut rng,
        );
        let ring = generate(&p, Some(reference.clone()), &audio, seed, CacheKind::Ring)?;
        let full = generate(&p, Some(reference), &audio, seed, CacheKind::FullHistory)?;
        rows.push(BenchRow {
            chunks: k,
            ring_last_chunk_ms: *ring.per_chunk_latency_ms.last().unwrap(),
            ring_cache_bytes: *ring.cache_bytes.last().unwrap(),
            full_last_chunk_ms: *full.per_chunk_latency_ms.last().unwrap(),
            full_cache_bytes: *full.cache_bytes.last().unwrap(),
            ring_flops_per_chunk: crate::model::flops::student_chunk_flops(&cfg, k.max(2)),
            full_attention_flops: crate::model::flops::teacher_flops(&cfg),
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &std::path::Path, rows: &[BenchRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "chunks,ring_last_chunk_ms,ring_cache_bytes,full_last_chunk_ms,full_cache_bytes,ring_flops_per_chunk,full_attention_flops"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.chunks,
            r.ring_last_chunk_ms,
            r.ring_cache_bytes,
            r.full_last_chunk_ms,
            r.full_cache_bytes,
            r.ring_flops_per_chunk,
            r.full_attention_flops
        )?;
    }
    f.flush()?;
    Ok(())
}
