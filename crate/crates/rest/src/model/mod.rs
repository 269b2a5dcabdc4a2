//! Audio-driven video diffusion transformer with streaming KV caches.
//!
//! One architecture serves two attention disciplines. In teacher mode the
//! whole latent sequence plus the reference frame is processed at once with
//! full self-attention. In student mode the sequence arrives chunk by chunk
//! and each chunk attends to [identity sink || previous chunk || itself],
//! where the sink is the reference-frame KV written once at stream start.
//!
//! Tokens are frame-major: frame i occupies rows i*S .. (i+1)*S of the token
//! matrix, S = h*w spatial tokens per latent frame. When the reference rides
//! along it occupies the leading S rows. Per-frame noise levels enter through
//! adaptive layer-norm modulation; audio enters through per-frame cross
//! attention whose keys are that frame's speech latent slots.

pub mod cache;
pub mod checkpoint;
pub mod flops;

pub use cache::{FullHistoryCache, IdContextCache};

use crate::config::ModelConfig;
use crate::error::{RestError, Result};
use crate::flow::timestep_embedding;
use crate::rng::Rng;
use crate::tensor::{concat, Tensor};

/// Reorder latents [h, w, f, d] into the frame-major token matrix [f*h*w, d].
/// Raw data movement; the input must not carry gradient history.
pub fn latents_to_tokens(z: &Tensor) -> Result<Tensor> {
    if z.requires_grad() {
        return Err(RestError::Usage(
            "latents_to_tokens breaks the graph; detach first".into(),
        ));
    }
    let d = z.dims();
    if d.len() != 4 {
        return Err(RestError::Shape(format!("expected rank-4 latents, got {d:?}")));
    }
    let (h, w, f, c) = (d[0], d[1], d[2], d[3]);
    let mut out = vec![0.0f32; z.numel()];
    for y in 0..h {
        for x in 0..w {
            for fr in 0..f {
                let src = ((y * w + x) * f + fr) * c;
                let dst = (fr * h * w + y * w + x) * c;
                out[dst..dst + c].copy_from_slice(&z.data()[src..src + c]);
            }
        }
    }
    Tensor::from_vec(&[f * h * w, c], out)
}

/// Inverse of `latents_to_tokens`.
pub fn tokens_to_latents(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if t.requires_grad() {
        return Err(RestError::Usage(
            "tokens_to_latents breaks the graph; detach first".into(),
        ));
    }
    let d = t.dims();
    if d.len() != 2 || d[0] % (h * w) != 0 {
        return Err(RestError::Shape(format!(
            "token matrix {d:?} does not hold whole {h}x{w} frames"
        )));
    }
    let (f, c) = (d[0] / (h * w), d[1]);
    let mut out = vec![0.0f32; t.numel()];
    for fr in 0..f {
        for y in 0..h {
            for x in 0..w {
                let src = (fr * h * w + y * w + x) * c;
                let dst = ((y * w + x) * f + fr) * c;
                out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
            }
        }
    }
    Tensor::from_vec(&[h, w, f, c], out)
}

/// Sinusoidal embedding of an (unbounded) frame index.
pub fn frame_embedding(idx: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        let angle = idx as f64 * freq;
        out[i] = angle.sin() as f32;
        out[half + i] = angle.cos() as f32;
    }
    Tensor::from_vec(&[1, dim], out).unwrap()
}

fn linear_init(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let scale = (1.0 / rows as f32).sqrt();
    let data = rng.normal_vec(rows * cols).iter().map(|v| v * scale).collect();
    Tensor::param(&[rows, cols], data).unwrap()
}

fn zeros_param(dims: &[usize]) -> Tensor {
    Tensor::param(dims, vec![0.0; dims.iter().product()]).unwrap()
}

fn ones_param(dims: &[usize]) -> Tensor {
    Tensor::param(dims, vec![1.0; dims.iter().product()]).unwrap()
}

pub struct BlockParams {
    pub attn_ln_g: Tensor,
    pub attn_ln_b: Tensor,
    pub attn_mod_w: Tensor,
    pub attn_mod_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ca_ln_g: Tensor,
    pub ca_ln_b: Tensor,
    pub ca_mod_w: Tensor,
    pub ca_mod_b: Tensor,
    pub aq: Tensor,
    pub ak: Tensor,
    pub av: Tensor,
    pub ao: Tensor,
    pub ao_b: Tensor,
    pub mlp_ln_g: Tensor,
    pub mlp_ln_b: Tensor,
    pub mlp_mod_w: Tensor,
    pub mlp_mod_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockParams {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        let da = cfg.speech.latent_dim;
        let td = cfg.time_dim;
        BlockParams {
            attn_ln_g: ones_param(&[d]),
            attn_ln_b: zeros_param(&[d]),
            // Modulation starts at identity: zero gain offset, zero shift.
            attn_mod_w: zeros_param(&[td, 2 * d]),
            attn_mod_b: zeros_param(&[2 * d]),
            wq: linear_init(rng, d, d),
            bq: zeros_param(&[d]),
            wk: linear_init(rng, d, d),
            bk: zeros_param(&[d]),
            wv: linear_init(rng, d, d),
            bv: zeros_param(&[d]),
            wo: linear_init(rng, d, d),
            bo: zeros_param(&[d]),
            ca_ln_g: ones_param(&[d]),
            ca_ln_b: zeros_param(&[d]),
            ca_mod_w: zeros_param(&[td, 2 * d]),
            ca_mod_b: zeros_param(&[2 * d]),
            aq: linear_init(rng, d, d),
            ak: linear_init(rng, da, d),
            av: linear_init(rng, da, d),
            // Audio contribution starts at exactly zero.
            ao: zeros_param(&[d, d]),
            ao_b: zeros_param(&[d]),
            mlp_ln_g: ones_param(&[d]),
            mlp_ln_b: zeros_param(&[d]),
            mlp_mod_w: zeros_param(&[td, 2 * d]),
            mlp_mod_b: zeros_param(&[2 * d]),
            w1: linear_init(rng, d, cfg.mlp_hidden),
            b1: zeros_param(&[cfg.mlp_hidden]),
            w2: linear_init(rng, cfg.mlp_hidden, d),
            b2: zeros_param(&[d]),
        }
    }
}

pub struct DitParams {
    pub cfg: ModelConfig,
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// Learned spatial position table [S, d], shared across frames.
    pub pos_spatial: Tensor,
    /// Learned marker added to reference tokens instead of a frame sinusoid.
    pub ref_pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub final_mod_w: Tensor,
    pub final_mod_b: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl DitParams {
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let dv = cfg.video.latent_channels;
        let s = cfg.tokens_per_frame();
        let pos_scale = 0.1f32;
        let pos_spatial = Tensor::param(
            &[s, d],
            rng.normal_vec(s * d).iter().map(|v| v * pos_scale).collect(),
        )?;
        let ref_pos = Tensor::param(
            &[1, d],
            rng.normal_vec(d).iter().map(|v| v * pos_scale).collect(),
        )?;
        let blocks = (0..cfg.blocks).map(|_| BlockParams::init(&cfg, rng)).collect();
        Ok(DitParams {
            w_in: linear_init(rng, dv, d),
            b_in: zeros_param(&[d]),
            pos_spatial,
            ref_pos,
            blocks,
            final_ln_g: ones_param(&[d]),
            final_ln_b: zeros_param(&[d]),
            final_mod_w: zeros_param(&[cfg.time_dim, 2 * d]),
            final_mod_b: zeros_param(&[2 * d]),
            w_out: linear_init(rng, d, dv),
            b_out: zeros_param(&[dv]),
            cfg,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("in.w".into(), &self.w_in),
            ("in.b".into(), &self.b_in),
            ("pos.spatial".into(), &self.pos_spatial),
            ("pos.ref".into(), &self.ref_pos),
            ("final.ln_g".into(), &self.final_ln_g),
            ("final.ln_b".into(), &self.final_ln_b),
            ("final.mod_w".into(), &self.final_mod_w),
            ("final.mod_b".into(), &self.final_mod_b),
            ("out.w".into(), &self.w_out),
            ("out.b".into(), &self.b_out),
        ];
        for (j, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, &Tensor); 29] = [
                ("attn.ln_g", &b.attn_ln_g),
                ("attn.ln_b", &b.attn_ln_b),
                ("attn.mod_w", &b.attn_mod_w),
                ("attn.mod_b", &b.attn_mod_b),
                ("attn.wq", &b.wq),
                ("attn.bq", &b.bq),
                ("attn.wk", &b.wk),
                ("attn.bk", &b.bk),
                ("attn.wv", &b.wv),
                ("attn.bv", &b.bv),
                ("attn.wo", &b.wo),
                ("attn.bo", &b.bo),
                ("cross.ln_g", &b.ca_ln_g),
                ("cross.ln_b", &b.ca_ln_b),
                ("cross.mod_w", &b.ca_mod_w),
                ("cross.mod_b", &b.ca_mod_b),
                ("cross.aq", &b.aq),
                ("cross.ak", &b.ak),
                ("cross.av", &b.av),
                ("cross.ao", &b.ao),
                ("cross.ao_b", &b.ao_b),
                ("mlp.ln_g", &b.mlp_ln_g),
                ("mlp.ln_b", &b.mlp_ln_b),
                ("mlp.mod_w", &b.mlp_mod_w),
                ("mlp.mod_b", &b.mlp_mod_b),
                ("mlp.w1", &b.w1),
                ("mlp.b1", &b.b1),
                ("mlp.w2", &b.w2),
                ("mlp.b2", &b.b2),
            ];
            for (name, t) in fields {
                out.push((format!("block{j}.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.w_in,
            &mut self.b_in,
            &mut self.pos_spatial,
            &mut self.ref_pos,
            &mut self.final_ln_g,
            &mut self.final_ln_b,
            &mut self.final_mod_w,
            &mut self.final_mod_b,
            &mut self.w_out,
            &mut self.b_out,
        ];
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.attn_ln_g,
                &mut b.attn_ln_b,
                &mut b.attn_mod_w,
                &mut b.attn_mod_b,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ca_ln_g,
                &mut b.ca_ln_b,
                &mut b.ca_mod_w,
                &mut b.ca_mod_b,
                &mut b.aq,
                &mut b.ak,
                &mut b.av,
                &mut b.ao,
                &mut b.ao_b,
                &mut b.mlp_ln_g,
                &mut b.mlp_ln_b,
                &mut b.mlp_mod_w,
                &mut b.mlp_mod_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Rebuild parameters from named tensors (a loaded checkpoint). Every
    /// expected name must be present with the right shape; extras are errors.
    pub fn from_named(cfg: ModelConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut p = DitParams::init(cfg, &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> = p
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.dims().to_vec()))
            .collect();
        let map: std::collections::BTreeMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if map.len() != entries.len() {
            return Err(RestError::Format("duplicate tensor name in checkpoint".into()));
        }
        for (name, dims) in &expected {
            let t = map.get(name.as_str()).ok_or_else(|| {
                RestError::Format(format!("checkpoint missing tensor '{name}'"))
            })?;
            if t.dims() != dims.as_slice() {
                return Err(RestError::Format(format!(
                    "checkpoint tensor '{name}' has shape {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        if map.len() != expected.len() {
            let known: std::collections::BTreeSet<&str> =
                expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = map
                .keys()
                .filter(|k| !known.contains(*k))
                .copied()
                .collect();
            return Err(RestError::Format(format!(
                "checkpoint has unexpected tensors: {extra:?}"
            )));
        }
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (name, _) in &expected {
            named.push((name.clone(), map[name.as_str()].requiring_grad()));
        }
        for (slot, (_, t)) in p.params_mut().into_iter().zip(named.into_iter()) {
            *slot = t;
        }
        Ok(p)
    }
}

/// Where attention keys and values come from and where fresh ones go.
pub enum CacheRoute<'a> {
    /// No cache: full attention inside the given tokens only (teacher mode).
    None,
    /// Constant-size streaming cache (production path).
    Ring(&'a mut IdContextCache),
    /// Unbounded history cache driving the independent brute-force attention
    /// path (oracle and naive baseline; inference only, output is detached).
    Full(&'a mut FullHistoryCache),
}

/// One chunk of model input. All tensors are constants with respect to the
/// graph; gradients flow into parameters only.
pub struct ChunkInput<'a> {
    /// Noisy latents [h, w, f_c, dv].
    pub latents: &'a Tensor,
    /// Clean reference latent frame [h, w, 1, dv]; present on the first chunk
    /// of a stream (and for the teacher), absent afterwards.
    pub reference: Option<&'a Tensor>,
    /// Speech latents for the chunk's frames [f_c, window, d_A]. Pass zeros
    /// to drop the audio condition.
    pub audio: &'a Tensor,
    /// Noise level per frame, length f_c. Chunk-constant in normal use.
    pub t_frames: &'a [f32],
    /// 0-based index of the chunk's first frame, for positional embeddings.
    pub frame_offset: usize,
}

fn modulated_ln(
    x: &Tensor,
    ln_g: &Tensor,
    ln_b: &Tensor,
    mod_w: &Tensor,
    mod_b: &Tensor,
    t_embs: &[Tensor],
    s_tokens: usize,
) -> Result<Tensor> {
    let d = x.dims()[1];
    let ln = x.layer_norm(ln_g, ln_b)?;
    let mut parts = Vec::with_capacity(t_embs.len());
    for (i, emb) in t_embs.iter().enumerate() {
        let m = emb.matmul(mod_w)?.add(&mod_b.broadcast_rows(1)?)?;
        let gain1 = m.slice(1, 0, d)?.add_scalar(1.0).broadcast_rows(s_tokens)?;
        let shift = m.slice(1, d, d)?.broadcast_rows(s_tokens)?;
        let rows = ln.slice(0, i * s_tokens, s_tokens)?;
        parts.push(rows.mul(&gain1)?.add(&shift)?);
    }
    concat(&parts, 0)
}

/// Multi-head attention core on projected tensors. Queries [Tq, d], keys and
/// values [Tk, d]; returns the pre-output-projection mix [Tq, d].
fn attention_mix(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let d = q.dims()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let scores = qh.matmul(&kh.transpose2()?)?.scale(scale);
        let attn = scores.softmax(1)?;
        outs.push(attn.matmul(&vh)?);
    }
    concat(&outs, 1)
}

/// Independent reference attention: materializes the concatenated key/value
/// sequence, runs a full f64 attention with the query mask restricted to the
/// current rows, and returns a detached result. Deliberately written as plain
/// loops with no shared code with `attention_mix`.
fn attention_bruteforce(q: &Tensor, segments: &[&(Tensor, Tensor)], heads: usize) -> Result<Tensor> {
    let (tq, d) = (q.dims()[0], q.dims()[1]);
    let mut keys: Vec<f32> = Vec::new();
    let mut vals: Vec<f32> = Vec::new();
    for (k, v) in segments {
        keys.extend_from_slice(k.data());
        vals.extend_from_slice(v.data());
    }
    let tk = keys.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0f32; tq * d];
    for row in 0..tq {
        for h in 0..heads {
            let off = h * dh;
            let mut logits = vec![0.0f64; tk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..tk {
                let mut dot = 0.0f64;
                for c in 0..dh {
                    dot += q.data()[row * d + off + c] as f64 * keys[j * d + off + c] as f64;
                }
                logits[j] = dot * scale;
                max = max.max(logits[j]);
            }
            let mut denom = 0.0f64;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            for c in 0..dh {
                let mut acc = 0.0f64;
                for j in 0..tk {
                    acc += logits[j] / denom * vals[j * d + off + c] as f64;
                }
                out[row * d + off + c] = acc as f32;
            }
        }
    }
    Tensor::from_vec(&[tq, d], out)
}

fn self_attention(
    p: &DitParams,
    b: &BlockParams,
    block_idx: usize,
    h_mod: &Tensor,
    has_ref: bool,
    step: usize,
    route: &mut CacheRoute,
) -> Result<Tensor> {
    let cfg = &p.cfg;
    let s = cfg.tokens_per_frame();
    let t = h_mod.dims()[0];
    let q = h_mod.matmul(&b.wq)?.add(&b.bq.broadcast_rows(t)?)?;
    let k = h_mod.matmul(&b.wk)?.add(&b.bk.broadcast_rows(t)?)?;
    let v = h_mod.matmul(&b.wv)?.add(&b.bv.broadcast_rows(t)?)?;
    let abl = cfg.ablation;

    let mix = match route {
        CacheRoute::None => attention_mix(&q, &k, &v, cfg.heads)?,
        CacheRoute::Ring(cache) => {
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            if !has_ref && !abl.no_id_sink {
                if let Some((sk, sv)) = cache.sink(block_idx, step) {
                    ks.push(sk.clone());
                    vs.push(sv.clone());
                }
            }
            if !abl.no_context_cache {
                if let Some((ck, cv)) = cache.context(block_idx, step) {
                    ks.push(ck.clone());
                    vs.push(cv.clone());
                }
            }
            ks.push(k.clone());
            vs.push(v.clone());
            let k_all = concat(&ks, 0)?;
            let v_all = concat(&vs, 0)?;
            let mix = attention_mix(&q, &k_all, &v_all, cfg.heads)?;
            if has_ref && !abl.no_id_sink {
                cache.put_sink(block_idx, step, (k.slice(0, 0, s)?, v.slice(0, 0, s)?))?;
            }
            if !abl.no_context_cache {
                let frames_start = if has_ref { s } else { 0 };
                cache.put_context(
                    block_idx,
                    step,
                    (
                        k.slice(0, frames_start, t - frames_start)?,
                        v.slice(0, frames_start, t - frames_start)?,
                    ),
                )?;
            }
            mix
        }
        CacheRoute::Full(cache) => {
            let mut segs: Vec<(Tensor, Tensor)> = Vec::new();
            if !has_ref && !abl.no_id_sink {
                if let Some((sk, sv)) = cache.sink(block_idx, step) {
                    segs.push((sk.clone(), sv.clone()));
                }
            }
            if !abl.no_context_cache {
                if let Some((ck, cv)) = cache.last(block_idx, step) {
                    segs.push((ck.clone(), cv.clone()));
                }
            }
            let cur = (k.detach(), v.detach());
            segs.push(cur.clone());
            let seg_refs: Vec<&(Tensor, Tensor)> = segs.iter().collect();
            let mix = attention_bruteforce(&q, &seg_refs, cfg.heads)?;
            if has_ref && !abl.no_id_sink {
                cache.put_sink(
                    block_idx,
                    step,
                    (cur.0.slice(0, 0, s)?, cur.1.slice(0, 0, s)?),
                )?;
            }
            if !abl.no_context_cache {
                let frames_start = if has_ref { s } else { 0 };
                cache.push_chunk(
                    block_idx,
                    step,
                    (
                        cur.0.slice(0, frames_start, t - frames_start)?,
                        cur.1.slice(0, frames_start, t - frames_start)?,
                    ),
                )?;
            }
            mix
        }
    };
    mix.matmul(&b.wo)?.add(&b.bo.broadcast_rows(t)?)
}

fn audio_cross_attention(
    cfg: &ModelConfig,
    b: &BlockParams,
    h_mod: &Tensor,
    audio: &Tensor,
    has_ref: bool,
) -> Result<Tensor> {
    let s = cfg.tokens_per_frame();
    let d = cfg.model_dim;
    let f_c = audio.dims()[0];
    let (win, da) = (cfg.speech.window, cfg.speech.latent_dim);
    if audio.dims() != [f_c, win, da] {
        return Err(RestError::Alignment(format!(
            "audio latents {:?}, expected [{f_c}, {win}, {da}]",
            audio.dims()
        )));
    }
    let ref_rows = if has_ref { s } else { 0 };
    if h_mod.dims()[0] != ref_rows + f_c * s {
        return Err(RestError::Alignment(format!(
            "audio frames {f_c} do not match token rows {}",
            h_mod.dims()[0]
        )));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut parts = Vec::with_capacity(f_c);
    for fr in 0..f_c {
        let rows = h_mod.slice(0, ref_rows + fr * s, s)?;
        let e = audio.slice(0, fr, 1)?.reshape(&[win, da])?;
        let q = rows.matmul(&b.aq)?;
        let k = e.matmul(&b.ak)?;
        let v = e.matmul(&b.av)?;
        let attn = q.matmul(&k.transpose2()?)?.scale(scale).softmax(1)?;
        parts.push(attn.matmul(&v)?);
    }
    let frames = concat(&parts, 0)?;
    let proj = frames
        .matmul(&b.ao)?
        .add(&b.ao_b.broadcast_rows(f_c * s)?)?;
    if has_ref {
        // Reference tokens receive no audio.
        concat(&[Tensor::zeros(&[s, d]), proj], 0)
    } else {
        Ok(proj)
    }
}

/// Run the transformer on one chunk at one noise level. Returns the predicted
/// flow for the chunk's frames as a frame-major token matrix [f_c*S, dv].
///
/// Teacher mode is this same function with the whole sequence as a single
/// chunk, the reference attached, and `CacheRoute::None`.
pub fn forward_chunk(
    p: &DitParams,
    input: &ChunkInput,
    step: usize,
    route: &mut CacheRoute,
) -> Result<Tensor> {
    let cfg = &p.cfg;
    let s = cfg.tokens_per_frame();
    let dims = input.latents.dims();
    if dims.len() != 4
        || dims[0] != cfg.video.latent_h()
        || dims[1] != cfg.video.latent_w()
        || dims[3] != cfg.video.latent_channels
    {
        return Err(RestError::Shape(format!(
            "chunk latents {dims:?} do not match the configured latent grid"
        )));
    }
    let f_c = dims[2];
    if input.t_frames.len() != f_c {
        return Err(RestError::Shape(format!(
            "{} noise levels for {f_c} frames",
            input.t_frames.len()
        )));
    }
    if cfg.ablation.no_id_sink && input.reference.is_some() {
        return Err(RestError::Usage(
            "reference tokens attached while the ID sink is ablated".into(),
        ));
    }

    let has_ref = input.reference.is_some();
    let ref_rows = if has_ref { s } else { 0 };
    let t_rows = ref_rows + f_c * s;
    let n_groups = f_c + if has_ref { 1 } else { 0 };

    // Token matrix, frame-major, reference first.
    let mut tok = latents_to_tokens(input.latents)?;
    if let Some(r) = input.reference {
        if r.dims() != [dims[0], dims[1], 1, dims[3]] {
            return Err(RestError::Shape(format!(
                "reference latent {:?} must be a single frame on the latent grid",
                r.dims()
            )));
        }
        tok = concat(&[latents_to_tokens(r)?, tok], 0)?;
    }
    let mut x = tok
        .matmul(&p.w_in)?
        .add(&p.b_in.broadcast_rows(t_rows)?)?;

    // Positions: shared learned spatial table plus a frame sinusoid; the
    // reference slot gets a learned marker instead of a frame index.
    let spatial = concat(&vec![p.pos_spatial.clone(); n_groups], 0)?;
    let mut frame_parts = Vec::with_capacity(n_groups);
    if has_ref {
        frame_parts.push(p.ref_pos.broadcast_rows(s)?);
    }
    for fr in 0..f_c {
        frame_parts.push(frame_embedding(input.frame_offset + fr, cfg.model_dim).broadcast_rows(s)?);
    }
    x = x.add(&spatial)?.add(&concat(&frame_parts, 0)?)?;

    // Per-group timestep features; the reference is always clean (t = 0).
    let mut t_embs = Vec::with_capacity(n_groups);
    if has_ref {
        t_embs.push(timestep_embedding(0.0, cfg.time_dim));
    }
    for &tv in input.t_frames {
        if !(0.0..=1.0).contains(&tv) {
            return Err(RestError::Domain(format!("noise level {tv} outside [0, 1]")));
        }
        t_embs.push(timestep_embedding(tv, cfg.time_dim));
    }

    for (j, b) in p.blocks.iter().enumerate() {
        let h1 = modulated_ln(&x, &b.attn_ln_g, &b.attn_ln_b, &b.attn_mod_w, &b.attn_mod_b, &t_embs, s)?;
        let attn = self_attention(p, b, j, &h1, has_ref, step, route)?;
        x = x.add(&attn)?;

        let h2 = modulated_ln(&x, &b.ca_ln_g, &b.ca_ln_b, &b.ca_mod_w, &b.ca_mod_b, &t_embs, s)?;
        let cross = audio_cross_attention(cfg, b, &h2, input.audio, has_ref)?;
        x = x.add(&cross)?;

        let h3 = modulated_ln(&x, &b.mlp_ln_g, &b.mlp_ln_b, &b.mlp_mod_w, &b.mlp_mod_b, &t_embs, s)?;
        let mlp = h3
            .matmul(&b.w1)?
            .add(&b.b1.broadcast_rows(t_rows)?)?
            .gelu()
            .matmul(&b.w2)?
            .add(&b.b2.broadcast_rows(t_rows)?)?;
        x = x.add(&mlp)?;
    }

    let hf = modulated_ln(&x, &p.final_ln_g, &p.final_ln_b, &p.final_mod_w, &p.final_mod_b, &t_embs, s)?;
    let out = hf
        .matmul(&p.w_out)?
        .add(&p.b_out.broadcast_rows(t_rows)?)?;
    // Reference rows carry no flow prediction.
    out.slice(0, ref_rows, f_c * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::TimestepVector;
    use crate::flow::add_noise;

    fn setup(chunks: usize, seed: u64) -> (DitParams, Vec<Tensor>, Tensor, Tensor, Rng) {
        let cfg = ModelConfig::tiny(2, 2, chunks);
        let mut rng = Rng::new(seed);
        let p = DitParams::init(cfg, &mut rng).unwrap();
        let layout = cfg.layout().unwrap();
        let hw = [cfg.video.latent_h(), cfg.video.latent_w()];
        let z0 = Tensor::randn(&[hw[0], hw[1], cfg.f_total(), cfg.video.latent_channels], &mut rng);
        let eps = Tensor::randn(z0.dims(), &mut rng);
        let tvec = TimestepVector::synchronous(cfg.f_total(), 0.5).unwrap();
        let zt = add_noise(&z0, &eps, &tvec).unwrap();
        let chunks_z = crate::chunk::segment(&zt, &layout).unwrap();
        let reference = Tensor::randn(&[hw[0], hw[1], 1, cfg.video.latent_channels], &mut rng);
        let audio = Tensor::randn(
            &[cfg.f_total(), cfg.speech.window, cfg.speech.latent_dim],
            &mut rng,
        );
        (p, chunks_z, reference, audio, rng)
    }

    fn audio_chunk(audio: &Tensor, layout: &crate::chunk::ChunkLayout, j: usize) -> Tensor {
        let (start, end) = layout.frame_range(j);
        audio.slice(0, start, end - start + 1).unwrap()
    }

    #[test]
    fn output_shape_and_finite() {
        let (p, chunks_z, reference, audio, _) = setup(2, 1);
        let layout = p.cfg.layout().unwrap();
        let mut cache = IdContextCache::zeros(p.cfg.blocks, 1);
        let t = vec![0.5; p.cfg.chunk_len];
        let input = ChunkInput {
            latents: &chunks_z[0],
            reference: Some(&reference),
            audio: &audio_chunk(&audio, &layout, 0),
            t_frames: &t,
            frame_offset: 0,
        };
        let v = forward_chunk(&p, &input, 0, &mut CacheRoute::Ring(&mut cache)).unwrap();
        assert_eq!(
            v.dims(),
            &[p.cfg.chunk_len * p.cfg.tokens_per_frame(), p.cfg.video.latent_channels]
        );
        v.assert_finite("flow prediction").unwrap();
    }

    #[test]
    fn teacher_equals_student_first_chunk() {
        // With an empty cache, the streaming path must reproduce full
        // attention over [reference || chunk] bit-for-bit.
        let (p, chunks_z, reference, audio, _) = setup(1, 2);
        let layout = p.cfg.layout().unwrap();
        let t = vec![0.7; p.cfg.chunk_len];
        let a0 = audio_chunk(&audio, &layout, 0);
        let input = ChunkInput {
            latents: &chunks_z[0],
            reference: Some(&reference),
            audio: &a0,
            t_frames: &t,
            frame_offset: 0,
        };
        let teacher = forward_chunk(&p, &input, 0, &mut CacheRoute::None).unwrap();
        let mut cache = IdContextCache::zeros(p.cfg.blocks, 1);
        let student = forward_chunk(&p, &input, 0, &mut CacheRoute::Ring(&mut cache)).unwrap();
        for (a, b) in teacher.data().iter().zip(student.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn ring_matches_bruteforce_across_chunks() {
        let (p, chunks_z, reference, audio, _) = setup(3, 3);
        let layout = p.cfg.layout().unwrap();
        let mut ring = IdContextCache::zeros(p.cfg.blocks, 1);
        let mut full = FullHistoryCache::zeros(p.cfg.blocks, 1);
        for j in 0..layout.k {
            let t = vec![0.4; p.cfg.chunk_len];
            let a = audio_chunk(&audio, &layout, j);
            let r = if j == 0 { Some(&reference) } else { None };
            let input = ChunkInput {
                latents: &chunks_z[j],
                reference: r,
                audio: &a,
                t_frames: &t,
                frame_offset: 0,
            };
            let via_ring =
                forward_chunk(&p, &input, 0, &mut CacheRoute::Ring(&mut ring)).unwrap();
            let via_full =
                forward_chunk(&p, &input, 0, &mut CacheRoute::Full(&mut full)).unwrap();
            for (a, b) in via_ring.data().iter().zip(via_full.data()) {
                assert!((a - b).abs() <= 1e-5, "chunk {j}: {a} vs {b}");
            }
            ring.advance_chunk();
            full.advance_chunk();
        }
    }

    #[test]
    fn zero_audio_with_zero_projection_changes_nothing() {
        let (p, chunks_z, reference, audio, _) = setup(1, 4);
        let layout = p.cfg.layout().unwrap();
        let t = vec![0.5; p.cfg.chunk_len];
        let a = audio_chunk(&audio, &layout, 0);
        let zero_a = Tensor::zeros(a.dims());
        let run = |aud: &Tensor| {
            let input = ChunkInput {
                latents: &chunks_z[0],
                reference: Some(&reference),
                audio: aud,
                t_frames: &t,
                frame_offset: 0,
            };
            forward_chunk(&p, &input, 0, &mut CacheRoute::None).unwrap()
        };
        // ao starts at zero, so even real audio contributes nothing yet, and
        // zeroed audio gives a zero value path regardless of ao.
        let with_audio = run(&a);
        let without = run(&zero_a);
        for (x, y) in with_audio.data().iter().zip(without.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn token_layout_round_trip() {
        let mut rng = Rng::new(5);
        let z = Tensor::randn(&[2, 3, 4, 5], &mut rng);
        let t = latents_to_tokens(&z).unwrap();
        assert_eq!(t.dims(), &[4 * 6, 5]);
        let back = tokens_to_latents(&t, 2, 3).unwrap();
        assert_eq!(back.data(), z.data());
    }

    #[test]
    fn checkpoint_name_round_trip() {
        let cfg = ModelConfig::tiny(1, 1, 1);
        let mut rng = Rng::new(6);
        let p = DitParams::init(cfg, &mut rng).unwrap();
        let named: Vec<(String, Tensor)> = p
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.detach()))
            .collect();
        let q = DitParams::from_named(cfg, &named).unwrap();
        for ((na, a), (nb, b)) in p.named_params().iter().zip(q.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        use crate::gradcheck::check_grad_norm;
        use std::cell::RefCell;

        let (p, chunks_z, reference, audio, mut rng) = setup(1, 8);
        let layout = p.cfg.layout().unwrap();
        let cfg = p.cfg;
        let a0 = audio_chunk(&audio, &layout, 0);
        let t = vec![0.6; cfg.chunk_len];
        let target = Tensor::randn(
            &[cfg.chunk_len * cfg.tokens_per_frame(), cfg.video.latent_channels],
            &mut rng,
        );
        let cell = RefCell::new(p);

        // Substitute one parameter at a time and compare its gradient of the
        // flow-matching loss against central differences.
        let mut probe_rng = Rng::new(80);
        let mut check = |name: &str, get: &dyn Fn(&mut DitParams) -> &mut Tensor| {
            let (dims, mut x0) = {
                let mut p = cell.borrow_mut();
                let t = get(&mut p);
                (t.dims().to_vec(), t.data().to_vec())
            };
            // Zero-initialized params are a degenerate check point; nudge.
            if x0.iter().all(|&v| v == 0.0) {
                for v in x0.iter_mut() {
                    *v = 0.05 * probe_rng.normal();
                }
            }
            let loss_fn = |w: &Tensor| {
                let mut p = cell.borrow_mut();
                *get(&mut p) = w.clone();
                let input = ChunkInput {
                    latents: &chunks_z[0],
                    reference: Some(&reference),
                    audio: &a0,
                    t_frames: &t,
                    frame_offset: 0,
                };
                let v = forward_chunk(&p, &input, 0, &mut CacheRoute::None)?;
                v.mse(&target)
            };
            let err = check_grad_norm(loss_fn, &dims, &x0, 1e-2).unwrap();
            assert!(err <= 1e-2, "{name}: rel err {err}");
        };
        check("attn.wq", &|p| &mut p.blocks[0].wq);
        check("attn.wo", &|p| &mut p.blocks[1].wo);
        check("attn.mod_w", &|p| &mut p.blocks[0].attn_mod_w);
        check("cross.ak", &|p| &mut p.blocks[0].ak);
        check("mlp.w1", &|p| &mut p.blocks[1].w1);
        check("pos.spatial", &|p| &mut p.pos_spatial);
        check("out.w", &|p| &mut p.w_out);
    }

    #[test]
    fn gradients_flow_through_the_context_cache() {
        use crate::gradcheck::check_grad_norm;
        use std::cell::RefCell;

        let (p, chunks_z, reference, audio, mut rng) = setup(2, 9);
        let layout = p.cfg.layout().unwrap();
        let cfg = p.cfg;
        let a0 = audio_chunk(&audio, &layout, 0);
        let a1 = audio_chunk(&audio, &layout, 1);
        let t = vec![0.5; cfg.chunk_len];
        let target = Tensor::randn(
            &[cfg.chunk_len * cfg.tokens_per_frame(), cfg.video.latent_channels],
            &mut rng,
        );
        let cell = RefCell::new(p);
        // Loss on chunk 2 only; its gradient must still see wq through the
        // cached keys and values written by chunk 1.
        let loss_fn = |w: &Tensor| {
            let mut p = cell.borrow_mut();
            p.blocks[0].wq = w.clone();
            let mut cache = IdContextCache::zeros(cfg.blocks, 1);
            let first = ChunkInput {
                latents: &chunks_z[0],
                reference: Some(&reference),
                audio: &a0,
                t_frames: &t,
                frame_offset: 0,
            };
            forward_chunk(&p, &first, 0, &mut CacheRoute::Ring(&mut cache))?;
            cache.advance_chunk();
            let second = ChunkInput {
                latents: &chunks_z[1],
                reference: None,
                audio: &a1,
                t_frames: &t,
                frame_offset: 0,
            };
            let v = forward_chunk(&p, &second, 0, &mut CacheRoute::Ring(&mut cache))?;
            v.mse(&target)
        };
        let (dims, x0) = {
            let p = cell.borrow();
            (p.blocks[0].wq.dims().to_vec(), p.blocks[0].wq.data().to_vec())
        };
        let err = check_grad_norm(loss_fn, &dims, &x0, 1e-2).unwrap();
        assert!(err <= 1e-2, "rel err through cache: {err}");
    }

    #[test]
    fn sink_ablation_rejects_reference() {
        let mut cfg = ModelConfig::tiny(1, 1, 1);
        cfg.ablation.no_id_sink = true;
        let mut rng = Rng::new(7);
        let p = DitParams::init(cfg, &mut rng).unwrap();
        let hw = [cfg.video.latent_h(), cfg.video.latent_w()];
        let z = Tensor::randn(&[hw[0], hw[1], cfg.chunk_len, cfg.video.latent_channels], &mut rng);
        let r = Tensor::randn(&[hw[0], hw[1], 1, cfg.video.latent_channels], &mut rng);
        let a = Tensor::zeros(&[cfg.chunk_len, cfg.speech.window, cfg.speech.latent_dim]);
        let t = vec![0.5; cfg.chunk_len];
        let input = ChunkInput {
            latents: &z,
            reference: Some(&r),
            audio: &a,
            t_frames: &t,
            frame_offset: 0,
        };
        let err = forward_chunk(&p, &input, 0, &mut CacheRoute::None).unwrap_err();
        assert!(matches!(err, RestError::Usage(_)));
    }
}
