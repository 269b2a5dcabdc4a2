//! Self-contained oracle suite behind the `verify` subcommand.
//!
//! Each check re-derives its expected answer independently of the code under
//! test: finite differences for gradients, f64 plain-loop recomputation for
//! attention and losses, closed forms for flow paths. The whole suite runs on
//! tiny shapes and finishes in seconds.

use std::time::Instant;

use crate::chunk::TimestepVector;
use crate::codec::{SpeechCodec, VideoCodec};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{RestError, Result};
use crate::flow::{add_noise, euler_step, flow_target, TimeSchedule};
use crate::gradcheck::{check_grad, check_grad_norm};
use crate::infer::{generate, generate_teacher, CacheKind};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{forward_chunk, CacheRoute, ChunkInput, DitParams, IdContextCache};
use crate::rng::Rng;
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;
use crate::train::{contrastive_loss, encode_clip, smoothness_loss, student_step, StepRngs};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub ms: f64,
}

fn run_check<F>(name: &'static str, f: F) -> CheckResult
where
    F: FnOnce() -> Result<String>,
{
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(e) => (false, e.to_string()),
    };
    CheckResult { name, passed, detail, ms: start.elapsed().as_secs_f64() * 1e3 }
}

fn ensure(cond: bool, msg: String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(RestError::Verify(msg))
    }
}

fn scratch_path(stem: &str) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("rest-verify-{}-{stem}", std::process::id()))
}

fn tiny_model(chunks: usize, seed: u64) -> Result<(DitParams, Tensor, Tensor)> {
    let cfg = ModelConfig::tiny(2, 2, chunks);
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
    Ok((p, reference, audio))
}

fn check_op_gradients() -> Result<String> {
    let mut rng = Rng::new(31);
    let a = Tensor::randn(&[3, 4], &mut rng);
    let x0: Vec<f32> = Tensor::randn(&[4, 3], &mut rng).data().to_vec();
    let err = check_grad(
        |w| Ok(a.matmul(w)?.softmax(1)?.mul(&a.matmul(w)?)?.sum_all()),
        &[4, 3],
        &x0,
        1e-3,
    )?;
    ensure(err <= 1e-2, format!("composite op gradient rel err {err}"))?;
    Ok(format!("max rel err {err:.2e}"))
}

fn check_flow_path() -> Result<String> {
    let mut rng = Rng::new(32);
    let z0 = Tensor::randn(&[2, 2, 3, 2], &mut rng);
    let eps = Tensor::randn(&[2, 2, 3, 2], &mut rng);
    let t0 = TimestepVector::synchronous(3, 0.0)?;
    let t1 = TimestepVector::synchronous(3, 1.0)?;
    let at0 = add_noise(&z0, &eps, &t0)?;
    let at1 = add_noise(&z0, &eps, &t1)?;
    for (a, b) in at0.data().iter().zip(z0.data()) {
        ensure((a - b).abs() < 1e-6, "path start is not the clean latent".into())?;
    }
    for (a, b) in at1.data().iter().zip(eps.data()) {
        ensure((a - b).abs() < 1e-6, "path end is not the noise sample".into())?;
    }
    // One exact-velocity Euler step from t=1 to t=0 recovers z0.
    let v = flow_target(&z0, &eps)?;
    let back = euler_step(&eps, &v, 1.0, 0.0)?;
    let mut worst = 0.0f32;
    for (a, b) in back.data().iter().zip(z0.data()) {
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-5, format!("exact reverse step missed z0 by {worst}"))?;
    let s = TimeSchedule::uniform(8);
    ensure(s.steps[0] == 1.0 && *s.steps.last().unwrap() == 0.0, "schedule endpoints".into())?;
    Ok(format!("reverse step error {worst:.2e}"))
}

fn check_tensor_format() -> Result<String> {
    let mut rng = Rng::new(33);
    let t = Tensor::randn(&[3, 5, 2], &mut rng);
    let path = scratch_path("t.tnsr");
    save_tensor(&path, &t)?;
    let back = load_tensor(&path)?;
    let _ = std::fs::remove_file(&path);
    ensure(back.dims() == t.dims(), "dims changed in round trip".into())?;
    ensure(back.data() == t.data(), "payload changed in round trip".into())?;
    Ok("bit-exact round trip".into())
}

fn check_checkpoint_format() -> Result<String> {
    let (p, _, _) = tiny_model(1, 34)?;
    let path = scratch_path("m.ckpt");
    save_checkpoint(&path, &p.named_params())?;
    let entries = load_checkpoint(&path)?;
    let _ = std::fs::remove_file(&path);
    let back = DitParams::from_named(p.cfg, &entries)?;
    for ((na, a), (nb, b)) in p.named_params().iter().zip(back.named_params().iter()) {
        ensure(na == nb, format!("name order drifted: {na} vs {nb}"))?;
        ensure(a.data() == b.data(), format!("payload of {na} changed"))?;
    }
    Ok(format!("{} tensors bit-exact", p.named_params().len()))
}

fn check_cache_equivalence() -> Result<String> {
    let (p, reference, audio) = tiny_model(3, 35)?;
    let ring = generate(&p, Some(reference.clone()), &audio, 17, CacheKind::Ring)?;
    let full = generate(&p, Some(reference), &audio, 17, CacheKind::FullHistory)?;
    let mut worst = 0.0f32;
    for (a, b) in ring.latents.data().iter().zip(full.latents.data()) {
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-5, format!("ring vs full-history diverged by {worst}"))?;
    Ok(format!("max abs diff {worst:.2e} over 3 chunks"))
}

fn check_teacher_student_chunk1() -> Result<String> {
    let (p, reference, audio) = tiny_model(1, 36)?;
    let cfg = &p.cfg;
    let mut rng = Rng::new(60);
    let z = Tensor::randn(
        &[cfg.video.latent_h(), cfg.video.latent_w(), cfg.chunk_len, cfg.video.latent_channels],
        &mut rng,
    );
    let t_frames = vec![0.4f32; cfg.chunk_len];
    let a = audio.slice(0, 0, cfg.chunk_len)?;
    let input = ChunkInput {
        latents: &z,
        reference: Some(&reference),
        audio: &a,
        t_frames: &t_frames,
        frame_offset: 0,
    };
    let teacher = forward_chunk(&p, &input, 0, &mut CacheRoute::None)?;
    let mut cache = IdContextCache::zeros(cfg.blocks, 1);
    let student = forward_chunk(&p, &input, 0, &mut CacheRoute::Ring(&mut cache))?;
    let mut worst = 0.0f32;
    for (a, b) in teacher.data().iter().zip(student.data()) {
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-5, format!("first-chunk student off by {worst}"))?;
    Ok(format!("max abs diff {worst:.2e}"))
}

fn check_single_chunk_sampler() -> Result<String> {
    let (p, reference, audio) = tiny_model(1, 37)?;
    let streamed = generate(&p, Some(reference.clone()), &audio, 21, CacheKind::Ring)?;
    let teacher = generate_teacher(&p, Some(reference), &audio, 21)?;
    let mut worst = 0.0f32;
    for (a, b) in streamed.latents.data().iter().zip(teacher.data()) {
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-4, format!("k=1 stream vs full sampler off by {worst}"))?;
    Ok(format!("max abs diff {worst:.2e}"))
}

fn check_causality() -> Result<String> {
    let (mut p, reference, audio) = tiny_model(3, 38)?;
    let mut rng = Rng::new(61);
    for b in &mut p.blocks {
        let nudge = Tensor::randn(b.ao.dims(), &mut rng).scale(0.3);
        b.ao = b.ao.add(&nudge)?.detach();
    }
    let out1 = generate(&p, Some(reference.clone()), &audio, 23, CacheKind::Ring)?;
    let layout = p.cfg.layout()?;
    let (lo, _) = layout.owned_range(2);
    let stride = p.cfg.speech.window * p.cfg.speech.latent_dim;
    let mut data = audio.data().to_vec();
    for v in data[lo * stride..].iter_mut() {
        *v = -*v + 0.5;
    }
    let audio2 = Tensor::from_vec(audio.dims(), data)?;
    let out2 = generate(&p, Some(reference), &audio2, 23, CacheKind::Ring)?;
    for j in 0..2 {
        ensure(
            out1.chunks[j].data() == out2.chunks[j].data(),
            format!("chunk {} changed when only later audio changed", j + 1),
        )?;
    }
    ensure(
        out1.chunks[2].data() != out2.chunks[2].data(),
        "changed audio had no effect on its own chunk".into(),
    )?;
    Ok("earlier chunks bit-identical, last chunk responds".into())
}

fn check_constant_cache() -> Result<String> {
    let (p, reference, audio) = tiny_model(4, 39)?;
    let out = generate(&p, Some(reference), &audio, 29, CacheKind::Ring)?;
    let tail = &out.cache_bytes[1..];
    ensure(
        tail.windows(2).all(|w| w[0] == w[1]),
        format!("ring cache grew: {:?}", out.cache_bytes),
    )?;
    Ok(format!("{} bytes per chunk from chunk 2 on", tail[0]))
}

fn check_loss_decomposition() -> Result<String> {
    let cfg = ModelConfig::tiny(1, 2, 2);
    let mut rng = Rng::new(40);
    let student = DitParams::init(cfg, &mut rng)?;
    let teacher = DitParams::init(cfg, &mut rng)?;
    let clip_src = crate::corpus::make_clip(
        7,
        "v".into(),
        [0.8, 0.3, 0.5],
        &cfg.video,
        &cfg.speech,
        &crate::corpus::MotionParams::default(),
    )?;
    let vc = VideoCodec::init(cfg.video, &mut rng)?;
    let sc = SpeechCodec::init(cfg.speech, &mut rng)?;
    let clip = encode_clip(&clip_src, &vc, &sc)?;
    let tc = TrainConfig { lambda_con: 0.6, lambda_smo: 1.7, ..TrainConfig::default() };
    let mut rngs = StepRngs::new(41);
    let losses = student_step(&student, Some(&teacher), &clip, &tc, &mut rngs)?;
    let total = losses.total.item();
    let rebuilt = losses.flow.item()
        + tc.lambda_con * losses.contrastive.as_ref().map(|t| t.item()).unwrap_or(0.0)
        + tc.lambda_smo * losses.smoothness.as_ref().map(|t| t.item()).unwrap_or(0.0);
    let err = (total - rebuilt).abs();
    ensure(err <= 1e-5, format!("total {total} vs recomposed {rebuilt}"))?;
    Ok(format!("decomposition error {err:.2e}"))
}

fn check_contrastive_bruteforce() -> Result<String> {
    let frames = 4;
    let dim = 6;
    let tau = 0.07f32;
    let mut rng = Rng::new(42);
    let vs = Tensor::randn(&[frames, dim], &mut rng);
    let vt = Tensor::randn(&[frames, dim], &mut rng);
    let loss = contrastive_loss(&vs, &vt, frames, tau, false)?.item() as f64;
    // f64 recomputation from raw buffers.
    let cos = |a: &[f32], b: &[f32]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut expect = 0.0f64;
    for i in 0..frames {
        let si = &vs.data()[i * dim..(i + 1) * dim];
        let pos = cos(si, &vt.data()[i * dim..(i + 1) * dim]) / tau as f64;
        let mut denom = 0.0f64;
        for j in 0..frames {
            if j != i {
                denom += (cos(si, &vt.data()[j * dim..(j + 1) * dim]) / tau as f64).exp();
            }
        }
        expect += denom.ln() - pos;
    }
    expect /= frames as f64;
    let err = (loss - expect).abs() / expect.abs().max(1.0);
    ensure(err <= 1e-4, format!("graph {loss} vs brute force {expect}"))?;
    Ok(format!("rel err {err:.2e}"))
}

fn check_smoothness_oracle() -> Result<String> {
    // Teacher flow linear in frame index, student adds u * t^2: the residual
    // second difference is exactly 2u per interior frame, so the loss is
    // 4 ||u||^2.
    let frames = 5;
    let dim = 3;
    let mut rng = Rng::new(43);
    let u: Vec<f32> = (0..dim).map(|_| rng.normal()).collect();
    let base: Vec<f32> = (0..dim).map(|_| rng.normal()).collect();
    let mut vt = Vec::new();
    let mut vs = Vec::new();
    for t in 0..frames {
        for d in 0..dim {
            let lin = base[d] * (1.0 + t as f32);
            vt.push(lin);
            vs.push(lin + u[d] * (t as f32) * (t as f32));
        }
    }
    let vt = Tensor::from_vec(&[frames, dim], vt)?;
    let vs = Tensor::from_vec(&[frames, dim], vs)?;
    let loss = smoothness_loss(&vs, &vt, frames, false)?.item();
    let expect: f32 = 4.0 * u.iter().map(|x| x * x).sum::<f32>();
    let err = (loss - expect).abs() / expect.max(1e-6);
    ensure(err <= 1e-4, format!("loss {loss} vs closed form {expect}"))?;
    Ok(format!("rel err {err:.2e}"))
}

fn check_loss_gradients() -> Result<String> {
    let frames = 3;
    let dim = 4;
    let mut rng = Rng::new(44);
    let vt = Tensor::randn(&[frames, dim], &mut rng);
    let x0: Vec<f32> = Tensor::randn(&[frames, dim], &mut rng).data().to_vec();
    let e1 = check_grad_norm(
        |v| contrastive_loss(v, &vt, frames, 0.07, false),
        &[frames, dim],
        &x0,
        1e-3,
    )?;
    let e2 = check_grad_norm(
        |v| smoothness_loss(v, &vt, frames, false),
        &[frames, dim],
        &x0,
        1e-3,
    )?;
    ensure(e1 <= 1e-2, format!("contrastive gradient rel err {e1}"))?;
    ensure(e2 <= 1e-2, format!("smoothness gradient rel err {e2}"))?;
    Ok(format!("contrastive {e1:.2e}, smoothness {e2:.2e}"))
}

fn check_model_gradient() -> Result<String> {
    use std::cell::RefCell;
    let cfg = ModelConfig::tiny(1, 2, 1);
    let mut rng = Rng::new(45);
    let p = RefCell::new(DitParams::init(cfg, &mut rng)?);
    let z = Tensor::randn(
        &[cfg.video.latent_h(), cfg.video.latent_w(), cfg.chunk_len, cfg.video.latent_channels],
        &mut rng,
    );
    let audio = Tensor::randn(&[cfg.chunk_len, cfg.speech.window, cfg.speech.latent_dim], &mut rng);
    let reference = Tensor::randn(
        &[cfg.video.latent_h(), cfg.video.latent_w(), 1, cfg.video.latent_channels],
        &mut rng,
    );
    let t_frames = vec![0.6f32; cfg.chunk_len];
    let dims = p.borrow().blocks[0].wq.dims().to_vec();
    let x0 = p.borrow().blocks[0].wq.data().to_vec();
    let err = check_grad_norm(
        |w| {
            p.borrow_mut().blocks[0].wq = w.clone();
            let pb = p.borrow();
            let input = ChunkInput {
                latents: &z,
                reference: Some(&reference),
                audio: &audio,
                t_frames: &t_frames,
                frame_offset: 0,
            };
            let out = forward_chunk(&pb, &input, 0, &mut CacheRoute::None)?;
            Ok(out.mul(&out)?.sum_all())
        },
        &dims,
        &x0,
        1e-2,
    )?;
    ensure(err <= 1e-2, format!("attention weight gradient rel err {err}"))?;
    Ok(format!("rel err {err:.2e}"))
}

fn check_codec_round_trip() -> Result<String> {
    let cfg = ModelConfig::tiny(1, 1, 2);
    let mut rng = Rng::new(46);
    let vc = VideoCodec::init(cfg.video, &mut rng)?;
    let x = Tensor::randn(&cfg.video.pixel_dims(), &mut rng).scale(0.1);
    let z = vc.encode(&x)?;
    ensure(z.dims() == cfg.video.latent_dims(), "latent dims off".into())?;
    let y = vc.decode(&z)?;
    ensure(y.dims() == x.dims(), "decode dims off".into())?;
    y.assert_finite("decoded video")?;
    let sc = SpeechCodec::init(cfg.speech, &mut rng)?;
    let wave: Vec<f32> = (0..cfg.speech.samples_per_frame * cfg.speech.feature_frames)
        .map(|_| rng.normal())
        .collect();
    let feats = crate::codec::speech_feature_extract(&wave, &cfg.speech)?;
    let a = sc.encode(&feats)?;
    ensure(a.dims() == cfg.speech.latent_dims(), "audio latent dims off".into())?;
    sc.decode(&a)?.assert_finite("decoded speech features")?;
    Ok("shape and finiteness round trips hold".into())
}

fn check_sink_discipline() -> Result<String> {
    let cfg = ModelConfig::tiny(1, 1, 2);
    let mut cache = IdContextCache::zeros(cfg.blocks, 1);
    let k = Tensor::zeros(&[4, cfg.model_dim]);
    let v = Tensor::zeros(&[4, cfg.model_dim]);
    cache.put_sink(0, 0, (k.clone(), v.clone()))?;
    ensure(
        cache.put_sink(0, 0, (k, v)).is_err(),
        "sink accepted a second write".into(),
    )?;
    let (p, reference, audio) = tiny_model(3, 47)?;
    let layout = p.cfg.layout()?;
    let mut rng = Rng::new(48);
    let eps = Tensor::randn(
        &[
            p.cfg.video.latent_h(),
            p.cfg.video.latent_w(),
            p.cfg.f_total(),
            p.cfg.video.latent_channels,
        ],
        &mut rng,
    );
    let noise = crate::chunk::segment(&eps, &layout)?;
    let mut session = crate::infer::StreamSession::new(&p, Some(reference), CacheKind::Ring)?;
    let mut hashes = Vec::new();
    for (j, n) in noise.iter().enumerate() {
        let (s, e) = layout.frame_range(j);
        let a = audio.slice(0, s, e - s + 1)?;
        session.next_chunk(n, &a)?;
        hashes.push(session.sink_hash().unwrap());
    }
    ensure(
        hashes.windows(2).all(|w| w[0] == w[1]),
        format!("sink hash drifted: {hashes:?}"),
    )?;
    Ok("write-once enforced, hash stable across 3 chunks".into())
}

/// Ordered roughly bottom-up: primitives first. Each entry is independent.
const CHECKS: &[(&str, fn() -> Result<String>)] = &[
    ("op_gradients_vs_finite_diff", check_op_gradients),
    ("flow_path_and_euler_inverse", check_flow_path),
    ("tensor_format_round_trip", check_tensor_format),
    ("checkpoint_format_round_trip", check_checkpoint_format),
    ("codec_shape_round_trip", check_codec_round_trip),
    ("contrastive_vs_bruteforce", check_contrastive_bruteforce),
    ("smoothness_closed_form", check_smoothness_oracle),
    ("loss_gradients_vs_finite_diff", check_loss_gradients),
    ("model_gradient_vs_finite_diff", check_model_gradient),
    ("teacher_equals_student_chunk1", check_teacher_student_chunk1),
    ("ring_cache_equals_bruteforce", check_cache_equivalence),
    ("single_chunk_stream_equals_sampler", check_single_chunk_sampler),
    ("stream_causality", check_causality),
    ("constant_ring_cache", check_constant_cache),
    ("sink_write_once_and_stable", check_sink_discipline),
    ("student_loss_decomposition", check_loss_decomposition),
];

/// Run every oracle sequentially.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS.iter().map(|&(name, f)| run_check(name, f)).collect()
}

/// Run the oracles on up to `threads` worker threads. Each check is
/// internally single-threaded and builds all of its state locally.
pub fn run_all_parallel(threads: usize) -> Vec<CheckResult> {
    let threads = threads.clamp(1, CHECKS.len());
    if threads == 1 {
        return run_all();
    }
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CheckResult>>> = Mutex::new(vec![None; CHECKS.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= CHECKS.len() {
                    break;
                }
                let (name, f) = CHECKS[i];
                let r = run_check(name, f);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(Option::unwrap).collect()
}

/// Print one line per check; returns true when everything passed.
pub fn print_table(results: &[CheckResult]) -> bool {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut all = true;
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:width$}  {:>8.1} ms  {}", r.name, r.ms, r.detail);
        all &= r.passed;
    }
    let n_pass = results.iter().filter(|r| r.passed).count();
    println!("{n_pass}/{} checks passed", results.len());
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_suite_passes() {
        let results = run_all();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), 16);
    }
}
