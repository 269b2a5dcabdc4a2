//! Training: asynchronous teacher pretraining and streaming-student
//! distillation.
//!
//! The teacher learns the flow field on full sequences whose chunks carry
//! independent noise levels. The student then learns the same field while
//! reading its context through the streaming cache, supervised by the frozen
//! teacher through two alignment losses on per-frame flows: a contrastive
//! term that keeps each student frame closest to its own teacher frame, and a
//! smoothness term that matches second differences along time.

use std::io::Write;
use std::path::Path;

use crate::chunk::TimestepVector;
use crate::codec::{SpeechCodec, VideoCodec};
use crate::config::TrainConfig;
use crate::corpus::SyntheticClip;
use crate::error::{RestError, Result};
use crate::flow::{add_noise, flow_target, TimeSchedule};
use crate::model::{
    forward_chunk, latents_to_tokens, CacheRoute, ChunkInput, DitParams, IdContextCache,
};
use crate::rng::Rng;
use crate::tensor::adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::tensor::{concat, Tensor};

/// Per-frame contrastive alignment of student flows to teacher flows.
/// Frame i of a [f*S, c] token matrix is rows i*S .. (i+1)*S. The positive
/// pair is (student i, teacher i); the other teacher frames are negatives.
/// By default the positive is excluded from the denominator; the standard
/// form that includes it sits behind `include_positive`.
pub fn contrastive_loss(
    v_student: &Tensor,
    v_teacher: &Tensor,
    frames: usize,
    tau: f32,
    include_positive: bool,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(RestError::Domain(format!("temperature {tau} must be > 0")));
    }
    if v_student.dims() != v_teacher.dims() {
        return Err(RestError::Shape(format!(
            "flow shapes differ: {:?} vs {:?}",
            v_student.dims(),
            v_teacher.dims()
        )));
    }
    if frames < 2 || v_student.dims()[0] % frames != 0 {
        return Err(RestError::Shape(format!(
            "{} rows do not split into {frames} frames (need >= 2)",
            v_student.dims()[0]
        )));
    }
    let s = v_student.dims()[0] / frames;
    let inv_tau = 1.0 / tau;
    let mut per_frame = Vec::with_capacity(frames);
    for i in 0..frames {
        let si = v_student.slice(0, i * s, s)?;
        let mut sims = Vec::with_capacity(frames);
        for j in 0..frames {
            let tj = v_teacher.slice(0, j * s, s)?;
            sims.push(si.cosine_sim(&tj)?.scale(inv_tau));
        }
        let pos = sims[i].clone();
        let denom_terms: Vec<Tensor> = sims
            .iter()
            .enumerate()
            .filter(|(j, _)| include_positive || *j != i)
            .map(|(_, t)| t.exp())
            .collect();
        let denom = concat(&denom_terms, 0)?.sum_all();
        per_frame.push(denom.log().sub(&pos)?);
    }
    Ok(concat(&per_frame, 0)?.mean_all())
}

/// Second-difference alignment between teacher and student flows. The default
/// form is the mean over interior frames of the squared norm of
/// (d2 teacher - d2 student); `literal` selects the signed elementwise sum
/// as printed, which can go negative and is kept only for comparison.
pub fn smoothness_loss(
    v_student: &Tensor,
    v_teacher: &Tensor,
    frames: usize,
    literal: bool,
) -> Result<Tensor> {
    if v_student.dims() != v_teacher.dims() {
        return Err(RestError::Shape(format!(
            "flow shapes differ: {:?} vs {:?}",
            v_student.dims(),
            v_teacher.dims()
        )));
    }
    if frames < 3 || v_student.dims()[0] % frames != 0 {
        return Err(RestError::Shape(format!(
            "{} rows do not split into {frames} frames (need >= 3)",
            v_student.dims()[0]
        )));
    }
    let s = v_student.dims()[0] / frames;
    let second_diff = |v: &Tensor, i: usize| -> Result<Tensor> {
        let prev = v.slice(0, (i - 1) * s, s)?;
        let mid = v.slice(0, i * s, s)?;
        let next = v.slice(0, (i + 1) * s, s)?;
        next.add(&prev)?.sub(&mid.scale(2.0))
    };
    let mut acc: Option<Tensor> = None;
    for i in 1..frames - 1 {
        let d = second_diff(v_teacher, i)?.sub(&second_diff(v_student, i)?)?;
        let term = if literal {
            d.sum_all()
        } else {
            d.mul(&d)?.sum_all()
        };
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.unwrap().scale(1.0 / (frames - 2) as f32))
}

/// Latent views of one clip: clean video latents, the clean reference latent
/// frame, and the speech latents. All constants.
pub struct ClipLatents {
    pub z0: Tensor,
    pub reference: Tensor,
    pub audio: Tensor,
}

pub fn encode_clip(
    clip: &SyntheticClip,
    vc: &VideoCodec,
    sc: &SpeechCodec,
) -> Result<ClipLatents> {
    let z0 = vc.encode(&clip.video)?.detach();
    // First-frame-preserving codec: latent frame 0 is the reference image.
    let reference = z0.slice(2, 0, 1)?;
    let audio = sc.encode(&clip.features)?.detach();
    Ok(ClipLatents { z0, reference, audio })
}

/// One row of the training loss curve.
#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub step: usize,
    pub flow: f32,
    pub contrastive: f32,
    pub smoothness: f32,
    pub total: f32,
    pub grad_norm: f32,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,flow,contrastive,smoothness,total,grad_norm")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.step, r.flow, r.contrastive, r.smoothness, r.total, r.grad_norm
        )?;
    }
    f.flush()?;
    Ok(())
}

/// FNV-1a over parameter payload bits; used to prove the teacher is frozen.
pub fn params_hash(p: &DitParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (_, t) in p.named_params() {
        for v in t.data() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    h
}

/// Independent sampling streams for one training run.
pub struct StepRngs {
    time: Rng,
    noise: Rng,
    drop: Rng,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        StepRngs {
            time: root.split(1),
            noise: root.split(2),
            drop: root.split(3),
        }
    }
}

fn dropped_conditions(rngs: &mut StepRngs, tc: &TrainConfig) -> (bool, bool) {
    let drop_audio = rngs.drop.uniform() < tc.drop_audio_p;
    let drop_id = rngs.drop.uniform() < tc.drop_id_p;
    (drop_audio, drop_id)
}

fn audio_for_range(audio: &Tensor, start: usize, len: usize, drop: bool) -> Result<Tensor> {
    let a = audio.slice(0, start, len)?;
    Ok(if drop { Tensor::zeros(a.dims()) } else { a })
}

/// One teacher step: asynchronous chunk-wise noising of a full sequence,
/// full-attention forward, plain flow regression.
pub fn teacher_step(
    p: &DitParams,
    clip: &ClipLatents,
    tc: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<Tensor> {
    let cfg = &p.cfg;
    let layout = cfg.layout()?;
    let per_chunk: Vec<f32> = (0..layout.k).map(|_| rngs.time.uniform()).collect();
    let tvec = TimestepVector::asynchronous(&layout, &per_chunk)?;
    let eps = Tensor::randn(clip.z0.dims(), &mut rngs.noise);
    let zt = add_noise(&clip.z0, &eps, &tvec)?;
    let (drop_audio, drop_id) = dropped_conditions(rngs, tc);
    let audio = audio_for_range(&clip.audio, 0, cfg.f_total(), drop_audio)?;
    let reference = if drop_id {
        Tensor::zeros(clip.reference.dims())
    } else {
        clip.reference.clone()
    };
    let input = ChunkInput {
        latents: &zt,
        reference: Some(&reference),
        audio: &audio,
        t_frames: &tvec.values[1..],
        frame_offset: 0,
    };
    let v = forward_chunk(p, &input, 0, &mut CacheRoute::None)?;
    let target = latents_to_tokens(&flow_target(&clip.z0, &eps)?)?;
    v.mse(&target)
}

/// The student's loss terms for one step, already weighted and summed into
/// `total`. The decomposition is exact: total = flow + lc*con + ls*smo.
pub struct StudentLosses {
    pub flow: Tensor,
    pub contrastive: Option<Tensor>,
    pub smoothness: Option<Tensor>,
    pub total: Tensor,
}

/// One distillation step. The student runs chunk by chunk through a fresh
/// streaming cache at a noise level drawn from the sampling grid; the frozen
/// teacher provides per-frame flow targets for the alignment losses.
pub fn student_step(
    student: &DitParams,
    teacher: Option<&DitParams>,
    clip: &ClipLatents,
    tc: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<StudentLosses> {
    let cfg = &student.cfg;
    let abl = cfg.ablation;
    let layout = cfg.layout()?;
    let s = cfg.tokens_per_frame();

    // Noise level from the inference-time grid (levels reached by the
    // sampler, excluding the clean endpoint).
    let grid = TimeSchedule::uniform(cfg.steps).steps;
    let t_level = grid[(rngs.time.uniform() * cfg.steps as f32) as usize % cfg.steps];
    let tvec = TimestepVector::synchronous(cfg.f_total(), t_level)?;
    let eps = Tensor::randn(clip.z0.dims(), &mut rngs.noise);
    let zt = add_noise(&clip.z0, &eps, &tvec)?;
    let (drop_audio, drop_id) = dropped_conditions(rngs, tc);
    let reference = if drop_id {
        Tensor::zeros(clip.reference.dims())
    } else {
        clip.reference.clone()
    };

    // Streaming pass: chunk-by-chunk with the ID-sink/context cache.
    let chunks = crate::chunk::segment(&zt, &layout)?;
    let mut cache = IdContextCache::zeros(cfg.blocks, 1);
    let mut owned_flows = Vec::with_capacity(layout.k);
    for (j, chunk) in chunks.iter().enumerate() {
        let (start, end) = layout.frame_range(j);
        let audio = audio_for_range(&clip.audio, start, end - start + 1, drop_audio)?;
        let r = if j == 0 && !abl.no_id_sink { Some(&reference) } else { None };
        let t_frames = vec![t_level; cfg.chunk_len];
        let input = ChunkInput {
            latents: chunk,
            reference: r,
            audio: &audio,
            t_frames: &t_frames,
            frame_offset: 0,
        };
        let v = forward_chunk(student, &input, 0, &mut CacheRoute::Ring(&mut cache))?;
        // The shared boundary frame belongs to the earlier chunk.
        let owned = if j == 0 { v } else { v.slice(0, s, (cfg.chunk_len - 1) * s)? };
        owned_flows.push(owned);
        cache.advance_chunk();
    }
    let v_student = concat(&owned_flows, 0)?;

    let target = latents_to_tokens(&flow_target(&clip.z0, &eps)?)?;
    let flow = v_student.mse(&target)?;

    let use_teacher = !abl.no_asd;
    let mut total = flow.clone();
    let mut con = None;
    let mut smo = None;
    if use_teacher {
        let teacher = teacher.ok_or_else(|| {
            RestError::Usage("distillation requires a teacher unless no_asd is set".into())
        })?;
        let audio_full = audio_for_range(&clip.audio, 0, cfg.f_total(), drop_audio)?;
        let t_input = ChunkInput {
            latents: &zt,
            reference: Some(&reference),
            audio: &audio_full,
            t_frames: &tvec.values[1..],
            frame_offset: 0,
        };
        let v_teacher = forward_chunk(teacher, &t_input, 0, &mut CacheRoute::None)?.detach();
        if !abl.no_contrastive && tc.lambda_con > 0.0 {
            let c = contrastive_loss(
                &v_student,
                &v_teacher,
                cfg.f_total(),
                tc.temperature,
                tc.infonce_denominator,
            )?;
            total = total.add(&c.scale(tc.lambda_con))?;
            con = Some(c);
        }
        if !abl.no_smooth && tc.lambda_smo > 0.0 {
            let sm = smoothness_loss(&v_student, &v_teacher, cfg.f_total(), tc.literal_smoothness)?;
            total = total.add(&sm.scale(tc.lambda_smo))?;
            smo = Some(sm);
        }
    }
    Ok(StudentLosses { flow, contrastive: con, smoothness: smo, total })
}

fn optimize_step(
    p: &mut DitParams,
    loss: &Tensor,
    state: &mut AdamState,
    adam: &AdamConfig,
    clip_norm: f32,
) -> Result<f32> {
    loss.assert_finite("training loss")?;
    p.zero_grads();
    loss.backward()?;
    let norm = {
        let refs: Vec<&Tensor> = p.named_params().into_iter().map(|(_, t)| t).collect();
        clip_grad_norm(&refs, clip_norm)
    };
    adam_step(&mut p.params_mut(), state, adam)?;
    Ok(norm)
}

fn adam_state_for(p: &mut DitParams) -> AdamState {
    let refs: Vec<&Tensor> = p.params_mut().into_iter().map(|t| &*t).collect();
    AdamState::new(&refs)
}

/// Pretrain the teacher on full sequences. Returns the loss curve.
pub fn train_teacher(
    p: &mut DitParams,
    clips: &[ClipLatents],
    tc: &TrainConfig,
) -> Result<Vec<LossRow>> {
    tc.validate()?;
    if clips.is_empty() {
        return Err(RestError::Training("empty training corpus".into()));
    }
    let adam = AdamConfig::with_lr(tc.lr);
    let mut state = adam_state_for(p);
    let mut rngs = StepRngs::new(tc.seed);
    let mut rows = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let clip = &clips[step % clips.len()];
        let loss = teacher_step(p, clip, tc, &mut rngs)?;
        let flow = loss.item();
        let grad_norm = optimize_step(p, &loss, &mut state, &adam, tc.clip_norm)?;
        rows.push(LossRow {
            step,
            flow,
            contrastive: 0.0,
            smoothness: 0.0,
            total: flow,
            grad_norm,
        });
    }
    Ok(rows)
}

/// Distill the streaming student from a frozen teacher. Returns the loss
/// curve; errors if the teacher's parameters change during training.
pub fn train_student(
    student: &mut DitParams,
    teacher: Option<&DitParams>,
    clips: &[ClipLatents],
    tc: &TrainConfig,
) -> Result<Vec<LossRow>> {
    tc.validate()?;
    if clips.is_empty() {
        return Err(RestError::Training("empty training corpus".into()));
    }
    let teacher_hash_before = teacher.map(params_hash);
    let adam = AdamConfig::with_lr(tc.lr);
    let mut state = adam_state_for(student);
    let mut rngs = StepRngs::new(tc.seed);
    let mut rows = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let clip = &clips[step % clips.len()];
        let losses = student_step(student, teacher, clip, tc, &mut rngs)?;
        let grad_norm = optimize_step(student, &losses.total, &mut state, &adam, tc.clip_norm)?;
        rows.push(LossRow {
            step,
            flow: losses.flow.item(),
            contrastive: losses.contrastive.as_ref().map(|t| t.item()).unwrap_or(0.0),
            smoothness: losses.smoothness.as_ref().map(|t| t.item()).unwrap_or(0.0),
            total: losses.total.item(),
            grad_norm,
        });
    }
    if let (Some(before), Some(t)) = (teacher_hash_before, teacher) {
        if params_hash(t) != before {
            return Err(RestError::Training(
                "teacher parameters changed during distillation".into(),
            ));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::gradcheck::{check_grad_norm, finite_diff, max_rel_err};

    fn frame_flows(rows: &[Vec<f32>], width: usize) -> Tensor {
        let frames = rows.len();
        let mut data = Vec::new();
        for r in rows {
            assert_eq!(r.len(), width);
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[frames, width], data).unwrap()
    }

    /// Brute-force f64 recompute of the contrastive loss from raw rows.
    fn contrastive_reference(
        student: &[Vec<f32>],
        teacher: &[Vec<f32>],
        tau: f64,
        include_positive: bool,
    ) -> f64 {
        let f = student.len();
        let cos = |a: &[f32], b: &[f32]| {
            let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in a.iter().zip(b) {
                d += *x as f64 * *y as f64;
                na += (*x as f64).powi(2);
                nb += (*y as f64).powi(2);
            }
            if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
                0.0
            } else {
                d / (na.sqrt() * nb.sqrt())
            }
        };
        let mut acc = 0.0;
        for i in 0..f {
            let pos = cos(&student[i], &teacher[i]) / tau;
            let mut denom = 0.0;
            for j in 0..f {
                if j != i || include_positive {
                    denom += (cos(&student[i], &teacher[j]) / tau).exp();
                }
            }
            acc += denom.ln() - pos;
        }
        acc / f as f64
    }

    #[test]
    fn contrastive_matches_hand_computed_orthonormal_case() {
        // Two orthonormal frames, student == teacher, tau = 1: similarity
        // matrix is the identity, the exclusive denominator leaves exp(0),
        // so the loss is -1 exactly.
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = frame_flows(&rows, 2);
        let l = contrastive_loss(&v, &v, 2, 1.0, false).unwrap();
        assert!((l.item() + 1.0).abs() < 1e-6, "{}", l.item());
        // Including the positive: log(e^1 + e^0) - 1 per frame.
        let l2 = contrastive_loss(&v, &v, 2, 1.0, true).unwrap();
        let expect = ((1.0f64.exp() + 1.0).ln() - 1.0) as f32;
        assert!((l2.item() - expect).abs() < 1e-6);
    }

    #[test]
    fn contrastive_matches_bruteforce_on_random_flows() {
        let mut rng = Rng::new(21);
        for trial in 0..5 {
            let f = 4;
            let w = 6;
            let student: Vec<Vec<f32>> = (0..f).map(|_| rng.normal_vec(w)).collect();
            let teacher: Vec<Vec<f32>> = (0..f).map(|_| rng.normal_vec(w)).collect();
            let vs = frame_flows(&student, w);
            let vt = frame_flows(&teacher, w);
            for include in [false, true] {
                let got = contrastive_loss(&vs, &vt, f, 0.07, include).unwrap().item();
                let want = contrastive_reference(&student, &teacher, 0.07, include);
                assert!(
                    (got as f64 - want).abs() < 1e-4,
                    "trial {trial} include {include}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn contrastive_prefers_aligned_flows() {
        let mut rng = Rng::new(22);
        let f = 4;
        let w = 8;
        let teacher: Vec<Vec<f32>> = (0..f).map(|_| rng.normal_vec(w)).collect();
        let vt = frame_flows(&teacher, w);
        let aligned = contrastive_loss(&vt, &vt, f, 0.07, false).unwrap().item();
        let mut rotated = teacher.clone();
        rotated.rotate_left(1);
        let vr = frame_flows(&rotated, w);
        let misaligned = contrastive_loss(&vr, &vt, f, 0.07, false).unwrap().item();
        assert!(aligned < misaligned, "{aligned} vs {misaligned}");
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        // Norm-based relative error: single components sit at the f32 noise
        // floor of the finite-difference probe.
        let mut rng = Rng::new(23);
        let f = 3;
        let w = 4;
        let teacher = frame_flows(&(0..f).map(|_| rng.normal_vec(w)).collect::<Vec<_>>(), w);
        let x0 = rng.normal_vec(f * w);
        let err = check_grad_norm(
            |x| contrastive_loss(x, &teacher, f, 0.5, false),
            &[f, w],
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "rel err {err}");
    }

    #[test]
    fn smoothness_parabola_oracle() {
        // Teacher flow i^2 * u has constant second difference 2u; student is
        // zero, so every interior term is ||2u||^2 and the mean equals
        // 4 * ||u||^2.
        let u = vec![0.5f32, -1.0, 2.0];
        let f = 5;
        let teacher: Vec<Vec<f32>> = (0..f)
            .map(|i| u.iter().map(|v| v * (i * i) as f32).collect())
            .collect();
        let vt = frame_flows(&teacher, 3);
        let vs = Tensor::zeros(&[f, 3]);
        let l = smoothness_loss(&vs, &vt, f, false).unwrap().item();
        let u_sq: f32 = u.iter().map(|v| v * v).sum();
        assert!((l - 4.0 * u_sq).abs() < 1e-4, "{l} vs {}", 4.0 * u_sq);
        // Equal flows give exactly zero.
        let z = smoothness_loss(&vt, &vt, f, false).unwrap().item();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn literal_smoothness_is_signed() {
        let f = 4;
        let vt = frame_flows(
            &(0..f).map(|i| vec![(i * i) as f32]).collect::<Vec<_>>(),
            1,
        );
        let vs_hi = frame_flows(
            &(0..f).map(|i| vec![2.0 * (i * i) as f32]).collect::<Vec<_>>(),
            1,
        );
        // Student curvature above the teacher's makes the signed form
        // negative; the squared form cannot.
        let signed = smoothness_loss(&vs_hi, &vt, f, true).unwrap().item();
        assert!(signed < 0.0, "{signed}");
        let squared = smoothness_loss(&vs_hi, &vt, f, false).unwrap().item();
        assert!(squared > 0.0);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = Rng::new(24);
        let f = 5;
        let w = 3;
        let teacher = frame_flows(&(0..f).map(|_| rng.normal_vec(w)).collect::<Vec<_>>(), w);
        let x0 = rng.normal_vec(f * w);
        for literal in [false, true] {
            let err = check_grad_norm(
                |x| smoothness_loss(x, &teacher, f, literal),
                &[f, w],
                &x0,
                1e-3,
            )
            .unwrap();
            assert!(err <= 1e-3, "literal {literal}: rel err {err}");
        }
    }

    #[test]
    fn loss_helpers_reject_bad_shapes() {
        let v = Tensor::zeros(&[6, 2]);
        assert!(contrastive_loss(&v, &v, 4, 0.07, false).is_err());
        assert!(contrastive_loss(&v, &v, 6, 0.0, false).is_err());
        assert!(smoothness_loss(&v, &v, 2, false).is_err());
        let w = Tensor::zeros(&[4, 2]);
        assert!(smoothness_loss(&v, &w, 2, false).is_err());
    }

    // ---- end-to-end training steps on a tiny config ----

    fn tiny_setup(chunks: usize, seed: u64) -> (ModelConfig, ClipLatents, Rng) {
        let cfg = ModelConfig::tiny(2, 2, chunks);
        let mut rng = Rng::new(seed);
        let z0 = Tensor::randn(
            &[
                cfg.video.latent_h(),
                cfg.video.latent_w(),
                cfg.f_total(),
                cfg.video.latent_channels,
            ],
            &mut rng,
        );
        let reference = z0.slice(2, 0, 1).unwrap();
        let audio = Tensor::randn(
            &[cfg.f_total(), cfg.speech.window, cfg.speech.latent_dim],
            &mut rng,
        );
        (cfg, ClipLatents { z0, reference, audio }, rng)
    }

    #[test]
    fn student_total_decomposes_exactly() {
        let (cfg, clip, mut rng) = tiny_setup(2, 30);
        let teacher = DitParams::init(cfg, &mut rng).unwrap();
        let student = DitParams::init(cfg, &mut rng).unwrap();
        let tc = TrainConfig { lambda_con: 0.7, lambda_smo: 1.3, ..Default::default() };
        let mut rngs = StepRngs::new(5);
        let l = student_step(&student, Some(&teacher), &clip, &tc, &mut rngs).unwrap();
        let recomposed = l.flow.item()
            + 0.7 * l.contrastive.as_ref().unwrap().item()
            + 1.3 * l.smoothness.as_ref().unwrap().item();
        assert!(
            (l.total.item() - recomposed).abs() <= 1e-6 * recomposed.abs().max(1.0),
            "{} vs {recomposed}",
            l.total.item()
        );
    }

    #[test]
    fn ablations_drop_their_terms() {
        let (mut cfg, clip, mut rng) = tiny_setup(2, 31);
        let teacher = DitParams::init(cfg, &mut rng).unwrap();
        cfg.ablation.no_smooth = true;
        let student = DitParams::init(cfg, &mut rng).unwrap();
        let tc = TrainConfig::default();
        let mut rngs = StepRngs::new(6);
        let l = student_step(&student, Some(&teacher), &clip, &tc, &mut rngs).unwrap();
        assert!(l.smoothness.is_none());
        assert!(l.contrastive.is_some());

        let mut cfg2 = cfg;
        cfg2.ablation = Default::default();
        cfg2.ablation.no_asd = true;
        let student2 = DitParams::init(cfg2, &mut rng).unwrap();
        let mut rngs2 = StepRngs::new(7);
        let l2 = student_step(&student2, None, &clip, &tc, &mut rngs2).unwrap();
        assert!(l2.contrastive.is_none() && l2.smoothness.is_none());
        assert_eq!(l2.total.item(), l2.flow.item());
    }

    #[test]
    fn teacher_training_reduces_loss() {
        let (cfg, clip, mut rng) = tiny_setup(2, 32);
        let mut p = DitParams::init(cfg, &mut rng).unwrap();
        let tc = TrainConfig { lr: 1e-3, steps: 60, ..Default::default() };
        let rows = train_teacher(&mut p, &[clip], &tc).unwrap();
        let head: f32 = rows[..10].iter().map(|r| r.flow).sum::<f32>() / 10.0;
        let tail: f32 = rows[rows.len() - 10..].iter().map(|r| r.flow).sum::<f32>() / 10.0;
        assert!(tail < head, "no learning: {head} -> {tail}");
    }

    #[test]
    fn student_training_runs_and_teacher_stays_frozen() {
        let (cfg, clip, mut rng) = tiny_setup(2, 33);
        let teacher = DitParams::init(cfg, &mut rng).unwrap();
        let before = params_hash(&teacher);
        let mut student = DitParams::init(cfg, &mut rng).unwrap();
        let tc = TrainConfig { lr: 1e-3, steps: 10, ..Default::default() };
        let rows = train_student(&mut student, Some(&teacher), &[clip], &tc).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.total.is_finite()));
        assert_eq!(params_hash(&teacher), before);
    }

    #[test]
    fn full_student_loss_gradient_matches_finite_differences() {
        use crate::gradcheck::check_grad_norm;
        use std::cell::RefCell;

        let (cfg, clip, mut rng) = tiny_setup(2, 34);
        let teacher = DitParams::init(cfg, &mut rng).unwrap();
        let student = DitParams::init(cfg, &mut rng).unwrap();
        let tc = TrainConfig::default();
        let (dims, x0) = (
            student.blocks[0].wv.dims().to_vec(),
            student.blocks[0].wv.data().to_vec(),
        );
        let cell = RefCell::new(student);
        let loss_fn = |w: &Tensor| {
            let mut s = cell.borrow_mut();
            s.blocks[0].wv = w.clone();
            // Same sampling stream every call so the loss is a deterministic
            // function of the parameter.
            let mut rngs = StepRngs::new(9);
            let l = student_step(&s, Some(&teacher), &clip, &tc, &mut rngs)?;
            Ok(l.total)
        };
        let err = check_grad_norm(loss_fn, &dims, &x0, 1e-2).unwrap();
        assert!(err <= 1e-2, "rel err {err}");
    }

    #[test]
    fn loss_curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let rows = vec![LossRow {
            step: 0,
            flow: 1.0,
            contrastive: 0.5,
            smoothness: 0.25,
            total: 1.75,
            grad_norm: 3.0,
        }];
        write_loss_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,flow,contrastive,smoothness,total,grad_norm"));
        assert!(text.contains("0,1,0.5,0.25,1.75,3"));
    }

    #[test]
    fn finite_diff_helper_sanity() {
        // Keep the oracle itself honest on a known quadratic.
        let g = finite_diff(|x| x[0] * x[0] + 2.0 * x[1], &[3.0, 1.0], 1e-3);
        assert!(max_rel_err(&[6.0, 2.0], &g) < 1e-3);
    }
}
