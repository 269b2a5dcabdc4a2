//! Command-line surface: corpus generation, codec and model training,
//! streaming generation, benchmarks, the oracle suite, and paired ablations.
//!
//! Every command writes its artifacts under an output directory together
//! with the fully resolved configuration, so any run can be reproduced from
//! the echoed JSON plus the seed. Exit codes: 0 success, 1 validation or
//! verification failure, 2 numerical abort, 3 I/O or file-format error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::codec::{
    save_video_dump, train_speech_codec, train_video_codec, SpeechCodec, VideoCodec,
};
use crate::config::{load_json, save_json, Ablation, ModelConfig, TrainConfig};
use crate::corpus::{load_corpus, make_clip, make_synthetic_corpus, save_corpus, MotionParams};
use crate::error::{RestError, Result};
use crate::infer::{bench_scaling, evaluate, generate, write_bench_csv, CacheKind, MetricsReport};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::DitParams;
use crate::rng::Rng;
use crate::tensor::io::save_tensor;
use crate::train::{encode_clip, train_student, train_teacher, write_loss_csv, ClipLatents};

#[derive(Debug, Parser)]
#[command(
    name = "rest",
    about = "Streaming audio-to-video latent diffusion with ID-context KV caching",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Output directory for artifacts and the resolved config echo.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Root seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Chunks in the stream layout.
    #[arg(long, default_value_t = 2)]
    pub chunks: usize,
    /// Optional model config JSON; overrides the desk-scale default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ablation switches, comma separated (no_id_sink, no_context_cache,
    /// no_smooth, no_contrastive, no_asd).
    #[arg(long, value_delimiter = ',', default_value = "")]
    pub flags: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a corpus of talking-blob clips with aligned audio.
    GenCorpus {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of clips.
        #[arg(long, default_value_t = 4)]
        clips: usize,
    },
    /// Train the video and speech codecs on a corpus.
    TrainCodec {
        #[command(flatten)]
        common: CommonArgs,
        /// Corpus directory from gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f32,
    },
    /// Train the non-streaming teacher with chunk-wise asynchronous noising.
    TrainTeacher {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Codec checkpoint from train-codec.
        #[arg(long)]
        codecs: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
    },
    /// Distill the streaming student from a frozen teacher.
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codecs: PathBuf,
        /// Teacher checkpoint from train-teacher.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
        /// Contrastive loss weight.
        #[arg(long, default_value_t = 1.0)]
        lambda_con: f32,
        /// Smoothness loss weight.
        #[arg(long, default_value_t = 1.0)]
        lambda_smo: f32,
    },
    /// Stream a clip: latents, raw-frame video dump, and a metrics report.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint; a seeded random init is used when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Codec checkpoint; a seeded random init is used when absent.
        #[arg(long)]
        codecs: Option<PathBuf>,
        /// Seed of the synthetic clip that supplies audio and reference.
        #[arg(long, default_value_t = 0)]
        clip_seed: u64,
        /// Guidance scale override.
        #[arg(long)]
        alpha: Option<f32>,
    },
    /// Latency and cache-memory scaling, ring vs full history.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Chunk counts to sweep, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
        chunk_counts: Vec<usize>,
    },
    /// Run the oracle suite and print a pass/fail table.
    Verify,
    /// Paired runs: full configuration vs the given ablation, same seed.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        codecs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        clip_seed: u64,
    },
}

/// Parallelism cap from the environment; unset means one thread per check.
fn rest_threads() -> Result<usize> {
    match std::env::var("REST_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            RestError::Usage(format!("REST_THREADS must be a positive integer, got '{v}'"))
        }),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn resolve_model_config(common: &CommonArgs) -> Result<ModelConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_json::<ModelConfig>(path)?,
        None => ModelConfig::desk(common.chunks),
    };
    cfg.ablation = Ablation::from_flags(
        &common.flags.iter().filter(|f| !f.is_empty()).cloned().collect::<Vec<_>>(),
    )?;
    cfg.validate()?;
    cfg.layout()?;
    Ok(cfg)
}

fn echo_config(out: &Path, command: &str, value: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out)?;
    save_json(&out.join("resolved_config.json"), &json!({ "command": command, "resolved": value }))
}

fn load_codecs(
    path: &Path,
    cfg: &ModelConfig,
) -> Result<(VideoCodec, SpeechCodec)> {
    let entries = load_checkpoint(path)?;
    Ok((
        VideoCodec::from_named(cfg.video, &entries)?,
        SpeechCodec::from_named(cfg.speech, &entries)?,
    ))
}

fn init_codecs(cfg: &ModelConfig, seed: u64) -> Result<(VideoCodec, SpeechCodec)> {
    let mut rng = Rng::new(seed ^ 0xc0dec);
    Ok((
        VideoCodec::init(cfg.video, &mut rng)?,
        SpeechCodec::init(cfg.speech, &mut rng)?,
    ))
}

fn load_training_clips(
    corpus: &Path,
    codecs: &Path,
    cfg: &ModelConfig,
) -> Result<Vec<ClipLatents>> {
    let (manifest, clips) = load_corpus(corpus)?;
    if manifest.video != cfg.video || manifest.speech != cfg.speech {
        return Err(RestError::Config(
            "corpus shapes do not match the model config; regenerate with matching --chunks"
                .into(),
        ));
    }
    let (vc, sc) = load_codecs(codecs, cfg)?;
    clips.iter().map(|c| encode_clip(c, &vc, &sc)).collect()
}

fn load_model(path: &Path, cfg: ModelConfig) -> Result<DitParams> {
    let entries = load_checkpoint(path)?;
    DitParams::from_named(cfg, &entries)
}

/// One streamed clip end to end: synthesize the driving clip, stream, decode,
/// score. Shared by `generate` and `ablate`.
fn run_generate(
    cfg: &ModelConfig,
    ckpt: Option<&Path>,
    codecs: Option<&Path>,
    seed: u64,
    clip_seed: u64,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let motion = MotionParams::default();
    let clip = make_clip(
        clip_seed,
        format!("clip-{clip_seed}"),
        [0.8, 0.3, 0.5],
        &cfg.video,
        &cfg.speech,
        &motion,
    )?;
    let (vc, sc) = match codecs {
        Some(p) => load_codecs(p, cfg)?,
        None => init_codecs(cfg, seed)?,
    };
    let p = match ckpt {
        Some(path) => load_model(path, *cfg)?,
        None => DitParams::init(*cfg, &mut Rng::new(seed))?,
    };
    let latents = encode_clip(&clip, &vc, &sc)?;
    let reference = if cfg.ablation.no_id_sink { None } else { Some(latents.reference.clone()) };
    let stream = generate(&p, reference, &latents.audio, seed, CacheKind::Ring)?;
    let decoded = vc.decode(&stream.latents)?.detach();
    let report = evaluate(
        &stream,
        &decoded,
        &clip.reference_frame()?,
        &clip.energy,
        cfg,
        motion.background,
    )?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        save_tensor(&dir.join("latents.tnsr"), &stream.latents)?;
        save_video_dump(&dir.join("video.rvf"), &decoded)?;
        save_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(report)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, clips } => {
            let cfg = resolve_model_config(&common)?;
            let motion = MotionParams::default();
            let made =
                make_synthetic_corpus(common.seed, clips, &cfg.video, &cfg.speech, &motion)?;
            save_corpus(&common.out, common.seed, &cfg.video, &cfg.speech, &motion, &made)?;
            echo_config(
                &common.out,
                "gen-corpus",
                json!({ "model": cfg, "seed": common.seed, "clips": clips }),
            )?;
            println!("wrote {} clips to {}", made.len(), common.out.display());
            Ok(())
        }
        Command::TrainCodec { common, corpus, epochs, lr } => {
            let cfg = resolve_model_config(&common)?;
            let (manifest, clips) = load_corpus(&corpus)?;
            if manifest.video != cfg.video || manifest.speech != cfg.speech {
                return Err(RestError::Config(
                    "corpus shapes do not match the model config".into(),
                ));
            }
            let (mut vc, mut sc) = init_codecs(&cfg, common.seed)?;
            let videos: Vec<_> = clips.iter().map(|c| c.video.clone()).collect();
            let feats: Vec<_> = clips.iter().map(|c| c.features.clone()).collect();
            let v_curve = train_video_codec(&mut vc, &videos, epochs, lr)?;
            let s_curve = train_speech_codec(&mut sc, &feats, epochs, lr)?;
            std::fs::create_dir_all(&common.out)?;
            let mut entries: Vec<(String, &crate::tensor::Tensor)> = vc.named_params();
            entries.extend(sc.named_params());
            save_checkpoint(&common.out.join("codecs.ckpt"), &entries)?;
            write_curve_csv(&common.out.join("codec_loss.csv"), &v_curve, &s_curve)?;
            echo_config(
                &common.out,
                "train-codec",
                json!({ "model": cfg, "seed": common.seed, "epochs": epochs, "lr": lr }),
            )?;
            println!(
                "codec losses: video {:.4} -> {:.4}, speech {:.4} -> {:.4}",
                v_curve[0],
                v_curve.last().unwrap(),
                s_curve[0],
                s_curve.last().unwrap()
            );
            Ok(())
        }
        Command::TrainTeacher { common, corpus, codecs, steps, lr } => {
            let cfg = resolve_model_config(&common)?;
            let clips = load_training_clips(&corpus, &codecs, &cfg)?;
            let tc = TrainConfig { lr, steps, seed: common.seed, ..TrainConfig::default() };
            let mut p = DitParams::init(cfg, &mut Rng::new(common.seed))?;
            let rows = train_teacher(&mut p, &clips, &tc)?;
            std::fs::create_dir_all(&common.out)?;
            save_checkpoint(&common.out.join("teacher.ckpt"), &p.named_params())?;
            write_loss_csv(&common.out.join("teacher_loss.csv"), &rows)?;
            echo_config(
                &common.out,
                "train-teacher",
                json!({ "model": cfg, "train": tc }),
            )?;
            println!(
                "teacher flow loss {:.4} -> {:.4} over {} steps",
                rows[0].flow,
                rows.last().unwrap().flow,
                rows.len()
            );
            Ok(())
        }
        Command::Distill { common, corpus, codecs, teacher, steps, lr, lambda_con, lambda_smo } => {
            let cfg = resolve_model_config(&common)?;
            let clips = load_training_clips(&corpus, &codecs, &cfg)?;
            // The teacher keeps full attention: same weights, no ablations.
            let teacher_cfg = ModelConfig { ablation: Ablation::default(), ..cfg };
            let t = load_model(&teacher, teacher_cfg)?;
            let tc = TrainConfig {
                lr,
                steps,
                seed: common.seed,
                lambda_con,
                lambda_smo,
                ..TrainConfig::default()
            };
            let mut student = DitParams::init(cfg, &mut Rng::new(common.seed ^ 0x57))?;
            let teacher_ref = if cfg.ablation.no_asd { None } else { Some(&t) };
            let rows = train_student(&mut student, teacher_ref, &clips, &tc)?;
            std::fs::create_dir_all(&common.out)?;
            save_checkpoint(&common.out.join("student.ckpt"), &student.named_params())?;
            write_loss_csv(&common.out.join("student_loss.csv"), &rows)?;
            echo_config(&common.out, "distill", json!({ "model": cfg, "train": tc }))?;
            println!(
                "student total loss {:.4} -> {:.4} over {} steps",
                rows[0].total,
                rows.last().unwrap().total,
                rows.len()
            );
            Ok(())
        }
        Command::Generate { common, ckpt, codecs, clip_seed, alpha } => {
            let mut cfg = resolve_model_config(&common)?;
            if let Some(a) = alpha {
                cfg.cfg_alpha = a;
            }
            let report = run_generate(
                &cfg,
                ckpt.as_deref(),
                codecs.as_deref(),
                common.seed,
                clip_seed,
                Some(&common.out),
            )?;
            echo_config(
                &common.out,
                "generate",
                json!({ "model": cfg, "seed": common.seed, "clip_seed": clip_seed }),
            )?;
            println!(
                "boundary {:.4}, drift {:.4}, sync {:.4}; artifacts in {}",
                report.boundary_discontinuity,
                report.identity_drift,
                report.sync_proxy,
                common.out.display()
            );
            Ok(())
        }
        Command::Bench { common, chunk_counts } => {
            if chunk_counts.is_empty() {
                return Err(RestError::Usage("bench needs at least one chunk count".into()));
            }
            let rows = bench_scaling(&chunk_counts, common.seed)?;
            std::fs::create_dir_all(&common.out)?;
            write_bench_csv(&common.out.join("bench.csv"), &rows)?;
            echo_config(
                &common.out,
                "bench",
                json!({ "chunk_counts": chunk_counts, "seed": common.seed }),
            )?;
            for r in &rows {
                println!(
                    "k={}: ring {:.2} ms / {} B, full {:.2} ms / {} B",
                    r.chunks,
                    r.ring_last_chunk_ms,
                    r.ring_cache_bytes,
                    r.full_last_chunk_ms,
                    r.full_cache_bytes
                );
            }
            Ok(())
        }
        Command::Verify => {
            let threads = rest_threads()?;
            let results = crate::verify::run_all_parallel(threads);
            if crate::verify::print_table(&results) {
                Ok(())
            } else {
                Err(RestError::Verify("oracle suite reported failures".into()))
            }
        }
        Command::Ablate { common, ckpt, codecs, clip_seed } => {
            let flags: Vec<String> =
                common.flags.iter().filter(|f| !f.is_empty()).cloned().collect();
            if flags.is_empty() {
                return Err(RestError::Usage("ablate needs --flags".into()));
            }
            let ablated_cfg = resolve_model_config(&common)?;
            let baseline_cfg = ModelConfig { ablation: Ablation::default(), ..ablated_cfg };
            let baseline = run_generate(
                &baseline_cfg,
                ckpt.as_deref(),
                codecs.as_deref(),
                common.seed,
                clip_seed,
                None,
            )?;
            let ablated = run_generate(
                &ablated_cfg,
                ckpt.as_deref(),
                codecs.as_deref(),
                common.seed,
                clip_seed,
                None,
            )?;
            std::fs::create_dir_all(&common.out)?;
            save_json(
                &common.out.join("ablate.json"),
                &json!({ "flags": flags, "baseline": baseline, "ablated": ablated }),
            )?;
            echo_config(
                &common.out,
                "ablate",
                json!({ "model": ablated_cfg, "seed": common.seed, "clip_seed": clip_seed }),
            )?;
            println!(
                "baseline drift {:.4} vs ablated {:.4}; report in {}",
                baseline.identity_drift,
                ablated.identity_drift,
                common.out.display()
            );
            Ok(())
        }
    }
}

fn write_curve_csv(path: &Path, video: &[f32], speech: &[f32]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,video_loss,speech_loss")?;
    for (i, (v, s)) in video.iter().zip(speech).enumerate() {
        writeln!(f, "{i},{v},{s}")?;
    }
    f.flush()?;
    Ok(())
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_subcommand_is_a_usage_error() {
        assert_eq!(run(["rest", "frobnicate"]), 1);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run(["rest", "--help"]), 0);
    }

    #[test]
    fn ablate_requires_flags() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        assert_eq!(run(["rest", "ablate", "--out", out.to_str().unwrap()]), 1);
    }

    #[test]
    fn unknown_ablation_flag_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        assert_eq!(
            run(["rest", "generate", "--out", out.to_str().unwrap(), "--flags", "bogus"]),
            1
        );
    }
}
