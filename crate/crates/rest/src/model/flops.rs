//! Analytic floating-point operation counts for the transformer forward
//! pass. A matrix product [m, k] x [k, n] counts as 2*m*k*n ops; smaller
//! terms (norms, softmax, modulation) are omitted uniformly, so ratios and
//! constancy claims are unaffected.

use crate::config::ModelConfig;

/// One transformer block given query rows `tq`, key rows `tk`, frame rows
/// `tf` (cross-attention queries), and latent frame count `f_c`.
fn block_flops(cfg: &ModelConfig, tq: u64, tk: u64, tf: u64, f_c: u64) -> u64 {
    let d = cfg.model_dim as u64;
    let da = cfg.speech.latent_dim as u64;
    let win = cfg.speech.window as u64;
    let mlp = cfg.mlp_hidden as u64;
    let qkv = 3 * 2 * tq * d * d;
    let attn = 2 * 2 * tq * tk * d;
    let out = 2 * tq * d * d;
    let cross = 2 * tf * d * d            // query projection
        + 2 * 2 * f_c * win * da * d      // key/value projections
        + 2 * 2 * tf * win * d            // scores and value mix
        + 2 * tf * d * d;                 // output projection
    let ff = 2 * 2 * tq * d * mlp;
    qkv + attn + out + cross + ff
}

fn embed_flops(cfg: &ModelConfig, t_rows: u64) -> u64 {
    let d = cfg.model_dim as u64;
    let dv = cfg.video.latent_channels as u64;
    2 * t_rows * dv * d + 2 * t_rows * d * dv
}

/// Forward cost of one streaming chunk at one denoising step. Chunk index is
/// 1-based; the first chunk carries the reference tokens, later chunks read
/// the sink and the previous chunk from the cache instead.
pub fn student_chunk_flops(cfg: &ModelConfig, chunk_index: usize) -> u64 {
    let s = cfg.tokens_per_frame() as u64;
    let f_c = cfg.chunk_len as u64;
    let abl = cfg.ablation;
    let has_ref = chunk_index == 1 && !abl.no_id_sink;
    let tf = f_c * s;
    let tq = tf + if has_ref { s } else { 0 };
    let mut tk = tq;
    if chunk_index > 1 {
        if !abl.no_id_sink {
            tk += s;
        }
        if !abl.no_context_cache {
            tk += f_c * s;
        }
    }
    block_flops(cfg, tq, tk, tf, f_c) * cfg.blocks as u64 + embed_flops(cfg, tq)
}

/// Forward cost of the non-streaming pass over the whole sequence at one
/// denoising step: full attention over [reference || all frames].
pub fn teacher_flops(cfg: &ModelConfig) -> u64 {
    let s = cfg.tokens_per_frame() as u64;
    let f = cfg.f_total() as u64;
    let tq = (1 + f) * s;
    block_flops(cfg, tq, tq, f * s, f) * cfg.blocks as u64 + embed_flops(cfg, tq)
}

/// Total streaming cost for a whole stream of `k` chunks at one step.
pub fn student_stream_flops(cfg: &ModelConfig, k: usize) -> u64 {
    (1..=k).map(|j| student_chunk_flops(cfg, j)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_chunk_cost_is_constant_after_the_first() {
        let cfg = ModelConfig::desk(6);
        let c2 = student_chunk_flops(&cfg, 2);
        for j in 3..=6 {
            assert_eq!(student_chunk_flops(&cfg, j), c2);
        }
    }

    #[test]
    fn streaming_cost_is_linear_in_chunks() {
        let increments: Vec<u64> = (2..=5)
            .map(|k| {
                let cfg = ModelConfig::desk(k);
                student_stream_flops(&cfg, k) - student_stream_flops(&cfg, k - 1)
            })
            .collect();
        for w in increments.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn full_attention_cost_is_superlinear() {
        let per_chunk: Vec<f64> = [2usize, 4, 8]
            .iter()
            .map(|&k| teacher_flops(&ModelConfig::desk(k)) as f64 / k as f64)
            .collect();
        assert!(per_chunk[1] > per_chunk[0] * 1.05);
        assert!(per_chunk[2] > per_chunk[1] * 1.05);
    }

    #[test]
    fn cache_ablations_shrink_key_rows() {
        let cfg = ModelConfig::desk(3);
        let mut no_ctx = cfg;
        no_ctx.ablation.no_context_cache = true;
        let mut no_sink = cfg;
        no_sink.ablation.no_id_sink = true;
        assert!(student_chunk_flops(&no_ctx, 2) < student_chunk_flops(&cfg, 2));
        assert!(student_chunk_flops(&no_sink, 2) < student_chunk_flops(&cfg, 2));
    }
}
