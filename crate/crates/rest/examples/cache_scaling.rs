//! Cache and compute scaling: constant-size ring cache vs unbounded history.
//!
//! The ring discipline keeps only the identity sink and the previous chunk's
//! keys/values, so per-chunk compute and memory are flat in stream length.
//! The full-history baseline attends over everything generated so far and
//! grows without bound; the non-streaming sampler's attention cost grows
//! superlinearly with total frames.
//!
//! Run with: cargo run --release --example cache_scaling

use rest::config::ModelConfig;
use rest::infer::{bench_scaling, write_bench_csv};
use rest::model::flops::{student_chunk_flops, student_stream_flops, teacher_flops};

fn main() -> rest::error::Result<()> {
    let rows = bench_scaling(&[1, 2, 4, 8], 42)?;
    println!("chunks  ring_ms  ring_bytes  full_ms  full_bytes");
    for r in &rows {
        println!(
            "{:6}  {:7.1}  {:10}  {:7.1}  {:10}",
            r.chunks, r.ring_last_chunk_ms, r.ring_cache_bytes, r.full_last_chunk_ms,
            r.full_cache_bytes
        );
    }
    let csv = std::env::temp_dir().join("rest_example_bench.csv");
    write_bench_csv(&csv, &rows)?;
    println!("wrote {}", csv.display());

    // Analytic FLOP counters for the same story, exact by construction.
    println!("\nanalytic FLOPs (desk config):");
    for k in [1usize, 2, 4, 8] {
        let cfg = ModelConfig::desk(k);
        println!(
            "k={k}: per-chunk (i>=1) {:>12}, streaming total {:>13}, non-streaming {:>13}",
            student_chunk_flops(&cfg, 1),
            student_stream_flops(&cfg, k),
            teacher_flops(&cfg)
        );
    }
    println!("\nper-chunk streaming cost is flat; non-streaming cost grows superlinearly.");
    Ok(())
}
