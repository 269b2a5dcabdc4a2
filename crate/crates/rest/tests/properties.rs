//! Randomized property tests for the layout, schedule, and format invariants.

use proptest::prelude::*;

use rest::chunk::{segment, stitch, ChunkLayout, TimestepVector};
use rest::rng::Rng;
use rest::tensor::io::{read_tensor, write_tensor};
use rest::tensor::Tensor;

fn layout_strategy() -> impl Strategy<Value = (usize, usize)> {
    // chunk_len f >= 2, k >= 1 chunks; f_total = 1 + k * (f - 1).
    (2usize..8, 1usize..8).prop_map(|(f, k)| (1 + k * (f - 1), f))
}

proptest! {
    #[test]
    fn segment_stitch_round_trips((f_total, f) in layout_strategy(), seed in 0u64..1000) {
        let layout = ChunkLayout::new(f_total, f).unwrap();
        let mut rng = Rng::new(seed);
        let z = Tensor::randn(&[2, 3, f_total, 2], &mut rng);
        let chunks = segment(&z, &layout).unwrap();
        prop_assert_eq!(chunks.len(), layout.k);
        for (j, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.dims()[2], f);
            // Each chunk is an exact copy of its frame window.
            let (s, e) = layout.frame_range(j);
            let window = z.slice(2, s, e - s + 1).unwrap();
            prop_assert_eq!(c.data(), window.data());
        }
        let back = stitch(&chunks, &layout).unwrap();
        prop_assert_eq!(back.data(), z.data());
    }

    #[test]
    fn timestep_vector_structure((f_total, f) in layout_strategy(), seed in 0u64..1000) {
        let layout = ChunkLayout::new(f_total, f).unwrap();
        let mut rng = Rng::new(seed);
        let per_chunk: Vec<f32> = (0..layout.k).map(|_| rng.uniform()).collect();
        let tv = TimestepVector::asynchronous(&layout, &per_chunk).unwrap();
        // Leading reference slot is pinned clean.
        prop_assert_eq!(tv.values[0], 0.0);
        prop_assert_eq!(tv.values.len(), 1 + f_total);
        // Chunk-constant, with the shared boundary frame carrying the earlier
        // chunk's level.
        for j in 0..layout.k {
            let (s, e) = layout.frame_range(j);
            let own_start = if j == 0 { s } else { s + 1 };
            for i in own_start..=e {
                prop_assert_eq!(tv.values[1 + i], per_chunk[j]);
            }
        }
    }

    #[test]
    fn tensor_format_round_trips(
        dims in proptest::collection::vec(1usize..5, 1..4),
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let t = Tensor::randn(&dims, &mut rng);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[rows, cols], &mut rng).scale(3.0);
        let s = x.softmax(1).unwrap();
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
