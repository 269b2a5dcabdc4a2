//! Chunk segmentation of latent sequences and chunk-constant timestep vectors.
//!
//! A sequence of `f_total` latent frames splits into k chunks of `chunk_len`
//! frames each, where consecutive chunks share exactly one boundary frame:
//! chunk j (1-based) covers frames 1+(j-1)(f-1) .. 1+j(f-1). On stitch the
//! earlier chunk owns the shared frame.

use crate::error::{RestError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    /// Latent frames excluding the reference slot.
    pub f_total: usize,
    /// Frames per chunk, including the shared boundary frame.
    pub chunk_len: usize,
    /// Chunk count.
    pub k: usize,
}

impl ChunkLayout {
    pub fn new(f_total: usize, chunk_len: usize) -> Result<Self> {
        if chunk_len < 2 {
            return Err(RestError::Layout(format!(
                "chunk_len must be >= 2, got {chunk_len}"
            )));
        }
        if f_total < chunk_len || (f_total - 1) % (chunk_len - 1) != 0 {
            let k_lo = (f_total.saturating_sub(1)) / (chunk_len - 1);
            let lo = 1 + k_lo.max(1) * (chunk_len - 1);
            let hi = 1 + (k_lo + 1) * (chunk_len - 1);
            return Err(RestError::Layout(format!(
                "f_total {f_total} is not 1 + k*({}) for integer k; nearest valid lengths are {lo} and {hi}",
                chunk_len - 1
            )));
        }
        Ok(ChunkLayout {
            f_total,
            chunk_len,
            k: (f_total - 1) / (chunk_len - 1),
        })
    }

    /// 0-based inclusive frame range of chunk `j` (0-based).
    pub fn frame_range(&self, j: usize) -> (usize, usize) {
        let start = j * (self.chunk_len - 1);
        (start, start + self.chunk_len - 1)
    }

    /// Frames chunk j contributes on stitch: the shared leading boundary frame
    /// belongs to the earlier chunk, so chunks after the first drop it.
    pub fn owned_range(&self, j: usize) -> (usize, usize) {
        let (start, end) = self.frame_range(j);
        if j == 0 {
            (start, end)
        } else {
            (start + 1, end)
        }
    }

    /// Frame indices (0-based) shared between consecutive chunks.
    pub fn boundary_frames(&self) -> Vec<usize> {
        (1..self.k).map(|j| j * (self.chunk_len - 1)).collect()
    }
}

/// Per-latent-frame noise levels with a leading clean reference slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepVector {
    /// Length 1 + f_total; values[0] == 0; chunk-constant thereafter.
    pub values: Vec<f32>,
}

impl TimestepVector {
    /// Build the chunk-constant vector [0 || t_1.. || t_2.. || ...]. The
    /// shared boundary frame carries the earlier chunk's value.
    pub fn asynchronous(layout: &ChunkLayout, per_chunk: &[f32]) -> Result<Self> {
        if per_chunk.len() != layout.k {
            return Err(RestError::Layout(format!(
                "expected {} per-chunk timesteps, got {}",
                layout.k,
                per_chunk.len()
            )));
        }
        for &t in per_chunk {
            if !(0.0..=1.0).contains(&t) {
                return Err(RestError::Domain(format!("timestep {t} outside [0, 1]")));
            }
        }
        let mut values = vec![0.0f32; 1 + layout.f_total];
        for j in 0..layout.k {
            let (start, end) = layout.owned_range(j);
            for v in values[1 + start..=end + 1].iter_mut() {
                *v = per_chunk[j];
            }
        }
        Ok(TimestepVector { values })
    }

    /// Same noise level everywhere: the synchronous special case.
    pub fn synchronous(f_total: usize, t: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(RestError::Domain(format!("timestep {t} outside [0, 1]")));
        }
        let mut values = vec![t; 1 + f_total];
        values[0] = 0.0;
        Ok(TimestepVector { values })
    }

    /// Noise level of frame `i` (0-based, reference slot excluded).
    pub fn frame(&self, i: usize) -> f32 {
        self.values[i + 1]
    }
}

/// One chunk view: the latent frames of the chunk.
/// Frame axis is axis 2 of the [h, w, f, d] latent tensor.
pub fn segment(z: &Tensor, layout: &ChunkLayout) -> Result<Vec<Tensor>> {
    let d = z.dims();
    if d.len() != 4 || d[2] != layout.f_total {
        return Err(RestError::Layout(format!(
            "latents {:?} do not carry {} frames on axis 2",
            d, layout.f_total
        )));
    }
    (0..layout.k)
        .map(|j| {
            let (start, end) = layout.frame_range(j);
            z.slice(2, start, end - start + 1)
        })
        .collect()
}

/// Inverse of `segment`; the earlier chunk owns each shared boundary frame.
pub fn stitch(chunks: &[Tensor], layout: &ChunkLayout) -> Result<Tensor> {
    if chunks.len() != layout.k {
        return Err(RestError::Layout(format!(
            "expected {} chunks, got {}",
            layout.k,
            chunks.len()
        )));
    }
    let mut parts = Vec::with_capacity(layout.k);
    for (j, c) in chunks.iter().enumerate() {
        if c.dims().len() != 4 || c.dims()[2] != layout.chunk_len {
            return Err(RestError::Layout(format!(
                "chunk {j} has shape {:?}, expected {} frames on axis 2",
                c.dims(),
                layout.chunk_len
            )));
        }
        if c.dims()[0] != chunks[0].dims()[0]
            || c.dims()[1] != chunks[0].dims()[1]
            || c.dims()[3] != chunks[0].dims()[3]
        {
            return Err(RestError::Layout(format!(
                "chunk {j} shape {:?} disagrees with chunk 0 {:?}",
                c.dims(),
                chunks[0].dims()
            )));
        }
        if j == 0 {
            parts.push(c.clone());
        } else {
            parts.push(c.slice(2, 1, layout.chunk_len - 1)?);
        }
    }
    crate::tensor::concat(&parts.iter().cloned().collect::<Vec<_>>(), 2)
}

/// RMS disagreement at each shared boundary frame between the earlier chunk's
/// copy (kept) and the later chunk's copy (dropped).
pub fn boundary_disagreement(chunks: &[Tensor], layout: &ChunkLayout) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(layout.k.saturating_sub(1));
    for j in 1..layout.k {
        let kept = chunks[j - 1].slice(2, layout.chunk_len - 1, 1)?;
        let dropped = chunks[j].slice(2, 0, 1)?;
        out.push(kept.mse(&dropped)?.item().sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn index_formula_two_chunks() {
        // f_total=9, chunk_len=5: chunks cover frames 1..5 and 5..9 (1-based).
        let l = ChunkLayout::new(9, 5).unwrap();
        assert_eq!(l.k, 2);
        assert_eq!(l.frame_range(0), (0, 4));
        assert_eq!(l.frame_range(1), (4, 8));
        assert_eq!(l.boundary_frames(), vec![4]);
    }

    #[test]
    fn degenerate_single_chunk() {
        let l = ChunkLayout::new(4, 4).unwrap();
        assert_eq!(l.k, 1);
        assert_eq!(l.frame_range(0), (0, 3));
        assert!(l.boundary_frames().is_empty());
    }

    #[test]
    fn incompatible_length_reports_nearest() {
        let err = ChunkLayout::new(10, 5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("9") && msg.contains("13"), "{msg}");
    }

    #[test]
    fn segment_stitch_round_trip() {
        let mut rng = Rng::new(1);
        let l = ChunkLayout::new(9, 5).unwrap();
        let z = Tensor::randn(&[2, 2, 9, 3], &mut rng);
        let chunks = segment(&z, &l).unwrap();
        let back = stitch(&chunks, &l).unwrap();
        assert_eq!(back.data(), z.data());
    }

    #[test]
    fn single_chunk_stitch_is_identity() {
        let mut rng = Rng::new(2);
        let l = ChunkLayout::new(4, 4).unwrap();
        let z = Tensor::randn(&[2, 2, 4, 3], &mut rng);
        let back = stitch(&segment(&z, &l).unwrap(), &l).unwrap();
        assert_eq!(back.data(), z.data());
    }

    #[test]
    fn earlier_chunk_wins_at_boundary() {
        let l = ChunkLayout::new(3, 2).unwrap();
        let a = Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 2, 1], vec![99.0, 3.0]).unwrap();
        let z = stitch(&[a.clone(), b.clone()], &l).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 3.0]);
        let gap = boundary_disagreement(&[a, b], &l).unwrap();
        assert!((gap[0] - 97.0).abs() < 1e-4);
    }

    #[test]
    fn async_timestep_structure() {
        // k=2, chunk_len=3, f_total=5. Chunk 1 owns frames 1..3 (incl. the
        // shared boundary), chunk 2 owns frames 4..5.
        let l = ChunkLayout::new(5, 3).unwrap();
        let t = TimestepVector::asynchronous(&l, &[0.5, 0.9]).unwrap();
        assert_eq!(t.values, vec![0.0, 0.5, 0.5, 0.5, 0.9, 0.9]);
    }

    #[test]
    fn equal_timesteps_reduce_to_synchronous() {
        let l = ChunkLayout::new(9, 5).unwrap();
        let a = TimestepVector::asynchronous(&l, &[0.7, 0.7]).unwrap();
        let b = TimestepVector::synchronous(9, 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_chunk_vector() {
        let l = ChunkLayout::new(4, 4).unwrap();
        let t = TimestepVector::asynchronous(&l, &[0.3]).unwrap();
        assert_eq!(t.values, vec![0.0, 0.3, 0.3, 0.3, 0.3]);
    }

    #[test]
    fn out_of_range_timestep_rejected() {
        let l = ChunkLayout::new(4, 4).unwrap();
        assert!(matches!(
            TimestepVector::asynchronous(&l, &[1.5]),
            Err(RestError::Domain(_))
        ));
    }
}
