//! Flow-matching forward process, regression target, loss, and the Euler
//! reverse-time integrator on the straight Gaussian path
//! z(t) = (1-t) z0 + t eps with target field v = eps - z0.

use crate::chunk::TimestepVector;
use crate::error::{RestError, Result};
use crate::tensor::Tensor;

/// Strictly decreasing schedule ending at exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule {
    pub steps: Vec<f32>,
}

impl TimeSchedule {
    pub fn new(steps: Vec<f32>) -> Result<Self> {
        if steps.len() < 2 {
            return Err(RestError::Schedule("schedule needs at least 2 points".into()));
        }
        if *steps.last().unwrap() != 0.0 {
            return Err(RestError::Schedule("schedule must end at exactly 0".into()));
        }
        if steps[0] > 1.0 {
            return Err(RestError::Schedule("schedule must start at most at 1".into()));
        }
        for w in steps.windows(2) {
            if w[1] >= w[0] {
                return Err(RestError::Schedule(format!(
                    "schedule not strictly decreasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(TimeSchedule { steps })
    }

    /// `n` uniformly spaced levels from 1.0 down to 0.0 (n steps).
    pub fn uniform(n: usize) -> Self {
        let steps = (0..=n)
            .map(|i| 1.0 - i as f32 / n as f32)
            .collect();
        TimeSchedule { steps }
    }

    /// Number of integration steps (transitions).
    pub fn transitions(&self) -> usize {
        self.steps.len() - 1
    }
}

/// Noise the latents per frame: zt = (1 - t) * z0 + t * eps, with the
/// timestep vector broadcast over spatial and channel dims. The latent frame
/// axis is axis 2 of [h, w, f, d]; frame i uses t.frame(i), and the reference
/// slot is handled by the caller (it stays clean at t = 0).
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: &TimestepVector) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(RestError::Shape(format!(
            "add_noise: z0 {:?} vs eps {:?}",
            z0.dims(),
            eps.dims()
        )));
    }
    let d = z0.dims();
    if d.len() != 4 || d[2] != t.values.len() - 1 {
        return Err(RestError::Shape(format!(
            "add_noise: latents {:?} do not carry {} frames on axis 2",
            d,
            t.values.len() - 1
        )));
    }
    for &v in &t.values {
        if !(0.0..=1.0).contains(&v) {
            return Err(RestError::Domain(format!("timestep {v} outside [0, 1]")));
        }
    }
    let (h, w, f, c) = (d[0], d[1], d[2], d[3]);
    let mut out = vec![0.0f32; z0.numel()];
    for y in 0..h {
        for x in 0..w {
            for fr in 0..f {
                let tv = t.frame(fr);
                let base = ((y * w + x) * f + fr) * c;
                for ch in 0..c {
                    out[base + ch] =
                        (1.0 - tv) * z0.data()[base + ch] + tv * eps.data()[base + ch];
                }
            }
        }
    }
    Tensor::from_vec(d, out)
}

/// The correct vector field on the straight path: v = eps - z0.
pub fn flow_target(z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(z0)
}

/// Mean squared error between predicted and target fields.
pub fn fm_loss(v_pred: &Tensor, v_target: &Tensor) -> Result<Tensor> {
    v_pred.mse(v_target)
}

/// One reverse-time Euler step: z_next = z + (t_to - t_from) * v.
pub fn euler_step(zt: &Tensor, v_pred: &Tensor, t_from: f32, t_to: f32) -> Result<Tensor> {
    if t_to >= t_from {
        return Err(RestError::Schedule(format!(
            "euler_step requires descending time, got {t_from} -> {t_to}"
        )));
    }
    zt.add(&v_pred.scale(t_to - t_from))
}

/// Sinusoidal timestep features of dimension `dim` for a scalar t in [0, 1].
pub fn timestep_embedding(t: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq * std::f64::consts::PI * 2.0;
        out[i] = angle.sin() as f32;
        out[half + i] = angle.cos() as f32;
    }
    Tensor::from_vec(&[1, dim], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::{ChunkLayout, TimestepVector};
    use crate::rng::Rng;

    fn rand_latents(rng: &mut Rng, f: usize) -> Tensor {
        Tensor::randn(&[2, 2, f, 3], rng)
    }

    #[test]
    fn endpoint_t0_is_exact() {
        let mut rng = Rng::new(1);
        let z0 = rand_latents(&mut rng, 4);
        let eps = rand_latents(&mut rng, 4);
        let t = TimestepVector::synchronous(4, 0.0).unwrap();
        let zt = add_noise(&z0, &eps, &t).unwrap();
        assert_eq!(zt.data(), z0.data());
    }

    #[test]
    fn endpoint_t1_is_exact() {
        let mut rng = Rng::new(2);
        let z0 = rand_latents(&mut rng, 4);
        let eps = rand_latents(&mut rng, 4);
        let t = TimestepVector::synchronous(4, 1.0).unwrap();
        let zt = add_noise(&z0, &eps, &t).unwrap();
        assert_eq!(zt.data(), eps.data());
    }

    #[test]
    fn quarter_path_scales_noise() {
        let mut rng = Rng::new(3);
        let z0 = Tensor::zeros(&[2, 2, 4, 3]);
        let eps = rand_latents(&mut rng, 4);
        let t = TimestepVector::synchronous(4, 0.25).unwrap();
        let zt = add_noise(&z0, &eps, &t).unwrap();
        for (a, b) in zt.data().iter().zip(eps.data()) {
            assert!((a - 0.25 * b).abs() < 1e-7);
        }
    }

    #[test]
    fn asynchronous_noising_respects_chunks() {
        let mut rng = Rng::new(4);
        let layout = ChunkLayout::new(5, 3).unwrap();
        let z0 = Tensor::zeros(&[1, 1, 5, 1]);
        let eps = Tensor::from_vec(&[1, 1, 5, 1], vec![1.0; 5]).unwrap();
        let _ = &mut rng;
        let t = TimestepVector::asynchronous(&layout, &[0.2, 0.8]).unwrap();
        let zt = add_noise(&z0, &eps, &t).unwrap();
        assert_eq!(zt.data(), &[0.2, 0.2, 0.2, 0.8, 0.8]);
    }

    #[test]
    fn target_field_identities() {
        let mut rng = Rng::new(5);
        let z0 = rand_latents(&mut rng, 4);
        let v = flow_target(&z0, &z0).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        let eps = rand_latents(&mut rng, 4);
        let zero = Tensor::zeros(&[2, 2, 4, 3]);
        let v2 = flow_target(&zero, &eps).unwrap();
        assert_eq!(v2.data(), eps.data());
        // Linearity.
        let va = flow_target(&z0.scale(2.0), &eps.scale(2.0)).unwrap();
        let vb = flow_target(&z0, &eps).unwrap().scale(2.0);
        for (a, b) in va.data().iter().zip(vb.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fm_loss_values() {
        let a = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(fm_loss(&a, &a).unwrap().item(), 0.0);
        let b = a.add_scalar(1.0);
        assert!((fm_loss(&b, &a).unwrap().item() - 1.0).abs() < 1e-7);
        // Symmetry.
        let mut rng = Rng::new(6);
        let x = Tensor::randn(&[5], &mut rng);
        let y = Tensor::randn(&[5], &mut rng);
        assert_eq!(
            fm_loss(&x, &y).unwrap().item(),
            fm_loss(&y, &x).unwrap().item()
        );
    }

    #[test]
    fn exact_field_single_step_recovers_z0() {
        let mut rng = Rng::new(7);
        let z0 = rand_latents(&mut rng, 4);
        let eps = rand_latents(&mut rng, 4);
        let v = flow_target(&z0, &eps).unwrap();
        let z = euler_step(&eps, &v, 1.0, 0.0).unwrap();
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn exact_field_multi_step_recovers_z0() {
        let mut rng = Rng::new(8);
        for &n in &[2usize, 4, 8] {
            let z0 = rand_latents(&mut rng, 4);
            let eps = rand_latents(&mut rng, 4);
            let v = flow_target(&z0, &eps).unwrap();
            let sched = TimeSchedule::uniform(n);
            let mut z = eps.clone();
            for w in sched.steps.windows(2) {
                z = euler_step(&z, &v, w[0], w[1]).unwrap();
            }
            for (a, b) in z.data().iter().zip(z0.data()) {
                assert!((a - b).abs() <= 1e-5, "n={n}");
            }
        }
    }

    #[test]
    fn zero_field_is_identity() {
        let mut rng = Rng::new(9);
        let z = rand_latents(&mut rng, 4);
        let v = Tensor::zeros(&[2, 2, 4, 3]);
        let z2 = euler_step(&z, &v, 0.5, 0.25).unwrap();
        assert_eq!(z2.data(), z.data());
    }

    #[test]
    fn non_descending_times_rejected() {
        let z = Tensor::zeros(&[1, 1, 2, 1]);
        assert!(matches!(
            euler_step(&z, &z, 0.5, 0.5),
            Err(RestError::Schedule(_))
        ));
        assert!(TimeSchedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(TimeSchedule::new(vec![1.0, 0.5, 0.1]).is_err());
    }

    #[test]
    fn uniform_schedule_endpoints() {
        let s = TimeSchedule::uniform(8);
        assert_eq!(s.steps.len(), 9);
        assert_eq!(s.steps[0], 1.0);
        assert_eq!(*s.steps.last().unwrap(), 0.0);
        TimeSchedule::new(s.steps.clone()).unwrap();
    }
}
