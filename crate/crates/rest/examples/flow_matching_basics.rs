//! The flow-matching path and why n-step Euler integration is exact for a
//! constant velocity field.
//!
//! The noising path is the straight line z(t) = (1 - t) z0 + t eps, whose
//! velocity eps - z0 does not depend on t. Integrating the true field
//! backwards from t=1 therefore lands exactly on z0 for any step count.
//!
//! Run with: cargo run --release --example flow_matching_basics

use rest::chunk::{ChunkLayout, TimestepVector};
use rest::flow::{add_noise, euler_step, flow_target, TimeSchedule};
use rest::rng::Rng;
use rest::tensor::Tensor;

fn main() -> rest::error::Result<()> {
    let mut rng = Rng::new(11);
    let layout = ChunkLayout::new(7, 3)?; // 3 chunks of 3 latent frames
    let z0 = Tensor::randn(&[2, 2, 7, 4], &mut rng);
    let eps = Tensor::randn(&[2, 2, 7, 4], &mut rng);

    // Each chunk can sit at its own noise level; the leading slot (the
    // reference frame) is pinned clean at t = 0.
    let tv = TimestepVector::asynchronous(&layout, &[0.9, 0.5, 0.2])?;
    let zt = add_noise(&z0, &eps, &tv)?;
    println!("asynchronous noising: frame levels = {:?}", &tv.values);
    println!("z(t) dims = {:?}", zt.dims());

    // With all chunks at the same level, walk the straight path back with the
    // true (constant) velocity field.
    for n in [1usize, 2, 4, 8] {
        let sched = TimeSchedule::uniform(n);
        let v = flow_target(&z0, &eps)?; // eps - z0, independent of t
        let tv1 = TimestepVector::asynchronous(&layout, &[1.0; 3])?;
        let mut z = add_noise(&z0, &eps, &tv1)?; // pure noise at t = 1
        for s in 0..sched.transitions() {
            z = euler_step(&z, &v, sched.steps[s], sched.steps[s + 1])?;
        }
        let err = z
            .data()
            .iter()
            .zip(z0.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!("{n}-step Euler vs z0: max abs error = {err:.2e}");
        assert!(err < 1e-5);
    }
    println!("ok");
    Ok(())
}
