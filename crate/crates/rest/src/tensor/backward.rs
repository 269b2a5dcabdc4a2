//! Reverse-mode gradient propagation.

use std::collections::HashMap;

use super::{
    dot_norms, for_each_lane, mean_var, numel_of, Op, Tensor, COS_EPS, LN_EPS,
};
use crate::error::{RestError, Result};

fn parents(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Matmul(a, b)
        | Op::Mse(a, b)
        | Op::CosineSim(a, b) => vec![a.clone(), b.clone()],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Transpose2(a)
        | Op::Softmax(a, _)
        | Op::Reshape(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::Gelu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::BroadcastRows(a, _) => vec![a.clone()],
        Op::Slice { x, .. } => vec![x.clone()],
        Op::Concat(parts, _) => parts.clone(),
        Op::LayerNorm { x, gain, bias } => vec![x.clone(), gain.clone(), bias.clone()],
    }
}

impl Tensor {
    /// Populate `grad` on every grad-requiring node reachable from this
    /// scalar. Calling backward again without `zero_grad` accumulates.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(RestError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.dims()
            )));
        }
        if !self.requires_grad() {
            return Err(RestError::Usage(
                "backward on a graph with no grad-requiring leaves".into(),
            ));
        }

        // Post-order DFS over grad-requiring nodes, then reverse.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = Default::default();
        enum Step {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut stack = vec![Step::Enter(self.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !t.requires_grad() || !visited.insert(t.inner.id) {
                        continue;
                    }
                    stack.push(Step::Exit(t.clone()));
                    for p in parents(&t.inner.op) {
                        stack.push(Step::Enter(p));
                    }
                }
                Step::Exit(t) => order.push(t),
            }
        }

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for node in order.iter().rev() {
            let g = match grads.get(&node.inner.id) {
                Some(g) => g.clone(),
                None => continue,
            };
            propagate(node, &g, &mut grads);
        }

        // Fold accumulated values into the stored grads.
        for node in &order {
            if let Some(g) = grads.remove(&node.inner.id) {
                let mut slot = node.inner.grad.lock().unwrap();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn accum(grads: &mut HashMap<u64, Vec<f32>>, t: &Tensor, contrib: Vec<f32>) {
    if !t.requires_grad() {
        return;
    }
    match grads.entry(t.inner.id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contrib);
        }
    }
}

fn propagate(node: &Tensor, g: &[f32], grads: &mut HashMap<u64, Vec<f32>>) {
    match &node.inner.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(grads, a, g.to_vec());
            accum(grads, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accum(grads, a, g.to_vec());
            accum(grads, b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            accum(
                grads,
                a,
                g.iter().zip(b.data()).map(|(g, b)| g * b).collect(),
            );
            accum(
                grads,
                b,
                g.iter().zip(a.data()).map(|(g, a)| g * a).collect(),
            );
        }
        Op::Neg(a) => accum(grads, a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, c) => accum(grads, a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a, _) => accum(grads, a, g.to_vec()),
        Op::Exp(a) => {
            // y is this node's output.
            accum(
                grads,
                a,
                g.iter().zip(node.data()).map(|(g, y)| g * y).collect(),
            );
        }
        Op::Log(a) => accum(
            grads,
            a,
            g.iter().zip(a.data()).map(|(g, x)| g / x).collect(),
        ),
        Op::Gelu(a) => accum(
            grads,
            a,
            g.iter()
                .zip(a.data())
                .map(|(&g, &x)| g * gelu_deriv(x))
                .collect(),
        ),
        Op::Matmul(a, b) => {
            let (ad, bd) = (a.dims(), b.dims());
            let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
            let n = bd[bd.len() - 1];
            let abatch: usize = ad[..ad.len() - 2].iter().product::<usize>().max(1);
            let bbatch: usize = bd[..bd.len() - 2].iter().product::<usize>().max(1);
            let nb = abatch.max(bbatch);
            let a_stride = if ad.len() == 2 && nb > 1 { 0 } else { m * k };
            let b_stride = if bd.len() == 2 && nb > 1 { 0 } else { k * n };
            let mut da = vec![0.0f32; a.numel()];
            let mut db = vec![0.0f32; b.numel()];
            for bi in 0..nb {
                let gb = &g[bi * m * n..(bi + 1) * m * n];
                let ab = &a.data()[bi * a_stride..bi * a_stride + m * k];
                let bb = &b.data()[bi * b_stride..bi * b_stride + k * n];
                // dA += g . B^T
                let da_b = &mut da[bi * a_stride..bi * a_stride + m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += gb[i * n + j] as f64 * bb[p * n + j] as f64;
                        }
                        da_b[i * k + p] += acc as f32;
                    }
                }
                // dB += A^T . g
                let db_b = &mut db[bi * b_stride..bi * b_stride + k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += ab[i * k + p] as f64 * gb[i * n + j] as f64;
                        }
                        db_b[p * n + j] += acc as f32;
                    }
                }
            }
            accum(grads, a, da);
            accum(grads, b, db);
        }
        Op::Transpose2(a) => {
            let d = node.dims();
            let (m, n) = (d[d.len() - 2], d[d.len() - 1]);
            let nb = numel_of(&d[..d.len() - 2]).max(1);
            let mut da = vec![0.0f32; a.numel()];
            for bi in 0..nb {
                let src = &g[bi * m * n..(bi + 1) * m * n];
                let dst = &mut da[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            accum(grads, a, da);
        }
        Op::Softmax(a, axis) => {
            let y = node.data();
            let mut da = vec![0.0f32; a.numel()];
            for_each_lane(node.dims(), *axis, |lane| {
                let mut dot = 0.0f64;
                for &i in lane {
                    dot += g[i] as f64 * y[i] as f64;
                }
                for &i in lane {
                    da[i] = (y[i] as f64 * (g[i] as f64 - dot)) as f32;
                }
            });
            accum(grads, a, da);
        }
        Op::Concat(parts, axis) => {
            let dims = node.dims();
            let outer: usize = dims[..*axis].iter().product();
            let inner: usize = dims[*axis + 1..].iter().product();
            let total_axis = dims[*axis];
            let mut offset = 0usize;
            for p in parts {
                let la = p.dims()[*axis];
                if p.requires_grad() {
                    let mut dp = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let base = o * total_axis * inner + offset * inner;
                        dp.extend_from_slice(&g[base..base + la * inner]);
                    }
                    accum(grads, p, dp);
                }
                offset += la;
            }
        }
        Op::Slice { x, axis, start } => {
            let d = x.dims();
            let len = node.dims()[*axis];
            let outer: usize = d[..*axis].iter().product();
            let inner: usize = d[*axis + 1..].iter().product();
            let mut dx = vec![0.0f32; x.numel()];
            for o in 0..outer {
                let dst = o * d[*axis] * inner + start * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accum(grads, x, dx);
        }
        Op::Reshape(a) => accum(grads, a, g.to_vec()),
        Op::SumAll(a) => accum(grads, a, vec![g[0]; a.numel()]),
        Op::MeanAll(a) => {
            let s = g[0] / a.numel() as f32;
            accum(grads, a, vec![s; a.numel()]);
        }
        Op::Mse(a, b) => {
            let n = a.numel() as f32;
            let da: Vec<f32> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| g[0] * 2.0 * (x - y) / n)
                .collect();
            let db: Vec<f32> = da.iter().map(|v| -v).collect();
            accum(grads, a, da);
            accum(grads, b, db);
        }
        Op::CosineSim(a, b) => {
            let (dot, na, nb) = dot_norms(a.data(), b.data());
            if na < COS_EPS || nb < COS_EPS {
                return; // defined as constant 0 at the guard
            }
            let s = dot / (na * nb);
            let g0 = g[0] as f64;
            let da: Vec<f32> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    (g0 * (y as f64 / (na * nb) - s * x as f64 / (na * na))) as f32
                })
                .collect();
            let db: Vec<f32> = b
                .data()
                .iter()
                .zip(a.data())
                .map(|(&y, &x)| {
                    (g0 * (x as f64 / (na * nb) - s * y as f64 / (nb * nb))) as f32
                })
                .collect();
            accum(grads, a, da);
            accum(grads, b, db);
        }
        Op::LayerNorm { x, gain, bias } => {
            let feat = *x.dims().last().unwrap();
            let rows = x.numel() / feat;
            let mut dx = vec![0.0f32; x.numel()];
            let mut dgain = vec![0.0f32; feat];
            let mut dbias = vec![0.0f32; feat];
            for r in 0..rows {
                let xr = &x.data()[r * feat..(r + 1) * feat];
                let gr = &g[r * feat..(r + 1) * feat];
                let (mean, var) = mean_var(xr);
                let inv = 1.0 / (var + LN_EPS as f64).sqrt();
                let xn: Vec<f64> = xr.iter().map(|&v| (v as f64 - mean) * inv).collect();
                let mut m1 = 0.0f64; // mean of dxn
                let mut m2 = 0.0f64; // mean of dxn * xn
                let dxn: Vec<f64> = (0..feat)
                    .map(|j| {
                        let d = gr[j] as f64 * gain.data()[j] as f64;
                        m1 += d;
                        m2 += d * xn[j];
                        d
                    })
                    .collect();
                m1 /= feat as f64;
                m2 /= feat as f64;
                for j in 0..feat {
                    dx[r * feat + j] = (inv * (dxn[j] - m1 - xn[j] * m2)) as f32;
                    dgain[j] += (gr[j] as f64 * xn[j]) as f32;
                    dbias[j] += gr[j];
                }
            }
            accum(grads, x, dx);
            accum(grads, gain, dgain);
            accum(grads, bias, dbias);
        }
        Op::BroadcastRows(a, n) => {
            let feat = a.numel();
            let mut da = vec![0.0f32; feat];
            for r in 0..*n {
                for j in 0..feat {
                    da[j] += g[r * feat + j];
                }
            }
            accum(grads, a, da);
        }
    }
}

fn gelu_deriv(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
