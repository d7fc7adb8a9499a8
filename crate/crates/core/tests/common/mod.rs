//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's forward pass or matrix products.

#![allow(dead_code)]

use made::seed::{self, Stream};
use made::{make_mask_list, Activation, Architecture, MaskSet, Params};
use ndarray::Array2;
use rand::Rng;

/// Counts input-to-output paths by walking the mask graph edge by edge.
/// Entry `[d'][d]` is the number of paths from input `d` to output `d'`.
pub fn path_counts(masks: &MaskSet) -> Vec<Vec<u64>> {
    let dim = masks.dim();
    let layers = masks.hidden_masks();
    let mut counts = vec![vec![0u64; dim]; dim];
    for input in 0..dim {
        // reach[k] = number of paths from `input` to unit k of the current layer
        let mut reach: Vec<u64> = (0..dim).map(|d| u64::from(d == input)).collect();
        for m in layers {
            let mut next = vec![0u64; m.nrows()];
            for (k, slot) in next.iter_mut().enumerate() {
                for (j, &r) in reach.iter().enumerate() {
                    if m[(k, j)] == 1 {
                        *slot += r;
                    }
                }
            }
            reach = next;
        }
        for out in 0..dim {
            for (k, &r) in reach.iter().enumerate() {
                if masks.output()[(out, k)] == 1 {
                    counts[out][input] += r;
                }
            }
            if let Some(a) = masks.direct() {
                counts[out][input] += u64::from(a[(out, input)]);
            }
        }
    }
    counts
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Softplus => (1.0 + z.exp()).ln(),
    }
}

/// Output logits for one input vector, computed with scalar loops.
pub fn naive_logits(p: &Params, masks: &MaskSet, x: &[u8]) -> Vec<f64> {
    let arch = &p.arch;
    let mut h: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    for (l, w) in p.w.iter().enumerate() {
        let m = masks.hidden(l);
        let mut next = vec![0.0; w.nrows()];
        for (k, out) in next.iter_mut().enumerate() {
            let mut z = p.b[l][k];
            for j in 0..w.ncols() {
                if m[(k, j)] == 1 {
                    z += w[(k, j)] * h[j];
                    if let Some(u) = &p.u {
                        z += u[l][(k, j)];
                    }
                }
            }
            *out = act(arch.activation, z);
        }
        h = next;
    }
    (0..arch.dim)
        .map(|d| {
            let mut z = p.c[d];
            for (k, &hk) in h.iter().enumerate() {
                if masks.output()[(d, k)] == 1 {
                    z += p.v[(d, k)] * hk;
                    if let Some(u) = &p.u_out {
                        z += u[(d, k)];
                    }
                }
            }
            if let (Some(a), Some(ma)) = (&p.a, masks.direct()) {
                for j in 0..arch.dim {
                    if ma[(d, j)] == 1 {
                        z += a[(d, j)] * f64::from(x[j]);
                    }
                }
            }
            z
        })
        .collect()
}

/// `log p(x)` as a sum of per-dimension Bernoulli log terms.
pub fn naive_log_prob(p: &Params, masks: &MaskSet, x: &[u8]) -> f64 {
    naive_logits(p, masks, x)
        .iter()
        .zip(x)
        .map(|(&z, &xd)| {
            let q = 1.0 / (1.0 + (-z).exp());
            if xd == 1 {
                q.ln()
            } else {
                (1.0 - q).ln()
            }
        })
        .sum()
}

/// Row `i` has bit `d` of `i` in column `d`.
pub fn all_inputs(dim: usize) -> Vec<Vec<u8>> {
    (0..1usize << dim)
        .map(|i| (0..dim).map(|d| ((i >> d) & 1) as u8).collect())
        .collect()
}

pub fn index_of(x: &[u8]) -> usize {
    x.iter()
        .enumerate()
        .map(|(d, &v)| usize::from(v) << d)
        .sum()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn histogram(samples: &Array2<u8>) -> Vec<f64> {
    let mut h = vec![0.0; 1 << samples.ncols()];
    for row in samples.rows() {
        h[index_of(row.as_slice().unwrap())] += 1.0;
    }
    let n = samples.nrows() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// A random architecture, its parameters and one sampled mask set.
pub fn random_model<R: Rng>(
    rng: &mut R,
    dim: usize,
    layers: usize,
    max_width: usize,
    activation: Activation,
    direct: bool,
    conditioning: bool,
) -> (Params, MaskSet) {
    let hidden = (0..layers).map(|_| rng.gen_range(1..=max_width)).collect();
    let arch = Architecture::new(dim, hidden, activation)
        .with_direct(direct)
        .with_conditioning(conditioning);
    let params = Params::random_uniform(&arch, 1.0, rng).unwrap();
    let masks = make_mask_list(1, dim, &arch.hidden, rng.gen(), direct)
        .unwrap()
        .remove(0);
    (params, masks)
}

pub fn rng(seed_value: u64) -> made::seed::Rng {
    seed::stream_rng(seed_value, Stream::Init, 99)
}

/// Train/valid/test splits drawn from a random teacher network.
pub fn teacher_dataset(dim: usize, sizes: (usize, usize, usize), seed_value: u64) -> made::Dataset {
    let mut r = rng(seed_value);
    let (teacher, masks) = random_model(&mut r, dim, 1, 8, Activation::Relu, true, false);
    let mut teacher = teacher;
    for mut t in teacher.tensors_mut() {
        t.mapv_inplace(|v| 2.5 * v);
    }
    let mut draw = |n| made::sample(&teacher, &masks, n, &mut r).unwrap();
    made::Dataset::new("teacher", draw(sizes.0), draw(sizes.1), draw(sizes.2)).unwrap()
}
