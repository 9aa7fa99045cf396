//! Dense, loop-based references for windowed attention.

use csunet::cst::{BlockOptions, Cmsa, OutputProj, QkvProj, WindowGrid};
use csunet::layers::LN_EPS;
use csunet::params::{Builder, ParamStore};
use csunet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Randomises every parameter so that no term of the computation vanishes.
pub fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().enumerate().map(|(c, v)| (v - mean) * inv * gamma[c] + beta[c]));
    }
    out
}

/// Depthwise `k x k` convolution with zero padding on an `h x w x d` map.
pub fn depthwise(x: &[f64], h: usize, w: usize, d: usize, weight: &[f64], bias: Option<&[f64]>, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            for c in 0..d {
                let mut acc = bias.map_or(0.0, |b| b[c]);
                for ky in -r..=r {
                    for kx in -r..=r {
                        let (sy, sx) = (y + ky, xx + kx);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let wi = c * k * k + (ky + r) as usize * k + (kx + r) as usize;
                        acc += weight[wi] * x[(sy as usize * w + sx as usize) * d + c];
                    }
                }
                out[(y as usize * w + xx as usize) * d + c] = acc;
            }
        }
    }
    out
}

pub fn linear(x: &[f64], input: usize, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let output = weight.len() / input;
    let mut out = Vec::new();
    for row in x.chunks(input) {
        for o in 0..output {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for i in 0..input {
                acc += weight[o * input + i] * row[i];
            }
            out.push(acc);
        }
    }
    out
}

/// Dense multi-head attention over `n` tokens. `allowed(i, j)` selects the
/// keys visible to query `i`; `bias(h, i, j)` is added to the logits.
pub fn dense_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let dot: f64 = (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum();
                    dot * scale + bias(h, i, j)
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (e, &j) in exps.iter().zip(&keys) {
                for c in 0..dh {
                    out[i * d + h * dh + c] += e / total * v[j * d + h * dh + c];
                }
            }
        }
    }
    out
}

pub fn run_module(store: &ParamStore<f64>, cmsa: &Cmsa, x: &Tensor<f64>, grid: &WindowGrid) -> Tensor<f64> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let y = cmsa.forward(&p, tape.constant(x.clone()), grid).unwrap();
    (*y.value()).clone()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation between a single-window attention module with
/// depthwise projections and the dense reference. With `bias_table` the
/// module carries a zeroed position-bias table.
pub fn single_window_error(seed: u64, bias_table: bool) -> f64 {
    let (m, d, heads) = (4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let opts = BlockOptions { bias_table, ..BlockOptions::FULL };
    let cmsa = Cmsa::build(&mut Builder::new(&mut store, &mut rng), d, heads, m, opts).unwrap();
    scramble(&mut store, &mut rng);
    if let Some(id) = cmsa.bias_table {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = random(&mut rng, &[1, m, m, d]);
    let grid = WindowGrid::new(m, 0, m, m).unwrap();
    let got = run_module(&store, &cmsa, &x, &grid);

    let g = |id| store.get(id).data().to_vec();
    let QkvProj::Depthwise { convs, norms } = &cmsa.qkv else {
        panic!("conv projection expected")
    };
    let proj: Vec<Vec<f64>> = convs
        .iter()
        .zip(norms)
        .map(|(c, nrm)| {
            let y = depthwise(x.data(), m, m, d, &g(c.weight), c.bias.map(g).as_deref(), 3);
            layer_norm(&y, d, &g(nrm.gamma), &g(nrm.beta))
        })
        .collect();
    let n = m * m;
    let att = dense_attention(&proj[0], &proj[1], &proj[2], n, d, heads, |_, _| true, |_, _, _| 0.0);
    let OutputProj::Refine(refine) = &cmsa.out else {
        panic!("refinement expected")
    };
    let want = depthwise(&att, m, m, d, &g(refine.weight), refine.bias.map(g).as_deref(), 3);
    max_diff(got.data(), &want)
}

/// Region-free definition of the shifted-window mask: two tokens of a
/// shifted window may attend to each other only if their offset in the
/// rolled map equals their offset in the original map (no wrap-around seam
/// between them).
pub fn brute_force_mask(grid: &WindowGrid) -> Vec<bool> {
    let (m, s, h, w) = (grid.window, grid.shift, grid.height, grid.width);
    let original = |pos: usize, len: usize| (pos + s) % len;
    let mut out = Vec::new();
    for wy in 0..h / m {
        for wx in 0..w / m {
            for i in 0..m * m {
                for j in 0..m * m {
                    let (yi, xi) = (wy * m + i / m, wx * m + i % m);
                    let (yj, xj) = (wy * m + j / m, wx * m + j % m);
                    let dy = original(yi, h) as isize - original(yj, h) as isize;
                    let dx = original(xi, w) as isize - original(xj, w) as isize;
                    let contiguous = dy == yi as isize - yj as isize && dx == xi as isize - xj as isize;
                    out.push(!contiguous);
                }
            }
        }
    }
    out
}
