//! Brute-force references for overlap and boundary-distance metrics.

use rand::Rng;

pub const H: usize = 18;
pub const W: usize = 23;

/// Random blobs: a few rectangles and discs over a background of 0.
pub fn random_mask(rng: &mut impl Rng, classes: u8) -> Vec<u8> {
    let mut m = vec![0u8; H * W];
    for _ in 0..rng.gen_range(0..6) {
        let class = rng.gen_range(1..classes);
        let (cy, cx) = (rng.gen_range(0..H) as f64, rng.gen_range(0..W) as f64);
        let r = rng.gen_range(0.5..6.0);
        let disc = rng.gen_bool(0.5);
        for y in 0..H {
            for x in 0..W {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let hit = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r * 0.7 };
                if hit {
                    m[y * W + x] = class;
                }
            }
        }
    }
    m
}

pub fn counting_dice(p: &[u8], g: &[u8], k: u8) -> f64 {
    let (mut inter, mut np, mut ng) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let (a, b) = (p[i] == k, g[i] == k);
        inter += (a && b) as u8 as f64;
        np += a as u8 as f64;
        ng += b as u8 as f64;
    }
    if np + ng == 0.0 {
        1.0
    } else {
        2.0 * inter / (np + ng)
    }
}

pub fn edge_pixels(m: &[u8], k: u8) -> Vec<(i64, i64)> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < H as i64 && x < W as i64 && m[y as usize * W + x as usize] == k;
    let mut out = Vec::new();
    for y in 0..H as i64 {
        for x in 0..W as i64 {
            if !at(y, x) {
                continue;
            }
            let mut interior = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    interior &= at(y + dy, x + dx);
                }
            }
            if !interior {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn interpolated_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// All-pairs Hausdorff distance between class boundaries.
pub fn brute_hausdorff(p: &[u8], g: &[u8], k: u8, q: f64) -> f64 {
    let (a, b) = (edge_pixels(p, k), edge_pixels(g, k));
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return ((H * H + W * W) as f64).sqrt();
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        let d = from
            .iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| (((y - v) * (y - v) + (x - u) * (x - u)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        interpolated_percentile(d, q)
    };
    directed(&a, &b).max(directed(&b, &a))
}
