//! Overlap and boundary-distance metrics on integer label masks.

/// Per-class Dice over foreground classes `1..K`, plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    /// Index `i` holds class `i + 1`.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// `2|P ∩ G| / (|P| + |G|)` per foreground class; a class absent from both
/// masks scores 1.
pub fn dice_score(pred: &[u8], truth: &[u8], num_classes: usize) -> DiceScores {
    assert_eq!(pred.len(), truth.len(), "mask sizes differ");
    let mut inter = vec![0usize; num_classes];
    let mut p_count = vec![0usize; num_classes];
    let mut g_count = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(truth) {
        let (p, g) = (p as usize, g as usize);
        if p < num_classes {
            p_count[p] += 1;
        }
        if g < num_classes {
            g_count[g] += 1;
        }
        if p == g && p < num_classes {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (1..num_classes)
        .map(|k| {
            let denom = p_count[k] + g_count[k];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / denom as f64
            }
        })
        .collect();
    let mean = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    };
    DiceScores { per_class, mean }
}

/// Pixels of `class` with at least one 8-neighbour outside the class.
/// Positions beyond the image border count as outside.
pub fn boundary(mask: &[u8], height: usize, width: usize, class: u8) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize] == class
    };
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let edge = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
                .any(|(dy, dx)| !inside(yi + dy, xi + dx));
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance to the nearest site along one line
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let intersect = |p: usize| (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
        let mut s = intersect(v[k]);
        // z[0] is -inf, so this stops at k = 0 at the latest
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest of `sites`.
pub fn squared_distance_map(sites: &[(usize, usize)], height: usize, width: usize) -> Vec<f64> {
    let mut grid = vec![FAR; height * width];
    for &(y, x) in sites {
        grid[y * width + x] = 0.0;
    }
    let n = height.max(width);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Symmetric Hausdorff distance between the `class` boundaries of two masks:
/// the larger of the two directed `q`-th percentile distances.
///
/// Both empty gives 0; exactly one empty gives the image diagonal.
pub fn hausdorff(pred: &[u8], truth: &[u8], height: usize, width: usize, class: u8, q: f64) -> f64 {
    let a = boundary(pred, height, width, class);
    let b = boundary(truth, height, width, class);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((height * height + width * width) as f64).sqrt(),
        _ => {}
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let map = squared_distance_map(to, height, width);
        let mut d: Vec<f64> = from.iter().map(|&(y, x)| map[y * width + x].sqrt()).collect();
        percentile(&mut d, q)
    };
    directed(&a, &b).max(directed(&b, &a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint_dice() {
        let m = [0, 1, 1, 2, 2, 0];
        assert_eq!(dice_score(&m, &m, 3).per_class, vec![1.0, 1.0]);
        let p = [1, 1, 0, 0];
        let g = [0, 0, 1, 1];
        assert_eq!(dice_score(&p, &g, 2).mean, 0.0);
        // class 2 absent from both
        assert_eq!(dice_score(&p, &p, 3).per_class, vec![1.0, 1.0]);
    }

    #[test]
    fn single_pixels_at_distance_five() {
        let (h, w) = (8, 8);
        let mut a = vec![0u8; h * w];
        let mut b = vec![0u8; h * w];
        a[w + 1] = 1;
        b[4 * w + 5] = 1; // offset (3, 4)
        for q in [50.0, 95.0, 100.0] {
            assert_eq!(hausdorff(&a, &b, h, w, 1, q), 5.0);
        }
    }

    #[test]
    fn empty_conventions() {
        let z = vec![0u8; 12];
        let mut one = z.clone();
        one[5] = 1;
        assert_eq!(hausdorff(&z, &z, 3, 4, 1, 95.0), 0.0);
        assert_eq!(hausdorff(&z, &one, 3, 4, 1, 95.0), 5.0);
    }

    #[test]
    fn boundary_excludes_interior() {
        let mask = vec![1u8; 25];
        let b = boundary(&mask, 5, 5, 1);
        assert_eq!(b.len(), 16);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), 2.5);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
    }

    #[test]
    fn distance_map_small() {
        let d = squared_distance_map(&[(0, 0)], 3, 3);
        assert_eq!(d, vec![0.0, 1.0, 4.0, 1.0, 2.0, 5.0, 4.0, 5.0, 8.0]);
    }
}
