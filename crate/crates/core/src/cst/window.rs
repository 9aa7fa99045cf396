//! Window partitioning, cyclic shifts and the shifted-window attention mask.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Additive logit penalty between tokens from different pre-shift regions.
pub const MASK_VALUE: f64 = -1e9;

/// Tiling of an `H x W` token map into `M x M` windows, optionally shifted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub window: usize,
    pub shift: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowGrid {
    pub fn new(window: usize, shift: usize, height: usize, width: usize) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(shape_err!(
                "{height}x{width} map is not divisible into {window}x{window} windows"
            ));
        }
        if shift >= window {
            return Err(shape_err!("shift {shift} must be below window size {window}"));
        }
        Ok(WindowGrid {
            window,
            shift,
            height,
            width,
        })
    }

    /// The regular grid (`shift = 0`) of the same extent.
    pub fn unshifted(self) -> Self {
        WindowGrid { shift: 0, ..self }
    }

    /// The shifted twin (`shift = floor(M / 2)`).
    pub fn shifted(self) -> Self {
        WindowGrid {
            shift: self.window / 2,
            ..self
        }
    }

    pub fn windows_per_image(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn check<T: Scalar>(&self, x: &Var<'_, T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.height || s[2] != self.width {
            return Err(shape_err!(
                "token map {s:?} does not match a {}x{} window grid",
                self.height,
                self.width
            ));
        }
        Ok((s[0], s[3]))
    }
}

/// `[N, H, W, d] -> [N * (H/M) * (W/M), M, M, d]`, windows in row-major tile order.
pub fn window_partition<'t, T: Scalar>(x: Var<'t, T>, grid: &WindowGrid) -> Result<Var<'t, T>> {
    let (n, d) = grid.check(&x)?;
    let m = grid.window;
    let (nh, nw) = (grid.height / m, grid.width / m);
    x.reshape([n, nh, m, nw, m, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([n * nh * nw, m, m, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'t, T: Scalar>(windows: Var<'t, T>, grid: &WindowGrid) -> Result<Var<'t, T>> {
    let s = windows.shape();
    let m = grid.window;
    let per_image = grid.windows_per_image();
    if s.len() != 4 || s[1] != m || s[2] != m || !s[0].is_multiple_of(per_image) {
        return Err(shape_err!(
            "windows {s:?} do not tile a {}x{} map with window {m}",
            grid.height,
            grid.width
        ));
    }
    let (n, d) = (s[0] / per_image, s[3]);
    let (nh, nw) = (grid.height / m, grid.width / m);
    windows
        .reshape([n, nh, nw, m, m, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([n, grid.height, grid.width, d])
}

fn roll_axis<'t, T: Scalar>(x: Var<'t, T>, axis: usize, shift: isize) -> Result<Var<'t, T>> {
    let len = x.shape()[axis] as isize;
    let s = shift.rem_euclid(len) as usize;
    if s == 0 {
        return Ok(x);
    }
    let len = len as usize;
    let tail = x.slice(axis, len - s, s)?;
    let head = x.slice(axis, 0, len - s)?;
    Var::concat(&[tail, head], axis)
}

/// Torus roll of a `[N, H, W, d]` map: `out[i, j] = x[(i - dy) mod H, (j - dx) mod W]`.
pub fn cyclic_shift<'t, T: Scalar>(x: Var<'t, T>, dy: isize, dx: isize) -> Result<Var<'t, T>> {
    if x.shape().len() != 4 {
        return Err(shape_err!("cyclic_shift expects [N, H, W, d], got {:?}", x.shape()));
    }
    let x = roll_axis(x, 1, dy)?;
    roll_axis(x, 2, dx)
}

/// Bias-table row for every (query, key) pair of an `M x M` window.
///
/// Entry `i * M^2 + j` is `(dy + M - 1) * (2M - 1) + (dx + M - 1)` where
/// `(dy, dx)` is the offset from key `j` to query `i`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            out.push(dy * span + dx);
        }
    }
    out
}

/// Region id of every position of the shifted map, row-major `[H, W]`.
///
/// After rolling by `-shift`, the last `shift` rows/columns hold content that
/// wrapped around; tokens only attend within their own region.
pub fn shift_region_ids(grid: &WindowGrid) -> Vec<usize> {
    let band = |pos: usize, len: usize| -> usize {
        if pos < len - grid.window {
            0
        } else if pos < len - grid.shift {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(grid.height * grid.width);
    for y in 0..grid.height {
        for x in 0..grid.width {
            ids.push(band(y, grid.height) * 3 + band(x, grid.width));
        }
    }
    ids
}

/// Per-window attention mask `[nW, M^2, M^2]`: `true` where query and key
/// come from different regions. `None` when the grid is not shifted.
pub fn masked_pairs(grid: &WindowGrid) -> Option<Vec<bool>> {
    if grid.shift == 0 {
        return None;
    }
    let ids = shift_region_ids(grid);
    let m = grid.window;
    let n = grid.tokens();
    let mut out = Vec::with_capacity(grid.windows_per_image() * n * n);
    for wy in 0..grid.height / m {
        for wx in 0..grid.width / m {
            let region = |t: usize| ids[(wy * m + t / m) * grid.width + wx * m + t % m];
            for i in 0..n {
                for j in 0..n {
                    out.push(region(i) != region(j));
                }
            }
        }
    }
    Some(out)
}

/// Additive mask tensor (0 or [`MASK_VALUE`]) shaped `[nW, 1, M^2, M^2]`.
pub fn attention_mask<T: Scalar>(grid: &WindowGrid) -> Option<Tensor<T>> {
    let pairs = masked_pairs(grid)?;
    let n = grid.tokens();
    let data = pairs
        .iter()
        .map(|&m| if m { T::from_f64(MASK_VALUE) } else { T::zero() })
        .collect();
    Some(Tensor::new(vec![grid.windows_per_image(), 1, n, n], data).expect("mask shape"))
}
