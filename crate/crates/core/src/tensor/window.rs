//! Non-overlapping window tiling for windowed self-attention.
//!
//! Windows are ordered batch-major, then window row, then window column.
//! Inside a window, token `r * W + c` is pixel `(W*i + r, W*j + c)` of
//! window `(i, j)`. Maps whose extents are not multiples of `W` are
//! reflect-padded at the bottom/right before tiling and cropped on reverse.

use super::{reflect_index, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid<T> {
    pub window_size: usize,
    /// `[N * num_windows, W*W, C]`.
    pub grid: Tensor<T>,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl<T: Element> WindowGrid<T> {
    pub fn num_windows(&self) -> usize {
        self.grid.shape()[0]
    }
}

/// Geometry of a tiled `h x w` map.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tiling {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub win: usize,
    pub nh: usize,
    pub nw: usize,
}

impl Tiling {
    pub fn new(n: usize, c: usize, h: usize, w: usize, win: usize) -> Result<Self> {
        if win == 0 {
            return Err(Error::arg("window size must be at least 1"));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("cannot tile an empty map"));
        }
        Ok(Self { n, c, h, w, win, nh: h.div_ceil(win), nw: w.div_ceil(win) })
    }

    pub fn windows(&self) -> usize {
        self.n * self.nh * self.nw
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        [self.windows(), self.win * self.win, self.c]
    }

    /// Visits every padded grid position with its (possibly reflected)
    /// source pixel. Arguments: grid flat offset of channel 0, source
    /// offset of channel 0 within the image, whether the position is
    /// inside the unpadded map.
    fn for_each(&self, mut f: impl FnMut(usize, usize, bool)) {
        let (win, c) = (self.win, self.c);
        for b in 0..self.n {
            for i in 0..self.nh {
                for j in 0..self.nw {
                    let widx = (b * self.nh + i) * self.nw + j;
                    for r in 0..win {
                        let y = i * win + r;
                        for cc in 0..win {
                            let x = j * win + cc;
                            let inside = y < self.h && x < self.w;
                            let sy = reflect_index(y as isize, self.h);
                            let sx = reflect_index(x as isize, self.w);
                            let g = (widx * win * win + r * win + cc) * c;
                            let s = b * c * self.h * self.w + sy * self.w + sx;
                            f(g, s, inside);
                        }
                    }
                }
            }
        }
    }

    /// `[N, C, h, w] -> [windows, W*W, C]`, padded positions reflected.
    pub fn partition<T: Element>(&self, src: &[T]) -> Vec<T> {
        let plane = self.h * self.w;
        let mut out = vec![T::zero(); self.windows() * self.win * self.win * self.c];
        self.for_each(|g, s, _| {
            for ch in 0..self.c {
                out[g + ch] = src[s + ch * plane];
            }
        });
        out
    }

    /// Adjoint of [`partition`](Self::partition): reflected copies add up.
    pub fn partition_adjoint<T: Element>(&self, grad: &[T]) -> Vec<T> {
        let plane = self.h * self.w;
        let mut out = vec![T::zero(); self.n * self.c * plane];
        self.for_each(|g, s, _| {
            for ch in 0..self.c {
                out[s + ch * plane] += grad[g + ch];
            }
        });
        out
    }

    /// `[windows, W*W, C] -> [N, C, h, w]`, padded positions dropped.
    pub fn reverse<T: Element>(&self, grid: &[T]) -> Vec<T> {
        let plane = self.h * self.w;
        let mut out = vec![T::zero(); self.n * self.c * plane];
        self.for_each(|g, s, inside| {
            if inside {
                for ch in 0..self.c {
                    out[s + ch * plane] = grid[g + ch];
                }
            }
        });
        out
    }

    /// Adjoint of [`reverse`](Self::reverse): zero gradient at padded positions.
    pub fn reverse_adjoint<T: Element>(&self, grad: &[T]) -> Vec<T> {
        let plane = self.h * self.w;
        let mut out = vec![T::zero(); self.windows() * self.win * self.win * self.c];
        self.for_each(|g, s, inside| {
            if inside {
                for ch in 0..self.c {
                    out[g + ch] = grad[s + ch * plane];
                }
            }
        });
        out
    }
}

/// Tiles `[N, C, h, w]` into `W x W` windows of tokens.
pub fn window_partition<T: Element>(x: &Tensor<T>, window_size: usize) -> Result<WindowGrid<T>> {
    let [n, c, h, w] = x.dims4()?;
    let t = Tiling::new(n, c, h, w, window_size)?;
    Ok(WindowGrid {
        window_size,
        grid: Tensor::from_vec(t.grid_shape(), t.partition(x.data()))?,
        pad_h: t.nh * window_size - h,
        pad_w: t.nw * window_size - w,
    })
}

/// Reassembles an `h x w` map from its windows, discarding padding.
pub fn window_reverse<T: Element>(g: &WindowGrid<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    windows_to_map(&g.grid, g.window_size, h, w)
}

pub(crate) fn tiling_for_grid(shape: &[usize], win: usize, h: usize, w: usize) -> Result<Tiling> {
    let [bw, tokens, c] = match *shape {
        [a, b, c] => [a, b, c],
        _ => return Err(Error::shape(format!("window grid must be rank 3, got {shape:?}"))),
    };
    let probe = Tiling::new(1, c, h, w, win)?;
    let per_image = probe.nh * probe.nw;
    if tokens != win * win || bw % per_image != 0 {
        return Err(Error::shape(format!(
            "grid {shape:?} is not a {win}x{win} tiling of a {h}x{w} map"
        )));
    }
    Tiling::new(bw / per_image, c, h, w, win)
}

pub(crate) fn windows_to_map<T: Element>(
    grid: &Tensor<T>,
    win: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let t = tiling_for_grid(grid.shape(), win, h, w)?;
    Tensor::from_vec([t.n, t.c, h, w], t.reverse(grid.data()))
}
