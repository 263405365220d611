//! Index maps for the two linear data-movement primitives.
//!
//! A `Gather` reads `out[i] = src[map[i]]` (or zero for [`PAD`]); the matching
//! `ScatterAdd` accumulates `out[map[i]] += src[i]`. Each is the adjoint of the
//! other, which makes every op expressed through them (broadcasting,
//! reductions, im2col, nearest upsampling, average pooling, slicing)
//! differentiable to any order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::numel;

/// Marks an output position that reads an implicit zero (convolution padding).
pub const PAD: u32 = u32::MAX;

#[derive(Debug)]
pub struct IndexMap {
    pub idx: Vec<u32>,
    /// Length of the dense side addressed by `idx`.
    pub src_len: usize,
}

#[derive(Clone, PartialEq, Eq, Hash)]
enum Key {
    Broadcast(Vec<usize>, Vec<usize>),
    Im2col([usize; 10]),
    Upsample([usize; 5]),
    Slice(Vec<usize>, usize, usize, usize),
    FlipW([usize; 4]),
}

thread_local! {
    static CACHE: RefCell<HashMap<Key, Rc<IndexMap>>> = RefCell::new(HashMap::new());
}

fn cached(key: Key, build: impl FnOnce() -> IndexMap) -> Rc<IndexMap> {
    if let Some(hit) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return hit;
    }
    let map = Rc::new(build());
    CACHE.with(|c| c.borrow_mut().insert(key, Rc::clone(&map)));
    map
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Map from each element of `to` to the element of `from` it replicates.
pub fn broadcast(from: &[usize], to: &[usize]) -> Rc<IndexMap> {
    cached(Key::Broadcast(from.to_vec(), to.to_vec()), || {
        assert!(from.len() <= to.len(), "cannot broadcast {from:?} to {to:?}");
        let offset = to.len() - from.len();
        let mut src_strides = vec![0usize; to.len()];
        let mut stride = 1;
        for i in (0..from.len()).rev() {
            let d = from[i];
            assert!(
                d == to[i + offset] || d == 1,
                "cannot broadcast {from:?} to {to:?}"
            );
            src_strides[i + offset] = if d == 1 { 0 } else { stride };
            stride *= d;
        }
        let total = numel(to);
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; to.len()];
        for _ in 0..total {
            let src: usize = counter
                .iter()
                .zip(&src_strides)
                .map(|(c, s)| c * s)
                .sum();
            idx.push(src as u32);
            for ax in (0..to.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < to[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        IndexMap {
            idx,
            src_len: numel(from),
        }
    })
}

/// Convolution geometry over NHWC inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + self.pad_top + self.pad_bottom - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + self.pad_left + self.pad_right - self.kernel_w) / self.stride + 1
    }
}

/// im2col over NHWC: rows are output pixels `(b, oy, ox)`, columns are
/// `(ky, kx, c)` patch entries.
pub fn im2col(g: &ConvGeometry) -> Rc<IndexMap> {
    let ho = g.out_height();
    let wo = g.out_width();
    let key = Key::Im2col([
        g.batch,
        g.height,
        g.width,
        g.channels,
        g.kernel_h,
        g.kernel_w,
        g.stride,
        g.pad_top,
        g.pad_left,
        ho * 100_000 + wo,
    ]);
    let g = *g;
    cached(key, move || {
        let cols = g.kernel_h * g.kernel_w * g.channels;
        let mut idx = Vec::with_capacity(g.batch * ho * wo * cols);
        for b in 0..g.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < g.height
                                && (ix as usize) < g.width;
                            for c in 0..g.channels {
                                if inside {
                                    let src = ((b * g.height + iy as usize) * g.width
                                        + ix as usize)
                                        * g.channels
                                        + c;
                                    idx.push(src as u32);
                                } else {
                                    idx.push(PAD);
                                }
                            }
                        }
                    }
                }
            }
        }
        IndexMap {
            idx,
            src_len: g.batch * g.height * g.width * g.channels,
        }
    })
}

/// Nearest-neighbour upsampling of an NHWC tensor `(b, h, w, c)` by `factor`.
/// Used as a scatter, the same map sums each `factor × factor` block.
pub fn upsample(b: usize, h: usize, w: usize, c: usize, factor: usize) -> Rc<IndexMap> {
    cached(Key::Upsample([b, h, w, c, factor]), || {
        let (ho, wo) = (h * factor, w * factor);
        let mut idx = Vec::with_capacity(b * ho * wo * c);
        for bi in 0..b {
            for y in 0..ho {
                for x in 0..wo {
                    let base = ((bi * h + y / factor) * w + x / factor) * c;
                    idx.extend((0..c).map(|ci| (base + ci) as u32));
                }
            }
        }
        IndexMap {
            idx,
            src_len: b * h * w * c,
        }
    })
}

/// Slice `[start, start+len)` of the last axis of `shape`.
pub fn slice_last(shape: &[usize], start: usize, len: usize) -> Rc<IndexMap> {
    let last = *shape.last().expect("slice of a scalar");
    cached(Key::Slice(shape.to_vec(), start, len, last), || {
        assert!(start + len <= last);
        let rows = numel(shape) / last;
        let mut idx = Vec::with_capacity(rows * len);
        for r in 0..rows {
            idx.extend((start..start + len).map(|j| (r * last + j) as u32));
        }
        IndexMap {
            idx,
            src_len: numel(shape),
        }
    })
}

/// Left-right mirror of an NHWC tensor.
pub fn flip_width(b: usize, h: usize, w: usize, c: usize) -> Rc<IndexMap> {
    cached(Key::FlipW([b, h, w, c]), || {
        let mut idx = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let base = ((bi * h + y) * w + (w - 1 - x)) * c;
                    idx.extend((0..c).map(|ci| (base + ci) as u32));
                }
            }
        }
        IndexMap {
            idx,
            src_len: b * h * w * c,
        }
    })
}
