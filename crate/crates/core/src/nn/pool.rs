//! Max pooling that remembers where each maximum came from, and the matching
//! unpooling that puts values back exactly there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax positions of one pooling stage.
///
/// `indices` holds one entry per pooled cell, in `(n, c, row, col)` order of
/// the pooled map. Each entry is the flat `row * width + col` offset inside
/// the pre-pool plane of the same `(n, c)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingRecord {
    pub indices: Vec<u32>,
    pub window: usize,
    /// `(n, c, h, w)` of the map before pooling.
    pub input_shape: [usize; 4],
}

impl PoolingRecord {
    pub fn pooled_shape(&self) -> [usize; 4] {
        let [n, c, h, w] = self.input_shape;
        [n, c, h / self.window, w / self.window]
    }

    /// `(row, col)` in the pre-pool plane for the pooled cell at flat
    /// position `cell`.
    pub fn position(&self, cell: usize) -> (usize, usize) {
        let w = self.input_shape[3];
        let idx = self.indices[cell] as usize;
        (idx / w, idx % w)
    }

    /// True when every index lies inside its own pooling window.
    pub fn indices_in_windows(&self) -> bool {
        let [_, _, ph, pw] = self.pooled_shape();
        let plane = ph * pw;
        self.indices.iter().enumerate().all(|(cell, _)| {
            let (r, c) = self.position(cell);
            let within = cell % plane;
            let (pr, pc) = (within / pw, within % pw);
            r / self.window == pr && c / self.window == pc
        })
    }
}

/// Non-overlapping `window × window` max pooling. Ties go to the first
/// position in row-major scan order.
pub fn pool_with_indices(x: &Tensor, window: usize) -> Result<(Tensor, PoolingRecord)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!(
            "spatial dims {h}×{w} not divisible by pooling window {window}"
        )));
    }
    let (ph, pw) = (h / window, w / window);
    let mut out = Vec::with_capacity(n * c * ph * pw);
    let mut indices = Vec::with_capacity(n * c * ph * pw);
    let data = x.data();
    for plane in data.chunks_exact(h * w) {
        for pr in 0..ph {
            for pc in 0..pw {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = (pr * window) * w + pc * window;
                let mut first = true;
                for dr in 0..window {
                    let row = pr * window + dr;
                    for dc in 0..window {
                        let idx = row * w + pc * window + dc;
                        let v = plane[idx];
                        if first || v > best {
                            best = v;
                            best_idx = idx;
                            first = false;
                        }
                    }
                }
                out.push(best);
                indices.push(best_idx as u32);
            }
        }
    }
    let pooled = Tensor::new(vec![n, c, ph, pw], out)?;
    Ok((
        pooled,
        PoolingRecord {
            indices,
            window,
            input_shape: [n, c, h, w],
        },
    ))
}

/// Places each pooled value at its recorded argmax; every other cell is zero.
pub fn unpool_with_indices(pooled: &Tensor, record: &PoolingRecord) -> Result<Tensor> {
    let expected = record.pooled_shape();
    if pooled.shape() != expected {
        return Err(Error::contract(format!(
            "pooled map {:?} does not match record (expects {expected:?})",
            pooled.shape()
        )));
    }
    if record.indices.len() != pooled.len() {
        return Err(Error::contract("record index count differs from pooled cells"));
    }
    let [n, c, h, w] = record.input_shape;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let cells = expected[2] * expected[3];
    let out_data = out.data_mut();
    for (cell, (&v, &idx)) in pooled.data().iter().zip(&record.indices).enumerate() {
        let plane = cell / cells;
        out_data[plane * h * w + idx as usize] = v;
    }
    Ok(out)
}

/// Gradient of [`pool_with_indices`]: routes each pooled gradient to its
/// argmax.
pub(crate) fn pool_backward(dy: &Tensor, record: &PoolingRecord) -> Result<Tensor> {
    unpool_with_indices(dy, record)
}

/// Gradient of [`unpool_with_indices`]: gathers the gradient at each
/// recorded position.
pub(crate) fn unpool_backward(dy: &Tensor, record: &PoolingRecord) -> Result<Tensor> {
    let [n, c, h, w] = record.input_shape;
    if dy.shape() != [n, c, h, w] {
        return Err(Error::shape("unpool gradient shape mismatch"));
    }
    let pooled = record.pooled_shape();
    let cells = pooled[2] * pooled[3];
    let data = dy.data();
    let out: Vec<f64> = record
        .indices
        .iter()
        .enumerate()
        .map(|(cell, &idx)| data[(cell / cells) * h * w + idx as usize])
        .collect();
    Tensor::new(pooled.to_vec(), out)
}
