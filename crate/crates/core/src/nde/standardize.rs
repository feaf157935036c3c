use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Per-column affine map `z = (v - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations of `rows`. Columns with a spread
    /// below `1e-12` of the largest one keep unit scale.
    pub fn fit(rows: ArrayView2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let shift: Vec<f64> = rows.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let mut scale: Vec<f64> = rows
            .axis_iter(Axis(1))
            .zip(&shift)
            .map(|(col, m)| (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        let max = scale.iter().cloned().fold(0.0, f64::max);
        for s in &mut scale {
            if !(*s > 1e-12 * max && *s > 0.0) {
                *s = 1.0;
            }
        }
        Self { shift, scale }
    }

    /// One mean and standard deviation per block of `blocks` equal contiguous
    /// column blocks (per channel of a time series). Unlike [`fit`](Self::fit)
    /// this commutes with cyclic shifts inside a block.
    pub fn fit_pooled(rows: ArrayView2<f64>, blocks: usize) -> Self {
        let dim = rows.ncols();
        let blocks = blocks.max(1);
        if dim % blocks != 0 {
            return Self::fit(rows);
        }
        let width = dim / blocks;
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for b in 0..blocks {
            let cols = b * width..(b + 1) * width;
            let block = rows.slice(ndarray::s![.., cols.clone()]);
            let n = block.len().max(1) as f64;
            let m = block.sum() / n;
            let sd = (block.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            for j in cols {
                shift[j] = m;
                scale[j] = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
            }
        }
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert_value(&self, dim: usize, z: f64) -> f64 {
        z * self.scale[dim] + self.shift[dim]
    }

    /// `sum log scale`: the log-Jacobian of the inverse map.
    pub fn log_det(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}
