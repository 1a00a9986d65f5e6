use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};

use super::layout::TokenLayout;

/// Which key groups a visual query may see.
///
/// The default policy is the set mask: own prompt, global prompt and every
/// image's visual tokens. The blocking switches exist for verification runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub block_global: bool,
    pub block_cross_image: bool,
}

/// Additive attention mask of shape `N × (N_p + N_g + N)`; every entry is
/// either `0` (open) or `-inf` (blocked).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    open: Vec<bool>,
}

impl AttnMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.open[i * self.cols + j]
    }

    pub fn open_in_row(&self, i: usize) -> usize {
        self.open[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|&&o| o)
            .count()
    }

    /// Dense additive form: `0` where open, IEEE `-inf` where blocked.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        let data = self
            .open
            .iter()
            .map(|&o| if o { F::zero() } else { F::neg_infinity() })
            .collect();
        Tensor::new([self.rows, self.cols], data).expect("mask is non-empty")
    }

    /// Plain-text dump: span header lines starting with `#`, then one line
    /// per query row with `0` for open and `-` for blocked entries.
    pub fn dump(&self, layout: &TokenLayout) -> String {
        let mut out = String::new();
        writeln!(out, "# set-mask v1").unwrap();
        writeln!(out, "# n={} rows={} cols={}", layout.n(), self.rows, self.cols).unwrap();
        for (k, s) in layout.prompt_spans().iter().enumerate() {
            writeln!(out, "# prompt {k} [{},{})", s.start, s.end).unwrap();
        }
        let g = layout.global_span();
        writeln!(out, "# global [{},{})", g.start, g.end).unwrap();
        for k in 0..layout.n() {
            let s = layout.visual_key_span(k);
            writeln!(out, "# visual {k} [{},{})", s.start, s.end).unwrap();
        }
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(if self.is_open(i, j) { '0' } else { '-' });
            }
            out.push('\n');
        }
        out
    }
}

/// The set mask: a query of image `k` sees `p_k`, `g` and all visual tokens.
pub fn build_set_mask(layout: &TokenLayout) -> AttnMask {
    build_mask(layout, MaskPolicy::default())
}

pub fn build_mask(layout: &TokenLayout, policy: MaskPolicy) -> AttnMask {
    let rows = layout.visual_len();
    let cols = layout.key_len();
    let mut open = vec![false; rows * cols];
    for k in 0..layout.n() {
        for i in layout.visual_span(k) {
            let row = &mut open[i * cols..(i + 1) * cols];
            for j in layout.prompt_span(k) {
                row[j] = true;
            }
            if !policy.block_global {
                for j in layout.global_span() {
                    row[j] = true;
                }
            }
            for other in 0..layout.n() {
                if policy.block_cross_image && other != k {
                    continue;
                }
                for j in layout.visual_key_span(other) {
                    row[j] = true;
                }
            }
        }
    }
    AttnMask { rows, cols, open }
}
