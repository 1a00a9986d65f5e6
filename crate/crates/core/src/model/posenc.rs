use serde::{Deserialize, Serialize};

/// Integer grid coordinate of a visual token, in token units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenPos {
    /// Text token at a 1-D index inside its own prompt span.
    Text(usize),
    Grid(GridPos),
}

/// Rotary position encoding over three axes.
///
/// Each head's `head_dim` columns are split into rotation pairs. The first
/// `text_pairs` pairs form the text band (driven by the 1-D text index), the
/// next `row_pairs` follow the grid row and the remaining `col_pairs` follow
/// the grid column. Visual tokens sit at text index 0 and text tokens at grid
/// position (0, 0). The rotation of a token depends only on its coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEnc2D {
    pub head_dim: usize,
    pub text_pairs: usize,
    pub row_pairs: usize,
    pub col_pairs: usize,
    pub base: f64,
}

impl PosEnc2D {
    pub fn new(head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0 && head_dim >= 6, "head_dim must be even and >= 6");
        let pairs = head_dim / 2;
        let text_pairs = (pairs / 4).max(1);
        let rest = pairs - text_pairs;
        let row_pairs = rest / 2;
        let col_pairs = rest - row_pairs;
        Self {
            head_dim,
            text_pairs,
            row_pairs,
            col_pairs,
            base,
        }
    }

    fn band(out: &mut Vec<f64>, pairs: usize, pos: usize, base: f64) {
        for k in 0..pairs {
            let freq = base.powf(-(k as f64) / pairs as f64);
            out.push(pos as f64 * freq);
        }
    }

    /// Rotation angle of every pair for a token at `pos`.
    pub fn angles(&self, pos: TokenPos) -> Vec<f64> {
        let (t, r, c) = match pos {
            TokenPos::Text(j) => (j, 0, 0),
            TokenPos::Grid(g) => (0, g.row, g.col),
        };
        let mut out = Vec::with_capacity(self.head_dim / 2);
        Self::band(&mut out, self.text_pairs, t, self.base);
        Self::band(&mut out, self.row_pairs, r, self.base);
        Self::band(&mut out, self.col_pairs, c, self.base);
        out
    }

    /// Applies the rotation for `pos` to a single head vector.
    pub fn encode(&self, v: &[f64], pos: TokenPos) -> Vec<f64> {
        assert_eq!(v.len(), self.head_dim);
        let mut out = v.to_vec();
        for (p, a) in self.angles(pos).into_iter().enumerate() {
            let (s, c) = a.sin_cos();
            out[2 * p] = v[2 * p] * c - v[2 * p + 1] * s;
            out[2 * p + 1] = v[2 * p] * s + v[2 * p + 1] * c;
        }
        out
    }

    /// Flat `(cos, sin)` tables, `positions.len() × head_dim/2` each.
    pub fn tables(&self, positions: &[TokenPos]) -> (Vec<f64>, Vec<f64>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for a in self.angles(p) {
                let (s, c) = a.sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        (cos, sin)
    }
}
