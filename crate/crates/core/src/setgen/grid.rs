use crate::model::GridPos;
use crate::tensor::{Float, Tensor};

use super::SetGenError;

pub const WINDOW_SIZE: usize = 4;
pub const WINDOW_STRIDE: usize = 2;

/// Overlapping windows of image indices for sets too large for one grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub size: usize,
    pub stride: usize,
    pub windows: Vec<Vec<usize>>,
}

/// Placement of images in a grid of cells. Cell sizes are in tokens.
///
/// When `windows` is set, the grid describes the arrangement of one window
/// and the plan lists which images each window holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    /// `(grid_row, grid_col)` of each slot, in image order.
    pub placements: Vec<(usize, usize)>,
    pub windows: Option<WindowPlan>,
}

impl GridLayout {
    pub fn row_major(rows: usize, cols: usize, cell_h: usize, cell_w: usize) -> Self {
        let placements = (0..rows * cols).map(|i| (i / cols, i % cols)).collect();
        Self {
            rows,
            cols,
            cell_h,
            cell_w,
            placements,
            windows: None,
        }
    }

    pub fn one_by(n: usize, cell_h: usize, cell_w: usize) -> Self {
        Self::row_major(1, n, cell_h, cell_w)
    }

    pub fn capacity(&self) -> usize {
        self.rows * self.cols
    }

    /// Token offset of slot `k`'s cell.
    pub fn offset(&self, k: usize) -> (usize, usize) {
        let (r, c) = self.placements[k];
        (r * self.cell_h, c * self.cell_w)
    }

    /// Same grid with slots placed at the given cells (used to move images
    /// together with their positions).
    pub fn with_placements(mut self, placements: Vec<(usize, usize)>) -> Self {
        self.placements = placements;
        self
    }
}

/// Window starts `0, stride, 2·stride, …` with the final start clamped to
/// `n - size` so the last window is full.
pub fn sliding_windows(n: usize, size: usize, stride: usize) -> Vec<Vec<usize>> {
    if n <= size {
        return vec![(0..n).collect()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let s = start.min(n - size);
        out.push((s..s + size).collect());
        if s + size >= n {
            break;
        }
        start += stride;
    }
    out
}

/// 1×n for n ∈ {1, 2, 3, 5}, 2×2 for n = 4, and a 2×2 sliding-window plan
/// (size 4, stride 2) beyond five images.
pub fn grid_layout_for(n: usize, cell_h: usize, cell_w: usize) -> Result<GridLayout, SetGenError> {
    match n {
        0 => Err(SetGenError::Layout("grid needs at least one image".into())),
        4 => Ok(GridLayout::row_major(2, 2, cell_h, cell_w)),
        1..=5 => Ok(GridLayout::one_by(n, cell_h, cell_w)),
        _ => {
            let mut g = GridLayout::row_major(2, 2, cell_h, cell_w);
            g.windows = Some(WindowPlan {
                size: WINDOW_SIZE,
                stride: WINDOW_STRIDE,
                windows: sliding_windows(n, WINDOW_SIZE, WINDOW_STRIDE),
            });
            Ok(g)
        }
    }
}

/// Concatenates per-image token matrices in slot order and returns each
/// token's grid position. With `local` set, tokens keep in-cell positions.
pub fn concat_grid<F: Float>(
    latents: &[Tensor<F>],
    grid: &GridLayout,
    local: bool,
) -> Result<(Tensor<F>, Vec<GridPos>), SetGenError> {
    let first = latents
        .first()
        .ok_or_else(|| SetGenError::Layout("no latents to concatenate".into()))?;
    if latents.len() > grid.capacity() || latents.len() > grid.placements.len() {
        return Err(SetGenError::Layout(format!(
            "{} images do not fit a {}x{} grid",
            latents.len(),
            grid.rows,
            grid.cols
        )));
    }
    let tokens = grid.cell_h * grid.cell_w;
    for l in latents {
        if l.shape() != first.shape() || l.rows() != tokens {
            return Err(SetGenError::Layout(format!(
                "latent shape {:?} does not match a {}x{} token cell",
                l.shape(),
                grid.cell_h,
                grid.cell_w
            )));
        }
    }
    let parts: Vec<&Tensor<F>> = latents.iter().collect();
    let x = Tensor::concat(&parts, 0)?;
    let mut coords = Vec::with_capacity(x.rows());
    for k in 0..latents.len() {
        let (r0, c0) = if local { (0, 0) } else { grid.offset(k) };
        for t in 0..tokens {
            coords.push(GridPos {
                row: r0 + t / grid.cell_w,
                col: c0 + t % grid.cell_w,
            });
        }
    }
    Ok((x, coords))
}

/// Inverse of [`concat_grid`] for `n` equally sized images.
pub fn split_grid<F: Float>(x: &Tensor<F>, n: usize) -> Result<Vec<Tensor<F>>, SetGenError> {
    if n == 0 || x.rows() % n != 0 {
        return Err(SetGenError::Layout(format!(
            "cannot split {} tokens into {n} images",
            x.rows()
        )));
    }
    let per = x.rows() / n;
    (0..n)
        .map(|k| Ok(x.slice(0, k * per..(k + 1) * per)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn grid_choice_by_set_size() {
        for n in [1, 2, 3, 5] {
            let g = grid_layout_for(n, 4, 4).unwrap();
            assert_eq!((g.rows, g.cols, g.windows.is_none()), (1, n, true));
        }
        let g = grid_layout_for(4, 4, 4).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        assert!(grid_layout_for(0, 4, 4).is_err());
    }

    #[test]
    fn window_enumeration() {
        let w = |n| grid_layout_for(n, 4, 4).unwrap().windows.unwrap().windows;
        assert_eq!(w(6), vec![vec![0, 1, 2, 3], vec![2, 3, 4, 5]]);
        assert_eq!(
            w(7),
            vec![vec![0, 1, 2, 3], vec![2, 3, 4, 5], vec![3, 4, 5, 6]]
        );
    }

    #[test]
    fn cell_offsets() {
        let g = GridLayout::row_major(2, 2, 8, 8);
        let lat: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::zeros([64, 3]).unwrap()).collect();
        let (_, coords) = concat_grid(&lat, &g, false).unwrap();
        // slot 2 sits at cell (1, 0); its token (0, 0) is the first of the slot
        assert_eq!(coords[2 * 64], GridPos { row: 8, col: 0 });
        assert_eq!(coords[3 * 64 + 9], GridPos { row: 9, col: 9 });
        let (_, local) = concat_grid(&lat, &g, true).unwrap();
        assert_eq!(local[2 * 64], GridPos { row: 0, col: 0 });
    }

    #[test]
    fn concat_order_follows_input_order() {
        let g = GridLayout::one_by(3, 2, 2);
        let lat: Vec<Tensor<f32>> = (0..3)
            .map(|k| Tensor::full([4, 2], k as f32).unwrap())
            .collect();
        let (x, _) = concat_grid(&lat, &g, false).unwrap();
        for r in 0..12 {
            assert!(x.row(r).iter().all(|&v| v == (r / 4) as f32));
        }
    }

    #[test]
    fn split_inverts_concat() {
        let mut rng = Rng::new(1);
        let g = GridLayout::row_major(2, 2, 3, 3);
        let lat: Vec<Tensor<f32>> = (0..4)
            .map(|_| Tensor::randn(&mut rng, [9, 5]).unwrap())
            .collect();
        let (x, _) = concat_grid(&lat, &g, false).unwrap();
        assert_eq!(split_grid(&x, 4).unwrap(), lat);
    }

    #[test]
    fn mismatched_latents_rejected() {
        let g = GridLayout::one_by(2, 2, 2);
        let lat = vec![
            Tensor::<f32>::zeros([4, 3]).unwrap(),
            Tensor::zeros([4, 2]).unwrap(),
        ];
        assert!(concat_grid(&lat, &g, false).is_err());
        let three: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::zeros([4, 3]).unwrap()).collect();
        assert!(concat_grid(&three, &g, false).is_err());
    }
}
