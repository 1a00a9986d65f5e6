//! Color-histogram consistency proxy for toy image sets.

use serde::{Deserialize, Serialize};

use crate::model::{ColorKind, ModelParams, ShapeKind};
use crate::setgen::{generate_set, grid_layout_for, image_seeds, Schedule, SetGenError, SetPrompts};
use crate::tensor::{Float, Rng, Tensor};

pub const HIST_BINS: usize = 4;

/// Joint RGB histogram with `HIST_BINS` bins per channel, normalised to sum 1.
/// Values are clamped to `[0, 1]`; 1.0 falls in the top bin.
pub fn color_histogram<F: Float>(img: &Tensor<F>) -> Vec<f64> {
    let d = img.data();
    let px = d.len() / 3;
    let mut h = vec![0.0; HIST_BINS.pow(3)];
    if px == 0 {
        return h;
    }
    let bin = |v: F| ((v.to_f64_lossy().clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
    for p in d.chunks_exact(3) {
        h[(bin(p[0]) * HIST_BINS + bin(p[1])) * HIST_BINS + bin(p[2])] += 1.0;
    }
    h.iter_mut().for_each(|v| *v /= px as f64);
    h
}

/// Total-variation distance, `½·Σ|a − b|`, in `[0, 1]`.
pub fn histogram_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean distance over all unordered image pairs. Zero for fewer than two.
pub fn set_color_distance<F: Float>(images: &[Tensor<F>]) -> f64 {
    let hs: Vec<Vec<f64>> = images.iter().map(color_histogram).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..hs.len() {
        for j in i + 1..hs.len() {
            total += histogram_distance(&hs[i], &hs[j]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Toy set with a random shape per image and one shared global color.
pub fn shared_color_prompts(seed: u64, n: usize) -> SetPrompts {
    let mut rng = Rng::new(seed);
    let color = ColorKind::ALL[rng.below(3)].token();
    let prompts = (0..n).map(|_| vec![ShapeKind::ALL[rng.below(3)].token()]).collect();
    SetPrompts { prompts, global: vec![color] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub divide_steps: usize,
    pub total_steps: usize,
    pub distances: Vec<f64>,
    pub median: f64,
    pub mean: f64,
}

/// Generates one shared-color set of `n` images per seed for each
/// `(divide, total)` ratio and reports the proxy distance.
pub fn ratio_sweep<F: Float>(
    params: &ModelParams<F>,
    ratios: &[(usize, usize)],
    seeds: &[u64],
    n: usize,
    guidance: f64,
) -> Result<Vec<SweepRow>, SetGenError> {
    let g = params.config().grid_side();
    let grid = grid_layout_for(n, g, g)?;
    ratios
        .iter()
        .map(|&(r, t)| {
            let schedule = Schedule::new(t, r, guidance)?;
            let mut distances = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let prompts = shared_color_prompts(seed, n);
                let out = generate_set(
                    params,
                    &prompts,
                    &image_seeds(seed, n),
                    &schedule,
                    &grid,
                    Default::default(),
                    Default::default(),
                )?;
                distances.push(set_color_distance(&out.conquered.images));
            }
            Ok(SweepRow {
                divide_steps: r,
                total_steps: t,
                median: median(&distances),
                mean: distances.iter().sum::<f64>() / distances.len().max(1) as f64,
                distances,
            })
        })
        .collect()
}

/// Parses `"2:20"` as `(2, 20)`.
pub fn parse_ratio(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.trim().split_once(':')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}
