use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::setgen::{build_set_mask, build_token_layout};
use crate::tensor::{Float, Rng, Tensor};

use super::dit::{forward_graph, grid_positions, param_leaves, ForwardInput};
use super::graph::Graph;
use super::{patchify, ModelConfig, ModelError, ModelParams, ShapeSample, NULL_TOKEN};

/// Optimiser and data settings. Adam with bias correction; each step
/// averages gradients over `batch_size` independently drawn examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability of training on the null prompt only.
    pub p_null: f64,
    /// Probability of keeping only the shape token.
    pub p_shape_only: f64,
    /// Probability of keeping only the color token.
    pub p_color_only: f64,
    /// Images are placed at a random cell offset in `0..=max_cell_offset`
    /// cells along each axis so attention sees many absolute positions.
    pub max_cell_offset: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            p_null: 0.10,
            p_shape_only: 0.15,
            p_color_only: 0.15,
            max_cell_offset: 4,
            log_every: 100,
        }
    }
}

/// One conditioned single-image training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample<F> {
    /// Clean image as visual tokens.
    pub x0: Tensor<F>,
    pub prompt: Vec<usize>,
    pub global: Vec<usize>,
    /// Token offset of the image cell.
    pub offset: (usize, usize),
}

/// A point on the straight noise–data path and its target velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw<F> {
    pub sigma: f64,
    pub eps: Tensor<F>,
    /// `(1 − σ)·x₀ + σ·ε`
    pub x_sigma: Tensor<F>,
    /// `ε − x₀`
    pub target: Tensor<F>,
}

impl<F: Float> FlowDraw<F> {
    pub fn at(x0: &Tensor<F>, sigma: f64, eps: Tensor<F>) -> Result<Self, ModelError> {
        let s = F::from_f64_lossy(sigma);
        let x_sigma = x0.scale(F::one() - s).add(&eps.scale(s))?;
        let target = eps.sub(x0)?;
        Ok(Self {
            sigma,
            eps,
            x_sigma,
            target,
        })
    }
}

/// Draws `σ ~ U(0, 1)` then `ε ~ N(0, I)` from `rng`.
pub fn draw_flow<F: Float>(x0: &Tensor<F>, rng: &mut Rng) -> Result<FlowDraw<F>, ModelError> {
    let sigma = rng.uniform();
    let eps = Tensor::randn(rng, x0.shape().to_vec())?;
    FlowDraw::at(x0, sigma, eps)
}

fn example_from_sample<F: Float>(
    config: &ModelConfig,
    sample: &ShapeSample<F>,
) -> Result<TrainExample<F>, ModelError> {
    Ok(TrainExample {
        x0: patchify(&sample.image, config.patch_side)?,
        prompt: sample.tokens().to_vec(),
        global: vec![NULL_TOKEN],
        offset: (0, 0),
    })
}

/// Loss and, if requested, the gradient of every parameter.
pub(crate) fn example_loss<F: Float>(
    params: &ModelParams<F>,
    ex: &TrainExample<F>,
    draw: &FlowDraw<F>,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Tensor<F>>>), ModelError> {
    let c = params.config();
    let per = c.tokens_per_image();
    let layout = build_token_layout(&[ex.prompt.len()], ex.global.len(), &[per])
        .map_err(|e| ModelError::Shape(e.to_string()))?;
    let mask = build_set_mask(&layout);
    let positions = grid_positions(c.grid_side(), ex.offset);
    let mut text = ex.prompt.clone();
    text.extend_from_slice(&ex.global);
    let mut g = Graph::new();
    let w = param_leaves(&mut g, params);
    let v = forward_graph(
        &mut g,
        params,
        &w,
        &ForwardInput {
            x: &draw.x_sigma,
            text: &text,
            layout: &layout,
            mask: &mask,
            positions: &positions,
            sigma: draw.sigma,
        },
    )?;
    let loss = g.mse(v, &draw.target)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss);
    let out = w
        .iter()
        .zip(params.tensors())
        .map(|(&var, t)| {
            grads[var_index(var)]
                .take()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()).expect("non-empty"))
        })
        .collect();
    Ok((value, Some(out)))
}

fn var_index(v: super::graph::Var) -> usize {
    v.index()
}

/// Rectified-flow loss of one sample conditioned on its full prompt
/// (`[shape, color]`, null global prompt). Draws `σ` then `ε` from `rng`.
pub fn flow_matching_loss<F: Float>(
    params: &ModelParams<F>,
    sample: &ShapeSample<F>,
    rng: &mut Rng,
) -> Result<f64, ModelError> {
    let ex = example_from_sample(params.config(), sample)?;
    let draw = draw_flow(&ex.x0, rng)?;
    Ok(example_loss(params, &ex, &draw, false)?.0)
}

/// Applies conditioning dropout and a random placement to a sample.
fn make_example<F: Float>(
    config: &ModelConfig,
    tc: &TrainConfig,
    sample: &ShapeSample<F>,
    rng: &mut Rng,
) -> Result<TrainExample<F>, ModelError> {
    let [shape, color] = sample.tokens();
    let u = rng.uniform();
    let kept: Vec<usize> = if u < tc.p_null {
        vec![]
    } else if u < tc.p_null + tc.p_shape_only {
        vec![shape]
    } else if u < tc.p_null + tc.p_shape_only + tc.p_color_only {
        vec![color]
    } else {
        vec![shape, color]
    };
    let (mut prompt, mut global) = (Vec::new(), Vec::new());
    for t in kept {
        if rng.below(2) == 0 {
            prompt.push(t);
        } else {
            global.push(t);
        }
    }
    if prompt.is_empty() {
        prompt.push(NULL_TOKEN);
    }
    if global.is_empty() {
        global.push(NULL_TOKEN);
    }
    let side = config.grid_side();
    let offset = (
        rng.below(tc.max_cell_offset + 1) * side,
        rng.below(tc.max_cell_offset + 1) * side,
    );
    Ok(TrainExample {
        x0: patchify(&sample.image, config.patch_side)?,
        prompt,
        global,
        offset,
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport<F> {
    pub params: ModelParams<F>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

struct Adam<F> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: i32,
}

impl<F: Float> Adam<F> {
    fn new(params: &ModelParams<F>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()).expect("non-empty"))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams<F>, grads: &[Tensor<F>], tc: &TrainConfig) {
        self.t += 1;
        let b1 = tc.beta1;
        let b2 = tc.beta2;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let mut pd = p.data().to_vec();
            let mut md = m.data().to_vec();
            let mut vd = v.data().to_vec();
            for i in 0..pd.len() {
                let gi = g.data()[i].to_f64_lossy();
                let mi = b1 * md[i].to_f64_lossy() + (1.0 - b1) * gi;
                let vi = b2 * vd[i].to_f64_lossy() + (1.0 - b2) * gi * gi;
                md[i] = F::from_f64_lossy(mi);
                vd[i] = F::from_f64_lossy(vi);
                let upd = tc.lr * (mi / c1) / ((vi / c2).sqrt() + tc.eps);
                pd[i] = F::from_f64_lossy(pd[i].to_f64_lossy() - upd);
            }
            *p = Tensor::new(p.shape().to_vec(), pd).expect("same shape");
            *m = Tensor::new(m.shape().to_vec(), md).expect("same shape");
            *v = Tensor::new(v.shape().to_vec(), vd).expect("same shape");
        }
    }
}

/// Trains a fresh model with Adam on the flow-matching objective.
///
/// Examples for a step are drawn sequentially from `rng`; their gradients
/// are computed in parallel and summed in batch order, so results do not
/// depend on thread count.
pub fn train<F: Float>(
    config: &ModelConfig,
    corpus: &[ShapeSample<F>],
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport<F>, ModelError> {
    let params = ModelParams::init(config, rng)?;
    train_from(params, corpus, tc, rng)
}

/// Continues training from existing parameters.
pub fn train_from<F: Float>(
    mut params: ModelParams<F>,
    corpus: &[ShapeSample<F>],
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport<F>, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Config("training corpus is empty".into()));
    }
    if tc.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let config = params.config().clone();
    let mut adam = Adam::new(&params);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let sample = &corpus[rng.below(corpus.len())];
            let ex = make_example(&config, tc, sample, rng)?;
            let draw = draw_flow(&ex.x0, rng)?;
            batch.push((ex, draw));
        }
        let results: Vec<_> = batch
            .par_iter()
            .map(|(ex, draw)| example_loss(&params, ex, draw, true))
            .collect::<Result<_, _>>()?;
        let inv = F::from_f64_lossy(1.0 / tc.batch_size as f64);
        let mut total = 0.0;
        let mut sum: Option<Vec<Tensor<F>>> = None;
        for (loss, grads) in results {
            total += loss;
            let grads = grads.expect("requested");
            sum = Some(match sum {
                None => grads,
                Some(acc) => acc
                    .iter()
                    .zip(&grads)
                    .map(|(a, b)| a.add(b).expect("same shapes"))
                    .collect(),
            });
        }
        let mean = total / tc.batch_size as f64;
        if !mean.is_finite() {
            return Err(ModelError::NonFinite { step, loss: mean });
        }
        losses.push(mean);
        let grads: Vec<Tensor<F>> = sum.expect("batch non-empty").iter().map(|g| g.scale(inv)).collect();
        adam.step(&mut params, &grads, tc);
        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            log::info!("step {} loss {:.5}", step + 1, mean);
        }
    }
    if !params.all_finite() {
        return Err(ModelError::NonFinite {
            step: tc.steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainReport { params, losses })
}

/// One analytic-versus-numeric gradient comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares tape gradients with central differences of step `h` at
/// `probes` parameters chosen uniformly over all scalars.
///
/// The example (prompt split, placement, σ and ε) is drawn once from `rng`
/// and held fixed. Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    params: &ModelParams<f64>,
    sample: &ShapeSample<f64>,
    probes: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<Vec<GradProbe>, ModelError> {
    let tc = TrainConfig {
        p_null: 0.0,
        p_shape_only: 0.0,
        p_color_only: 0.0,
        max_cell_offset: 2,
        ..TrainConfig::default()
    };
    let ex = make_example(params.config(), &tc, sample, rng)?;
    let draw = draw_flow(&ex.x0, rng)?;
    let (_, grads) = example_loss(params, &ex, &draw, true)?;
    let grads = grads.expect("requested");
    let total = params.num_scalars();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut flat = rng.below(total);
        let mut ti = 0;
        while flat >= params.tensors()[ti].len() {
            flat -= params.tensors()[ti].len();
            ti += 1;
        }
        let name = params.names()[ti].clone();
        let base = &params.tensors()[ti];
        let eval = |delta: f64| -> Result<f64, ModelError> {
            let mut d = base.data().to_vec();
            d[flat] += delta;
            let p = params.with_tensor(&name, Tensor::new(base.shape().to_vec(), d)?)?;
            Ok(example_loss(&p, &ex, &draw, false)?.0)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let analytic = grads[ti].data()[flat];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        out.push(GradProbe {
            name,
            index: flat,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    Ok(out)
}
