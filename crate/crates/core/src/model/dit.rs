use std::sync::Arc;

use crate::setgen::{AttnMask, TokenLayout};
use crate::tensor::{Float, Tensor};

use super::graph::{Graph, Var};
use super::params::{LayerSlots, Slots};
use super::{GridPos, ModelError, ModelParams, TokenPos};

const LN_EPS: f64 = 1e-5;

/// `1 × dim` sinusoidal embedding of `1000·σ`: sines then cosines over
/// geometrically spaced frequencies.
pub fn timestep_embedding<F: Float>(sigma: f64, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let t = 1000.0 * sigma;
    let mut v = vec![F::zero(); dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = F::from_f64_lossy((t * freq).sin());
        v[half + k] = F::from_f64_lossy((t * freq).cos());
    }
    Tensor::new([1, dim], v).expect("dim > 0")
}

/// Row-major positions of a `side × side` token cell placed at `offset`.
pub fn grid_positions(side: usize, offset: (usize, usize)) -> Vec<GridPos> {
    (0..side * side)
        .map(|t| GridPos {
            row: offset.0 + t / side,
            col: offset.1 + t % side,
        })
        .collect()
}

/// Rows of the prompt embedding table for `ids`.
pub fn embed_prompt<F: Float>(params: &ModelParams<F>, ids: &[usize]) -> Result<Tensor<F>, ModelError> {
    let table = &params.tensors()[params.slots().embed];
    check_ids(ids, table.rows())?;
    let mut data = Vec::with_capacity(ids.len() * table.cols());
    for &i in ids {
        data.extend_from_slice(table.row(i));
    }
    Ok(Tensor::new([ids.len(), table.cols()], data)?)
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(i) => Err(ModelError::Vocabulary(format!("token id {i} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

/// Multi-head scaled dot-product attention on the tape:
/// `softmax(Q_h K_hᵀ / √d_k + M) V_h` per head, heads concatenated.
pub fn attention<F: Float>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<F>>,
    n_heads: usize,
) -> Result<Var, ModelError> {
    let d = g.value(q).cols();
    if n_heads == 0 || d % n_heads != 0 || g.value(k).cols() != d || g.value(v).cols() != d {
        return Err(ModelError::Shape(format!(
            "attention widths q={d} k={} v={} with {n_heads} heads",
            g.value(k).cols(),
            g.value(v).cols()
        )));
    }
    let dk = d / n_heads;
    let inv = F::from_f64_lossy(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dk..(h + 1) * dk;
        let qh = g.slice_cols(q, cols.clone())?;
        let kh = g.slice_cols(k, cols.clone())?;
        let vh = g.slice_cols(v, cols)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, inv);
        let p = g.softmax_masked(logits, mask)?;
        heads.push(g.matmul(p, vh)?);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    Ok(g.concat_cols(&heads)?)
}

pub(crate) struct ForwardInput<'a, F> {
    pub x: &'a Tensor<F>,
    /// Key-order text tokens `[p_1 … p_n, g]`.
    pub text: &'a [usize],
    pub layout: &'a TokenLayout,
    pub mask: &'a AttnMask,
    pub positions: &'a [GridPos],
    pub sigma: f64,
}

fn affine<F: Float>(g: &mut Graph<F>, x: Var, gamma: Var, beta: Var) -> Result<Var, ModelError> {
    let n = g.layer_norm(x, F::from_f64_lossy(LN_EPS));
    let s = g.mul_row(n, gamma)?;
    Ok(g.add_row(s, beta)?)
}

fn linear<F: Float>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

struct Tables<F> {
    cos: Arc<Vec<F>>,
    sin: Arc<Vec<F>>,
}

fn tables<F: Float>(params: &ModelParams<F>, pos: &[TokenPos]) -> Tables<F> {
    let (c, s) = params.config().posenc().tables(pos);
    Tables {
        cos: Arc::new(c.into_iter().map(F::from_f64_lossy).collect()),
        sin: Arc::new(s.into_iter().map(F::from_f64_lossy).collect()),
    }
}

fn validate<F: Float>(params: &ModelParams<F>, inp: &ForwardInput<'_, F>) -> Result<(), ModelError> {
    let c = params.config();
    let l = inp.layout;
    if inp.x.rank() != 2 || inp.x.rows() != l.visual_len() || inp.x.cols() != c.patch_dim() {
        return Err(ModelError::Shape(format!(
            "visual tokens {:?} do not match layout with {} visual tokens of width {}",
            inp.x.shape(),
            l.visual_len(),
            c.patch_dim()
        )));
    }
    if inp.text.len() != l.text_len() {
        return Err(ModelError::Shape(format!(
            "{} text tokens for a layout with {} text slots",
            inp.text.len(),
            l.text_len()
        )));
    }
    if inp.mask.rows() != l.visual_len() || inp.mask.cols() != l.key_len() {
        return Err(ModelError::Shape(format!(
            "mask {}x{} does not match layout {}x{}",
            inp.mask.rows(),
            inp.mask.cols(),
            l.visual_len(),
            l.key_len()
        )));
    }
    if inp.positions.len() != l.visual_len() {
        return Err(ModelError::Shape(format!(
            "{} positions for {} visual tokens",
            inp.positions.len(),
            l.visual_len()
        )));
    }
    if !(0.0..=1.0).contains(&inp.sigma) {
        return Err(ModelError::Shape(format!("timestep {} outside [0, 1]", inp.sigma)));
    }
    check_ids(inp.text, c.prompt_vocab_size)
}

/// Mask for the joint variant: rows `[text; visual]`, keys `[text; visual]`.
/// A prompt row sees its own prompt plus whatever its image's visual rows may
/// see among the global and visual keys; global rows see the global prompt
/// and every visual key open to some visual row.
fn joint_mask<F: Float>(layout: &TokenLayout, mask: &AttnMask) -> Tensor<F> {
    let tl = layout.text_len();
    let kl = layout.key_len();
    let rows = tl + layout.visual_len();
    let mut data = vec![F::neg_infinity(); rows * kl];
    let text_after_prompts = layout.global_span().start;
    for k in 0..layout.n() {
        let vis_row = layout.visual_span(k).start;
        for i in layout.prompt_span(k) {
            for j in layout.prompt_span(k) {
                data[i * kl + j] = F::zero();
            }
            for j in text_after_prompts..kl {
                if mask.is_open(vis_row, j) {
                    data[i * kl + j] = F::zero();
                }
            }
        }
    }
    for i in layout.global_span() {
        for j in layout.global_span() {
            data[i * kl + j] = F::zero();
        }
        for j in tl..kl {
            if (0..mask.rows()).any(|r| mask.is_open(r, j)) {
                data[i * kl + j] = F::zero();
            }
        }
    }
    for r in 0..mask.rows() {
        for j in 0..kl {
            if mask.is_open(r, j) {
                data[(tl + r) * kl + j] = F::zero();
            }
        }
    }
    Tensor::new([rows, kl], data).expect("non-empty")
}

/// Builds the forward pass on `g` given leaf variables `w` for every
/// parameter (in [`ModelParams::tensors`] order). Returns the velocity node.
pub(crate) fn forward_graph<F: Float>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    w: &[Var],
    inp: &ForwardInput<'_, F>,
) -> Result<Var, ModelError> {
    validate(params, inp)?;
    let c = params.config();
    let s: Slots = params.slots();
    let layout = inp.layout;
    let tl = layout.text_len();
    let joint = c.joint_text_queries;

    let vis_pos: Vec<TokenPos> = inp.positions.iter().map(|&p| TokenPos::Grid(p)).collect();
    let text_pos: Vec<TokenPos> = (0..tl)
        .map(|j| TokenPos::Text(layout.text_position(j).expect("text index in a span")))
        .collect();
    let vis_t = tables(params, &vis_pos);
    let text_t = tables(params, &text_pos);
    let all_t = if joint {
        let mut all = text_pos.clone();
        all.extend_from_slice(&vis_pos);
        Some(tables(params, &all))
    } else {
        None
    };
    let mask = if joint {
        joint_mask::<F>(layout, inp.mask)
    } else {
        inp.mask.to_tensor::<F>()
    };

    let x = g.leaf(inp.x.clone());
    let mut h = linear(g, x, w[s.patch_w], w[s.patch_b])?;
    let temb = g.leaf(timestep_embedding(inp.sigma, c.d_model));
    let t1 = linear(g, temb, w[s.time_w1], w[s.time_b1])?;
    let t1 = g.gelu(t1);
    let t2 = linear(g, t1, w[s.time_w2], w[s.time_b2])?;
    h = g.add_row(h, t2)?;
    let mut t = g.gather(w[s.embed], inp.text)?;

    let dk = c.d_k();
    for ls in &s.layers {
        let LayerSlots {
            ln1_g,
            ln1_b,
            lnt_g,
            lnt_b,
            wq,
            wk_text,
            wk_image,
            wv_text,
            wv_image,
            wo,
            bo,
            ln2_g,
            ln2_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        } = *ls;
        let hn = affine(g, h, w[ln1_g], w[ln1_b])?;
        let tn = affine(g, t, w[lnt_g], w[lnt_b])?;

        let q = if let Some(all) = &all_t {
            let qt = g.matmul(tn, w[wq])?;
            let qv = g.matmul(hn, w[wq])?;
            let qa = g.concat_rows(&[qt, qv])?;
            g.rope(qa, all.cos.clone(), all.sin.clone(), dk)?
        } else {
            let qv = g.matmul(hn, w[wq])?;
            g.rope(qv, vis_t.cos.clone(), vis_t.sin.clone(), dk)?
        };
        let kt = g.matmul(tn, w[wk_text])?;
        let kt = g.rope(kt, text_t.cos.clone(), text_t.sin.clone(), dk)?;
        let kv = g.matmul(hn, w[wk_image])?;
        let kv = g.rope(kv, vis_t.cos.clone(), vis_t.sin.clone(), dk)?;
        let k = g.concat_rows(&[kt, kv])?;
        let vt = g.matmul(tn, w[wv_text])?;
        let vv = g.matmul(hn, w[wv_image])?;
        let v = g.concat_rows(&[vt, vv])?;

        let a = attention(g, q, k, v, Some(&mask), c.n_heads)?;
        let o = linear(g, a, w[wo], w[bo])?;
        if joint {
            let ot = g.slice_rows(o, 0..tl)?;
            let ov = g.slice_rows(o, tl..tl + layout.visual_len())?;
            t = g.add(t, ot)?;
            h = g.add(h, ov)?;
        } else {
            h = g.add(h, o)?;
        }

        let mlp = |g: &mut Graph<F>, z: Var| -> Result<Var, ModelError> {
            let zn = affine(g, z, w[ln2_g], w[ln2_b])?;
            let m = linear(g, zn, w[mlp_w1], w[mlp_b1])?;
            let m = g.gelu(m);
            let m = linear(g, m, w[mlp_w2], w[mlp_b2])?;
            Ok(g.add(z, m)?)
        };
        h = mlp(g, h)?;
        if joint {
            t = mlp(g, t)?;
        }
    }

    let hf = affine(g, h, w[s.lnf_g], w[s.lnf_b])?;
    linear(g, hf, w[s.out_w], w[s.out_b])
}

pub(crate) fn param_leaves<F: Float>(g: &mut Graph<F>, params: &ModelParams<F>) -> Vec<Var> {
    params.tensors().iter().map(|t| g.leaf(t.clone())).collect()
}

/// Predicted velocity for every visual token.
///
/// `x` is `N × patch_dim`, `text_tokens` lists the prompt tokens in key order
/// `[p_1 … p_n, g]`, and `positions` gives the grid coordinate of each
/// visual token. `sigma` is the noise level in `[0, 1]`.
pub fn forward_velocity<F: Float>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    text_tokens: &[usize],
    layout: &TokenLayout,
    mask: &AttnMask,
    positions: &[GridPos],
    sigma: f64,
) -> Result<Tensor<F>, ModelError> {
    let mut g = Graph::new();
    let w = param_leaves(&mut g, params);
    let out = forward_graph(
        &mut g,
        params,
        &w,
        &ForwardInput {
            x,
            text: text_tokens,
            layout,
            mask,
            positions,
            sigma,
        },
    )?;
    let v = g.value(out).clone();
    if !v.all_finite() {
        return Err(ModelError::Shape("forward produced non-finite velocity".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::setgen::{build_mask, build_set_mask, build_token_layout, MaskPolicy};
    use crate::tensor::Rng;

    fn setup(n: usize, seed: u64) -> (ModelParams<f64>, TokenLayout, Tensor<f64>, Vec<usize>, Vec<GridPos>) {
        let c = ModelConfig::default();
        let p = ModelParams::<f64>::init(&c, &mut Rng::new(seed)).unwrap();
        let per = c.tokens_per_image();
        let layout = build_token_layout(&vec![2; n], 1, &vec![per; n]).unwrap();
        let x = Tensor::randn(&mut Rng::new(seed + 1), [n * per, c.patch_dim()]).unwrap();
        let mut text = Vec::new();
        for k in 0..n {
            text.extend([1 + k % 3, 4 + (k + 1) % 3]);
        }
        text.push(5);
        let mut pos = Vec::new();
        for k in 0..n {
            pos.extend(grid_positions(c.grid_side(), (0, k * c.grid_side())));
        }
        (p, layout, x, text, pos)
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding::<f64>(0.0, 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding::<f64>(0.5, 4);
        assert!((e.data()[0] - 500f64.sin()).abs() < 1e-12);
        assert!((e.data()[1] - (500.0 * 0.01f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn output_shape_and_determinism() {
        let (p, l, x, text, pos) = setup(2, 1);
        let m = build_set_mask(&l);
        let a = forward_velocity(&p, &x, &text, &l, &m, &pos, 0.7).unwrap();
        let b = forward_velocity(&p, &x, &text, &l, &m, &pos, 0.7).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
    }

    #[test]
    fn own_prompt_routing_isolates_images() {
        // visual rows see only their own prompt and own image
        let (p, l, x, mut text, pos) = setup(3, 2);
        let m = build_mask(
            &l,
            MaskPolicy {
                block_global: true,
                block_cross_image: true,
            },
        );
        let base = forward_velocity(&p, &x, &text, &l, &m, &pos, 0.4).unwrap();
        text[2] = 3; // p_2
        text[3] = 6;
        text[6] = 4; // g
        let moved = forward_velocity(&p, &x, &text, &l, &m, &pos, 0.4).unwrap();
        let per = 16;
        for r in 0..per {
            assert_eq!(base.row(r), moved.row(r));
            assert_eq!(base.row(2 * per + r), moved.row(2 * per + r));
        }
        assert_ne!(base.row(per), moved.row(per));
    }

    #[test]
    fn attention_with_zero_logits_averages_values() {
        // zero Q/K: every open key gets equal weight
        let mut rng = Rng::new(9);
        let v = Tensor::<f64>::randn(&mut rng, [5, 4]).unwrap();
        let mut g = Graph::new();
        let q = g.leaf(Tensor::zeros([3, 4]).unwrap());
        let k = g.leaf(Tensor::zeros([5, 4]).unwrap());
        let vv = g.leaf(v.clone());
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::new(
            [3, 5],
            vec![
                0.0, 0.0, ninf, ninf, ninf, //
                ninf, 0.0, 0.0, 0.0, ninf, //
                0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let out = attention(&mut g, q, k, vv, Some(&mask), 2).unwrap();
        let out = g.value(out);
        let open = [vec![0, 1], vec![1, 2, 3], vec![0, 1, 2, 3, 4]];
        for (r, keys) in open.iter().enumerate() {
            for c in 0..4 {
                let mean = keys.iter().map(|&j| v.at(j, c)).sum::<f64>() / keys.len() as f64;
                assert!((out.at(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let mut rng = Rng::new(11);
        let (m, n, d, heads) = (4, 6, 8, 2);
        let q = Tensor::<f64>::randn(&mut rng, [m, d]).unwrap();
        let k = Tensor::<f64>::randn(&mut rng, [n, d]).unwrap();
        let v = Tensor::<f64>::randn(&mut rng, [n, d]).unwrap();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
        let out = attention(&mut g, qv, kv, vv, None, heads).unwrap();
        let out = g.value(out).clone();
        let dk = d / heads;
        for h in 0..heads {
            for i in 0..m {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dk).map(|c| q.at(i, h * dk + c) * k.at(j, h * dk + c)).sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..dk {
                    let want: f64 = (0..n).map(|j| logits[j].exp() / z * v.at(j, h * dk + c)).sum();
                    assert!((out.at(i, h * dk + c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn argmax_survives_head_width_change_with_rescaled_logits() {
        // doubling d_k and scaling Q by sqrt(2) keeps the 1/sqrt(d_k) logits
        // proportional, so the per-row argmax is unchanged
        let mut rng = Rng::new(21);
        let q = Tensor::<f64>::randn(&mut rng, [5, 4]).unwrap();
        let k = Tensor::<f64>::randn(&mut rng, [7, 4]).unwrap();
        let widen = |t: &Tensor<f64>| Tensor::concat(&[t, t], 1).unwrap();
        let probs = |q: Tensor<f64>, k: Tensor<f64>| {
            let d = q.cols() as f64;
            q.matmul(&k.transpose().unwrap())
                .unwrap()
                .scale(1.0 / d.sqrt())
                .softmax_rows(None)
                .unwrap()
        };
        let argmax = |p: &Tensor<f64>, r: usize| {
            (0..p.cols())
                .max_by(|&a, &b| p.at(r, a).partial_cmp(&p.at(r, b)).unwrap())
                .unwrap()
        };
        let small = probs(q.clone(), k.clone());
        let wide = probs(widen(&q).scale(2f64.sqrt().recip()), widen(&k));
        for r in 0..5 {
            assert_eq!(argmax(&small, r), argmax(&wide, r));
        }
    }

    #[test]
    fn joint_text_queries_variant_runs() {
        let mut c = ModelConfig::default();
        c.joint_text_queries = true;
        let p = ModelParams::<f64>::init(&c, &mut Rng::new(5)).unwrap();
        let l = build_token_layout(&[2, 2], 1, &[16, 16]).unwrap();
        let x = Tensor::randn(&mut Rng::new(6), [32, 48]).unwrap();
        let mut pos = grid_positions(4, (0, 0));
        pos.extend(grid_positions(4, (0, 4)));
        let out = forward_velocity(&p, &x, &[1, 4, 2, 4, 5], &l, &build_set_mask(&l), &pos, 0.3).unwrap();
        assert_eq!(out.shape(), &[32, 48]);
        assert!(out.all_finite());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let (p, l, x, text, pos) = setup(2, 3);
        let m = build_set_mask(&l);
        assert!(forward_velocity(&p, &x, &text[..3], &l, &m, &pos, 0.5).is_err());
        assert!(forward_velocity(&p, &x, &text, &l, &m, &pos[..5], 0.5).is_err());
        let bad = x.slice(0, 0..16).unwrap();
        assert!(forward_velocity(&p, &bad, &text, &l, &m, &pos, 0.5).is_err());
        let mut ids = text.clone();
        ids[0] = 99;
        assert!(forward_velocity(&p, &x, &ids, &l, &m, &pos, 0.5).is_err());
    }
}
