use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{forward_velocity, grid_positions, unpatchify, ModelConfig, ModelParams, NULL_TOKEN};
use crate::tensor::{Float, Rng, Tensor};

use super::{
    build_mask, build_token_layout, cfg_combine, concat_grid, euler_step, split_grid, GridLayout,
    MaskPolicy, Schedule, SetGenError,
};

/// Token ids for every image prompt and the global prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetPrompts {
    pub prompts: Vec<Vec<usize>>,
    pub global: Vec<usize>,
}

impl SetPrompts {
    pub fn new(prompts: Vec<Vec<usize>>, global: Vec<usize>) -> Result<Self, SetGenError> {
        let s = Self { prompts, global };
        s.validate()?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.prompts.len()
    }

    fn validate(&self) -> Result<(), SetGenError> {
        if self.prompts.is_empty() {
            return Err(SetGenError::Layout("at least one image prompt is required".into()));
        }
        if self.prompts.iter().any(|p| p.is_empty()) || self.global.is_empty() {
            return Err(SetGenError::Layout(
                "prompts must hold at least one token (use the null token for none)".into(),
            ));
        }
        Ok(())
    }

    /// Same set with images reordered: `perm[k]` is the source of slot `k`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            prompts: perm.iter().map(|&i| self.prompts[i].clone()).collect(),
            global: self.global.clone(),
        }
    }
}

/// Per-image seeds: `Rng::derive_seed(master, k)`.
pub fn image_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| Rng::derive_seed(master, k)).collect()
}

/// Initial noise latent (`tokens_per_image × patch_dim`) for one image.
pub fn initial_noise<F: Float>(config: &ModelConfig, seed: u64) -> Result<Tensor<F>, SetGenError> {
    Ok(Tensor::randn(
        &mut Rng::new(seed),
        [config.tokens_per_image(), config.patch_dim()],
    )?)
}

/// Hex SHA-256 over the little-endian bytes of a latent's values.
pub fn latent_checksum<F: Float>(t: &Tensor<F>) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        h.update(v.to_f64_lossy().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Conditioning<'a> {
    prompts: Vec<&'a [usize]>,
    global: &'a [usize],
}

const NULL: [usize; 1] = [NULL_TOKEN];

/// Guided velocity for a group of images denoised jointly.
fn guided_velocity<F: Float>(
    params: &ModelParams<F>,
    xs: &[&Tensor<F>],
    cond: &Conditioning<'_>,
    grid: &GridLayout,
    policy: MaskPolicy,
    local: bool,
    sigma: f64,
    guidance: f64,
) -> Result<Vec<Tensor<F>>, SetGenError> {
    let per = params.config().tokens_per_image();
    let owned: Vec<Tensor<F>> = xs.iter().map(|&x| x.clone()).collect();
    let (x, positions) = concat_grid(&owned, grid, local)?;
    let n = xs.len();
    let run = |prompts: &[&[usize]], global: &[usize]| -> Result<Tensor<F>, SetGenError> {
        let lens: Vec<usize> = prompts.iter().map(|p| p.len()).collect();
        let layout = build_token_layout(&lens, global.len(), &vec![per; n])?;
        let mask = build_mask(&layout, policy);
        let mut text: Vec<usize> = prompts.iter().flat_map(|p| p.iter().copied()).collect();
        text.extend_from_slice(global);
        Ok(forward_velocity(params, &x, &text, &layout, &mask, &positions, sigma)?)
    };
    let v_c = run(&cond.prompts, cond.global)?;
    let nulls: Vec<&[usize]> = vec![&NULL[..]; n];
    let v_u = run(&nulls, &NULL)?;
    let v = cfg_combine(&v_u, &v_c, guidance)?;
    split_grid(&v, n)
}

/// Reference single-image sampler: Euler steps `steps` of the schedule with
/// guidance, using a one-image layout `[prompt, global, v]` at grid origin.
pub fn sample_single<F: Float>(
    params: &ModelParams<F>,
    prompt: &[usize],
    global: &[usize],
    x: Tensor<F>,
    schedule: &Schedule,
    steps: Range<usize>,
    policy: MaskPolicy,
) -> Result<Tensor<F>, SetGenError> {
    schedule.validate()?;
    if steps.end > schedule.total_steps {
        return Err(SetGenError::Schedule(format!(
            "step range {steps:?} exceeds {} steps",
            schedule.total_steps
        )));
    }
    if prompt.is_empty() || global.is_empty() {
        return Err(SetGenError::Layout("prompt spans must be non-empty".into()));
    }
    let c = params.config();
    let grid = GridLayout::one_by(1, c.grid_side(), c.grid_side());
    let sig = schedule.sigmas();
    let cond = Conditioning {
        prompts: vec![prompt],
        global,
    };
    let mut x = x;
    for i in steps {
        let v = guided_velocity(params, &[&x], &cond, &grid, policy, false, sig[i], schedule.guidance_scale)?;
        x = euler_step(&x, &v[0], sig[i], sig[i + 1])?;
    }
    debug_assert_eq!(grid_positions(c.grid_side(), (0, 0)).len(), c.tokens_per_image());
    Ok(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivideOptions {
    /// Condition the divide steps on the global prompt as well.
    pub include_global: bool,
}

/// First `divide_steps` of the schedule for every image on its own,
/// conditioned on `p_i` and a null global prompt. Images are independent
/// and run in parallel.
pub fn divide_phase<F: Float>(
    params: &ModelParams<F>,
    prompts: &SetPrompts,
    seeds: &[u64],
    schedule: &Schedule,
    opts: DivideOptions,
) -> Result<Vec<Tensor<F>>, SetGenError> {
    prompts.validate()?;
    schedule.validate()?;
    if seeds.len() != prompts.n() {
        return Err(SetGenError::Layout(format!(
            "{} seeds for {} images",
            seeds.len(),
            prompts.n()
        )));
    }
    let global: &[usize] = if opts.include_global { &prompts.global } else { &NULL };
    (0..prompts.n())
        .into_par_iter()
        .map(|k| {
            let x = initial_noise(params.config(), seeds[k])?;
            sample_single(
                params,
                &prompts.prompts[k],
                global,
                x,
                schedule,
                0..schedule.divide_steps,
                MaskPolicy::default(),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConquerOptions {
    pub policy: MaskPolicy,
    /// Keep in-cell positions instead of re-basing tokens to grid positions.
    pub local_positions: bool,
}

/// Bookkeeping for one sliding window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub images: Vec<usize>,
    pub updated: Vec<usize>,
    pub frozen: Vec<usize>,
    pub frozen_checksums_before: Vec<String>,
    pub frozen_checksums_after: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ConquerOutput<F> {
    /// Final latents as visual tokens.
    pub latents: Vec<Tensor<F>>,
    /// Final images, `side × side × 3`, clamped to `[0, 1]`.
    pub images: Vec<Tensor<F>>,
    pub windows: Vec<WindowTrace>,
}

/// Converts final latents to images clamped to `[0, 1]`.
pub fn latents_to_images<F: Float>(
    config: &ModelConfig,
    latents: &[Tensor<F>],
) -> Result<Vec<Tensor<F>>, SetGenError> {
    latents
        .iter()
        .map(|l| {
            let img = unpatchify(l, config.image_side, config.patch_side)?;
            Ok(img.map(|v| v.max(F::zero()).min(F::one())))
        })
        .collect()
}

/// Remaining `total − divide` steps, denoising all images jointly in a grid
/// under the set mask.
///
/// With a sliding-window plan, windows run in order. Images already
/// finalised by an earlier window are frozen: at each step they contribute
/// keys and values from their recorded trajectory at that step, and they
/// are never updated.
pub fn conquer_phase<F: Float>(
    params: &ModelParams<F>,
    latents: Vec<Tensor<F>>,
    prompts: &SetPrompts,
    grid: &GridLayout,
    schedule: &Schedule,
    opts: ConquerOptions,
) -> Result<ConquerOutput<F>, SetGenError> {
    prompts.validate()?;
    schedule.validate()?;
    let n = prompts.n();
    if latents.len() != n {
        return Err(SetGenError::Layout(format!("{} latents for {n} images", latents.len())));
    }
    let c = params.config();
    if grid.cell_h * grid.cell_w != c.tokens_per_image() {
        return Err(SetGenError::Layout(format!(
            "grid cells of {}x{} tokens do not hold {} tokens",
            grid.cell_h,
            grid.cell_w,
            c.tokens_per_image()
        )));
    }
    let windows: Vec<Vec<usize>> = match &grid.windows {
        Some(plan) => plan.windows.clone(),
        None => {
            if n > grid.capacity() {
                return Err(SetGenError::Layout(format!(
                    "{n} images do not fit a {}x{} grid",
                    grid.rows, grid.cols
                )));
            }
            vec![(0..n).collect()]
        }
    };
    for w in &windows {
        if w.is_empty() || w.len() > grid.capacity() || w.iter().any(|&k| k >= n) {
            return Err(SetGenError::Layout(format!("invalid window {w:?} for {n} images")));
        }
    }
    let sig = schedule.sigmas();
    let steps = schedule.divide_steps..schedule.total_steps;
    // trajectory[k][j]: latent of image k before conquer step divide + j
    let mut trajectory: Vec<Option<Vec<Tensor<F>>>> = vec![None; n];
    let mut current = latents;
    let mut traces = Vec::with_capacity(windows.len());

    for win in &windows {
        let frozen: Vec<usize> = win.iter().copied().filter(|&k| trajectory[k].is_some()).collect();
        let updated: Vec<usize> = win.iter().copied().filter(|&k| trajectory[k].is_none()).collect();
        let before: Vec<String> = frozen.iter().map(|&k| latent_checksum(&current[k])).collect();
        if updated.is_empty() {
            traces.push(WindowTrace {
                images: win.clone(),
                updated,
                frozen,
                frozen_checksums_after: before.clone(),
                frozen_checksums_before: before,
            });
            continue;
        }
        let wgrid = grid.clone().with_placements(grid.placements[..win.len()].to_vec());
        let cond = Conditioning {
            prompts: win.iter().map(|&k| prompts.prompts[k].as_slice()).collect(),
            global: &prompts.global,
        };
        let mut hist: Vec<Vec<Tensor<F>>> = vec![Vec::with_capacity(steps.len() + 1); n];
        for (j, i) in steps.clone().enumerate() {
            let xs: Vec<&Tensor<F>> = win
                .iter()
                .map(|&k| match &trajectory[k] {
                    Some(tr) => &tr[j],
                    None => &current[k],
                })
                .collect();
            let v = guided_velocity(
                params,
                &xs,
                &cond,
                &wgrid,
                opts.policy,
                opts.local_positions,
                sig[i],
                schedule.guidance_scale,
            )?;
            for (slot, &k) in win.iter().enumerate() {
                if trajectory[k].is_none() {
                    hist[k].push(current[k].clone());
                    current[k] = euler_step(&current[k], &v[slot], sig[i], sig[i + 1])?;
                }
            }
        }
        for &k in &updated {
            let mut h = std::mem::take(&mut hist[k]);
            h.push(current[k].clone());
            trajectory[k] = Some(h);
        }
        let after: Vec<String> = frozen.iter().map(|&k| latent_checksum(&current[k])).collect();
        if before != after {
            return Err(SetGenError::Invariant(format!(
                "frozen images {frozen:?} changed inside window {win:?}"
            )));
        }
        traces.push(WindowTrace {
            images: win.clone(),
            updated,
            frozen,
            frozen_checksums_before: before,
            frozen_checksums_after: after,
        });
    }
    let images = latents_to_images(c, &current)?;
    Ok(ConquerOutput {
        latents: current,
        images,
        windows: traces,
    })
}

#[derive(Clone, Debug)]
pub struct SetOutput<F> {
    pub seeds: Vec<u64>,
    pub divided: Vec<Tensor<F>>,
    pub conquered: ConquerOutput<F>,
}

/// Divide then conquer with the given per-image seeds.
pub fn generate_set<F: Float>(
    params: &ModelParams<F>,
    prompts: &SetPrompts,
    seeds: &[u64],
    schedule: &Schedule,
    grid: &GridLayout,
    divide: DivideOptions,
    conquer: ConquerOptions,
) -> Result<SetOutput<F>, SetGenError> {
    let divided = divide_phase(params, prompts, seeds, schedule, divide)?;
    let conquered = conquer_phase(params, divided.clone(), prompts, grid, schedule, conquer)?;
    Ok(SetOutput {
        seeds: seeds.to_vec(),
        divided,
        conquered,
    })
}
