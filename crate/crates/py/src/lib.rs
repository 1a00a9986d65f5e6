//! Python bindings. Structured results cross the boundary as JSON and come
//! out as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use imageset::bench::{corpus_stats as stats, load_corpus};
use imageset::clients::{yes_probability as yes_prob, ChatResponse, TokenLogprob};
use imageset::evalkit::{holistic as holistic_score, Alignment, Consistency};
use imageset::model::{load_checkpoint, save_checkpoint, shape_corpus, train as train_model, ModelConfig, TrainConfig};
use imageset::recaption::{Instruction, Recaptioner};
use imageset::setgen::{
    build_mask, build_token_layout, generate_set, grid_layout_for, image_seeds, latent_checksum,
    sliding_windows as windows, MaskPolicy, Schedule, SetPrompts, WINDOW_SIZE, WINDOW_STRIDE,
};
use imageset::tensor::Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Weighted overall score from the seven dimension scores.
#[pyfunction]
fn holistic(
    aesthetics: f64,
    entity: f64,
    attribute: f64,
    relation: f64,
    identity: f64,
    style: f64,
    logic: f64,
) -> PyResult<f64> {
    holistic_score(
        aesthetics,
        &Alignment { entity, attribute, relation },
        &Consistency { identity, style, logic },
    )
    .map_err(value_err)
}

/// P(Yes) from `(token, logprob)` candidates for the first answer token.
#[pyfunction]
fn yes_probability(candidates: Vec<(String, f64)>) -> PyResult<f64> {
    let r = ChatResponse {
        text: String::new(),
        top_logprobs: Some(
            candidates
                .into_iter()
                .map(|(token, logprob)| TokenLogprob { token, logprob })
                .collect(),
        ),
    };
    yes_prob(&r).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (prompt_lens, global_len, visual_lens, block_global=false, block_cross_image=false))]
fn mask_dump(
    prompt_lens: Vec<usize>,
    global_len: usize,
    visual_lens: Vec<usize>,
    block_global: bool,
    block_cross_image: bool,
) -> PyResult<String> {
    let layout = build_token_layout(&prompt_lens, global_len, &visual_lens).map_err(value_err)?;
    let mask = build_mask(&layout, MaskPolicy { block_global, block_cross_image });
    Ok(mask.dump(&layout))
}

#[pyfunction]
fn sliding_windows(n: usize) -> Vec<Vec<usize>> {
    windows(n, WINDOW_SIZE, WINDOW_STRIDE)
}

/// Rule-based recaptioning; returns entities, consistency, prompts and global.
#[pyfunction]
#[pyo3(signature = (instruction, n=None))]
fn recaption<'py>(py: Python<'py>, instruction: String, n: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let ins = Instruction::new(instruction, n).map_err(value_err)?;
    let r = Recaptioner::Fallback.run(&ins).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
fn corpus_stats<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let tasks = load_corpus(path).map_err(value_err)?;
    to_py(py, &stats(&tasks))
}

/// Trains the default toy model on the shape corpus, writes a checkpoint
/// and returns the per-step losses.
#[pyfunction]
#[pyo3(signature = (out, steps=None, seed=0))]
fn train(py: Python<'_>, out: PathBuf, steps: Option<usize>, seed: u64) -> PyResult<Vec<f64>> {
    py.detach(|| {
        let config = ModelConfig::default();
        let mut tc = TrainConfig::default();
        tc.steps = steps.unwrap_or(tc.steps);
        let corpus = shape_corpus::<f32>(config.image_side).map_err(value_err)?;
        let r = train_model(&config, &corpus, &tc, &mut Rng::new(seed)).map_err(runtime_err)?;
        save_checkpoint(&r.params, &out).map_err(runtime_err)?;
        Ok(r.losses)
    })
}

#[derive(Serialize)]
struct Generated {
    prompts: Vec<String>,
    side: usize,
    /// One `side × side × 3` row-major array per image, values in [0, 1].
    images: Vec<Vec<f32>>,
    latent_checksums: Vec<String>,
}

/// Recaptions `instruction` with the rule-based parser and samples a set.
#[pyfunction]
#[pyo3(signature = (checkpoint, instruction, n=None, steps=20, divide=2, guidance=3.5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    instruction: String,
    n: Option<usize>,
    steps: usize,
    divide: usize,
    guidance: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| -> PyResult<Generated> {
        let schedule = Schedule::new(steps, divide, guidance).map_err(value_err)?;
        let recap = Recaptioner::Fallback
            .run(&Instruction::new(instruction, n).map_err(value_err)?)
            .map_err(value_err)?;
        let (tokens, global) = recap.toy_tokens();
        let prompts = SetPrompts::new(tokens, global).map_err(value_err)?;
        let params = load_checkpoint::<f32>(&checkpoint).map_err(value_err)?;
        let side = params.config().grid_side();
        let grid = grid_layout_for(prompts.n(), side, side).map_err(value_err)?;
        let seeds = image_seeds(seed, prompts.n());
        let set = generate_set(&params, &prompts, &seeds, &schedule, &grid, Default::default(), Default::default())
            .map_err(runtime_err)?;
        Ok(Generated {
            prompts: recap.prompts,
            side: params.config().image_side,
            images: set.conquered.images.iter().map(|t| t.data().to_vec()).collect(),
            latent_checksums: set.conquered.latents.iter().map(latent_checksum).collect(),
        })
    })?;
    to_py(py, &out)
}

#[pymodule]
fn pyimageset(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(holistic, m)?)?;
    m.add_function(wrap_pyfunction!(yes_probability, m)?)?;
    m.add_function(wrap_pyfunction!(mask_dump, m)?)?;
    m.add_function(wrap_pyfunction!(sliding_windows, m)?)?;
    m.add_function(wrap_pyfunction!(recaption, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
