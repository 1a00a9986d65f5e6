use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use imageset::bench::{corpus_stats, load_corpus};
use imageset::clients::{ChatClient, FixtureClient, HttpChatClient, UreqTransport, ENV_ENDPOINT, ENV_MODEL};
use imageset::evalkit::{
    self, format_table, load_image, proxy, AestheticScorer, AlignmentSource, EndpointScorer, EvalConfig,
    FixedScores, Scoring,
};
use imageset::model::{load_checkpoint, save_checkpoint, shape_corpus, train as train_model, ModelConfig, TrainConfig};
use imageset::recaption::{Instruction, RecaptionResult, Recaptioner};
use imageset::setgen::{
    build_mask, build_token_layout, generate_set, grid_layout_for, image_seeds, latent_checksum, GridLayout,
    MaskPolicy, Schedule, SetPrompts,
};
use imageset::tensor::Rng;

use crate::config::resolve;
use crate::error::{io, CliError};
use crate::{output, EvalArgs, GenerateArgs, MaskDumpArgs, StatsArgs, SweepArgs, TrainArgs};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

fn print_json(v: &impl Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn file_sha256(p: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(p).map_err(io(p.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSettings {
    out: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    steps: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    sha256: String,
    steps: usize,
    first_loss: f64,
    final_loss: f64,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let s: TrainSettings = resolve(args.config.as_deref(), args)?;
    let mut tc = s.train;
    tc.steps = s.steps.unwrap_or(tc.steps);
    tc.lr = s.lr.unwrap_or(tc.lr);
    tc.batch_size = s.batch_size.unwrap_or(tc.batch_size);
    s.model.validate()?;
    let corpus = shape_corpus::<f32>(s.model.image_side)?;
    let report = train_model(&s.model, &corpus, &tc, &mut Rng::new(s.seed))?;
    save_checkpoint(&report.params, &s.out)?;
    print_json(&TrainSummary {
        sha256: file_sha256(&s.out)?,
        checkpoint: s.out,
        steps: report.losses.len(),
        first_loss: report.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
    })
}

fn default_steps() -> usize {
    20
}
fn default_divide() -> usize {
    2
}
fn default_guidance() -> f64 {
    3.5
}
fn default_grid() -> String {
    "auto".into()
}
fn default_recaption() -> String {
    "fallback".into()
}
fn default_scale() -> u32 {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSettings {
    checkpoint: PathBuf,
    instruction: Option<String>,
    task_id: Option<String>,
    corpus: Option<PathBuf>,
    n: Option<usize>,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_divide")]
    divide: usize,
    #[serde(default = "default_guidance")]
    guidance: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_grid")]
    grid: String,
    #[serde(default = "default_recaption")]
    recaption: String,
    llm_model: Option<String>,
    #[serde(default)]
    offline: bool,
    #[serde(default)]
    ppm: bool,
    #[serde(default = "default_scale")]
    scale: u32,
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
pub struct GridInfo {
    pub rows: usize,
    pub cols: usize,
    pub windows: Option<Vec<Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub instruction: String,
    pub task_id: Option<String>,
    pub n: usize,
    pub recaption: RecaptionResult,
    pub prompt_tokens: Vec<Vec<usize>>,
    pub global_tokens: Vec<usize>,
    pub schedule: Schedule,
    pub seed: u64,
    pub image_seeds: Vec<u64>,
    pub grid: GridInfo,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub images: Vec<String>,
    pub composite: String,
    pub divided_checksums: Vec<String>,
    pub latent_checksums: Vec<String>,
}

fn pick_grid(kind: &str, n: usize, cell: usize) -> Result<GridLayout, CliError> {
    match kind {
        "auto" => Ok(grid_layout_for(n, cell, cell)?),
        "1xn" => Ok(GridLayout::one_by(n, cell, cell)),
        "2x2" if n == 4 => Ok(GridLayout::row_major(2, 2, cell, cell)),
        "2x2" => Err(CliError::validation(format!("a 2x2 grid holds 4 images, not {n}"))),
        other => Err(CliError::validation(format!("unknown grid {other:?}; use auto, 1xn or 2x2"))),
    }
}

fn chat_client(offline: bool, endpoint: Option<&str>) -> Result<HttpChatClient<UreqTransport>, CliError> {
    if offline {
        return Err(CliError::validation("--offline forbids calls to a chat endpoint"));
    }
    match endpoint {
        Some(e) => Ok(HttpChatClient::new(e, std::env::var(imageset::clients::ENV_API_KEY).ok(), UreqTransport)),
        None => HttpChatClient::from_env().map_err(|_| {
            CliError::validation(format!("no chat endpoint: pass --endpoint or set {ENV_ENDPOINT}"))
        }),
    }
}

fn model_name(flag: Option<&String>) -> Result<String, CliError> {
    flag.cloned()
        .or_else(|| std::env::var(ENV_MODEL).ok())
        .ok_or_else(|| CliError::validation(format!("no model name: pass a model flag or set {ENV_MODEL}")))
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let s: GenerateSettings = resolve(args.config.as_deref(), args)?;
    let (text, n, task_id) = match (&s.instruction, &s.task_id) {
        (Some(t), None) => (t.clone(), s.n, None),
        (None, Some(id)) => {
            let corpus = s
                .corpus
                .as_ref()
                .ok_or_else(|| CliError::validation("--task-id needs --corpus"))?;
            let task = load_corpus(corpus)?
                .into_iter()
                .find(|t| &t.id == id)
                .ok_or_else(|| CliError::validation(format!("no task {id:?} in {}", corpus.display())))?;
            (task.instruction, Some(task.set_size), Some(task.id))
        }
        _ => return Err(CliError::validation("give exactly one of --instruction or --task-id")),
    };
    let schedule = Schedule::new(s.steps, s.divide, s.guidance)?;
    if s.scale == 0 {
        return Err(CliError::validation("--scale must be at least 1"));
    }
    let instruction = Instruction::new(text.clone(), n)?;
    let recap = match s.recaption.as_str() {
        "fallback" => Recaptioner::Fallback.run(&instruction)?,
        "client" => {
            let client = chat_client(s.offline, None)?;
            Recaptioner::client(&client, model_name(s.llm_model.as_ref())?).run(&instruction)?
        }
        other => return Err(CliError::validation(format!("unknown recaption mode {other:?}"))),
    };
    let (prompt_tokens, global_tokens) = recap.toy_tokens();
    let prompts = SetPrompts::new(prompt_tokens.clone(), global_tokens.clone())?;

    let params = load_checkpoint::<f32>(&s.checkpoint)?;
    let cell = params.config().grid_side();
    let nn = prompts.n();
    let grid = pick_grid(&s.grid, nn, cell)?;
    let seeds = image_seeds(s.seed, nn);
    let out = generate_set(&params, &prompts, &seeds, &schedule, &grid, Default::default(), Default::default())?;

    std::fs::create_dir_all(&s.out).map_err(io(s.out.display()))?;
    let mut rgbs = Vec::with_capacity(nn);
    let mut names = Vec::with_capacity(nn);
    for (k, img) in out.conquered.images.iter().enumerate() {
        let im = output::rgb(img, s.scale)?;
        let stem = format!("image_{k}");
        output::write(&im, &s.out, &stem, s.ppm)?;
        names.push(format!("{stem}.png"));
        rgbs.push(im);
    }
    output::write(&output::composite(&rgbs, &grid), &s.out, "grid", s.ppm)?;

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        instruction: text,
        task_id,
        n: nn,
        recaption: recap,
        prompt_tokens,
        global_tokens,
        schedule,
        seed: s.seed,
        image_seeds: seeds,
        grid: GridInfo {
            rows: grid.rows,
            cols: grid.cols,
            windows: grid.windows.as_ref().map(|w| w.windows.clone()),
        },
        checkpoint_sha256: file_sha256(&s.checkpoint)?,
        checkpoint: s.checkpoint,
        images: names,
        composite: "grid.png".into(),
        divided_checksums: out.divided.iter().map(latent_checksum).collect(),
        latent_checksums: out.conquered.latents.iter().map(latent_checksum).collect(),
    };
    let path = s.out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io(path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn expand(v: &[usize], n: usize, what: &str) -> Result<Vec<usize>, CliError> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        l if l == n => Ok(v.to_vec()),
        l => Err(CliError::validation(format!("{l} {what} values for {n} images"))),
    }
}

pub fn mask_dump(a: &MaskDumpArgs) -> Result<(), CliError> {
    let prompts = expand(&a.prompt_lens, a.n, "prompt length")?;
    let visual = expand(&a.visual_lens, a.n, "visual length")?;
    let layout = build_token_layout(&prompts, a.global_len, &visual)?;
    let mask = build_mask(
        &layout,
        MaskPolicy {
            block_global: a.block_global,
            block_cross_image: a.block_cross_image,
        },
    );
    print!("{}", mask.dump(&layout));
    Ok(())
}

fn default_in_flight() -> usize {
    evalkit::DEFAULT_IN_FLIGHT
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    images: Option<PathBuf>,
    instruction: Option<String>,
    manifest: Option<PathBuf>,
    endpoint: Option<String>,
    fixtures: Option<PathBuf>,
    aesthetics_scores: Option<Vec<f64>>,
    aesthetics_endpoint: Option<String>,
    llm_model: Option<String>,
    vlm_model: Option<String>,
    #[serde(default)]
    alignment_source: AlignmentSource,
    #[serde(default = "default_in_flight")]
    max_in_flight: usize,
    #[serde(default)]
    offline: bool,
    out: Option<PathBuf>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png") && p.file_stem().is_some_and(|s| s != "grid"))
        .collect();
    v.sort();
    Ok(v)
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let s: EvalSettings = resolve(args.config.as_deref(), args)?;
    let manifest: Option<Manifest> = match &s.manifest {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p).map_err(io(p.display()))?)?),
        None => None,
    };
    let dir = s
        .images
        .clone()
        .or_else(|| s.manifest.as_ref().and_then(|m| m.parent().map(Path::to_path_buf)))
        .ok_or_else(|| CliError::validation("--images or --manifest is required"))?;
    let files = match &manifest {
        Some(m) => m.images.iter().map(|f| dir.join(f)).collect(),
        None => image_files(&dir)?,
    };
    let images = files.iter().map(|p| load_image(p)).collect::<Result<Vec<_>, _>>()?;
    let instruction = s
        .instruction
        .clone()
        .or_else(|| manifest.as_ref().map(|m| m.instruction.clone()))
        .ok_or_else(|| CliError::validation("--instruction or --manifest is required"))?;
    let prompts = manifest.as_ref().map(|m| m.recaption.prompts.clone());

    let client: Box<dyn ChatClient> = match &s.fixtures {
        Some(dir) => Box::new(FixtureClient::load(dir)?),
        None => Box::new(chat_client(s.offline, s.endpoint.as_deref())?),
    };
    let offline_name = |f: Option<&String>| -> Result<String, CliError> {
        if s.fixtures.is_some() {
            Ok(f.cloned().unwrap_or_else(|| "fixture".into()))
        } else {
            model_name(f)
        }
    };
    let llm_model = offline_name(s.llm_model.as_ref())?;
    let vlm_model = offline_name(s.vlm_model.as_ref().or(s.llm_model.as_ref()))?;
    let scorer: Box<dyn AestheticScorer> = match (&s.aesthetics_scores, &s.aesthetics_endpoint) {
        (Some(v), _) => Box::new(FixedScores(v.clone())),
        (None, Some(_)) if s.offline => {
            return Err(CliError::validation("--offline forbids the aesthetics endpoint"))
        }
        (None, Some(url)) => Box::new(EndpointScorer {
            endpoint: url.clone(),
            timeout: std::time::Duration::from_secs(60),
            transport: UreqTransport,
        }),
        (None, None) => return Err(CliError::validation("give --aesthetics-scores or --aesthetics-endpoint")),
    };
    let mut scoring = Scoring::new(client.as_ref(), vlm_model);
    scoring.max_in_flight = s.max_in_flight.max(1);
    let cfg = EvalConfig {
        llm: client.as_ref(),
        llm_model,
        scoring,
        aesthetics: scorer.as_ref(),
        alignment_source: s.alignment_source,
    };
    let outcome = evalkit::evaluate_set(&images, &instruction, prompts.as_deref(), &cfg)?;
    let json = outcome.report.to_json();
    match &s.out {
        Some(p) => std::fs::write(p, json + "\n").map_err(io(p.display()))?,
        None => println!("{json}"),
    }
    print!("{}", format_table(&[("this set", &outcome.report)]));
    Ok(())
}

fn default_ratios() -> Vec<String> {
    ["1:20", "2:20", "4:20", "6:20"].map(String::from).to_vec()
}
fn default_seeds() -> usize {
    20
}
fn default_seed_base() -> u64 {
    1000
}
fn default_n() -> usize {
    4
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSettings {
    checkpoint: PathBuf,
    #[serde(default = "default_ratios")]
    ratios: Vec<String>,
    #[serde(default = "default_seeds")]
    seeds: usize,
    #[serde(default = "default_seed_base")]
    seed_base: u64,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_guidance")]
    guidance: f64,
    #[serde(default)]
    offline: bool,
    out: Option<PathBuf>,
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let s: SweepSettings = resolve(args.config.as_deref(), args)?;
    let _ = s.offline;
    let ratios = s
        .ratios
        .iter()
        .map(|r| proxy::parse_ratio(r).ok_or_else(|| CliError::validation(format!("bad ratio {r:?}; use r:t"))))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds: Vec<u64> = (0..s.seeds as u64).map(|i| s.seed_base + i).collect();
    let params = load_checkpoint::<f32>(&s.checkpoint)?;
    let rows = proxy::ratio_sweep(&params, &ratios, &seeds, s.n, s.guidance)?;
    for r in &rows {
        eprintln!(
            "{}:{}  median {:.4}  mean {:.4}",
            r.divide_steps, r.total_steps, r.median, r.mean
        );
    }
    match &s.out {
        Some(p) => std::fs::write(p, serde_json::to_string_pretty(&rows)? + "\n").map_err(io(p.display()))?,
        None => print_json(&rows)?,
    }
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<(), CliError> {
    print_json(&corpus_stats(&load_corpus(&a.corpus)?))
}
