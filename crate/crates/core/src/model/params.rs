use crate::tensor::{Float, Rng, Tensor};

use super::{ModelConfig, ModelError};

/// Index of each tensor inside [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub(crate) struct LayerSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub lnt_g: usize,
    pub lnt_b: usize,
    pub wq: usize,
    pub wk_text: usize,
    pub wk_image: usize,
    pub wv_text: usize,
    pub wv_image: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Slots {
    pub embed: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with std `gain / sqrt(fan_in)`, fan-in being the first dim.
    Scaled(f64),
}

pub(crate) struct Spec {
    pub name: String,
    pub shape: [usize; 2],
    pub init: Init,
}

impl Slots {
    pub fn build(c: &ModelConfig) -> (Slots, Vec<Spec>) {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: [usize; 2], init: Init| {
            specs.push(Spec { name, shape, init });
            specs.len() - 1
        };
        let d = c.d_model;
        let h = d * c.mlp_ratio;
        let embed = push("embed".into(), [c.prompt_vocab_size, d], Init::Scaled(1.0));
        let patch_w = push("patch_w".into(), [c.patch_dim(), d], Init::Scaled(1.0));
        let patch_b = push("patch_b".into(), [1, d], Init::Zeros);
        let time_w1 = push("time_w1".into(), [d, d], Init::Scaled(1.0));
        let time_b1 = push("time_b1".into(), [1, d], Init::Zeros);
        let time_w2 = push("time_w2".into(), [d, d], Init::Scaled(1.0));
        let time_b2 = push("time_b2".into(), [1, d], Init::Zeros);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let mut p = |n: &str, shape, init| push(format!("layers.{l}.{n}"), shape, init);
            layers.push(LayerSlots {
                ln1_g: p("ln1_g", [1, d], Init::Ones),
                ln1_b: p("ln1_b", [1, d], Init::Zeros),
                lnt_g: p("lnt_g", [1, d], Init::Ones),
                lnt_b: p("lnt_b", [1, d], Init::Zeros),
                wq: p("wq", [d, d], Init::Scaled(1.0)),
                wk_text: p("wk_text", [d, d], Init::Scaled(1.0)),
                wk_image: p("wk_image", [d, d], Init::Scaled(1.0)),
                wv_text: p("wv_text", [d, d], Init::Scaled(1.0)),
                wv_image: p("wv_image", [d, d], Init::Scaled(1.0)),
                wo: p("wo", [d, d], Init::Scaled(0.5)),
                bo: p("bo", [1, d], Init::Zeros),
                ln2_g: p("ln2_g", [1, d], Init::Ones),
                ln2_b: p("ln2_b", [1, d], Init::Zeros),
                mlp_w1: p("mlp_w1", [d, h], Init::Scaled(1.0)),
                mlp_b1: p("mlp_b1", [1, h], Init::Zeros),
                mlp_w2: p("mlp_w2", [h, d], Init::Scaled(0.5)),
                mlp_b2: p("mlp_b2", [1, d], Init::Zeros),
            });
        }
        let lnf_g = push("lnf_g".into(), [1, d], Init::Ones);
        let lnf_b = push("lnf_b".into(), [1, d], Init::Zeros);
        let out_w = push("out_w".into(), [d, c.patch_dim()], Init::Scaled(0.1));
        let out_b = push("out_b".into(), [1, c.patch_dim()], Init::Zeros);
        (
            Slots {
                embed,
                patch_w,
                patch_b,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                layers,
                lnf_g,
                lnf_b,
                out_w,
                out_b,
            },
            specs,
        )
    }
}

/// Every weight of the toy transformer as a flat, named list of 2-D tensors.
///
/// Row 0 of the embedding table is the null-prompt embedding used for the
/// unconditional branch of guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> ModelParams<F> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let (_, specs) = Slots::build(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.shape)?,
                Init::Ones => Tensor::full(s.shape, F::one())?,
                Init::Scaled(gain) => {
                    let std = gain / (s.shape[0] as f64).sqrt();
                    Tensor::<F>::randn(rng, s.shape)?.scale(F::from_f64_lossy(std))
                }
            };
            names.push(s.name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the config.
    pub fn from_named(
        config: ModelConfig,
        named: Vec<(String, Tensor<F>)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (_, specs) = Slots::build(&config);
        if specs.len() != named.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (s, (name, t)) in specs.iter().zip(named) {
            if s.name != name || t.shape() != s.shape {
                return Err(ModelError::Shape(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::Shape(format!("tensor {name} has non-finite values")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    pub(crate) fn slots(&self) -> Slots {
        Slots::build(&self.config).0
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Copy with one named tensor replaced (shape must match).
    pub fn with_tensor(&self, name: &str, value: Tensor<F>) -> Result<Self, ModelError> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ModelError::Shape(format!("no parameter named {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(ModelError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        let mut out = self.clone();
        out.tensors[i] = value;
        Ok(out)
    }
}
