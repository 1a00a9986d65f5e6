//! Toy vocabulary and the colored-shapes corpus the model is trained on.

use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};

use super::ModelError;

/// Token reserved for "no conditioning"; also the unconditional prompt.
pub const NULL_TOKEN: usize = 0;

/// Token id → surface word. Id 0 is the null token.
pub const VOCAB: [&str; 7] = ["<null>", "square", "circle", "triangle", "red", "green", "blue"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn from_id(id: usize) -> Result<Self, ModelError> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| ModelError::Vocabulary(format!("unknown shape id {id}")))
    }

    pub fn token(self) -> usize {
        1 + self as usize
    }

    pub fn word(self) -> &'static str {
        VOCAB[self.token()]
    }

    pub fn from_token(token: usize) -> Option<Self> {
        (1..=3).contains(&token).then(|| Self::ALL[token - 1])
    }
}

impl ColorKind {
    pub const ALL: [ColorKind; 3] = [ColorKind::Red, ColorKind::Green, ColorKind::Blue];

    pub fn from_id(id: usize) -> Result<Self, ModelError> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| ModelError::Vocabulary(format!("unknown color id {id}")))
    }

    pub fn token(self) -> usize {
        4 + self as usize
    }

    pub fn word(self) -> &'static str {
        VOCAB[self.token()]
    }

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn from_token(token: usize) -> Option<Self> {
        (4..=6).contains(&token).then(|| Self::ALL[token - 4])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample<F = f32> {
    /// `side × side × 3`, values in `[0, 1]`.
    pub image: Tensor<F>,
    pub shape: ShapeKind,
    pub color: ColorKind,
}

impl<F: Float> ShapeSample<F> {
    pub fn tokens(&self) -> [usize; 2] {
        [self.shape.token(), self.color.token()]
    }
}

/// Whether the pixel centred at `(x, y)` (16-pixel reference frame, x along
/// columns) is inside the shape.
fn covers(shape: ShapeKind, x: f64, y: f64) -> bool {
    match shape {
        ShapeKind::Square => (4.0..=12.0).contains(&x) && (4.0..=12.0).contains(&y),
        ShapeKind::Circle => {
            let (dx, dy) = (x - 7.5, y - 7.5);
            dx * dx + dy * dy <= 25.0
        }
        ShapeKind::Triangle => {
            let v = [(3.0, 13.0), (12.0, 13.0), (7.5, 3.0)];
            let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                (bx - ax) * (y - ay) - (by - ay) * (x - ax)
            };
            let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
            d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
        }
    }
}

/// Rasterises a filled shape on a black background. Geometry is defined on
/// a 16×16 frame and scaled to `side`; the filled pixels carry 1.0 in the
/// color's channel.
pub fn render_shape<F: Float>(
    shape_id: usize,
    color_id: usize,
    side: usize,
) -> Result<ShapeSample<F>, ModelError> {
    let shape = ShapeKind::from_id(shape_id)?;
    let color = ColorKind::from_id(color_id)?;
    if side == 0 {
        return Err(ModelError::Config("image side must be positive".into()));
    }
    let scale = 16.0 / side as f64;
    let mut data = vec![F::zero(); side * side * 3];
    for r in 0..side {
        for c in 0..side {
            let (x, y) = ((c as f64 + 0.5) * scale, (r as f64 + 0.5) * scale);
            if covers(shape, x, y) {
                data[(r * side + c) * 3 + color.channel()] = F::one();
            }
        }
    }
    Ok(ShapeSample {
        image: Tensor::new([side, side, 3], data)?,
        shape,
        color,
    })
}

/// All nine (shape, color) combinations.
pub fn shape_corpus<F: Float>(side: usize) -> Result<Vec<ShapeSample<F>>, ModelError> {
    let mut out = Vec::with_capacity(9);
    for s in 0..3 {
        for c in 0..3 {
            out.push(render_shape(s, c, side)?);
        }
    }
    Ok(out)
}

/// `side × side × 3` image → `(side/p)² × (p·p·3)` tokens, row-major over
/// patches, `(dy, dx, channel)` inside a token.
pub fn patchify<F: Float>(image: &Tensor<F>, patch: usize) -> Result<Tensor<F>, ModelError> {
    let [side, w, ch] = image.shape() else {
        return Err(ModelError::Shape(format!("expected HxWx3 image, got {:?}", image.shape())));
    };
    let (side, w, ch) = (*side, *w, *ch);
    if side != w || ch != 3 || patch == 0 || side % patch != 0 {
        return Err(ModelError::Shape(format!(
            "image {:?} cannot be split into {patch}x{patch} patches",
            image.shape()
        )));
    }
    let per = side / patch;
    let dim = patch * patch * 3;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..per {
        for pc in 0..per {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (r, c) = (pr * patch + dy, pc * patch + dx);
                    out.extend_from_slice(&src[(r * side + c) * 3..(r * side + c) * 3 + 3]);
                }
            }
        }
    }
    Ok(Tensor::new([per * per, dim], out)?)
}

pub fn unpatchify<F: Float>(
    tokens: &Tensor<F>,
    side: usize,
    patch: usize,
) -> Result<Tensor<F>, ModelError> {
    if patch == 0 || side % patch != 0 {
        return Err(ModelError::Shape(format!("side {side} not divisible by patch {patch}")));
    }
    let per = side / patch;
    let dim = patch * patch * 3;
    if tokens.rank() != 2 || tokens.rows() != per * per || tokens.cols() != dim {
        return Err(ModelError::Shape(format!(
            "tokens {:?} do not form a {side}x{side} image with {patch}x{patch} patches",
            tokens.shape()
        )));
    }
    let src = tokens.data();
    let mut out = vec![F::zero(); side * side * 3];
    for pr in 0..per {
        for pc in 0..per {
            let tok = &src[(pr * per + pc) * dim..(pr * per + pc + 1) * dim];
            for dy in 0..patch {
                for dx in 0..patch {
                    let (r, c) = (pr * patch + dy, pc * patch + dx);
                    let o = (dy * patch + dx) * 3;
                    out[(r * side + c) * 3..(r * side + c) * 3 + 3].copy_from_slice(&tok[o..o + 3]);
                }
            }
        }
    }
    Ok(Tensor::new([side, side, 3], out)?)
}
