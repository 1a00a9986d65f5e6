use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb32FImage, RgbImage};

use super::EvalError;
use crate::tensor::{Float, Tensor};

pub const EVAL_SIDE: u32 = 512;

/// `h × w × 3` tensor with values in `[0, 1]` to an RGB float image.
pub fn tensor_to_image<F: Float>(t: &Tensor<F>) -> Result<Rgb32FImage, EvalError> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(EvalError::Input(format!("expected an h×w×3 image tensor, got {s:?}")));
    }
    let data: Vec<f32> = t.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
    Rgb32FImage::from_raw(s[1] as u32, s[0] as u32, data)
        .ok_or_else(|| EvalError::Input("image buffer size mismatch".into()))
}

pub fn image_to_tensor<F: Float>(img: &Rgb32FImage) -> Tensor<F> {
    let data = img.as_raw().iter().map(|&v| F::from_f64_lossy(v as f64)).collect();
    Tensor::new([img.height() as usize, img.width() as usize, 3], data).expect("shape matches buffer")
}

/// Bilinear resize to 512×512 with half-pixel centers and clamped edges.
/// Inputs already at 512×512 are returned unchanged.
pub fn resize_for_eval(img: &Rgb32FImage) -> Rgb32FImage {
    let mut out = if img.dimensions() == (EVAL_SIDE, EVAL_SIDE) {
        img.clone()
    } else {
        imageops::resize(img, EVAL_SIDE, EVAL_SIDE, FilterType::Triangle)
    };
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

pub fn to_rgb8(img: &Rgb32FImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn encode_png(img: &Rgb32FImage) -> Result<Vec<u8>, EvalError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_rgb8(img)
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| EvalError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn load_image(path: &std::path::Path) -> Result<Rgb32FImage, EvalError> {
    let img = image::open(path).map_err(|e| EvalError::Image(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb32f())
}
