use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use imageset::evalkit::{tensor_to_image, to_rgb8};
use imageset::setgen::GridLayout;
use imageset::tensor::Tensor;

use crate::error::CliError;

pub fn rgb(t: &Tensor<f32>, scale: u32) -> Result<RgbImage, CliError> {
    let img = to_rgb8(&tensor_to_image(t)?);
    if scale <= 1 {
        return Ok(img);
    }
    Ok(imageops::resize(&img, img.width() * scale, img.height() * scale, FilterType::Nearest))
}

/// Images placed by the grid's slots; windowed sets use two rows.
pub fn composite(images: &[RgbImage], grid: &GridLayout) -> RgbImage {
    let n = images.len();
    let (w, h) = images[0].dimensions();
    let cells: Vec<(usize, usize)> = if grid.windows.is_none() && grid.placements.len() >= n {
        grid.placements[..n].to_vec()
    } else {
        let cols = n.div_ceil(2);
        (0..n).map(|k| (k / cols, k % cols)).collect()
    };
    let rows = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let cols = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let mut out = RgbImage::new(w * cols as u32, h * rows as u32);
    for (img, (r, c)) in images.iter().zip(cells) {
        imageops::replace(&mut out, img, (c as u32 * w) as i64, (r as u32 * h) as i64);
    }
    out
}

/// Writes `<stem>.png`, plus `<stem>.ppm` when asked; returns the paths.
pub fn write(img: &RgbImage, dir: &Path, stem: &str, ppm: bool) -> Result<Vec<PathBuf>, CliError> {
    let png = dir.join(format!("{stem}.png"));
    img.save_with_format(&png, ImageFormat::Png)?;
    let mut paths = vec![png];
    if ppm {
        let p = dir.join(format!("{stem}.ppm"));
        let f = std::fs::File::create(&p).map_err(crate::error::io(p.display()))?;
        PnmEncoder::new(std::io::BufWriter::new(f))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
        paths.push(p);
    }
    Ok(paths)
}
