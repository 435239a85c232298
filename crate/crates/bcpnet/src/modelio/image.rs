//! PNG input and output.
//!
//! Images are read as `(1, 3, h, w)` tensors scaled to `[0, 1]` (grayscale is
//! replicated across channels, an alpha channel is dropped, 16-bit files are
//! rejected). Label maps are written as 8-bit indexed-color PNGs with a fixed
//! palette: the 19-class standard street-scene colors when `num_classes` is
//! 19, evenly spaced hues otherwise, with the ignore index mapped to black.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor4};

pub const CITYSCAPES_CLASSES: usize = 19;

const CITYSCAPES_PALETTE: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

pub(crate) fn hsv_to_rgb_u8(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    [
        (rgb[0] * 255.0).round() as u8,
        (rgb[1] * 255.0).round() as u8,
        (rgb[2] * 255.0).round() as u8,
    ]
}

/// Class colors: the standard 19-class street-scene palette when the class
/// count matches it, evenly spaced hues otherwise.
pub fn class_palette(num_classes: usize) -> Vec<[u8; 3]> {
    if num_classes == CITYSCAPES_CLASSES {
        CITYSCAPES_PALETTE.to_vec()
    } else {
        (0..num_classes)
            .map(|c| hsv_to_rgb_u8(c as f64 / num_classes as f64, 0.75, 0.95))
            .collect()
    }
}

/// Read an 8-bit RGB, RGBA or grayscale PNG into a `(1, 3, h, w)` tensor
/// scaled to `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor4<f32>> {
    let file = BufReader::new(File::open(path)?);
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Unsupported(format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Unsupported(format!("png decode: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported(format!(
            "only 8-bit PNGs are supported, got {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Unsupported(format!("unsupported color type {other:?}")));
        }
    };
    let data = &buf[..w * h * channels];
    Tensor4::from_fn((1, 3, h, w), |_, c, y, x| {
        let px = (y * w + x) * channels;
        let v = if channels < 3 { data[px] } else { data[px + c] };
        v as f32 / 255.0
    })
}

/// Write a single-image label map as an 8-bit indexed PNG. Indices 0..k use
/// the palette; everything else, including the ignore index, is black.
pub fn write_label_png(
    labels: &LabelMap,
    palette: &[[u8; 3]],
    path: impl AsRef<Path>,
) -> Result<()> {
    let (n, h, w) = labels.shape();
    if n != 1 {
        return Err(Error::InvalidShape(format!("label PNG wants a single map, got batch {n}")));
    }
    if palette.len() > 256 {
        return Err(Error::Config(format!("palette holds {} colors, max 256", palette.len())));
    }
    let mut pal = vec![0u8; 256 * 3];
    for (i, rgb) in palette.iter().enumerate() {
        pal[i * 3..i * 3 + 3].copy_from_slice(rgb);
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(pal);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Unsupported(format!("png encode: {e}")))?;
    writer
        .write_image_data(labels.data())
        .map_err(|e| Error::Unsupported(format!("png encode: {e}")))?;
    Ok(())
}

/// Read back an indexed-color PNG as a label map of raw palette indices.
pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let file = BufReader::new(File::open(path)?);
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Unsupported(format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Unsupported(format!("png decode: {e}")))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported(format!(
            "label PNGs must be 8-bit indexed, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    LabelMap::from_vec(1, h, w, buf[..w * h].to_vec())
}

/// Write a `(1, 3, h, w)` tensor with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(image: &Tensor4<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (n, c, h, w) = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::InvalidShape(format!(
            "RGB PNG wants a (1, 3, h, w) tensor, got {:?}",
            image.shape()
        )));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data.push((image.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Unsupported(format!("png encode: {e}")))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Unsupported(format!("png encode: {e}")))?;
    Ok(())
}
