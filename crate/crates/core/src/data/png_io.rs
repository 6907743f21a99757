use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decoded 8-bit pixels, `channels` interleaved per pixel.
struct Raw {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

fn decode(path: &Path) -> Result<Raw> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok(Raw {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}

/// Loads an 8-bit PNG as `[3, H, W]` in `[0, 1]`. Grayscale is replicated
/// across channels; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let raw = decode(path)?;
    let plane = raw.width * raw.height;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in raw.pixels.chunks(raw.channels).enumerate() {
        for c in 0..3 {
            let v = if raw.channels >= 3 { px[c] } else { px[0] };
            out[c * plane + i] = f32::from(v) / 255.0;
        }
    }
    Tensor::from_vec(out, &[3, raw.height, raw.width])
}

/// Loads a mask PNG as `[1, H, W]`, 1 where the brightest colour channel
/// exceeds 127.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let raw = decode(path)?;
    let color = raw.channels.min(3);
    let out = raw
        .pixels
        .chunks(raw.channels)
        .map(|px| if px[..color].iter().any(|&v| v > 127) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(out, &[1, raw.height, raw.width])
}

fn write(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(data).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

fn spatial(t: &Tensor, channels: usize, path: &Path) -> Result<(usize, usize)> {
    match *t.shape() {
        [c, h, w] if c == channels => Ok((h, w)),
        _ => Err(image_err(path, format!("expected a [{channels}, H, W] tensor, got {:?}", t.shape()))),
    }
}

/// Writes `[1, H, W]` as an 8-bit grayscale PNG with values {0, 255}
/// (pixels at or above 0.5 are foreground).
pub fn save_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = spatial(mask, 1, path)?;
    let data: Vec<u8> = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write(path, w, h, png::ColorType::Grayscale, &data)
}

/// Writes `[3, H, W]` in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = spatial(image, 3, path)?;
    let d = image.data();
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            data.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write(path, w, h, png::ColorType::Rgb, &data)
}
