//! 8-bit RGB PNG encoding of [`Image`]s.

use std::io::Cursor;
use std::path::Path;

use aqua_core::Image;

use crate::error::{DataError, Result};
use crate::fsutil::write_atomic;

/// Largest accepted side, so hostile headers cannot request huge buffers.
pub const MAX_SIDE: u32 = 4096;

/// Quantise to 8 bits per channel (round to nearest) and encode.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| DataError::Png(e.to_string()))?;
        w.write_image_data(&bytes).map_err(|e| DataError::Png(e.to_string()))?;
        w.finish().map_err(|e| DataError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decode any 8/16-bit grey, grey+alpha, RGB, RGBA or palette PNG into RGB in
/// `[0, 1]`; alpha is dropped.
pub fn decode_png(data: &[u8]) -> Result<Image> {
    let mut dec = png::Decoder::new(Cursor::new(data));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| DataError::Png(e.to_string()))?;
    let (w, h) = {
        let info = reader.info();
        (info.width, info.height)
    };
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(DataError::Png(format!("unsupported size {w}x{h}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DataError::Png("output buffer size overflows".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| DataError::Png(e.to_string()))?;
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(DataError::Png("palette was not expanded".into())),
    };
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let line = &buf[y * frame.line_size..y * frame.line_size + w * channels];
        for px in line.chunks_exact(channels) {
            let c = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            rgb.extend(c.iter().map(|&b| b as f64 / 255.0));
        }
    }
    Ok(Image::new(w, h, rgb)?)
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_png(&bytes)
}
