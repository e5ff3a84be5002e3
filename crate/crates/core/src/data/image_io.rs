//! 8-bit RGB images as planar `3×H×W` tensors in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use texvit_autodiff::Tensor;

use crate::error::{io_err, Error, Result};

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), detail: detail.into() }
}

/// Interleaved RGB bytes to a planar tensor with values `byte/255`.
pub fn from_rgb_bytes(width: usize, height: usize, rgb: &[u8]) -> Tensor<f32> {
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, height, width], data).expect("3×H×W buffer")
}

/// Planar `3×H×W` tensor to interleaved bytes, rounding and clamping.
pub fn to_rgb_bytes(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.dim(1), img.dim(2));
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            out[3 * i + c] = (img.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Decodes a PPM (P6, maxval 255) or PNG (8-bit RGB or grayscale).
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_bytes(&bytes, path)
}

/// As [`decode_image`]; `path` only labels errors.
pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes, path)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes, path)
    } else {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        Err(format_err(path, format!("unsupported image format (magic {magic:?})")))
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.line_size * h];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.chunks(info.line_size).flat_map(|r| &r[..3 * w]).copied().collect(),
        png::ColorType::Grayscale => {
            buf.chunks(info.line_size).flat_map(|r| &r[..w]).flat_map(|&g| [g, g, g]).collect()
        }
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok(from_rgb_bytes(w, h, &rgb))
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    // Header: magic, width, height, maxval as whitespace-separated ASCII
    // tokens (with `#` comments), then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "malformed PPM header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported PPM maxval {maxval}")));
    }
    if w == 0 || h == 0 || !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "malformed PPM header"));
    }
    let data = &bytes[pos + 1..];
    if data.len() < 3 * w * h {
        return Err(format_err(path, format!("PPM data truncated: {} of {} bytes", data.len(), 3 * w * h)));
    }
    Ok(from_rgb_bytes(w, h, &data[..3 * w * h]))
}

pub fn encode_png(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(&to_rgb_bytes(img)).expect("in-memory PNG data");
    }
    out
}

pub fn encode_ppm(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(to_rgb_bytes(img));
    out
}

pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_png(img)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_red_blue() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t = decode_bytes(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let err = decode_bytes(b"P9\n1 1\n255\n\0\0\0", Path::new("x.ppm")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn ppm_comments_and_truncation() {
        let mut bytes = b"P6 # made by hand\n1 1\n255\n".to_vec();
        bytes.extend([0, 51, 255]);
        let t = decode_bytes(&bytes, Path::new("c.ppm")).unwrap();
        assert_eq!(t.data(), &[0.0, 0.2, 1.0]);
        assert!(decode_bytes(b"P6\n2 2\n255\n\0\0\0", Path::new("t.ppm")).is_err());
        assert!(decode_bytes(b"P6\n1 1\n65535\n\0\0\0\0\0\0", Path::new("d.ppm")).is_err());
    }

    #[test]
    fn grayscale_png_promotes_to_rgb() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0, 255]).unwrap();
        }
        let t = decode_bytes(&out, Path::new("g.png")).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[1, 2]).unwrap();
        }
        assert!(matches!(decode_bytes(&out, Path::new("s.png")), Err(Error::Format { .. })));
    }
}
