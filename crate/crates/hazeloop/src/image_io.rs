//! Image and depth files: 8-bit PNG, binary PPM (P6) and 16-bit PGM (P5)
//! depth in millimetres.

use std::io::Cursor;
use std::path::Path;

use hazeloop_core::haze::DepthMap;
use hazeloop_core::tensor::Tensor;

use crate::ckpt::{read_bytes, write_bytes};
use crate::error::{Error, Result};

/// Depth files store `round(metres × DEPTH_SCALE)`.
pub const DEPTH_SCALE: f64 = 1000.0;

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit RGB of a `(3, H, W)` tensor.
pub fn to_rgb8(image: &Tensor) -> Vec<u8> {
    let (_, h, w) = image.chw();
    let hw = h * w;
    let d = image.data();
    (0..hw).flat_map(|p| (0..3).map(move |c| quantize(d[c * hw + p]))).collect()
}

fn from_interleaved(samples: &[f64], channels: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / hw, i % hw);
        let c = if channels < 3 { 0 } else { c };
        samples[p * channels + c]
    })
}

/// Reads a PNG or PPM file as a `(3, H, W)` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    match extension(path).as_str() {
        "png" => decode_png(&bytes, path),
        "ppm" | "pnm" => {
            let (w, h, maxval, data) = parse_pnm(&bytes, b"P6", path)?;
            let samples = pnm_samples(data, maxval, w * h * 3, path)?;
            Ok(from_interleaved(&samples, 3, h, w))
        }
        other => Err(Error::format(path, format!("unsupported image extension {other:?}"))),
    }
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::format(path, format!("expected a (3, H, W) image, got {:?}", image.shape())));
    }
    let (_, h, w) = image.chw();
    let rgb = to_rgb8(image);
    let bytes = match extension(path).as_str() {
        "png" => encode_png(&rgb, w, h).map_err(|e| Error::format(path, e.to_string()))?,
        "ppm" | "pnm" => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&rgb);
            out
        }
        other => return Err(Error::format(path, format!("unsupported image extension {other:?}"))),
    };
    write_bytes(path, &bytes)
}

fn encode_png(rgb: &[u8], w: usize, h: usize) -> std::result::Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgb)?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(fail)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(path, "indexed PNG after expansion")),
    };
    let data = &buf[..info.buffer_size()];
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        png::BitDepth::Eight => data.iter().map(|&v| v as f64 / 255.0).collect(),
        other => return Err(Error::format(path, format!("unsupported PNG bit depth {other:?}"))),
    };
    if channels == 2 || channels == 4 {
        let stripped: Vec<f64> = samples
            .chunks_exact(channels)
            .flat_map(|px| px[..channels - 1].to_vec())
            .collect();
        return Ok(from_interleaved(&stripped, channels - 1, h, w));
    }
    Ok(from_interleaved(&samples, channels, h, w))
}

/// Parses a binary PNM header; returns `(width, height, maxval, payload)`.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected a {} file", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
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
            .ok_or_else(|| Error::format(path, "malformed PNM header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed PNM header"));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("invalid PNM dimensions {w}x{h}, maxval {maxval}")));
    }
    Ok((w, h, maxval, &bytes[pos + 1..]))
}

fn pnm_samples(data: &[u8], maxval: usize, n: usize, path: &Path) -> Result<Vec<f64>> {
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if data.len() < need {
        return Err(Error::format(path, format!("PNM payload has {} bytes, expected {need}", data.len())));
    }
    Ok(if wide {
        data[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    } else {
        data[..need].iter().map(|&v| v as f64 / maxval as f64).collect()
    })
}

/// Reads a 16-bit PGM depth map (millimetres).
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let (w, h, maxval, data) = parse_pnm(&bytes, b"P5", path)?;
    let raw = pnm_samples(data, maxval, w * h, path)?;
    let metres = raw.iter().map(|v| v * maxval as f64 / DEPTH_SCALE).collect();
    DepthMap::new(h, w, metres).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &d in depth.values() {
        let v = (d * DEPTH_SCALE).round().clamp(1.0, 65535.0) as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_bytes(path, &out)
}

/// Snaps an image onto the 8-bit grid it would have after a save and load.
pub fn quantized(image: &Tensor) -> Tensor {
    image.map(|v| quantize(v) as f64 / 255.0)
}

/// Snaps a depth map onto the millimetre grid of the depth files.
pub fn quantized_depth(depth: &DepthMap) -> DepthMap {
    let v = depth
        .values()
        .iter()
        .map(|d| (d * DEPTH_SCALE).round().clamp(1.0, 65535.0) / DEPTH_SCALE)
        .collect();
    DepthMap::new(depth.height(), depth.width(), v).expect("quantised depth stays positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient() -> Tensor {
        Tensor::from_fn(&[3, 4, 6], |i| (i % 17) as f64 / 16.0)
    }

    #[test]
    fn png_and_ppm_round_trip_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantized(&gradient());
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert!(back.max_abs_diff(&img) < 1e-12, "{name}");
        }
    }

    #[test]
    fn depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::new(2, 3, vec![0.1, 0.5, 1.234, 2.0, 9.999, 3.3333]).unwrap();
        let p = dir.path().join("d.pgm");
        write_depth(&p, &d).unwrap();
        let back = read_depth(&p).unwrap();
        for (a, b) in back.values().iter().zip(d.values()) {
            assert!((a - b).abs() <= 0.5e-3 + 1e-12);
        }
        assert_eq!(back, quantized_depth(&d));
    }

    #[test]
    fn header_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        std::fs::write(&p, &bytes).unwrap();
        let img = read_image(&p).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
        std::fs::write(&p, b"P6\n2 2\n255\n\x00").unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format { .. })));
        assert!(matches!(read_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
