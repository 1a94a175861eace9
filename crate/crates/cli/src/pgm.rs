//! Grayscale image I/O: binary PGM (P5, maxval 255) and 8-bit PNG.

use std::path::Path;

use mdunet::{Shape, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported format (expected binary P5 PGM or PNG)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("unsupported maxval {0} (only 255)")]
    Maxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Pixels scaled to [0, 1] as a (1, 1, H, W) tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
        .expect("pixel count matches dimensions")
    }

    /// Foreground wherever the pixel is non-zero.
    pub fn to_mask(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p > 0) as u8).collect()
    }

    /// Class labels written as {0, 255}.
    pub fn from_mask(width: usize, height: usize, mask: &[u8]) -> Self {
        Self {
            width,
            height,
            pixels: mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect(),
        }
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Header("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| ImageError::Header("non-ASCII header".into()))
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, ImageError> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| ImageError::Header(format!("{what} `{tok}` is not a number")))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    if !bytes.starts_with(b"P5") {
        return Err(ImageError::BadMagic);
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")? as usize;
    let height = header_number(bytes, &mut pos, "height")? as usize;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ImageError::Maxval(maxval));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Header("missing separator before pixel data".into()));
    }
    pos += 1;
    let expected = width * height;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: data.len(),
        });
    }
    Ok(GrayImage {
        width,
        height,
        pixels: data[..expected].to_vec(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let png_err = |e: png::DecodingError| ImageError::Png(e.to_string());
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.color_type.samples();
    let pixels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
            buf[..w * h * stride].chunks(stride).map(|p| p[0]).collect()
        }
        png::ColorType::Rgb | png::ColorType::Rgba => buf[..w * h * stride]
            .chunks(stride)
            .map(|p| ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114 + 500) / 1000) as u8)
            .collect(),
        png::ColorType::Indexed => return Err(ImageError::Png("palette images are not supported".into())),
    };
    Ok(GrayImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        decode_pgm(bytes)
    }
}

pub fn load_image(path: &Path) -> Result<GrayImage, ImageError> {
    decode_image(&std::fs::read(path)?)
}

pub fn save_pgm(path: &Path, img: &GrayImage) -> Result<(), ImageError> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_small_p5() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 255, 255, 0]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.to_tensor().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(img.to_mask(), vec![0, 1, 1, 0]);
    }

    #[test]
    fn header_comments() {
        let mut bytes = b"P5 # c\n# another\n1 1 255\n".to_vec();
        bytes.push(7);
        assert_eq!(decode_pgm(&bytes).unwrap().pixels, vec![7]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(ImageError::BadMagic)));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01"), Err(ImageError::Truncated { expected: 4, found: 1 })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(ImageError::Maxval(65535))));
    }

    #[test]
    fn png_grayscale() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 3, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0, 128, 255]).unwrap();
        }
        assert_eq!(decode_image(&bytes).unwrap().pixels, vec![0, 128, 255]);
    }
}
