//! Planar float images and 8-bit binary PGM/PPM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Planar `[channels, height, width]` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "image {channels}x{height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel mean per pixel.
    pub fn to_gray(&self) -> Image {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            out.iter_mut()
                .zip(self.plane(c))
                .for_each(|(o, &v)| *o += v);
        }
        let inv = 1.0 / self.channels as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        Image::new(1, self.height, self.width, out).expect("same geometry")
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image geometry is non-empty")
    }

    /// Quantizes to bytes with round-half-up after clamping to `[0, 1]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Writes a binary PGM from row-major bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim(format!(
            "PGM {width}x{height} needs {} bytes",
            width * height
        )));
    }
    let mut buf = header("P5", width, height);
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes a binary PPM from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::dim(format!(
            "PPM {width}x{height} needs {} bytes",
            3 * width * height
        )));
    }
    let mut buf = header("P6", width, height);
    buf.extend_from_slice(rgb);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Saves a 1-channel image as PGM or a 3-channel image as PPM.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let bytes = img.to_bytes();
    match img.channels {
        1 => write_pgm(path, img.width, img.height, &bytes),
        3 => {
            let n = img.width * img.height;
            let rgb: Vec<u8> = (0..n)
                .flat_map(|i| [bytes[i], bytes[n + i], bytes[2 * n + i]])
                .collect();
            write_ppm(path, img.width, img.height, &rgb)
        }
        c => Err(Error::dim(format!("cannot save a {c}-channel image"))),
    }
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Format {
        offset: 0,
        message: msg.into(),
    }
}

/// Decodes an 8-bit binary PGM (P5) or PPM (P6).
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                message: "truncated image header".into(),
            });
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| parse_err("non-ASCII header"))?,
        );
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(parse_err(format!("unsupported image kind {other:?}"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(format!("bad header number {s:?}")))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(parse_err(format!(
            "only 8-bit images are supported, maxval {maxval}"
        )));
    }
    pos += 1; // single whitespace before the raster
    let n = width * height;
    let raster = bytes.get(pos..pos + channels * n).ok_or(Error::Format {
        offset: bytes.len(),
        message: "truncated raster".into(),
    })?;
    let mut data = vec![0.0; channels * n];
    for i in 0..n {
        for c in 0..channels {
            data[c * n + i] = raster[i * channels + c] as f32 / 255.0;
        }
    }
    Image::new(channels, height, width, data)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
