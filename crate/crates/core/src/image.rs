//! Grayscale images in `[0, 1]` and their binary PNM encodings.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {width}×{height} cannot hold {len} pixels")]
    Size { width: usize, height: usize, len: usize },
    #[error("malformed PNM: {0}")]
    Pnm(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if width * height != pixels.len() || width == 0 || height == 0 {
            return Err(ImageError::Size {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn square(size: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        Self::new(size, size, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Side length of a square image.
    pub fn size(&self) -> usize {
        debug_assert_eq!(self.width, self.height);
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Rounds every pixel to the nearest multiple of 1/255, the grid PGM
    /// storage can represent exactly.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.pixels {
            *v = to_byte(*v) as f32 / 255.0;
        }
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_byte(v)).collect()
    }

    /// Binary PGM (P5, maxval 255).
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (magic, width, height, maxval, offset) = parse_pnm_header(bytes)?;
        if magic != "P5" {
            return Err(ImageError::Pnm(format!("expected P5, found {magic}")));
        }
        if maxval == 0 || maxval > 255 {
            return Err(ImageError::Pnm(format!("unsupported maxval {maxval}")));
        }
        let body = &bytes[offset..];
        if body.len() < width * height {
            return Err(ImageError::Pnm(format!(
                "expected {} pixel bytes, found {}",
                width * height,
                body.len()
            )));
        }
        let pixels = body[..width * height]
            .iter()
            .map(|&b| b as f32 / maxval as f32)
            .collect();
        Image::new(width, height, pixels)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), ImageError> {
        write_file(path, &self.encode_pgm())
    }

    pub fn load_pgm(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode_pgm(&bytes)
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    let io = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Binary PPM (P6) from three equally sized channels.
pub fn encode_ppm(r: &Image, g: &Image, b: &Image) -> Result<Vec<u8>, ImageError> {
    if (r.width, r.height) != (g.width, g.height) || (r.width, r.height) != (b.width, b.height) {
        return Err(ImageError::Pnm("channel sizes differ".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", r.width, r.height).into_bytes();
    for i in 0..r.pixels.len() {
        out.extend([to_byte(r.pixels[i]), to_byte(g.pixels[i]), to_byte(b.pixels[i])]);
    }
    Ok(out)
}

fn parse_pnm_header(bytes: &[u8]) -> Result<(String, usize, usize, usize, usize), ImageError> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(ImageError::Pnm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err(ImageError::Pnm("missing raster".into()));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageError::Pnm(format!("bad header field {s:?}")))
    };
    Ok((
        fields[0].clone(),
        num(&fields[1])?,
        num(&fields[2])?,
        num(&fields[3])?,
        i + 1,
    ))
}

/// Lays images out on a grid, `columns` wide, separated by `gap` pixels of
/// `background`.
pub fn montage(images: &[&Image], columns: usize, gap: usize, background: f32) -> Result<Image, ImageError> {
    let columns = columns.max(1);
    let Some(first) = images.first() else {
        return Err(ImageError::Pnm("montage of no images".into()));
    };
    let (cw, ch) = (first.width, first.height);
    if images.iter().any(|im| (im.width, im.height) != (cw, ch)) {
        return Err(ImageError::Pnm("montage tiles differ in size".into()));
    }
    let rows = images.len().div_ceil(columns);
    let width = columns * cw + (columns + 1) * gap;
    let height = rows * ch + (rows + 1) * gap;
    let mut out = Image::filled(width, height, background);
    for (idx, im) in images.iter().enumerate() {
        let (r, c) = (idx / columns, idx % columns);
        let (x0, y0) = (gap + c * (cw + gap), gap + r * (ch + gap));
        for y in 0..ch {
            for x in 0..cw {
                out.set(x0 + x, y0 + y, im.get(x, y));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_of_quantized_image() {
        let im = Image::square(4, (0..16).map(|i| i as f32 / 15.0).collect())
            .unwrap()
            .quantized();
        let back = Image::decode_pgm(&im.encode_pgm()).unwrap();
        assert_eq!(back, im);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let im = Image::decode_pgm(&bytes).unwrap();
        assert_eq!(im.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_truncated_raster() {
        let bytes = b"P5\n2 2\n255\n\x00\x01".to_vec();
        assert!(Image::decode_pgm(&bytes).is_err());
    }

    #[test]
    fn montage_places_tiles() {
        let a = Image::filled(2, 2, 1.0);
        let b = Image::filled(2, 2, 0.5);
        let m = montage(&[&a, &b, &a], 2, 1, 0.0).unwrap();
        assert_eq!((m.width(), m.height()), (7, 7));
        assert_eq!(m.get(1, 1), 1.0);
        assert_eq!(m.get(4, 1), 0.5);
        assert_eq!(m.get(1, 4), 1.0);
        assert_eq!(m.get(4, 4), 0.0);
    }
}
