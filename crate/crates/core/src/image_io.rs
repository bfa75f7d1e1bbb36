//! Float RGB image buffers with PPM (P6), PGM (P5), and PNG output.
//! PPM/PGM are the canonical formats: 8-bit, binary, written and read
//! bit-identically. PNG is written alongside renders for convenience.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad image file: {0}")]
    Format(String),
    #[error("png: {0}")]
    Png(String),
}

/// RGB image, values in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    /// r,g,b per pixel.
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        ImageBuf {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self, ImageError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (magic, w, h) = read_pnm_header(&mut r)?;
        if magic != "P6" {
            return Err(ImageError::Format(format!("expected P6, got {magic}")));
        }
        let mut bytes = vec![0u8; w * h * 3];
        r.read_exact(&mut bytes)?;
        Ok(Self::from_bytes(w, h, &bytes))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .ok_or_else(|| ImageError::Png("buffer size mismatch".into()))?;
        img.save(path).map_err(|e| ImageError::Png(e.to_string()))
    }
}

/// Greyscale map (masks, alpha), values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GreyBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GreyBuf {
    pub fn new(width: usize, height: usize) -> Self {
        GreyBuf {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn load_pgm(path: &Path) -> Result<Self, ImageError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (magic, w, h) = read_pnm_header(&mut r)?;
        if magic != "P5" {
            return Err(ImageError::Format(format!("expected P5, got {magic}")));
        }
        let mut bytes = vec![0u8; w * h];
        r.read_exact(&mut bytes)?;
        Ok(GreyBuf {
            width: w,
            height: h,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_pnm_header<R: BufRead>(r: &mut R) -> Result<(String, usize, usize), ImageError> {
    // magic, width, height, maxval; '#' comments allowed between tokens
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(ImageError::Format("truncated header".into()));
        }
        let body = line.split('#').next().unwrap_or("");
        tokens.extend(body.split_whitespace().map(str::to_string));
    }
    let magic = tokens[0].clone();
    let w: usize = tokens[1]
        .parse()
        .map_err(|_| ImageError::Format("bad width".into()))?;
    let h: usize = tokens[2]
        .parse()
        .map_err(|_| ImageError::Format("bad height".into()))?;
    if tokens[3] != "255" {
        return Err(ImageError::Format("only maxval 255 supported".into()));
    }
    Ok((magic, w, h))
}
