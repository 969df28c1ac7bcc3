//! 8-bit grayscale images and binary PGM (P5) encoding.
//!
//! All pattern and capture files on disk are binary PGM with a `255` maxval.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a binary PGM (P5) file")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255)")]
    BadMaxval(u32),
    #[error("truncated pixel data: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Encode as binary PGM (P5), maxval 255.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("vec write");
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, PgmError> {
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(PgmError::BadMagic);
        }
        let mut pos = 2;
        let mut fields = [0u32; 3]; // width, height, maxval
        for field in fields.iter_mut() {
            *field = parse_header_int(bytes, &mut pos)?;
        }
        // Single whitespace byte separates the header from pixel data.
        pos += 1;
        let (width, height, maxval) = (fields[0], fields[1], fields[2]);
        if maxval != 255 {
            return Err(PgmError::BadMaxval(maxval));
        }
        let expected = width as usize * height as usize;
        let got = bytes.len().saturating_sub(pos);
        if got < expected {
            return Err(PgmError::Truncated { expected, got });
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + expected].to_vec(),
        })
    }

    pub fn save_pgm<P: AsRef<Path>>(&self, path: P) -> Result<(), PgmError> {
        fs::write(path, self.to_pgm_bytes())?;
        Ok(())
    }

    pub fn load_pgm<P: AsRef<Path>>(path: P) -> Result<Self, PgmError> {
        Self::from_pgm_bytes(&fs::read(path)?)
    }
}

/// Parse the next ASCII integer in a PGM header, skipping whitespace and
/// `#` comment lines.
fn parse_header_int(bytes: &[u8], pos: &mut usize) -> Result<u32, PgmError> {
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
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::BadHeader("expected integer".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PgmError::BadHeader("integer out of range".into()))
}
