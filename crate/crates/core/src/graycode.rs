//! Gray-code structured-light patterns and image-stack decoding.
//!
//! A pattern sequence encodes every projector column and row as a reflected
//! binary (gray) code, one bit plane per image, MSB first, each plane
//! followed by its inverse, preceded by white/black reference frames:
//!
//! ```text
//! white, black, col0, col0_inv, ..., colN, colN_inv, row0, row0_inv, ...
//! ```
//!
//! Decoding compares each plane against its inverse per camera pixel, so the
//! bit decision is independent of surface albedo; the white/black references
//! normalise the per-pixel confidence.
//!
//! On disk a sequence is a directory of binary PGM files named
//! `pat_<index:03>_<axis><bit|ref>[_inv].pgm` (e.g. `pat_002_col0.pgm`,
//! `pat_003_col0_inv.pgm`, `pat_000_refwhite.pgm`) plus a `manifest.json`
//! describing the order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pgm::{GrayImage, PgmError};

/// Default decode threshold as a fraction of the white-black dynamic range.
pub const DEFAULT_CONTRAST_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GrayCodeError {
    #[error("projector dimensions must be at least 2x2, got {0}x{1}")]
    ResolutionTooSmall(u32, u32),
    #[error("stack has {got} images but the spec produces {expected}")]
    StackLengthMismatch { expected: usize, got: usize },
    #[error("image {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("decoding requires inverse patterns in the sequence")]
    MissingInverses,
    #[error("decoding requires white/black reference patterns")]
    MissingReferences,
    #[error("pgm: {0}")]
    Pgm(#[from] PgmError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Reflected binary code of `b`.
///
/// Consecutive inputs yield outputs differing in exactly one bit.
#[inline]
pub fn binary_to_gray(b: u64) -> u64 {
    debug_assert!(b < 1 << 63);
    b ^ (b >> 1)
}

/// Inverse of [`binary_to_gray`].
#[inline]
pub fn gray_to_binary(g: u64) -> u64 {
    debug_assert!(g < 1 << 63);
    let mut b = g;
    b ^= b >> 1;
    b ^= b >> 2;
    b ^= b >> 4;
    b ^= b >> 8;
    b ^= b >> 16;
    b ^= b >> 32;
    b
}

/// Which projector coordinate a pattern encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Column,
    Row,
    Reference,
}

/// Parameters of a gray-code pattern sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub projector_width: u32,
    pub projector_height: u32,
    pub include_inverses: bool,
    pub include_references: bool,
}

impl PatternSpec {
    /// Full sequence (references and inverses) for the given resolution.
    pub fn new(projector_width: u32, projector_height: u32) -> Result<Self, GrayCodeError> {
        if projector_width < 2 || projector_height < 2 {
            return Err(GrayCodeError::ResolutionTooSmall(
                projector_width,
                projector_height,
            ));
        }
        Ok(Self {
            projector_width,
            projector_height,
            include_inverses: true,
            include_references: true,
        })
    }

    /// Bits needed to encode all columns: `ceil(log2(width))`.
    pub fn col_bits(&self) -> u32 {
        ceil_log2(self.projector_width)
    }

    /// Bits needed to encode all rows: `ceil(log2(height))`.
    pub fn row_bits(&self) -> u32 {
        ceil_log2(self.projector_height)
    }

    /// Number of images in the sequence.
    pub fn pattern_count(&self) -> usize {
        let planes = (self.col_bits() + self.row_bits()) as usize;
        let per_plane = if self.include_inverses { 2 } else { 1 };
        let refs = if self.include_references { 2 } else { 0 };
        planes * per_plane + refs
    }
}

fn ceil_log2(n: u32) -> u32 {
    debug_assert!(n >= 2);
    u32::BITS - (n - 1).leading_zeros()
}

/// One projector pattern in a sequence.
#[derive(Debug, Clone)]
pub struct PatternImage {
    pub index: usize,
    pub axis: Axis,
    /// Bit plane ordinal counted from the MSB; `None` for references.
    pub bit_plane: Option<u32>,
    pub inverted: bool,
    pub pixels: GrayImage,
}

impl PatternImage {
    /// Canonical on-disk filename for this pattern.
    pub fn filename(&self) -> String {
        let stem = match (self.axis, self.bit_plane) {
            (Axis::Reference, _) => {
                if self.inverted {
                    "refblack".to_string()
                } else {
                    "refwhite".to_string()
                }
            }
            (Axis::Column, Some(k)) => format!("col{}{}", k, if self.inverted { "_inv" } else { "" }),
            (Axis::Row, Some(k)) => format!("row{}{}", k, if self.inverted { "_inv" } else { "" }),
            _ => unreachable!("column/row patterns always carry a bit plane"),
        };
        format!("pat_{:03}_{}.pgm", self.index, stem)
    }
}

/// Manifest entry describing one pattern's place in the sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub axis: Axis,
    pub bit_plane: Option<u32>,
    pub inverted: bool,
    pub file: String,
}

/// JSON manifest for a pattern sequence directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub version: u32,
    pub projector_width: u32,
    pub projector_height: u32,
    pub col_bits: u32,
    pub row_bits: u32,
    pub include_inverses: bool,
    pub include_references: bool,
    pub patterns: Vec<ManifestEntry>,
}

/// Ordered gray-code pattern sequence.
#[derive(Debug, Clone)]
pub struct PatternSequence {
    pub spec: PatternSpec,
    pub patterns: Vec<PatternImage>,
}

/// Generate the deterministic pattern sequence for `spec`.
///
/// Order: white, black (if references), then column bit planes MSB to LSB
/// each followed by its inverse (if inverses), then row planes likewise.
/// Pixel `(x, _)` in column plane `k` is lit iff bit `k` from the MSB of
/// `binary_to_gray(x)` is set.
pub fn generate_patterns(spec: &PatternSpec) -> Result<PatternSequence, GrayCodeError> {
    let (w, h) = (spec.projector_width, spec.projector_height);
    if w < 2 || h < 2 {
        return Err(GrayCodeError::ResolutionTooSmall(w, h));
    }
    let mut patterns = Vec::with_capacity(spec.pattern_count());
    let mut index = 0;

    if spec.include_references {
        for inverted in [false, true] {
            patterns.push(PatternImage {
                index,
                axis: Axis::Reference,
                bit_plane: None,
                inverted,
                pixels: GrayImage::filled(w, h, if inverted { 0 } else { 255 }),
            });
            index += 1;
        }
    }

    let push_planes = |axis: Axis, bits: u32, patterns: &mut Vec<PatternImage>, index: &mut usize| {
        for k in 0..bits {
            let shift = bits - 1 - k;
            let plane = match axis {
                Axis::Column => bit_plane_image(w, h, true, shift),
                Axis::Row => bit_plane_image(w, h, false, shift),
                Axis::Reference => unreachable!(),
            };
            let variants: &[bool] = if spec.include_inverses {
                &[false, true]
            } else {
                &[false]
            };
            for &inverted in variants {
                let pixels = if inverted { complement(&plane) } else { plane.clone() };
                patterns.push(PatternImage {
                    index: *index,
                    axis,
                    bit_plane: Some(k),
                    inverted,
                    pixels,
                });
                *index += 1;
            }
        }
    };

    push_planes(Axis::Column, spec.col_bits(), &mut patterns, &mut index);
    push_planes(Axis::Row, spec.row_bits(), &mut patterns, &mut index);

    debug_assert_eq!(patterns.len(), spec.pattern_count());
    Ok(PatternSequence {
        spec: *spec,
        patterns,
    })
}

fn bit_plane_image(w: u32, h: u32, columns: bool, shift: u32) -> GrayImage {
    let mut img = GrayImage::new(w, h);
    if columns {
        let row: Vec<u8> = (0..w)
            .map(|x| if (binary_to_gray(x as u64) >> shift) & 1 == 1 { 255 } else { 0 })
            .collect();
        for y in 0..h {
            let off = y as usize * w as usize;
            img.pixels_mut()[off..off + w as usize].copy_from_slice(&row);
        }
    } else {
        for y in 0..h {
            let v = if (binary_to_gray(y as u64) >> shift) & 1 == 1 { 255 } else { 0 };
            let off = y as usize * w as usize;
            img.pixels_mut()[off..off + w as usize].fill(v);
        }
    }
    img
}

fn complement(img: &GrayImage) -> GrayImage {
    let data = img.pixels().iter().map(|&v| 255 - v).collect();
    GrayImage::from_vec(img.width(), img.height(), data)
}

impl PatternSequence {
    pub fn manifest(&self) -> SequenceManifest {
        SequenceManifest {
            version: 1,
            projector_width: self.spec.projector_width,
            projector_height: self.spec.projector_height,
            col_bits: self.spec.col_bits(),
            row_bits: self.spec.row_bits(),
            include_inverses: self.spec.include_inverses,
            include_references: self.spec.include_references,
            patterns: self
                .patterns
                .iter()
                .map(|p| ManifestEntry {
                    index: p.index,
                    axis: p.axis,
                    bit_plane: p.bit_plane,
                    inverted: p.inverted,
                    file: p.filename(),
                })
                .collect(),
        }
    }

    /// Write all pattern PGMs plus `manifest.json` into `dir`.
    pub fn write_dir<P: AsRef<Path>>(&self, dir: P) -> Result<(), GrayCodeError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for p in &self.patterns {
            p.pixels.save_pgm(dir.join(p.filename()))?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| GrayCodeError::Manifest(e.to_string()))?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }
}

/// Per-pixel decode result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedPixel {
    /// Decoded projector coordinate, or `None` when undecoded.
    pub proj: Option<(u32, u32)>,
    /// Minimum per-bit contrast, normalised to the white-black range.
    pub confidence: f32,
}

impl DecodedPixel {
    pub const UNDECODED: Self = Self {
        proj: None,
        confidence: 0.0,
    };
}

/// Per-camera-pixel map of decoded projector coordinates.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    pub camera_id: String,
    width: u32,
    height: u32,
    pixels: Vec<DecodedPixel>,
}

impl CorrespondenceMap {
    pub fn new(camera_id: &str, width: u32, height: u32) -> Self {
        Self {
            camera_id: camera_id.to_string(),
            width,
            height,
            pixels: vec![DecodedPixel::UNDECODED; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> &DecodedPixel {
        &self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, p: DecodedPixel) {
        self.pixels[y as usize * self.width as usize + x as usize] = p;
    }

    /// Row-major pixel slice.
    pub fn pixels(&self) -> &[DecodedPixel] {
        &self.pixels
    }

    pub fn decoded_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.proj.is_some()).count()
    }

    /// Fraction of camera pixels that decoded.
    pub fn coverage(&self) -> f64 {
        self.decoded_count() as f64 / self.pixels.len() as f64
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut proj_x = Vec::with_capacity(self.pixels.len());
        let mut proj_y = Vec::with_capacity(self.pixels.len());
        let mut confidence = Vec::with_capacity(self.pixels.len());
        for p in &self.pixels {
            match p.proj {
                Some((x, y)) => {
                    proj_x.push(x as i64);
                    proj_y.push(y as i64);
                }
                None => {
                    proj_x.push(-1);
                    proj_y.push(-1);
                }
            }
            confidence.push(p.confidence);
        }
        serde_json::json!({
            "version": 1,
            "camera_id": self.camera_id,
            "width": self.width,
            "height": self.height,
            "proj_x": proj_x,
            "proj_y": proj_y,
            "confidence": confidence,
        })
    }

    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<(), GrayCodeError> {
        let s = serde_json::to_string(&self.to_json())
            .map_err(|e| GrayCodeError::Manifest(e.to_string()))?;
        fs::write(path, s + "\n")?;
        Ok(())
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, GrayCodeError> {
        let err = |m: &str| GrayCodeError::Manifest(m.to_string());
        let camera_id = value["camera_id"]
            .as_str()
            .ok_or_else(|| err("camera_id missing"))?
            .to_string();
        let width = value["width"].as_u64().ok_or_else(|| err("width missing"))? as u32;
        let height = value["height"].as_u64().ok_or_else(|| err("height missing"))? as u32;
        let n = width as usize * height as usize;
        let proj_x = value["proj_x"].as_array().ok_or_else(|| err("proj_x missing"))?;
        let proj_y = value["proj_y"].as_array().ok_or_else(|| err("proj_y missing"))?;
        let conf = value["confidence"]
            .as_array()
            .ok_or_else(|| err("confidence missing"))?;
        if proj_x.len() != n || proj_y.len() != n || conf.len() != n {
            return Err(err("array lengths do not match dimensions"));
        }
        let mut pixels = Vec::with_capacity(n);
        for i in 0..n {
            let x = proj_x[i].as_i64().ok_or_else(|| err("proj_x entry"))?;
            let y = proj_y[i].as_i64().ok_or_else(|| err("proj_y entry"))?;
            let c = conf[i].as_f64().ok_or_else(|| err("confidence entry"))? as f32;
            let proj = if x < 0 || y < 0 {
                None
            } else {
                Some((x as u32, y as u32))
            };
            pixels.push(DecodedPixel {
                proj,
                confidence: c,
            });
        }
        Ok(Self {
            camera_id,
            width,
            height,
            pixels,
        })
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self, GrayCodeError> {
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| GrayCodeError::Manifest(e.to_string()))?;
        Self::from_json(&value)
    }
}

/// Decode a captured image stack into projector correspondences.
///
/// The stack must match the length and order of `generate_patterns(spec)`.
/// Per pixel, each bit is 1 iff the pattern frame is brighter than its
/// inverse; the bit confidence is the pattern/inverse contrast normalised by
/// the white-black range and the pixel confidence is the minimum over bits.
/// Pixels with zero dynamic range, confidence below `contrast_threshold`, or
/// a decoded coordinate outside the projector are left undecoded.
pub fn decode_stack(
    camera_id: &str,
    images: &[GrayImage],
    spec: &PatternSpec,
    contrast_threshold: f64,
) -> Result<CorrespondenceMap, GrayCodeError> {
    if !spec.include_inverses {
        return Err(GrayCodeError::MissingInverses);
    }
    if !spec.include_references {
        return Err(GrayCodeError::MissingReferences);
    }
    let expected = spec.pattern_count();
    if images.len() != expected {
        return Err(GrayCodeError::StackLengthMismatch {
            expected,
            got: images.len(),
        });
    }
    let (w, h) = images[0].dimensions();
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(GrayCodeError::DimensionMismatch {
                index: i,
                want_w: w,
                want_h: h,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
    }

    let white = &images[0];
    let black = &images[1];
    let col_bits = spec.col_bits() as usize;
    let row_bits = spec.row_bits() as usize;
    // Pattern k and its inverse sit at 2 + 2k and 2 + 2k + 1.
    let plane = |i: usize| (&images[2 + 2 * i], &images[2 + 2 * i + 1]);

    let mut map = CorrespondenceMap::new(camera_id, w, h);
    let threshold = contrast_threshold as f32;

    use rayon::prelude::*;
    let wid = w as usize;
    map.pixels
        .par_chunks_mut(wid)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                let (x, y) = (x as u32, y as u32);
                let iw = white.get(x, y) as f32;
                let ib = black.get(x, y) as f32;
                let range = iw - ib;
                if range <= 0.0 {
                    *out = DecodedPixel::UNDECODED;
                    continue;
                }
                let mut min_conf = f32::INFINITY;
                let mut gray_col: u64 = 0;
                for k in 0..col_bits {
                    let (pat, inv) = plane(k);
                    let ip = pat.get(x, y) as f32;
                    let ii = inv.get(x, y) as f32;
                    let conf = ((ip - ii).abs() / range).min(1.0);
                    min_conf = min_conf.min(conf);
                    gray_col = (gray_col << 1) | u64::from(ip > ii);
                }
                let mut gray_row: u64 = 0;
                for k in 0..row_bits {
                    let (pat, inv) = plane(col_bits + k);
                    let ip = pat.get(x, y) as f32;
                    let ii = inv.get(x, y) as f32;
                    let conf = ((ip - ii).abs() / range).min(1.0);
                    min_conf = min_conf.min(conf);
                    gray_row = (gray_row << 1) | u64::from(ip > ii);
                }
                let px = gray_to_binary(gray_col);
                let py = gray_to_binary(gray_row);
                let in_bounds =
                    px < spec.projector_width as u64 && py < spec.projector_height as u64;
                if min_conf < threshold || !in_bounds {
                    *out = DecodedPixel {
                        proj: None,
                        confidence: min_conf,
                    };
                } else {
                    *out = DecodedPixel {
                        proj: Some((px as u32, py as u32)),
                        confidence: min_conf,
                    };
                }
            }
        });

    Ok(map)
}
