//! 8-bit single-channel grids and their on-disk form (binary PGM).

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};

use crate::error::{Error, Result};

/// A row-major grid of 8-bit samples. Used for luma frames as well as
/// saliency and fixation maps.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Pixel rectangle inside a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "plane dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "plane {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be positive");
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "plane dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn ensure_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.dims() != (width, height) {
            return Err(Error::dims((width, height), self.dims()));
        }
        Ok(())
    }

    pub fn crop(&self, rect: Rect) -> Result<Plane> {
        if rect.width == 0
            || rect.height == 0
            || rect.x + rect.width > self.width
            || rect.y + rect.height > self.height
        {
            return Err(Error::InvalidArgument(format!(
                "crop {rect:?} outside {}x{} plane",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.area());
        for y in rect.y..rect.y + rect.height {
            data.extend_from_slice(&self.row(y)[rect.x..rect.x + rect.width]);
        }
        Plane::new(rect.width, rect.height, data)
    }

    /// Maximum sample inside `rect`.
    pub fn max_in(&self, rect: Rect) -> u8 {
        (rect.y..rect.y + rect.height)
            .map(|y| {
                self.row(y)[rect.x..rect.x + rect.width]
                    .iter()
                    .copied()
                    .max()
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }

    /// Reads an 8-bit binary PGM (`P5`).
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Plane> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let invalid = |reason: String| Error::Image {
            path: path.to_path_buf(),
            reason,
        };
        let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| invalid(e.to_string()))?;
        if decoder.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) {
            return Err(invalid(format!(
                "expected binary graymap (P5), found {:?}",
                decoder.subtype()
            )));
        }
        if decoder.color_type() != ColorType::L8 {
            return Err(invalid(format!(
                "expected 8-bit samples, found {:?}",
                decoder.color_type()
            )));
        }
        let (w, h) = decoder.dimensions();
        let mut data = vec![0u8; w as usize * h as usize];
        decoder
            .read_image(&mut data)
            .map_err(|e| invalid(e.to_string()))?;
        Plane::new(w as usize, h as usize, data).map_err(|e| invalid(e.to_string()))
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                &self.data,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::L8,
            )
            .expect("in-memory PGM encoding cannot fail for a valid plane");
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_pgm_bytes())
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = parent_dir(path);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}
