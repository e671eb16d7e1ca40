//! The MGI image file: a text header followed by raw 16-bit pixels.
//!
//! ```text
//! MGIMG 1
//! patient.id = P-0001
//! image.rows = 2
//! image.cols = 2
//! image.bits = 16
//!
//! <rows*cols big-endian u16 samples, row-major>
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const MAGIC: &[u8] = b"MGIMG 1\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MgiError {
    #[error("missing MGIMG 1 magic line")]
    BadMagic,
    #[error("unknown header key {0:?}")]
    UnknownHeaderKey(String),
    #[error("pixel payload is {actual} bytes, header implies {expected}")]
    PayloadSizeMismatch { expected: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

macro_rules! header_keys {
    ($($var:ident => $text:literal),+ $(,)?) => {
        /// The controlled header vocabulary.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum HeaderKey { $($var),+ }

        impl HeaderKey {
            pub const ALL: &'static [HeaderKey] = &[$(HeaderKey::$var),+];

            pub fn as_str(self) -> &'static str {
                match self { $(HeaderKey::$var => $text),+ }
            }
        }

        impl FromStr for HeaderKey {
            type Err = MgiError;
            fn from_str(s: &str) -> Result<Self, MgiError> {
                match s {
                    $($text => Ok(HeaderKey::$var),)+
                    other => Err(MgiError::UnknownHeaderKey(other.to_string())),
                }
            }
        }
    };
}

header_keys! {
    PatientName => "patient.name",
    PatientId => "patient.id",
    PatientSex => "patient.sex",
    PatientBirthDate => "patient.birth_date",
    StudyId => "study.id",
    StudyDate => "study.date",
    SeriesId => "series.id",
    SeriesModality => "series.modality",
    ImageId => "image.id",
    ImageLaterality => "image.laterality",
    ImageView => "image.view",
    ImageRows => "image.rows",
    ImageCols => "image.cols",
    ImageBits => "image.bits",
    ImageDose => "image.dose_mgy",
    SiteId => "site.id",
}

impl fmt::Display for HeaderKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MgiFile {
    header: Vec<(HeaderKey, String)>,
    pixels: Vec<u16>,
}

impl MgiFile {
    /// Build a file from header entries and pixels. `image.rows`,
    /// `image.cols` and `image.bits` are set from the arguments if absent.
    pub fn new(
        mut header: Vec<(HeaderKey, String)>,
        rows: u32,
        cols: u32,
        pixels: Vec<u16>,
    ) -> Result<Self, MgiError> {
        for (key, value) in [
            (HeaderKey::ImageRows, rows.to_string()),
            (HeaderKey::ImageCols, cols.to_string()),
            (HeaderKey::ImageBits, "16".to_string()),
        ] {
            if !header.iter().any(|(k, _)| *k == key) {
                header.push((key, value));
            }
        }
        let f = MgiFile { header, pixels };
        f.validate()?;
        Ok(f)
    }

    pub fn header(&self) -> &[(HeaderKey, String)] {
        &self.header
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, key: HeaderKey) -> Option<&str> {
        self.header.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    /// Replace a value in place, or append the key if absent.
    pub fn set(&mut self, key: HeaderKey, value: impl Into<String>) -> Result<(), MgiError> {
        let value = value.into();
        check_value(key, &value)?;
        if matches!(key, HeaderKey::ImageRows | HeaderKey::ImageCols | HeaderKey::ImageBits) {
            return Err(MgiError::InvalidHeader(format!("{key} is fixed by the pixel payload")));
        }
        match self.header.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.header.push((key, value)),
        }
        Ok(())
    }

    /// Drop a header entry. The geometry keys cannot be removed.
    pub fn remove(&mut self, key: HeaderKey) -> Result<Option<String>, MgiError> {
        if matches!(key, HeaderKey::ImageRows | HeaderKey::ImageCols | HeaderKey::ImageBits) {
            return Err(MgiError::InvalidHeader(format!("{key} is fixed by the pixel payload")));
        }
        Ok(self
            .header
            .iter()
            .position(|(k, _)| *k == key)
            .map(|i| self.header.remove(i).1))
    }

    pub fn rows(&self) -> u32 {
        self.get(HeaderKey::ImageRows).and_then(|v| v.parse().ok()).unwrap_or(0)
    }

    pub fn cols(&self) -> u32 {
        self.get(HeaderKey::ImageCols).and_then(|v| v.parse().ok()).unwrap_or(0)
    }

    fn dims(&self) -> Result<(usize, usize), MgiError> {
        let dim = |key| -> Result<usize, MgiError> {
            let v = self
                .get(key)
                .ok_or_else(|| MgiError::InvalidHeader(format!("missing {key}")))?;
            v.parse::<u32>()
                .ok()
                .filter(|n| *n > 0)
                .map(|n| n as usize)
                .ok_or_else(|| MgiError::InvalidHeader(format!("{key} = {v:?}")))
        };
        let rows = dim(HeaderKey::ImageRows)?;
        let cols = dim(HeaderKey::ImageCols)?;
        match self.get(HeaderKey::ImageBits) {
            Some("16") => {}
            other => return Err(MgiError::InvalidHeader(format!("image.bits must be 16, got {other:?}"))),
        }
        Ok((rows, cols))
    }

    fn validate(&self) -> Result<(), MgiError> {
        let mut seen = std::collections::HashSet::new();
        for (k, v) in &self.header {
            if !seen.insert(*k) {
                return Err(MgiError::InvalidHeader(format!("duplicate key {k}")));
            }
            check_value(*k, v)?;
        }
        let (rows, cols) = self.dims()?;
        let expected = rows * cols;
        if self.pixels.len() != expected {
            return Err(MgiError::PayloadSizeMismatch {
                expected: expected * 2,
                actual: self.pixels.len() * 2,
            });
        }
        Ok(())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, MgiError> {
        let rest = bytes.strip_prefix(MAGIC).ok_or(MgiError::BadMagic)?;
        let mut header = Vec::new();
        let mut pos = 0;
        loop {
            let Some(nl) = rest[pos..].iter().position(|&b| b == b'\n') else {
                return Err(MgiError::InvalidHeader("header is not terminated by a blank line".into()));
            };
            let line = &rest[pos..pos + nl];
            pos += nl + 1;
            if line.is_empty() {
                break;
            }
            let line = std::str::from_utf8(line)
                .map_err(|_| MgiError::InvalidHeader("header is not UTF-8".into()))?;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MgiError::InvalidHeader(format!("expected `key = value`, got {line:?}")))?;
            let key: HeaderKey = key.trim().parse()?;
            header.push((key, value.trim().to_string()));
        }
        let payload = &rest[pos..];
        let probe = MgiFile {
            header,
            pixels: Vec::new(),
        };
        let (rows, cols) = probe.dims()?;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(2))
            .ok_or_else(|| MgiError::InvalidHeader("image dimensions overflow".into()))?;
        if payload.len() != expected {
            return Err(MgiError::PayloadSizeMismatch {
                expected,
                actual: payload.len(),
            });
        }
        let pixels = payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        let f = MgiFile {
            header: probe.header,
            pixels,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(256 + self.pixels.len() * 2);
        out.extend_from_slice(MAGIC);
        for (k, v) in &self.header {
            out.extend_from_slice(k.as_str().as_bytes());
            out.extend_from_slice(b" = ");
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        for p in &self.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }
}

fn check_value(key: HeaderKey, value: &str) -> Result<(), MgiError> {
    if value.contains(['\n', '\r']) || value.trim() != value {
        return Err(MgiError::InvalidHeader(format!("{key} value {value:?} cannot be encoded")));
    }
    Ok(())
}
