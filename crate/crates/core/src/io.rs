//! Binary tensor files, checkpoint directories, and netpbm images.
//!
//! Tensor file layout (little endian):
//!
//! ```text
//! "PAKA" | version u32 = 1 | dtype u8 (0 = f64, 1 = f32) | ndim u8 = 4 | dims 4 × u64 | payload
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PAKA";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let width = if dtype == DType::F64 { 8 } else { 4 };
    let mut out = Vec::with_capacity(42 + width * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(4);
    for d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 42 || &bytes[..4] != MAGIC {
        return Err(bad("missing PAKA header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let width = match bytes[8] {
        0 => 8,
        1 => 4,
        other => return Err(bad(&format!("unknown dtype code {other}"))),
    };
    if bytes[9] != 4 {
        return Err(bad(&format!("expected 4 dims, found {}", bytes[9])));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 10 + 8 * i;
        *d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    }
    let n: usize = dims.iter().product();
    let payload = &bytes[42..];
    if payload.len() != n * width {
        return Err(bad(&format!(
            "payload holds {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            n * width
        )));
    }
    let data = if width == 8 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Tensor::new(dims, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: [usize; 4],
    pub learnable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Model description (kind, construction config, training step, ...).
    pub model: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn learnable_scalars(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.learnable)
            .map(|t| t.dims.iter().product::<usize>())
            .sum()
    }
}

/// Writes every parameter and buffer of `module` as a tensor file under `dir`
/// plus a JSON manifest. Buffers are stored as (1, len, 1, 1).
pub fn save_checkpoint(dir: &Path, module: &dyn Module, model: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut blobs = Vec::new();
    module.visit("", &mut |name, p| {
        entries.push(TensorEntry {
            name: name.to_string(),
            file: format!("{name}.bin"),
            dims: p.value.dims(),
            learnable: true,
            kind: Some(p.kind),
        });
        blobs.push(encode_tensor(&p.value, DType::F64));
    });
    module.visit_buffers("", &mut |name, b| {
        let t = Tensor::new([1, b.len(), 1, 1], b.to_vec()).expect("buffer dims");
        entries.push(TensorEntry {
            name: name.to_string(),
            file: format!("{name}.bin"),
            dims: t.dims(),
            learnable: false,
            kind: None,
        });
        blobs.push(encode_tensor(&t, DType::F64));
    });
    for (entry, blob) in entries.iter().zip(blobs) {
        let path = dir.join(&entry.file);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        format_version: VERSION,
        model,
        tensors: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        message: e.to_string(),
    })
}

/// Loads tensors named in the manifest into `module`, which must already have
/// the matching structure. Every module tensor must be present.
pub fn load_checkpoint(dir: &Path, module: &mut dyn Module) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    let mut loaded = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let t = read_tensor(&dir.join(&entry.file))?;
        if t.dims() != entry.dims {
            return Err(Error::Format {
                path: dir.join(&entry.file),
                message: format!("manifest dims {:?} but file holds {:?}", entry.dims, t.dims()),
            });
        }
        loaded.insert(entry.name.clone(), t);
    }
    let mut failure: Option<Error> = None;
    let missing = |name: &str| Error::Format {
        path: dir.join(MANIFEST),
        message: format!("checkpoint lacks tensor `{name}`"),
    };
    module.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match loaded.get(name) {
            Some(t) if t.dims() == p.value.dims() => p.value = t.clone(),
            Some(t) => failure = Some(Error::shape("load_checkpoint", &p.value.dims(), &t.dims())),
            None => failure = Some(missing(name)),
        }
    });
    module.visit_buffers_mut("", &mut |name, b| {
        if failure.is_some() {
            return;
        }
        match loaded.get(name) {
            Some(t) if t.len() == b.len() => b.copy_from_slice(t.data()),
            Some(t) => failure = Some(Error::shape("load_checkpoint", &[1, b.len(), 1, 1], &t.dims())),
            None => failure = Some(missing(name)),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Grayscale image; `maxval` ≤ 255 is 8-bit, otherwise 16-bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Gray {
    /// Quantizes values in [0, 1] (clamped) to `maxval` levels.
    pub fn from_unit(plane: &[f64], height: usize, width: usize, maxval: u16) -> Self {
        let pixels = plane
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * maxval as f64).round() as u16)
            .collect();
        Self {
            width,
            height,
            maxval,
            pixels,
        }
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / self.maxval as f64).collect()
    }
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        img.pixels.iter().for_each(|p| out.extend_from_slice(&p.to_be_bytes()));
    } else {
        out.extend(img.pixels.iter().map(|&p| p as u8));
    }
    out
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

fn header_fields(reader: &mut impl BufRead, count: usize, path: &Path) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut line = String::new();
    while fields.len() < count {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "truncated netpbm header".into(),
            });
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_string));
    }
    Ok(fields)
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let fields = header_fields(&mut reader, 4, path)?;
    if fields[0] != "P5" {
        return Err(bad(format!("expected P5, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header field `{s}`")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} out of range")));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let n = width * height;
    let pixels: Vec<u16> = if maxval > 255 {
        if payload.len() < 2 * n {
            return Err(bad("truncated 16-bit payload".into()));
        }
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        if payload.len() < n {
            return Err(bad("truncated 8-bit payload".into()));
        }
        payload[..n].iter().map(|&b| b as u16).collect()
    };
    Ok(Gray {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Rgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; 3 * width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn encode_ppm(img: &Rgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(path: &Path, img: &Rgb) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Rgb> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let fields = header_fields(&mut reader, 4, path)?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected an 8-bit P6 image".into()));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width".into()))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height".into()))?;
    let mut pixels = Vec::new();
    reader.read_to_end(&mut pixels).map_err(|e| Error::io(path, e))?;
    if pixels.len() < 3 * width * height {
        return Err(bad("truncated payload".into()));
    }
    pixels.truncate(3 * width * height);
    Ok(Rgb { width, height, pixels })
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
