//! `.rvol` volume files: raw little-endian `f32` payload in x-fastest order
//! plus a JSON sidecar next to it (`name.rvol` / `name.json`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::volume::{Dims, Volume3D};

pub const DTYPE: &str = "f32le";
pub const ORDER: &str = "xyz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub order: String,
}

/// Sidecar path belonging to a payload path.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_volume<T: Scalar>(v: &Volume3D<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    v.validate()?;
    let sidecar = Sidecar {
        dims: v.dims().0,
        spacing: v.spacing(),
        dtype: DTYPE.to_string(),
        order: ORDER.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &x in v.data() {
        w.write_all(&x.as_f32().to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string(&sidecar)?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume3D<T>> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingSidecar(side));
    }
    let sc: Sidecar = read_json(&side)?;
    let format_err = |message: String| Error::Format {
        path: side.clone(),
        message,
    };
    if sc.dtype != DTYPE {
        return Err(format_err(format!("dtype must be {DTYPE:?}, got {:?}", sc.dtype)));
    }
    if sc.order != ORDER {
        return Err(format_err(format!("order must be {ORDER:?}, got {:?}", sc.order)));
    }
    let dims = Dims(sc.dims);
    dims.validate("dims")?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = dims.len() * 4;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(dims.len());
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !x.is_finite() {
            return Err(Error::NonFinite {
                field: format!("data[{i}] at {:?}", dims.coords(i)),
            });
        }
        data.push(T::of(x as f64));
    }
    Volume3D::new(dims, sc.spacing, data)
}
