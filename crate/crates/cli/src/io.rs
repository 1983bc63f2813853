//! On-disk formats.
//!
//! Arrays are a one-line ASCII header followed by little-endian payload:
//!
//! * image / vector: `"{w} {h}\n"` then `w*h` f64, row-major;
//! * image stack: `"{w} {h} {frames}\n"` then the frames back to back;
//! * sparse matrix: `"csr {rows} {cols} {nnz}\n"` then `rows+1` u64 row
//!   pointers, `nnz` u32 column indices and `nnz` f64 values.
//!
//! A dictionary is stored as an image with `w = atom length` and
//! `h = number of atoms`, one atom per row. Renders are binary PGM (P5).
//!
//! Every write goes to a temporary file in the target directory and is
//! renamed into place.

use std::io::Write;
use std::path::Path;

use mkrem::dictionary::{Dictionary, PatchMatrix};
use mkrem::linalg::SparseMatrix;
use mkrem::Image;

use crate::error::{CliError, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Splits off the header line and parses its whitespace-separated fields.
fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Vec<&'a str>, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::format(path, "no header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| CliError::format(path, "header is not text"))?;
    Ok((header.split_whitespace().collect(), &bytes[nl + 1..]))
}

fn parse_usize(path: &Path, field: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| CliError::format(path, format!("bad header field {field:?}")))
}

fn push_f64(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_f64(path: &Path, payload: &[u8], n: usize) -> Result<Vec<f64>> {
    if payload.len() != n * 8 {
        return Err(CliError::format(
            path,
            format!("payload has {} bytes, header declares {}", payload.len(), n * 8),
        ));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_array(width: usize, height: usize, data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(width * height, data.len());
    let mut out = format!("{width} {height}\n").into_bytes();
    push_f64(&mut out, data);
    out
}

pub fn write_array(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    write_atomic(path, &encode_array(width, height, data))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_array(path, img.width(), img.height(), img.data())
}

/// Returns `(width, height, data)`.
pub fn read_array(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read(path)?;
    let (fields, payload) = split_header(path, &bytes)?;
    if fields.len() != 2 {
        return Err(CliError::format(path, "expected a `width height` header"));
    }
    let (w, h) = (parse_usize(path, fields[0])?, parse_usize(path, fields[1])?);
    Ok((w, h, take_f64(path, payload, w * h)?))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (w, h, data) = read_array(path)?;
    Image::new(w, h, data).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_stack(path: &Path, width: usize, height: usize, frames: &[Vec<f64>]) -> Result<()> {
    let mut out = format!("{width} {height} {}\n", frames.len()).into_bytes();
    for f in frames {
        debug_assert_eq!(f.len(), width * height);
        push_f64(&mut out, f);
    }
    write_atomic(path, &out)
}

pub fn read_stack(path: &Path) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let bytes = read(path)?;
    let (fields, payload) = split_header(path, &bytes)?;
    if fields.len() != 3 {
        return Err(CliError::format(path, "expected a `width height frames` header"));
    }
    let w = parse_usize(path, fields[0])?;
    let h = parse_usize(path, fields[1])?;
    let n = parse_usize(path, fields[2])?;
    let flat = take_f64(path, payload, w * h * n)?;
    let frames = if w * h == 0 {
        vec![Vec::new(); n]
    } else {
        flat.chunks_exact(w * h).map(<[f64]>::to_vec).collect()
    };
    Ok((w, h, frames))
}

pub fn write_csr(path: &Path, m: &SparseMatrix) -> Result<()> {
    let mut out = format!("csr {} {} {}\n", m.n_rows(), m.n_cols(), m.nnz()).into_bytes();
    out.reserve(m.indptr().len() * 8 + m.nnz() * 12);
    for &p in m.indptr() {
        out.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for &c in m.indices() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    push_f64(&mut out, m.values());
    write_atomic(path, &out)
}

pub fn read_csr(path: &Path) -> Result<SparseMatrix> {
    let bytes = read(path)?;
    let (fields, payload) = split_header(path, &bytes)?;
    if fields.len() != 4 || fields[0] != "csr" {
        return Err(CliError::format(path, "expected a `csr rows cols nnz` header"));
    }
    let rows = parse_usize(path, fields[1])?;
    let cols = parse_usize(path, fields[2])?;
    let nnz = parse_usize(path, fields[3])?;
    let (ptr_len, idx_len) = ((rows + 1) * 8, nnz * 4);
    if payload.len() != ptr_len + idx_len + nnz * 8 {
        return Err(CliError::format(path, "payload size does not match header"));
    }
    let indptr = payload[..ptr_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let indices = payload[ptr_len..ptr_len + idx_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = take_f64(path, &payload[ptr_len + idx_len..], nnz)?;
    SparseMatrix::new(rows, cols, indptr, indices, values).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_dictionary(path: &Path, d: &Dictionary) -> Result<()> {
    write_array(path, d.dim(), d.n_atoms(), &d.atoms().data)
}

pub fn read_dictionary(path: &Path) -> Result<Dictionary> {
    let (dim, n, data) = read_array(path)?;
    let atoms = PatchMatrix { dim, n, data };
    Dictionary::new(atoms).map_err(|e| CliError::format(path, e.to_string()))
}

/// 8-bit grayscale render scaled so that `max` maps to 255.
pub fn encode_pgm(img: &Image, max: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    out.extend(img.data().iter().map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_pgm(path: &Path, img: &Image, max: f64) -> Result<()> {
    write_atomic(path, &encode_pgm(img, max))
}
