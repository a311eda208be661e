//! Token files.
//!
//! Binary layout, little-endian:
//! `"TPTK"`, u32 version, u32 L, u32 D_AR, u32 p_x, u32 p_y, u32 p_z,
//! u8 halfplane, u8 kept half (0 front, 1 rear), u32 ordering version,
//! `L * D_AR` f32 token values, then `L` provenance records of
//! (u8 plane, u32 row, u32 col).

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::json;

use super::{KeepHalf, PatchConfig, PlaneId, Provenance, TokenSequence, ORDERING_VERSION};
use crate::ndtensor::Tensor;

pub const TOKEN_MAGIC: &[u8; 4] = b"TPTK";
pub const TOKEN_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TokenFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a token file")]
    BadMagic,
    #[error("unsupported token file version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt token file: {0}")]
    Corrupt(String),
}

pub fn write_tokens(seq: &TokenSequence, path: impl AsRef<Path>) -> Result<(), TokenFileError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let c = &seq.config;
    w.write_all(TOKEN_MAGIC)?;
    w.write_u32::<LittleEndian>(TOKEN_VERSION)?;
    w.write_u32::<LittleEndian>(seq.len() as u32)?;
    w.write_u32::<LittleEndian>(c.d_ar as u32)?;
    for p in c.patch() {
        w.write_u32::<LittleEndian>(p as u32)?;
    }
    w.write_u8(c.halfplane as u8)?;
    w.write_u8(match c.keep {
        KeepHalf::Front => 0,
        KeepHalf::Rear => 1,
    })?;
    w.write_u32::<LittleEndian>(seq.ordering_version)?;
    for v in seq.tokens.data() {
        w.write_f32::<LittleEndian>(*v as f32)?;
    }
    for p in &seq.provenance {
        w.write_u8(p.plane.code())?;
        w.write_u32::<LittleEndian>(p.row)?;
        w.write_u32::<LittleEndian>(p.col)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<TokenSequence, TokenFileError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(TokenFileError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != TOKEN_VERSION {
        return Err(TokenFileError::UnsupportedVersion(version));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let d_ar = r.read_u32::<LittleEndian>()? as usize;
    let mut p = [0usize; 3];
    for v in &mut p {
        *v = r.read_u32::<LittleEndian>()? as usize;
    }
    let halfplane = r.read_u8()? != 0;
    let keep = match r.read_u8()? {
        0 => KeepHalf::Front,
        1 => KeepHalf::Rear,
        k => return Err(TokenFileError::Corrupt(format!("kept-half code {k}"))),
    };
    let ordering_version = r.read_u32::<LittleEndian>()?;
    let mut data = vec![0f32; len * d_ar];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let provenance = (0..len)
        .map(|_| {
            let code = r.read_u8()?;
            let plane = PlaneId::from_code(code).ok_or_else(|| TokenFileError::Corrupt(format!("plane code {code}")))?;
            Ok(Provenance {
                plane,
                row: r.read_u32::<LittleEndian>()?,
                col: r.read_u32::<LittleEndian>()?,
            })
        })
        .collect::<Result<Vec<_>, TokenFileError>>()?;
    if !r.fill_buf()?.is_empty() {
        return Err(TokenFileError::Corrupt("trailing bytes".into()));
    }
    let tokens = Tensor::new(data.into_iter().map(f64::from).collect(), &[len, d_ar])
        .map_err(|e| TokenFileError::Corrupt(e.to_string()))?;
    Ok(TokenSequence {
        tokens,
        provenance,
        config: PatchConfig {
            px: p[0],
            py: p[1],
            pz: p[2],
            d_ar,
            halfplane,
            keep,
        },
        ordering_version,
    })
}

/// JSON-lines metadata: a header object, then one object per token.
pub fn write_jsonl(seq: &TokenSequence, path: impl AsRef<Path>) -> Result<(), TokenFileError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let c = &seq.config;
    let header = json!({
        "format": "triplane-tokens",
        "version": TOKEN_VERSION,
        "tokens": seq.len(),
        "d_ar": c.d_ar,
        "patch": c.patch(),
        "halfplane": c.halfplane,
        "keep": c.keep,
        "ordering": "xy,xz,yz;row-major",
        "ordering_version": ORDERING_VERSION,
    });
    writeln!(w, "{header}")?;
    for (i, p) in seq.provenance.iter().enumerate() {
        writeln!(w, "{}", json!({"index": i, "plane": p.plane, "row": p.row, "col": p.col}))?;
    }
    w.flush()?;
    Ok(())
}
