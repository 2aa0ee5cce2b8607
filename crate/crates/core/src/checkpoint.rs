//! Line-delimited JSON files for tensors and item tokens.
//!
//! A tensor file starts with a header line and holds one tensor per line:
//!
//! ```text
//! {"format":"lea-tensors","version":1,"count":2}
//! {"name":"w","shape":[1,2],"data":[0.5,-1.25]}
//! {"name":"b","shape":[1,1],"data":[0.0]}
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is exact.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamSet};
use crate::data::{ItemId, ItemToken};
use crate::error::{Error, Result};

pub const TENSOR_FORMAT: &str = "lea-tensors";
pub const TOKEN_FORMAT: &str = "lea-item-tokens";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    /// Where the file came from: usually the resolved run configuration and
    /// input hashes. Readers ignore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorLine {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TokenLine {
    item: u32,
    item_key: String,
    embedding: Vec<f64>,
}

fn check_header(h: &Header, format: &str) -> Result<()> {
    if h.format != format {
        return Err(Error::Parse(format!(
            "expected format {format:?}, found {:?}",
            h.format
        )));
    }
    if h.version != VERSION {
        return Err(Error::Parse(format!("unsupported version {}", h.version)));
    }
    Ok(())
}

pub fn write_tensors<W: Write>(
    mut w: W,
    params: &ParamSet,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    let header = Header {
        format: TENSOR_FORMAT.into(),
        version: VERSION,
        count: params.len(),
        dim: None,
        provenance: provenance.cloned(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let line = TensorLine {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            data: t.iter().copied().collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_tensors<R: BufRead>(r: R) -> Result<ParamSet> {
    let mut lines = r.lines();
    let header: Header = serde_json::from_str(
        &lines
            .next()
            .ok_or_else(|| Error::Parse("empty tensor file".into()))??,
    )?;
    check_header(&header, TENSOR_FORMAT)?;
    let mut ps = ParamSet::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TensorLine = serde_json::from_str(&line)?;
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data)
            .map_err(|e| Error::Parse(format!("tensor {}: {e}", t.name)))?;
        ps.push(t.name, m);
    }
    if ps.len() != header.count {
        return Err(Error::Parse(format!(
            "header promises {} tensors, found {}",
            header.count,
            ps.len()
        )));
    }
    Ok(ps)
}

pub fn save_tensors(
    path: &Path,
    params: &ParamSet,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(f, params, provenance)
}

/// The provenance object in the header of a tensor or token file.
pub fn read_provenance(path: &Path) -> Result<Option<serde_json::Value>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    let first = BufReader::new(f)
        .lines()
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))??;
    let header: Header = serde_json::from_str(&first)?;
    Ok(header.provenance)
}

pub fn load_tensors(path: &Path) -> Result<ParamSet> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    read_tensors(BufReader::new(f))
}

/// Copies tensors from `src` into `dst` by name, checking shapes.
pub fn restore(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::dim(format!(
            "checkpoint has {} tensors, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for (name, t) in src.names().iter().zip(src.tensors()) {
        let id = dst
            .id_of(name)
            .ok_or_else(|| Error::Parse(format!("unknown tensor {name:?}")))?;
        let d = dst.get_mut(id);
        if d.dim() != t.dim() {
            return Err(Error::dim(format!(
                "tensor {name}: {:?} vs {:?}",
                d.dim(),
                t.dim()
            )));
        }
        d.assign(t);
    }
    Ok(())
}

/// Item-token store: header with the embedding width, then one line per
/// item in id order.
pub fn write_tokens<W: Write>(
    mut w: W,
    tokens: &[ItemToken],
    item_keys: &[String],
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    if tokens.len() != item_keys.len() {
        return Err(Error::dim("one key per token required"));
    }
    let dim = tokens.first().map_or(0, |t| t.embedding.len());
    let header = Header {
        format: TOKEN_FORMAT.into(),
        version: VERSION,
        count: tokens.len(),
        dim: Some(dim),
        provenance: provenance.cloned(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (t, key) in tokens.iter().zip(item_keys) {
        let line = TokenLine {
            item: t.item.0,
            item_key: key.clone(),
            embedding: t.embedding.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_tokens<R: BufRead>(r: R) -> Result<(Vec<ItemToken>, Vec<String>)> {
    let mut lines = r.lines();
    let header: Header = serde_json::from_str(
        &lines
            .next()
            .ok_or_else(|| Error::Parse("empty token file".into()))??,
    )?;
    check_header(&header, TOKEN_FORMAT)?;
    let dim = header.dim.unwrap_or(0);
    let (mut tokens, mut keys) = (Vec::new(), Vec::new());
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TokenLine = serde_json::from_str(&line)?;
        if t.item as usize != tokens.len() {
            return Err(Error::Parse(format!(
                "token for item {} out of order",
                t.item
            )));
        }
        if t.embedding.len() != dim || t.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("bad embedding for item {}", t.item)));
        }
        tokens.push(ItemToken {
            item: ItemId(t.item),
            embedding: t.embedding,
        });
        keys.push(t.item_key);
    }
    if tokens.len() != header.count {
        return Err(Error::Parse(format!(
            "header promises {} tokens, found {}",
            header.count,
            tokens.len()
        )));
    }
    Ok((tokens, keys))
}

pub fn save_tokens(
    path: &Path,
    tokens: &[ItemToken],
    item_keys: &[String],
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    write_tokens(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        tokens,
        item_keys,
        provenance,
    )
}

pub fn load_tokens(path: &Path) -> Result<(Vec<ItemToken>, Vec<String>)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    read_tokens(BufReader::new(f))
}
