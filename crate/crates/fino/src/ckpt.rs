//! Checkpoint container: a text manifest followed by named raw tensor
//! dumps. Used for model checkpoints (with optimizer state appended by
//! the trainer) and readable with nothing but this file's description:
//!
//! ```text
//! FINOCKPT 1\n
//! key=value\n ...
//! \n
//! tensors <count>\n
//! <name>\n<FNT1 blob>  (repeated)
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{FinoError, Result};
use crate::tensor::{Dtype, Tensor};

const HEADER: &str = "FINOCKPT 1";

pub fn write_checkpoint(
    path: &Path,
    manifest: &[(String, String)],
    tensors: &[(String, &Tensor)],
    dtype: Dtype,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    let werr = |e: std::io::Error| FinoError::io(path, e);
    writeln!(buf, "{HEADER}").map_err(werr)?;
    for (k, v) in manifest {
        debug_assert!(!k.contains('\n') && !v.contains('\n'));
        writeln!(buf, "{k}={v}").map_err(werr)?;
    }
    writeln!(buf).map_err(werr)?;
    writeln!(buf, "tensors {}", tensors.len()).map_err(werr)?;
    for (name, t) in tensors {
        writeln!(buf, "{name}").map_err(werr)?;
        t.write_fnt(&mut buf, dtype).map_err(werr)?;
    }
    std::fs::write(path, buf).map_err(werr)
}

pub fn read_checkpoint(path: &Path) -> Result<(Vec<(String, String)>, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| FinoError::io(path, e))?;
    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| FinoError::format(path, format!("unterminated line at byte {start}")))?;
        *pos = end + 1;
        String::from_utf8(bytes[start..end].to_vec())
            .map_err(|_| FinoError::format(path, format!("non-utf8 text at byte {start}")))
    };

    if line(&mut pos)? != HEADER {
        return Err(FinoError::format(path, "bad or unsupported checkpoint header"));
    }
    let mut manifest = Vec::new();
    loop {
        let l = line(&mut pos)?;
        if l.is_empty() {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| FinoError::format(path, format!("manifest line without '=': {l}")))?;
        manifest.push((k.to_string(), v.to_string()));
    }
    let count_line = line(&mut pos)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| FinoError::format(path, format!("bad tensor count line: {count_line}")))?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = line(&mut pos)?;
        let mut cursor = &bytes[pos..];
        let before = cursor.len();
        let t = Tensor::read_fnt(&mut cursor)
            .map_err(|e| FinoError::format(path, format!("tensor '{name}': {e}")))?;
        pos += before - cursor.len();
        tensors.push((name, t));
    }
    Ok((manifest, tensors))
}

pub fn manifest_get<'a>(manifest: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    manifest
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| FinoError::format(path, format!("manifest missing key '{key}'")))
}

pub fn manifest_parse<T: std::str::FromStr>(
    manifest: &[(String, String)],
    key: &str,
    path: &Path,
) -> Result<T> {
    manifest_get(manifest, key, path)?
        .parse()
        .map_err(|_| FinoError::format(path, format!("manifest key '{key}' is not a valid value")))
}
