//! On-disk dataset directory: `meta.txt` plus little-endian binary arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Graph, NodeId, Split};
use crate::error::{Error, Result};

pub(crate) fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    match fs::read(&path) {
        Ok(bytes) => Ok(bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path)),
        Err(e) => Err(e.into()),
    }
}

/// Parsed `key=value` metadata. Blank lines and `#` comments are skipped.
#[derive(Debug, Default)]
pub(crate) struct Meta(BTreeMap<String, String>);

impl Meta {
    pub fn read(dir: &Path) -> Result<Meta> {
        let text = String::from_utf8(read_file(dir, "meta.txt")?)
            .map_err(|_| Error::format("meta.txt is not utf-8"))?;
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("meta.txt line without '=': {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Meta(map))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.0
            .get(key)
            .ok_or_else(|| Error::format(format!("meta.txt lacks {key}")))?
            .parse()
            .map_err(|_| Error::format(format!("meta.txt {key} is not an integer")))
    }
}

fn expect_len(name: &str, bytes: &[u8], count: usize, width: usize) -> Result<()> {
    if bytes.len() != count * width {
        return Err(Error::format(format!(
            "{name} holds {} bytes, expected {count} x {width}",
            bytes.len()
        )));
    }
    Ok(())
}

pub(crate) fn read_u64s(dir: &Path, name: &str, count: usize) -> Result<Vec<u64>> {
    let bytes = read_file(dir, name)?;
    expect_len(name, &bytes, count, 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn read_u32s(dir: &Path, name: &str, count: usize) -> Result<Vec<u32>> {
    let bytes = read_file(dir, name)?;
    expect_len(name, &bytes, count, 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn read_f32s(dir: &Path, name: &str, count: usize) -> Result<Vec<f32>> {
    let bytes = read_file(dir, name)?;
    expect_len(name, &bytes, count, 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn read_u8s(dir: &Path, name: &str, count: usize) -> Result<Vec<u8>> {
    let bytes = read_file(dir, name)?;
    expect_len(name, &bytes, count, 1)?;
    Ok(bytes)
}

pub(crate) fn read_splits(dir: &Path, count: usize) -> Result<Vec<Split>> {
    read_u8s(dir, "masks.bin", count)?
        .into_iter()
        .enumerate()
        .map(|(v, b)| {
            Split::from_byte(b)
                .ok_or_else(|| Error::format(format!("mask byte {b} of node {v} not in 0..=3")))
        })
        .collect()
}

pub(crate) fn write_u64s(path: PathBuf, values: impl IntoIterator<Item = u64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(u64::to_le_bytes).collect();
    Ok(fs::write(path, bytes)?)
}

pub(crate) fn write_u32s(path: PathBuf, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok(fs::write(path, bytes)?)
}

pub(crate) fn write_f32s(path: PathBuf, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok(fs::write(path, bytes)?)
}

pub(crate) fn write_splits(path: PathBuf, splits: &[Split]) -> Result<()> {
    let bytes: Vec<u8> = splits.iter().map(|s| *s as u8).collect();
    Ok(fs::write(path, bytes)?)
}

pub(crate) fn meta_text(entries: &[(&str, usize)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn load_graph(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let meta = Meta::read(dir)?;
    let n = meta.usize("num_nodes")?;
    let m = meta.usize("num_edges")?;
    let d = meta.usize("feature_dim")?;
    let c = meta.usize("num_classes")?;
    let offsets = read_u64s(dir, "offsets.bin", n + 1)?;
    let targets = read_u64s(dir, "targets.bin", m)?
        .into_iter()
        .map(NodeId)
        .collect();
    let features = read_f32s(dir, "features.bin", n * d)?;
    let labels = read_u32s(dir, "labels.bin", n)?;
    let splits = read_splits(dir, n)?;
    Graph::from_csr(offsets, targets, d, c, features, labels, splits)
}

pub fn save_graph(g: &Graph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("meta.txt"),
        meta_text(&[
            ("num_nodes", g.num_nodes()),
            ("num_edges", g.num_edges()),
            ("feature_dim", g.feature_dim()),
            ("num_classes", g.num_classes()),
        ]),
    )?;
    write_u64s(dir.join("offsets.bin"), g.offsets().iter().copied())?;
    write_u64s(dir.join("targets.bin"), g.targets().iter().map(|t| t.0))?;
    write_f32s(dir.join("features.bin"), g.features())?;
    write_u32s(dir.join("labels.bin"), g.labels())?;
    write_splits(dir.join("masks.bin"), g.splits())
}
