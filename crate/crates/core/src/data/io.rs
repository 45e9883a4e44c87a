//! EMB1 embedding files, the key=value manifest and the alignment sidecar.
//!
//! EMB1 layout: `b"EMB1"`, `u32` rows, `u32` dim, then `rows * dim`
//! row-major little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::PairedDataset;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"EMB1";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_emb(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (rows, dim) = values.dim();
    let too_big = |n: usize| u32::try_from(n).map_err(|_| format_err(path, format!("{n} exceeds u32")));
    let mut buf = Vec::with_capacity(12 + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&too_big(rows)?.to_le_bytes());
    buf.extend_from_slice(&too_big(dim)?.to_le_bytes());
    for v in values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_emb(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "missing EMB1 magic"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    let (rows, dim) = (word(4), word(8));
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| format_err(path, "shape overflows"))?;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("{rows}x{dim} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, dim), data).expect("checked shape"))
}

/// Pairs row `i` of `path_x` with row `i` of `path_y`; alignment identity.
pub fn load_embeddings(path_x: &Path, path_y: &Path) -> Result<PairedDataset> {
    let xs = read_emb(path_x)?;
    let ys = read_emb(path_y)?;
    if xs.nrows() != ys.nrows() {
        return Err(Error::LengthMismatch { x: xs.nrows(), y: ys.nrows() });
    }
    PairedDataset::new(xs, ys)
}

pub fn write_alignment(path: &Path, alignment: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(alignment.len() * 5);
    for a in alignment {
        s.push_str(&a.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_alignment(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| {
            l.trim()
                .parse()
                .map_err(|_| format_err(path, format!("line {}: {l:?} is not an index", k + 1)))
        })
        .collect()
}

/// Plain-text `key=value` lines; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
    /// Directory that relative file entries resolve against.
    pub base: PathBuf,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self { entries: BTreeMap::new(), base: base.into() }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base.join(v))
    }

    pub fn parse(text: &str, base: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut m = Self::new(base);
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format_err(origin, format!("line {}: expected key=value", k + 1)))?;
            m.set(key.trim(), value.trim());
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, path)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Writes `<split>.x.emb`, `<split>.y.emb` and `<split>.alignment.txt` into
/// `dir` and records them in `manifest`.
pub fn write_dataset(dir: &Path, split: Split, ds: &PairedDataset, manifest: &mut Manifest) -> Result<()> {
    let name = split.as_str();
    let files = [
        (format!("{name}.x"), format!("{name}.x.emb")),
        (format!("{name}.y"), format!("{name}.y.emb")),
        (format!("{name}.alignment"), format!("{name}.alignment.txt")),
    ];
    write_emb(&dir.join(&files[0].1), &ds.xs)?;
    write_emb(&dir.join(&files[1].1), &ds.ys)?;
    write_alignment(&dir.join(&files[2].1), &ds.alignment)?;
    for (k, f) in files {
        manifest.set(k, f);
    }
    Ok(())
}

/// Loads one split named in a manifest, with its alignment sidecar if listed.
pub fn load_dataset(manifest: &Manifest, split: Split) -> Result<PairedDataset> {
    let name = split.as_str();
    let origin = manifest.base.join("manifest");
    let need = |key: String| {
        manifest
            .path(&key)
            .ok_or_else(|| format_err(&origin, format!("manifest has no {key} entry")))
    };
    let ds = load_embeddings(&need(format!("{name}.x"))?, &need(format!("{name}.y"))?)?;
    match manifest.path(&format!("{name}.alignment")) {
        Some(p) => {
            let alignment = read_alignment(&p)?;
            let (xs, ys) = (ds.xs, ds.ys);
            PairedDataset::with_alignment(xs, ys, alignment)
        }
        None => Ok(ds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn emb_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        let v = array![[1.5, -2.0, 0.25], [3.0, 0.0, -0.125]];
        write_emb(&p, &v).unwrap();
        assert_eq!(read_emb(&p).unwrap(), v);

        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_emb(&p), Err(Error::Format { .. })));
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_emb(&p), Err(Error::Format { .. })));
        assert!(matches!(read_emb(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_parses_comments_and_whitespace() {
        let m = Manifest::parse("# header\n a = b.emb \n\nc=d\n", "/data", Path::new("m")).unwrap();
        assert_eq!(m.get("a"), Some("b.emb"));
        assert_eq!(m.path("c"), Some(PathBuf::from("/data/d")));
        assert!(Manifest::parse("novalue\n", "", Path::new("m")).is_err());
    }
}
