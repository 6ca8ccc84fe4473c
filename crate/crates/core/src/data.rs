//! Manifests (`path,label` CSV) and in-memory datasets.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hgt1;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "path,label";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory sample paths are resolved against.
    pub root: PathBuf,
    pub rows: Vec<(String, usize)>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(Error::Data(format!("manifest must start with `{MANIFEST_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let (path, label) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::Data(format!("manifest line {}: expected path,label", i + 1)))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("manifest line {}: bad label `{}`", i + 1, label.trim())))?;
            rows.push((path.trim().to_string(), label));
        }
        Ok(Manifest { root: root.into(), rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for (p, l) in &self.rows {
            s.push_str(&format!("{p},{l}\n"));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Smallest class count covering every label.
    pub fn inferred_classes(&self) -> usize {
        self.rows.iter().map(|(_, l)| l + 1).max().unwrap_or(0)
    }

    pub fn sample_path(&self, i: usize) -> PathBuf {
        let p = Path::new(&self.rows[i].0);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    /// Loads every sample; all images must share one `(ch, h, w)` shape.
    pub fn load(manifest: &Manifest, classes: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        for (i, (_, label)) in manifest.rows.iter().enumerate() {
            if *label >= classes {
                return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
            }
            let path = manifest.sample_path(i);
            if !path.exists() {
                return Err(Error::Data(format!("sample {} does not exist", path.display())));
            }
            let img = hgt1::load(&path)?;
            if img.rank() != 3 {
                return Err(Error::Data(format!("{}: expected (ch,h,w), got {:?}", path.display(), img.shape())));
            }
            if let Some(first) = images.first() {
                let first: &Tensor = first;
                if first.shape() != img.shape() {
                    return Err(Error::Data(format!(
                        "{}: shape {:?} differs from {:?}",
                        path.display(),
                        img.shape(),
                        first.shape()
                    )));
                }
            }
            images.push(img);
            labels.push(*label);
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
