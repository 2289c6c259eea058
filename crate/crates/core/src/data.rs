//! Multi-view dataset container and its on-disk layout.
//!
//! A dataset directory holds `manifest.toml` plus, per split, one matrix file
//! per view (`{split}_view{i}.bin`) and an optional label file
//! (`{split}_labels.bin`).
//!
//! Matrix file: `b"WVAEMAT1"`, `u64` rows, `u64` cols, then row-major f64.
//! Label file: `b"WVAELAB1"`, `u64` count, then `i32` labels.
//! All integers and floats are little-endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::expfam::Family;
use crate::simdata::GeneratorRecord;

pub const MATRIX_MAGIC: &[u8; 8] = b"WVAEMAT1";
pub const LABEL_MAGIC: &[u8; 8] = b"WVAELAB1";

/// Dense row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("matrix row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Concatenates `self` and `other` column-wise.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("hstack rows", self.rows, other.rows)?;
        let mut data = Vec::with_capacity(self.rows * (self.cols + other.cols));
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix::from_vec(self.rows, self.cols + other.cols, data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &str) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::Format {
                path: path.into(),
                reason: "bad matrix magic".into(),
            });
        }
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        expect_eof(r, path)?;
        Ok(Self { rows, cols, data })
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn expect_eof(r: &mut impl Read, path: &str) -> Result<()> {
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.is_empty() {
        Ok(())
    } else {
        Err(Error::Format {
            path: path.into(),
            reason: format!("{} trailing bytes", rest.len()),
        })
    }
}

pub fn write_labels(w: &mut impl Write, labels: &[u32]) -> Result<()> {
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for &l in labels {
        w.write_all(&(l as i32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_labels(r: &mut impl Read, path: &str) -> Result<Vec<u32>> {
    let bad = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != LABEL_MAGIC {
        return Err(bad("bad label magic".into()));
    }
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        let v = i32::from_le_bytes(buf);
        if v < 0 {
            return Err(bad(format!("negative label {v}")));
        }
        out.push(v as u32);
    }
    expect_eof(r, path)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// `N` aligned samples across `V` views with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub families: Vec<Family>,
    pub views: Vec<Matrix>,
    pub labels: Option<Vec<u32>>,
    pub classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl MultiViewDataset {
    pub fn new(
        families: Vec<Family>,
        views: Vec<Matrix>,
        labels: Option<Vec<u32>>,
        classes: usize,
        split: Split,
        seed: u64,
    ) -> Result<Self> {
        check_dim("view families", views.len(), families.len())?;
        let n = views.first().map_or(0, |m| m.rows);
        for v in &views {
            check_dim("samples per view", n, v.rows)?;
        }
        if let Some(l) = &labels {
            check_dim("labels", n, l.len())?;
            if let Some(&bad) = l.iter().find(|&&y| y as usize >= classes) {
                return Err(Error::IndexOutOfRange {
                    context: "label",
                    index: bad as usize,
                    bound: classes,
                });
            }
        }
        Ok(Self {
            families,
            views,
            labels,
            classes,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.views.first().map_or(0, |m| m.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        self.views.iter().map(|m| m.cols).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Vec<Matrix> {
        self.views.iter().map(|m| m.select_rows(idx)).collect()
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Option<Vec<u32>> {
        self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect())
    }

    /// All views concatenated column-wise.
    pub fn cascaded_features(&self) -> Result<Matrix> {
        let mut it = self.views.iter();
        let first = it.next().cloned().unwrap_or_else(|| Matrix::zeros(0, 0));
        it.try_fold(first, |acc, m| acc.hstack(m))
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| {
            let mut c = vec![0; self.classes];
            for &y in l {
                c[y as usize] += 1;
            }
            c
        })
    }
}

/// Contents of `manifest.toml` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub classes: usize,
    pub families: Vec<Family>,
    pub dims: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub generator: Option<GeneratorRecord>,
}

fn view_file(split: Split, i: usize) -> String {
    format!("{}_view{i}.bin", split.name())
}

fn label_file(split: Split) -> String {
    format!("{}_labels.bin", split.name())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes a train/test pair plus manifest into `dir`.
pub fn save_dataset(
    dir: &Path,
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    generator: Option<GeneratorRecord>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format_version: 1,
        classes: train.classes,
        families: train.families.clone(),
        dims: train.dims(),
        n_train: train.len(),
        n_test: test.len(),
        seed: train.seed,
        generator,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    for ds in [train, test] {
        for (i, m) in ds.views.iter().enumerate() {
            write_file(&dir.join(view_file(ds.split, i)), |w| m.write_to(w))?;
        }
        if let Some(l) = &ds.labels {
            write_file(&dir.join(label_file(ds.split)), |w| write_labels(w, l))?;
        }
    }
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path)?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Loads one split. Labels are `None` when the label file is absent.
pub fn load_split(dir: &Path, split: Split) -> Result<MultiViewDataset> {
    let manifest = load_manifest(dir)?;
    let mut views = Vec::with_capacity(manifest.families.len());
    for (i, &dim) in manifest.dims.iter().enumerate() {
        let path = dir.join(view_file(split, i));
        let m = Matrix::read_from(&mut BufReader::new(fs::File::open(&path)?), &path.display().to_string())?;
        check_dim("view width vs manifest", dim, m.cols)?;
        views.push(m);
    }
    let lpath = dir.join(label_file(split));
    let labels = if lpath.exists() {
        Some(read_labels(&mut BufReader::new(fs::File::open(&lpath)?), &lpath.display().to_string())?)
    } else {
        None
    };
    MultiViewDataset::new(manifest.families, views, labels, manifest.classes, split, manifest.seed)
}
