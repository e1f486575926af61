//! Frozen per-class text embeddings.
//!
//! A bank on disk is a directory holding `manifest.json` and
//! `embeddings.ptx`, a `[num_classes, d_t]` tensor whose row `i` belongs to
//! the class with index `i`. Externally computed embeddings can also be
//! imported from a JSON object mapping class names to vectors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const EMBEDDINGS: &str = "embeddings.ptx";

/// Rows within this distance of unit norm are stored verbatim.
const NORM_TOL: f64 = 1e-6;
/// Synthetic banks are redrawn until every pair is below this |cosine|.
const MAX_COSINE: f64 = 0.6;
const MAX_DRAWS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankSource {
    SyntheticSeeded,
    Imported,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    d_t: usize,
    classes: IndexMap<String, usize>,
    source: BankSource,
    /// Prompt wording used to compute imported embeddings, when known.
    #[serde(default)]
    prompt_template: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextBank {
    names: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Tensor<f32>,
    source: BankSource,
    prompt_template: Option<String>,
}

fn normalize(row: &[f64]) -> Vec<f32> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| (v / n) as f32).collect()
}

fn max_abs_cosine(rows: &[Vec<f32>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
            worst = worst.max(dot.abs());
        }
    }
    worst
}

impl TextBank {
    fn from_rows(
        names: Vec<String>,
        rows: Vec<Vec<f32>>,
        source: BankSource,
        prompt_template: Option<String>,
    ) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if names.is_empty() || d == 0 {
            return Err(Error::invalid("text bank needs at least one non-empty class"));
        }
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate class name {n:?}")));
            }
        }
        let data = rows.into_iter().flatten().collect();
        Ok(TextBank {
            embeddings: Tensor::new(&[names.len(), d], data)?,
            names,
            index,
            source,
            prompt_template,
        })
    }

    /// Seeded Gaussian vectors on the unit sphere, one per class.
    pub fn build_synthetic(class_names: &[String], d_t: usize, seed: u64) -> Result<Self> {
        if d_t < 8 {
            return Err(Error::invalid(format!("text dimension {d_t} is below 8")));
        }
        let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
        for draw in 0..MAX_DRAWS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw);
            let rows: Vec<Vec<f32>> = class_names
                .iter()
                .map(|_| {
                    let g: Vec<f64> = (0..d_t).map(|_| StandardNormal.sample(&mut rng)).collect();
                    normalize(&g)
                })
                .collect();
            let worst = max_abs_cosine(&rows);
            if best.as_ref().is_none_or(|(b, _)| worst < *b) {
                best = Some((worst, rows));
            }
            if worst < MAX_COSINE {
                break;
            }
        }
        let (_, rows) = best.unwrap();
        Self::from_rows(class_names.to_vec(), rows, BankSource::SyntheticSeeded, None)
    }

    /// Load a bank directory, or a JSON object `{class: [values...]}`.
    /// Rows are L2-normalised on load.
    pub fn import_bank(path: &Path) -> Result<Self> {
        if path.is_dir() {
            return Self::read_dir(path);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: IndexMap<String, Vec<f64>> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let Some(d) = entries.values().next().map(Vec::len) else {
            return Err(Error::format(path, "no classes"));
        };
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for (name, v) in entries {
            if v.len() != d {
                return Err(Error::format(
                    path,
                    format!("class {name:?} has dimension {}, expected {d}", v.len()),
                ));
            }
            rows.push(Self::checked_row(&name, &v, path)?);
            names.push(name);
        }
        Self::from_rows(names, rows, BankSource::Imported, None)
    }

    fn checked_row(name: &str, v: &[f64], path: &Path) -> Result<Vec<f32>> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(path, format!("class {name:?} has non-finite values")));
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::format(path, format!("class {name:?} has a zero embedding")));
        }
        if (n - 1.0).abs() <= NORM_TOL {
            Ok(v.iter().map(|&x| x as f32).collect())
        } else {
            Ok(normalize(v))
        }
    }

    fn read_dir(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let epath = dir.join(EMBEDDINGS);
        let emb = Tensor::<f32>::load(&epath)?;
        let &[rows, d] = emb.shape() else {
            return Err(Error::format(&epath, "embedding table must be 2-D"));
        };
        if d != m.d_t {
            return Err(Error::format(
                &epath,
                format!("table width {d} disagrees with manifest d_t {}", m.d_t),
            ));
        }
        if rows != m.classes.len() {
            return Err(Error::format(
                &epath,
                format!("{rows} rows for {} classes", m.classes.len()),
            ));
        }
        let mut names = vec![String::new(); rows];
        for (name, &i) in &m.classes {
            if i >= rows || !names[i].is_empty() {
                return Err(Error::format(&mpath, format!("bad index {i} for class {name:?}")));
            }
            names[i] = name.clone();
        }
        let mut out = Vec::with_capacity(rows);
        for (i, name) in names.iter().enumerate() {
            let row: Vec<f64> = emb.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
            out.push(Self::checked_row(name, &row, &epath)?);
        }
        Self::from_rows(names, out, m.source, m.prompt_template)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = Manifest {
            d_t: self.dim(),
            classes: self.names.iter().cloned().zip(0..).collect(),
            source: self.source,
            prompt_template: self.prompt_template.clone(),
        };
        let mpath = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
        self.embeddings.save(&dir.join(EMBEDDINGS))
    }

    pub fn with_prompt_template(mut self, template: impl Into<String>) -> Self {
        self.prompt_template = Some(template.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    pub fn source(&self) -> BankSource {
        self.source
    }

    pub fn prompt_template(&self) -> Option<&str> {
        self.prompt_template.as_deref()
    }

    pub fn embeddings(&self) -> &Tensor<f32> {
        &self.embeddings
    }

    pub fn contains(&self, class: &str) -> bool {
        self.index.contains_key(class)
    }

    /// The frozen embedding of `class`.
    pub fn lookup(&self, class: &str) -> Result<&[f32]> {
        let i = *self.index.get(class).ok_or_else(|| Error::UnknownClass {
            name: class.to_string(),
            known: self.names.clone(),
        })?;
        let d = self.dim();
        Ok(&self.embeddings.data()[i * d..(i + 1) * d])
    }

    pub fn max_abs_cosine(&self) -> f64 {
        let d = self.dim();
        let rows: Vec<Vec<f32>> = self.embeddings.data().chunks(d).map(<[f32]>::to_vec).collect();
        max_abs_cosine(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn synthetic_is_deterministic_and_unit_norm() {
        let a = TextBank::build_synthetic(&names(5), 32, 7).unwrap();
        let b = TextBank::build_synthetic(&names(5), 32, 7).unwrap();
        assert_eq!(a.embeddings().to_bytes(), b.embeddings().to_bytes());
        for row in a.embeddings().data().chunks(32) {
            let n: f64 = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ten_classes_near_orthogonal() {
        let b = TextBank::build_synthetic(&names(10), 64, 0).unwrap();
        assert!(b.max_abs_cosine() < 0.6, "{}", b.max_abs_cosine());
    }

    #[test]
    fn rejects_duplicates_and_small_dim() {
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(TextBank::build_synthetic(&dup, 16, 0).is_err());
        assert!(TextBank::build_synthetic(&names(2), 4, 0).is_err());
    }

    #[test]
    fn lookup_unknown_lists_known() {
        let b = TextBank::build_synthetic(&["disk".into(), "ring".into()], 16, 0).unwrap();
        let err = b.lookup("zebra").unwrap_err().to_string();
        assert!(
            err.contains("zebra") && err.contains("disk") && err.contains("ring"),
            "{err}"
        );
        assert_eq!(b.lookup("ring").unwrap(), b.lookup("ring").unwrap());
    }

    #[test]
    fn directory_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = TextBank::build_synthetic(&names(4), 16, 3).unwrap();
        b.write(dir.path()).unwrap();
        let back = TextBank::import_bank(dir.path()).unwrap();
        assert_eq!(back, b);
        let second = tempfile::tempdir().unwrap();
        back.write(second.path()).unwrap();
        for f in [MANIFEST, EMBEDDINGS] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(second.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn json_import_normalizes_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.json");
        fs::write(&p, r#"{"cat": [3.0, 4.0, 0.0, 0.0], "dog": [0.0, 0.0, 2.0, 0.0]}"#).unwrap();
        let b = TextBank::import_bank(&p).unwrap();
        assert_eq!(b.lookup("cat").unwrap(), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(b.source(), BankSource::Imported);

        fs::write(&p, r#"{"cat": [1.0, 0.0], "dog": [1.0, 0.0, 0.0]}"#).unwrap();
        let err = TextBank::import_bank(&p).unwrap_err().to_string();
        assert!(err.contains("dog"), "{err}");

        fs::write(&p, r#"{"cat": [1.0, 1e400]}"#).unwrap();
        assert!(TextBank::import_bank(&p).is_err());
    }
}
