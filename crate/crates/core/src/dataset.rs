//! Paired low/normal-light datasets: `<root>/low/<name>.png` with
//! `<root>/high/<name>.png`.

use std::path::Path;

use picat_tensor::Scalar;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{load_png, SrgbImage};

#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub name: String,
    pub low: SrgbImage<T>,
    pub high: SrgbImage<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset<T> {
    pairs: Vec<Pair<T>>,
}

impl<T: Scalar> PairedDataset<T> {
    pub fn new(pairs: Vec<Pair<T>>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no pairs".into()));
        }
        for p in &pairs {
            if p.low.dims() != p.high.dims() {
                return Err(Error::Dimension(format!(
                    "{}: low {:?} vs high {:?}",
                    p.name,
                    p.low.dims(),
                    p.high.dims()
                )));
            }
        }
        Ok(Self { pairs })
    }

    /// Pairs every `low/*.png` with the `high/` file of the same name,
    /// sorted by name. A low image without a partner is an error.
    pub fn load_dir(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let (low_dir, high_dir) = (root.join("low"), root.join("high"));
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&low_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    names.push(name.to_owned());
                }
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(Error::EmptyDataset(low_dir.display().to_string()));
        }
        let pairs = names
            .par_iter()
            .map(|name| {
                let high = high_dir.join(name);
                if !high.is_file() {
                    return Err(Error::Config(format!("{} has no partner in {}", name, high_dir.display())));
                }
                Ok(Pair {
                    name: name.trim_end_matches(".png").trim_end_matches(".PNG").to_owned(),
                    low: load_png(low_dir.join(name))?,
                    high: load_png(high)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair<T>] {
        &self.pairs
    }

    pub fn cast<U: Scalar>(&self) -> PairedDataset<U> {
        PairedDataset {
            pairs: self
                .pairs
                .iter()
                .map(|p| Pair {
                    name: p.name.clone(),
                    low: p.low.cast(),
                    high: p.high.cast(),
                })
                .collect(),
        }
    }

    /// Smallest image side, the upper bound for training patches.
    pub fn min_side(&self) -> usize {
        self.pairs.iter().map(|p| p.low.height().min(p.low.width())).min().unwrap_or(0)
    }
}
