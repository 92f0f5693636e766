//! Dataset references on the command line: a `.csv` path for the synthetic
//! regression task, or `images:labels` for an IDX pair, with optional
//! binarization, half-digit construction, and subsetting.

use std::path::Path;

use sfnn_core::data::{binarize, load_csv, load_idx, split_half_digit, Dataset};
use sfnn_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct DataRef {
    pub source: String,
    pub binarize_threshold: Option<f64>,
    pub half_digit: bool,
    pub subset: Option<usize>,
}

impl DataRef {
    pub fn new(source: &str) -> Self {
        DataRef {
            source: source.to_string(),
            binarize_threshold: None,
            half_digit: false,
            subset: None,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let mut ds = if let Some((images, labels)) = self.source.split_once(':') {
            load_idx(Path::new(images), Path::new(labels))?
        } else if self.source.ends_with(".csv") {
            load_csv(Path::new(&self.source))?
        } else {
            return Err(Error::Data(format!(
                "dataset reference '{}' is neither a .csv path nor an images:labels IDX pair",
                self.source
            )));
        };
        if let Some(n) = self.subset {
            if n > ds.len() {
                return Err(Error::Data(format!(
                    "subset of {n} rows requested but dataset has {}",
                    ds.len()
                )));
            }
            ds = ds.slice(0, n);
        }
        if let Some(threshold) = self.binarize_threshold {
            ds = binarize(&ds, threshold);
        }
        if self.half_digit {
            ds = split_half_digit(&ds)?;
        }
        ds.validate()?;
        Ok(ds)
    }
}
