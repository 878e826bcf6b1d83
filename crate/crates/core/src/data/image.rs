//! Image datasets stored in a raw little-endian tensor file.
//!
//! ```text
//! magic "IPIM" | u32 N | u32 C | u32 H | u32 W | u32 class_count
//! N x u32 labels | N*C*H*W x u8 pixels (row-major N, C, H, W; value / 255)
//! ```

use std::path::Path;

use ndarray::{Array2, Array4};

use crate::data::tabular::{FeatureKind, TabularDataset};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IPIM";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// `N x C x H x W`, values in `[0, 1]`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl ImageDataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::dim("image count", images.shape()[0], labels.len()));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::State("pixel values must lie in [0, 1]".into()));
        }
        if labels.iter().any(|&y| y >= class_count) {
            return Err(Error::State("label out of range".into()));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Side length; images are square.
    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Rows of flattened `C*H*W` pixels, for the dense network.
    pub fn to_flat(&self) -> Result<TabularDataset> {
        let n = self.labels.len();
        let d = self.images.len() / n.max(1);
        let flat = Array2::from_shape_vec((n, d), self.images.iter().copied().collect())
            .map_err(|e| Error::State(e.to_string()))?;
        TabularDataset::new(
            flat,
            self.labels.clone(),
            vec![FeatureKind::Numeric; d],
            self.class_count,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Ingestion {
            path: path.to_path_buf(),
            row: None,
            column: None,
            message: m.to_string(),
        };
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("not a raw image tensor file"));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (n, c, h, w, classes) = (word(0), word(1), word(2), word(3), word(4));
        if h != w {
            return Err(bad("images must be square"));
        }
        let labels_end = 24 + 4 * n;
        let expected = labels_end + n * c * h * w;
        if bytes.len() != expected {
            return Err(bad(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let labels = bytes[24..labels_end]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let pixels = bytes[labels_end..]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let images =
            Array4::from_shape_vec((n, c, h, w), pixels).map_err(|e| bad(&e.to_string()))?;
        Self::new(images, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.images.shape();
        let mut out = Vec::with_capacity(24 + 4 * s[0] + self.images.len());
        out.extend_from_slice(MAGIC);
        for v in [s[0], s[1], s[2], s[3], self.class_count] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out.extend(
            self.images
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
