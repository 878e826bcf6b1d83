//! The invariant transform family: SimCLR-style image augmentations and
//! SCARF-style feature corruption, sampled from seeded streams.

pub mod image;
pub mod tabular;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmpiricalMarginal;
use crate::error::{Error, Result};

pub use self::image::{color_jitter, grayscale, horizontal_flip, resize_crop};
pub use self::tabular::feature_corrupt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformKind {
    ResizeCrop { scale: (f64, f64) },
    HorizontalFlip { p: f64 },
    ColorJitter { strength: f64 },
    Grayscale { p: f64 },
    FeatureCorrupt { fraction: f64 },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::ResizeCrop { .. } => "resize_crop",
            TransformKind::HorizontalFlip { .. } => "horizontal_flip",
            TransformKind::ColorJitter { .. } => "color_jitter",
            TransformKind::Grayscale { .. } => "grayscale",
            TransformKind::FeatureCorrupt { .. } => "feature_corrupt",
        }
    }

    pub fn is_image(&self) -> bool {
        !matches!(self, TransformKind::FeatureCorrupt { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::param(
                    name,
                    format!("probability must lie in [0, 1], got {p}"),
                ))
            }
        };
        match *self {
            TransformKind::ResizeCrop { scale: (lo, hi) } => {
                if lo > 0.0 && lo <= hi && hi <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::param(
                        "resize_crop.scale",
                        format!("need 0 < lo <= hi <= 1, got ({lo}, {hi})"),
                    ))
                }
            }
            TransformKind::HorizontalFlip { p } => prob("horizontal_flip.p", p),
            TransformKind::Grayscale { p } => prob("grayscale.p", p),
            TransformKind::ColorJitter { strength } => image::check_jitter_strength(strength),
            TransformKind::FeatureCorrupt { fraction } => tabular::check_fraction(fraction),
        }
    }

    /// Default parameters for each transform name.
    pub fn default_for(name: &str) -> Option<Self> {
        Some(match name {
            "resize_crop" => TransformKind::ResizeCrop { scale: (0.2, 1.0) },
            "horizontal_flip" => TransformKind::HorizontalFlip { p: 0.5 },
            "color_jitter" => TransformKind::ColorJitter { strength: 0.4 },
            "grayscale" => TransformKind::Grayscale { p: 0.2 },
            "feature_corrupt" => TransformKind::FeatureCorrupt { fraction: 0.6 },
            _ => return None,
        })
    }
}

/// A non-empty family of transforms from one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    members: Vec<TransformKind>,
}

impl TransformSet {
    pub fn new(members: Vec<TransformKind>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::param(
                "transforms",
                "at least one transform is required",
            ));
        }
        let image = members[0].is_image();
        for m in &members {
            m.validate()?;
            if m.is_image() != image {
                return Err(Error::param(
                    "transforms",
                    "image and tabular transforms cannot be mixed",
                ));
            }
        }
        Ok(Self { members })
    }

    pub fn simclr_default() -> Self {
        Self::new(
            [
                "resize_crop",
                "horizontal_flip",
                "color_jitter",
                "grayscale",
            ]
            .iter()
            .map(|n| TransformKind::default_for(n).expect("known"))
            .collect(),
        )
        .expect("valid defaults")
    }

    pub fn scarf_default() -> Self {
        Self::new(vec![TransformKind::FeatureCorrupt { fraction: 0.6 }]).expect("valid default")
    }

    pub fn members(&self) -> &[TransformKind] {
        &self.members
    }

    pub fn is_image(&self) -> bool {
        self.members[0].is_image()
    }

    /// Restriction to the single member called `name`.
    pub fn only(&self, name: &str) -> Option<Self> {
        self.members
            .iter()
            .find(|m| m.name() == name)
            .map(|m| Self { members: vec![*m] })
    }

    fn find<F: Fn(&TransformKind) -> Option<R>, R>(&self, f: F) -> Option<R> {
        self.members.iter().find_map(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImageOp {
    Crop {
        top: usize,
        left: usize,
        side: usize,
    },
    Flip,
    Jitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    Gray,
}

/// One concrete draw `g` from a transform family.
#[derive(Debug, Clone, PartialEq)]
pub enum SampledTransform {
    Image(Vec<ImageOp>),
    /// `(column, replacement)` pairs.
    Tabular(Vec<(usize, f64)>),
}

impl SampledTransform {
    pub fn is_identity(&self) -> bool {
        match self {
            SampledTransform::Image(ops) => ops.is_empty(),
            SampledTransform::Tabular(r) => r.is_empty(),
        }
    }
}

/// A transform family bound to the data it acts on.
#[derive(Debug, Clone)]
pub enum Augmenter {
    Tabular {
        set: TransformSet,
        marginals: Arc<EmpiricalMarginal>,
    },
    /// Rows are flattened `channels x side x side` images.
    Image {
        set: TransformSet,
        channels: usize,
        side: usize,
    },
}

impl Augmenter {
    pub fn tabular(set: TransformSet, marginals: Arc<EmpiricalMarginal>) -> Result<Self> {
        if set.is_image() {
            return Err(Error::param(
                "transforms",
                "tabular data needs feature_corrupt",
            ));
        }
        Ok(Augmenter::Tabular { set, marginals })
    }

    pub fn image(set: TransformSet, channels: usize, side: usize) -> Result<Self> {
        if !set.is_image() {
            return Err(Error::param(
                "transforms",
                "image data needs image transforms",
            ));
        }
        Ok(Augmenter::Image {
            set,
            channels,
            side,
        })
    }

    pub fn set(&self) -> &TransformSet {
        match self {
            Augmenter::Tabular { set, .. } | Augmenter::Image { set, .. } => set,
        }
    }

    /// Same data binding, restricted to the member `name`.
    pub fn restricted(&self, name: &str) -> Option<Self> {
        let set = self.set().only(name)?;
        Some(match self {
            Augmenter::Tabular { marginals, .. } => Augmenter::Tabular {
                set,
                marginals: marginals.clone(),
            },
            Augmenter::Image { channels, side, .. } => Augmenter::Image {
                set,
                channels: *channels,
                side: *side,
            },
        })
    }

    /// Draws `g`. Images compose crop, flip, jitter and grayscale in that
    /// order; tabular rows get one corruption draw.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<SampledTransform> {
        match self {
            Augmenter::Tabular { set, marginals } => {
                let mut reps = Vec::new();
                for m in set.members() {
                    if let TransformKind::FeatureCorrupt { fraction } = *m {
                        reps.extend(tabular::sample_corruption(fraction, marginals, rng)?);
                    }
                }
                Ok(SampledTransform::Tabular(reps))
            }
            Augmenter::Image { set, side, .. } => {
                let mut ops = Vec::new();
                if let Some(scale) = set.find(|m| match *m {
                    TransformKind::ResizeCrop { scale } => Some(scale),
                    _ => None,
                }) {
                    let (top, left, s) = image::sample_crop(*side, scale, rng)?;
                    if s != *side {
                        ops.push(ImageOp::Crop { top, left, side: s });
                    }
                }
                if let Some(p) = set.find(|m| match *m {
                    TransformKind::HorizontalFlip { p } => Some(p),
                    _ => None,
                }) {
                    if rng.random::<f64>() < p {
                        ops.push(ImageOp::Flip);
                    }
                }
                if let Some(strength) = set.find(|m| match *m {
                    TransformKind::ColorJitter { strength } => Some(strength),
                    _ => None,
                }) {
                    let (b, c, s) = image::sample_jitter(strength, rng)?;
                    if (b, c, s) != (1.0, 1.0, 1.0) {
                        ops.push(ImageOp::Jitter {
                            brightness: b,
                            contrast: c,
                            saturation: s,
                        });
                    }
                }
                if let Some(p) = set.find(|m| match *m {
                    TransformKind::Grayscale { p } => Some(p),
                    _ => None,
                }) {
                    if rng.random::<f64>() < p {
                        ops.push(ImageOp::Gray);
                    }
                }
                Ok(SampledTransform::Image(ops))
            }
        }
    }

    pub fn apply(&self, g: &SampledTransform, row: ArrayView1<f64>) -> Result<Array1<f64>> {
        match (self, g) {
            (Augmenter::Tabular { marginals, .. }, SampledTransform::Tabular(reps)) => {
                if row.len() != marginals.n_features() {
                    return Err(Error::dim(
                        "augmented row width",
                        marginals.n_features(),
                        row.len(),
                    ));
                }
                let mut out = row.to_owned();
                for &(c, v) in reps {
                    out[c] = v;
                }
                Ok(out)
            }
            (Augmenter::Image { channels, side, .. }, SampledTransform::Image(ops)) => {
                let expected = channels * side * side;
                if row.len() != expected {
                    return Err(Error::dim("augmented image size", expected, row.len()));
                }
                let flat = row.to_owned();
                let mut img = ArrayView3::from_shape(
                    (*channels, *side, *side),
                    flat.as_slice().expect("owned"),
                )
                .expect("size checked")
                .to_owned();
                for op in ops {
                    img = match *op {
                        ImageOp::Crop { top, left, side } => {
                            image::crop_resize(img.view(), top, left, side)
                        }
                        ImageOp::Flip => image::flip_columns(img.view()),
                        ImageOp::Jitter {
                            brightness,
                            contrast,
                            saturation,
                        } => image::jitter_with(img.view(), brightness, contrast, saturation),
                        ImageOp::Gray => image::to_gray(img.view()),
                    };
                }
                Ok(Array1::from_iter(img.iter().copied()))
            }
            _ => Err(Error::State(
                "sampled transform does not match the data domain".into(),
            )),
        }
    }

    /// One freshly sampled `g` per row, applied in row order.
    pub fn views(&self, rows: ArrayView2<f64>, rng: &mut impl Rng) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(rows.raw_dim());
        for (i, row) in rows.rows().into_iter().enumerate() {
            let g = self.sample(rng)?;
            out.row_mut(i).assign(&self.apply(&g, row)?);
        }
        Ok(out)
    }
}

/// Draws `g ~ S` for the given binding.
pub fn sample_transform(aug: &Augmenter, rng: &mut impl Rng) -> Result<SampledTransform> {
    aug.sample(rng)
}
