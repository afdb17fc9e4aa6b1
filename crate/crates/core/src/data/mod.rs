//! Synthetic localization dataset.
//!
//! Each image holds one object (optionally several of the same class): a
//! large class-agnostic body (ellipse, rectangle or triangle), bright and
//! speckled on a darker grey background, carrying a small two-tone glyph
//! marker in a class-specific hue. Only the marker identifies the class,
//! while the ground truth covers the whole body. A classifier can therefore
//! succeed by looking at a few percent of the object.

mod io;
mod netpbm;
mod render;

pub use io::{load_dataset, save_dataset};
pub use render::{class_glyphs, class_hue};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{connected_components, BBox, Connectivity};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyShape {
    Ellipse,
    Rectangle,
    Triangle,
}

impl BodyShape {
    pub const ALL: [BodyShape; 3] = [BodyShape::Ellipse, BodyShape::Rectangle, BodyShape::Triangle];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Allowed body shapes per class; an empty list means all shapes. Shapes
    /// shared across classes keep the body uninformative about the label.
    pub body_shapes: Vec<Vec<BodyShape>>,
    /// Glyph grid side (cells) and cell size (pixels).
    pub marker_cells: usize,
    pub marker_cell_px: usize,
    /// Body area as a fraction of the image, sampled uniformly in this range.
    pub body_area: (f64, f64),
    /// Amplitude of the per-pixel speckle that textures every body.
    pub body_texture: f64,
    pub noise_level: f64,
    pub objects_per_image: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            train_per_class: 400,
            val_per_class: 80,
            test_per_class: 120,
            image_size: 64,
            body_shapes: Vec::new(),
            marker_cells: 3,
            marker_cell_px: 3,
            body_area: (0.4, 0.6),
            body_texture: 0.08,
            noise_level: 0.03,
            objects_per_image: 1,
            seed: 2022,
        }
    }
}

impl DatasetSpec {
    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn marker_px(&self) -> usize {
        self.marker_cells * self.marker_cell_px
    }

    pub fn shapes_for(&self, class: usize) -> Vec<BodyShape> {
        match self.body_shapes.get(class) {
            Some(s) if !s.is_empty() => s.clone(),
            _ => BodyShape::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        let (lo, hi) = self.body_area;
        if !(0.2 <= lo && lo <= hi && hi <= 0.6) {
            return Err(Error::config("body_area", "range must lie within [0.2, 0.6]"));
        }
        let image_area = (self.image_size * self.image_size) as f64;
        let marker_area = (self.marker_px() * self.marker_px()) as f64;
        if self.marker_cells < 2 || self.marker_cell_px == 0 || marker_area > 0.04 * image_area {
            return Err(Error::config(
                "marker_cells",
                "marker must have at least 2x2 cells and cover at most 4% of the image",
            ));
        }
        if (1usize << (self.marker_cells * self.marker_cells)) < self.num_classes + 2 {
            return Err(Error::config("marker_cells", "too few glyph patterns for the class count"));
        }
        if !(0.0..=0.5).contains(&self.body_texture) {
            return Err(Error::config("body_texture", "must lie in [0, 0.5]"));
        }
        if !(0.0..=0.5).contains(&self.noise_level) {
            return Err(Error::config("noise_level", "must lie in [0, 0.5]"));
        }
        if self.objects_per_image == 0 || self.objects_per_image as f64 * lo > 0.6 {
            return Err(Error::config(
                "objects_per_image",
                "bodies must fit: objects_per_image * body_area.0 <= 0.6",
            ));
        }
        if self.body_shapes.len() > self.num_classes {
            return Err(Error::config("body_shapes", "more entries than classes"));
        }
        Ok(())
    }
}

/// One image with its label and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSample {
    pub size: usize,
    /// `size × size × 3`, row-major, channel-last, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: usize,
    pub gt_boxes: Vec<BBox>,
    /// `size × size`, row-major.
    pub gt_mask: Vec<bool>,
    /// Marker squares (one per object); generator metadata.
    pub markers: Vec<BBox>,
}

impl LocalizationSample {
    /// Channel-first `[3, size, size]` tensor, centred around zero.
    pub fn image_tensor(&self) -> Tensor {
        let plane = self.size * self.size;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.image.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] - 0.5;
            }
        }
        Tensor::new(vec![3, self.size, self.size], data).expect("image dimensions")
    }

    pub fn mask_area(&self) -> usize {
        self.gt_mask.iter().filter(|m| **m).count()
    }

    /// Tight boxes of the mask's 8-connected components, largest first.
    pub fn boxes_from_mask(&self) -> Vec<BBox> {
        mask_boxes(&self.gt_mask, self.size)
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.size * self.size;
        if self.image.len() != 3 * n || self.gt_mask.len() != n {
            return Err("image or mask size disagrees with `size`".into());
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("image values outside [0, 1]".into());
        }
        if self.gt_boxes.iter().any(|b| b.x0 >= b.x1 || b.y0 >= b.y1 || !b.fits(self.size, self.size)) {
            return Err("ground-truth box out of bounds".into());
        }
        let mut expected = self.boxes_from_mask();
        let mut actual = self.gt_boxes.clone();
        expected.sort_by_key(|b| (b.y0, b.x0, b.y1, b.x1));
        actual.sort_by_key(|b| (b.y0, b.x0, b.y1, b.x1));
        if expected != actual {
            return Err(format!("boxes {actual:?} are not the tight boxes of the mask {expected:?}"));
        }
        for m in &self.markers {
            for y in m.y0..m.y1 {
                for x in m.x0..m.x1 {
                    if !self.gt_mask[y * self.size + x] {
                        return Err("marker extends outside the object mask".into());
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn mask_boxes(mask: &[bool], size: usize) -> Vec<BBox> {
    connected_components(mask, size, size, Connectivity::Eight)
        .into_iter()
        .map(|c| c.bbox)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<LocalizationSample>,
    pub val: Vec<LocalizationSample>,
    pub test: Vec<LocalizationSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LocalizationSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generator for one sample: its own ChaCha stream keyed by split and index,
/// so splits never share randomness.
fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_id() << 40) | index as u64);
    rng
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<LocalizationSample>> {
    spec.validate()?;
    let glyphs = class_glyphs(spec.num_classes, spec.marker_cells);
    let count = spec.per_class(split) * spec.num_classes;
    (0..count)
        .map(|i| {
            let label = i % spec.num_classes;
            let mut rng = sample_rng(spec.seed, split, i);
            render::render_sample(spec, label, &glyphs[label], &mut rng)
        })
        .collect()
}

/// Deterministic train/val/test dataset for `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        test: generate_split(spec, Split::Test)?,
    })
}
