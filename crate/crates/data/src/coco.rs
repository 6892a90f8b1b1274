//! COCO-style annotation files.
//!
//! Boxes are stored as `[x, y, w, h]`; category ids are the 0-based class
//! indices. Two optional per-image extensions carry the domain id and the
//! scene seed.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use aqua_core::BBox;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::fsutil::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<CocoInfo>,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoInfo {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// One object of an [`AnnotatedImage`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub category_id: u64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub domain_id: Option<usize>,
    pub scene_seed: Option<u64>,
    pub objects: Vec<Annotation>,
}

/// Validated annotations grouped by image, in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub categories: Vec<CocoCategory>,
    pub images: Vec<AnnotatedImage>,
}

impl AnnotationSet {
    pub fn num_objects(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }

    pub fn to_coco(&self) -> CocoFile {
        let mut annotations = Vec::new();
        for img in &self.images {
            for o in &img.objects {
                annotations.push(CocoAnnotation {
                    id: o.id,
                    image_id: img.id,
                    category_id: o.category_id,
                    bbox: [o.bbox.x1, o.bbox.y1, o.bbox.width(), o.bbox.height()],
                    area: o.bbox.area(),
                    iscrowd: 0,
                });
            }
        }
        CocoFile {
            info: Some(CocoInfo {
                description: "aqua synthetic scenes".into(),
                version: "1".into(),
            }),
            images: self
                .images
                .iter()
                .map(|i| CocoImage {
                    id: i.id,
                    file_name: i.file_name.clone(),
                    width: i.width,
                    height: i.height,
                    domain_id: i.domain_id,
                    scene_seed: i.scene_seed,
                })
                .collect(),
            annotations,
            categories: self.categories.clone(),
        }
    }

    /// Check ids, sizes, boxes and references.
    pub fn from_coco(file: CocoFile) -> Result<Self> {
        let mut cat_ids = HashSet::new();
        for (i, c) in file.categories.iter().enumerate() {
            if !cat_ids.insert(c.id) {
                return Err(DataError::record("categories", i, "id", format!("duplicate category id {}", c.id)));
            }
        }
        let mut index = HashMap::new();
        let mut images = Vec::with_capacity(file.images.len());
        for (i, im) in file.images.iter().enumerate() {
            if index.insert(im.id, i).is_some() {
                return Err(DataError::record("images", i, "id", format!("duplicate image id {}", im.id)));
            }
            if im.width == 0 {
                return Err(DataError::record("images", i, "width", "must be positive"));
            }
            if im.height == 0 {
                return Err(DataError::record("images", i, "height", "must be positive"));
            }
            if im.file_name.is_empty() {
                return Err(DataError::record("images", i, "file_name", "is empty"));
            }
            images.push(AnnotatedImage {
                id: im.id,
                file_name: im.file_name.clone(),
                width: im.width,
                height: im.height,
                domain_id: im.domain_id,
                scene_seed: im.scene_seed,
                objects: Vec::new(),
            });
        }
        let mut ann_ids = HashSet::new();
        for (i, a) in file.annotations.iter().enumerate() {
            if !ann_ids.insert(a.id) {
                return Err(DataError::record("annotations", i, "id", format!("duplicate annotation id {}", a.id)));
            }
            let [x, y, w, h] = a.bbox;
            if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
                return Err(DataError::record("annotations", i, "bbox", "non-finite coordinate"));
            }
            if w <= 0.0 || h <= 0.0 {
                return Err(DataError::record("annotations", i, "bbox", format!("width and height must be positive, got {w} x {h}")));
            }
            let bbox = BBox::new(x, y, x + w, y + h)
                .map_err(|e| DataError::record("annotations", i, "bbox", e.to_string()))?;
            if !cat_ids.contains(&a.category_id) {
                return Err(DataError::record("annotations", i, "category_id", format!("unknown category {}", a.category_id)));
            }
            let slot = *index
                .get(&a.image_id)
                .ok_or_else(|| DataError::record("annotations", i, "image_id", format!("unknown image {}", a.image_id)))?;
            images[slot].objects.push(Annotation {
                id: a.id,
                category_id: a.category_id,
                bbox,
            });
        }
        Ok(Self {
            categories: file.categories,
            images,
        })
    }
}

/// Parse and validate an annotation document.
pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: CocoFile = serde_path_to_error::deserialize(de).map_err(|e| DataError::Syntax {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    AnnotationSet::from_coco(file)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_annotations(&text)
}

pub fn annotations_to_string(set: &AnnotationSet) -> String {
    serde_json::to_string_pretty(&set.to_coco()).expect("annotation set serialises")
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    write_atomic(path, annotations_to_string(set).as_bytes())
}
