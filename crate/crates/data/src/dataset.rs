//! Multi-domain dataset construction and loading.
//!
//! A pool of base scenes is partitioned across seven domains; every domain's
//! share is rendered through that domain's colour transform. Source domains
//! get `train` and `val` splits, the held-out target only `test`.
//!
//! ```text
//! root/manifest.json
//! root/domain_{k}/{split}/annotations.json
//! root/domain_{k}/{split}/images/{index:06}.png
//! ```

use std::path::{Component, Path, PathBuf};

use aqua_core::watermodel::{make_domain_transform, preset_domains, DomainSpec};
use aqua_core::{BBox, Image};
use serde::{Deserialize, Serialize};

use crate::coco::{read_annotations, write_annotations, AnnotatedImage, Annotation, AnnotationSet, CocoCategory};
use crate::error::{DataError, Result};
use crate::fsutil::{derive_seed, sha256_hex, write_atomic};
use crate::pngio::{decode_png, encode_png};
use crate::scene::{generate_scene, Scene, SceneSpec, CLASS_NAMES};

pub const GENERATOR_VERSION: &str = "aqua-scenes/1";
pub const MANIFEST_VERSION: u32 = 1;
pub const NUM_DOMAINS: usize = 7;
pub const MANIFEST_FILE: &str = "manifest.json";

pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const TEST: &str = "test";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneSpec,
    pub domains: Vec<DomainSpec>,
    /// Index into `domains` of the held-out domain.
    #[serde(default = "default_target")]
    pub target_domain: usize,
    pub train_per_domain: usize,
    pub val_per_domain: usize,
    pub test_images: usize,
}

fn default_target() -> usize {
    NUM_DOMAINS - 1
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            domains: preset_domains(),
            target_domain: default_target(),
            train_per_domain: 200,
            val_per_domain: 40,
            test_images: 120,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() != NUM_DOMAINS {
            return Err(DataError::PresetCount(self.domains.len()));
        }
        if self.target_domain >= NUM_DOMAINS {
            return Err(DataError::Manifest(format!("target_domain {} out of range", self.target_domain)));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.domain_id != i {
                return Err(DataError::Manifest(format!("domain at position {i} has id {}", d.domain_id)));
            }
            make_domain_transform(d)?;
        }
        self.scene.validate()
    }

    pub fn source_domains(&self) -> Vec<usize> {
        (0..NUM_DOMAINS).filter(|&d| d != self.target_domain).collect()
    }

    /// `(domain, split, count)` in generation order.
    fn plan(&self) -> Vec<(usize, &'static str, usize)> {
        let mut p = Vec::new();
        for d in 0..NUM_DOMAINS {
            if d == self.target_domain {
                p.push((d, TEST, self.test_images));
            } else {
                p.push((d, TRAIN, self.train_per_domain));
                p.push((d, VAL, self.val_per_domain));
            }
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain_id: usize,
    pub name: String,
    pub role: DomainRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Relative to the dataset root.
    pub file: String,
    pub sha256: String,
    pub scene_seed: u64,
    /// Position of the base scene in the global pool.
    pub scene_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub domain_id: usize,
    pub split: String,
    pub annotation_path: String,
    pub annotation_sha256: String,
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_version: String,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub target_domain: usize,
    pub domains: Vec<DomainEntry>,
    pub splits: Vec<SplitEntry>,
    pub config: DatasetConfig,
}

fn safe_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

impl DatasetManifest {
    /// Structural checks, including target isolation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Manifest(m));
        if self.format_version != MANIFEST_VERSION {
            return bad(format!("format version {} (expected {MANIFEST_VERSION})", self.format_version));
        }
        if self.domains.len() != NUM_DOMAINS {
            return Err(DataError::PresetCount(self.domains.len()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            let expect = if i == self.target_domain { DomainRole::Target } else { DomainRole::Source };
            if d.domain_id != i || d.role != expect {
                return bad(format!("domain entry {i} is inconsistent"));
            }
        }
        for s in &self.splits {
            if s.domain_id >= NUM_DOMAINS {
                return bad(format!("split references domain {}", s.domain_id));
            }
            if s.domain_id == self.target_domain && s.split != TEST {
                return bad(format!("target domain appears in split `{}`", s.split));
            }
            if !safe_relative(&s.annotation_path) || s.images.iter().any(|i| !safe_relative(&i.file)) {
                return bad(format!("split {}/{} has a path outside the dataset", s.domain_id, s.split));
            }
        }
        Ok(())
    }

    pub fn split(&self, domain_id: usize, split: &str) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.domain_id == domain_id && s.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: Self = serde_path_to_error::deserialize(de).map_err(|e| DataError::Syntax {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

pub fn split_dir(domain_id: usize, split: &str) -> String {
    format!("domain_{domain_id}/{split}")
}

/// Seed of the base scene at `index` of the pool.
pub fn scene_seed(base_seed: u64, index: u64) -> u64 {
    derive_seed(base_seed, index)
}

/// The clean (untransformed) base scene of an image.
pub fn regenerate_scene(config: &DatasetConfig, entry: &ImageEntry) -> Result<Scene> {
    generate_scene(&config.scene, entry.scene_seed)
}

fn categories() -> Vec<CocoCategory> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i as u64,
            name: n.to_string(),
        })
        .collect()
}

/// Render every split and write it under `root`. The seed of the pool is
/// `config.scene.seed`.
pub fn build_multidomain_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let transforms = config
        .domains
        .iter()
        .map(make_domain_transform)
        .collect::<aqua_core::Result<Vec<_>>>()?;
    let seed = config.scene.seed;
    let mut pool_index = 0u64;
    let mut splits = Vec::new();
    for (domain, split, count) in config.plan() {
        let dir = split_dir(domain, split);
        let mut set = AnnotationSet {
            categories: categories(),
            images: Vec::with_capacity(count),
        };
        let mut entries = Vec::with_capacity(count);
        let mut next_ann = 0u64;
        for i in 0..count {
            let s_seed = scene_seed(seed, pool_index);
            let scene = generate_scene(&config.scene, s_seed)?;
            let image = transforms[domain].apply(&scene.image);
            let bytes = encode_png(&image)?;
            let rel_img = format!("images/{i:06}.png");
            let file = format!("{dir}/{rel_img}");
            write_atomic(&root.join(&file), &bytes)?;
            entries.push(ImageEntry {
                file,
                sha256: sha256_hex(&bytes),
                scene_seed: s_seed,
                scene_index: pool_index,
            });
            set.images.push(AnnotatedImage {
                id: i as u64,
                file_name: rel_img,
                width: config.scene.width,
                height: config.scene.height,
                domain_id: Some(domain),
                scene_seed: Some(s_seed),
                objects: scene
                    .objects
                    .iter()
                    .map(|o| {
                        next_ann += 1;
                        Annotation {
                            id: next_ann - 1,
                            category_id: o.class_id as u64,
                            bbox: o.bbox,
                        }
                    })
                    .collect(),
            });
            pool_index += 1;
        }
        let annotation_path = format!("{dir}/annotations.json");
        write_annotations(&root.join(&annotation_path), &set)?;
        let ann_bytes = std::fs::read(root.join(&annotation_path)).map_err(|e| DataError::io(root.join(&annotation_path), e))?;
        splits.push(SplitEntry {
            domain_id: domain,
            split: split.to_string(),
            annotation_path,
            annotation_sha256: sha256_hex(&ann_bytes),
            images: entries,
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        generator_version: GENERATOR_VERSION.to_string(),
        seed,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        target_domain: config.target_domain,
        domains: config
            .domains
            .iter()
            .map(|d| DomainEntry {
                domain_id: d.domain_id,
                name: d.name.clone(),
                role: if d.domain_id == config.target_domain {
                    DomainRole::Target
                } else {
                    DomainRole::Source
                },
            })
            .collect(),
        splits,
        config: config.clone(),
    };
    write_atomic(&root.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    DatasetManifest::from_json(&text)
}

/// One loaded image with `(box, class)` annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub objects: Vec<(BBox, usize)>,
    pub domain_id: usize,
    pub scene_seed: u64,
    pub file: PathBuf,
}

/// Load a split, checking image digests against the manifest.
pub fn load_split(root: &Path, manifest: &DatasetManifest, domain_id: usize, split: &str) -> Result<Vec<Sample>> {
    let entry = manifest
        .split(domain_id, split)
        .ok_or_else(|| DataError::Manifest(format!("no split `{split}` for domain {domain_id}")))?;
    let set = read_annotations(&root.join(&entry.annotation_path))?;
    if set.images.len() != entry.images.len() {
        return Err(DataError::Manifest(format!(
            "{}: {} images annotated, {} listed",
            entry.annotation_path,
            set.images.len(),
            entry.images.len()
        )));
    }
    let mut out = Vec::with_capacity(set.images.len());
    for (img, listed) in set.images.iter().zip(&entry.images) {
        let path = root.join(&listed.file);
        let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
        if sha256_hex(&bytes) != listed.sha256 {
            return Err(DataError::Manifest(format!("{} does not match its digest", listed.file)));
        }
        let image = decode_png(&bytes)?;
        let mut objects = Vec::with_capacity(img.objects.len());
        for o in &img.objects {
            let class = o.category_id as usize;
            if class >= manifest.class_names.len() {
                return Err(DataError::Manifest(format!("{}: category {class} out of range", listed.file)));
            }
            objects.push((o.bbox, class));
        }
        out.push(Sample {
            image,
            objects,
            domain_id,
            scene_seed: listed.scene_seed,
            file: path,
        });
    }
    Ok(out)
}
