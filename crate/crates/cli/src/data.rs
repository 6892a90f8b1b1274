//! Loading splits and drawing training batches.

use std::path::Path;

use aqua_core::evalkit::EvalSample;
use aqua_core::watermodel::{make_domain_transform, DomainTransform};
use aqua_core::Image;
use aqua_data::dataset::{load_manifest, load_split, regenerate_scene, DatasetManifest, Sample, TEST, TRAIN, VAL};
use aqua_data::pngio::quantize;
use aqua_detector::{derive_seed, hflip, PairedBatch, TrainImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Pairing;
use crate::error::{CliError, Result};

/// Keeps batch draws apart from the other seed streams of a run.
const SAMPLER_STREAM: u64 = 0x5341_4d50;

/// A loaded dataset and its manifest.
pub struct Dataset {
    pub root: std::path::PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn source_domains(&self) -> Vec<usize> {
        self.manifest.config.source_domains()
    }

    pub fn target_domain(&self) -> usize {
        self.manifest.target_domain
    }

    pub fn split(&self, domain: usize, split: &str) -> Result<Vec<Sample>> {
        if self.manifest.split(domain, split).is_none() {
            return Err(CliError::Data(format!("dataset has no `{split}` split for domain {domain}")));
        }
        Ok(load_split(&self.root, &self.manifest, domain, split)?)
    }

    /// Splits named `val` cover every source domain, `test` the target.
    pub fn named_split(&self, split: &str) -> Result<Vec<(usize, Vec<Sample>)>> {
        let domains = match split {
            VAL | TRAIN => self.source_domains(),
            TEST => vec![self.target_domain()],
            other => return Err(CliError::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        };
        domains.into_iter().map(|d| Ok((d, self.split(d, split)?))).collect()
    }
}

pub fn eval_samples(samples: &[Sample]) -> Vec<EvalSample> {
    samples
        .iter()
        .map(|s| EvalSample {
            image: s.image.clone(),
            objects: s.objects.clone(),
        })
        .collect()
}

/// Source training images with what is needed to re-render them.
pub struct TrainPool {
    pub items: Vec<PoolItem>,
    transforms: Vec<DomainTransform>,
    config: aqua_data::dataset::DatasetConfig,
    /// Dataset domain id of each classifier label.
    pub sources: Vec<usize>,
}

pub struct PoolItem {
    pub image: TrainImage,
    pub entry: aqua_data::dataset::ImageEntry,
}

impl TrainPool {
    pub fn load(data: &Dataset) -> Result<Self> {
        let sources = data.source_domains();
        let mut items = Vec::new();
        for (label, &d) in sources.iter().enumerate() {
            let entry = data.manifest.split(d, TRAIN).ok_or_else(|| CliError::Data(format!("domain {d} has no train split")))?;
            let samples = data.split(d, TRAIN)?;
            for (s, e) in samples.into_iter().zip(&entry.images) {
                items.push(PoolItem {
                    image: to_train_image(&s, label),
                    entry: e.clone(),
                });
            }
        }
        if items.is_empty() {
            return Err(CliError::Data("no source training images".into()));
        }
        let transforms = data
            .manifest
            .config
            .domains
            .iter()
            .map(make_domain_transform)
            .collect::<aqua_core::Result<Vec<_>>>()?;
        Ok(Self {
            items,
            transforms,
            config: data.manifest.config.clone(),
            sources,
        })
    }

    /// The batch of `step`, a pure function of `(seed, step)`.
    pub fn batch(&self, seed: u64, step: u64, size: usize, flip: bool, pairing: Option<Pairing>) -> Result<PairedBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ SAMPLER_STREAM, step));
        let mut main = Vec::with_capacity(size);
        let mut branch = Vec::with_capacity(size);
        for _ in 0..size {
            let item = &self.items[rng.random_range(0..self.items.len())];
            let other = rng.random_range(0..self.sources.len() - 1);
            let mirror = flip && rng.random_bool(0.5);
            let mut m = item.image.clone();
            let mut b = match pairing {
                Some(Pairing::OtherSource) if self.sources.len() > 1 => {
                    let label = if other >= m.domain { other + 1 } else { other };
                    self.render(item, label)?
                }
                _ => m.clone(),
            };
            if mirror {
                m = hflip(&m);
                b = hflip(&b);
            }
            main.push(m);
            branch.push(b);
        }
        Ok(PairedBatch::new(main, branch)?)
    }

    /// `item`'s scene as stored for source label `label`.
    fn render(&self, item: &PoolItem, label: usize) -> Result<TrainImage> {
        let scene = regenerate_scene(&self.config, &item.entry)?;
        let image = self.transforms[self.sources[label]].apply(&scene.image);
        Ok(TrainImage {
            image: quantized(&image),
            domain: label,
            ..item.image.clone()
        })
    }
}

/// The 8-bit round trip images take through PNG storage.
pub fn quantized(image: &Image) -> Image {
    image.map(|v| quantize(v) as f64 / 255.0)
}

fn to_train_image(s: &Sample, label: usize) -> TrainImage {
    TrainImage {
        image: s.image.clone(),
        boxes: s.objects.iter().map(|o| o.0).collect(),
        classes: s.objects.iter().map(|o| o.1).collect(),
        domain: label,
    }
}
