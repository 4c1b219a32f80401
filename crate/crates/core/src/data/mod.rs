//! Images, datasets, manifests and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod raster;
pub mod synthetic;

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, TensorMap};
pub use manifest::{write_dataset, DatasetManifest, ManifestEntry};
pub use raster::Raster;
pub use synthetic::{generate_synthetic, Placement, Shape, SyntheticSpec};

/// Float image, channel-major (`c × h × w`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn from_raster(r: &Raster, norm: &Normalization) -> Result<Self> {
        let plane = r.height * r.width;
        let mut pixels: Vec<f32> = r.data.iter().map(|&b| b as f32 / 255.0).collect();
        if let Normalization::Affine { scale, shift } = norm {
            if scale.len() != r.channels || shift.len() != r.channels {
                return Err(Error::Config(format!(
                    "normalization has {} channels, image has {}",
                    scale.len(),
                    r.channels
                )));
            }
            for (c, ch) in pixels.chunks_mut(plane.max(1)).enumerate() {
                for v in ch {
                    *v = *v * scale[c] + shift[c];
                }
            }
        }
        Ok(Self {
            height: r.height,
            width: r.width,
            channels: r.channels,
            pixels,
        })
    }

    /// Inverse of unit normalization; values are clamped to `[0, 1]` first.
    pub fn to_raster(&self) -> Raster {
        let data = self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Normalization {
    /// `p / 255`
    #[default]
    Unit,
    /// `(p / 255) · scale[c] + shift[c]`
    Affine { scale: Vec<f32>, shift: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    pub label: usize,
    /// Patch-grid relevance in row-major order, when known.
    pub relevance: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load(manifest: &DatasetManifest, norm: &Normalization) -> Result<Self> {
        let samples = load_images(manifest, norm).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            num_classes: manifest.num_classes,
        })
    }

    pub fn open(manifest_path: &Path) -> Result<Self> {
        Self::load(&DatasetManifest::read(manifest_path)?, &Normalization::Unit)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }
}

fn load_entry(manifest: &DatasetManifest, index: usize, norm: &Normalization) -> Result<Sample> {
    let e = &manifest.entries[index];
    let name = e.path.display().to_string();
    let wrap = |err: Error| Error::data(&name, err.to_string());
    let raster = Raster::read(&manifest.resolve(&e.path)).map_err(wrap)?;
    let image = Image::from_raster(&raster, norm).map_err(wrap)?;
    let relevance = match &e.relevance_path {
        None => None,
        Some(p) => {
            let g = Raster::read(&manifest.resolve(p)).map_err(wrap)?;
            if g.channels != 1 {
                return Err(Error::data(&name, "relevance grid must have one channel"));
            }
            Some(g.data.iter().map(|&b| b != 0).collect())
        }
    };
    if e.label >= manifest.num_classes {
        return Err(Error::data(&name, format!("label {} outside [0, {})", e.label, manifest.num_classes)));
    }
    Ok(Sample {
        id: index as u64,
        image,
        label: e.label,
        relevance,
    })
}

/// Loads entries in manifest order. The image id is the manifest index.
pub fn load_images<'a>(
    manifest: &'a DatasetManifest,
    norm: &'a Normalization,
) -> impl Iterator<Item = Result<Sample>> + 'a {
    (0..manifest.entries.len()).map(move |i| load_entry(manifest, i, norm))
}

/// Manifest indices, optionally shuffled with a seed.
pub fn load_order(len: usize, shuffle: Option<u64>) -> Vec<usize> {
    match shuffle {
        Some(seed) => rng::permutation(len, seed),
        None => (0..len).collect(),
    }
}

/// Receiving end of a background loader. Clones share one queue, so several
/// consumers can pull from it.
#[derive(Clone)]
pub struct ImageQueue {
    rx: Arc<Mutex<Receiver<Result<Sample>>>>,
}

impl ImageQueue {
    pub fn next(&self) -> Option<Result<Sample>> {
        self.rx.lock().expect("loader queue poisoned").recv().ok()
    }
}

impl Iterator for ImageQueue {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        ImageQueue::next(self)
    }
}

/// Starts a producer thread that loads entries in `order` into a queue holding
/// at most `capacity` decoded images.
pub fn spawn_loader(
    manifest: DatasetManifest,
    norm: Normalization,
    order: Vec<usize>,
    capacity: usize,
) -> (ImageQueue, JoinHandle<()>) {
    let (tx, rx) = sync_channel(capacity.max(1));
    let handle = std::thread::spawn(move || {
        for i in order {
            let item = if i < manifest.entries.len() {
                load_entry(&manifest, i, &norm)
            } else {
                Err(Error::Index {
                    what: "manifest entry",
                    index: i,
                    len: manifest.entries.len(),
                })
            };
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    (ImageQueue { rx: Arc::new(Mutex::new(rx)) }, handle)
}
