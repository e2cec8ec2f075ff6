//! The preprocessed cache: one SGT1 tensor per record plus the statistics,
//! class weights and an index tying files to labels and splits.
//!
//! ```text
//! <cache>/prepare.toml        image size, class count, threshold
//! <cache>/manifest.csv        the manifest that was prepared
//! <cache>/index.csv           record, file, label, split, source
//! <cache>/stats.csv           channel, mean, std (training split only)
//! <cache>/class_weights.csv   class, count, weight (training split only)
//! <cache>/images/rNNNNN.sgt   H×W×3 standardized f32 image
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentPolicy};
use super::image::{crop_resize, hist_equalize, standardize, FloatImage, PreprocessStats, BACKGROUND_THRESHOLD};
use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::losses::ClassWeights;
use crate::tensor::{io, lit, Real, Tensor};

const FORMAT: &str = "seanet-cache-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    /// Side length after crop and resize.
    pub image_size: usize,
    pub classes: usize,
    pub background_threshold: f64,
    /// Require an equal number of test records per class.
    pub balanced_test: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            image_size: 64,
            classes: 5,
            background_threshold: BACKGROUND_THRESHOLD,
            balanced_test: true,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheInfo {
    format: String,
    #[serde(flatten)]
    config: PrepareConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    record: usize,
    file: String,
    label: usize,
    split: Split,
    source: String,
}

/// Crop, resize and equalize: every stage that does not depend on dataset
/// statistics.
pub fn preprocess(img: &super::image::ByteImage, cfg: &PrepareConfig) -> Result<FloatImage> {
    Ok(hist_equalize(&crop_resize(
        img,
        cfg.image_size,
        cfg.background_threshold,
    )?))
}

#[derive(Debug, Clone)]
pub struct PrepareSummary {
    pub stats: PreprocessStats,
    pub weights: ClassWeights,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

/// Runs the fixed pipeline over every record and writes the cache.
///
/// Statistics come from the training split alone; test images are
/// standardized with them but never contribute.
pub fn prepare(manifest: &DatasetManifest, cfg: &PrepareConfig, dir: &Path) -> Result<PrepareSummary> {
    manifest.validate(cfg.classes)?;
    if cfg.balanced_test {
        manifest.check_test_balance(cfg.classes)?;
    }
    let train_counts = manifest.class_counts(Split::Train, cfg.classes);
    let test_counts = manifest.class_counts(Split::Test, cfg.classes);
    let weights = ClassWeights::from_counts(&train_counts)
        .map_err(|e| Error::InvalidInput(format!("class weights from training counts {train_counts:?}: {e}")))?;

    let mut equalized = Vec::with_capacity(manifest.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let img = r
            .load()
            .and_then(|img| preprocess(&img, cfg))
            .map_err(|e| Error::InvalidInput(format!("record {i} ({}): {e}", r.source)))?;
        equalized.push(img);
    }
    let stats = PreprocessStats::from_images(
        manifest
            .records
            .iter()
            .zip(&equalized)
            .filter(|(r, _)| r.split == Split::Train)
            .map(|(_, img)| img),
    )?;

    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut index = csv::Writer::from_path(dir.join("index.csv"))?;
    for (i, (r, img)) in manifest.records.iter().zip(&equalized).enumerate() {
        let std = standardize(img, &stats)?;
        let t = Tensor::<f32>::from_vec(
            [std.height, std.width, std.channels],
            std.data.iter().map(|&v| v as f32).collect(),
        )?;
        let file = format!("images/r{i:05}.sgt");
        io::save(&t, dir.join(&file))?;
        index.serialize(IndexRow {
            record: i,
            file,
            label: r.label,
            split: r.split,
            source: r.source.to_string(),
        })?;
    }
    index.flush().map_err(|e| Error::io(dir.join("index.csv"), e))?;

    let create = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map_err(|e| Error::io(&p, e))
    };
    stats.write_csv(create("stats.csv")?)?;
    weights.write_csv(create("class_weights.csv")?)?;
    manifest.write_csv(create("manifest.csv")?)?;
    let info = CacheInfo {
        format: FORMAT.into(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&info).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(dir.join("prepare.toml"), text).map_err(|e| Error::io(dir.join("prepare.toml"), e))?;

    Ok(PrepareSummary {
        stats,
        weights,
        train_counts,
        test_counts,
    })
}

/// One preprocessed image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: usize,
    pub label: usize,
    pub pixels: Vec<f32>,
}

/// A prepared cache loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: PrepareConfig,
    pub stats: PreprocessStats,
    pub weights: ClassWeights,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub dir: PathBuf,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let info_path = dir.join("prepare.toml");
        if !info_path.is_file() {
            return Err(Error::MissingFiles(vec![info_path]));
        }
        let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: CacheInfo =
            toml::from_str(&text).map_err(|e| Error::Incompatible(format!("{}: {e}", info_path.display())))?;
        if info.format != FORMAT {
            return Err(Error::Incompatible(format!("unknown cache format {:?}", info.format)));
        }
        let open = |name: &str| {
            let p = dir.join(name);
            fs::File::open(&p).map_err(|e| Error::io(&p, e))
        };
        let stats = PreprocessStats::read_csv(open("stats.csv")?)?;
        let counts: Vec<usize> = csv::Reader::from_reader(open("class_weights.csv")?)
            .deserialize::<(usize, usize, String)>()
            .map(|r| r.map(|(_, count, _)| count))
            .collect::<std::result::Result<_, _>>()?;
        let weights = ClassWeights::from_counts(&counts)?;

        let rows: Vec<IndexRow> = csv::Reader::from_reader(open("index.csv")?)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        let missing: Vec<PathBuf> = rows
            .iter()
            .map(|r| dir.join(&r.file))
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let s = info.config.image_size;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for row in rows {
            let t = io::load::<f32>(dir.join(&row.file))?;
            if t.dims() != [s, s, 3] {
                return Err(Error::Incompatible(format!(
                    "{} has shape {:?}, cache declares {s}×{s}×3",
                    row.file,
                    t.shape()
                )));
            }
            let sample = Sample {
                record: row.record,
                label: row.label,
                pixels: t.into_data(),
            };
            match row.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Dataset {
            config: info.config,
            stats,
            weights,
            train,
            test,
            dir: dir.to_path_buf(),
        })
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Stacks samples into an `N×S×S×3` tensor, augmenting each one when a
/// policy and generator are given. Labels come back in the same order.
pub fn make_batch<T: Real, R: Rng + ?Sized>(
    samples: &[&Sample],
    size: usize,
    augmentation: Option<(&AugmentPolicy, &mut R)>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut data = Vec::with_capacity(samples.len() * size * size * 3);
    let labels = samples.iter().map(|s| s.label).collect();
    match augmentation {
        None => {
            for s in samples {
                data.extend(s.pixels.iter().map(|&v| lit::<T>(f64::from(v))));
            }
        }
        Some((policy, rng)) => {
            for s in samples {
                let img = FloatImage::new(size, size, 3, s.pixels.iter().map(|&v| f64::from(v)).collect())?;
                let out = augment(&img, policy, rng);
                data.extend(out.data.iter().map(|&v| lit::<T>(v)));
            }
        }
    }
    Ok((Tensor::from_vec([samples.len(), size, size, 3], data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prepare_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::synthetic(3, 2, 1, 24, 4).unwrap();
        let cfg = PrepareConfig {
            image_size: 16,
            classes: 3,
            ..PrepareConfig::default()
        };
        let summary = prepare(&m, &cfg, dir.path()).unwrap();
        assert_eq!(summary.train_counts, vec![2, 2, 2]);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 6);
        assert_eq!(ds.test.len(), 3);
        assert_eq!(ds.stats, summary.stats);
        assert_eq!(ds.weights.values(), vec![3.0; 3]);

        let refs: Vec<&Sample> = ds.train.iter().collect();
        let (batch, labels) = make_batch::<f64, ChaCha8Rng>(&refs, 16, None).unwrap();
        assert_eq!(batch.dims(), [6, 16, 16, 3]);
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn unbalanced_test_split_rejected() {
        let mut m = DatasetManifest::synthetic(3, 2, 1, 24, 4).unwrap();
        m.records.pop();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PrepareConfig {
            image_size: 16,
            classes: 3,
            ..PrepareConfig::default()
        };
        assert!(prepare(&m, &cfg, dir.path()).is_err());
        let relaxed = PrepareConfig {
            balanced_test: false,
            ..cfg
        };
        assert!(prepare(&m, &relaxed, dir.path()).is_ok());
    }

    #[test]
    fn augmented_batches_follow_the_generator() {
        let s = Sample {
            record: 0,
            label: 1,
            pixels: (0..4 * 4 * 3).map(|i| i as f32).collect(),
        };
        let refs = [&s, &s];
        let p = AugmentPolicy::default();
        let a = make_batch::<f32, _>(&refs, 4, Some((&p, &mut ChaCha8Rng::seed_from_u64(1)))).unwrap();
        let b = make_batch::<f32, _>(&refs, 4, Some((&p, &mut ChaCha8Rng::seed_from_u64(1)))).unwrap();
        assert_eq!(a.0, b.0);
    }
}
