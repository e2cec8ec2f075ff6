//! Dataset manifests: CSV files of `(source, label, split)` records.
//!
//! A source is either an image path (relative paths resolve against the
//! manifest's directory) or `synth:<size>:<seed>` for a generated image.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::ByteImage;
use super::synth::synth_image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Path(PathBuf),
    Synthetic { size: usize, seed: u64 },
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Path(p) => write!(f, "{}", p.display()),
            Source::Synthetic { size, seed } => write!(f, "synth:{size}:{seed}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synth:") {
            Some(rest) => {
                let parsed = rest
                    .split_once(':')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
                let (size, seed) = parsed.ok_or_else(|| {
                    Error::InvalidInput(format!("bad synthetic source {s:?}; expected synth:<size>:<seed>"))
                })?;
                Ok(Source::Synthetic { size, seed })
            }
            None if s.is_empty() => Err(Error::InvalidInput("empty source".into())),
            None => Ok(Source::Path(PathBuf::from(s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub source: Source,
    pub label: usize,
    pub split: Split,
}

impl Record {
    /// Decodes or renders the image; the label picks the synthetic class.
    pub fn load(&self) -> Result<ByteImage> {
        match &self.source {
            Source::Path(p) => ByteImage::load(p),
            Source::Synthetic { size, seed } => synth_image(self.label, *size, *seed),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    source: String,
    label: usize,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut reader = csv::Reader::from_reader(file);
        let mut records = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::InvalidInput(format!("{} row {}: {e}", path.display(), i + 1)))?;
            let source = match row.source.parse()? {
                Source::Path(p) if p.is_relative() => Source::Path(base.join(p)),
                s => s,
            };
            records.push(Record {
                source,
                label: row.label,
                split: row.split,
            });
        }
        Ok(DatasetManifest { records })
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(Row {
                source: r.source.to_string(),
                label: r.label,
                split: r.split,
            })?;
        }
        w.flush().map_err(|e| Error::io("manifest", e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Records per class within one split.
    pub fn class_counts(&self, split: Split, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for r in self.split(split) {
            if r.label < classes {
                counts[r.label] += 1;
            }
        }
        counts
    }

    /// Checks labels, that the manifest is nonempty, and that every file exists.
    /// Every missing file is reported, not just the first.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::InvalidInput("manifest has no records".into()));
        }
        let bad: Vec<String> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label >= classes)
            .map(|(i, r)| format!("record {i}: label {} outside 0..{classes}", r.label))
            .collect();
        if !bad.is_empty() {
            return Err(Error::InvalidInput(bad.join("; ")));
        }
        let missing: Vec<PathBuf> = self
            .records
            .iter()
            .filter_map(|r| match &r.source {
                Source::Path(p) if !p.is_file() => Some(p.clone()),
                _ => None,
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        Ok(())
    }

    /// Errors unless every class has the same number of test records.
    pub fn check_test_balance(&self, classes: usize) -> Result<()> {
        let counts = self.class_counts(Split::Test, classes);
        if counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidInput(format!("test split is not balanced: {counts:?}")));
        }
        Ok(())
    }

    /// A balanced synthetic dataset, train records first, classes interleaved.
    pub fn synthetic(
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidInput(format!(
                "synthetic data needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(classes * (train_per_class + test_per_class));
        for (split, per_class) in [(Split::Train, train_per_class), (Split::Test, test_per_class)] {
            for _ in 0..per_class {
                for label in 0..classes {
                    records.push(Record {
                        source: Source::Synthetic {
                            size,
                            seed: rng.next_u64(),
                        },
                        label,
                        split,
                    });
                }
            }
        }
        Ok(DatasetManifest { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_round_trip() {
        for s in ["synth:64:123", "images/a.ppm", "/abs/b.pgm"] {
            assert_eq!(s.parse::<Source>().unwrap().to_string(), s);
        }
        assert!("synth:64".parse::<Source>().is_err());
        assert!("synth:x:1".parse::<Source>().is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let m = DatasetManifest::synthetic(5, 4, 2, 32, 7).unwrap();
        assert_eq!(m.len(), 30);
        assert_eq!(m.class_counts(Split::Train, 5), vec![4; 5]);
        assert_eq!(m.class_counts(Split::Test, 5), vec![2; 5]);
        m.check_test_balance(5).unwrap();
        assert_eq!(m, DatasetManifest::synthetic(5, 4, 2, 32, 7).unwrap());
    }

    #[test]
    fn csv_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "source,label,split\nimg/a.ppm,1,train\nsynth:16:5,0,test\n").unwrap();
        let m = DatasetManifest::read_csv(&path).unwrap();
        assert_eq!(m.records[0].source, Source::Path(dir.path().join("img/a.ppm")));
        assert_eq!(m.records[1].source, Source::Synthetic { size: 16, seed: 5 });
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("source,label,split\n"));
        assert!(text.ends_with("synth:16:5,0,test\n"));
    }

    #[test]
    fn validation_lists_every_missing_file() {
        let m = DatasetManifest {
            records: ["/nope/a.ppm", "/nope/b.ppm"]
                .iter()
                .map(|p| Record {
                    source: Source::Path(p.into()),
                    label: 0,
                    split: Split::Train,
                })
                .collect(),
        };
        match m.validate(5) {
            Err(Error::MissingFiles(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(DatasetManifest::default().validate(5).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let m = DatasetManifest::synthetic(3, 1, 1, 16, 0).unwrap();
        assert!(m.validate(2).is_err());
        assert!(m.validate(3).is_ok());
    }
}
