//! Dataset directories.
//!
//! Card datasets hold `manifest.toml`, `images.f32` (little-endian f32,
//! 48×48 per sample, row-major, samples in index order) and `labels.csv`
//! (`index,suit,angle,shear,tx,ty`). Sequence datasets hold `manifest.toml`
//! (including the ordered alphabet) and `sequences.csv` (`sequence,target`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cards::{generate_card_dataset, CardRanges, CardSample, Suit, CARD_PIXELS, CARD_SIZE};
use crate::config::DatasetConfig;
use crate::rng::Rng;
use crate::sequences::{
    generate_synthetic_sequences, read_sequence_rows, validate_rows, write_sequence_csv, Alphabet,
    SequenceError, SequenceSample, PADDING_TOKEN,
};
use crate::split::{RangeSplit, SplitError};
use crate::tensor::Matrix;
use crate::trainer::{DataKind, Dataset};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const IMAGES: &str = "images.f32";
const LABELS: &str = "labels.csv";
const SEQUENCES: &str = "sequences.csv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("unsupported dataset format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> StoreError {
    StoreError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CardManifest {
    pub format_version: u32,
    pub kind: String,
    pub count: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub angle: [f64; 2],
    pub shear: [f64; 2],
    pub translation: [f64; 2],
    pub images_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticInfo {
    pub seed: u64,
    pub raw_min: f64,
    pub raw_max: f64,
    pub target_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub format_version: u32,
    pub kind: String,
    pub count: usize,
    pub length: usize,
    pub alphabet: Vec<String>,
    pub padding_token: String,
    /// `synthetic` or the path of the ingested CSV.
    pub source: String,
    /// Rows of the source CSV that were skipped in lenient mode.
    #[serde(default)]
    pub rejected_rows: usize,
    #[serde(default)]
    pub synthetic: Option<SyntheticInfo>,
}

/// A dataset as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredDataset {
    Cards {
        manifest: CardManifest,
        samples: Vec<CardSample>,
    },
    Sequences {
        manifest: SequenceManifest,
        alphabet: Alphabet,
        samples: Vec<SequenceSample>,
    },
}

fn image_blob(samples: &[CardSample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * CARD_PIXELS * 4);
    for s in samples {
        for &v in &s.image {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

impl StoredDataset {
    pub fn cards(samples: Vec<CardSample>, seed: u64, ranges: &CardRanges) -> Self {
        let manifest = CardManifest {
            format_version: DATASET_FORMAT_VERSION,
            kind: "cards".into(),
            count: samples.len(),
            seed,
            width: CARD_SIZE,
            height: CARD_SIZE,
            angle: ranges.angle,
            shear: ranges.shear,
            translation: ranges.translation,
            images_sha256: hex_digest(&image_blob(&samples)),
        };
        StoredDataset::Cards { manifest, samples }
    }

    pub fn len(&self) -> usize {
        match self {
            StoredDataset::Cards { samples, .. } => samples.len(),
            StoredDataset::Sequences { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generates or ingests the dataset described by a config section.
    pub fn from_config(cfg: &DatasetConfig) -> Result<Self, StoreError> {
        match cfg {
            DatasetConfig::Cards { count, seed, .. } => {
                let ranges = cfg.card_ranges().expect("card config");
                let samples = generate_card_dataset(*count, &ranges, &Rng::new(*seed));
                Ok(Self::cards(samples, *seed, &ranges))
            }
            DatasetConfig::SequencesSynthetic {
                count,
                seed,
                length,
                alphabet_size,
                target_range,
            } => {
                let alphabet = Alphabet::synthetic(*alphabet_size)?;
                let corpus = generate_synthetic_sequences(
                    *count,
                    &alphabet,
                    *length,
                    *target_range,
                    &Rng::new(*seed),
                )?;
                let manifest = SequenceManifest {
                    format_version: DATASET_FORMAT_VERSION,
                    kind: "sequences".into(),
                    count: corpus.samples.len(),
                    length: *length,
                    alphabet: alphabet.tokens().to_vec(),
                    padding_token: alphabet.padding_token().to_string(),
                    source: "synthetic".into(),
                    rejected_rows: 0,
                    synthetic: Some(SyntheticInfo {
                        seed: *seed,
                        raw_min: corpus.raw_min,
                        raw_max: corpus.raw_max,
                        target_range: corpus.target_range,
                    }),
                };
                Ok(StoredDataset::Sequences {
                    manifest,
                    alphabet,
                    samples: corpus.samples,
                })
            }
            DatasetConfig::SequencesCsv {
                path,
                length,
                alphabet_size,
                strict,
            } => {
                let p = Path::new(path);
                let file = fs::File::open(p).map_err(io_err(p))?;
                let (rows, problems) = read_sequence_rows(file)?;
                let alphabet =
                    Alphabet::from_corpus(rows.iter().map(|r| r.tokens.as_slice()), *alphabet_size)?;
                let load = validate_rows(rows, problems, &alphabet, *length, *strict)?;
                let manifest = SequenceManifest {
                    format_version: DATASET_FORMAT_VERSION,
                    kind: "sequences".into(),
                    count: load.samples.len(),
                    length: *length,
                    alphabet: alphabet.tokens().to_vec(),
                    padding_token: PADDING_TOKEN.into(),
                    source: path.clone(),
                    rejected_rows: load.rejected.len(),
                    synthetic: None,
                };
                Ok(StoredDataset::Sequences {
                    manifest,
                    alphabet,
                    samples: load.samples,
                })
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(io_err(&p))
        };
        let manifest_text = match self {
            StoredDataset::Cards { manifest, samples } => {
                write(IMAGES, &image_blob(samples))?;
                let mut labels = csv::Writer::from_writer(Vec::new());
                let p = dir.join(LABELS);
                let csv_err = |e: csv::Error| format_err(&p, e.to_string());
                labels
                    .write_record(["index", "suit", "angle", "shear", "tx", "ty"])
                    .map_err(csv_err)?;
                for (i, s) in samples.iter().enumerate() {
                    labels
                        .write_record([
                            i.to_string(),
                            s.suit.to_string(),
                            format!("{:?}", s.angle),
                            format!("{:?}", s.shear),
                            format!("{:?}", s.tx),
                            format!("{:?}", s.ty),
                        ])
                        .map_err(csv_err)?;
                }
                let bytes = labels.into_inner().map_err(|e| format_err(&p, e.to_string()))?;
                write(LABELS, &bytes)?;
                toml::to_string(manifest)
            }
            StoredDataset::Sequences {
                manifest, samples, ..
            } => {
                let mut buf = Vec::new();
                write_sequence_csv(&mut buf, samples)?;
                write(SEQUENCES, &buf)?;
                toml::to_string(manifest)
            }
        };
        let text = manifest_text.map_err(|e| format_err(&dir.join(MANIFEST), e.to_string()))?;
        write(MANIFEST, text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| format_err(&mpath, e.to_string()))?;
        let version = table
            .get("format_version")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| format_err(&mpath, "missing format_version"))?;
        if version != DATASET_FORMAT_VERSION as i64 {
            return Err(StoreError::Version {
                found: version.clamp(0, u32::MAX as i64) as u32,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        let kind = table
            .get("kind")
            .and_then(|v| v.as_str())
            .ok_or_else(|| format_err(&mpath, "missing kind"))?
            .to_string();
        let parse_err = |e: toml::de::Error| format_err(&mpath, e.to_string());
        match kind.as_str() {
            "cards" => {
                let manifest: CardManifest = toml::Value::Table(table).try_into().map_err(parse_err)?;
                let samples = load_cards(dir, &manifest)?;
                Ok(StoredDataset::Cards { manifest, samples })
            }
            "sequences" => {
                let manifest: SequenceManifest =
                    toml::Value::Table(table).try_into().map_err(parse_err)?;
                let alphabet = Alphabet::new(manifest.alphabet.clone(), &manifest.padding_token)?;
                let p = dir.join(SEQUENCES);
                let file = fs::File::open(&p).map_err(io_err(&p))?;
                let (rows, problems) = read_sequence_rows(file)?;
                let load = validate_rows(rows, problems, &alphabet, manifest.length, true)?;
                if load.samples.len() != manifest.count {
                    return Err(format_err(
                        &p,
                        format!("{} rows, manifest says {}", load.samples.len(), manifest.count),
                    ));
                }
                Ok(StoredDataset::Sequences {
                    manifest,
                    alphabet,
                    samples: load.samples,
                })
            }
            other => Err(format_err(&mpath, format!("unknown dataset kind '{other}'"))),
        }
    }

    /// All samples as a training matrix; ids are sample indices.
    pub fn to_dataset(&self) -> Dataset {
        let n = self.len();
        let ids: Vec<usize> = (0..n).collect();
        match self {
            StoredDataset::Cards { samples, .. } => {
                let mut x = Matrix::zeros(n, CARD_PIXELS);
                for (i, s) in samples.iter().enumerate() {
                    x.row_mut(i).copy_from_slice(&s.image);
                }
                Dataset::new(
                    x,
                    samples.iter().map(|s| s.angle).collect(),
                    samples.iter().map(|s| s.suit.to_string()).collect(),
                    ids,
                    DataKind::Image { width: CARD_SIZE },
                )
                .expect("card dataset is consistent")
            }
            StoredDataset::Sequences {
                manifest,
                alphabet,
                samples,
            } => {
                let d = manifest.length * alphabet.len();
                let mut x = Matrix::zeros(n, d);
                for (i, s) in samples.iter().enumerate() {
                    x.row_mut(i).copy_from_slice(s.onehot.as_slice());
                }
                Dataset::new(
                    x,
                    samples.iter().map(|s| s.target).collect(),
                    vec!["sequence".to_string(); n],
                    ids,
                    DataKind::OneHot {
                        rows: manifest.length,
                        alphabet: alphabet.clone(),
                    },
                )
                .expect("sequence dataset is consistent")
            }
        }
    }

    /// Train and test subsets by target (angle for cards), plus the number
    /// of dropped samples.
    pub fn split(&self, split: &RangeSplit) -> Result<(Dataset, Dataset, usize), StoreError> {
        if matches!(self, StoredDataset::Cards { .. }) {
            split.validate_within(-30.0, 30.0)?;
        }
        let all = self.to_dataset();
        let idx = split.split_indices(&all.targets)?;
        Ok((all.select(&idx.train), all.select(&idx.test), idx.dropped.len()))
    }
}

fn load_cards(dir: &Path, manifest: &CardManifest) -> Result<Vec<CardSample>, StoreError> {
    if manifest.width != CARD_SIZE || manifest.height != CARD_SIZE {
        return Err(format_err(
            &dir.join(MANIFEST),
            format!("image size {}x{} is not 48x48", manifest.width, manifest.height),
        ));
    }
    let ipath = dir.join(IMAGES);
    let blob = fs::read(&ipath).map_err(io_err(&ipath))?;
    let expected = manifest.count * CARD_PIXELS * 4;
    if blob.len() != expected {
        return Err(format_err(
            &ipath,
            format!("expected {expected} bytes, found {}", blob.len()),
        ));
    }
    if hex_digest(&blob) != manifest.images_sha256 {
        return Err(format_err(&ipath, "checksum mismatch"));
    }
    let lpath = dir.join(LABELS);
    let file = fs::File::open(&lpath).map_err(io_err(&lpath))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| format_err(&lpath, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["index", "suit", "angle", "shear", "tx", "ty"] {
        return Err(format_err(&lpath, "header must be index,suit,angle,shear,tx,ty"));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(&lpath, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| format_err(&lpath, format!("line {line}: {m}"));
        let num = |k: usize| -> Result<f64, StoreError> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {k}: {e}")))
        };
        if rec.len() != 6 || rec[0].parse::<usize>().ok() != Some(i) {
            return Err(bad("expected 6 fields with consecutive index".into()));
        }
        let suit: Suit = rec[1].parse().map_err(bad)?;
        let image = blob[i * CARD_PIXELS * 4..(i + 1) * CARD_PIXELS * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        samples.push(CardSample {
            image,
            suit,
            angle: num(2)?,
            shear: num(3)?,
            tx: num(4)?,
            ty: num(5)?,
        });
    }
    if samples.len() != manifest.count {
        return Err(format_err(
            &lpath,
            format!("{} rows, manifest says {}", samples.len(), manifest.count),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card_cfg(count: usize) -> DatasetConfig {
        DatasetConfig::Cards {
            count,
            seed: 4,
            angle: [-30.0, 30.0],
            shear: [-10.0, 10.0],
            translation: [-0.1, 0.1],
        }
    }

    #[test]
    fn card_round_trip_and_byte_identical_rerun() {
        let d = StoredDataset::from_config(&card_cfg(25)).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        d.save(a.path()).unwrap();
        StoredDataset::from_config(&card_cfg(25)).unwrap().save(b.path()).unwrap();
        for f in [MANIFEST, IMAGES, LABELS] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(StoredDataset::load(a.path()).unwrap(), d);
    }

    #[test]
    fn sequence_round_trip() {
        let cfg = DatasetConfig::SequencesSynthetic {
            count: 40,
            seed: 2,
            length: 21,
            alphabet_size: 27,
            target_range: [-500.0, -200.0],
        };
        let d = StoredDataset::from_config(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(StoredDataset::load(dir.path()).unwrap(), d);
        let ds = d.to_dataset();
        assert_eq!(ds.x.shape(), (40, 21 * 27));
    }

    #[test]
    fn csv_ingest_builds_alphabet() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "sequence,target\n[C][O],-300.5\n[N][C],-410\n[C],-250\n").unwrap();
        let cfg = DatasetConfig::SequencesCsv {
            path: p.display().to_string(),
            length: 4,
            alphabet_size: Some(6),
            strict: true,
        };
        let d = StoredDataset::from_config(&cfg).unwrap();
        let StoredDataset::Sequences { alphabet, samples, .. } = &d else {
            panic!("sequence dataset expected")
        };
        assert_eq!(alphabet.len(), 6);
        assert_eq!(samples.len(), 3);
        let (train, test, dropped) = d
            .split(&RangeSplit {
                train_ranges: vec![[-500.0, -350.0]],
                test_range: Some([-350.0, -300.0]),
            })
            .unwrap();
        assert_eq!((train.len(), test.len(), dropped), (1, 1, 1));
    }

    #[test]
    fn corrupt_and_missing_files() {
        let d = StoredDataset::from_config(&card_cfg(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let ip = dir.path().join(IMAGES);
        let mut blob = fs::read(&ip).unwrap();
        blob[10] ^= 0x40;
        fs::write(&ip, &blob).unwrap();
        assert!(matches!(StoredDataset::load(dir.path()), Err(StoreError::Format { .. })));
        fs::remove_file(dir.path().join(MANIFEST)).unwrap();
        assert!(matches!(StoredDataset::load(dir.path()), Err(StoreError::Io { .. })));
    }
}
