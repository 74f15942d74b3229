//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/records.jsonl
//! <root>/<split>/images/<id>.pgm
//! <root>/<split>/masks/<id>.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render_sample, sample_spec_in_class, DamageClass, DefectSpec, Sample, METERS_PER_PIXEL};
use crate::error::{Error, Result};
use crate::image::{decode_pgm, encode_pgm, Image, Mask};
use crate::parallel::par_map;
use crate::rng::RngStreams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
}

/// Generation recipe plus, after writing, the per-file checksums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: usize,
    pub meters_per_pixel: f64,
    /// One weight per class, in [`DamageClass::ALL`] order.
    pub class_weights: Vec<f64>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub counts: Vec<Vec<usize>>,
    #[serde(default)]
    pub files: Vec<FileChecksum>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            seed: 2024,
            image_size: 64,
            meters_per_pixel: METERS_PER_PIXEL,
            class_weights: DamageClass::ALL.iter().map(|c| c.default_weight()).collect(),
            train: 2000,
            val: 200,
            test: 200,
            counts: Vec::new(),
            files: Vec::new(),
        }
    }
}

impl DatasetManifest {
    /// Split sizes from fractions of `total`; rounding remainder goes to train.
    pub fn with_fractions(mut self, total: usize, fractions: [f64; 3]) -> Self {
        self.val = (total as f64 * fractions[1]).round() as usize;
        self.test = (total as f64 * fractions[2]).round() as usize;
        self.train = total - self.val - self.test;
        self
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn validate(&self) -> Result<()> {
        if self.class_weights.len() != DamageClass::ALL.len() {
            return Err(Error::config(
                "class_weights",
                format!("need {} weights", DamageClass::ALL.len()),
            ));
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("class_weights", "must be finite, non-negative, not all zero"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        if (self.meters_per_pixel - METERS_PER_PIXEL).abs() > 1e-12 {
            return Err(Error::config("meters_per_pixel", "fixed at 0.05"));
        }
        Ok(())
    }
}

/// Per-class counts for `total` items: proportional to `weights`, floors
/// first, remaining units to the largest fractional parts (lower class
/// index wins ties).
pub fn class_counts(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Renders every split in memory. Labels are assigned and shuffled before
/// any rendering; each sample draws from its own indexed stream.
pub fn generate_dataset(manifest: &DatasetManifest, workers: usize) -> Result<Dataset> {
    manifest.validate()?;
    let streams = RngStreams::new(manifest.seed);
    let mut out = manifest.clone();
    out.counts.clear();
    out.files.clear();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let n = manifest.split_size(split);
        let counts = class_counts(n, &manifest.class_weights);
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat(c).take(k))
            .collect();
        labels.shuffle(&mut streams.indexed("split-order", &[split.index()]));
        out.counts.push(counts);
        let jobs: Vec<(usize, usize)> = labels.into_iter().enumerate().collect();
        let size = manifest.image_size;
        let rendered = par_map(&jobs, workers, |&(i, label)| {
            let mut rng = streams.indexed("spec", &[split.index(), i as u64]);
            let spec = sample_spec_in_class(&mut rng, DamageClass::ALL[label], size);
            let seed: u64 = streams.indexed("render", &[split.index(), i as u64]).gen();
            render_sample(&spec, size, seed).map(|mut s| {
                s.id = format!("{}-{:05}", split.name(), i);
                s
            })
        });
        splits.push(rendered.into_iter().collect::<Result<Vec<_>>>()?);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        manifest: out,
        train,
        val,
        test,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    image_path: String,
    mask_path: String,
    label: usize,
    caption: String,
    spec: DefectSpec,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut Vec<FileChecksum>) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.push(FileChecksum {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

/// Writes a generated dataset; the returned manifest carries the checksums.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = ds.manifest.clone();
    let mut files = Vec::new();
    let size = manifest.image_size;
    for split in Split::ALL {
        let mut records = String::new();
        for s in ds.split(split) {
            let image_path = format!("{}/images/{}.pgm", split.name(), s.id);
            let mask_path = format!("{}/masks/{}.pgm", split.name(), s.id);
            write_file(root, &image_path, &encode_pgm(size, size, &s.image.to_bytes()), &mut files)?;
            write_file(root, &mask_path, &encode_pgm(size, size, &s.mask.to_bytes()), &mut files)?;
            let rec = Record {
                id: s.id.clone(),
                image_path,
                mask_path,
                label: s.label,
                caption: s.caption.clone(),
                spec: s.spec.clone(),
            };
            records.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            records.push('\n');
        }
        let rel = format!("{}/records.jsonl", split.name());
        write_file(root, &rel, records.as_bytes(), &mut files)?;
    }
    manifest.files = files;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = root.join("manifest.json");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads and verifies a dataset written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&read(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    manifest.validate()?;
    let checksums: std::collections::HashMap<&str, &str> = manifest
        .files
        .iter()
        .map(|f| (f.path.as_str(), f.sha256.as_str()))
        .collect();
    let verify = |rel: &str, bytes: &[u8]| -> Result<()> {
        let path: PathBuf = root.join(rel);
        match checksums.get(rel) {
            None => Err(Error::format(&path, "file not listed in manifest")),
            Some(&want) if want != sha256_hex(bytes) => Err(Error::Checksum(path)),
            Some(_) => Ok(()),
        }
    };
    let size = manifest.image_size;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let rel = format!("{}/records.jsonl", split.name());
        let rpath = root.join(&rel);
        let bytes = read(&rpath)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(&rpath, "not utf-8"))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::format(&rpath, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(Error::format(&rpath, format!("line {}: truncated record", records.len())));
        }
        verify(&rel, &bytes)?;
        if records.len() != manifest.split_size(split) {
            return Err(Error::format(
                &rpath,
                format!("{} records, manifest says {}", records.len(), manifest.split_size(split)),
            ));
        }
        let mut samples = Vec::with_capacity(records.len());
        for rec in records {
            let load = |rel: &str| -> Result<Vec<u8>> {
                let path = root.join(rel);
                let bytes = read(&path)?;
                verify(rel, &bytes)?;
                let (w, h, px) = decode_pgm(&bytes, &path)?;
                if w != size || h != size {
                    return Err(Error::format(
                        &path,
                        format!("{w}×{h} image, manifest says {size}×{size}"),
                    ));
                }
                Ok(px)
            };
            let image = Image::from_bytes(size, size, &load(&rec.image_path)?)?;
            let mask = Mask::from_bytes(size, size, &load(&rec.mask_path)?)?;
            if rec.label != rec.spec.class.index() {
                return Err(Error::format(&rpath, format!("{}: label disagrees with spec", rec.id)));
            }
            samples.push(Sample {
                id: rec.id,
                image,
                mask,
                label: rec.label,
                caption: rec.caption,
                spec: rec.spec,
            });
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}
