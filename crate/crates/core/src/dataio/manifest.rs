//! On-disk dataset layout: `images/<id>.png`, `masks/<id>.png` and a
//! tab-separated manifest `id  split  sha256(image)  sha256(mask)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::image_io::{encode_image_png, encode_mask_png, load_image_pair, write_bytes};
use super::synth::{synth_sample, SynthConfig};
use super::{Sample, Split};
use crate::error::{io_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image_sha256: String,
    pub mask_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.id, self.split.as_str(), self.image_sha256, self.mask_sha256)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let [id, split, img, mask] = f[..] else {
            return Err(Error::Config(format!("manifest line needs 4 tab-separated fields: `{line}`")));
        };
        Ok(Self {
            id: id.to_string(),
            split: split.parse()?,
            image_sha256: img.to_string(),
            mask_sha256: mask.to_string(),
        })
    }

    pub fn image_path(&self, dir: &Path) -> PathBuf {
        dir.join("images").join(format!("{}.png", self.id))
    }

    pub fn mask_path(&self, dir: &Path) -> PathBuf {
        dir.join("masks").join(format!("{}.png", self.id))
    }
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| e.line() + "\n").collect()
}

/// Digest of the whole manifest: stable for a fixed synthesis config.
pub fn manifest_hash(entries: &[ManifestEntry]) -> String {
    sha256_hex(manifest_text(entries).as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(ManifestEntry::parse).collect()
}

fn is_nonempty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes `count` synthetic samples and their manifest into `dir`.
pub fn write_synth_dataset(dir: &Path, cfg: &SynthConfig, count: u64, force: bool) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    if is_nonempty_dir(dir) && !force {
        return Err(Error::Config(format!(
            "output directory {} exists and is not empty (use --force)",
            dir.display()
        )));
    }
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = synth_sample(cfg, i);
            let img = encode_image_png(&s.image)?;
            let mask = encode_mask_png(&s.mask)?;
            let e = ManifestEntry {
                id: s.id.clone(),
                split: s.split,
                image_sha256: sha256_hex(&img),
                mask_sha256: sha256_hex(&mask),
            };
            write_bytes(&e.image_path(dir), &img)?;
            write_bytes(&e.mask_path(dir), &mask)?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    write_bytes(&dir.join(MANIFEST_FILE), manifest_text(&entries).as_bytes())?;
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_bytes(&dir.join("synth.toml"), cfg_text.as_bytes())?;
    Ok(entries)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    fn from_samples(samples: Vec<Sample>) -> Self {
        let mut d = Dataset::default();
        for s in samples {
            match s.split {
                Split::Train => d.train.push(s),
                Split::Val => d.val.push(s),
                Split::Test => d.test.push(s),
            }
        }
        d
    }

    /// Generates samples `0..count` in memory.
    pub fn synth(cfg: &SynthConfig, count: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::from_samples((0..count).into_par_iter().map(|i| synth_sample(cfg, i)).collect()))
    }

    /// Loads every manifest entry, checking file digests.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(dir)?;
        let samples = entries
            .par_iter()
            .map(|e| {
                for (path, want) in [(e.image_path(dir), &e.image_sha256), (e.mask_path(dir), &e.mask_sha256)] {
                    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                    if &sha256_hex(&bytes) != want {
                        return Err(Error::Image {
                            path,
                            message: "content digest differs from manifest".into(),
                        });
                    }
                }
                load_image_pair(&e.image_path(dir), &e.mask_path(dir), &e.id, e.split)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_samples(samples))
    }

    pub fn split(&self, split: Split) -> &[Sample] {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        let d = Dataset::synth(&SynthConfig::default(), 250).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (200, 25, 25));
    }

    #[test]
    fn written_dataset_loads_back_and_hash_is_stable() {
        let cfg = SynthConfig {
            seed: 7,
            ..SynthConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = write_synth_dataset(a.path(), &cfg, 12, false).unwrap();
        let eb = write_synth_dataset(b.path(), &cfg, 12, false).unwrap();
        assert_eq!(manifest_hash(&ea), manifest_hash(&eb));
        assert_eq!(read_manifest(a.path()).unwrap(), ea);
        let loaded = Dataset::load(a.path()).unwrap();
        let mem = Dataset::synth(&cfg, 12).unwrap();
        assert_eq!(loaded.train, mem.train);
        assert_eq!(loaded.val, mem.val);
        assert!(write_synth_dataset(a.path(), &cfg, 12, false).is_err());
        assert!(write_synth_dataset(a.path(), &cfg, 12, true).is_ok());
    }

    #[test]
    fn tampered_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_synth_dataset(dir.path(), &SynthConfig::default(), 2, false).unwrap();
        std::fs::write(e[0].mask_path(dir.path()), b"x").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn bad_manifest_line() {
        assert!(ManifestEntry::parse("a\ttrain\tx").is_err());
        assert!(ManifestEntry::parse("a\tholdout\tx\ty").is_err());
    }
}
