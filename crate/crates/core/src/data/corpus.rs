//! On-disk corpus: `<root>/<split>/<id>.{image,masks,embed}.dtf`, `<id>.text.txt`,
//! plus `<root>/manifest.txt` with one `split<TAB>id<TAB>sha256` line per sample.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::dtf::{self, DtfData, DtfTensor};
use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn get(&self, split: &str) -> Option<&[Sample]> {
        match split {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub sample_id: String,
    pub sha256: String,
}

fn file(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}.{suffix}"))
}

fn encode_sample(s: &Sample) -> Result<(Vec<u8>, Vec<u8>)> {
    let image = dtf::encode_unnamed([&DtfTensor::from_tensor(&s.image)])?;
    let bytes: Vec<u8> = s.masks.data().iter().map(|&v| v as u8).collect();
    let masks = dtf::encode_unnamed([&DtfTensor::from_u8(s.masks.shape().to_vec(), bytes)?])?;
    Ok((image, masks))
}

fn digest(image: &[u8], masks: &[u8], text: &[u8]) -> String {
    let mut h = Sha256::new();
    for part in [image, masks, text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one sample into `dir` and returns its checksum.
pub fn save_sample(dir: &Path, s: &Sample) -> Result<String> {
    s.validate()?;
    let (image, masks) = encode_sample(s)?;
    dtf::write_atomic(&file(dir, &s.sample_id, "image.dtf"), &image)?;
    dtf::write_atomic(&file(dir, &s.sample_id, "masks.dtf"), &masks)?;
    dtf::write_atomic(&file(dir, &s.sample_id, "text.txt"), s.text.as_bytes())?;
    if let Some(e) = &s.embedding {
        let t = DtfTensor::new(vec![e.len()], DtfData::F32(e.clone()))?;
        dtf::write_atomic(&file(dir, &s.sample_id, "embed.dtf"), &dtf::encode_unnamed([&t])?)?;
    }
    Ok(digest(&image, &masks, s.text.as_bytes()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn single(path: &Path, bytes: &[u8]) -> Result<DtfTensor> {
    let mut items = dtf::decode(bytes)?;
    if items.len() != 1 {
        return Err(Error::Data(format!("{}: expected one tensor, found {}", path.display(), items.len())));
    }
    Ok(items.remove(0).1)
}

/// Loads one sample; with `expect_sha` the stored bytes must match.
pub fn load_sample(dir: &Path, id: &str, expect_sha: Option<&str>) -> Result<Sample> {
    let (ip, mp, tp) = (file(dir, id, "image.dtf"), file(dir, id, "masks.dtf"), file(dir, id, "text.txt"));
    let (ib, mb, tb) = (read(&ip)?, read(&mp)?, read(&tp)?);
    if let Some(want) = expect_sha {
        let got = digest(&ib, &mb, &tb);
        if got != want {
            return Err(Error::Data(format!("sample `{id}` in {}: checksum {got} != manifest {want}", dir.display())));
        }
    }
    let image: Tensor<f32> = single(&ip, &ib)?.to_tensor()?;
    let masks: Tensor<f32> = single(&mp, &mb)?.to_tensor()?;
    let text = String::from_utf8(tb).map_err(|_| Error::Data(format!("{}: text is not utf-8", tp.display())))?;
    let ep = file(dir, id, "embed.dtf");
    let embedding = if ep.exists() {
        let t: Tensor<f32> = single(&ep, &read(&ep)?)?.to_tensor()?;
        Some(t.into_data())
    } else {
        None
    };
    let s = Sample { sample_id: id.to_string(), image, masks, text, embedding };
    s.validate()?;
    Ok(s)
}

/// Writes all splits and the manifest. Returns the manifest entries.
pub fn write_corpus(root: impl AsRef<Path>, splits: &Splits) -> Result<Vec<ManifestEntry>> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    for split in SPLITS {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let samples = splits.get(split).unwrap_or_default();
        let shas: Vec<String> = samples.par_iter().map(|s| save_sample(&dir, s)).collect::<Result<_>>()?;
        entries.extend(samples.iter().zip(shas).map(|(s, sha256)| ManifestEntry {
            split: split.to_string(),
            sample_id: s.sample_id.clone(),
            sha256,
        }));
    }
    let text: String = entries.iter().map(|e| format!("{}\t{}\t{}\n", e.split, e.sample_id, e.sha256)).collect();
    dtf::write_atomic(&root.join(MANIFEST), text.as_bytes())?;
    Ok(entries)
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = root.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            match parts.as_slice() {
                [split, id, sha] if SPLITS.contains(split) => {
                    Ok(ManifestEntry { split: split.to_string(), sample_id: id.to_string(), sha256: sha.to_string() })
                }
                _ => Err(Error::Data(format!("{}:{}: malformed manifest line", path.display(), i + 1))),
            }
        })
        .collect()
}

/// Samples of one split in manifest order, checksums verified.
pub fn load_split(root: impl AsRef<Path>, split: &str) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    if !SPLITS.contains(&split) {
        return Err(Error::Data(format!("unknown split `{split}` (expected train, val or test)")));
    }
    let dir = root.join(split);
    read_manifest(root)?
        .into_par_iter()
        .filter(|e| e.split == split)
        .map(|e| load_sample(&dir, &e.sample_id, Some(&e.sha256)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_dataset, synth_generate};

    fn corpus(n: usize, seed: u64) -> Splits {
        let all = synth_generate(n, (64, 64), seed).unwrap();
        let (train, val, test) = split_dataset(&all, seed).unwrap();
        Splits { train, val, test }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut splits = corpus(10, 4);
        splits.val[0].embedding = Some(vec![0.5, -1.0, 2.0]);
        let entries = write_corpus(dir.path(), &splits).unwrap();
        assert_eq!(entries.len(), 10);
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
        for split in SPLITS {
            assert_eq!(load_split(dir.path(), split).unwrap(), splits.get(split).unwrap());
        }
    }

    #[test]
    fn manifest_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(a.path(), &corpus(20, 8)).unwrap();
        write_corpus(b.path(), &corpus(20, 8)).unwrap();
        let ma = fs::read(a.path().join(MANIFEST)).unwrap();
        assert_eq!(ma, fs::read(b.path().join(MANIFEST)).unwrap());
        let counts: Vec<usize> =
            SPLITS.iter().map(|s| read_manifest(a.path()).unwrap().iter().filter(|e| e.split == *s).count()).collect();
        assert_eq!(counts, [16, 2, 2]);
    }

    #[test]
    fn tampering_and_missing_paths_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let splits = corpus(10, 1);
        write_corpus(dir.path(), &splits).unwrap();
        let id = &splits.test[0].sample_id;
        fs::write(dir.path().join("test").join(format!("{id}.text.txt")), "edited").unwrap();
        assert!(matches!(load_split(dir.path(), "test"), Err(Error::Data(m)) if m.contains("checksum")));
        let missing = dir.path().join("nope");
        match load_split(&missing, "train") {
            Err(Error::Io { path, .. }) => assert!(path.contains("nope")),
            other => panic!("{other:?}"),
        }
    }
}
