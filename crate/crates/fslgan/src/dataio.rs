//! MNIST IDX ingestion, padding/normalization, client sharding, and seeded
//! batch sampling.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gan::IMAGE_SIZE;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
const RAW_SIZE: usize = 28;

/// Images padded to 1×32×32 in [-1, 1], with their labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor, // (count, 1, 32, 32)
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        &self.images.data()[index * n..(index + 1) * n]
    }

    /// First `count` items.
    pub fn subset(&self, count: usize) -> Dataset {
        let n = count.min(self.len());
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        Dataset {
            images: Tensor::from_vec(
                &[n, 1, IMAGE_SIZE, IMAGE_SIZE],
                self.images.data()[..n * plane].to_vec(),
            )
            .expect("subset shape"),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// `count` items drawn by a seeded shuffle of the full index range.
    pub fn subset_shuffled(&self, count: usize, seed: u64) -> Result<Dataset> {
        if count > self.len() {
            return Err(Error::Config(format!(
                "subset of {count} exceeds dataset size {}",
                self.len()
            )));
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        indices.truncate(count);
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut data = Vec::with_capacity(count * plane);
        let mut labels = Vec::with_capacity(count);
        for &i in &indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            images: Tensor::from_vec(&[count, 1, IMAGE_SIZE, IMAGE_SIZE], data)?,
            labels,
        })
    }
}

/// Index pool one client samples from.
#[derive(Debug, Clone)]
pub struct Shard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "classes")]
pub enum ShardMode {
    Iid,
    LabelSkew(usize),
}

fn read_all<P: AsRef<Path>>(path: P) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    // gzip or raw
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(what.to_string()))
}

pub fn byte_to_pixel(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn pixel_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parse big-endian IDX image+label files into a padded, normalized dataset.
pub fn load_idx<P: AsRef<Path>, Q: AsRef<Path>>(images_path: P, labels_path: Q) -> Result<Dataset> {
    let img_bytes = read_all(images_path)?;
    let magic = be_u32(&img_bytes, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let count = be_u32(&img_bytes, 4, "image count")? as usize;
    let rows = be_u32(&img_bytes, 8, "image rows")? as usize;
    let cols = be_u32(&img_bytes, 12, "image cols")? as usize;
    if rows != RAW_SIZE || cols != RAW_SIZE {
        return Err(Error::Config(format!(
            "expected {RAW_SIZE}x{RAW_SIZE} images, got {rows}x{cols}"
        )));
    }
    let payload = &img_bytes[16..];
    if payload.len() < count * rows * cols {
        return Err(Error::Truncated("image payload".into()));
    }

    let lbl_bytes = read_all(labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let lbl_count = be_u32(&lbl_bytes, 4, "label count")? as usize;
    if lbl_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    if lbl_bytes.len() < 8 + lbl_count {
        return Err(Error::Truncated("label payload".into()));
    }
    let labels = lbl_bytes[8..8 + lbl_count].to_vec();

    // zero-pad 28x28 into centered 32x32 and map bytes to [-1, 1]
    let pad = (IMAGE_SIZE - RAW_SIZE) / 2;
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![-1.0; count * plane];
    for i in 0..count {
        for r in 0..RAW_SIZE {
            for c in 0..RAW_SIZE {
                let b = payload[i * RAW_SIZE * RAW_SIZE + r * RAW_SIZE + c];
                data[i * plane + (r + pad) * IMAGE_SIZE + (c + pad)] = byte_to_pixel(b);
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[count, 1, IMAGE_SIZE, IMAGE_SIZE], data)?,
        labels,
    })
}

/// Serialize a dataset back to raw IDX bytes (images, labels), cropping the
/// padding. Round-trips [`load_idx`] byte-exactly.
pub fn to_idx_bytes(dataset: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let count = dataset.len();
    let pad = (IMAGE_SIZE - RAW_SIZE) / 2;
    let mut img = Vec::with_capacity(16 + count * RAW_SIZE * RAW_SIZE);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(count as u32).to_be_bytes());
    img.extend_from_slice(&(RAW_SIZE as u32).to_be_bytes());
    img.extend_from_slice(&(RAW_SIZE as u32).to_be_bytes());
    for i in 0..count {
        let plane = dataset.image(i);
        for r in 0..RAW_SIZE {
            for c in 0..RAW_SIZE {
                img.push(pixel_to_byte(plane[(r + pad) * IMAGE_SIZE + (c + pad)]));
            }
        }
    }
    let mut lbl = Vec::with_capacity(8 + count);
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(count as u32).to_be_bytes());
    lbl.extend_from_slice(&dataset.labels);
    (img, lbl)
}

/// Partition dataset indices into per-client shards.
pub fn shard(dataset: &Dataset, num_clients: usize, mode: ShardMode, seed: u64) -> Result<Vec<Shard>> {
    assert!(num_clients >= 1);
    if num_clients > dataset.len() {
        return Err(Error::Config(format!(
            "{num_clients} clients exceed {} items",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        ShardMode::Iid => {
            let mut indices: Vec<usize> = (0..dataset.len()).collect();
            indices.shuffle(&mut rng);
            let per = dataset.len() / num_clients;
            Ok((0..num_clients)
                .map(|c| Shard {
                    client_id: c,
                    indices: indices[c * per..(c + 1) * per].to_vec(),
                })
                .collect())
        }
        ShardMode::LabelSkew(k) => {
            // deal label classes round-robin after a seeded permutation; each
            // client keeps data from exactly k classes
            let mut classes: Vec<u8> = (0..10).collect();
            classes.shuffle(&mut rng);
            let mut class_owner: Vec<Vec<usize>> = vec![Vec::new(); 10];
            let mut slot = 0usize;
            for _round in 0..k {
                for c in 0..num_clients {
                    class_owner[classes[slot % 10] as usize].push(c);
                    slot += 1;
                }
            }
            let mut shards: Vec<Shard> = (0..num_clients)
                .map(|c| Shard {
                    client_id: c,
                    indices: Vec::new(),
                })
                .collect();
            // indices within a shared class alternate between its owners
            let mut seen: Vec<usize> = vec![0; 10];
            for (i, &label) in dataset.labels.iter().enumerate() {
                let owners = &class_owner[label as usize];
                if owners.is_empty() {
                    continue;
                }
                let owner = owners[seen[label as usize] % owners.len()];
                seen[label as usize] += 1;
                shards[owner].indices.push(i);
            }
            Ok(shards)
        }
    }
}

/// Draw `batches` batches of `batch_size` indices uniformly with replacement,
/// deterministic per (shard, epoch_seed), and materialize the image tensors.
pub fn sample_batches(
    dataset: &Dataset,
    shard: &Shard,
    batch_size: usize,
    batches: usize,
    epoch_seed: u64,
) -> Result<Vec<Tensor>> {
    if shard.indices.is_empty() {
        return Err(Error::Config(format!(
            "empty shard for client {}",
            shard.client_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut data = Vec::with_capacity(batch_size * plane);
        for _ in 0..batch_size {
            let idx = shard.indices[rng.gen_range(0..shard.indices.len())];
            data.extend_from_slice(dataset.image(idx));
        }
        out.push(Tensor::from_vec(
            &[batch_size, 1, IMAGE_SIZE, IMAGE_SIZE],
            data,
        )?);
    }
    Ok(out)
}

/// Sampled index sequence only; used by determinism tests.
pub fn sample_indices(shard: &Shard, batch_size: usize, batches: usize, epoch_seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    (0..batch_size * batches)
        .map(|_| shard.indices[rng.gen_range(0..shard.indices.len())])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Synthetic 10-image IDX fixture.
    pub fn synthetic_idx(count: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(count as u32).to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..count {
            for p in 0..28 * 28 {
                img.push(((i * 31 + p * 7) % 256) as u8);
            }
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(count as u32).to_be_bytes());
        lbl.extend((0..count).map(|i| (i % 10) as u8));
        (img, lbl)
    }

    fn write_fixture(count: usize) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = synthetic_idx(count);
        let ip = dir.path().join("images-idx3-ubyte");
        let lp = dir.path().join("labels-idx1-ubyte");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (dir, ip, lp)
    }

    #[test]
    fn pixel_map_endpoints() {
        assert_eq!(byte_to_pixel(0), -1.0);
        assert_eq!(byte_to_pixel(255), 1.0);
    }

    #[test]
    fn normalization_round_trips_every_byte() {
        for b in 0..=255u8 {
            assert_eq!(pixel_to_byte(byte_to_pixel(b)), b);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad");
        std::fs::write(&bad, 0xdeadbeefu32.to_be_bytes()).unwrap();
        let (_d, _ip, lp) = write_fixture(1);
        assert!(matches!(
            load_idx(&bad, &lp),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (dir, ip, lp) = write_fixture(4);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 10);
        let tp = dir.path().join("trunc");
        std::fs::write(&tp, bytes).unwrap();
        assert!(load_idx(&tp, &lp).is_err());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (dir, ip, _lp) = write_fixture(4);
        let (_, lbl) = synthetic_idx(3);
        let lp3 = dir.path().join("short-labels");
        std::fs::write(&lp3, lbl).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp3),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let (_d, ip, lp) = write_fixture(10);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.images.shape(), &[10, 1, 32, 32]);
        let (img, lbl) = to_idx_bytes(&ds);
        assert_eq!(img, std::fs::read(&ip).unwrap());
        assert_eq!(lbl, std::fs::read(&lp).unwrap());
    }

    #[test]
    fn gzip_idx_loads_identically() {
        use std::io::Write;
        let (dir, ip, lp) = write_fixture(3);
        let plain = load_idx(&ip, &lp).unwrap();
        let gz_path = dir.path().join("images.gz");
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&std::fs::read(&ip).unwrap()).unwrap();
        std::fs::write(&gz_path, enc.finish().unwrap()).unwrap();
        let gz = load_idx(&gz_path, &lp).unwrap();
        assert_eq!(gz.images.data(), plain.images.data());
    }

    #[test]
    fn single_client_iid_shard_covers_everything() {
        let (_d, ip, lp) = write_fixture(10);
        let ds = load_idx(&ip, &lp).unwrap();
        let shards = shard(&ds, 1, ShardMode::Iid, 0).unwrap();
        assert_eq!(shards.len(), 1);
        let set: BTreeSet<usize> = shards[0].indices.iter().copied().collect();
        assert_eq!(set.len(), 10);
    }

    #[test]
    fn iid_shards_are_disjoint_and_cover_floor_count() {
        let (_d, ip, lp) = write_fixture(10);
        let ds = load_idx(&ip, &lp).unwrap();
        let shards = shard(&ds, 3, ShardMode::Iid, 7).unwrap();
        let mut all = BTreeSet::new();
        for s in &shards {
            assert_eq!(s.indices.len(), 3);
            for &i in &s.indices {
                assert!(all.insert(i), "index {i} appears twice");
            }
        }
        assert_eq!(all.len(), 9); // floor(10/3)*3
    }

    #[test]
    fn label_skew_gives_each_client_exactly_k_classes() {
        let (_d, ip, lp) = write_fixture(100);
        let ds = load_idx(&ip, &lp).unwrap();
        let shards = shard(&ds, 5, ShardMode::LabelSkew(2), 3).unwrap();
        let mut union = BTreeSet::new();
        for s in &shards {
            let classes: BTreeSet<u8> =
                s.indices.iter().map(|&i| ds.labels[i]).collect();
            assert_eq!(classes.len(), 2, "client {} classes {classes:?}", s.client_id);
            union.extend(classes);
        }
        assert_eq!(union.len(), 10);
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let (_d, ip, lp) = write_fixture(3);
        let ds = load_idx(&ip, &lp).unwrap();
        assert!(shard(&ds, 4, ShardMode::Iid, 0).is_err());
    }

    #[test]
    fn default_sampling_draws_6144_images() {
        let (_d, ip, lp) = write_fixture(10);
        let ds = load_idx(&ip, &lp).unwrap();
        let s = shard(&ds, 1, ShardMode::Iid, 0).unwrap().remove(0);
        let batches = sample_batches(&ds, &s, 256, 24, 1).unwrap();
        assert_eq!(batches.len(), 24);
        let total: usize = batches.iter().map(|b| b.shape()[0]).sum();
        assert_eq!(total, 6144);
    }

    #[test]
    fn single_image_batch() {
        let (_d, ip, lp) = write_fixture(10);
        let ds = load_idx(&ip, &lp).unwrap();
        let s = shard(&ds, 1, ShardMode::Iid, 0).unwrap().remove(0);
        let batches = sample_batches(&ds, &s, 1, 1, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn same_epoch_seed_gives_identical_index_sequence() {
        let s = Shard {
            client_id: 0,
            indices: (0..50).collect(),
        };
        assert_eq!(sample_indices(&s, 8, 3, 42), sample_indices(&s, 8, 3, 42));
        assert_ne!(sample_indices(&s, 8, 3, 42), sample_indices(&s, 8, 3, 43));
    }

    #[test]
    fn empty_shard_is_an_error() {
        let (_d, ip, lp) = write_fixture(4);
        let ds = load_idx(&ip, &lp).unwrap();
        let s = Shard {
            client_id: 0,
            indices: vec![],
        };
        assert!(sample_batches(&ds, &s, 1, 1, 0).is_err());
    }
}
