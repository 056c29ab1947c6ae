//! On-disk formats, all little-endian.
//!
//! Sequence (`.skl1`): magic `SKL1`, u32 version=1, u32 C, u32 T, u32 V,
//! f32 fps, u32 root_joint, then `C*T*V` f32 values in `[c][t][v]` order.
//!
//! Labels (`.skll`): magic `SKLL`, u32 T, then T u16 class indices.
//!
//! Manifest: UTF-8 text, header line `K=<int>`, then one relative sequence
//! path per line.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{DatasetManifest, SkeletonSequence};
use crate::error::{Error, Result};

const SKEL_MAGIC: &[u8; 4] = b"SKL1";
const LABEL_MAGIC: &[u8; 4] = b"SKLL";
const SKEL_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: format!("missing {what}"),
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(r: &mut impl Read, path: &Path, what: &str) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: format!("missing {what}"),
    })?;
    Ok(f32::from_le_bytes(buf))
}

pub fn save_skel1(seq: &SkeletonSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SKEL_MAGIC)?;
    w.write_all(&SKEL_VERSION.to_le_bytes())?;
    w.write_all(&(seq.channels as u32).to_le_bytes())?;
    w.write_all(&(seq.frames as u32).to_le_bytes())?;
    w.write_all(&(seq.joints as u32).to_le_bytes())?;
    w.write_all(&seq.fps.to_le_bytes())?;
    w.write_all(&(seq.root_joint as u32).to_le_bytes())?;
    for &v in seq.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_skel1(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: "missing magic".into(),
    })?;
    if &magic != SKEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: "SKL1",
        });
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != SKEL_VERSION {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: version,
            expected: SKEL_VERSION,
        });
    }
    let c = read_u32(&mut r, path, "C")? as usize;
    let t = read_u32(&mut r, path, "T")? as usize;
    let v = read_u32(&mut r, path, "V")? as usize;
    let fps = read_f32(&mut r, path, "fps")?;
    let root = read_u32(&mut r, path, "root_joint")? as usize;
    let numel = c
        .checked_mul(t)
        .and_then(|x| x.checked_mul(v))
        .ok_or_else(|| Error::Truncated {
            path: path.display().to_string(),
            detail: "header dimensions overflow".into(),
        })?;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: format!("payload shorter than C*T*V = {numel} values"),
    })?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SkeletonSequence::new(id, c, t, v, fps, root, data, None)
}

pub fn save_labels(labels: &[u16], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    for &l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: "missing magic".into(),
    })?;
    if &magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: "SKLL",
        });
    }
    let t = read_u32(&mut r, path, "T")? as usize;
    let mut bytes = vec![0u8; t * 2];
    r.read_exact(&mut bytes).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: format!("payload shorter than {t} labels"),
    })?;
    Ok(bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect())
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "K={}", manifest.k)?;
    for p in &manifest.paths {
        writeln!(w, "{}", p.display())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Truncated {
        path: path.display().to_string(),
        detail: "empty manifest".into(),
    })?;
    let k = header
        .strip_prefix("K=")
        .and_then(|s| s.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::InvalidArg(format!("manifest header must be K=<int>, got '{header}'")))?;
    if k < 1 {
        return Err(Error::InvalidArg("manifest K must be >= 1".into()));
    }
    let paths: Vec<PathBuf> = lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(PathBuf::from)
        .collect();
    if paths.is_empty() {
        return Err(Error::InvalidArg("manifest lists no sequences".into()));
    }
    Ok(DatasetManifest { k, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_seq(seed: u64) -> SkeletonSequence {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let (c, t, v) = (3, 17, 5);
        let data: Vec<f32> = (0..c * t * v).map(|_| rng.gen_range(-10.0..10.0)).collect();
        SkeletonSequence::new("rand", c, t, v, 25.0, 2, data, None).unwrap()
    }

    #[test]
    fn skel1_roundtrip_is_bit_exact() {
        let dir = tempdir();
        let seq = random_seq(3);
        let path = dir.join("rand.skl1");
        save_skel1(&seq, &path).unwrap();
        let loaded = load_skel1(&path).unwrap();
        assert_eq!(loaded.channels, seq.channels);
        assert_eq!(loaded.frames, seq.frames);
        assert_eq!(loaded.joints, seq.joints);
        assert_eq!(loaded.fps.to_bits(), seq.fps.to_bits());
        assert_eq!(loaded.root_joint, seq.root_joint);
        let a: Vec<u32> = seq.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = loaded.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        // Save the loaded copy again: identical bytes.
        let path2 = dir.join("rand2.skl1");
        save_skel1(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_a_magic_error() {
        let dir = tempdir();
        let path = dir.join("bad.skl1");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_skel1(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn oversized_header_is_a_truncation_error() {
        let dir = tempdir();
        let path = dir.join("trunc.skl1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SKL1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes()); // C
        bytes.extend_from_slice(&100u32.to_le_bytes()); // T
        bytes.extend_from_slice(&9u32.to_le_bytes()); // V
        bytes.extend_from_slice(&30.0f32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 64]); // far fewer than 4*100*9 values
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_skel1(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempdir();
        let path = dir.join("ver.skl1");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SKL1");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_skel1(&path), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn label_roundtrip_and_bad_magic() {
        let dir = tempdir();
        let path = dir.join("l.skll");
        let labels = vec![0u16, 1, 1, 3, 2];
        save_labels(&labels, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);

        let bad = dir.join("bad.skll");
        std::fs::write(&bad, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_labels(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempdir();
        let path = dir.join("manifest.txt");
        let m = DatasetManifest {
            k: 4,
            paths: vec![PathBuf::from("a.skl1"), PathBuf::from("b.skl1")],
        };
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.k, 4);
        assert_eq!(loaded.paths, m.paths);
    }

    fn tempdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "skelseg-fmt-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
