//! Single-file checkpoint format: a text manifest (version, metadata, one
//! line per parameter with shape and byte offset) followed by the raw
//! little-endian f64 body. Save/load round-trips are bitwise identities;
//! version mismatches are rejected, never coerced.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::merge::Checkpoint;
use crate::model::ParamMap;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "souplab-checkpoint";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("malformed manifest line {0}: {1:?}")]
    BadManifest(usize, String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("offsets overlap or are out of order at parameter {0:?}")]
    OffsetOverlap(String),
    #[error("body holds {got} bytes, manifest declares {expected}")]
    BodySize { got: usize, expected: usize },
    #[error("parameter {name:?}: shape {shape:?} does not match {count} elements")]
    ShapeCount { name: String, shape: Vec<usize>, count: usize },
}

pub type Result<T> = std::result::Result<T, CkptError>;

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut manifest = String::new();
    manifest.push_str(&format!("{MAGIC} v{FORMAT_VERSION}\n"));
    manifest.push_str(&format!("provenance {}\n", ckpt.provenance.replace('\n', " ")));
    manifest.push_str(&format!("step {}\n", ckpt.step));
    let mut offset = 0usize;
    for (name, t) in &ckpt.params {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("param {name} {} {offset}\n", shape.join("x")));
        offset += t.data().len() * 8;
    }
    manifest.push_str("body\n");
    let mut out = manifest.into_bytes();
    for t in ckpt.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses bytes produced by [`to_bytes`] (or a manifest permutation of it).
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let body_marker = b"body\n";
    let header_end = bytes
        .windows(body_marker.len())
        .position(|w| w == body_marker)
        .ok_or(CkptError::BadMagic)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| CkptError::BadMagic)?;
    let body = &bytes[header_end + body_marker.len()..];

    let mut lines = header.lines().enumerate();
    let (_, first) = lines.next().ok_or(CkptError::BadMagic)?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or(CkptError::BadMagic)?;
    if version != FORMAT_VERSION {
        return Err(CkptError::BadVersion(version));
    }

    let mut provenance = String::new();
    let mut step = 0u64;
    // (name, shape, byte offset)
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for (lineno, line) in lines {
        if let Some(p) = line.strip_prefix("provenance ") {
            provenance = p.to_string();
        } else if let Some(s) = line.strip_prefix("step ") {
            step = s
                .parse()
                .map_err(|_| CkptError::BadManifest(lineno, line.into()))?;
        } else if let Some(rest) = line.strip_prefix("param ") {
            let mut parts = rest.split(' ');
            let (name, shape_s, offset_s) = (parts.next(), parts.next(), parts.next());
            let (Some(name), Some(shape_s), Some(offset_s), None) =
                (name, shape_s, offset_s, parts.next())
            else {
                return Err(CkptError::BadManifest(lineno, line.into()));
            };
            let shape: Vec<usize> = shape_s
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CkptError::BadManifest(lineno, line.into()))?;
            let offset: usize = offset_s
                .parse()
                .map_err(|_| CkptError::BadManifest(lineno, line.into()))?;
            if entries.iter().any(|(n, _, _)| n == name) {
                return Err(CkptError::DuplicateParam(name.into()));
            }
            entries.push((name.to_string(), shape, offset));
        } else if !line.trim().is_empty() {
            return Err(CkptError::BadManifest(lineno, line.into()));
        }
    }

    // offsets must tile the body without gaps or overlap, in declared order
    let mut expected_offset = 0usize;
    for (name, shape, offset) in &entries {
        if *offset != expected_offset {
            return Err(CkptError::OffsetOverlap(name.clone()));
        }
        expected_offset += shape.iter().product::<usize>() * 8;
    }
    if body.len() != expected_offset {
        return Err(CkptError::BodySize { got: body.len(), expected: expected_offset });
    }

    let mut params = ParamMap::new();
    for (name, shape, offset) in entries {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&body[at..at + 8]);
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(shape.clone(), data)
            .map_err(|_| CkptError::ShapeCount { name: name.clone(), shape, count })?;
        params.insert(name, t);
    }
    Ok(Checkpoint { params, provenance, step })
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params: ParamMap = BTreeMap::new();
        params.insert(
            "embed".into(),
            Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        params.insert(
            "final_ln".into(),
            Tensor::new(vec![3], vec![1.0, -0.5, 0.25]).unwrap(),
        );
        Checkpoint::new(params, "unit-test", 42)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ckpt = sample_checkpoint();
        let loaded = from_bytes(&to_bytes(&ckpt)).unwrap();
        assert_eq!(loaded.provenance, ckpt.provenance);
        assert_eq!(loaded.step, 42);
        for (n, t) in &ckpt.params {
            let l = &loaded.params[n];
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n}");
            }
        }
        // save o load o save is also byte-stable
        assert_eq!(to_bytes(&loaded), to_bytes(&ckpt));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(to_bytes(&loaded), to_bytes(&ckpt));
        // no temp file left behind
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn truncated_body_rejected() {
        let mut bytes = to_bytes(&sample_checkpoint());
        bytes.pop();
        assert!(matches!(from_bytes(&bytes), Err(CkptError::BodySize { .. })));
    }

    #[test]
    fn version_mismatch_rejected() {
        let bytes = to_bytes(&sample_checkpoint());
        let text = String::from_utf8_lossy(&bytes[..40]).into_owned();
        assert!(text.contains("v1"));
        let mut tampered = bytes.clone();
        let pos = bytes
            .windows(3)
            .position(|w| w == b" v1")
            .unwrap();
        tampered[pos + 2] = b'9';
        assert!(matches!(from_bytes(&tampered), Err(CkptError::BadVersion(9))));
    }

    #[test]
    fn offset_tampering_rejected() {
        let ckpt = sample_checkpoint();
        let bytes = to_bytes(&ckpt);
        let text_end = bytes.windows(5).position(|w| w == b"body\n").unwrap();
        let header = String::from_utf8(bytes[..text_end].to_vec()).unwrap();
        // shift the second param's offset backwards so it overlaps the first
        let tampered_header = header.replace("param final_ln 3 96", "param final_ln 3 88");
        assert_ne!(tampered_header, header);
        let mut tampered = tampered_header.into_bytes();
        tampered.extend_from_slice(&bytes[text_end..]);
        assert!(matches!(
            from_bytes(&tampered),
            Err(CkptError::OffsetOverlap(_)) | Err(CkptError::BodySize { .. })
        ));
    }

    #[test]
    fn manifest_permutation_same_params() {
        // write the same params in a different manifest order by hand
        let ckpt = sample_checkpoint();
        let embed = &ckpt.params["embed"];
        let ln = &ckpt.params["final_ln"];
        let mut bytes = format!(
            "{MAGIC} v1\nprovenance unit-test\nstep 42\nparam final_ln 3 0\nparam embed 4x3 24\nbody\n"
        )
        .into_bytes();
        for v in ln.data().iter().chain(embed.data()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), to_bytes(&ckpt));
    }

    #[test]
    fn garbage_rejected() {
        assert!(from_bytes(b"not a checkpoint").is_err());
        assert!(matches!(
            from_bytes(b"something v1\nbody\n"),
            Err(CkptError::BadMagic)
        ));
        let dup = format!(
            "{MAGIC} v1\nparam a 1 0\nparam a 1 8\nbody\n{}{}",
            "\0\0\0\0\0\0\0\0", "\0\0\0\0\0\0\0\0"
        );
        assert!(matches!(
            from_bytes(dup.as_bytes()),
            Err(CkptError::DuplicateParam(_))
        ));
    }
}
