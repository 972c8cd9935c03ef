//! Raw volume files: a little-endian C-order payload in `<name>.raw` with a
//! JSON header in `<name>.json` carrying `shape`, `spacing`, `dtype` and,
//! for label fields, `num_classes`.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, LabelVolume, Shape3, Spacing3, Volume};

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn raw_path(base: &Path) -> PathBuf {
    with_suffix(base, "raw")
}

pub fn header_path(base: &Path) -> PathBuf {
    with_suffix(base, "json")
}

// `Path::with_extension` would clobber dotted case names.
fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

struct Header {
    shape: Shape3,
    spacing: Spacing3,
    dtype: Dtype,
    num_classes: Option<u8>,
}

fn write_header(base: &Path, h: &Header) -> Result<()> {
    let mut doc = Map::new();
    doc.insert("shape".into(), json!(h.shape));
    doc.insert("spacing".into(), json!(h.spacing));
    doc.insert("dtype".into(), json!(h.dtype.name()));
    if let Some(c) = h.num_classes {
        doc.insert("num_classes".into(), json!(c));
    }
    let text = serde_json::to_string_pretty(&Value::Object(doc)).expect("header serializes");
    atomic_write(&header_path(base), text.as_bytes())
}

fn read_header(base: &Path) -> Result<Header> {
    let path = header_path(base);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| Error::format("header", e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::format("header", "expected a JSON object"))?;

    let triple = |key: &str| -> Result<Vec<&Value>> {
        let arr = obj
            .get(key)
            .ok_or_else(|| Error::format(key, "missing"))?
            .as_array()
            .ok_or_else(|| Error::format(key, "expected an array"))?;
        if arr.len() != 3 {
            return Err(Error::format(key, format!("expected 3 entries, found {}", arr.len())));
        }
        Ok(arr.iter().collect())
    };

    let mut shape = [0usize; 3];
    for (a, v) in triple("shape")?.into_iter().enumerate() {
        shape[a] = v
            .as_u64()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::format("shape", format!("entry {a} is not a positive integer")))?
            as usize;
    }
    let mut spacing = [0f64; 3];
    for (a, v) in triple("spacing")?.into_iter().enumerate() {
        spacing[a] = v
            .as_f64()
            .filter(|&s| s > 0.0)
            .ok_or_else(|| Error::format("spacing", format!("entry {a} is not a positive number")))?;
    }
    let dtype = match obj.get("dtype").and_then(Value::as_str) {
        Some("f32") => Dtype::F32,
        Some("u8") => Dtype::U8,
        Some(other) => return Err(Error::format("dtype", format!("unsupported dtype {other:?}"))),
        None => return Err(Error::format("dtype", "missing or not a string")),
    };
    let num_classes = match obj.get("num_classes") {
        None => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|&c| (2..=255).contains(&c))
                .ok_or_else(|| Error::format("num_classes", "expected an integer in [2, 255]"))?
                as u8,
        ),
    };
    Ok(Header {
        shape,
        spacing,
        dtype,
        num_classes,
    })
}

fn read_payload(base: &Path, h: &Header) -> Result<Vec<u8>> {
    let path = raw_path(base);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = voxel_count(h.shape) * h.dtype.width();
    if bytes.len() != expected {
        return Err(Error::Corruption {
            path,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Writes `<base>.raw` and `<base>.json`.
pub fn save_volume(vol: &Volume, base: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(vol.voxels().len() * 4);
    for v in vol.voxels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(&raw_path(base), &bytes)?;
    write_header(
        base,
        &Header {
            shape: vol.shape(),
            spacing: vol.spacing(),
            dtype: Dtype::F32,
            num_classes: None,
        },
    )
}

pub fn load_volume(base: &Path) -> Result<Volume> {
    let h = read_header(base)?;
    if h.dtype != Dtype::F32 {
        return Err(Error::format("dtype", format!("expected f32 image, found {}", h.dtype.name())));
    }
    let bytes = read_payload(base, &h)?;
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(h.shape, h.spacing, voxels)
}

pub fn save_labels(labels: &LabelVolume, base: &Path) -> Result<()> {
    atomic_write(&raw_path(base), labels.labels())?;
    write_header(
        base,
        &Header {
            shape: labels.shape(),
            spacing: labels.spacing(),
            dtype: Dtype::U8,
            num_classes: Some(labels.num_classes()),
        },
    )
}

pub fn load_labels(base: &Path) -> Result<LabelVolume> {
    let h = read_header(base)?;
    if h.dtype != Dtype::U8 {
        return Err(Error::format("dtype", format!("expected u8 labels, found {}", h.dtype.name())));
    }
    let num_classes = h
        .num_classes
        .ok_or_else(|| Error::format("num_classes", "required for label volumes"))?;
    let bytes = read_payload(base, &h)?;
    LabelVolume::new(h.shape, h.spacing, num_classes, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_payload_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("vol");
        let v = Volume::filled([2, 2, 2], [1.0; 3], 1.0).unwrap();
        save_volume(&v, &base).unwrap();
        fs::write(raw_path(&base), vec![0u8; 7 * 4]).unwrap();
        match load_volume(&base) {
            Err(Error::Corruption { expected, actual, .. }) => {
                assert_eq!((expected, actual), (32, 28));
            }
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("vol");
        fs::write(raw_path(&base), vec![0u8; 32]).unwrap();
        for (doc, field) in [
            (r#"{"shape":[2,2],"spacing":[1,1,1],"dtype":"f32"}"#, "shape"),
            (r#"{"shape":[2,2,2],"spacing":[1,-1,1],"dtype":"f32"}"#, "spacing"),
            (r#"{"shape":[2,2,2],"spacing":[1,1,1],"dtype":"f64"}"#, "dtype"),
            (r#"{"shape":[2,2,2],"spacing":[1,1,1]}"#, "dtype"),
            (r#"[1,2]"#, "header"),
        ] {
            fs::write(header_path(&base), doc).unwrap();
            match load_volume(&base) {
                Err(Error::Format { field: f, .. }) => assert_eq!(f, field, "{doc}"),
                other => panic!("{doc}: {other:?}"),
            }
        }
    }

    #[test]
    fn labels_round_trip_and_dtype_checks() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("case.001");
        let l = LabelVolume::new([1, 2, 3], [0.5, 1.0, 2.0], 4, vec![0, 1, 2, 3, 2, 1]).unwrap();
        save_labels(&l, &base).unwrap();
        assert!(raw_path(&base).ends_with("case.001.raw"));
        assert_eq!(load_labels(&base).unwrap(), l);
        assert!(matches!(load_volume(&base), Err(Error::Format { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn volume_round_trip_is_bit_exact(
            shape in (1usize..6, 1usize..6, 1usize..6),
            spacing in (0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0),
            seed in any::<u64>(),
        ) {
            let shape = [shape.0, shape.1, shape.2];
            let n = voxel_count(shape);
            let mut state = seed;
            let voxels: Vec<f32> = (0..n).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32 & 0xBFFF_FFFF)
            }).collect();
            let v = Volume::new(shape, [spacing.0, spacing.1, spacing.2], voxels).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let base = dir.path().join("v");
            save_volume(&v, &base).unwrap();
            let back = load_volume(&base).unwrap();
            prop_assert_eq!(back.shape(), v.shape());
            prop_assert_eq!(back.spacing(), v.spacing());
            let a: Vec<u32> = back.voxels().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = v.voxels().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
