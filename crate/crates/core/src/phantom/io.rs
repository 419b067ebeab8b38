//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/{id}.png      16-bit grayscale, round(intensity * 65535)
//! <dir>/labels/{id}.png      8-bit grayscale, class ids 0..=m
//! <dir>/scribbles/{id}.png   8-bit grayscale, class ids or 255 (unlabeled)
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{PhantomSample, PhantomSpec, UNLABELED};
use crate::grid::{Image, LabelMap};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
    pub scribbles: String,
    pub present_classes: Vec<u8>,
    pub seed: u64,
    /// Hex SHA-256 of the image, label and scribble files, in that order.
    pub sha256: [String; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: String,
    pub generator: PhantomSpec,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(PathBuf),
    #[error("shape mismatch in {path}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unknown format version {0} (supported: {FORMAT_VERSION})")]
    UnknownFormatVersion(u32),
    #[error("invalid label value {value} in {path}")]
    InvalidLabelValue { path: PathBuf, value: u8 },
    #[error("unsupported png layout in {path}: {detail}")]
    PngLayout { path: PathBuf, detail: String },
    #[error("manifest is inconsistent: {0}")]
    Manifest(String),
    #[error("png decode error in {path}: {source}")]
    PngDecode {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },
    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::MissingFile(_) => "missing_file",
            DatasetError::ChecksumMismatch(_) => "checksum_mismatch",
            DatasetError::ShapeMismatch { .. } => "shape_mismatch",
            DatasetError::UnknownFormatVersion(_) => "unknown_format_version",
            DatasetError::InvalidLabelValue { .. } => "invalid_label_value",
            DatasetError::PngLayout { .. } => "png_layout",
            DatasetError::Manifest(_) => "manifest",
            DatasetError::PngDecode { .. } => "png_decode",
            DatasetError::PngEncode(_) => "png_encode",
            DatasetError::Json(_) => "json",
            DatasetError::Io(_) => "io",
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_png(width: usize, height: usize, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(depth);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

fn image_png(image: &Image) -> Result<Vec<u8>, DatasetError> {
    let mut bytes = Vec::with_capacity(image.len() * 2);
    for &x in image.data() {
        let v = (x.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    encode_png(image.width(), image.height(), png::BitDepth::Sixteen, &bytes)
}

fn label_png(labels: &LabelMap) -> Result<Vec<u8>, DatasetError> {
    encode_png(labels.width(), labels.height(), png::BitDepth::Eight, labels.data())
}

struct Decoded {
    height: usize,
    width: usize,
    depth: png::BitDepth,
    bytes: Vec<u8>,
}

fn decode_png(path: &Path, raw: &[u8]) -> Result<Decoded, DatasetError> {
    let wrap = |source| DatasetError::PngDecode {
        path: path.to_path_buf(),
        source,
    };
    let mut dec = png::Decoder::new(BufReader::new(Cursor::new(raw)));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(wrap)?;
    let size = reader.output_buffer_size().ok_or_else(|| DatasetError::PngLayout {
        path: path.to_path_buf(),
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(wrap)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(DatasetError::PngLayout {
            path: path.to_path_buf(),
            detail: format!("expected grayscale, found {:?}", info.color_type),
        });
    }
    buf.truncate(info.line_size * info.height as usize);
    Ok(Decoded {
        height: info.height as usize,
        width: info.width as usize,
        depth: info.bit_depth,
        bytes: buf,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn expect_shape(path: &Path, d: &Decoded, expected: (usize, usize), depth: png::BitDepth) -> Result<(), DatasetError> {
    if (d.height, d.width) != expected {
        return Err(DatasetError::ShapeMismatch {
            path: path.to_path_buf(),
            expected,
            found: (d.height, d.width),
        });
    }
    if d.depth != depth {
        return Err(DatasetError::PngLayout {
            path: path.to_path_buf(),
            detail: format!("expected bit depth {depth:?}, found {:?}", d.depth),
        });
    }
    Ok(())
}

/// Writes `samples` under `dir`, filling in the manifest's sample entries.
///
/// `manifest.samples` must either be empty (ids and seeds are then the
/// sample index) or carry one entry per sample whose id and seed are kept.
pub fn write_dataset(
    samples: &[PhantomSample],
    manifest: &DatasetManifest,
    dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::Manifest("a dataset needs at least one sample".into()));
    }
    if !manifest.samples.is_empty() && manifest.samples.len() != samples.len() {
        return Err(DatasetError::Manifest(format!(
            "{} manifest entries for {} samples",
            manifest.samples.len(),
            samples.len()
        )));
    }
    for sub in ["images", "labels", "scribbles"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut out = DatasetManifest {
        format_version: FORMAT_VERSION,
        samples: Vec::with_capacity(samples.len()),
        ..manifest.clone()
    };
    for (i, sample) in samples.iter().enumerate() {
        let (id, seed) = match manifest.samples.get(i) {
            Some(e) => (e.id.clone(), e.seed),
            None => (format!("{i:04}"), i as u64),
        };
        let files = [
            (format!("images/{id}.png"), image_png(&sample.image)?),
            (format!("labels/{id}.png"), label_png(&sample.labels)?),
            (format!("scribbles/{id}.png"), label_png(&sample.scribbles)?),
        ];
        for (rel, bytes) in &files {
            fs::write(dir.join(rel), bytes)?;
        }
        let [(image, a), (labels, b), (scribbles, c)] = files;
        out.samples.push(ManifestEntry {
            id,
            image,
            labels,
            scribbles,
            present_classes: sample.present_classes.clone(),
            seed,
            sha256: [sha256_hex(&a), sha256_hex(&b), sha256_hex(&c)],
        });
    }
    let file = File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &out)?;
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let raw = read_file(&dir.join(MANIFEST_FILE))?;
    // Check the version before the full schema so old/new layouts get a
    // precise error instead of a field-level parse failure.
    let value: serde_json::Value = serde_json::from_slice(&raw)?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| DatasetError::Manifest("format_version missing".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(DatasetError::UnknownFormatVersion(version as u32));
    }
    let manifest: DatasetManifest = serde_json::from_value(value)?;
    if manifest.samples.is_empty() {
        return Err(DatasetError::Manifest("no samples listed".into()));
    }
    Ok(manifest)
}

/// Reads and validates a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<PhantomSample>, DatasetManifest), DatasetError> {
    let manifest = read_manifest(dir)?;
    let shape = (manifest.generator.height, manifest.generator.width);
    let m = manifest.generator.num_classes as u8;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let paths = [
            dir.join(&entry.image),
            dir.join(&entry.labels),
            dir.join(&entry.scribbles),
        ];
        let raws = [read_file(&paths[0])?, read_file(&paths[1])?, read_file(&paths[2])?];

        let img = decode_png(&paths[0], &raws[0])?;
        expect_shape(&paths[0], &img, shape, png::BitDepth::Sixteen)?;
        let image = Image::from_vec(
            shape.0,
            shape.1,
            img.bytes
                .chunks_exact(2)
                .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 65535.0)
                .collect(),
        )
        .expect("shape checked");

        let mut maps = Vec::with_capacity(2);
        for (k, allow_unlabeled) in [(1usize, false), (2, true)] {
            let d = decode_png(&paths[k], &raws[k])?;
            expect_shape(&paths[k], &d, shape, png::BitDepth::Eight)?;
            if let Some(&value) = d.bytes.iter().find(|&&v| v > m && !(allow_unlabeled && v == UNLABELED)) {
                return Err(DatasetError::InvalidLabelValue {
                    path: paths[k].clone(),
                    value,
                });
            }
            maps.push(LabelMap::from_vec(shape.0, shape.1, d.bytes).expect("shape checked"));
        }

        for (k, path) in paths.iter().enumerate() {
            if sha256_hex(&raws[k]) != entry.sha256[k] {
                return Err(DatasetError::ChecksumMismatch(path.clone()));
            }
        }
        let scribbles = maps.pop().expect("two maps");
        let labels = maps.pop().expect("two maps");
        if super::present_classes(&labels) != entry.present_classes {
            return Err(DatasetError::Manifest(format!(
                "present classes of {} disagree with its label map",
                entry.id
            )));
        }
        samples.push(PhantomSample {
            image,
            labels,
            scribbles,
            present_classes: entry.present_classes.clone(),
        });
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomMode};

    fn small_set(mode: PhantomMode) -> (Vec<PhantomSample>, DatasetManifest) {
        let spec = PhantomSpec {
            height: 24,
            width: 20,
            num_classes: 4,
            mode,
            ..PhantomSpec::default()
        };
        let samples: Vec<_> = (0..3).map(|s| generate(&spec, s).unwrap()).collect();
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            split: "train".into(),
            generator: spec,
            samples: Vec::new(),
        };
        (samples, manifest)
    }

    #[test]
    fn round_trip_is_exact() {
        for mode in [PhantomMode::Structure, PhantomMode::Pathology] {
            let dir = tempfile::tempdir().unwrap();
            let (samples, manifest) = small_set(mode);
            let written = write_dataset(&samples, &manifest, dir.path()).unwrap();
            let (back, read_manifest) = read_dataset(dir.path()).unwrap();
            assert_eq!(back, samples);
            assert_eq!(read_manifest, written);
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, manifest) = small_set(PhantomMode::Structure);
        write_dataset(&samples, &manifest, dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels/0001.png")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert_eq!(err.code(), "missing_file");
        assert!(err.to_string().contains("labels/0001.png"));
    }

    #[test]
    fn invalid_label_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, manifest) = small_set(PhantomMode::Structure);
        write_dataset(&samples, &manifest, dir.path()).unwrap();
        let mut bad = samples[0].labels.clone();
        bad.set(0, 0, 200);
        fs::write(dir.path().join("labels/0000.png"), label_png(&bad).unwrap()).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(
            matches!(err, DatasetError::InvalidLabelValue { value: 200, .. }),
            "{err}"
        );
    }

    #[test]
    fn tampered_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, manifest) = small_set(PhantomMode::Structure);
        write_dataset(&samples, &manifest, dir.path()).unwrap();
        let mut img = samples[2].image.clone();
        img.set(3, 3, 1.0 - img.get(3, 3));
        fs::write(dir.path().join("images/0002.png"), image_png(&img).unwrap()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap_err().code(), "checksum_mismatch");
    }

    #[test]
    fn wrong_shape_and_version_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, manifest) = small_set(PhantomMode::Structure);
        write_dataset(&samples, &manifest, dir.path()).unwrap();
        let small = LabelMap::new(4, 4, 0);
        fs::write(dir.path().join("scribbles/0000.png"), label_png(&small).unwrap()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap_err().code(), "shape_mismatch");

        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            text.replace("\"format_version\": 1", "\"format_version\": 7"),
        )
        .unwrap();
        assert!(matches!(
            read_dataset(dir.path()).unwrap_err(),
            DatasetError::UnknownFormatVersion(7)
        ));
    }
}
