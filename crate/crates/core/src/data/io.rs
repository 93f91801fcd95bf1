use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoders::{FeatureDims, Sample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "moe-health-dataset";
pub const DATASET_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub dims: FeatureDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    /// Free-form provenance, e.g. the generator configuration.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub meta: Value,
}

impl DatasetHeader {
    pub fn new(dims: FeatureDims) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            dims,
            n_samples: None,
            meta: Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

/// Writes the file next to its destination and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Serializes the dataset as newline-delimited JSON with the header first.
pub fn to_ndjson(header: &DatasetHeader, samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut header = header.clone();
    header.n_samples = Some(samples.len());
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[Sample]) -> Result<()> {
    write_atomic(path, &to_ndjson(header, samples)?)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Checks a sample's feature sizes and token ids against `dims`.
pub fn check_dims(s: &Sample, dims: &FeatureDims) -> std::result::Result<(), String> {
    if let Some(v) = &s.ehr_static {
        if v.len() != dims.static_dim {
            return Err(format!("ehr_static has {} values, header says {}", v.len(), dims.static_dim));
        }
    }
    if let Some(series) = &s.ehr_series {
        if series.len() != dims.series_len {
            return Err(format!(
                "ehr_series has {} steps, header says {}",
                series.len(),
                dims.series_len
            ));
        }
        if let Some(row) = series.iter().find(|r| r.len() != dims.series_dim) {
            return Err(format!(
                "ehr_series row has {} features, header says {}",
                row.len(),
                dims.series_dim
            ));
        }
    }
    if let Some(t) = &s.text_tokens {
        if let Some(bad) = t.iter().find(|&&id| id >= dims.vocab_size) {
            return Err(format!("token id {bad} outside vocabulary of {}", dims.vocab_size));
        }
    }
    if let Some(v) = &s.image_features {
        if v.len() != dims.image_dim {
            return Err(format!("image_features has {} values, header says {}", v.len(), dims.image_dim));
        }
    }
    Ok(())
}

const MODALITY_KEYS: [&str; 4] = ["ehr_static", "ehr_series", "text_tokens", "image_features"];

/// Parses one record line. Absent modalities are absent keys; `null` is
/// rejected and an empty token list counts as absent text.
fn parse_record(line: &str) -> std::result::Result<Sample, String> {
    let mut value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object_mut().ok_or("record is not an object")?;
    for key in MODALITY_KEYS {
        if matches!(obj.get(key), Some(Value::Null)) {
            return Err(format!("`{key}` is null; omit the key for an absent modality"));
        }
    }
    if matches!(obj.get("text_tokens"), Some(Value::Array(a)) if a.is_empty()) {
        obj.remove("text_tokens");
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

pub fn read_dataset<R: BufRead>(reader: R, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, format!("header: {e}")))?
        }
        None => return Err(parse_err(1, "empty file, expected header".into())),
    };
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(&line).map_err(|m| parse_err(lineno, m))?;
        sample
            .validate()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        check_dims(&sample, &header.dims).map_err(|m| parse_err(lineno, m))?;
        samples.push(sample);
    }
    if let Some(n) = header.n_samples {
        if n != samples.len() {
            return Err(parse_err(
                1,
                format!("header declares {n} records, found {}", samples.len()),
            ));
        }
    }
    Ok(Dataset { header, samples })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::encoders::ModalityKind;

    fn dims() -> FeatureDims {
        FeatureDims {
            static_dim: 2,
            series_len: 2,
            series_dim: 1,
            vocab_size: 5,
            image_dim: 1,
        }
    }

    fn parse(body: &str) -> Result<Dataset> {
        let header = serde_json::to_string(&DatasetHeader::new(dims())).unwrap();
        let text = format!("{header}\n{body}");
        read_dataset(text.as_bytes(), Path::new("mem.ndjson"))
    }

    #[test]
    fn omitted_keys_mean_absent_modalities() {
        let ds = parse(r#"{"id":"a","label":1,"ehr_static":[1,2],"ehr_series":[[0.5],[0.25]]}"#)
            .unwrap();
        let s = &ds.samples[0];
        assert!(s.has(ModalityKind::Ehr));
        assert!(!s.has(ModalityKind::Text) && !s.has(ModalityKind::Image));
    }

    #[test]
    fn unpaired_ehr_rejected_with_line_number() {
        let body = concat!(
            r#"{"id":"a","label":0,"image_features":[1.0]}"#,
            "\n",
            r#"{"id":"b","label":0,"ehr_static":[1,2]}"#,
            "\n"
        );
        match parse(body) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("together"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nulls_and_bad_dims_rejected() {
        assert!(parse(r#"{"id":"a","label":0,"image_features":null,"text_tokens":[1]}"#).is_err());
        assert!(parse(r#"{"id":"a","label":0,"image_features":[1.0,2.0]}"#).is_err());
        assert!(parse(r#"{"id":"a","label":0,"text_tokens":[9]}"#).is_err());
        assert!(parse(r#"{"id":"a","label":3,"text_tokens":[1]}"#).is_err());
        assert!(parse(r#"{"id":"a","label":0,"text_tokens":[]}"#).is_err());
        assert!(parse("not json").is_err());
    }

    #[test]
    fn empty_tokens_are_absent_text() {
        let ds = parse(r#"{"id":"a","label":0,"text_tokens":[],"image_features":[0.5]}"#).unwrap();
        assert!(!ds.samples[0].has(ModalityKind::Text));
    }

    #[test]
    fn generate_write_load_round_trip() {
        let cfg = GeneratorConfig {
            n_samples: 40,
            seed: 5,
            dims: FeatureDims {
                series_len: 3,
                ..FeatureDims::default()
            },
            ..GeneratorConfig::default()
        };
        let samples = generate(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("moe-health-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.ndjson");
        let header = DatasetHeader::new(cfg.dims);
        write_dataset(&path, &header, &samples).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.header.dims, cfg.dims);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("null"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset(Path::new("/nonexistent/data.ndjson")).unwrap_err();
        assert!(err.is_io());
    }
}
