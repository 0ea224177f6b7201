//! On-disk formats: feature matrices, annotations and prediction files.
//!
//! A dataset directory holds `annotations.jsonl` plus
//! `features/video/{vid}.bamf` and `features/text/{qid}.bamf`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::intervals::MomentSpan;
use crate::metrics::EvalRecord;
use crate::model::Prediction;
use crate::sample::{FeatureMatrix, Sample};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BAMF";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_DIR: &str = "features";

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bad = |reason: String| Error::FeatureFormat { path: path.to_path_buf(), reason };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing BAMF header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (u32_at(4), u32_at(8));
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(bad(format!("{rows}x{cols} header but {} payload bytes", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    FeatureMatrix::new(rows, cols, data)
}

/// One line of the annotation file. Times are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub qid: String,
    pub vid: String,
    pub duration: f64,
    pub relevant_windows: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_scores: Option<Vec<f64>>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(a);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Evenly spaced indices keeping both ends, `k < n`.
pub fn uniform_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k).map(|i| ((i as f64) * (n - 1) as f64 / (k - 1) as f64).round() as usize).collect()
}

/// A validated collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("dataset has no samples"));
        }
        let (vd, td) = (samples[0].video.cols(), samples[0].text.cols());
        for s in &samples {
            s.validate()?;
            if s.video.cols() != vd {
                return Err(Error::DimMismatch { what: format!("video width of {}", s.qid), expected: vd, got: s.video.cols() });
            }
            if s.text.cols() != td {
                return Err(Error::DimMismatch { what: format!("text width of {}", s.qid), expected: td, got: s.text.cols() });
            }
        }
        Ok(Self { name: name.into(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn video_dim(&self) -> usize {
        self.samples[0].video.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.samples[0].text.cols()
    }
}

fn sample_from_annotation(a: Annotation, features: &Path, max_clips: usize) -> Result<Sample> {
    let load = |kind: &str, stem: &str| -> Result<FeatureMatrix> {
        let path = features.join(kind).join(format!("{stem}.bamf"));
        if !path.exists() {
            return Err(Error::MissingFeatures { id: a.qid.clone(), path });
        }
        read_features(&path)
    };
    let mut video = load("video", &a.vid)?;
    let text = load("text", &a.qid)?;
    let mut saliency = a.saliency_scores.clone();
    if max_clips > 0 && video.rows() > max_clips {
        let idx = uniform_indices(video.rows(), max_clips);
        video = video.select_rows(&idx);
        saliency = saliency.map(|s| idx.iter().filter_map(|&i| s.get(i).copied()).collect());
    }
    if !(a.duration > 0.0) {
        return Err(Error::InvalidSample { id: a.qid.clone(), reason: format!("duration {}", a.duration) });
    }
    let mut gt_spans = Vec::with_capacity(a.relevant_windows.len());
    for &[s, e] in &a.relevant_windows {
        if e > a.duration || s < 0.0 {
            log::warn!("{}: window [{s}, {e}] clamped to [0, {}]", a.qid, a.duration);
        }
        let (s, e) = ((s / a.duration).clamp(0.0, 1.0), (e / a.duration).clamp(0.0, 1.0));
        let span = MomentSpan::new(s, e).map_err(|err| Error::InvalidSample { id: a.qid.clone(), reason: err.to_string() })?;
        gt_spans.push(span);
    }
    let sample = Sample { qid: a.qid, vid: a.vid, video, text, gt_spans, saliency, duration: a.duration };
    sample.validate()?;
    Ok(sample)
}

/// Loads and validates every annotated sample. Windows are normalized by the
/// video duration (ends past the duration are clamped with a warning);
/// `max_clips > 0` uniformly subsamples longer videos.
pub fn load_dataset(annotations: &Path, features: &Path, max_clips: usize) -> Result<Dataset> {
    let anns = read_annotations(annotations)?;
    let samples = anns
        .into_iter()
        .map(|a| sample_from_annotation(a, features, max_clips))
        .collect::<Result<Vec<_>>>()?;
    let name = annotations.parent().and_then(|p| p.file_name()).map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, samples)
}

/// [`load_dataset`] on the standard directory layout.
pub fn load_dataset_dir(dir: &Path, max_clips: usize) -> Result<Dataset> {
    load_dataset(&dir.join(ANNOTATIONS_FILE), &dir.join(FEATURES_DIR), max_clips)
}

/// Writes a dataset in the standard directory layout.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let feats = dir.join(FEATURES_DIR);
    let mut anns = Vec::with_capacity(data.len());
    for s in &data.samples {
        write_features(&feats.join("video").join(format!("{}.bamf", s.vid)), &s.video)?;
        write_features(&feats.join("text").join(format!("{}.bamf", s.qid)), &s.text)?;
        anns.push(Annotation {
            qid: s.qid.clone(),
            vid: s.vid.clone(),
            duration: s.duration,
            relevant_windows: s.gt_spans.iter().map(|g| [g.start * s.duration, g.end * s.duration]).collect(),
            saliency_scores: s.saliency.clone(),
        });
    }
    write_jsonl(&dir.join(ANNOTATIONS_FILE), &anns)
}

/// One line of a prediction file. Times are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: String,
    pub duration: f64,
    /// `[start, end, score]`, best first.
    pub pred_relevant_windows: Vec<[f64; 3]>,
    /// Ground truth, so that the file can be analyzed on its own.
    #[serde(default)]
    pub relevant_windows: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn from_prediction(p: &Prediction, gts: &[MomentSpan]) -> Self {
        let d = p.duration;
        Self {
            qid: p.qid.clone(),
            duration: d,
            pred_relevant_windows: p.ranked.iter().map(|(s, q)| [s.start * d, s.end * d, *q]).collect(),
            relevant_windows: gts.iter().map(|g| [g.start * d, g.end * d]).collect(),
            anchors: Some(p.anchors.iter().map(|a| a * d).collect()),
            offsets: Some(p.offsets.iter().map(|o| o * d).collect()),
        }
    }

    /// Back to normalized time. Windows are clamped into the video.
    pub fn to_eval_record(&self) -> Result<EvalRecord> {
        let d = self.duration;
        if !(d > 0.0) {
            return Err(Error::InvalidSample { id: self.qid.clone(), reason: format!("duration {d}") });
        }
        let norm = |x: f64| (x / d).clamp(0.0, 1.0);
        let span = |s: f64, e: f64| MomentSpan::clamped(norm(s), norm(e), norm(s));
        Ok(EvalRecord {
            qid: self.qid.clone(),
            ranked_preds: self.pred_relevant_windows.iter().map(|w| (span(w[0], w[1]), w[2])).collect(),
            gt_spans: self.relevant_windows.iter().map(|w| span(w[0], w[1])).collect(),
            anchors: self.anchors.as_ref().map(|a| a.iter().map(|x| x / d).collect()),
            offsets: self.offsets.as_ref().map(|o| o.iter().map(|x| x / d).collect()),
            duration: d,
        })
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `stem_suffix.ext` next to `path`.
pub fn sibling_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, windows: &str) {
        let feats = dir.join(FEATURES_DIR);
        for (q, v) in [("q1", "v1"), ("q2", "v2")] {
            write_features(&feats.join("video").join(format!("{v}.bamf")), &FeatureMatrix::new(4, 3, vec![0.5; 12]).unwrap()).unwrap();
            write_features(&feats.join("text").join(format!("{q}.bamf")), &FeatureMatrix::new(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        }
        let text = format!(
            "{{\"qid\":\"q1\",\"vid\":\"v1\",\"duration\":40,\"relevant_windows\":[{windows}]}}\n\
             {{\"qid\":\"q2\",\"vid\":\"v2\",\"duration\":8,\"relevant_windows\":[[0,4]],\"saliency_scores\":[1,0,0,0]}}\n"
        );
        fs::write(dir.join(ANNOTATIONS_FILE), text).unwrap();
    }

    #[test]
    fn feature_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bamf");
        let m = FeatureMatrix::new(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-3, 7.0]).unwrap();
        write_features(&p, &m).unwrap();
        assert_eq!(read_features(&p).unwrap(), m);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::FeatureFormat { .. })));
        fs::write(&p, b"NOPE").unwrap();
        assert!(read_features(&p).is_err());
    }

    #[test]
    fn loads_fixture_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "[10,26]");
        let d = load_dataset_dir(dir.path(), 0).unwrap();
        assert_eq!(d.len(), 2);
        let g = d.samples[0].gt_spans[0];
        assert!((g.start - 0.25).abs() < 1e-12 && (g.end - 0.65).abs() < 1e-12);
        assert!(d.samples[1].saliency.is_some());
    }

    #[test]
    fn clamps_long_windows() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "[30,50]");
        let d = load_dataset_dir(dir.path(), 0).unwrap();
        assert_eq!(d.samples[0].gt_spans[0].end, 1.0);
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "[10,26]");
        let mut text = fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        text.push_str("{not json\n");
        fs::write(dir.path().join(ANNOTATIONS_FILE), text).unwrap();
        match load_dataset_dir(dir.path(), 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_features_name_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "[10,26]");
        fs::remove_file(dir.path().join("features/text/q2.bamf")).unwrap();
        match load_dataset_dir(dir.path(), 0) {
            Err(Error::MissingFeatures { id, .. }) => assert_eq!(id, "q2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subsampling_keeps_labels_aligned() {
        assert_eq!(uniform_indices(5, 3), vec![0, 2, 4]);
        assert_eq!(uniform_indices(3, 5), vec![0, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "[10,26]");
        let d = load_dataset_dir(dir.path(), 2).unwrap();
        assert_eq!(d.samples[1].num_clips(), 2);
        assert_eq!(d.samples[1].saliency.as_ref().unwrap(), &vec![1.0, 0.0]);
    }

    #[test]
    fn prediction_record_roundtrip() {
        let r = PredictionRecord {
            qid: "q".into(),
            duration: 10.0,
            pred_relevant_windows: vec![[1.0, 4.0, 0.9], [2.0, 3.0, 0.1]],
            relevant_windows: vec![[1.0, 4.0]],
            anchors: None,
            offsets: Some(vec![0.5, -0.5]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        write_predictions(&p, &[r.clone()]).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), vec![r.clone()]);
        let e = r.to_eval_record().unwrap();
        assert!((e.ranked_preds[0].0.end - 0.4).abs() < 1e-12);
        assert_eq!(e.top1_iou(), 1.0);
    }
}
