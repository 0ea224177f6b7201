//! Video-sentence samples and their padded batch form.

use candle_core::{DType, Device, Tensor};

use crate::intervals::MomentSpan;
use crate::{Error, Result};

/// Dense row-major `f32` matrix of precomputed features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                what: format!("feature matrix {rows}x{cols} element count"),
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Keeps the rows at `indices`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }
}

/// One video-sentence pair. Spans are in normalized time.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub qid: String,
    pub vid: String,
    pub video: FeatureMatrix,
    pub text: FeatureMatrix,
    pub gt_spans: Vec<MomentSpan>,
    pub saliency: Option<Vec<f64>>,
    /// Video duration in seconds.
    pub duration: f64,
}

impl Sample {
    pub fn num_clips(&self) -> usize {
        self.video.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidSample { id: self.qid.clone(), reason };
        if self.video.rows() == 0 {
            return Err(bad("video has no clips".into()));
        }
        if self.text.rows() == 0 {
            return Err(bad("text has no tokens".into()));
        }
        if self.gt_spans.is_empty() {
            return Err(bad("no ground-truth moments".into()));
        }
        for s in &self.gt_spans {
            MomentSpan::new(s.start, s.end).map_err(|e| bad(e.to_string()))?;
        }
        if let Some(sal) = &self.saliency {
            if sal.len() != self.video.rows() {
                return Err(bad(format!(
                    "{} saliency labels for {} clips",
                    sal.len(),
                    self.video.rows()
                )));
            }
        }
        if !(self.duration > 0.0) {
            return Err(bad(format!("non-positive duration {}", self.duration)));
        }
        Ok(())
    }

    /// Normalized position of every clip: `i / (N_v - 1)`, or 0 for a single clip.
    pub fn clip_positions(&self) -> Vec<f64> {
        clip_positions(self.num_clips())
    }
}

pub fn clip_positions(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Samples padded to a common length, as tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, L, D_v)`
    pub video: Tensor,
    /// `(B, L)`, 1 for real clips.
    pub video_mask: Tensor,
    /// `(B, T, D_t)`
    pub text: Tensor,
    /// `(B, T)`, 1 for real tokens.
    pub text_mask: Tensor,
    /// `(B, L)`; padded positions hold 1.
    pub clip_positions: Tensor,
    pub lengths: Vec<usize>,
    pub text_lengths: Vec<usize>,
    pub gt_spans: Vec<Vec<MomentSpan>>,
    pub saliency: Vec<Option<Vec<f64>>>,
    pub qids: Vec<String>,
    pub durations: Vec<f64>,
}

fn pad_stack(
    mats: &[&FeatureMatrix],
    max_rows: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let cols = mats[0].cols();
    let b = mats.len();
    let mut data = vec![0f32; b * max_rows * cols];
    let mut mask = vec![0f32; b * max_rows];
    for (i, m) in mats.iter().enumerate() {
        if m.cols() != cols {
            return Err(Error::DimMismatch {
                what: "feature width within batch".into(),
                expected: cols,
                got: m.cols(),
            });
        }
        let off = i * max_rows * cols;
        data[off..off + m.data().len()].copy_from_slice(m.data());
        mask[i * max_rows..i * max_rows + m.rows()].fill(1.0);
    }
    let data = Tensor::from_vec(data, (b, max_rows, cols), device)?.to_dtype(dtype)?;
    let mask = Tensor::from_vec(mask, (b, max_rows), device)?.to_dtype(dtype)?;
    Ok((data, mask))
}

impl Batch {
    pub fn collate(samples: &[&Sample], dtype: DType, device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("cannot collate an empty batch"));
        }
        let max_clips = samples.iter().map(|s| s.num_clips()).max().unwrap_or(1);
        let max_tokens = samples.iter().map(|s| s.text.rows()).max().unwrap_or(1);
        let videos: Vec<_> = samples.iter().map(|s| &s.video).collect();
        let texts: Vec<_> = samples.iter().map(|s| &s.text).collect();
        let (video, video_mask) = pad_stack(&videos, max_clips, dtype, device)?;
        let (text, text_mask) = pad_stack(&texts, max_tokens, dtype, device)?;
        let mut positions = vec![1f64; samples.len() * max_clips];
        for (i, s) in samples.iter().enumerate() {
            let p = s.clip_positions();
            positions[i * max_clips..i * max_clips + p.len()].copy_from_slice(&p);
        }
        let clip_positions =
            Tensor::from_vec(positions, (samples.len(), max_clips), device)?.to_dtype(dtype)?;
        Ok(Self {
            video,
            video_mask,
            text,
            text_mask,
            clip_positions,
            lengths: samples.iter().map(|s| s.num_clips()).collect(),
            text_lengths: samples.iter().map(|s| s.text.rows()).collect(),
            gt_spans: samples.iter().map(|s| s.gt_spans.clone()).collect(),
            saliency: samples.iter().map(|s| s.saliency.clone()).collect(),
            qids: samples.iter().map(|s| s.qid.clone()).collect(),
            durations: samples.iter().map(|s| s.duration).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_clips(&self) -> usize {
        self.video.dim(1).unwrap_or(0)
    }

    pub fn dtype(&self) -> DType {
        self.video.dtype()
    }

    pub fn device(&self) -> &Device {
        self.video.device()
    }

    /// Text tensors with sample `i` carrying the sentence of sample `(i + 1) % B`.
    pub fn rotated_text(&self) -> Result<(Tensor, Tensor)> {
        let b = self.size();
        let idx: Vec<u32> = (0..b).map(|i| ((i + 1) % b) as u32).collect();
        let idx = Tensor::new(idx, self.device())?;
        Ok((self.text.index_select(&idx, 0)?, self.text_mask.index_select(&idx, 0)?))
    }
}
