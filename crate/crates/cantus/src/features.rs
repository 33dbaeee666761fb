//! Synthetic multi-level feature extraction.
//!
//! Four fixed-weight generators stand in for the pretrained encoders: they
//! project signal windows at their native frame rates (25, 50, 50, 25 Hz)
//! to channel dims (32, 32, 24, 24), everything seeded once and frozen.
//! Levels are linearly resampled to the common 25 Hz rate before fusion.

use crate::rng::{seeded, Rng};
use crate::signal::SAMPLE_RATE;
use crate::tensor::Mat;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub data: Mat,
    pub frame_rate: f32,
}

impl FeatureSeq {
    pub fn frames(&self) -> usize {
        self.data.rows
    }

    pub fn channels(&self) -> usize {
        self.data.cols
    }
}

pub fn randn_mat(rows: usize, cols: usize, scale: f32, rng: &mut Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        let z: f32 = StandardNormal.sample(rng);
        *v = z * scale;
    }
    m
}

/// One frozen feature level: a seeded projection of signal windows.
pub struct LevelGen {
    pub frame_rate: f32,
    proj: Mat,
}

impl LevelGen {
    pub fn new(frame_rate: f32, channels: usize, seed: u64) -> Self {
        let window = (SAMPLE_RATE / frame_rate) as usize;
        let mut rng = seeded(seed);
        let proj = randn_mat(window, channels, 1.0 / (window as f32).sqrt(), &mut rng);
        LevelGen { frame_rate, proj }
    }

    pub fn extract(&self, signal: &[f32]) -> FeatureSeq {
        let window = self.proj.rows;
        let frames = signal.len() / window;
        let mut data = Mat::zeros(frames, self.proj.cols);
        let mut row = vec![0.0f32; self.proj.cols];
        for f in 0..frames {
            crate::tensor::matvec(&signal[f * window..(f + 1) * window], &self.proj, &mut row);
            for (o, &x) in data.row_mut(f).iter_mut().zip(&row) {
                *o = x.tanh();
            }
        }
        FeatureSeq { data, frame_rate: self.frame_rate }
    }
}

/// The default four-level bank (semantic, phonetic, embedding, acoustic
/// stand-ins). Seeds are fixed offsets from the bank seed.
pub struct FeatureBank {
    pub levels: Vec<LevelGen>,
}

impl FeatureBank {
    pub fn new(seed: u64) -> Self {
        let spec = [(25.0, 32), (50.0, 32), (50.0, 24), (25.0, 24)];
        let levels = spec
            .iter()
            .enumerate()
            .map(|(i, &(rate, ch))| LevelGen::new(rate, ch, seed.wrapping_add(i as u64)))
            .collect();
        FeatureBank { levels }
    }

    /// Extract all levels and resample each to 25 Hz.
    pub fn extract_at_25hz(&self, signal: &[f32]) -> Vec<FeatureSeq> {
        self.levels.iter().map(|l| resample_linear(&l.extract(signal), 25.0)).collect()
    }
}

/// Linear temporal resampling to a target frame rate. Output frame count is
/// round(duration * target_rate) with duration = frames / source_rate.
pub fn resample_linear(seq: &FeatureSeq, target_rate: f32) -> FeatureSeq {
    if (seq.frame_rate - target_rate).abs() < 1e-9 {
        return seq.clone();
    }
    let src = seq.frames();
    let duration = src as f32 / seq.frame_rate;
    let dst = (duration * target_rate).round() as usize;
    let mut data = Mat::zeros(dst, seq.channels());
    for i in 0..dst {
        // sample at the center-aligned source position
        let pos = (i as f32 + 0.5) * seq.frame_rate / target_rate - 0.5;
        let pos = pos.clamp(0.0, (src.max(1) - 1) as f32);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src.saturating_sub(1));
        let t = pos - lo as f32;
        for c in 0..seq.channels() {
            let v = seq.data.get(lo, c) * (1.0 - t) + seq.data.get(hi, c) * t;
            data.set(i, c, v);
        }
    }
    FeatureSeq { data, frame_rate: target_rate }
}
