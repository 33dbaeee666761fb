//! Toy band-limited signal family plus the DFT magnitude spectrogram used
//! by the decoder finetune loss. Signals are sums of a few low-frequency
//! sinusoids at an 800 Hz sample rate, so 64-sample windows line up with the
//! 12.5 Hz token frame rate.

use std::io::{Read, Write};

use crate::error::Result;
use crate::io as bio;
use crate::rng::Rng;
use rand::Rng as _;

pub const SAMPLE_RATE: f32 = 800.0;
/// Samples per 12.5 Hz frame.
pub const FRAME_HOP: usize = 64;

/// Draw one signal from the family: 4 sinusoids, frequencies in [1, 10) Hz,
/// normalized to unit peak bound.
pub fn gen_signal(rng: &mut Rng, n_samples: usize) -> Vec<f32> {
    let parts: Vec<(f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.2..1.0f32),
                rng.random_range(1.0..10.0f32),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let norm: f32 = parts.iter().map(|p| p.0).sum();
    (0..n_samples)
        .map(|i| {
            let t = i as f32 / SAMPLE_RATE;
            parts
                .iter()
                .map(|&(a, f, ph)| a * (std::f32::consts::TAU * f * t + ph).sin())
                .sum::<f32>()
                / norm
        })
        .collect()
}

/// Magnitude spectrum of one window (naive DFT, bins 0..=w/2).
pub fn dft_magnitude(window: &[f32]) -> Vec<f32> {
    let w = window.len();
    let bins = w / 2 + 1;
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let mut re = 0.0f64;
        let mut im = 0.0f64;
        for (n, &x) in window.iter().enumerate() {
            let ang = -std::f64::consts::TAU * b as f64 * n as f64 / w as f64;
            re += f64::from(x) * ang.cos();
            im += f64::from(x) * ang.sin();
        }
        out.push(((re * re + im * im).sqrt()) as f32);
    }
    out
}

/// Mean squared error between the magnitude spectrograms of two signals over
/// non-overlapping windows of the given size.
pub fn spectrogram_mse(a: &[f32], b: &[f32], window: usize) -> f32 {
    let frames = a.len() / window;
    if frames == 0 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for f in 0..frames {
        let ma = dft_magnitude(&a[f * window..(f + 1) * window]);
        let mb = dft_magnitude(&b[f * window..(f + 1) * window]);
        for (x, y) in ma.iter().zip(&mb) {
            let d = f64::from(x - y);
            acc += d * d;
            count += 1;
        }
    }
    (acc / count as f64) as f32
}

pub fn write_signal(w: &mut impl Write, samples: &[f32]) -> Result<()> {
    bio::write_magic(w, b"SIG0", 1)?;
    bio::write_u64(w, samples.len() as u64)?;
    bio::write_f32_slice(w, samples)?;
    Ok(())
}

pub fn read_signal(r: &mut impl Read) -> Result<Vec<f32>> {
    bio::read_magic(r, b"SIG0", 1)?;
    let n = bio::read_u64(r)? as usize;
    bio::read_f32_vec(r, n)
}
