//! Toy continuous latent codec: a linear auto-encoding pair over signal
//! windows, trained once on the band-limited family and then frozen. Stands
//! in for the pretrained continuous tokenizer that supplies flow-matching
//! targets.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io as bio;
use crate::nn::{randn_td, AdamCfg, ParamGroup};
use crate::rng::seeded;
use crate::signal::{gen_signal, FRAME_HOP};
use crate::tape::{Tape, Td};
use crate::tensor::Mat;

pub const LATENT_DIM: usize = 16;

pub struct LatentCodec {
    /// window x D
    pub enc: Td,
    /// D x window
    pub dec: Td,
    pub window: usize,
}

impl LatentCodec {
    /// Fit the linear pair by reconstruction MSE on the signal family.
    pub fn train(seed: u64, steps: usize) -> Self {
        let window = FRAME_HOP;
        let mut rng = seeded(seed);
        let mut pg = ParamGroup::new();
        pg.add("enc", randn_td(window, LATENT_DIM, 0.1, &mut rng));
        pg.add("dec", randn_td(LATENT_DIM, window, 0.1, &mut rng));

        // fixed training batch: windows cut from family draws
        let mut batch = Td::zeros(96, window);
        for r in 0..96 {
            let sig = gen_signal(&mut rng, window);
            for (o, &s) in batch.row_mut(r).iter_mut().zip(&sig) {
                *o = f64::from(s);
            }
        }
        for _ in 0..steps {
            let mut tape = Tape::new();
            let leaves = pg.leaves(&mut tape);
            let x = tape.leaf(batch.clone());
            let z = tape.matmul(x, leaves[0]);
            let xh = tape.matmul(z, leaves[1]);
            let d = tape.sub(xh, x);
            let sq = tape.mul(d, d);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            pg.adam_step(&leaves, &grads, AdamCfg { lr: 3e-3, ..Default::default() });
        }
        LatentCodec { enc: pg.get("enc").clone(), dec: pg.get("dec").clone(), window }
    }

    /// Signal -> frames x D latents over non-overlapping windows.
    pub fn encode(&self, signal: &[f32]) -> Mat {
        let frames = signal.len() / self.window;
        let mut out = Mat::zeros(frames, LATENT_DIM);
        for f in 0..frames {
            for d in 0..LATENT_DIM {
                let mut acc = 0.0f64;
                for (n, &s) in signal[f * self.window..(f + 1) * self.window].iter().enumerate() {
                    acc += f64::from(s) * self.enc.get(n, d);
                }
                out.set(f, d, acc as f32);
            }
        }
        out
    }

    pub fn decode(&self, latents: &Mat) -> Vec<f32> {
        let mut out = vec![0.0f32; latents.rows * self.window];
        for f in 0..latents.rows {
            for n in 0..self.window {
                let mut acc = 0.0f64;
                for d in 0..LATENT_DIM {
                    acc += f64::from(latents.get(f, d)) * self.dec.get(d, n);
                }
                out[f * self.window + n] = acc as f32;
            }
        }
        out
    }

    /// Relative L2 reconstruction error on a signal.
    pub fn recon_error(&self, signal: &[f32]) -> f32 {
        let usable = (signal.len() / self.window) * self.window;
        if usable == 0 {
            return 0.0;
        }
        let recon = self.decode(&self.encode(signal));
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, b) in signal[..usable].iter().zip(&recon) {
            num += f64::from(a - b) * f64::from(a - b);
            den += f64::from(*a) * f64::from(*a);
        }
        ((num / den.max(1e-12)).sqrt()) as f32
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        bio::write_magic(w, b"LCDC", 1)?;
        bio::write_u32(w, self.window as u32)?;
        bio::write_mat(w, &self.enc.to_mat())?;
        bio::write_mat(w, &self.dec.to_mat())?;
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        bio::read_magic(r, b"LCDC", 1)?;
        let window = bio::read_u32(r)? as usize;
        let enc = Td::from_mat(&bio::read_mat(r)?);
        let dec = Td::from_mat(&bio::read_mat(r)?);
        if enc.cols != LATENT_DIM || dec.rows != LATENT_DIM {
            return Err(Error::BadCheckpoint("latent dim mismatch".into()));
        }
        Ok(LatentCodec { enc, dec, window })
    }
}
