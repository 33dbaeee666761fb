//! The compressor: multi-level feature fusion, query-based 2x temporal
//! downsampling, residual vector quantization, and the commitment and
//! feature-alignment losses.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::features::{randn_mat, FeatureBank, FeatureSeq};
use crate::io as bio;
use crate::kmeans::{kmeans, nearest};
use crate::par;
use crate::rng::seeded;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Mat};

// ---------------------------------------------------------------------------
// Token sequences and codebooks
// ---------------------------------------------------------------------------

/// L frames x K integer code indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFrameSeq {
    pub l: usize,
    pub k: usize,
    pub indices: Vec<u32>,
}

impl TokenFrameSeq {
    pub fn new(l: usize, k: usize) -> Self {
        TokenFrameSeq { l, k, indices: vec![0; l * k] }
    }

    pub fn from_frames(frames: &[Vec<u32>], k: usize) -> Self {
        let mut s = TokenFrameSeq::new(frames.len(), k);
        for (l, f) in frames.iter().enumerate() {
            s.frame_mut(l).copy_from_slice(f);
        }
        s
    }

    #[inline]
    pub fn frame(&self, l: usize) -> &[u32] {
        &self.indices[l * self.k..(l + 1) * self.k]
    }

    #[inline]
    pub fn frame_mut(&mut self, l: usize) -> &mut [u32] {
        &mut self.indices[l * self.k..(l + 1) * self.k]
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        bio::write_magic(w, b"TOKS", 1)?;
        bio::write_u32(w, self.l as u32)?;
        bio::write_u32(w, self.k as u32)?;
        bio::write_u32_slice(w, &self.indices)?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        bio::read_magic(r, b"TOKS", 1)?;
        let l = bio::read_u32(r)? as usize;
        let k = bio::read_u32(r)? as usize;
        let indices = bio::read_u32_vec(r, l * k)?;
        Ok(TokenFrameSeq { l, k, indices })
    }
}

/// K codebooks of V entries x C dims.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    pub books: Vec<Mat>,
}

impl CodebookSet {
    pub fn stages(&self) -> usize {
        self.books.len()
    }

    pub fn vocab(&self) -> usize {
        self.books[0].rows
    }

    pub fn code_dim(&self) -> usize {
        self.books[0].cols
    }

    /// Seeded random codebooks. Books after stage 0 reserve a zero entry so
    /// quantization never expands the residual.
    pub fn random(k: usize, v: usize, c: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut books: Vec<Mat> = (0..k).map(|_| randn_mat(v, c, 0.3, &mut rng)).collect();
        for book in books.iter_mut().skip(1) {
            book.row_mut(0).fill(0.0);
        }
        CodebookSet { books }
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        bio::write_magic(w, b"RVQ1", 1)?;
        bio::write_u32(w, self.stages() as u32)?;
        bio::write_u32(w, self.vocab() as u32)?;
        bio::write_u32(w, self.code_dim() as u32)?;
        for book in &self.books {
            bio::write_f32_slice(w, &book.data)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        bio::read_magic(r, b"RVQ1", 1)?;
        let k = bio::read_u32(r)? as usize;
        let v = bio::read_u32(r)? as usize;
        let c = bio::read_u32(r)? as usize;
        let mut books = Vec::with_capacity(k);
        for _ in 0..k {
            books.push(Mat::from_vec(v, c, bio::read_f32_vec(r, v * c)?));
        }
        Ok(CodebookSet { books })
    }
}

// ---------------------------------------------------------------------------
// Fusion and query downsampling
// ---------------------------------------------------------------------------

/// Channel-concatenate aligned levels and project to the fused dim.
pub fn fuse_features(levels: &[FeatureSeq], proj: &Mat) -> Result<FeatureSeq> {
    assert!(!levels.is_empty());
    let frames = levels[0].frames();
    for l in levels {
        if l.frames() != frames {
            return Err(Error::LengthMismatch(frames, l.frames()));
        }
    }
    let total: usize = levels.iter().map(FeatureSeq::channels).sum();
    if total != proj.rows {
        return Err(Error::DimMismatch(total, proj.rows));
    }
    let mut concat = Mat::zeros(frames, total);
    for f in 0..frames {
        let row = concat.row_mut(f);
        let mut at = 0;
        for l in levels {
            row[at..at + l.channels()].copy_from_slice(l.data.row(f));
            at += l.channels();
        }
    }
    let fused = tensor::gemm_alloc(&concat, proj);
    Ok(FeatureSeq { data: fused, frame_rate: levels[0].frame_rate })
}

/// Sequence transform run over the query-interleaved sequence.
pub trait SeqMixer: Send + Sync {
    fn mix(&self, x: &Mat) -> Mat;
}

/// Identity mixer; with it, downsampling returns tiled copies of the query
/// vector. Used as the stub oracle in tests.
pub struct IdentityMixer;

impl SeqMixer for IdentityMixer {
    fn mix(&self, x: &Mat) -> Mat {
        x.clone()
    }
}

struct MixerBlock {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w1: Mat,
    w2: Mat,
    norm1: Vec<f32>,
    norm2: Vec<f32>,
}

/// Two-block bidirectional attention mixer with rotary positions.
pub struct TransformerMixer {
    blocks: Vec<MixerBlock>,
    heads: usize,
}

impl TransformerMixer {
    pub fn new(dim: usize, blocks: usize, heads: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let scale = 1.0 / (dim as f32).sqrt();
        let blocks = (0..blocks)
            .map(|_| MixerBlock {
                wq: randn_mat(dim, dim, scale, &mut rng),
                wk: randn_mat(dim, dim, scale, &mut rng),
                wv: randn_mat(dim, dim, scale, &mut rng),
                wo: randn_mat(dim, dim, scale, &mut rng),
                w1: randn_mat(dim, dim * 2, scale, &mut rng),
                w2: randn_mat(dim * 2, dim, scale, &mut rng),
                norm1: vec![1.0; dim],
                norm2: vec![1.0; dim],
            })
            .collect();
        TransformerMixer { blocks, heads }
    }

    pub fn params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("mixer.blk{i}.wq"), &b.wq));
            out.push((format!("mixer.blk{i}.wk"), &b.wk));
            out.push((format!("mixer.blk{i}.wv"), &b.wv));
            out.push((format!("mixer.blk{i}.wo"), &b.wo));
            out.push((format!("mixer.blk{i}.w1"), &b.w1));
            out.push((format!("mixer.blk{i}.w2"), &b.w2));
        }
        out
    }
}

impl SeqMixer for TransformerMixer {
    fn mix(&self, x: &Mat) -> Mat {
        let n = x.rows;
        let dim = x.cols;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut cur = x.clone();
        for blk in &self.blocks {
            let mut xn = Mat::zeros(n, dim);
            for r in 0..n {
                tensor::rmsnorm_row(cur.row(r), &blk.norm1, 1e-6, xn.row_mut(r));
            }
            let mut q = tensor::gemm_alloc(&xn, &blk.wq);
            let mut k = tensor::gemm_alloc(&xn, &blk.wk);
            let v = tensor::gemm_alloc(&xn, &blk.wv);
            for r in 0..n {
                tensor::rotary_row(q.row_mut(r), r, head_dim, 10000.0);
                tensor::rotary_row(k.row_mut(r), r, head_dim, 10000.0);
            }
            let mut att = Mat::zeros(n, dim);
            let mut scores = tensor::alloc_buf(n);
            for r in 0..n {
                for h in 0..self.heads {
                    let off = h * head_dim;
                    let qh = &q.row(r)[off..off + head_dim];
                    tensor::attn_scores(qh, &k.data, n, dim, off, scale, None, &mut scores);
                    tensor::softmax_row(&mut scores);
                    let out = &mut att.row_mut(r)[off..off + head_dim];
                    tensor::attn_mix(&scores, &v.data, n, dim, off, out);
                }
            }
            let proj = tensor::gemm_alloc(&att, &blk.wo);
            tensor::add_assign(&mut cur.data, &proj.data);

            let mut xn2 = Mat::zeros(n, dim);
            for r in 0..n {
                tensor::rmsnorm_row(cur.row(r), &blk.norm2, 1e-6, xn2.row_mut(r));
            }
            let mut h1 = tensor::gemm_alloc(&xn2, &blk.w1);
            tensor::silu(&mut h1.data);
            let h2 = tensor::gemm_alloc(&h1, &blk.w2);
            tensor::add_assign(&mut cur.data, &h2.data);
        }
        cur
    }
}

/// Learnable query vector plus the mixer it is run through.
pub struct QueryDownsampler {
    pub query: Vec<f32>,
    pub mixer: Box<dyn SeqMixer>,
}

impl QueryDownsampler {
    pub fn new(dim: usize, blocks: usize, heads: usize, seed: u64) -> Self {
        let mut rng = seeded(seed.wrapping_add(0x5EED));
        let query = randn_mat(1, dim, 0.5, &mut rng).data;
        QueryDownsampler { query, mixer: Box::new(TransformerMixer::new(dim, blocks, heads, seed)) }
    }

    /// Insert the query after every two frames, mix, keep query positions.
    /// Odd inputs are right-padded with one zero frame; the pad count is
    /// returned so decoding can trim.
    pub fn downsample(&self, y_h: &FeatureSeq) -> (FeatureSeq, usize) {
        let dim = self.query.len();
        let frames = y_h.frames();
        let pad = frames % 2;
        let padded = frames + pad;
        let pairs = padded / 2;
        if pairs == 0 {
            return (
                FeatureSeq { data: Mat::zeros(0, dim), frame_rate: y_h.frame_rate / 2.0 },
                0,
            );
        }
        let mut interleaved = Mat::zeros(pairs * 3, dim);
        for p in 0..pairs {
            for j in 0..2 {
                let src = p * 2 + j;
                if src < frames {
                    interleaved.row_mut(p * 3 + j).copy_from_slice(y_h.data.row(src));
                }
            }
            interleaved.row_mut(p * 3 + 2).copy_from_slice(&self.query);
        }
        let mixed = self.mixer.mix(&interleaved);
        let mut out = Mat::zeros(pairs, dim);
        for p in 0..pairs {
            out.row_mut(p).copy_from_slice(mixed.row(p * 3 + 2));
        }
        (FeatureSeq { data: out, frame_rate: y_h.frame_rate / 2.0 }, pad)
    }
}

// ---------------------------------------------------------------------------
// RVQ encode / decode
// ---------------------------------------------------------------------------

pub struct RvqEncoded {
    pub tokens: TokenFrameSeq,
    pub quantized: FeatureSeq,
    /// Mean frame L2 norm of the residual after each stage.
    pub residual_norms: Vec<f32>,
}

/// Stage-wise nearest-entry quantization of every frame.
pub fn rvq_encode(y_l: &FeatureSeq, cb: &CodebookSet) -> Result<RvqEncoded> {
    if y_l.channels() != cb.code_dim() {
        return Err(Error::DimMismatch(y_l.channels(), cb.code_dim()));
    }
    let k = cb.stages();
    let frames = y_l.frames();
    let per_frame = par::map_indexed(frames, |f| {
        let mut residual = y_l.data.row(f).to_vec();
        let mut idxs = Vec::with_capacity(k);
        let mut norms = Vec::with_capacity(k);
        let mut quant = vec![0.0f32; residual.len()];
        for book in &cb.books {
            let idx = nearest(&residual, book);
            idxs.push(idx as u32);
            let entry = book.row(idx);
            for ((r, q), &e) in residual.iter_mut().zip(quant.iter_mut()).zip(entry) {
                *r -= e;
                *q += e;
            }
            norms.push(residual.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt());
        }
        (idxs, norms, quant)
    });

    let mut tokens = TokenFrameSeq::new(frames, k);
    let mut quantized = Mat::zeros(frames, y_l.channels());
    let mut norm_acc = vec![0.0f64; k];
    for (f, (idxs, norms, quant)) in per_frame.into_iter().enumerate() {
        tokens.frame_mut(f).copy_from_slice(&idxs);
        quantized.row_mut(f).copy_from_slice(&quant);
        for (a, n) in norm_acc.iter_mut().zip(&norms) {
            *a += n;
        }
    }
    let residual_norms =
        norm_acc.iter().map(|&a| if frames > 0 { (a / frames as f64) as f32 } else { 0.0 }).collect();
    Ok(RvqEncoded {
        tokens,
        quantized: FeatureSeq { data: quantized, frame_rate: y_l.frame_rate },
        residual_norms,
    })
}

/// Codebook lookup and summation across stages.
pub fn rvq_decode(tokens: &TokenFrameSeq, cb: &CodebookSet) -> Result<FeatureSeq> {
    assert_eq!(tokens.k, cb.stages(), "token stages must match codebooks");
    let c = cb.code_dim();
    let mut out = Mat::zeros(tokens.l, c);
    for f in 0..tokens.l {
        let row = out.row_mut(f);
        for (k, &idx) in tokens.frame(f).iter().enumerate() {
            if idx as usize >= cb.vocab() {
                return Err(Error::IndexOutOfRange { index: idx as usize, vocab: cb.vocab() });
            }
            for (o, &e) in row.iter_mut().zip(cb.books[k].row(idx as usize)) {
                *o += e;
            }
        }
    }
    // half the fused rate after downsampling; callers overwrite when needed
    Ok(FeatureSeq { data: out, frame_rate: 12.5 })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over frames of the squared L2 distance between the (stop-gradient)
/// target and the quantized reconstruction.
pub fn commitment_loss(y_l: &FeatureSeq, y_hat: &FeatureSeq) -> Result<f32> {
    if y_l.data.shape() != y_hat.data.shape() {
        return Err(Error::ShapeMismatch(y_l.data.shape(), y_hat.data.shape()));
    }
    let frames = y_l.frames();
    if frames == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    for (a, b) in y_l.data.data.iter().zip(&y_hat.data.data) {
        let d = f64::from(a - b);
        acc += d * d;
    }
    Ok((acc / frames as f64) as f32)
}

/// Tape version of the commitment loss. The target enters as a constant
/// (stop-gradient); the gradient flows through `y_hat` only.
pub fn commitment_loss_tape(tape: &mut Tape, y_l_const: Var, y_hat: Var) -> Var {
    let frames = tape.value(y_hat).rows;
    let diff = tape.sub(y_l_const, y_hat);
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    tape.scale(total, 1.0 / frames as f64)
}

/// Negative mean log-sigmoid of per-frame cosine similarity.
pub fn alignment_loss(u: &FeatureSeq, reference: &FeatureSeq) -> Result<f32> {
    if u.data.shape() != reference.data.shape() {
        return Err(Error::ShapeMismatch(u.data.shape(), reference.data.shape()));
    }
    let frames = u.frames();
    if frames == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0f64;
    for f in 0..frames {
        let a = u.data.row(f);
        let b = reference.data.row(f);
        let (mut na, mut nb, mut dot) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            na += f64::from(x) * f64::from(x);
            nb += f64::from(y) * f64::from(y);
            dot += f64::from(x) * f64::from(y);
        }
        if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
            return Err(Error::DegenerateFrame(f));
        }
        let cos = dot / (na.sqrt() * nb.sqrt());
        // log(sigmoid(c)) = -ln(1 + e^{-c})
        acc += -(-cos).exp().ln_1p();
    }
    Ok((-acc / frames as f64) as f32)
}

/// Tape version of the alignment loss; differentiable in both arguments.
pub fn alignment_loss_tape(tape: &mut Tape, u: Var, reference: Var) -> Var {
    let frames = tape.value(u).rows;
    let uu = tape.row_dot(u, u);
    let vv = tape.row_dot(reference, reference);
    let uv = tape.row_dot(u, reference);
    let iu = tape.rsqrt(uu, 0.0);
    let iv = tape.rsqrt(vv, 0.0);
    let c0 = tape.mul(uv, iu);
    let cos = tape.mul(c0, iv);
    let ls = tape.log_sigmoid(cos);
    let total = tape.sum_all(ls);
    tape.scale(total, -1.0 / frames as f64)
}

// ---------------------------------------------------------------------------
// Upsamplers (alignment path back to the reference rates)
// ---------------------------------------------------------------------------

/// Per-level parametric map from the quantized 12.5 Hz features back to a
/// reference level's frame rate and channel dim: nearest temporal repeat
/// followed by a linear channel map.
pub struct Upsampler {
    pub factor: usize,
    pub weight: Mat,
}

impl Upsampler {
    pub fn new(factor: usize, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Upsampler { factor, weight: randn_mat(in_dim, out_dim, 1.0 / (in_dim as f32).sqrt(), &mut rng) }
    }

    pub fn apply(&self, y: &FeatureSeq) -> FeatureSeq {
        let mut rep = Mat::zeros(y.frames() * self.factor, y.channels());
        for f in 0..y.frames() {
            for j in 0..self.factor {
                rep.row_mut(f * self.factor + j).copy_from_slice(y.data.row(f));
            }
        }
        let data = tensor::gemm_alloc(&rep, &self.weight);
        FeatureSeq { data, frame_rate: y.frame_rate * self.factor as f32 }
    }
}

// ---------------------------------------------------------------------------
// Codebook training
// ---------------------------------------------------------------------------

/// Stage-wise k-means: stage k fits the residuals left by stages < k.
/// Books after stage 0 get their smallest-norm centroid pinned to zero so
/// quantization never expands a residual.
pub fn train_codebooks(
    corpus: &[FeatureSeq],
    k: usize,
    v: usize,
    iters: usize,
    seed: u64,
) -> Result<CodebookSet> {
    let total: usize = corpus.iter().map(FeatureSeq::frames).sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let dim = corpus[0].channels();
    let mut residuals = Mat::zeros(total, dim);
    let mut at = 0;
    for seq in corpus {
        for f in 0..seq.frames() {
            residuals.row_mut(at).copy_from_slice(seq.data.row(f));
            at += 1;
        }
    }
    let mut books = Vec::with_capacity(k);
    for stage in 0..k {
        let mut book = kmeans(&residuals, v, iters, seed.wrapping_add(stage as u64));
        if stage > 0 && book.rows > 1 {
            let zmin = (0..book.rows)
                .min_by(|&a, &b| {
                    let na: f32 = book.row(a).iter().map(|x| x * x).sum();
                    let nb: f32 = book.row(b).iter().map(|x| x * x).sum();
                    na.partial_cmp(&nb).unwrap()
                })
                .unwrap();
            book.row_mut(zmin).fill(0.0);
        }
        let assignments = par::map_indexed(residuals.rows, |i| nearest(residuals.row(i), &book));
        for (i, &a) in assignments.iter().enumerate() {
            let entry: Vec<f32> = book.row(a).to_vec();
            for (r, e) in residuals.row_mut(i).iter_mut().zip(entry) {
                *r -= e;
            }
        }
        books.push(book);
    }
    Ok(CodebookSet { books })
}

// ---------------------------------------------------------------------------
// Full compressor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompressorConfig {
    /// Fused channel dim C.
    pub channels: usize,
    /// RVQ stages.
    pub stages: usize,
    /// Codebook vocabulary.
    pub vocab: usize,
    pub mixer_blocks: usize,
    pub mixer_heads: usize,
    pub seed: u64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig {
            channels: 64,
            stages: 8,
            vocab: 256,
            mixer_blocks: 2,
            mixer_heads: 4,
            seed: 0,
        }
    }
}

/// Feature bank, fusion projection, query downsampler, codebooks, and the
/// alignment upsamplers, bundled with persistence.
pub struct Compressor {
    pub cfg: CompressorConfig,
    pub bank: FeatureBank,
    pub fuse_proj: Mat,
    pub downsampler: QueryDownsampler,
    pub codebooks: CodebookSet,
    pub upsamplers: Vec<Upsampler>,
}

/// Levels the alignment loss is applied to (semantic + phonetic stand-ins).
pub const ALIGN_LEVELS: [usize; 2] = [0, 1];

impl Compressor {
    pub fn new(cfg: CompressorConfig) -> Self {
        let mut rng = seeded(cfg.seed.wrapping_add(101));
        let level_dims = [32usize, 32, 24, 24];
        let level_rates = [25.0f32, 50.0, 50.0, 25.0];
        let total: usize = level_dims.iter().sum();
        let fuse_proj = randn_mat(total, cfg.channels, 1.0 / (total as f32).sqrt(), &mut rng);
        let downsampler =
            QueryDownsampler::new(cfg.channels, cfg.mixer_blocks, cfg.mixer_heads, cfg.seed);
        let codebooks = CodebookSet::random(cfg.stages, cfg.vocab, cfg.channels, cfg.seed ^ 0xC0DE);
        let upsamplers = level_dims
            .iter()
            .zip(level_rates)
            .enumerate()
            .map(|(i, (&dim, rate))| {
                Upsampler::new((rate / 12.5) as usize, cfg.channels, dim, cfg.seed + 7 + i as u64)
            })
            .collect();
        Compressor {
            bank: FeatureBank::new(cfg.seed.wrapping_add(5000)),
            cfg,
            fuse_proj,
            downsampler,
            codebooks,
            upsamplers,
        }
    }

    /// Signal -> fused 25 Hz features -> 12.5 Hz downsampled features.
    pub fn analyze(&self, signal: &[f32]) -> Result<FeatureSeq> {
        let levels = self.bank.extract_at_25hz(signal);
        let fused = fuse_features(&levels, &self.fuse_proj)?;
        let (y_l, _pad) = self.downsampler.downsample(&fused);
        Ok(y_l)
    }

    pub fn encode_signal(&self, signal: &[f32]) -> Result<RvqEncoded> {
        let y_l = self.analyze(signal)?;
        rvq_encode(&y_l, &self.codebooks)
    }

    /// Fit codebooks on the downsampled features of a signal corpus.
    pub fn train_codebooks_on(&mut self, signals: &[Vec<f32>], iters: usize) -> Result<()> {
        let mut feats = Vec::with_capacity(signals.len());
        for s in signals {
            feats.push(self.analyze(s)?);
        }
        self.codebooks =
            train_codebooks(&feats, self.cfg.stages, self.cfg.vocab, iters, self.cfg.seed ^ 0x5EED)?;
        Ok(())
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        bio::write_magic(w, b"RVQC", 1)?;
        let cfg = serde_json::to_string(&self.cfg)?;
        bio::write_str(w, &cfg)?;
        bio::write_u32(w, 1)?;
        bio::write_str(w, "fuse_proj")?;
        bio::write_mat(w, &self.fuse_proj)?;
        self.codebooks.write(w)?;
        Ok(())
    }

    /// Mixer, bank, and upsampler weights are reconstructed from the stored
    /// config seed; only the fusion projection and the trained codebooks are
    /// serialized.
    pub fn load(r: &mut impl Read) -> Result<Self> {
        bio::read_magic(r, b"RVQC", 1)?;
        let cfg: CompressorConfig = serde_json::from_str(&bio::read_str(r)?)?;
        let n = bio::read_u32(r)?;
        if n != 1 {
            return Err(Error::BadCheckpoint(format!("expected 1 named mat, found {n}")));
        }
        let name = bio::read_str(r)?;
        if name != "fuse_proj" {
            return Err(Error::BadCheckpoint(format!("unexpected mat {name}")));
        }
        let fuse_proj = bio::read_mat(r)?;
        let codebooks = CodebookSet::read(r)?;
        let mut comp = Compressor::new(cfg);
        if fuse_proj.shape() != comp.fuse_proj.shape() {
            return Err(Error::BadCheckpoint("fuse projection shape mismatch".into()));
        }
        comp.fuse_proj = fuse_proj;
        comp.codebooks = codebooks;
        Ok(comp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::signal::gen_signal;
    use crate::tape::grad_check;

    fn feat(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f32) -> FeatureSeq {
        FeatureSeq { data: Mat::from_fn(rows, cols, f), frame_rate: 12.5 }
    }

    fn random_feat(rows: usize, cols: usize, seed: u64) -> FeatureSeq {
        let mut rng = seeded(seed);
        FeatureSeq { data: randn_mat(rows, cols, 1.0, &mut rng), frame_rate: 12.5 }
    }

    // -- fusion --------------------------------------------------------

    #[test]
    fn fuse_identity_projection_duplicates_columns() {
        let a = feat(3, 1, |r, _| r as f32);
        let b = a.clone();
        // projection that just averages the two duplicated columns
        let proj = Mat::from_vec(2, 1, vec![0.5, 0.5]);
        let fused = fuse_features(&[a.clone(), b], &proj).unwrap();
        for r in 0..3 {
            assert!((fused.data.get(r, 0) - a.data.get(r, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_default_bank_yields_configured_dim() {
        let comp = Compressor::new(CompressorConfig::default());
        let sig = gen_signal(&mut seeded(2), 64 * 16);
        let levels = comp.bank.extract_at_25hz(&sig);
        let fused = fuse_features(&levels, &comp.fuse_proj).unwrap();
        assert_eq!(fused.channels(), 64);
        assert_eq!(fused.frame_rate, 25.0);
    }

    #[test]
    fn fuse_zero_inputs_zero_output() {
        let a = feat(4, 3, |_, _| 0.0);
        let b = feat(4, 2, |_, _| 0.0);
        let proj = Mat::from_fn(5, 4, |r, c| (r + c) as f32 * 0.1);
        let fused = fuse_features(&[a, b], &proj).unwrap();
        assert!(fused.data.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_rejects_mismatched_lengths() {
        let a = feat(4, 2, |_, _| 1.0);
        let b = feat(3, 2, |_, _| 1.0);
        let proj = Mat::zeros(4, 2);
        assert!(matches!(fuse_features(&[a, b], &proj), Err(Error::LengthMismatch(4, 3))));
    }

    // -- downsampling ----------------------------------------------------

    #[test]
    fn downsample_halves_frames() {
        let ds = QueryDownsampler::new(8, 1, 2, 3);
        let y = random_feat(4, 8, 5);
        let y = FeatureSeq { frame_rate: 25.0, ..y };
        let (out, pad) = ds.downsample(&y);
        assert_eq!(out.frames(), 2);
        assert_eq!(pad, 0);
        assert_eq!(out.frame_rate, 12.5);
    }

    #[test]
    fn downsample_empty_is_empty() {
        let ds = QueryDownsampler::new(8, 1, 2, 3);
        let y = feat(0, 8, |_, _| 0.0);
        let (out, pad) = ds.downsample(&y);
        assert_eq!(out.frames(), 0);
        assert_eq!(pad, 0);
    }

    #[test]
    fn downsample_odd_input_pads_once() {
        let ds = QueryDownsampler::new(8, 1, 2, 3);
        let y = random_feat(5, 8, 6);
        let (out, pad) = ds.downsample(&y);
        assert_eq!(out.frames(), 3);
        assert_eq!(pad, 1);
    }

    #[test]
    fn identity_mixer_tiles_query_vector() {
        let mut ds = QueryDownsampler::new(4, 1, 2, 3);
        ds.mixer = Box::new(IdentityMixer);
        let y = random_feat(6, 4, 7);
        let (out, _) = ds.downsample(&y);
        for r in 0..out.frames() {
            assert_eq!(out.data.row(r), &ds.query[..]);
        }
    }

    // -- rvq -------------------------------------------------------------

    #[test]
    fn single_stage_exact_match_has_zero_residual() {
        let target = vec![0.3f32, -0.8, 0.1];
        let mut book = Mat::from_fn(4, 3, |r, c| (r * 3 + c) as f32);
        book.row_mut(2).copy_from_slice(&target);
        let cb = CodebookSet { books: vec![book] };
        let y = FeatureSeq { data: Mat::from_vec(1, 3, target), frame_rate: 12.5 };
        let enc = rvq_encode(&y, &cb).unwrap();
        assert_eq!(enc.tokens.frame(0), &[2]);
        assert!(enc.residual_norms[0].abs() < 1e-7);
    }

    #[test]
    fn hand_built_two_stage_example() {
        let book0 = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let book1 = Mat::from_vec(2, 2, vec![0.1, 0.0, 0.0, 0.1]);
        let cb = CodebookSet { books: vec![book0, book1] };
        let y = FeatureSeq { data: Mat::from_vec(1, 2, vec![1.1, 0.0]), frame_rate: 12.5 };
        let enc = rvq_encode(&y, &cb).unwrap();
        assert_eq!(enc.tokens.frame(0), &[0, 0]);
        assert_eq!(enc.quantized.data.row(0), &[1.1, 0.0]);
    }

    #[test]
    fn residual_norms_non_increasing_on_random_frames() {
        let cb = CodebookSet::random(8, 32, 16, 99);
        let y = random_feat(1000, 16, 1234);
        let enc = rvq_encode(&y, &cb).unwrap();
        for k in 1..8 {
            assert!(
                enc.residual_norms[k] <= enc.residual_norms[k - 1] + 1e-7,
                "stage {k}: {:?}",
                enc.residual_norms
            );
        }
    }

    #[test]
    fn decode_matches_encoder_quantized_exactly() {
        let cb = CodebookSet::random(4, 16, 8, 42);
        let y = random_feat(64, 8, 77);
        let enc = rvq_encode(&y, &cb).unwrap();
        let dec = rvq_decode(&enc.tokens, &cb).unwrap();
        assert_eq!(dec.data.data, enc.quantized.data.data);
    }

    #[test]
    fn decode_zero_indices_sums_first_entries() {
        let cb = CodebookSet::random(3, 4, 2, 8);
        let tokens = TokenFrameSeq::new(2, 3);
        let dec = rvq_decode(&tokens, &cb).unwrap();
        let expect: Vec<f32> =
            (0..2).map(|c| cb.books.iter().map(|b| b.get(0, c)).sum::<f32>()).collect();
        assert_eq!(dec.data.row(0), &expect[..]);
        assert_eq!(dec.data.row(1), &expect[..]);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let cb = CodebookSet::random(1, 4, 2, 8);
        let mut tokens = TokenFrameSeq::new(1, 1);
        tokens.frame_mut(0)[0] = 9;
        assert!(matches!(
            rvq_decode(&tokens, &cb),
            Err(Error::IndexOutOfRange { index: 9, vocab: 4 })
        ));
    }

    #[test]
    fn encode_rejects_dim_mismatch() {
        let cb = CodebookSet::random(2, 4, 8, 8);
        let y = random_feat(3, 5, 1);
        assert!(matches!(rvq_encode(&y, &cb), Err(Error::DimMismatch(5, 8))));
    }

    // -- losses ------------------------------------------------------------

    #[test]
    fn commitment_zero_when_equal() {
        let y = random_feat(5, 4, 3);
        assert_eq!(commitment_loss(&y, &y.clone()).unwrap(), 0.0);
    }

    #[test]
    fn commitment_single_frame_analytic() {
        let a = feat(1, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let b = feat(1, 2, |_, _| 0.0);
        assert!((commitment_loss(&a, &b).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn commitment_matches_naive_loop_oracle() {
        let a = random_feat(17, 6, 10);
        let b = random_feat(17, 6, 11);
        let got = commitment_loss(&a, &b).unwrap();
        let mut want = 0.0f64;
        for f in 0..17 {
            let mut d2 = 0.0f64;
            for c in 0..6 {
                let d = f64::from(a.data.get(f, c)) - f64::from(b.data.get(f, c));
                d2 += d * d;
            }
            want += d2;
        }
        let want = (want / 17.0) as f32;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn alignment_analytic_values() {
        let unit = feat(2, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let same = alignment_loss(&unit, &unit.clone()).unwrap();
        assert!((same - 0.313_261_7).abs() < 1e-5, "{same}");

        let ortho = feat(2, 2, |_, c| if c == 1 { 1.0 } else { 0.0 });
        let o = alignment_loss(&unit, &ortho).unwrap();
        assert!((o - std::f32::consts::LN_2).abs() < 1e-5, "{o}");

        let anti = feat(2, 2, |_, c| if c == 0 { -1.0 } else { 0.0 });
        let a = alignment_loss(&unit, &anti).unwrap();
        assert!((a - 1.313_261_7).abs() < 1e-5, "{a}");
    }

    #[test]
    fn alignment_invariant_to_positive_rescaling() {
        let u = random_feat(6, 5, 20);
        let r = random_feat(6, 5, 21);
        let base = alignment_loss(&u, &r).unwrap();
        let scaled = FeatureSeq {
            data: Mat::from_fn(6, 5, |f, c| u.data.get(f, c) * (1.0 + f as f32)),
            frame_rate: u.frame_rate,
        };
        assert!((alignment_loss(&scaled, &r).unwrap() - base).abs() < 1e-5);
    }

    #[test]
    fn alignment_rejects_degenerate_frames() {
        let u = feat(2, 2, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let r = random_feat(2, 2, 4);
        assert!(matches!(alignment_loss(&u, &r), Err(Error::DegenerateFrame(1))));
    }

    #[test]
    fn loss_tape_versions_match_plain_values() {
        let a = random_feat(7, 4, 30);
        let b = random_feat(7, 4, 31);
        let mut tape = Tape::new();
        let va = tape.leaf_from_mat(&a.data);
        let vb = tape.leaf_from_mat(&b.data);
        let c = commitment_loss_tape(&mut tape, va, vb);
        assert!((tape.value(c).item() as f32 - commitment_loss(&a, &b).unwrap()).abs() < 1e-5);
        let al = alignment_loss_tape(&mut tape, va, vb);
        assert!((tape.value(al).item() as f32 - alignment_loss(&a, &b).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        let y = Td_from(&random_feat(4, 3, 50));
        let y_hat = Td_from(&random_feat(4, 3, 51));
        // commitment: gradient flows through y_hat (the target is
        // stop-gradient by definition)
        let target = y.clone();
        let err = grad_check(
            &[y_hat.clone()],
            move |t, vs| {
                let c = t.leaf(target.clone());
                commitment_loss_tape(t, c, vs[0])
            },
            1e-4,
        );
        assert!(err < 1e-3, "commitment grad err {err}");

        let err = grad_check(
            &[y.clone(), y_hat],
            |t, vs| alignment_loss_tape(t, vs[0], vs[1]),
            1e-4,
        );
        assert!(err < 1e-3, "alignment grad err {err}");
    }

    #[allow(non_snake_case)]
    fn Td_from(f: &FeatureSeq) -> crate::tape::Td {
        crate::tape::Td::from_mat(&f.data)
    }

    // -- training --------------------------------------------------------

    #[test]
    fn repeated_vector_corpus_learns_exact_entry() {
        let corpus = vec![feat(10, 3, |_, c| [1.0, -2.0, 0.5][c])];
        let cb = train_codebooks(&corpus, 1, 1, 20, 5).unwrap();
        assert_eq!(cb.books[0].row(0), &[1.0, -2.0, 0.5]);
        let enc = rvq_encode(&corpus[0], &cb).unwrap();
        assert!(enc.residual_norms[0] < 1e-7);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(train_codebooks(&[], 2, 4, 10, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn training_reduces_heldout_residual_norm() {
        let cfg = CompressorConfig { stages: 4, vocab: 32, ..Default::default() };
        let mut comp = Compressor::new(cfg);
        let mut rng = seeded(7);
        let train: Vec<Vec<f32>> = (0..6).map(|_| gen_signal(&mut rng, 64 * 16)).collect();
        let held: Vec<f32> = gen_signal(&mut rng, 64 * 16);

        let before = comp.encode_signal(&held).unwrap().residual_norms;
        comp.train_codebooks_on(&train, 20).unwrap();
        let after = comp.encode_signal(&held).unwrap().residual_norms;
        assert!(
            after.last().unwrap() <= before.last().unwrap(),
            "final residual {after:?} vs {before:?}"
        );
    }

    // -- persistence -----------------------------------------------------

    #[test]
    fn codebooks_and_tokens_round_trip_files() {
        let cb = CodebookSet::random(3, 8, 4, 77);
        let mut buf = Vec::new();
        cb.write(&mut buf).unwrap();
        assert_eq!(CodebookSet::read(&mut buf.as_slice()).unwrap(), cb);

        let y = random_feat(12, 4, 3);
        let enc = rvq_encode(&y, &cb).unwrap();
        let mut tbuf = Vec::new();
        enc.tokens.write(&mut tbuf).unwrap();
        assert_eq!(TokenFrameSeq::read(&mut tbuf.as_slice()).unwrap(), enc.tokens);
    }

    #[test]
    fn compressor_checkpoint_round_trips_tokens() {
        let mut comp = Compressor::new(CompressorConfig {
            stages: 2,
            vocab: 16,
            ..Default::default()
        });
        let mut rng = seeded(3);
        let sigs: Vec<Vec<f32>> = (0..3).map(|_| gen_signal(&mut rng, 64 * 8)).collect();
        comp.train_codebooks_on(&sigs, 10).unwrap();
        let mut buf = Vec::new();
        comp.save(&mut buf).unwrap();
        let loaded = Compressor::load(&mut buf.as_slice()).unwrap();
        let a = comp.encode_signal(&sigs[0]).unwrap();
        let b = loaded.encode_signal(&sigs[0]).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}
