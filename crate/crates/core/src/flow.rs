//! Conditional flow matching at toy scale: linear interpolation to the noisy
//! state, the straight-line target flow, the masked regression loss, a small
//! self-attention generator conditioned on acoustic context, timed token
//! embeddings and diffusion time, and a fixed-step Euler sampler.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cond::{CondError, TextCond};
use crate::nn::{sgd_step, tanh_bwd, tanh_fwd, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Param, SgdConfig};
use crate::rng::{stream, stream2};
use crate::track::TimingTrack;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch in {what}: {a:?} vs {b:?}")]
    ShapeMismatch {
        what: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("diffusion time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("mask length {mask} does not match {frames} frames")]
    MaskLength { mask: usize, frames: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("inconsistent lengths: {0}")]
    InconsistentLength(String),
    #[error("spontaneous sampling requires a caller-supplied length")]
    MissingLength,
    #[error("euler steps must be >= 1")]
    NoSteps,
    #[error(transparent)]
    Cond(#[from] CondError),
}

/// A frame-by-channel feature matrix (the toy stand-in for a mel
/// spectrogram).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub data: Array2<f64>,
}

impl FeatureSeq {
    pub fn new(data: Array2<f64>) -> Self {
        FeatureSeq { data }
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        FeatureSeq {
            data: Array2::zeros((frames, channels)),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    fn dims(&self) -> (usize, usize) {
        (self.frames(), self.channels())
    }
}

/// Per-frame 0/1 mask selecting the span the loss applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcousticMask(pub Vec<bool>);

impl AcousticMask {
    pub fn all(frames: usize) -> Self {
        AcousticMask(vec![true; frames])
    }

    pub fn suffix(frames: usize, masked: usize) -> Self {
        let mut v = vec![false; frames];
        for slot in v.iter_mut().skip(frames.saturating_sub(masked)) {
            *slot = true;
        }
        AcousticMask(v)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// x_t = (1 - t) x0 + t x1.
pub fn interpolate(x0: &FeatureSeq, x1: &FeatureSeq, t: f64) -> Result<FeatureSeq, FlowError> {
    if x0.dims() != x1.dims() {
        return Err(FlowError::ShapeMismatch {
            what: "interpolate",
            a: x0.dims(),
            b: x1.dims(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::BadTime(t));
    }
    Ok(FeatureSeq::new(&x0.data * (1.0 - t) + &x1.data * t))
}

/// u = x1 - x0.
pub fn target_flow(x0: &FeatureSeq, x1: &FeatureSeq) -> Result<FeatureSeq, FlowError> {
    if x0.dims() != x1.dims() {
        return Err(FlowError::ShapeMismatch {
            what: "target_flow",
            a: x0.dims(),
            b: x1.dims(),
        });
    }
    Ok(FeatureSeq::new(&x1.data - &x0.data))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfmLoss {
    pub value: f64,
    /// Set when the mask selected no frames (loss is vacuously 0).
    pub empty_mask: bool,
}

/// Masked squared error: sum over channels, mean over masked frames.
pub fn cfm_loss(
    pred: &FeatureSeq,
    u: &FeatureSeq,
    mask: &AcousticMask,
) -> Result<CfmLoss, FlowError> {
    if pred.dims() != u.dims() {
        return Err(FlowError::ShapeMismatch {
            what: "cfm_loss",
            a: pred.dims(),
            b: u.dims(),
        });
    }
    if mask.0.len() != pred.frames() {
        return Err(FlowError::MaskLength {
            mask: mask.0.len(),
            frames: pred.frames(),
        });
    }
    let masked = mask.count();
    if masked == 0 {
        return Ok(CfmLoss {
            value: 0.0,
            empty_mask: true,
        });
    }
    let mut total = 0.0;
    for (j, &m) in mask.0.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..pred.channels() {
            let d = pred.data[[j, c]] - u.data[[j, c]];
            total += d * d;
        }
    }
    Ok(CfmLoss {
        value: total / masked as f64,
        empty_mask: false,
    })
}

/// Frame spans per token: (start, len), tiling [0, T).
pub type SpanPlan = Vec<(usize, usize)>;

/// Spans from a track: token i occupies its (d_i + p_i) frames.
pub fn controlled_spans(track: &TimingTrack) -> SpanPlan {
    let mut spans = Vec::with_capacity(track.len());
    let mut cursor = 0usize;
    for t in &track.timings {
        let len = t.span_frames() as usize;
        spans.push((cursor, len));
        cursor += len;
    }
    spans
}

/// Tokens distributed uniformly over `total` frames (spontaneous mode).
pub fn uniform_spans(n_tokens: usize, total: usize) -> SpanPlan {
    if n_tokens == 0 {
        return Vec::new();
    }
    (0..n_tokens)
        .map(|i| {
            let a = i * total / n_tokens;
            let b = (i + 1) * total / n_tokens;
            (a, b - a)
        })
        .collect()
}

/// Repeat each token's conditioned embedding across its span.
pub fn upsample_cond(h_tok: &Array2<f64>, spans: &SpanPlan, total: usize) -> Array2<f64> {
    let mut h = Array2::zeros((total, h_tok.ncols()));
    for (i, &(start, len)) in spans.iter().enumerate() {
        for j in start..start + len {
            h.row_mut(j).assign(&h_tok.row(i));
        }
    }
    h
}

fn downsample_grad(d_h: &Array2<f64>, spans: &SpanPlan, n_tokens: usize) -> Array2<f64> {
    let mut d_tok = Array2::zeros((n_tokens, d_h.ncols()));
    for (i, &(start, len)) in spans.iter().enumerate() {
        for j in start..start + len {
            let row = d_h.row(j).to_owned();
            let mut acc = d_tok.row_mut(i);
            acc += &row;
        }
    }
    d_tok
}

const PHASE_FEATS: usize = 6;

/// Within-span phase features for each frame: where the frame sits inside
/// its token's span plus the span length on the log scale. Span structure
/// only; the d-vs-p split stays behind the gated residuals.
fn phase_features(spans: &SpanPlan, total: usize) -> Array2<f64> {
    let mut phi = Array2::zeros((total, PHASE_FEATS));
    for &(start, len) in spans {
        for j in start..start + len {
            let idx = (j - start) as f64;
            let frac = (idx + 0.5) / len as f64;
            let row = [
                frac,
                (2.0 * std::f64::consts::PI * frac).sin(),
                (2.0 * std::f64::consts::PI * frac).cos(),
                (1.0 + idx).ln() / 4.0,
                (len as f64 - idx).ln() / 4.0,
                (1.0 + len as f64).ln() / 4.0,
            ];
            for (k, v) in row.iter().enumerate() {
                phi[[j, k]] = *v;
            }
        }
    }
    phi
}

fn sinusoid(pos: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / (half.max(2) - 1) as f64).exp();
        out[k] = (pos * freq).sin();
        out[half + k] = (pos * freq).cos();
    }
    out
}

fn frame_pe(total: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((total, dim));
    for j in 0..total {
        pe.row_mut(j).assign(&sinusoid(j as f64, dim));
    }
    pe
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct GenConfig {
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl GenConfig {
    pub fn toy(channels: usize) -> Self {
        GenConfig {
            channels,
            width: 64,
            heads: 4,
            blocks: 4,
            time_dim: 64,
        }
    }

    fn input_dim(&self) -> usize {
        2 * self.channels + PHASE_FEATS
    }
}

/// The toy sequence generator v_theta(x_t, t | c, h): input projection of
/// (x_t, context, phase), additive frame PE, conditioned-embedding injection,
/// sinusoidal time embedding through a 2-layer MLP, a stack of self-attention
/// blocks, and a linear read-out to the flow field.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    pub cfg: GenConfig,
    in_proj: Linear,
    t1: Linear,
    t2: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out_proj: Linear,
}

pub struct GenCache {
    inp: Array2<f64>,
    t_sin: Array2<f64>,
    t_h: Array2<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    ln_f_out: Array2<f64>,
}

impl GeneratorNet {
    pub fn new(cfg: GenConfig, rng: &mut impl Rng) -> Self {
        GeneratorNet {
            cfg,
            in_proj: Linear::new("gen.in_proj", cfg.input_dim(), cfg.width, rng),
            t1: Linear::new("gen.t1", cfg.time_dim, cfg.width, rng),
            t2: Linear::new("gen.t2", cfg.width, cfg.width, rng),
            blocks: (0..cfg.blocks)
                .map(|i| Block::new(&format!("gen.block{i}"), cfg.width, cfg.heads, rng))
                .collect(),
            ln_f: LayerNorm::new("gen.ln_f", cfg.width),
            out_proj: Linear::new("gen.out_proj", cfg.width, cfg.channels, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut clone = self.clone();
        let mut params = Vec::new();
        clone.collect(&mut params);
        params.iter().map(|p| p.len()).sum()
    }

    /// Forward pass over one utterance. `h` is the frame-rate conditioned
    /// embedding sequence (width must match), `context` the acoustic context
    /// with zeros over the span to generate.
    pub fn forward(
        &self,
        x_t: &Array2<f64>,
        t: f64,
        h: &Array2<f64>,
        context: &Array2<f64>,
        spans: &SpanPlan,
    ) -> Result<(Array2<f64>, GenCache), FlowError> {
        let frames = x_t.nrows();
        if context.nrows() != frames || context.ncols() != self.cfg.channels {
            return Err(FlowError::ShapeMismatch {
                what: "generator context",
                a: (frames, self.cfg.channels),
                b: (context.nrows(), context.ncols()),
            });
        }
        if h.nrows() != frames || h.ncols() != self.cfg.width {
            return Err(FlowError::ShapeMismatch {
                what: "generator conditioning",
                a: (frames, self.cfg.width),
                b: (h.nrows(), h.ncols()),
            });
        }

        let mut inp = Array2::zeros((frames, self.cfg.input_dim()));
        inp.slice_mut(ndarray::s![.., 0..self.cfg.channels]).assign(x_t);
        inp.slice_mut(ndarray::s![.., self.cfg.channels..2 * self.cfg.channels])
            .assign(context);
        inp.slice_mut(ndarray::s![.., 2 * self.cfg.channels..])
            .assign(&phase_features(spans, frames));

        let mut z = self.in_proj.fwd(&inp);
        z += h;
        z += &frame_pe(frames, self.cfg.width);

        let t_sin = sinusoid(t * 1000.0, self.cfg.time_dim)
            .insert_axis(Axis(0));
        let t_h = tanh_fwd(&self.t1.fwd(&t_sin));
        let temb = self.t2.fwd(&t_h);
        let temb_row = temb.row(0).to_owned();
        z += &temb_row;

        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut x = z;
        for block in &self.blocks {
            let (out, cache) = block.fwd(&x);
            blocks.push(cache);
            x = out;
        }
        let (ln_f_out, ln_f) = self.ln_f.fwd(&x);
        let out = self.out_proj.fwd(&ln_f_out);
        Ok((
            out,
            GenCache {
                inp,
                t_sin,
                t_h,
                blocks,
                ln_f,
                ln_f_out,
            },
        ))
    }

    /// Backward pass; accumulates parameter gradients and returns the
    /// gradient with respect to the frame-rate conditioning `h`.
    pub fn backward(&mut self, cache: &GenCache, dout: &Array2<f64>) -> Array2<f64> {
        let d_ln_f_out = self.out_proj.bwd(&cache.ln_f_out, dout);
        let mut dx = self.ln_f.bwd(&cache.ln_f, &d_ln_f_out);
        for (block, bc) in self.blocks.iter_mut().rev().zip(cache.blocks.iter().rev()) {
            dx = block.bwd(bc, &dx);
        }
        // z = in_proj(inp) + h + pe + temb
        let d_temb = dx.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_t_h = self.t2.bwd(&cache.t_h, &d_temb);
        let d_t_pre = tanh_bwd(&cache.t_h, &d_t_h);
        self.t1.bwd(&cache.t_sin, &d_t_pre);
        self.in_proj.bwd(&cache.inp, &dx);
        dx
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.in_proj.collect(out);
        self.t1.collect(out);
        self.t2.collect(out);
        for b in &mut self.blocks {
            b.collect(out);
        }
        self.ln_f.collect(out);
        self.out_proj.collect(out);
    }
}

/// One training sample: the utterance's tokens, ground-truth track, and
/// rendered features.
pub struct TrainItem<'a> {
    pub utt_id: &'a str,
    pub tokens: &'a [u32],
    pub track: &'a TimingTrack,
    pub features: &'a FeatureSeq,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub dropout_prob: f64,
    pub seed: u64,
    pub mask_min_frac: f64,
    pub mask_max_frac: f64,
    pub telemetry_smoothing: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 1e-3,
            momentum: 0.9,
            warmup_steps: 200,
            batch_size: 8,
            dropout_prob: 0.2,
            seed: 7,
            mask_min_frac: 0.4,
            mask_max_frac: 1.0,
            telemetry_smoothing: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub gate_d_ema: f64,
    pub gate_p_ema: f64,
}

/// Owns the generator, the conditioning module, and the optimizer state.
pub struct Trainer {
    pub net: GeneratorNet,
    pub cond: TextCond,
    pub cfg: TrainerConfig,
    pub step: u64,
    pub telemetry: crate::cond::GateTelemetry,
}

impl Trainer {
    pub fn new(net: GeneratorNet, cond: TextCond, cfg: TrainerConfig) -> Self {
        let telemetry = crate::cond::GateTelemetry::new(cfg.telemetry_smoothing);
        Trainer {
            net,
            cond,
            cfg,
            step: 0,
            telemetry,
        }
    }

    /// Pick this step's batch indices out of `n` items.
    pub fn draw_batch(&self, n: usize) -> Vec<usize> {
        let mut rng = stream(self.cfg.seed, "batch", self.step);
        (0..self.cfg.batch_size.min(n).max(1))
            .map(|_| rng.gen_range(0..n))
            .collect()
    }

    /// One optimizer step over a batch. Deterministic given (seed, step).
    pub fn train_step(&mut self, batch: &[TrainItem]) -> Result<StepStats, FlowError> {
        let mut total_loss = 0.0;
        let inv_batch = 1.0 / batch.len() as f64;
        for (slot, item) in batch.iter().enumerate() {
            let mut rng = stream2(self.cfg.seed, "sample", self.step, slot as u64);
            let x1 = &item.features.data;
            let frames = x1.nrows();
            if frames == 0 {
                continue;
            }
            let t: f64 = rng.gen();
            let x0 = Array2::from_shape_fn(x1.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
            let frac = self.cfg.mask_min_frac
                + (self.cfg.mask_max_frac - self.cfg.mask_min_frac) * rng.gen::<f64>();
            let mask_len = ((frac * frames as f64).round() as usize).clamp(1, frames);
            let dropped = rng.gen::<f64>() < self.cfg.dropout_prob;

            let (track_eff, spans) = if dropped {
                (None, uniform_spans(item.tokens.len(), frames))
            } else {
                let spans = controlled_spans(item.track);
                let total: usize = spans.iter().map(|s| s.1).sum();
                if total != frames {
                    return Err(FlowError::InconsistentLength(format!(
                        "{}: track spans {} frames but features have {}",
                        item.utt_id, total, frames
                    )));
                }
                (Some(item.track), spans)
            };

            let (h_tok, cond_cache) = self.cond.forward(item.tokens, track_eff)?;
            let h = upsample_cond(&h_tok, &spans, frames);

            let mut context = x1.clone();
            for j in frames - mask_len..frames {
                context.row_mut(j).fill(0.0);
            }
            let x_t = x1 * t + &x0 * (1.0 - t);
            let u = x1 - &x0;

            let (pred, cache) = self.net.forward(&x_t, t, &h, &context, &spans)?;
            let mut diff = &pred - &u;
            for j in 0..frames - mask_len {
                diff.row_mut(j).fill(0.0);
            }
            let loss = diff.mapv(|v| v * v).sum() / mask_len as f64;
            if !loss.is_finite() {
                return Err(FlowError::NonFinite {
                    step: self.step,
                    detail: format!("sample {} ({})", slot, item.utt_id),
                });
            }
            total_loss += loss * inv_batch;

            let dpred = diff.mapv(|v| 2.0 * v / mask_len as f64 * inv_batch);
            let d_h = self.net.backward(&cache, &dpred);
            let d_tok = downsample_grad(&d_h, &spans, item.tokens.len());
            self.cond.backward(&cond_cache, &d_tok);
        }

        let sgd = SgdConfig {
            lr: self.cfg.lr,
            momentum: self.cfg.momentum,
            warmup_steps: self.cfg.warmup_steps,
        };
        let mut params = Vec::new();
        self.net.collect(&mut params);
        self.cond.collect(&mut params);
        sgd_step(&mut params, &sgd, self.step);
        drop(params);

        let (gate_d_ema, gate_p_ema) = self.telemetry.update(self.step, &self.cond.gates);
        let stats = StepStats {
            step: self.step,
            loss: total_loss,
            gate_d_ema,
            gate_p_ema,
        };
        self.step += 1;
        Ok(stats)
    }
}

/// What to synthesize: tokens, optional timing track, optional acoustic
/// context covering the first `prompt_tokens` tokens, and the Euler schedule.
pub struct SampleSpec<'a> {
    pub tokens: &'a [u32],
    pub track: Option<&'a TimingTrack>,
    pub context: Option<&'a FeatureSeq>,
    pub prompt_tokens: usize,
    /// Target-region length for spontaneous mode.
    pub spontaneous_len: Option<usize>,
    pub euler_steps: usize,
    pub seed: u64,
}

/// Plan frame spans and the total length for a sampling request.
fn plan_sample_spans(spec: &SampleSpec) -> Result<(usize, SpanPlan), FlowError> {
    let n = spec.tokens.len();
    let context_len = spec.context.map(|c| c.frames()).unwrap_or(0);
    if spec.prompt_tokens > n {
        return Err(FlowError::InconsistentLength(format!(
            "prompt covers {} tokens but only {} exist",
            spec.prompt_tokens, n
        )));
    }
    if spec.context.is_none() && spec.prompt_tokens > 0 {
        return Err(FlowError::InconsistentLength(
            "prompt tokens given without context".into(),
        ));
    }
    let effective = spec.track.filter(|t| !t.fully_masked());
    match effective {
        Some(track) => {
            if track.len() != n {
                return Err(FlowError::InconsistentLength(format!(
                    "track has {} entries for {} tokens",
                    track.len(),
                    n
                )));
            }
            let prompt_span_sum: usize = track.timings[..spec.prompt_tokens]
                .iter()
                .map(|t| t.span_frames() as usize)
                .sum();
            let target_sum: usize = track.timings[spec.prompt_tokens..]
                .iter()
                .map(|t| t.span_frames() as usize)
                .sum();
            let total = context_len + target_sum;
            // prompt spans follow the track when they agree with the context
            // extent (full conditioning); otherwise distribute uniformly
            // (prompt-masked conditioning)
            let mut spans = if prompt_span_sum == context_len {
                let mut s = SpanPlan::new();
                let mut cursor = 0usize;
                for t in &track.timings[..spec.prompt_tokens] {
                    let len = t.span_frames() as usize;
                    s.push((cursor, len));
                    cursor += len;
                }
                s
            } else {
                uniform_spans(spec.prompt_tokens, context_len)
            };
            let mut cursor = context_len;
            for t in &track.timings[spec.prompt_tokens..] {
                let len = t.span_frames() as usize;
                spans.push((cursor, len));
                cursor += len;
            }
            Ok((total, spans))
        }
        None => {
            let target_len = spec.spontaneous_len.ok_or(FlowError::MissingLength)?;
            let total = context_len + target_len;
            let mut spans = uniform_spans(spec.prompt_tokens, context_len);
            for (start, len) in uniform_spans(n - spec.prompt_tokens, target_len) {
                spans.push((start + context_len, len));
            }
            Ok((total, spans))
        }
    }
}

/// Euler-integrate the learned field from noise: x_{k+1} = x_k + v/N.
pub fn sample(
    net: &GeneratorNet,
    cond: &TextCond,
    spec: &SampleSpec,
) -> Result<FeatureSeq, FlowError> {
    if spec.euler_steps == 0 {
        return Err(FlowError::NoSteps);
    }
    let (total, spans) = plan_sample_spans(spec)?;
    let channels = net.cfg.channels;
    if let Some(ctx) = spec.context {
        if ctx.channels() != channels {
            return Err(FlowError::ShapeMismatch {
                what: "sample context",
                a: (ctx.frames(), channels),
                b: (ctx.frames(), ctx.channels()),
            });
        }
    }

    let effective = spec.track.filter(|t| !t.fully_masked());
    let (h_tok, _) = cond.forward(spec.tokens, effective)?;
    let h = upsample_cond(&h_tok, &spans, total);

    let mut context = Array2::zeros((total, channels));
    if let Some(ctx) = spec.context {
        for j in 0..ctx.frames() {
            context.row_mut(j).assign(&ctx.data.row(j));
        }
    }

    let mut rng = stream(spec.seed, "sample-noise", 0);
    let mut x =
        Array2::from_shape_fn((total, channels), |_| rng.sample::<f64, _>(StandardNormal));
    let n = spec.euler_steps;
    for k in 0..n {
        let t = k as f64 / n as f64;
        let (v, _) = net.forward(&x, t, &h, &context, &spans)?;
        x += &(v / n as f64);
    }
    Ok(FeatureSeq::new(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::{CondConfig, TextCond};
    use crate::frame::FrameRate;
    use crate::rng::stream;
    use crate::track::{TimingTrack, TokenTiming};

    fn feat(rows: usize, cols: usize, seed: u64) -> FeatureSeq {
        let mut rng = stream(seed, "flow-test", 0);
        FeatureSeq::new(Array2::from_shape_fn((rows, cols), |_| {
            rng.gen_range(-2.0..2.0)
        }))
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = feat(4, 3, 1);
        let x1 = feat(4, 3, 2);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        let zero = FeatureSeq::zeros(4, 3);
        let scaled = interpolate(&zero, &x1, 0.3).unwrap();
        for (a, b) in scaled.data.iter().zip(x1.data.iter()) {
            assert!((a - 0.3 * b).abs() < 1e-15);
        }
        let mid = interpolate(&x0, &x1, 0.5).unwrap();
        for ((m, a), b) in mid.data.iter().zip(x0.data.iter()).zip(x1.data.iter()) {
            assert!((m - (a + b) / 2.0).abs() < 1e-15);
        }
        assert!(interpolate(&x0, &x1, 1.5).is_err());
        assert!(interpolate(&x0, &feat(5, 3, 3), 0.5).is_err());
    }

    #[test]
    fn target_flow_cases() {
        let x0 = feat(4, 3, 4);
        let x1 = feat(4, 3, 5);
        let u = target_flow(&x0, &x1).unwrap();
        for ((uv, a), b) in u.data.iter().zip(x0.data.iter()).zip(x1.data.iter()) {
            assert_eq!(*uv, b - a);
        }
        let same = target_flow(&x0, &x0).unwrap();
        assert!(same.data.iter().all(|&v| v == 0.0));
        let from_zero = target_flow(&FeatureSeq::zeros(4, 3), &x1).unwrap();
        assert_eq!(from_zero, x1);
    }

    #[test]
    fn interpolation_identity_holds() {
        // x_t + (1 - t) * u = x1
        let x0 = feat(6, 4, 6);
        let x1 = feat(6, 4, 7);
        for t in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let xt = interpolate(&x0, &x1, t).unwrap();
            let u = target_flow(&x0, &x1).unwrap();
            let recon = &xt.data + &(&u.data * (1.0 - t));
            for (r, b) in recon.iter().zip(x1.data.iter()) {
                assert!((r - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfm_loss_cases() {
        let u = feat(3, 2, 8);
        assert_eq!(
            cfm_loss(&u, &u, &AcousticMask::all(3)).unwrap(),
            CfmLoss {
                value: 0.0,
                empty_mask: false
            }
        );
        let zero_mask = AcousticMask(vec![false; 3]);
        let out = cfm_loss(&u, &feat(3, 2, 9), &zero_mask).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.empty_mask);
        // single masked frame with error (3, 4): sum-channel convention -> 25
        let pred = FeatureSeq::new(Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let target = FeatureSeq::zeros(2, 2);
        let mask = AcousticMask(vec![false, true]);
        assert_eq!(cfm_loss(&pred, &target, &mask).unwrap().value, 25.0);
    }

    #[test]
    fn span_plans() {
        let track = TimingTrack::new(
            vec![1, 2],
            vec![TokenTiming::new(5, 3), TokenTiming::new(4, 0)],
            FrameRate::default(),
        )
        .unwrap();
        assert_eq!(controlled_spans(&track), vec![(0, 8), (8, 4)]);
        assert_eq!(uniform_spans(3, 10), vec![(0, 3), (3, 3), (6, 4)]);
        assert_eq!(uniform_spans(0, 10), vec![]);
        let spans = uniform_spans(4, 2); // more tokens than frames
        assert_eq!(spans.iter().map(|s| s.1).sum::<usize>(), 2);
    }

    fn toy_setup(seed: u64) -> (GeneratorNet, TextCond) {
        let mut rng = stream(seed, "flow-setup", 0);
        let gen_cfg = GenConfig {
            channels: 3,
            width: 16,
            heads: 2,
            blocks: 2,
            time_dim: 8,
        };
        let net = GeneratorNet::new(gen_cfg, &mut rng);
        let cond = TextCond::new(CondConfig::toy(6, 16), &mut rng);
        (net, cond)
    }

    fn toy_item() -> (Vec<u32>, TimingTrack) {
        let track = TimingTrack::new(
            vec![1, 4, 2],
            vec![
                TokenTiming::new(3, 1),
                TokenTiming::new(4, 0),
                TokenTiming::new(2, 2),
            ],
            FrameRate::default(),
        )
        .unwrap();
        (vec![1, 4, 2], track)
    }

    #[test]
    fn sampling_is_deterministic_and_sized_by_track() {
        let (net, cond) = toy_setup(31);
        let (tokens, track) = toy_item();
        let spec = SampleSpec {
            tokens: &tokens,
            track: Some(&track),
            context: None,
            prompt_tokens: 0,
            spontaneous_len: None,
            euler_steps: 4,
            seed: 5,
        };
        let a = sample(&net, &cond, &spec).unwrap();
        let b = sample(&net, &cond, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames() as u64, track.total_span_frames());
        assert_eq!(a.channels(), 3);
    }

    #[test]
    fn single_euler_step_definition() {
        let (net, cond) = toy_setup(32);
        let (tokens, track) = toy_item();
        let spec = SampleSpec {
            tokens: &tokens,
            track: Some(&track),
            context: None,
            prompt_tokens: 0,
            spontaneous_len: None,
            euler_steps: 1,
            seed: 6,
        };
        let got = sample(&net, &cond, &spec).unwrap();

        // reproduce by hand: x0 + v(x0, 0)
        let total = track.total_span_frames() as usize;
        let spans = controlled_spans(&track);
        let (h_tok, _) = cond.forward(&tokens, Some(&track)).unwrap();
        let h = upsample_cond(&h_tok, &spans, total);
        let mut rng = stream(6, "sample-noise", 0);
        let x0 = Array2::from_shape_fn((total, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let ctx = Array2::zeros((total, 3));
        let (v, _) = net.forward(&x0, 0.0, &h, &ctx, &spans).unwrap();
        let want = &x0 + &v;
        for (a, b) in got.data.iter().zip(want.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn all_masked_track_samples_bit_identical_to_no_track() {
        let (net, cond) = toy_setup(33);
        let (tokens, _) = toy_item();
        let masked = TimingTrack::new(
            tokens.clone(),
            vec![TokenTiming::masked(); 3],
            FrameRate::default(),
        )
        .unwrap();
        let spec_masked = SampleSpec {
            tokens: &tokens,
            track: Some(&masked),
            context: None,
            prompt_tokens: 0,
            spontaneous_len: Some(12),
            euler_steps: 3,
            seed: 9,
        };
        let spec_none = SampleSpec {
            track: None,
            ..spec_masked
        };
        let a = sample(&net, &cond, &spec_masked).unwrap();
        let b = sample(&net, &cond, &spec_none).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn spontaneous_without_length_is_error() {
        let (net, cond) = toy_setup(34);
        let (tokens, _) = toy_item();
        let spec = SampleSpec {
            tokens: &tokens,
            track: None,
            context: None,
            prompt_tokens: 0,
            spontaneous_len: None,
            euler_steps: 2,
            seed: 1,
        };
        assert!(matches!(
            sample(&net, &cond, &spec),
            Err(FlowError::MissingLength)
        ));
    }

    fn render_fake(track: &TimingTrack, channels: usize, seed: u64) -> FeatureSeq {
        let mut rng = stream(seed, "fake-render", 0);
        let frames = track.total_span_frames() as usize;
        FeatureSeq::new(Array2::from_shape_fn((frames, channels), |_| {
            rng.gen_range(-1.0..1.0)
        }))
    }

    #[test]
    fn training_is_reproducible() {
        let (tokens, track) = toy_item();
        let features = render_fake(&track, 3, 77);
        let run = || {
            let (net, cond) = toy_setup(35);
            let mut trainer = Trainer::new(
                net,
                cond,
                TrainerConfig {
                    batch_size: 2,
                    warmup_steps: 5,
                    ..Default::default()
                },
            );
            let mut losses = Vec::new();
            for _ in 0..5 {
                let item = TrainItem {
                    utt_id: "u0",
                    tokens: &tokens,
                    track: &track,
                    features: &features,
                };
                let item2 = TrainItem {
                    utt_id: "u0",
                    tokens: &tokens,
                    track: &track,
                    features: &features,
                };
                let stats = trainer.train_step(&[item, item2]).unwrap();
                losses.push(stats.loss);
            }
            losses
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let mut rng = stream(40, "flow-grad", 0);
        let cfg = GenConfig {
            channels: 2,
            width: 8,
            heads: 2,
            blocks: 1,
            time_dim: 4,
        };
        let mut net = GeneratorNet::new(cfg, &mut rng);
        let frames = 5;
        let spans = vec![(0usize, 3usize), (3, 2)];
        let x_t = Array2::from_shape_fn((frames, 2), |_| rng.gen_range(-1.0..1.0));
        let h = Array2::from_shape_fn((frames, 8), |_| rng.gen_range(-1.0..1.0));
        let ctx = Array2::from_shape_fn((frames, 2), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((frames, 2), |_| rng.gen_range(-1.0..1.0));
        let t = 0.37;

        let loss_of = |n: &GeneratorNet| {
            let (out, _) = n.forward(&x_t, t, &h, &ctx, &spans).unwrap();
            (&out - &target).mapv(|v| v * v).sum()
        };

        let (out, cache) = net.forward(&x_t, t, &h, &ctx, &spans).unwrap();
        let dout = (&out - &target).mapv(|v| 2.0 * v);
        net.backward(&cache, &dout);

        let mut params = Vec::new();
        net.collect(&mut params);
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.g.clone()).collect();
        let n_params = params.len();
        let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
        drop(params);

        let eps = 1e-5;
        for pi in 0..n_params {
            let stride = (lens[pi] / 5).max(1);
            for i in (0..lens[pi]).step_by(stride) {
                let tweak = |n: &mut GeneratorNet, v: Option<f64>| -> f64 {
                    let mut params = Vec::new();
                    n.collect(&mut params);
                    let old = params[pi].v[i];
                    if let Some(v) = v {
                        params[pi].v[i] = v;
                    }
                    old
                };
                let orig = tweak(&mut net, None);
                tweak(&mut net, Some(orig + eps));
                let up = loss_of(&net);
                tweak(&mut net, Some(orig - eps));
                let down = loss_of(&net);
                tweak(&mut net, Some(orig));
                let numeric = (up - down) / (2.0 * eps);
                let got = analytic[pi][i];
                let denom = numeric.abs().max(got.abs()).max(1e-8);
                assert!(
                    (numeric - got).abs() / denom < 1e-4,
                    "param {pi} idx {i}: numeric {numeric} vs analytic {got}"
                );
            }
        }
    }
}
