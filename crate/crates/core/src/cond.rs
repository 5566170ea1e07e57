//! Timing conditioning: two lightweight feed-forward encoders (content
//! duration and pause) with zero-value correction, availability masking, and
//! learnable scalar gates. The residuals are added to token embeddings, so a
//! zero or unavailable timing value contributes exactly nothing, and
//! zero-initialized gates leave the embedding sequence bit-identical to the
//! unconditioned one.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{log_compress, LogScale};
use crate::nn::{tanh_bwd, tanh_fwd, Linear, Param};
use crate::track::TimingTrack;

#[derive(Debug, Error)]
pub enum CondError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("track has {track} timings but {tokens} tokens were given")]
    TrackLengthMismatch { tokens: usize, track: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },
}

/// Two-layer feed-forward map R^1 -> R^H -> R^E with tanh in between.
#[derive(Debug, Clone)]
pub struct TimingEncoder {
    pub l1: Linear,
    pub l2: Linear,
}

pub struct EncoderCache {
    z: Array2<f64>,
    h: Array2<f64>,
}

impl TimingEncoder {
    pub fn new(name: &str, hidden: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        TimingEncoder {
            l1: Linear::new(&format!("{name}.l1"), 1, hidden, rng),
            l2: Linear::new(&format!("{name}.l2"), hidden, embed_dim, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.l2.w.shape[1]
    }

    /// Batched forward over a column of scalar inputs.
    pub fn fwd(&self, z: &Array2<f64>) -> (Array2<f64>, EncoderCache) {
        let h = tanh_fwd(&self.l1.fwd(z));
        let out = self.l2.fwd(&h);
        (
            out,
            EncoderCache {
                z: z.clone(),
                h,
            },
        )
    }

    pub fn bwd(&mut self, cache: &EncoderCache, dout: &Array2<f64>) {
        let dh = self.l2.bwd(&cache.h, dout);
        let dpre = tanh_bwd(&cache.h, &dh);
        self.l1.bwd(&cache.z, &dpre);
    }

    /// Single-value forward, the op-level entry point.
    pub fn forward_scalar(&self, z: f64) -> Vec<f64> {
        let input = Array2::from_shape_vec((1, 1), vec![z]).unwrap();
        let (out, _) = self.fwd(&input);
        out.row(0).to_vec()
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.l1.collect(out);
        self.l2.collect(out);
    }
}

/// The learnable per-branch gates, initialized to exactly 0.
#[derive(Debug, Clone)]
pub struct GatePair {
    pub alpha_d: Param,
    pub alpha_p: Param,
}

impl GatePair {
    pub fn new() -> Self {
        GatePair {
            alpha_d: Param::zeros("gates.alpha_d", vec![1]),
            alpha_p: Param::zeros("gates.alpha_p", vec![1]),
        }
    }

    pub fn alpha_d(&self) -> f64 {
        self.alpha_d.v[0]
    }

    pub fn alpha_p(&self) -> f64 {
        self.alpha_p.v[0]
    }
}

impl Default for GatePair {
    fn default() -> Self {
        Self::new()
    }
}

/// m * (enc(log(1 + s*v)) - enc(0)): exactly the zero vector when v = 0 or
/// the mask is off, for any encoder parameters.
pub fn timing_residual(
    v: u32,
    mask: bool,
    enc: &TimingEncoder,
    scale: LogScale,
) -> Result<Vec<f64>, CondError> {
    if !mask {
        return Ok(vec![0.0; enc.embed_dim()]);
    }
    let at_v = enc.forward_scalar(log_compress(v, scale));
    let at_zero = enc.forward_scalar(0.0);
    let res: Vec<f64> = at_v.iter().zip(&at_zero).map(|(a, b)| a - b).collect();
    if res.iter().any(|x| !x.is_finite()) {
        return Err(CondError::NonFinite("timing residual"));
    }
    Ok(res)
}

/// e + alpha_d * d_res + alpha_p * p_res.
pub fn inject(
    e: &[f64],
    d_res: &[f64],
    p_res: &[f64],
    gates: &GatePair,
) -> Result<Vec<f64>, CondError> {
    if d_res.len() != e.len() || p_res.len() != e.len() {
        return Err(CondError::DimMismatch {
            expected: e.len(),
            got: if d_res.len() != e.len() {
                d_res.len()
            } else {
                p_res.len()
            },
        });
    }
    let (ad, ap) = (gates.alpha_d(), gates.alpha_p());
    Ok(e.iter()
        .zip(d_res.iter().zip(p_res))
        .map(|(ev, (dv, pv))| ev + ad * dv + ap * pv)
        .collect())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CondConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub scale_d: LogScale,
    pub scale_p: LogScale,
}

impl CondConfig {
    pub fn toy(vocab: usize, embed_dim: usize) -> Self {
        CondConfig {
            vocab,
            embed_dim,
            hidden: 64,
            scale_d: LogScale::default(),
            scale_p: LogScale::default(),
        }
    }
}

/// Token embedding table plus the two gated timing branches; produces the
/// text-side conditioning sequence consumed by the generator.
#[derive(Debug, Clone)]
pub struct TextCond {
    pub cfg: CondConfig,
    pub embed: Param,
    pub enc_d: TimingEncoder,
    pub enc_p: TimingEncoder,
    pub gates: GatePair,
}

pub struct CondCache {
    tokens: Vec<u32>,
    timed: bool,
    d_mask: Vec<f64>,
    p_mask: Vec<f64>,
    enc_d_v: Option<EncoderCache>,
    enc_d_0: Option<EncoderCache>,
    enc_p_v: Option<EncoderCache>,
    enc_p_0: Option<EncoderCache>,
    d_res: Option<Array2<f64>>,
    p_res: Option<Array2<f64>>,
}

impl TextCond {
    pub fn new(cfg: CondConfig, rng: &mut impl Rng) -> Self {
        TextCond {
            cfg,
            embed: Param::matrix("embed", cfg.vocab, cfg.embed_dim, rng),
            enc_d: TimingEncoder::new("enc_d", cfg.hidden, cfg.embed_dim, rng),
            enc_p: TimingEncoder::new("enc_p", cfg.hidden, cfg.embed_dim, rng),
            gates: GatePair::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut clone = self.clone();
        let mut params = Vec::new();
        clone.collect(&mut params);
        params.iter().map(|p| p.len()).sum()
    }

    fn gather(&self, tokens: &[u32]) -> Result<Array2<f64>, CondError> {
        let e_dim = self.cfg.embed_dim;
        let mut e = Array2::zeros((tokens.len(), e_dim));
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.cfg.vocab {
                return Err(CondError::UnknownToken {
                    id: tok,
                    vocab: self.cfg.vocab,
                });
            }
            let row = &self.embed.v[tok as usize * e_dim..(tok as usize + 1) * e_dim];
            e.row_mut(i).assign(&ndarray::ArrayView1::from(row));
        }
        Ok(e)
    }

    /// Conditioned embedding sequence for one utterance. `track: None` (or a
    /// fully masked track) yields the plain embeddings bit-for-bit.
    pub fn forward(
        &self,
        tokens: &[u32],
        track: Option<&TimingTrack>,
    ) -> Result<(Array2<f64>, CondCache), CondError> {
        let e = self.gather(tokens)?;
        let n = tokens.len();
        let Some(track) = track else {
            return Ok((
                e,
                CondCache {
                    tokens: tokens.to_vec(),
                    timed: false,
                    d_mask: vec![],
                    p_mask: vec![],
                    enc_d_v: None,
                    enc_d_0: None,
                    enc_p_v: None,
                    enc_p_0: None,
                    d_res: None,
                    p_res: None,
                },
            ));
        };
        if track.len() != n {
            return Err(CondError::TrackLengthMismatch {
                tokens: n,
                track: track.len(),
            });
        }

        let z_d = Array2::from_shape_fn((n, 1), |(i, _)| {
            log_compress(track.timings[i].content_frames, self.cfg.scale_d)
        });
        let z_p = Array2::from_shape_fn((n, 1), |(i, _)| {
            log_compress(track.timings[i].pause_frames, self.cfg.scale_p)
        });
        let zero = Array2::zeros((1, 1));
        let d_mask: Vec<f64> = track
            .timings
            .iter()
            .map(|t| t.content_mask as u8 as f64)
            .collect();
        let p_mask: Vec<f64> = track
            .timings
            .iter()
            .map(|t| t.pause_mask as u8 as f64)
            .collect();

        let (out_d, cache_d) = self.enc_d.fwd(&z_d);
        let (out_d0, cache_d0) = self.enc_d.fwd(&zero);
        let (out_p, cache_p) = self.enc_p.fwd(&z_p);
        let (out_p0, cache_p0) = self.enc_p.fwd(&zero);

        let mut d_res = out_d;
        let mut p_res = out_p;
        for i in 0..n {
            let base_d = out_d0.row(0);
            let base_p = out_p0.row(0);
            let mut dr = d_res.row_mut(i);
            dr -= &base_d;
            dr *= d_mask[i];
            let mut pr = p_res.row_mut(i);
            pr -= &base_p;
            pr *= p_mask[i];
        }
        if d_res.iter().any(|x| !x.is_finite()) || p_res.iter().any(|x| !x.is_finite()) {
            return Err(CondError::NonFinite("timing residual"));
        }

        let (ad, ap) = (self.gates.alpha_d(), self.gates.alpha_p());
        let out = &e + &(&d_res * ad) + &(&p_res * ap);
        Ok((
            out,
            CondCache {
                tokens: tokens.to_vec(),
                timed: true,
                d_mask,
                p_mask,
                enc_d_v: Some(cache_d),
                enc_d_0: Some(cache_d0),
                enc_p_v: Some(cache_p),
                enc_p_0: Some(cache_p0),
                d_res: Some(d_res),
                p_res: Some(p_res),
            },
        ))
    }

    /// Accumulate gradients from the upstream embedding gradient.
    pub fn backward(&mut self, cache: &CondCache, de: &Array2<f64>) {
        let e_dim = self.cfg.embed_dim;
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let base = tok as usize * e_dim;
            for j in 0..e_dim {
                self.embed.g[base + j] += de[[i, j]];
            }
        }
        if !cache.timed {
            return;
        }
        let d_res = cache.d_res.as_ref().unwrap();
        let p_res = cache.p_res.as_ref().unwrap();

        // gate gradients: <upstream, residual>
        self.gates.alpha_d.g[0] += (de * d_res).sum();
        self.gates.alpha_p.g[0] += (de * p_res).sum();

        let (ad, ap) = (self.gates.alpha_d(), self.gates.alpha_p());

        // masked upstream into each encoder at its timing inputs, and the
        // negated sum at the zero anchor
        let mut up_d = de * ad;
        for (i, m) in cache.d_mask.iter().enumerate() {
            let mut row = up_d.row_mut(i);
            row *= *m;
        }
        let neg_d = up_d.sum_axis(Axis(0)).insert_axis(Axis(0)) * -1.0;
        self.enc_d.bwd(cache.enc_d_v.as_ref().unwrap(), &up_d);
        self.enc_d.bwd(cache.enc_d_0.as_ref().unwrap(), &neg_d);

        let mut up_p = de * ap;
        for (i, m) in cache.p_mask.iter().enumerate() {
            let mut row = up_p.row_mut(i);
            row *= *m;
        }
        let neg_p = up_p.sum_axis(Axis(0)).insert_axis(Axis(0)) * -1.0;
        self.enc_p.bwd(cache.enc_p_v.as_ref().unwrap(), &up_p);
        self.enc_p.bwd(cache.enc_p_0.as_ref().unwrap(), &neg_p);
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.embed);
        self.enc_d.collect(out);
        self.enc_p.collect(out);
        out.push(&mut self.gates.alpha_d);
        out.push(&mut self.gates.alpha_p);
    }
}

/// Exponential moving average of the absolute gate values, convention
/// new = smoothing * prev + (1 - smoothing) * current; the first update
/// seeds the average.
#[derive(Debug, Clone)]
pub struct GateTelemetry {
    pub smoothing: f64,
    ema_d: Option<f64>,
    ema_p: Option<f64>,
    last_step: Option<u64>,
}

impl GateTelemetry {
    pub fn new(smoothing: f64) -> Self {
        assert!((0.0..1.0).contains(&smoothing));
        GateTelemetry {
            smoothing,
            ema_d: None,
            ema_p: None,
            last_step: None,
        }
    }

    pub fn update(&mut self, step: u64, gates: &GatePair) -> (f64, f64) {
        if let Some(last) = self.last_step {
            debug_assert!(step > last, "telemetry steps must increase");
        }
        self.last_step = Some(step);
        let lam = self.smoothing;
        let blend = |prev: Option<f64>, cur: f64| match prev {
            Some(p) => lam * p + (1.0 - lam) * cur,
            None => cur,
        };
        let d = blend(self.ema_d, gates.alpha_d().abs());
        let p = blend(self.ema_p, gates.alpha_p().abs());
        self.ema_d = Some(d);
        self.ema_p = Some(p);
        (d, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FrameRate;
    use crate::rng::stream;
    use crate::track::TokenTiming;

    fn encoder(seed: u64) -> TimingEncoder {
        let mut rng = stream(seed, "cond-test", 0);
        TimingEncoder::new("enc", 8, 6, &mut rng)
    }

    #[test]
    fn residual_is_exactly_zero_at_zero_or_masked() {
        for seed in 0..50 {
            let enc = encoder(seed);
            let zero = timing_residual(0, true, &enc, LogScale::default()).unwrap();
            assert!(zero.iter().all(|&x| x == 0.0));
            let masked = timing_residual(37, false, &enc, LogScale::default()).unwrap();
            assert!(masked.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn residual_matches_reference_forward() {
        let enc = encoder(3);
        let s = LogScale::default();
        let got = timing_residual(37, true, &enc, s).unwrap();

        // independent naive forward pass
        let z = (1.0 + 37.0f64).ln();
        let naive = |z: f64| -> Vec<f64> {
            let hidden = enc.l1.w.shape[1];
            let e = enc.l2.w.shape[1];
            let b1 = enc.l1.b.as_ref().unwrap();
            let b2 = enc.l2.b.as_ref().unwrap();
            let mut h = vec![0.0; hidden];
            for j in 0..hidden {
                h[j] = (enc.l1.w.v[j] * z + b1.v[j]).tanh();
            }
            let mut out = vec![0.0; e];
            for j in 0..e {
                for k in 0..hidden {
                    out[j] += h[k] * enc.l2.w.v[k * e + j];
                }
                out[j] += b2.v[j];
            }
            out
        };
        let want: Vec<f64> = naive(z)
            .iter()
            .zip(naive(0.0))
            .map(|(a, b)| a - b)
            .collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn inject_cases() {
        let gates = GatePair::new();
        let e = vec![1.0, -2.0, 3.0];
        let r = vec![0.5, 0.5, 0.5];
        // zero gates: identity, bit for bit
        let out = inject(&e, &r, &r, &gates).unwrap();
        for (a, b) in out.iter().zip(&e) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // zero residuals: identity
        let z = vec![0.0; 3];
        let mut unit = GatePair::new();
        unit.alpha_d.v[0] = 1.0;
        let out = inject(&e, &z, &z, &unit).unwrap();
        assert_eq!(out, e);
        // unit content gate adds the residual
        let out = inject(&e, &r, &z, &unit).unwrap();
        assert_eq!(out, vec![1.5, -1.5, 3.5]);
        // dimension mismatch
        assert!(inject(&e, &r[..2], &z, &unit).is_err());
    }

    fn toy_track(timings: Vec<TokenTiming>) -> TimingTrack {
        let tokens = (0..timings.len() as u32).collect();
        TimingTrack::new(tokens, timings, FrameRate::default()).unwrap()
    }

    #[test]
    fn all_masked_track_equals_no_track_bitwise() {
        let mut rng = stream(9, "cond-test", 1);
        let mut cond = TextCond::new(CondConfig::toy(8, 12), &mut rng);
        // make the gates nonzero so masking is doing the work
        cond.gates.alpha_d.v[0] = -0.7;
        cond.gates.alpha_p.v[0] = 0.3;
        let tokens = [0, 3, 5];
        let masked = toy_track(vec![TokenTiming::masked(); 3]);
        let (with_track, _) = cond.forward(&tokens, Some(&masked)).unwrap();
        let (without, _) = cond.forward(&tokens, None).unwrap();
        for (a, b) in with_track.iter().zip(without.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_gates_condition_is_identity_bitwise() {
        let mut rng = stream(10, "cond-test", 2);
        let cond = TextCond::new(CondConfig::toy(8, 12), &mut rng);
        let tokens = [1, 2, 7];
        let track = toy_track(vec![
            TokenTiming::new(5, 0),
            TokenTiming::new(9, 3),
            TokenTiming::new(2, 1),
        ]);
        let (conditioned, _) = cond.forward(&tokens, Some(&track)).unwrap();
        let (plain, _) = cond.forward(&tokens, None).unwrap();
        for (a, b) in conditioned.iter().zip(plain.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn track_length_mismatch_is_error() {
        let mut rng = stream(10, "cond-test", 3);
        let cond = TextCond::new(CondConfig::toy(8, 12), &mut rng);
        let track = toy_track(vec![TokenTiming::new(5, 0)]);
        assert!(matches!(
            cond.forward(&[1, 2], Some(&track)),
            Err(CondError::TrackLengthMismatch { .. })
        ));
    }

    #[test]
    fn unknown_token_is_error() {
        let mut rng = stream(10, "cond-test", 4);
        let cond = TextCond::new(CondConfig::toy(8, 12), &mut rng);
        assert!(matches!(
            cond.forward(&[99], None),
            Err(CondError::UnknownToken { id: 99, .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(20, "cond-test", 5);
        let mut cond = TextCond::new(CondConfig::toy(6, 5), &mut rng);
        cond.gates.alpha_d.v[0] = 0.4; // off the init point so residual grads flow
        cond.gates.alpha_p.v[0] = -0.2;
        let tokens = [0, 2, 4, 2];
        let track = toy_track(vec![
            TokenTiming::new(5, 2),
            TokenTiming::new(0, 0),
            TokenTiming {
                content_frames: 7,
                pause_frames: 0,
                content_mask: true,
                pause_mask: false,
            },
            TokenTiming::new(3, 9),
        ]);
        let target = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |c: &TextCond| {
            let (out, _) = c.forward(&tokens, Some(&track)).unwrap();
            (&out - &target).mapv(|v| v * v).sum()
        };

        let (out, cache) = cond.forward(&tokens, Some(&track)).unwrap();
        let dout = (&out - &target).mapv(|v| 2.0 * v);
        cond.backward(&cache, &dout);

        let mut params = Vec::new();
        cond.collect(&mut params);
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.g.clone()).collect();
        let n_params = params.len();
        let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
        drop(params);

        let eps = 1e-5;
        for pi in 0..n_params {
            for i in 0..lens[pi] {
                let read = |c: &mut TextCond, v: Option<f64>| -> f64 {
                    let mut params = Vec::new();
                    c.collect(&mut params);
                    let old = params[pi].v[i];
                    if let Some(v) = v {
                        params[pi].v[i] = v;
                    }
                    old
                };
                let orig = read(&mut cond, None);
                read(&mut cond, Some(orig + eps));
                let up = loss_of(&cond);
                read(&mut cond, Some(orig - eps));
                let down = loss_of(&cond);
                read(&mut cond, Some(orig));
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

    #[test]
    fn gate_gradient_is_inner_product() {
        let mut rng = stream(21, "cond-test", 6);
        let mut cond = TextCond::new(CondConfig::toy(4, 3), &mut rng);
        let tokens = [1];
        let track = toy_track(vec![TokenTiming::new(6, 0)]);
        let (out, cache) = cond.forward(&tokens, Some(&track)).unwrap();
        let upstream = Array2::from_shape_fn(out.raw_dim(), |(_, j)| (j + 1) as f64);
        cond.backward(&cache, &upstream);
        let d_res = cache.d_res.as_ref().unwrap();
        let want: f64 = (&upstream * d_res).sum();
        assert!((cond.gates.alpha_d.g[0] - want).abs() < 1e-12);
        // at v=0 residual is zero, so the pause gate gets no gradient
        assert_eq!(cond.gates.alpha_p.g[0], 0.0);
    }

    #[test]
    fn telemetry_convention() {
        let mut gates = GatePair::new();
        let mut tele = GateTelemetry::new(0.6);
        gates.alpha_d.v[0] = 0.02;
        let (d1, _) = tele.update(1, &gates);
        assert!((d1 - 0.02).abs() < 1e-15);
        gates.alpha_d.v[0] = -0.03; // sign ignored
        let (d2, _) = tele.update(2, &gates);
        assert!((d2 - 0.024).abs() < 1e-15, "got {d2}");
        // constant input converges to its absolute value
        let mut tele = GateTelemetry::new(0.6);
        gates.alpha_d.v[0] = -0.5;
        let mut last = 0.0;
        for s in 0..200 {
            last = tele.update(s, &gates).0;
        }
        assert!((last - 0.5).abs() < 1e-12);
    }
}
