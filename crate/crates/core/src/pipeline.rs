//! End-to-end glue shared by the CLI and the test suites: the training loop,
//! checkpointing, the two-mode timing evaluation protocol, and the editing
//! benchmarks.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{CheckpointError, TensorStore};
use crate::cond::{CondConfig, CondError, TextCond};
use crate::edit::{
    apply_edit, scenario_suite, EditError, ScenarioCase, StressCase, StressConfig,
    SCENARIO_CONTENT_MS,
};
use crate::eval::{
    baseline_bias, content_intervals, content_mae, edit_boundaries, pause_f1, pause_mae,
    strict_filter, timing_corr, BiasRow, Correlation, EditCase, EditKind, EvalError, PauseF1,
    TimingComparison, TokenComparison,
};
use crate::flow::{
    sample, FeatureSeq, FlowError, GenConfig, GeneratorNet, SampleSpec, StepStats, TrainItem,
    Trainer, TrainerConfig,
};
use crate::frame::frames_to_ms;
use crate::build::mask_prompt_region;
use crate::track::TimingTrack;
use crate::world::{
    oracle_align, render_seed, AlignmentFailure, LoadedUtt, Split, TokenSignatures, WorldConfig,
    WorldError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Cond(#[from] CondError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint meta: {0}")]
    Meta(String),
    #[error("corpus has no {0} split")]
    MissingSplit(&'static str),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Derive a per-utterance sampling seed from the run seed.
fn utt_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Run `steps` optimizer steps over the train split, reporting per-step stats.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[LoadedUtt],
    steps: u64,
    mut on_step: impl FnMut(&StepStats),
) -> Result<(), PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::MissingSplit("train"));
    }
    for _ in 0..steps {
        let idxs = trainer.draw_batch(train.len());
        let batch: Vec<TrainItem> = idxs
            .iter()
            .map(|&i| {
                let u = &train[i];
                TrainItem {
                    utt_id: &u.utt_id,
                    tokens: &u.tokens,
                    track: &u.track,
                    features: &u.features,
                }
            })
            .collect();
        let stats = trainer.train_step(&batch)?;
        on_step(&stats);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

fn pack_params(store: &mut TensorStore, trainer: &mut Trainer) {
    let mut params = Vec::new();
    trainer.net.collect(&mut params);
    trainer.cond.collect(&mut params);
    for p in params {
        store.push(p.name.clone(), p.shape.clone(), p.v.clone());
        store.push(format!("opt.{}", p.name), p.shape.clone(), p.m.clone());
    }
}

/// Serialize the full trainable state plus configs into one container.
pub fn checkpoint_of(trainer: &mut Trainer, world: &WorldConfig) -> Result<TensorStore, PipelineError> {
    let mut store = TensorStore::new();
    store.set_meta("gen_config", &serde_json::to_string(&trainer.net.cfg)?);
    store.set_meta("cond_config", &serde_json::to_string(&trainer.cond.cfg)?);
    store.set_meta("trainer_config", &serde_json::to_string(&trainer.cfg)?);
    store.set_meta("world", &serde_json::to_string(world)?);
    store.set_meta("step", &trainer.step.to_string());
    pack_params(&mut store, trainer);
    Ok(store)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    trainer: &mut Trainer,
    world: &WorldConfig,
) -> Result<(), PipelineError> {
    checkpoint_of(trainer, world)?.save(path)?;
    Ok(())
}

/// Rebuild a trainer (model + optimizer state + step counter) from a store.
pub fn load_checkpoint_store(store: &TensorStore) -> Result<(Trainer, WorldConfig), PipelineError> {
    let meta = |key: &str| -> Result<&str, PipelineError> {
        store
            .meta(key)
            .ok_or_else(|| PipelineError::Meta(format!("missing {key}")))
    };
    let gen_cfg: GenConfig = serde_json::from_str(meta("gen_config")?)?;
    let cond_cfg: CondConfig = serde_json::from_str(meta("cond_config")?)?;
    let trainer_cfg: TrainerConfig = serde_json::from_str(meta("trainer_config")?)?;
    let world: WorldConfig = serde_json::from_str(meta("world")?)?;
    let step: u64 = meta("step")?
        .parse()
        .map_err(|_| PipelineError::Meta("bad step".into()))?;

    let mut rng = crate::rng::stream(0, "checkpoint-init", 0);
    let net = GeneratorNet::new(gen_cfg, &mut rng);
    let cond = TextCond::new(cond_cfg, &mut rng);
    let mut trainer = Trainer::new(net, cond, trainer_cfg);
    trainer.step = step;

    let mut params = Vec::new();
    trainer.net.collect(&mut params);
    trainer.cond.collect(&mut params);
    for p in params {
        let t = store.get_shaped(&p.name, &p.shape)?;
        p.v.copy_from_slice(&t.data);
        let m = store.get_shaped(&format!("opt.{}", p.name), &p.shape)?;
        p.m.copy_from_slice(&m.data);
        p.g.fill(0.0);
    }
    Ok((trainer, world))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Trainer, WorldConfig), PipelineError> {
    let store = TensorStore::load(path)?;
    load_checkpoint_store(&store)
}

// ---------------------------------------------------------------------------
// evaluation protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Controlled,
    Spontaneous,
}

impl Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Mode::Controlled => "controlled",
            Mode::Spontaneous => "spontaneous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondFormat {
    Full,
    TargetOnly,
}

impl CondFormat {
    pub fn tag(&self) -> &'static str {
        match self {
            CondFormat::Full => "full",
            CondFormat::TargetOnly => "target_only",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub mode: Mode,
    pub format: CondFormat,
    pub euler_steps: usize,
    pub seed: u64,
    pub thresholds_ms: Vec<f64>,
    /// Fraction of tokens whose ground-truth features act as the acoustic
    /// prompt; scoring covers the remaining target-side tokens.
    pub prompt_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: Mode::Controlled,
            format: CondFormat::Full,
            euler_steps: 16,
            seed: 7,
            thresholds_ms: vec![50.0, 100.0],
            prompt_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mode: String,
    pub format: String,
    pub total_utts: usize,
    pub scored_utts: usize,
    pub alignment_failures: usize,
    pub c_mae_ms: Option<f64>,
    pub p_mae_ms: Option<f64>,
    pub c_corr: Correlation,
    pub p_corr: Correlation,
    pub f1: Vec<(f64, PauseF1)>,
    /// Resolved-config echo, emitted into every report header.
    pub header: Vec<(String, String)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "NA".into(),
    }
}

fn fmt_corr(c: &Correlation) -> String {
    match c {
        Correlation::Value(v) => format!("{v:.4}"),
        Correlation::Undefined => "undefined".into(),
    }
}

impl EvalReport {
    /// Stable machine-readable lines; byte-identical across same-seed runs.
    pub fn render_machine(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            writeln!(out, "#{k}={v}").unwrap();
        }
        writeln!(out, "mode\t{}", self.mode).unwrap();
        writeln!(out, "cond_format\t{}", self.format).unwrap();
        writeln!(out, "utterances\t{}", self.total_utts).unwrap();
        writeln!(out, "scored\t{}", self.scored_utts).unwrap();
        writeln!(out, "alignment_failures\t{}", self.alignment_failures).unwrap();
        writeln!(out, "c_mae_ms\t{}", fmt_opt(self.c_mae_ms)).unwrap();
        writeln!(out, "p_mae_ms\t{}", fmt_opt(self.p_mae_ms)).unwrap();
        writeln!(out, "c_corr\t{}", fmt_corr(&self.c_corr)).unwrap();
        writeln!(out, "p_corr\t{}", fmt_corr(&self.p_corr)).unwrap();
        for (tau, f1) in &self.f1 {
            writeln!(
                out,
                "f1@{tau:.2}\t{:.4}\tprecision\t{:.4}\trecall\t{:.4}\tdegenerate\t{}",
                f1.f1, f1.precision, f1.recall, f1.degenerate
            )
            .unwrap();
        }
        out
    }

    pub fn render_human(&self) -> String {
        let mut out = String::new();
        writeln!(out, "timing control — mode {} / conditioning {}", self.mode, self.format).unwrap();
        writeln!(
            out,
            "  utterances {} scored {} (alignment failures {})",
            self.total_utts, self.scored_utts, self.alignment_failures
        )
        .unwrap();
        writeln!(
            out,
            "  C-MAE {} ms  P-MAE {} ms  C-Corr {}  P-Corr {}",
            fmt_opt(self.c_mae_ms),
            fmt_opt(self.p_mae_ms),
            fmt_corr(&self.c_corr),
            fmt_corr(&self.p_corr)
        )
        .unwrap();
        for (tau, f1) in &self.f1 {
            writeln!(out, "  F1@{tau:.0}ms {:.4}{}", f1.f1, if f1.degenerate { " (degenerate)" } else { "" }).unwrap();
        }
        out
    }
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub comparisons: Vec<TimingComparison>,
}

/// Synthesize every test utterance under the requested mode/format, align
/// the result with the oracle, and compare target-side token timings.
pub fn evaluate(
    net: &GeneratorNet,
    cond: &TextCond,
    world: &WorldConfig,
    sigs: &TokenSignatures,
    test: &[LoadedUtt],
    opts: &EvalOptions,
) -> Result<EvalOutcome, PipelineError> {
    if test.is_empty() {
        return Err(PipelineError::MissingSplit("test"));
    }
    let rate = world.frame_rate();
    let mut comparisons = Vec::with_capacity(test.len());
    for (idx, utt) in test.iter().enumerate() {
        let n = utt.tokens.len();
        let prompt = ((n as f64 * opts.prompt_fraction).floor() as usize).clamp(1, n - 1);
        let prompt_frames: usize = utt.track.timings[..prompt]
            .iter()
            .map(|t| t.span_frames() as usize)
            .sum();
        let context = FeatureSeq::new(
            utt.features
                .data
                .slice(ndarray::s![..prompt_frames, ..])
                .to_owned(),
        );
        let target_frames = utt.features.frames() - prompt_frames;

        let masked_track;
        let track_arg: Option<&TimingTrack> = match opts.mode {
            Mode::Spontaneous => None,
            Mode::Controlled => match opts.format {
                CondFormat::Full => Some(&utt.track),
                CondFormat::TargetOnly => {
                    masked_track = mask_prompt_region(&utt.track, prompt)
                        .expect("prompt bounds checked");
                    Some(&masked_track)
                }
            },
        };

        let spec = SampleSpec {
            tokens: &utt.tokens,
            track: track_arg,
            context: Some(&context),
            prompt_tokens: prompt,
            spontaneous_len: Some(target_frames),
            euler_steps: opts.euler_steps,
            seed: utt_seed(opts.seed, idx),
        };
        let mut out = sample(net, cond, &spec)?;
        // the prompt region is given, not generated: stitch it back so the
        // aligner sees the true context
        for j in 0..prompt_frames {
            out.data.row_mut(j).assign(&utt.features.data.row(j));
        }

        match oracle_align(&out, &utt.tokens, sigs, world) {
            Ok(al) => {
                let tokens: Vec<TokenComparison> = (prompt..n)
                    .map(|i| TokenComparison {
                        target_d_ms: frames_to_ms(utt.track.timings[i].content_frames, rate),
                        realized_d_ms: frames_to_ms(al.track.timings[i].content_frames, rate),
                        target_p_ms: frames_to_ms(utt.track.timings[i].pause_frames, rate),
                        realized_p_ms: frames_to_ms(al.track.timings[i].pause_frames, rate),
                    })
                    .collect();
                comparisons.push(TimingComparison {
                    utterance_id: utt.utt_id.clone(),
                    alignment_ok: true,
                    tokens,
                });
            }
            Err(AlignmentFailure::NoTokens) | Err(_) => {
                comparisons.push(TimingComparison {
                    utterance_id: utt.utt_id.clone(),
                    alignment_ok: false,
                    tokens: vec![],
                });
            }
        }
    }

    let failures = comparisons.iter().filter(|c| !c.alignment_ok).count();
    let scored = comparisons.len() - failures;
    let c_mae_ms = content_mae(&comparisons).ok();
    let p_mae_ms = pause_mae(&comparisons).ok();
    let (c_corr, p_corr) = timing_corr(&comparisons);
    let f1 = opts
        .thresholds_ms
        .iter()
        .map(|&tau| (tau, pause_f1(&comparisons, tau)))
        .collect();

    let header = vec![
        ("mode".into(), opts.mode.tag().into()),
        ("cond_format".into(), opts.format.tag().into()),
        ("euler_steps".into(), opts.euler_steps.to_string()),
        ("seed".into(), opts.seed.to_string()),
        (
            "thresholds_ms".into(),
            opts.thresholds_ms
                .iter()
                .map(|t| format!("{t}"))
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("prompt_fraction".into(), format!("{}", opts.prompt_fraction)),
        ("pooling".into(), "pooled-tokens".into()),
        ("fps".into(), format!("{}", world.fps)),
    ];

    Ok(EvalOutcome {
        report: EvalReport {
            mode: opts.mode.tag().into(),
            format: opts.format.tag().into(),
            total_utts: test.len(),
            scored_utts: scored,
            alignment_failures: failures,
            c_mae_ms,
            p_mae_ms,
            c_corr,
            p_corr,
            f1,
            header,
        },
        comparisons,
    })
}

// ---------------------------------------------------------------------------
// scenario benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub euler_steps: usize,
    pub seed: u64,
    pub strict: bool,
    pub strict_tolerance_ms: f64,
    /// Cap on stress utterances (0 = all).
    pub max_utts: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            euler_steps: 16,
            seed: 7,
            strict: true,
            strict_tolerance_ms: 0.0,
            max_utts: 0,
        }
    }
}

/// Scenario-suite summary statistics used by the acceptance gate.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioFidelity {
    /// Mean |realized - 170 ms| over baseline content tokens.
    pub baseline_content_dev_ms: f64,
    /// Mean realized duration at edited positions (content edits), ms.
    pub edited_content_mean_ms: f64,
    /// Mean realized pause at edited boundaries (pause edits), ms.
    pub edited_pause_mean_ms: f64,
    /// Mean |change| of adjacent unedited tokens, content edits, ms.
    pub content_neighbor_drift_ms: f64,
    /// Same for pause edits.
    pub pause_neighbor_drift_ms: f64,
}

pub struct ScenarioOutcome {
    pub rows: Vec<BiasRow>,
    pub cases: Vec<EditCase>,
    pub fidelity: ScenarioFidelity,
    pub alignment_failures: usize,
}

fn sample_controlled(
    net: &GeneratorNet,
    cond: &TextCond,
    tokens: &[u32],
    track: &TimingTrack,
    euler_steps: usize,
    seed: u64,
) -> Result<FeatureSeq, PipelineError> {
    let spec = SampleSpec {
        tokens,
        track: Some(track),
        context: None,
        prompt_tokens: 0,
        spontaneous_len: None,
        euler_steps,
        seed,
    };
    Ok(sample(net, cond, &spec)?)
}

fn neighbor_drift(
    base: &TimingTrack,
    edited: &TimingTrack,
    start: usize,
    len: usize,
    rate: crate::frame::FrameRate,
) -> f64 {
    let mut drift = 0.0;
    let mut n = 0usize;
    if start > 0 {
        drift += (frames_to_ms(edited.timings[start - 1].content_frames, rate)
            - frames_to_ms(base.timings[start - 1].content_frames, rate))
        .abs();
        n += 1;
    }
    if start + len < base.len() {
        drift += (frames_to_ms(edited.timings[start + len].content_frames, rate)
            - frames_to_ms(base.timings[start + len].content_frames, rate))
        .abs();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        drift / n as f64
    }
}

/// Run the three demos: baseline realization plus one content edit and one
/// pause edit each, everything oracle-aligned and summarized Table-2 style.
pub fn run_scenarios(
    net: &GeneratorNet,
    cond: &TextCond,
    world: &WorldConfig,
    sigs: &TokenSignatures,
    opts: &BenchOptions,
) -> Result<ScenarioOutcome, PipelineError> {
    let rate = world.frame_rate();
    let suite: Vec<ScenarioCase> = scenario_suite(rate);
    let mut cases = Vec::new();
    let mut failures = 0usize;

    let mut base_dev_sum = 0.0;
    let mut base_dev_n = 0usize;
    let mut edited_content = Vec::new();
    let mut edited_pause = Vec::new();
    let mut drift_content = Vec::new();
    let mut drift_pause = Vec::new();

    for (ci, case) in suite.iter().enumerate() {
        let ids: Vec<u32> = case.tokens.iter().map(|t| t.id).collect();
        let seed = utt_seed(opts.seed, ci);
        let base_feat = sample_controlled(net, cond, &ids, &case.baseline, opts.euler_steps, seed)?;
        let realized_base = match oracle_align(&base_feat, &ids, sigs, world) {
            Ok(al) => Some(al.track),
            Err(_) => {
                failures += 1;
                None
            }
        };
        if let Some(rb) = &realized_base {
            for (tok, tim) in case.tokens.iter().zip(&rb.timings) {
                if !tok.punct {
                    base_dev_sum +=
                        (frames_to_ms(tim.content_frames, rate) - SCENARIO_CONTENT_MS).abs();
                    base_dev_n += 1;
                }
            }
        }

        for (kind_idx, spec) in [&case.content_edit, &case.pause_edit].into_iter().enumerate() {
            let edited_track = apply_edit(&case.baseline, spec)?;
            let edit_feat =
                sample_controlled(net, cond, &ids, &edited_track, opts.euler_steps, seed)?;
            let realized_edited = match oracle_align(&edit_feat, &ids, sigs, world) {
                Ok(al) => Some(al.track),
                Err(_) => {
                    failures += 1;
                    None
                }
            };
            if let (Some(rb), Some(re)) = (&realized_base, &realized_edited) {
                if kind_idx == 0 {
                    for i in spec.start..spec.start + spec.len {
                        edited_content.push(frames_to_ms(re.timings[i].content_frames, rate));
                    }
                    drift_content.push(neighbor_drift(rb, re, spec.start, spec.len, rate));
                } else {
                    for i in spec.start..spec.start + spec.len {
                        edited_pause.push(frames_to_ms(re.timings[i].pause_frames, rate));
                    }
                    drift_pause.push(neighbor_drift(rb, re, spec.start, spec.len, rate));
                }
            }
            cases.push(EditCase {
                case_id: format!("{}:{}", case.name, spec.kind.tag()),
                kind: spec.kind,
                span_start: spec.start,
                span_len: spec.len,
                target_value: spec.value,
                baseline_track: case.baseline.clone(),
                edited_track,
                realized_baseline: realized_base.clone(),
                realized_edited,
                excluded: false,
            });
        }
    }

    let rows = baseline_bias(&cases)?;
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ScenarioOutcome {
        rows,
        cases,
        fidelity: ScenarioFidelity {
            baseline_content_dev_ms: if base_dev_n == 0 {
                f64::NAN
            } else {
                base_dev_sum / base_dev_n as f64
            },
            edited_content_mean_ms: mean(&edited_content),
            edited_pause_mean_ms: mean(&edited_pause),
            content_neighbor_drift_ms: mean(&drift_content),
            pause_neighbor_drift_ms: mean(&drift_pause),
        },
        alignment_failures: failures,
    })
}

/// Render the Table-2 style scenario report.
pub fn render_scenario_report(outcome: &ScenarioOutcome, header: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        writeln!(out, "#{k}={v}").unwrap();
    }
    writeln!(
        out,
        "type\tcases\tbase_target_ms\tbase_mean_ms\tedit_target_ms\tedit_mean_ms\tabs_bias_ms"
    )
    .unwrap();
    for row in &outcome.rows {
        writeln!(
            out,
            "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            match row.kind {
                EditKind::PauseSet => "pause",
                _ => "content",
            },
            row.cases,
            row.base_target_ms,
            row.base_mean_ms,
            row.edit_target_ms,
            row.edit_mean_ms,
            row.abs_bias_ms
        )
        .unwrap();
    }
    let f = &outcome.fidelity;
    writeln!(out, "baseline_content_dev_ms\t{:.2}", f.baseline_content_dev_ms).unwrap();
    writeln!(out, "edited_content_mean_ms\t{:.2}", f.edited_content_mean_ms).unwrap();
    writeln!(out, "edited_pause_mean_ms\t{:.2}", f.edited_pause_mean_ms).unwrap();
    writeln!(out, "content_neighbor_drift_ms\t{:.2}", f.content_neighbor_drift_ms).unwrap();
    writeln!(out, "pause_neighbor_drift_ms\t{:.2}", f.pause_neighbor_drift_ms).unwrap();
    writeln!(out, "alignment_failures\t{}", outcome.alignment_failures).unwrap();
    out
}

// ---------------------------------------------------------------------------
// stress benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StressScaleRow {
    pub span: usize,
    pub factor: f64,
    pub n_total: usize,
    pub n_retained: usize,
    pub realized_factor_mean: f64,
    pub error_ms_mean: f64,
    pub drift_ms_mean: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StressPauseRow {
    pub target_ms: f64,
    pub excluded: bool,
    pub n_total: usize,
    pub n_retained: usize,
    pub realized_pause_mean_ms: f64,
}

pub struct StressOutcome {
    pub scale_rows: Vec<StressScaleRow>,
    pub pause_rows: Vec<StressPauseRow>,
    pub alignment_failures: usize,
}

/// Target-timeline boundary instants of an edit, checked against the
/// realized content intervals by the strict rule.
fn case_boundaries(track: &TimingTrack, start: usize, len: usize, kind: EditKind) -> Vec<f64> {
    let (onset, offset) = edit_boundaries(track, start, len);
    match kind {
        EditKind::PauseSet => vec![offset],
        _ => vec![onset, offset],
    }
}

/// Run the stress suite: one baseline synthesis per utterance, one edited
/// synthesis per case, strict-filter retention, and per-condition aggregates.
pub fn run_stress(
    net: &GeneratorNet,
    cond: &TextCond,
    world: &WorldConfig,
    sigs: &TokenSignatures,
    test: &[LoadedUtt],
    stress_cfg: &StressConfig,
    opts: &BenchOptions,
) -> Result<StressOutcome, PipelineError> {
    let rate = world.frame_rate();
    let utts: Vec<&LoadedUtt> = test
        .iter()
        .take(if opts.max_utts == 0 {
            test.len()
        } else {
            opts.max_utts
        })
        .collect();
    let corpus: Vec<(String, TimingTrack)> = utts
        .iter()
        .map(|u| (u.utt_id.clone(), u.track.clone()))
        .collect();
    let suite: Vec<StressCase> = crate::edit::stress_suite(&corpus, stress_cfg)?;

    let mut failures = 0usize;
    // one baseline run per utterance
    let mut baselines: Vec<Option<TimingTrack>> = Vec::with_capacity(utts.len());
    for (ui, utt) in utts.iter().enumerate() {
        let feat = sample_controlled(
            net,
            cond,
            &utt.tokens,
            &utt.track,
            opts.euler_steps,
            utt_seed(opts.seed, ui),
        )?;
        match oracle_align(&feat, &utt.tokens, sigs, world) {
            Ok(al) => baselines.push(Some(al.track)),
            Err(_) => {
                failures += 1;
                baselines.push(None);
            }
        }
    }
    let index_of = |utt_id: &str| utts.iter().position(|u| u.utt_id == utt_id).unwrap();

    struct Measured {
        case: StressCase,
        retained: bool,
        realized_pause_ms: Option<f64>,
        realized_factor: Option<f64>,
        error_ms: Option<f64>,
        drift_ms: Option<f64>,
    }

    let mut measured = Vec::with_capacity(suite.len());
    for case in suite {
        let ui = index_of(&case.utt_id);
        let utt = utts[ui];
        let Some(realized_base) = &baselines[ui] else {
            continue;
        };
        let edited_track = apply_edit(&utt.track, &case.spec)?;
        let feat = sample_controlled(
            net,
            cond,
            &utt.tokens,
            &edited_track,
            opts.euler_steps,
            utt_seed(opts.seed, ui),
        )?;
        let realized_edited = match oracle_align(&feat, &utt.tokens, sigs, world) {
            Ok(al) => al.track,
            Err(_) => {
                failures += 1;
                continue;
            }
        };

        let retained = if opts.strict {
            let boundaries =
                case_boundaries(&edited_track, case.spec.start, case.spec.len, case.spec.kind);
            strict_filter(
                &boundaries,
                &content_intervals(&realized_edited),
                opts.strict_tolerance_ms,
            )
        } else {
            true
        };

        let mut m = Measured {
            retained,
            realized_pause_ms: None,
            realized_factor: None,
            error_ms: None,
            drift_ms: None,
            case,
        };
        match m.case.spec.kind {
            EditKind::PauseSet => {
                m.realized_pause_ms = Some(frames_to_ms(
                    realized_edited.timings[m.case.spec.start].pause_frames,
                    rate,
                ));
            }
            EditKind::ContentScale | EditKind::ContentSet => {
                let eval_case = EditCase {
                    case_id: m.case.case_id.clone(),
                    kind: m.case.spec.kind,
                    span_start: m.case.spec.start,
                    span_len: m.case.spec.len,
                    target_value: m.case.spec.value,
                    baseline_track: utt.track.clone(),
                    edited_track: edited_track.clone(),
                    realized_baseline: Some(realized_base.clone()),
                    realized_edited: Some(realized_edited.clone()),
                    excluded: m.case.excluded,
                };
                if let Ok(stats) = crate::eval::span_ratio(&eval_case) {
                    m.realized_factor = Some(stats.realized_factor);
                    m.error_ms = Some(stats.error_ms);
                    m.drift_ms = Some(stats.neighbor_drift_ms);
                }
            }
        }
        measured.push(m);
    }

    let mut scale_rows = Vec::new();
    for &span in &stress_cfg.span_lens {
        for &factor in &stress_cfg.factors {
            let group: Vec<&Measured> = measured
                .iter()
                .filter(|m| {
                    m.case.spec.kind == EditKind::ContentScale
                        && m.case.spec.len == span
                        && m.case.spec.value == factor
                })
                .collect();
            let retained: Vec<&&Measured> = group.iter().filter(|m| m.retained).collect();
            let mean = |pick: fn(&Measured) -> Option<f64>| {
                let vals: Vec<f64> = retained.iter().filter_map(|m| pick(m)).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            scale_rows.push(StressScaleRow {
                span,
                factor,
                n_total: group.len(),
                n_retained: retained.len(),
                realized_factor_mean: mean(|m| m.realized_factor),
                error_ms_mean: mean(|m| m.error_ms),
                drift_ms_mean: mean(|m| m.drift_ms),
            });
        }
    }

    let mut pause_rows = Vec::new();
    let all_targets: Vec<(f64, bool)> = stress_cfg
        .pause_targets_ms
        .iter()
        .map(|&t| (t, false))
        .chain(stress_cfg.excluded_pause_targets_ms.iter().map(|&t| (t, true)))
        .collect();
    for (target, excluded) in all_targets {
        let group: Vec<&Measured> = measured
            .iter()
            .filter(|m| m.case.spec.kind == EditKind::PauseSet && m.case.spec.value == target)
            .collect();
        let retained: Vec<&&Measured> = group.iter().filter(|m| m.retained).collect();
        let vals: Vec<f64> = retained.iter().filter_map(|m| m.realized_pause_ms).collect();
        pause_rows.push(StressPauseRow {
            target_ms: target,
            excluded,
            n_total: group.len(),
            n_retained: retained.len(),
            realized_pause_mean_ms: if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            },
        });
    }

    Ok(StressOutcome {
        scale_rows,
        pause_rows,
        alignment_failures: failures,
    })
}

/// Render the Table-3 style stress report.
pub fn render_stress_report(outcome: &StressOutcome, header: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in header {
        writeln!(out, "#{k}={v}").unwrap();
    }
    writeln!(out, "span\ttarget\tn_total\tn_retained\trealized\terror_ms\tdrift_ms").unwrap();
    for row in &outcome.scale_rows {
        writeln!(
            out,
            "{}-token\t{:.1}x\t{}\t{}\t{:.3}x\t{:.2}\t{:.2}",
            row.span,
            row.factor,
            row.n_total,
            row.n_retained,
            row.realized_factor_mean,
            row.error_ms_mean,
            row.drift_ms_mean
        )
        .unwrap();
    }
    writeln!(out, "pause_target_ms\texcluded\tn_total\tn_retained\trealized_mean_ms").unwrap();
    for row in &outcome.pause_rows {
        writeln!(
            out,
            "{:.0}\t{}\t{}\t{}\t{:.2}",
            row.target_ms, row.excluded, row.n_total, row.n_retained, row.realized_pause_mean_ms
        )
        .unwrap();
    }
    writeln!(out, "alignment_failures\t{}", outcome.alignment_failures).unwrap();
    out
}

// ---------------------------------------------------------------------------
// corpus materialization
// ---------------------------------------------------------------------------

/// Generate and render both splits of a toy corpus.
pub fn materialize_corpus(
    world: &WorldConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Vec<(crate::world::GenItem, Split, FeatureSeq)>, PipelineError> {
    let sigs = TokenSignatures::from_config(world)?;
    let mut items = Vec::with_capacity(n_train + n_test);
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for (i, item) in crate::world::gen_corpus(world, n, seed, split)
            .into_iter()
            .enumerate()
        {
            let feats = crate::world::render(
                &item.track,
                &sigs,
                world.noise_std,
                render_seed(seed, i, split),
            )?;
            items.push((item, split, feats));
        }
    }
    Ok(items)
}
