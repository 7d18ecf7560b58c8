//! Training loop, cascaded inference, evaluation and the temporal-noise
//! sensitivity study.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use groundkit_autograd::{Adam, AdamConfig, Graph, LrSchedule, Tensor, Var};
use groundkit_core::metrics::{self, BinRow, EvalSample, MetricReport, MetricsError, ReportOptions, TubeRecord};
use groundkit_core::sampling::{pn_sample, sample_pairs, FrameLabel, PnRatio, SamplingConfig};
use groundkit_core::{BoundingBox, TemporalWindow, Tube, VideoSample};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge;
use crate::config::{ModelConfig, TimestampMode, Variant};
use crate::error::ModelError;
use crate::eta;
use crate::losses::{self, LossWeights, SpatialTerms};
use crate::model::{Model, LOG_TAU};
use crate::spatial;
use crate::substrate::{self, Role, SequencePlan};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("sample {id}: {msg}")]
    Data { id: String, msg: String },
    #[error("non-finite {component} ({value}) at step {step} on sample {sample}, frames {frames:?}")]
    NonFinite {
        step: usize,
        sample: String,
        frames: Vec<usize>,
        component: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            warmup_frac: 0.1,
            clip_norm: 1.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub variant: Variant,
    pub sampling: SamplingConfig,
    pub losses: LossWeights,
    pub optim: OptimConfig,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.losses.validate().map_err(PipelineError::Config)?;
        if self.sampling.positives == 0 {
            return bad("sampling.positives must be at least 1".into());
        }
        if self.optim.lr.is_nan() || self.optim.lr <= 0.0 || !(0.0..1.0).contains(&self.optim.warmup_frac) {
            return bad("optim.lr must be positive and warmup_frac in [0, 1)".into());
        }
        for p in [&self.train_data, &self.eval_data].into_iter().flatten() {
            if !p.exists() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Applies command-line ablation switches.
    pub fn apply(&mut self, a: &Ablations) {
        if a.no_eta {
            self.variant.timestamps = TimestampMode::Off;
        }
        if a.naive_eta {
            self.variant.timestamps = TimestampMode::Naive;
        }
        if a.no_stsb {
            self.variant.bridge = false;
        }
        if a.single_layer_select {
            self.variant.single_layer_select = true;
        }
        if let Some(r) = a.pn_ratio {
            let (p, n) = r.budgets();
            self.sampling.positives = p;
            self.sampling.negatives = n;
        }
        if let Some(m) = a.bridge_queries {
            self.model.bridge_queries = m;
        }
        if let Some(n) = a.encoder_layers {
            self.model.encoder_layers = n;
        }
        if let Some(k) = a.select_k {
            self.model.select_k = k;
        }
        if a.equal_loss_weights {
            self.losses.token = 1.0;
            self.losses.spatial = 1.0;
        }
    }
}

/// Switches reproducing the ablation rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ablations {
    pub no_eta: bool,
    pub naive_eta: bool,
    pub no_stsb: bool,
    pub single_layer_select: bool,
    pub pn_ratio: Option<PnRatio>,
    pub bridge_queries: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub select_k: Option<usize>,
    /// Weight the answer and spatial losses 1:1.
    pub equal_loss_weights: bool,
}

/// The model's parsed answer.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalAnswer {
    pub text: String,
    pub window: TemporalWindow,
    pub parsed: bool,
}

fn parse_number(s: &str) -> Option<f64> {
    let (int, frac) = match s.split_once('.') {
        Some((a, b)) => (a, Some(b)),
        None => (s, None),
    };
    let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.is_some_and(|f| !digits(f)) {
        return None;
    }
    s.parse().ok()
}

/// Reads `"<start>-<end>"`, optionally followed by `[DET]`. Values are
/// clamped to `[0, duration]` and swapped if reversed; anything else falls
/// back to the whole video.
pub fn parse_temporal_answer(text: &str, duration: f64) -> TemporalAnswer {
    let fallback = || TemporalAnswer {
        text: text.to_string(),
        window: TemporalWindow::new(0.0, duration.max(0.0)).expect("duration is finite"),
        parsed: false,
    };
    let body = text.trim();
    let body = body.strip_suffix(crate::vocab::DET).unwrap_or(body).trim();
    let Some((a, b)) = body.split_once('-') else {
        return fallback();
    };
    let (Some(a), Some(b)) = (parse_number(a.trim()), parse_number(b.trim())) else {
        return fallback();
    };
    let (a, b) = (a.clamp(0.0, duration), b.clamp(0.0, duration));
    let (s, e) = if a <= b { (a, b) } else { (b, a) };
    match TemporalWindow::new(s, e) {
        Ok(window) => TemporalAnswer {
            text: text.to_string(),
            window,
            parsed: true,
        },
        Err(_) => fallback(),
    }
}

/// Text the model is trained to produce for a ground-truth window.
pub fn answer_text(window: &TemporalWindow) -> String {
    eta::format_timestamp(window.start(), window.end())
}

/// Per-sample inputs that do not change across steps.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pairs: Tensor,
    /// Video, timestamps and query.
    pub prompt: SequencePlan,
    /// Answer ids ending in `[DET]`.
    pub answer: Vec<usize>,
}

pub fn prepare(model: &Model, sample: &VideoSample) -> Result<Prepared, ModelError> {
    let cfg = &model.config;
    if sample.grid_h != cfg.grid_h || sample.grid_w != cfg.grid_w || sample.feature_dim != cfg.feature_dim {
        return Err(ModelError::Shape(format!(
            "sample {} has a {}×{}×{} grid, model expects {}×{}×{}",
            sample.id, sample.grid_h, sample.grid_w, sample.feature_dim, cfg.grid_h, cfg.grid_w, cfg.feature_dim
        )));
    }
    let pairs = sample_pairs(sample);
    let blocks = eta::timestamp_blocks(&model.vocab, cfg, &model.variant, &pairs)?;
    let query = model.vocab.tokenize(&sample.query)?;
    let prompt = eta::assemble_sequence(cfg, pairs.len(), &blocks, &query)?;
    let mut answer = model.vocab.tokenize(&answer_text(sample.gt.window()))?;
    answer.push(model.vocab.det());
    Ok(Prepared {
        pairs: substrate::pair_features(sample, &pairs),
        prompt,
        answer,
    })
}

/// Graph handles of every loss component of one training example.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub token: Var,
    pub spatial: Var,
    pub terms: SpatialTerms<Var>,
    pub frames: Vec<usize>,
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Var {
    if xs.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let mut acc = xs[0];
    for x in &xs[1..] {
        acc = g.add(acc, *x);
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// Builds the joint objective for one sample with a teacher-forced answer.
pub fn training_loss(
    model: &Model,
    g: &mut Graph,
    sample: &VideoSample,
    prep: &Prepared,
    weights: &LossWeights,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown, PipelineError> {
    let prompt_len = prep.prompt.len();
    let plan = bridge::extend_with_det_and_queries(
        prep.prompt.clone(),
        &prep.answer,
        model.vocab.det(),
        bridge::appended_queries(model),
    )?;
    let q_rows = bridge::query_rows(model, g);
    let seq = substrate::embed_plan(model, g, &plan, Some(&prep.pairs), q_rows)?;
    let out = substrate::forward(model, g, &seq)?;
    let rows: Vec<usize> = (0..prep.answer.len()).map(|i| prompt_len - 1 + i).collect();
    let token = losses::token_loss(g, out.logits, &rows, &prep.answer)?;
    let q_bridge = bridge::extract_bridging(model, g, out.hidden, &seq.roles)?;

    let batch = pn_sample(sample, sampling, rng).map_err(|e| PipelineError::Data {
        id: sample.id.clone(),
        msg: e.to_string(),
    })?;
    let frames: Vec<usize> = batch.frames.iter().map(|f| f.frame).collect();
    let raw: Vec<&[f32]> = frames.iter().map(|&f| sample.frame(f)).collect();
    let stack = spatial::stack_frames(&model.config, &raw)?;
    let feats = spatial::encode_image(model, g, &stack)?;
    let bridge_value = g.value(q_bridge).clone();
    let cands = spatial::select_for_frames(model, g, &feats, &bridge_value)?;

    let mut dn_queries = Vec::with_capacity(frames.len());
    let mut gts: Vec<Option<[f64; 4]>> = Vec::with_capacity(frames.len());
    for f in &batch.frames {
        let gt = match (f.label, f.gt_box) {
            (FrameLabel::Positive, Some(b)) => Some(b.center_form()),
            _ => None,
        };
        let q = match gt {
            Some(b) => losses::build_denoising_queries(b, weights.dn_noise, weights.dn_groups, rng),
            None => Vec::new(),
        };
        dn_queries.push(q);
        gts.push(gt);
    }
    let dn_inputs: Vec<_> = dn_queries
        .iter()
        .map(|q| losses::denoising_input(q, weights.dn_groups))
        .collect();
    let dec = spatial::decode(model, g, &feats, &cands, q_bridge, Some(&dn_inputs))?;

    let (mut obj, mut bbox, mut giou, mut dn) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut positives = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        let rows = dec.layout.matching_rows(i);
        let gt_list: Vec<[f64; 4]> = gt.iter().copied().collect();
        let m = losses::match_rows(g, dec.boxes, dec.logits, rows.clone(), &gt_list, weights.match_cost);
        let d = losses::detection_losses(g, dec.boxes, dec.logits, rows, &gt_list, &m, weights.no_object);
        obj.push(d.objectness);
        if let Some(b) = gt {
            positives.push(i);
            bbox.push(d.bbox);
            giou.push(d.giou);
            let rows = dec.layout.denoising_rows(i);
            dn.push(losses::denoising_loss(g, dec.boxes, dec.logits, rows, &dn_queries[i], *b, weights));
        }
    }
    let log_tau = g.param_named(&model.params, LOG_TAU);
    let neg_log_tau = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg_log_tau);
    let sets: Vec<_> = positives
        .iter()
        .flat_map(|&i| {
            let target = batch.frames[i]
                .gt_box
                .map(|b| spatial::covered_tokens(&model.config, &b))
                .unwrap_or_default();
            losses::align_sets(i, &cands[i], weights.align_positives, &target)
        })
        .collect();
    let alignment = losses::alignment_loss(
        g,
        &feats,
        &sets,
        q_bridge,
        inv_tau,
        weights.negatives,
        weights.share_negatives,
        rng,
    );
    let terms = SpatialTerms {
        objectness: mean_of(g, &obj),
        bbox: mean_of(g, &bbox),
        giou: mean_of(g, &giou),
        denoising: mean_of(g, &dn),
        alignment,
    };
    let spatial_loss = losses::spatial_loss(g, &terms, weights);
    let total = losses::total_loss(g, token, spatial_loss, weights);
    Ok(LossBreakdown {
        total,
        token,
        spatial: spatial_loss,
        terms,
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub sample: String,
    pub lr: f64,
    pub total: f64,
    pub token: f64,
    pub spatial: f64,
    pub objectness: f64,
    pub bbox: f64,
    pub giou: f64,
    pub denoising: f64,
    pub alignment: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Model described by a run config, before any training.
pub fn initial_model(cfg: &RunConfig) -> Result<Model, PipelineError> {
    let mut mc = cfg.model.clone();
    mc.seed = cfg.seed;
    Ok(Model::new(mc, cfg.variant.clone())?)
}

/// Trains on `samples`, one example per step, visiting them in a freshly
/// shuffled order every epoch. `progress` sees every step's log.
pub fn train(
    cfg: &RunConfig,
    samples: &[VideoSample],
    mut progress: impl FnMut(&StepLog),
) -> Result<TrainOutcome, PipelineError> {
    cfg.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    cfg.losses.validate().map_err(PipelineError::Config)?;
    if samples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut model = initial_model(cfg)?;
    let prepared = samples
        .iter()
        .map(|s| prepare(&model, s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a1e);
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            weight_decay: cfg.optim.weight_decay,
            ..Default::default()
        },
    );
    let schedule = LrSchedule {
        base: cfg.optim.lr,
        total_steps: cfg.optim.steps,
        warmup_frac: cfg.optim.warmup_frac,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.optim.steps);
    for step in 0..cfg.optim.steps {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let i = order.pop().expect("refilled above");
        let (sample, prep) = (&samples[i], &prepared[i]);
        let mut g = Graph::new();
        let b = training_loss(&model, &mut g, sample, prep, &cfg.losses, &cfg.sampling, &mut rng)?;
        let v = |x: Var| g.value(x).item();
        let entry = StepLog {
            step,
            sample: sample.id.clone(),
            lr: schedule.lr(step),
            total: v(b.total),
            token: v(b.token),
            spatial: v(b.spatial),
            objectness: v(b.terms.objectness),
            bbox: v(b.terms.bbox),
            giou: v(b.terms.giou),
            denoising: v(b.terms.denoising),
            alignment: v(b.terms.alignment),
            tau: model.tau(),
            grad_norm: 0.0,
        };
        let named = [
            ("total loss", entry.total),
            ("answer loss", entry.token),
            ("objectness loss", entry.objectness),
            ("box loss", entry.bbox),
            ("giou loss", entry.giou),
            ("denoising loss", entry.denoising),
            ("alignment loss", entry.alignment),
        ];
        for (component, value) in named {
            if !value.is_finite() || value < -1e-12 {
                return Err(PipelineError::NonFinite {
                    step,
                    sample: sample.id.clone(),
                    frames: b.frames,
                    component,
                    value,
                });
            }
        }
        g.backward(b.total);
        let mut grads = g.param_grads(&model.params);
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(PipelineError::NonFinite {
                step,
                sample: sample.id.clone(),
                frames: b.frames,
                component: "gradient norm",
                value: norm,
            });
        }
        if cfg.optim.clip_norm > 0.0 && norm > cfg.optim.clip_norm {
            grads.scale(cfg.optim.clip_norm / norm);
        }
        adam.step(&mut model.params, &grads, entry.lr);
        let entry = StepLog {
            grad_norm: norm,
            ..entry
        };
        progress(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Greedily decoded answer and the bridging queries computed after it.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub answer: TemporalAnswer,
    /// Generated ids, ending in `[DET]`.
    pub tokens: Vec<usize>,
    pub bridge: Tensor,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Generates until `[DET]` or the token cap (then `[DET]` is appended),
/// parses the answer and runs the bridging pass.
pub fn decode_answer(model: &Model, sample: &VideoSample) -> Result<Decoded, PipelineError> {
    let prep = prepare(model, sample)?;
    let det = model.vocab.det();
    let mut tokens: Vec<usize> = Vec::new();
    while tokens.len() < model.config.max_answer_tokens {
        let mut plan = prep.prompt.clone();
        for &t in &tokens {
            plan.push_text(t, Role::Text);
        }
        let mut g = Graph::new();
        let seq = substrate::embed_plan(model, &mut g, &plan, Some(&prep.pairs), None)?;
        let out = substrate::forward(model, &mut g, &seq)?;
        let logits = g.value(out.logits);
        let next = argmax(logits.row(logits.rows - 1));
        tokens.push(next);
        if next == det {
            break;
        }
    }
    if tokens.last() != Some(&det) {
        tokens.push(det);
    }
    let text = model
        .vocab
        .detokenize(&tokens[..tokens.len() - 1])
        .map_err(ModelError::from)?;
    let answer = parse_temporal_answer(&text, sample.duration);

    let plan = bridge::extend_with_det_and_queries(prep.prompt, &tokens, det, bridge::appended_queries(model))?;
    let mut g = Graph::new();
    let q_rows = bridge::query_rows(model, &mut g);
    let seq = substrate::embed_plan(model, &mut g, &plan, Some(&prep.pairs), q_rows)?;
    let out = substrate::forward(model, &mut g, &seq)?;
    let q = bridge::extract_bridging(model, &mut g, out.hidden, &seq.roles)?;
    Ok(Decoded {
        answer,
        tokens,
        bridge: g.value(q).clone(),
    })
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub answer: TemporalAnswer,
    pub tube: Tube,
    /// Every frame handed to the spatial decoder, in order.
    pub frames_decoded: Vec<usize>,
}

/// Runs the spatial stage on every frame of `window` and nothing else.
pub fn spatial_tube(
    model: &Model,
    sample: &VideoSample,
    window: TemporalWindow,
    bridge: &Tensor,
) -> Result<(Tube, Vec<usize>), PipelineError> {
    let frames: Vec<usize> = window
        .frame_span(sample.fps, sample.frame_count())
        .map(|r| r.collect())
        .unwrap_or_default();
    let raw: Vec<&[f32]> = frames.iter().map(|&f| sample.frame(f)).collect();
    let preds = spatial::predict_frames(model, &raw, bridge)?;
    let boxes: BTreeMap<usize, BoundingBox> = frames.iter().zip(&preds).map(|(f, p)| (*f, p.bbox)).collect();
    let tube = Tube::new(window, sample.fps, sample.frame_count(), boxes).map_err(|e| PipelineError::Data {
        id: sample.id.clone(),
        msg: e.to_string(),
    })?;
    Ok((tube, frames))
}

pub fn infer(model: &Model, sample: &VideoSample) -> Result<Inference, PipelineError> {
    let d = decode_answer(model, sample)?;
    let (tube, frames_decoded) = spatial_tube(model, sample, d.answer.window, &d.bridge)?;
    Ok(Inference {
        answer: d.answer,
        tube,
        frames_decoded,
    })
}

/// Like [`infer`], with the ground-truth window in place of the answer.
pub fn infer_oracle(model: &Model, sample: &VideoSample) -> Result<Inference, PipelineError> {
    let d = decode_answer(model, sample)?;
    let (tube, frames_decoded) = spatial_tube(model, sample, *sample.gt.window(), &d.bridge)?;
    Ok(Inference {
        answer: d.answer,
        tube,
        frames_decoded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Predicted,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub report: MetricReport,
    pub bins: Vec<BinRow>,
    pub records: Vec<TubeRecord>,
    /// Fraction of answers matching the grammar.
    pub parse_rate: f64,
}

impl Evaluation {
    pub fn to_table(&self) -> String {
        format!(
            "mode: {:?}\nparsed answers: {}\n{}\n{}",
            self.mode,
            metrics::pct(self.parse_rate),
            self.report.to_table(),
            metrics::bin_table(&self.bins)
        )
    }
}

fn summarize(
    mode: EvalMode,
    samples: &[VideoSample],
    tubes: Vec<Tube>,
    parsed: usize,
) -> Result<Evaluation, PipelineError> {
    let records = samples
        .iter()
        .zip(&tubes)
        .map(|(s, t)| TubeRecord::from_tube(s.id.clone(), t))
        .collect();
    let evals = samples
        .iter()
        .zip(tubes)
        .map(|(s, t)| EvalSample::new(s.id.clone(), t, s.gt.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = ReportOptions {
        oracle: mode == EvalMode::Oracle,
        ..Default::default()
    };
    Ok(Evaluation {
        mode,
        report: MetricReport::compute(&evals, &opts)?,
        bins: metrics::tiou_bin_report(&evals, &metrics::DEFAULT_BIN_EDGES)?,
        records,
        parse_rate: parsed as f64 / samples.len() as f64,
    })
}

/// Predicted-window and oracle-window evaluations sharing one decoding pass
/// per sample.
pub fn evaluate_both(model: &Model, samples: &[VideoSample]) -> Result<(Evaluation, Evaluation), PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let (mut pred, mut oracle) = (Vec::new(), Vec::new());
    let mut parsed = 0;
    for s in samples {
        let d = decode_answer(model, s)?;
        parsed += d.answer.parsed as usize;
        pred.push(spatial_tube(model, s, d.answer.window, &d.bridge)?.0);
        oracle.push(spatial_tube(model, s, *s.gt.window(), &d.bridge)?.0);
    }
    Ok((
        summarize(EvalMode::Predicted, samples, pred, parsed)?,
        summarize(EvalMode::Oracle, samples, oracle, parsed)?,
    ))
}

pub fn evaluate(model: &Model, samples: &[VideoSample], mode: EvalMode) -> Result<Evaluation, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut tubes = Vec::new();
    let mut parsed = 0;
    for s in samples {
        let r = match mode {
            EvalMode::Predicted => infer(model, s)?,
            EvalMode::Oracle => infer_oracle(model, s)?,
        };
        parsed += r.answer.parsed as usize;
        tubes.push(r.tube);
    }
    summarize(mode, samples, tubes, parsed)
}

/// Scores ready-made tubes against the samples' ground truth.
pub fn evaluate_tubes(samples: &[VideoSample], tubes: Vec<Tube>, mode: EvalMode) -> Result<Evaluation, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let n = samples.len();
    summarize(mode, samples, tubes, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// Temporal shift in seconds.
    pub level: f64,
    pub m_tiou: f64,
    pub m_viou: f64,
}

/// Ground-truth tube moved by `shift` seconds towards the far end of the
/// video and clipped to it. Frames outside the original window reuse the
/// nearest ground-truth box.
pub fn jittered_tube(sample: &VideoSample, shift: f64) -> Result<Tube, PipelineError> {
    let gt = &sample.gt;
    let w = gt.window();
    let d = sample.duration;
    let dir = if (w.start() + w.end()) / 2.0 <= d / 2.0 { 1.0 } else { -1.0 };
    let (s, e) = (
        (w.start() + dir * shift).clamp(0.0, d),
        (w.end() + dir * shift).clamp(0.0, d),
    );
    let data = |msg: String| PipelineError::Data {
        id: sample.id.clone(),
        msg,
    };
    let window = TemporalWindow::new(s, e).map_err(|e| data(e.to_string()))?;
    let (first, last) = match (gt.boxes().keys().next(), gt.boxes().keys().next_back()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(data("ground truth has no boxes".into())),
    };
    let boxes = window
        .frame_span(sample.fps, sample.frame_count())
        .map(|r| r.map(|f| (f, *gt.box_at(f.clamp(first, last)).expect("window frames carry boxes"))).collect())
        .unwrap_or_default();
    Tube::new(window, sample.fps, sample.frame_count(), boxes).map_err(|e| data(e.to_string()))
}

/// m_tIoU and m_vIoU of ground-truth tubes shifted by each level.
pub fn controlled_noise_study(samples: &[VideoSample], levels: &[f64]) -> Result<Vec<NoiseRow>, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    levels
        .iter()
        .map(|&level| {
            let evals = samples
                .iter()
                .map(|s| Ok(EvalSample::new(s.id.clone(), jittered_tube(s, level)?, s.gt.clone())?))
                .collect::<Result<Vec<_>, PipelineError>>()?;
            Ok(NoiseRow {
                level,
                m_tiou: metrics::mean_tiou(&evals)?,
                m_viou: metrics::mean_viou(&evals)?,
            })
        })
        .collect()
}

pub fn noise_table(rows: &[NoiseRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format!("{:.2}", r.level), metrics::pct(r.m_tiou), metrics::pct(r.m_viou)])
        .collect();
    metrics::render(&["shift (s)", "m_tIoU", "m_vIoU"], &body)
}

/// Writes the run log as JSON lines.
pub fn write_log(path: &Path, log: &[StepLog]) -> std::io::Result<()> {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e).expect("log entries serialize"));
        s.push('\n');
    }
    std::fs::write(path, s)
}
