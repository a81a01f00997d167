//! Two-stage training: optional Gaussian fusion, attention pooling and
//! classification on the full image, optional counterfactual effect loss,
//! optional attention-guided crop and a second classification, with the two
//! stage losses blended by the epoch schedule.

use crate::attention::{aggregate_and_normalize, bap, crop_and_resize, threshold_mask, CropBox};
use crate::backbone::Features;
use crate::config::{DataSource, TrainConfig};
use crate::cra::{effect_logits, effect_loss, sample_counterfactual};
use crate::data::{batch_iterator, generate_synthetic, load_image_folder, Dataset};
use crate::error::{Error, Result};
use crate::fgf::{fuse_on, render_on, GaussianParams, GaussianVars};
use crate::lls::{LlsMode, LlsSchedule};
use crate::model::{BoundModel, Model};
use crate::nn::{Binder, Linear, Mode};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tag separating evaluation-time counterfactual draws from training.
const EVAL_STREAM: u64 = 0x4556_414c;

/// Graph handles and side products of one forward pass.
struct Pass {
    gaussian: Option<GaussianVars>,
    /// Squared distance between the Gaussian centre and the attention
    /// centroid, averaged over the batch.
    gaussian_fit: Option<Var>,
    y: Var,
    y_bar: Option<Var>,
    stage2: Option<Var>,
    attention_norm: Tensor,
    boxes: Option<Vec<CropBox>>,
    crops: Option<Tensor>,
    backbone_passes: Vec<Features>,
    attention_nodes: Vec<Var>,
}

fn detach(tape: &mut Tape, v: Var) -> Var {
    let t = tape.value(v).clone();
    tape.constant(t)
}

/// Attention, pooling and logits for one feature map.
fn classify(model: &Model, bound: &BoundModel, tape: &mut Tape, features: Var, cfg: &TrainConfig, mode: Mode) -> Result<(Var, Var, Var)> {
    let att = model.attention.forward(tape, &bound.attention, features, mode)?;
    let logits = pooled_logits(bound, tape, att.maps, features, cfg)?;
    Ok((att.maps, att.norm_node, logits))
}

fn pooled_logits(bound: &BoundModel, tape: &mut Tape, attention: Var, features: Var, cfg: &TrainConfig) -> Result<Var> {
    let m = bap(tape, attention, features, true)?;
    let m = tape.scale(m, cfg.bap_scale)?;
    Linear::forward(tape, bound.classifier, m)
}

fn forward(
    model: &Model,
    bound: &BoundModel,
    tape: &mut Tape,
    images: &Tensor,
    cfg: &TrainConfig,
    mode: Mode,
    counterfactual: Option<&mut ChaCha8Rng>,
) -> Result<Pass> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let x = tape.constant(images.clone());
    let mut backbone_passes = Vec::new();
    let mut attention_nodes = Vec::new();

    let (input, gaussian) = if cfg.toggles.fgf {
        let raw = model.backbone.extract_features(tape, &bound.backbone, x, mode)?;
        let f0 = if cfg.fgf_backprop { raw.map } else { detach(tape, raw.map) };
        backbone_passes.push(raw);
        let g = model.gaussian.predict(tape, &bound.gaussian, f0)?;
        let map = render_on(tape, &g, h, w)?;
        (fuse_on(tape, x, map)?, Some(g))
    } else {
        (x, None)
    };

    let feats = model.backbone.extract_features(tape, &bound.backbone, input, mode)?;
    let map = feats.map;
    backbone_passes.push(feats);
    let (attention, norm_node, y) = classify(model, bound, tape, map, cfg, mode)?;
    attention_nodes.push(norm_node);

    let y_bar = match counterfactual {
        Some(rng) => {
            let sample = sample_counterfactual(tape.value(attention), cfg.counterfactual_mode, rng)?;
            let a_bar = tape.constant(sample);
            Some(pooled_logits(bound, tape, a_bar, map, cfg)?)
        }
        None => None,
    };

    let attention_norm = aggregate_and_normalize(tape.value(attention))?;
    let gaussian_fit = match &gaussian {
        Some(g) => Some(gaussian_fit(tape, g, &attention_norm, cfg.theta, h, w)?),
        None => None,
    };
    let (stage2, boxes, crops) = if cfg.toggles.crop {
        let mask = threshold_mask(&attention_norm, cfg.theta)?;
        let (crops, boxes) = crop_and_resize(images, &mask, cfg.margin, h, w)?;
        let xc = tape.constant(crops.clone());
        let feats2 = model.backbone.extract_features(tape, &bound.backbone, xc, mode)?;
        let map2 = feats2.map;
        backbone_passes.push(feats2);
        let (_, norm2, y2) = classify(model, bound, tape, map2, cfg, mode)?;
        attention_nodes.push(norm2);
        (Some(y2), Some(boxes), Some(crops))
    } else {
        (None, None, None)
    };

    Ok(Pass {
        gaussian,
        gaussian_fit,
        y,
        y_bar,
        stage2,
        attention_norm,
        boxes,
        crops,
        backbone_passes,
        attention_nodes,
    })
}

struct Stage1 {
    ce: Var,
    effect: Option<Var>,
    total: Var,
}

fn stage1_terms(tape: &mut Tape, pass: &Pass, labels: &[usize], cfg: &TrainConfig) -> Result<Stage1> {
    let ce = tape.cross_entropy(pass.y, labels)?;
    let (mut total, effect) = match pass.y_bar {
        Some(y_bar) => {
            let triple = effect_logits(tape, pass.y, y_bar)?;
            let e = effect_loss(tape, &triple, labels)?;
            let weighted = tape.scale(e, cfg.lambda_effect)?;
            (tape.add(ce, weighted)?, Some(e))
        }
        None => (ce, None),
    };
    if let Some(fit) = pass.gaussian_fit {
        let weighted = tape.scale(fit, cfg.lambda_gaussian)?;
        total = tape.add(total, weighted)?;
    }
    Ok(Stage1 { ce, effect, total })
}

/// Train-mode stage-1 loss: cross-entropy plus whichever of the effect and
/// Gaussian terms are on. Counterfactual maps come from `cf_seed`, so
/// repeated calls on the same inputs agree exactly.
pub fn stage1_loss(
    model: &Model,
    bound: &BoundModel,
    tape: &mut Tape,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    cf_seed: u64,
) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(cf_seed);
    let cf = cfg.toggles.cra.then_some(&mut rng);
    let mut no_crop = cfg.clone();
    no_crop.toggles.crop = false;
    let pass = forward(model, bound, tape, images, &no_crop, Mode::Train, cf)?;
    Ok(stage1_terms(tape, &pass, labels, cfg)?.total)
}

/// Centroid `(x, y)` of the above-threshold attention of one item, in the
/// `i/H` coordinates of the Gaussian map; the image centre when nothing
/// passes the threshold.
pub fn attention_centroid(norm: &[f64], mh: usize, mw: usize, theta: f64, h: usize, w: usize) -> (f64, f64) {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for r in 0..mh {
        for c in 0..mw {
            let a = norm[r * mw + c];
            if a >= theta {
                sx += a * ((c as f64 + 0.5) * w as f64 / mw as f64 - 0.5) / w as f64;
                sy += a * ((r as f64 + 0.5) * h as f64 / mh as f64 - 0.5) / h as f64;
                sw += a;
            }
        }
    }
    if sw > 0.0 {
        (sx / sw, sy / sw)
    } else {
        (0.5, 0.5)
    }
}

/// Mean squared distance between each predicted Gaussian centre and the
/// thresholded attention centroid, which is held constant.
pub fn gaussian_fit(tape: &mut Tape, g: &GaussianVars, norm: &Tensor, theta: f64, h: usize, w: usize) -> Result<Var> {
    let s = norm.shape();
    let (b, mh, mw) = (s[0], s[1], s[2]);
    let centroids: Vec<(f64, f64)> = norm
        .data()
        .chunks(mh * mw)
        .map(|item| attention_centroid(item, mh, mw, theta, h, w))
        .collect();
    let tx = tape.constant(Tensor::from_fn(&[b, 1, 1, 1], |i| centroids[i].0));
    let ty = tape.constant(Tensor::from_fn(&[b, 1, 1, 1], |i| centroids[i].1));
    let dx = tape.sub(g.mu_x, tx)?;
    let dy = tape.sub(g.mu_y, ty)?;
    let dx = tape.square(dx)?;
    let dy = tape.square(dy)?;
    let d = tape.add(dx, dy)?;
    let total = tape.sum_all(d)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Schedule for a run: `alpha` climbs from 0 at the first epoch to 1 at the
/// last.
pub fn lls_schedule(cfg: &TrainConfig) -> LlsSchedule {
    let mode = if cfg.toggles.lls {
        LlsMode::Linear
    } else {
        LlsMode::ConstantHalf
    };
    LlsSchedule {
        total_epochs: cfg.epochs.saturating_sub(1).max(1),
        mode,
    }
}

/// Weight of the stage-2 loss at `epoch`; zero when there is no stage 2.
pub fn stage2_weight(cfg: &TrainConfig, epoch: u64) -> f64 {
    if !cfg.toggles.crop {
        return 0.0;
    }
    lls_schedule(cfg).alpha(epoch as i64).expect("epoch is nonnegative")
}

/// Linear warm-up to `lr` over the warm-up epochs, then `lr`, then
/// `lr · lr_decay_factor` from epoch `floor(epochs / 2)`.
pub fn lr_at(cfg: &TrainConfig, epoch: u64, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
    let warmup = cfg.warmup_epochs as usize * steps_per_epoch;
    let global = epoch as usize * steps_per_epoch + step_in_epoch;
    let base = if epoch >= cfg.epochs / 2 {
        cfg.lr * cfg.lr_decay_factor
    } else {
        cfg.lr
    };
    if global < warmup {
        base * (global + 1) as f64 / warmup as f64
    } else {
        base
    }
}

fn step_rng(seed: u64, epoch: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(1 << 32).wrapping_add(step as u64));
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutputs {
    pub stage1_ce: f64,
    pub effect: Option<f64>,
    pub gaussian_fit: Option<f64>,
    /// `stage1_ce + lambda_effect · effect + lambda_gaussian · gaussian_fit`.
    pub stage1: f64,
    pub stage2: Option<f64>,
    pub alpha: f64,
    pub total: f64,
    pub boxes: Option<Vec<CropBox>>,
}

/// Parameters plus optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Momentum buffers, aligned with [`Model::named_params`].
    pub momentum: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(&cfg.model_shape(), cfg.seeds.weights)?;
        let momentum = model.named_params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self { model, momentum, epoch: 0 })
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// One forward/backward pass and SGD-momentum update. Nothing is modified
/// when the loss or any gradient is non-finite.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    images: &Tensor,
    labels: &[usize],
    epoch: u64,
    step: usize,
    lr: f64,
) -> Result<StepOutputs> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, true);
    let bound = state.model.bind(&mut binder);
    let vars = binder.finish();
    let mut rng = step_rng(cfg.seeds.counterfactual, epoch, step);
    let cf = cfg.toggles.cra.then_some(&mut rng);
    let pass = forward(&state.model, &bound, &mut tape, images, cfg, Mode::Train, cf)?;

    let Stage1 { ce: ce1, effect, total: stage1 } = stage1_terms(&mut tape, &pass, labels, cfg)?;
    let alpha = stage2_weight(cfg, epoch);
    let (total, stage2) = match pass.stage2 {
        Some(y2) => {
            let ce2 = tape.cross_entropy(y2, labels)?;
            (crate::lls::combine_losses(&mut tape, stage1, ce2, alpha)?, Some(ce2))
        }
        None => (stage1, None),
    };

    let out = StepOutputs {
        stage1_ce: scalar(&tape, ce1),
        effect: effect.map(|e| scalar(&tape, e)),
        gaussian_fit: pass.gaussian_fit.map(|v| scalar(&tape, v)),
        stage1: scalar(&tape, stage1),
        stage2: stage2.map(|v| scalar(&tape, v)),
        alpha,
        total: scalar(&tape, total),
        boxes: pass.boxes.clone(),
    };
    let diagnostic = |what: &str| Error::NonFiniteLoss {
        epoch,
        step,
        components: format!(
            "{what}; stage1_ce={} effect={:?} gaussian_fit={:?} stage2={:?} total={}",
            out.stage1_ce, out.effect, out.gaussian_fit, out.stage2, out.total
        ),
    };
    if !out.total.is_finite() {
        return Err(diagnostic("non-finite loss"));
    }
    let grads = tape.backward(total)?;
    let names: Vec<String> = state.model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, &v) in names.iter().zip(&vars) {
        if grads.get(v).is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(diagnostic(&format!("non-finite gradient for {name}")));
        }
    }

    for ((param, buf), &v) in state.model.params_mut().into_iter().zip(&mut state.momentum).zip(&vars) {
        let Some(g) = grads.get(v) else { continue };
        let p = param.data_mut();
        for ((pi, bi), gi) in p.iter_mut().zip(buf.data_mut()).zip(g) {
            *bi = cfg.momentum * *bi + gi + cfg.weight_decay * *pi;
            *pi -= lr * *bi;
        }
    }
    let Pass {
        backbone_passes,
        attention_nodes,
        ..
    } = pass;
    for f in &backbone_passes {
        state.model.backbone.absorb_stats(&tape, f);
    }
    for &n in &attention_nodes {
        state.model.attention.norm.absorb(&tape, n);
    }
    Ok(out)
}

/// Eval-mode outputs for one batch.
#[derive(Clone, Debug)]
pub struct Inference {
    pub stage1_logits: Tensor,
    /// Stage-2 logits when cropping is on, otherwise stage 1.
    pub logits: Tensor,
    pub counterfactual_logits: Option<Tensor>,
    pub gaussians: Option<Vec<GaussianParams>>,
    /// `[B,h,w]` min-max normalised mean attention.
    pub attention: Tensor,
    pub boxes: Option<Vec<CropBox>>,
    pub crops: Option<Tensor>,
}

pub fn infer(model: &Model, cfg: &TrainConfig, images: &Tensor, counterfactual: Option<&mut ChaCha8Rng>) -> Result<Inference> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, false);
    let bound = model.bind(&mut binder);
    let pass = forward(model, &bound, &mut tape, images, cfg, Mode::Eval, counterfactual)?;
    let stage1_logits = tape.value(pass.y).clone();
    Ok(Inference {
        logits: pass.stage2.map_or_else(|| stage1_logits.clone(), |v| tape.value(v).clone()),
        stage1_logits,
        counterfactual_logits: pass.y_bar.map(|v| tape.value(v).clone()),
        gaussians: pass.gaussian.map(|g| g.read(&tape)),
        attention: pass.attention_norm,
        boxes: pass.boxes,
        crops: pass.crops,
    })
}

/// Whether `label` is among the `k` largest logits (ties go to the lower index).
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let t = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < label))
        .count();
    ahead < k
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetail {
    pub label: usize,
    pub prediction: usize,
    pub gaussian: Option<GaussianParams>,
    pub crop: Option<CropBox>,
    pub peak_in_object: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub top1: f64,
    pub top5: f64,
    pub stage1_top1: f64,
    /// Stage-1 accuracy under learned minus counterfactual attention.
    pub counterfactual_gap: Option<f64>,
    /// Fraction of images whose Gaussian peak lies in the object box.
    pub localization: Option<f64>,
    pub details: Vec<ImageDetail>,
}

pub fn evaluate(model: &Model, dataset: &Dataset, cfg: &TrainConfig, with_gap: bool) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let k = dataset.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.counterfactual ^ EVAL_STREAM);
    let (mut top1, mut top5, mut s1, mut cf) = (0usize, 0usize, 0usize, 0usize);
    let mut details = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(cfg.eval_batch_size) {
        let (images, labels) = dataset.batch(chunk);
        let (h, w) = (images.shape()[2], images.shape()[3]);
        let out = infer(model, cfg, &images, with_gap.then_some(&mut rng))?;
        for (b, (&i, &label)) in chunk.iter().zip(&labels).enumerate() {
            let row = &out.logits.data()[b * k..(b + 1) * k];
            let row1 = &out.stage1_logits.data()[b * k..(b + 1) * k];
            top1 += in_top_k(row, label, 1) as usize;
            top5 += in_top_k(row, label, 5) as usize;
            s1 += in_top_k(row1, label, 1) as usize;
            if let Some(c) = &out.counterfactual_logits {
                cf += in_top_k(&c.data()[b * k..(b + 1) * k], label, 1) as usize;
            }
            let gaussian = out.gaussians.as_ref().map(|g| g[b]);
            let object = dataset.images[i].object_box;
            let peak_in_object = gaussian.zip(object).map(|(g, bx)| {
                let (r, c) = g.peak(h, w);
                bx.contains(r, c)
            });
            let prediction = (0..k).find(|&j| in_top_k(row, j, 1)).expect("some class ranks first");
            details.push(ImageDetail {
                label,
                prediction,
                gaussian,
                crop: out.boxes.as_ref().map(|bx| bx[b]),
                peak_in_object,
            });
        }
    }
    let n = dataset.len() as f64;
    let located: Vec<bool> = details.iter().filter_map(|d| d.peak_in_object).collect();
    Ok(EvalReport {
        count: dataset.len(),
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        stage1_top1: s1 as f64 / n,
        counterfactual_gap: with_gap.then(|| (s1 as f64 - cf as f64) / n),
        localization: (!located.is_empty()).then(|| located.iter().filter(|&&b| b).count() as f64 / located.len() as f64),
        details,
    })
}

/// Per-epoch means of the step losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub alpha: f64,
    pub l_stage1: f64,
    pub l_effect: f64,
    pub l_stage2: f64,
    pub total: f64,
    pub eval: Option<(f64, f64)>,
}

pub const METRICS_HEADER: &str = "epoch,alpha,l_stage1,l_effect,l_stage2,total,top1,top5";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let (t1, t5) = self.eval.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.alpha, self.l_stage1, self.l_effect, self.l_stage2, self.total, t1, t5
        )
    }
}

/// Trains for one epoch over `train`.
pub fn train_epoch(state: &mut TrainState, cfg: &TrainConfig, train: &Dataset) -> Result<EpochRecord> {
    let epoch = state.epoch;
    let steps = train.len().div_ceil(cfg.batch_size);
    let (mut l1, mut le, mut l2, mut tot) = (0.0, 0.0, 0.0, 0.0);
    for (step, idx) in batch_iterator(train.len(), cfg.batch_size, cfg.seeds.weights, epoch).enumerate() {
        let (images, labels) = train.batch(&idx);
        let lr = lr_at(cfg, epoch, step, steps);
        let out = train_step(state, cfg, &images, &labels, epoch, step, lr)?;
        l1 += out.stage1;
        le += out.effect.unwrap_or(0.0);
        l2 += out.stage2.unwrap_or(0.0);
        tot += out.total;
    }
    state.epoch += 1;
    let n = steps as f64;
    Ok(EpochRecord {
        epoch,
        alpha: stage2_weight(cfg, epoch),
        l_stage1: l1 / n,
        l_effect: le / n,
        l_stage2: l2 / n,
        total: tot / n,
        eval: None,
    })
}

pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic(_) => generate_synthetic(&cfg.synthetic_spec().expect("synthetic source")),
        DataSource::Folder { train, test } => {
            let tr = load_image_folder(train, cfg.image_side)?;
            let te = load_image_folder(test, cfg.image_side)?;
            for ds in [&tr, &te] {
                if ds.num_classes != cfg.num_classes {
                    return Err(Error::config(
                        "num_classes",
                        format!("config says {} but the folder has {} classes", cfg.num_classes, ds.num_classes),
                    ));
                }
            }
            Ok((tr, te))
        }
    }
}

/// Called after every epoch with the record (including any evaluation) and
/// the state.
pub trait EpochObserver {
    fn epoch_done(&mut self, record: &EpochRecord, state: &TrainState) -> Result<()>;
}

impl EpochObserver for () {
    fn epoch_done(&mut self, _: &EpochRecord, _: &TrainState) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub final_eval: EvalReport,
}

/// Trains from `state` up to `cfg.epochs`, evaluating on `test` per
/// `eval_every` and always after the last epoch.
pub fn run_from(
    mut state: TrainState,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn EpochObserver,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut history = Vec::new();
    let mut final_eval = None;
    while state.epoch < cfg.epochs {
        let mut record = train_epoch(&mut state, cfg, train)?;
        let last = state.epoch == cfg.epochs;
        if last || (cfg.eval_every > 0 && state.epoch % cfg.eval_every == 0) {
            let report = evaluate(&state.model, test, cfg, last && cfg.toggles.cra)?;
            record.eval = Some((report.top1, report.top5));
            if last {
                final_eval = Some(report);
            }
        }
        observer.epoch_done(&record, &state)?;
        history.push(record);
    }
    let final_eval = match final_eval {
        Some(r) => r,
        None => evaluate(&state.model, test, cfg, cfg.toggles.cra)?,
    };
    Ok(RunOutcome {
        state,
        history,
        final_eval,
    })
}

pub fn run(cfg: &TrainConfig, train: &Dataset, test: &Dataset, observer: &mut dyn EpochObserver) -> Result<RunOutcome> {
    run_from(TrainState::new(cfg)?, cfg, train, test, observer)
}
