//! Multi-task training (classification plus coefficient regression),
//! evaluation metrics, a coefficient-sequence control classifier, and
//! classification-head transfer.
//!
//! ```
//! use evmorph::autodiff::Mat;
//! use evmorph::event::Image;
//! use evmorph::stvit::ModelConfig;
//! use evmorph::training::{evaluate, train, TrainConfig, VideoSample};
//!
//! let config = ModelConfig::tiny();
//! let samples: Vec<VideoSample> = (0..2)
//!     .map(|class| {
//!         let frames = vec![Image::constant(8, 8, 1, class as f64); config.seq_len];
//!         let targets = Mat::zeros(config.seq_len, config.alpha_dim);
//!         VideoSample::new(frames, targets, class, config.seq_len).unwrap()
//!     })
//!     .collect();
//!
//! let tc = TrainConfig { epochs: 2, batch_size: 1, ..TrainConfig::default() };
//! let (params, history) = train(&samples, &config, &tc).unwrap();
//! assert_eq!(history.len(), 2);
//!
//! let metrics = evaluate(&config, &params, &samples).unwrap();
//! assert!(metrics.top1 <= 1.0);
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::event::Image;
use crate::face3d::AlphaSequence;
use crate::stvit::{
    self, build_forward, init_params, Binding, ForwardVars, ModelConfig, ModelOutput, ParamStore,
};

/// One labeled clip: event frames, per-frame coefficient targets, and a class.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Image>,
    /// frames.len() x K, one target row per frame.
    pub alpha_targets: Mat,
    pub class_label: usize,
    /// Frames beyond this index are padding.
    pub valid_len: usize,
}

impl VideoSample {
    pub fn new(
        frames: Vec<Image>,
        alpha_targets: Mat,
        class_label: usize,
        valid_len: usize,
    ) -> Result<Self> {
        if frames.is_empty() || valid_len == 0 || valid_len > frames.len() {
            return Err(Error::InvalidArgument(format!(
                "valid_len {valid_len} out of range for {} frames",
                frames.len()
            )));
        }
        if alpha_targets.nrows() != frames.len() {
            return Err(Error::Shape(format!(
                "{} coefficient rows for {} frames",
                alpha_targets.nrows(),
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            alpha_targets,
            class_label,
            valid_len,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the coefficient-regression loss.
    pub lambda_balance: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Update only the classification head (used after a head swap).
    pub train_head_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_balance: 1.0,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            train_head_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.lambda_balance < 0.0 {
            problems.push("lambda_balance must be >= 0");
        }
        if self.learning_rate < 0.0 {
            problems.push("learning_rate must be >= 0");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub train_top1: f64,
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Cross-entropy from raw logits, numerically stable.
pub fn cross_entropy(logits: &DVector<f64>, class: usize) -> f64 {
    let mx = logits.max();
    let log_sum: f64 = logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    -(logits[class] - mx - log_sum)
}

/// Total loss: cross-entropy plus `lambda` times the per-frame mean squared
/// coefficient error over the valid frames.
pub fn loss_total(output: &ModelOutput, sample: &VideoSample, lambda: f64) -> Result<f64> {
    if sample.class_label >= output.class_logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class label {} out of range",
            sample.class_label
        )));
    }
    if output.alpha_pred.nrows() < sample.valid_len
        || output.alpha_pred.ncols() != sample.alpha_targets.ncols()
    {
        return Err(Error::Shape(
            "prediction and target coefficient shapes disagree".into(),
        ));
    }
    let ce = cross_entropy(&output.class_logits, sample.class_label);
    let mut sq = 0.0;
    for t in 0..sample.valid_len {
        let diff = output.alpha_pred.row(t) - sample.alpha_targets.row(t);
        sq += diff.norm_squared();
    }
    Ok(ce + lambda * sq / sample.valid_len as f64)
}

/// Builds the same loss into a graph, for backpropagation.
pub fn build_loss(
    g: &mut Graph,
    fwd: &ForwardVars,
    sample: &VideoSample,
    lambda: f64,
) -> Var {
    let num_classes = g.value(fwd.class_logits).ncols();
    let log_probs = g.log_softmax_rows(fwd.class_logits);
    let mut one_hot = Mat::zeros(1, num_classes);
    one_hot[(0, sample.class_label)] = 1.0;
    let oh = g.constant(one_hot);
    let picked = g.mul_elem(log_probs, oh);
    let picked_sum = g.sum_all(picked);
    let ce = g.scale_const(picked_sum, -1.0);
    if lambda == 0.0 {
        return ce;
    }
    let valid = fwd.valid_len;
    let pred = g.slice_rows(fwd.alpha_pred, 0, valid);
    let target = g.constant(sample.alpha_targets.rows(0, valid).into_owned());
    let diff = g.sub(pred, target);
    let sq = g.mul_elem(diff, diff);
    let sum = g.sum_all(sq);
    let l_alpha = g.scale_const(sum, lambda / valid as f64);
    g.add(ce, l_alpha)
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update with the given gradients. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.nrows(), grad.ncols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.nrows(), grad.ncols()));
            for i in 0..grad.nrows() {
                for j in 0..grad.ncols() {
                    let gij = grad[(i, j)];
                    m[(i, j)] = self.beta1 * m[(i, j)] + (1.0 - self.beta1) * gij;
                    v[(i, j)] = self.beta2 * v[(i, j)] + (1.0 - self.beta2) * gij * gij;
                    let mh = m[(i, j)] / bc1;
                    let vh = v[(i, j)] / bc2;
                    p[(i, j)] -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

fn accumulate(total: &mut BTreeMap<String, Mat>, grads: Vec<(String, Mat)>, scale: f64) {
    for (name, g) in grads {
        match total.get_mut(&name) {
            Some(acc) => *acc += g * scale,
            None => {
                total.insert(name, g * scale);
            }
        }
    }
}

fn argmax(logits: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

fn check_dataset(dataset: &[VideoSample], config: &ModelConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.class_label >= config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: class {} out of range ({} classes)",
                s.class_label, config.num_classes
            )));
        }
        if s.alpha_targets.ncols() != config.alpha_dim {
            return Err(Error::Shape(format!(
                "sample {i}: {} coefficients, model expects {}",
                s.alpha_targets.ncols(),
                config.alpha_dim
            )));
        }
    }
    Ok(())
}

/// Trains from freshly initialized parameters.
pub fn train(
    dataset: &[VideoSample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ParamStore, Vec<EpochStats>)> {
    let params = init_params(model_config, train_config.seed);
    train_from(params, dataset, model_config, train_config)
}

/// Trains starting from the given parameters. Deterministic under the seed:
/// per-sample gradients may be computed in parallel but are reduced in a
/// fixed order.
pub fn train_from(
    mut params: ParamStore,
    dataset: &[VideoSample],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ParamStore, Vec<EpochStats>)> {
    model_config.validate()?;
    train_config.validate()?;
    check_dataset(dataset, model_config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed.wrapping_add(0x5eed));
    let mut opt = Adam::new(train_config);
    let mut history = Vec::with_capacity(train_config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(train_config.batch_size) {
            let results: Vec<Result<(f64, usize, Vec<(String, Mat)>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let sample = &dataset[idx];
                    let mut g = Graph::new();
                    let mut b = Binding::new(&params);
                    let fwd = build_forward(
                        &mut g,
                        &mut b,
                        model_config,
                        &sample.frames,
                        sample.valid_len,
                    )?;
                    let loss = build_loss(&mut g, &fwd, sample, train_config.lambda_balance);
                    let loss_value = g.scalar_value(loss);
                    let logits = g.value(fwd.class_logits);
                    let logits =
                        DVector::from_iterator(logits.ncols(), logits.iter().copied());
                    g.backward(loss);
                    Ok((loss_value, argmax(&logits), g.param_grads()))
                })
                .collect();
            let mut grads = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for (&idx, res) in batch.iter().zip(results) {
                let (loss_value, pred, sample_grads) = res?;
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {loss_value} on sample {idx}"
                    )));
                }
                loss_sum += loss_value;
                if pred == dataset[idx].class_label {
                    correct += 1;
                }
                accumulate(&mut grads, sample_grads, scale);
            }
            if train_config.train_head_only {
                grads.retain(|name, _| name.starts_with("head.class."));
            }
            opt.step(&mut params, &grads);
        }
        history.push(EpochStats {
            mean_loss: loss_sum / dataset.len() as f64,
            train_top1: correct as f64 / dataset.len() as f64,
        });
    }
    Ok((params, history))
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Accuracy and confusion statistics over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    /// Per true class; `None` for classes with no samples.
    pub per_class: Vec<Option<f64>>,
    /// confusion[true][predicted], predictions by top-1.
    pub confusion: Vec<Vec<usize>>,
}

/// Class indices sorted by descending logit; ties broken by lower index.
fn ranked_classes(logits: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Computes metrics from per-sample logits and true labels.
pub fn metrics_from_logits(
    logits: &[DVector<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<Metrics> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "logits and labels must be non-empty and equal length".into(),
        ));
    }
    let n = logits.len() as f64;
    let mut top = [0usize; 3];
    let ks = [1usize, 3, 5];
    let mut per_total = vec![0usize; num_classes];
    let mut per_correct = vec![0usize; num_classes];
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (lg, &label) in logits.iter().zip(labels) {
        if label >= num_classes || lg.len() != num_classes {
            return Err(Error::InvalidArgument("label or logit size out of range".into()));
        }
        let ranked = ranked_classes(lg);
        for (slot, &k) in ks.iter().enumerate() {
            if ranked[..k.min(num_classes)].contains(&label) {
                top[slot] += 1;
            }
        }
        per_total[label] += 1;
        if ranked[0] == label {
            per_correct[label] += 1;
        }
        confusion[label][ranked[0]] += 1;
    }
    let per_class = (0..num_classes)
        .map(|c| {
            if per_total[c] == 0 {
                None
            } else {
                Some(per_correct[c] as f64 / per_total[c] as f64)
            }
        })
        .collect();
    Ok(Metrics {
        top1: top[0] as f64 / n,
        top3: top[1] as f64 / n,
        top5: top[2] as f64 / n,
        per_class,
        confusion,
    })
}

/// Runs the model over the dataset and computes metrics.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParamStore,
    dataset: &[VideoSample],
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let outputs: Vec<Result<DVector<f64>>> = dataset
        .par_iter()
        .map(|s| {
            let out = stvit::forward(config, params, &s.frames, s.valid_len)?;
            Ok(out.class_logits)
        })
        .collect();
    let mut logits = Vec::with_capacity(dataset.len());
    for o in outputs {
        logits.push(o?);
    }
    let labels: Vec<usize> = dataset.iter().map(|s| s.class_label).collect();
    metrics_from_logits(&logits, &labels, config.num_classes)
}

impl Metrics {
    /// Machine-readable report: one `name,value` line per metric, per-class
    /// columns last; classes without samples render `-`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("top1,{}\n", self.top1));
        out.push_str(&format!("top3,{}\n", self.top3));
        out.push_str(&format!("top5,{}\n", self.top5));
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => out.push_str(&format!("class_{c},{a}\n")),
                None => out.push_str(&format!("class_{c},-\n")),
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Metrics> {
        let mut top = [f64::NAN; 3];
        let mut per_class = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let (name, value) = line.split_once(',').ok_or_else(|| Error::Parse {
                path: "<metrics>".into(),
                line: i + 1,
                msg: "expected name,value".into(),
            })?;
            let parse = |v: &str| -> Result<f64> {
                v.trim().parse().map_err(|_| Error::Parse {
                    path: "<metrics>".into(),
                    line: i + 1,
                    msg: format!("bad number '{v}'"),
                })
            };
            match name.trim() {
                "top1" => top[0] = parse(value)?,
                "top3" => top[1] = parse(value)?,
                "top5" => top[2] = parse(value)?,
                n if n.starts_with("class_") => {
                    per_class.push(if value.trim() == "-" {
                        None
                    } else {
                        Some(parse(value)?)
                    });
                }
                other => {
                    return Err(Error::Parse {
                        path: "<metrics>".into(),
                        line: i + 1,
                        msg: format!("unknown metric '{other}'"),
                    })
                }
            }
        }
        if top.iter().any(|v| v.is_nan()) {
            return Err(Error::Format("metrics report missing top-k rows".into()));
        }
        let n = per_class.len();
        Ok(Metrics {
            top1: top[0],
            top3: top[1],
            top5: top[2],
            per_class,
            confusion: vec![vec![0; n]; n],
        })
    }

    /// Human-readable table.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "top1 {:.4}  top3 {:.4}  top5 {:.4}\n",
            self.top1, self.top3, self.top5
        ));
        out.push_str("class accuracy\n");
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => out.push_str(&format!("{c:5} {a:.4}\n")),
                None => out.push_str(&format!("{c:5} -\n")),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// coefficient-sequence control classifier
// ---------------------------------------------------------------------------

/// Configuration of the sequence classifier over coefficient inputs:
/// a linear projection to the embedding width followed by the temporal
/// transformer and the classification head. Defaults follow the control
/// setup: 2 layers, 2 heads.
pub fn alpha_classifier_config(k: usize, num_classes: usize, seq_len: usize) -> ModelConfig {
    ModelConfig {
        image_size: 0, // unused: no image branch
        in_channels: 0,
        patch_size: 0,
        embed_dim: 32,
        spatial_depth: 0,
        temporal_depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes,
        alpha_dim: k,
        seq_len,
        mask_diagonal: true,
        head_hidden: 0,
    }
}

fn alpha_classifier_validate(config: &ModelConfig) -> Result<()> {
    if config.embed_dim == 0 || config.heads == 0 || config.embed_dim % config.heads != 0 {
        return Err(Error::InvalidArgument(
            "embed_dim must be positive and divisible by heads".into(),
        ));
    }
    if config.num_classes < 2 || config.seq_len == 0 || config.alpha_dim == 0 {
        return Err(Error::InvalidArgument(
            "num_classes >= 2, seq_len >= 1, alpha_dim >= 1 required".into(),
        ));
    }
    Ok(())
}

/// Initializes only the parameters the coefficient classifier uses.
pub fn init_alpha_classifier_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let full = ModelConfig {
        // reuse the shared initializer with a minimal image branch
        image_size: 2,
        in_channels: 1,
        patch_size: 2,
        head_hidden: 1,
        ..config.clone()
    };
    let mut params = init_params(&full, seed);
    // replace the token projection with a coefficient projection (K -> d)
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xa1fa));
    let d = config.embed_dim;
    let k = config.alpha_dim;
    let bound = (6.0 / (k + d) as f64).sqrt();
    params.insert(
        "embed.proj.w",
        Mat::from_fn(k, d, |_, _| rng.gen_range(-bound..bound)),
    );
    params.insert("embed.proj.b", Mat::zeros(1, d));
    // drop the unused image-branch parameters
    for name in params.names() {
        if name.starts_with("spatial.") || name.starts_with("head.alpha.") {
            params.remove(&name);
        }
    }
    params
}

fn alpha_classifier_logits(
    config: &ModelConfig,
    params: &ParamStore,
    seq: &AlphaSequence,
    backward_loss: Option<usize>,
) -> Result<(DVector<f64>, Option<(f64, Vec<(String, Mat)>)>)> {
    let l = seq.frames.len();
    if l == 0 || l > config.seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {l} out of range (seq_len {})",
            config.seq_len
        )));
    }
    let mut rows = Mat::zeros(l, config.alpha_dim);
    for (t, alpha) in seq.frames.iter().enumerate() {
        if alpha.len() != config.alpha_dim {
            return Err(Error::InvalidArgument(format!(
                "frame {t} has {} coefficients, expected {}",
                alpha.len(),
                config.alpha_dim
            )));
        }
        rows.row_mut(t).copy_from(&alpha.transpose());
    }
    let mut g = Graph::new();
    let mut b = Binding::new(params);
    let x = g.constant(rows);
    let wv = b.var(&mut g, "embed.proj.w");
    let bv = b.var(&mut g, "embed.proj.b");
    let proj = g.matmul(x, wv);
    let proj = g.add_row_broadcast(proj, bv);
    let valid = vec![true; l];
    let (_, video) = stvit::temporal_encode(&mut g, &mut b, config, proj, &valid);
    let lng = b.var(&mut g, "head.class.ln.g");
    let lnb = b.var(&mut g, "head.class.ln.b");
    let normed = g.layer_norm(video, lng, lnb);
    let wc = b.var(&mut g, "head.class.w");
    let bc = b.var(&mut g, "head.class.b");
    let logits_v = g.matmul(normed, wc);
    let logits_v = g.add_row_broadcast(logits_v, bc);
    let lv = g.value(logits_v);
    let logits = DVector::from_iterator(lv.ncols(), lv.iter().copied());
    let grad_out = if let Some(label) = backward_loss {
        let log_probs = g.log_softmax_rows(logits_v);
        let mut one_hot = Mat::zeros(1, config.num_classes);
        one_hot[(0, label)] = 1.0;
        let oh = g.constant(one_hot);
        let picked = g.mul_elem(log_probs, oh);
        let s = g.sum_all(picked);
        let loss = g.scale_const(s, -1.0);
        let loss_value = g.scalar_value(loss);
        g.backward(loss);
        Some((loss_value, g.param_grads()))
    } else {
        None
    };
    Ok((logits, grad_out))
}

/// Trains a classifier on coefficient sequences alone (no images) and
/// reports metrics on a held-out 20% split, selected deterministically
/// under the training seed.
pub fn train_alpha_classifier(
    sequences: &[AlphaSequence],
    labels: &[usize],
    config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ParamStore, Metrics)> {
    alpha_classifier_validate(config)?;
    train_config.validate()?;
    if sequences.is_empty() || sequences.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "sequences and labels must be non-empty and equal length".into(),
        ));
    }
    let k = config.alpha_dim;
    for (i, s) in sequences.iter().enumerate() {
        if s.frames.iter().any(|a| a.len() != k) {
            return Err(Error::InvalidArgument(format!(
                "sequence {i} does not share coefficient dimension {k}"
            )));
        }
        if labels[i] >= config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range",
                labels[i]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed.wrapping_add(0x511));
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng);
    let n_test = (sequences.len() / 5).max(1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut params = init_alpha_classifier_params(config, train_config.seed);
    let mut opt = Adam::new(train_config);
    let mut train_order = train_idx.to_vec();
    for _epoch in 0..train_config.epochs {
        train_order.shuffle(&mut rng);
        for batch in train_order.chunks(train_config.batch_size) {
            let results: Vec<Result<(f64, Vec<(String, Mat)>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let (_, grad) = alpha_classifier_logits(
                        config,
                        &params,
                        &sequences[idx],
                        Some(labels[idx]),
                    )?;
                    Ok(grad.unwrap())
                })
                .collect();
            let mut grads = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for res in results {
                let (loss_value, sample_grads) = res?;
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!("non-finite loss {loss_value}")));
                }
                accumulate(&mut grads, sample_grads, scale);
            }
            opt.step(&mut params, &grads);
        }
    }
    let mut logits = Vec::with_capacity(test_idx.len());
    let mut test_labels = Vec::with_capacity(test_idx.len());
    for &idx in test_idx {
        let (lg, _) = alpha_classifier_logits(config, &params, &sequences[idx], None)?;
        logits.push(lg);
        test_labels.push(labels[idx]);
    }
    let metrics = metrics_from_logits(&logits, &test_labels, config.num_classes)?;
    Ok((params, metrics))
}

// ---------------------------------------------------------------------------
// head transfer
// ---------------------------------------------------------------------------

/// Replaces the final classification layer with a freshly initialized one of
/// `new_num_classes` outputs; every other parameter is retained.
pub fn finetune_head(
    params: &ParamStore,
    config: &ModelConfig,
    new_num_classes: usize,
    seed: u64,
) -> Result<(ParamStore, ModelConfig)> {
    if new_num_classes < 2 {
        return Err(Error::InvalidArgument(
            "new_num_classes must be >= 2".into(),
        ));
    }
    let mut out = params.clone();
    let d = config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (d + new_num_classes) as f64).sqrt();
    out.insert(
        "head.class.w",
        Mat::from_fn(d, new_num_classes, |_, _| rng.gen_range(-bound..bound)),
    );
    out.insert("head.class.b", Mat::zeros(1, new_num_classes));
    let mut new_config = config.clone();
    new_config.num_classes = new_num_classes;
    Ok((out, new_config))
}

// ---------------------------------------------------------------------------
// training manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line:
/// `video_id, event_frames_dir_or_file, alpha_file, class_label, split`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub frames_path: PathBuf,
    pub alpha_path: PathBuf,
    pub class_label: usize,
    pub split: Split,
}

pub fn load_training_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let class_label = fields[3]
            .parse()
            .map_err(|_| err(format!("bad class label '{}'", fields[3])))?;
        let split = match fields[4] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(format!("bad split '{other}'"))),
        };
        entries.push(ManifestEntry {
            video_id: fields[0].to_string(),
            frames_path: PathBuf::from(fields[1]),
            alpha_path: PathBuf::from(fields[2]),
            class_label,
            split,
        });
    }
    Ok(entries)
}

pub fn save_training_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        let split = match e.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            e.video_id,
            e.frames_path.display(),
            e.alpha_path.display(),
            e.class_label,
            split
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Image;

    fn output(logits: Vec<f64>, alpha: Mat) -> ModelOutput {
        ModelOutput {
            class_logits: DVector::from_vec(logits),
            alpha_pred: alpha,
        }
    }

    fn sample_with_targets(targets: Mat, label: usize) -> VideoSample {
        let l = targets.nrows();
        VideoSample::new(
            (0..l).map(|_| Image::constant(2, 2, 1, 0.0)).collect(),
            targets,
            label,
            l,
        )
        .unwrap()
    }

    #[test]
    fn loss_perfect_prediction_is_zero() {
        let mut logits = vec![0.0; 24];
        logits[3] = 60.0;
        let targets = Mat::from_fn(2, 4, |i, j| (i + j) as f64);
        let sample = sample_with_targets(targets.clone(), 3);
        let out = output(logits, targets);
        let loss = loss_total(&out, &sample, 1.0).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn loss_uniform_logits_is_ln24() {
        let logits = vec![0.7; 24];
        let targets = Mat::zeros(3, 4);
        let sample = sample_with_targets(targets.clone(), 11);
        let out = output(logits, targets);
        let loss = loss_total(&out, &sample, 1.0).unwrap();
        assert!((loss - (24.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 24;
        let (l, k) = (5usize, 4usize);
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pred = Mat::from_fn(l, k, |_, _| rng.gen_range(-1.0..1.0));
        let targets = Mat::from_fn(l, k, |_, _| rng.gen_range(-1.0..1.0));
        let label = 7;
        let lambda = 0.6;
        let valid = 4; // last frame is padding
        let mut sample = sample_with_targets(targets.clone(), label);
        sample.valid_len = valid;
        let out = output(logits.clone(), pred.clone());
        let loss = loss_total(&out, &sample, lambda).unwrap();

        // independent naive computation
        let mut denom = 0.0;
        for &v in &logits {
            denom += v.exp();
        }
        let ce = -(logits[label].exp() / denom).ln();
        let mut sq = 0.0;
        for t in 0..valid {
            for j in 0..k {
                let d = pred[(t, j)] - targets[(t, j)];
                sq += d * d;
            }
        }
        let expected = ce + lambda * sq / valid as f64;
        assert!((loss - expected).abs() < 1e-9);

        // graph version agrees
        let mut g = Graph::new();
        let fwd = ForwardVars {
            class_logits: g.constant(Mat::from_fn(1, c, |_, j| logits[j])),
            alpha_pred: g.constant(pred),
            valid_len: valid,
        };
        let lv = build_loss(&mut g, &fwd, &sample, lambda);
        assert!((g.scalar_value(lv) - expected).abs() < 1e-9);
    }

    #[test]
    fn loss_lambda_zero_ignores_targets() {
        let logits = vec![0.1, 0.9, -0.3, 0.0];
        let t1 = Mat::zeros(2, 3);
        let t2 = Mat::repeat(2, 3, 42.0);
        let s1 = sample_with_targets(t1, 1);
        let s2 = sample_with_targets(t2, 1);
        let out = output(logits, Mat::repeat(2, 3, 0.5));
        let l1 = loss_total(&out, &s1, 0.0).unwrap();
        let l2 = loss_total(&out, &s2, 0.0).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let config = TrainConfig::default();
        let mut opt = Adam::new(&config);
        let mut params = ParamStore::new();
        params.insert("w", Mat::repeat(2, 2, 1.5));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Mat::zeros(2, 2));
        let before = params.get("w").unwrap().clone();
        for _ in 0..5 {
            opt.step(&mut params, &grads);
        }
        assert_eq!(*params.get("w").unwrap(), before);
    }

    fn tiny_dataset(n: usize, classes: usize, seed: u64) -> Vec<VideoSample> {
        use rand::{Rng, SeedableRng};
        let config = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % classes;
                let frames: Vec<Image> = (0..config.seq_len)
                    .map(|_| {
                        // class-dependent pattern plus noise
                        let vals: Vec<f64> = (0..64)
                            .map(|p| {
                                let bias = if p % classes == label { 0.8 } else { 0.1 };
                                bias + rng.gen_range(-0.05..0.05)
                            })
                            .collect();
                        Image::new(8, 8, 1, vals).unwrap()
                    })
                    .collect();
                let targets = Mat::from_fn(config.seq_len, config.alpha_dim, |_, j| {
                    if j == label { 1.0 } else { 0.0 }
                });
                VideoSample::new(frames, targets, label, config.seq_len).unwrap()
            })
            .collect()
    }

    #[test]
    fn train_zero_learning_rate_keeps_params() {
        let config = ModelConfig::tiny();
        let dataset = tiny_dataset(4, 2, 1);
        let tc = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let init = init_params(&config, tc.seed);
        let (trained, _) = train(&dataset, &config, &tc).unwrap();
        assert_eq!(init, trained);
    }

    #[test]
    fn train_is_deterministic_under_seed() {
        let config = ModelConfig::tiny();
        let dataset = tiny_dataset(4, 2, 2);
        let tc = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&dataset, &config, &tc).unwrap();
        let (p2, h2) = train(&dataset, &config, &tc).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn train_aborts_on_non_finite_loss() {
        let config = ModelConfig::tiny();
        let mut dataset = tiny_dataset(2, 2, 3);
        dataset[0].alpha_targets[(0, 0)] = f64::NAN;
        let tc = TrainConfig {
            epochs: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        match train(&dataset, &config, &tc) {
            Err(Error::Diverged(_)) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn train_reduces_loss() {
        let config = ModelConfig::tiny();
        let dataset = tiny_dataset(4, 2, 4);
        let tc = TrainConfig {
            epochs: 30,
            seed: 2,
            ..TrainConfig::default()
        };
        let (_, history) = train(&dataset, &config, &tc).unwrap();
        let first = history.first().unwrap().mean_loss;
        let last = history.last().unwrap().mean_loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn metrics_perfect_classifier() {
        let logits: Vec<DVector<f64>> = (0..6)
            .map(|i| {
                let mut v = DVector::zeros(24);
                v[i % 24] = 10.0;
                v
            })
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 24).collect();
        let m = metrics_from_logits(&logits, &labels, 24).unwrap();
        assert_eq!(m.top1, 1.0);
        assert_eq!(m.top3, 1.0);
        assert_eq!(m.top5, 1.0);
    }

    #[test]
    fn metrics_constant_logits_tie_rule() {
        // balanced 24-class data, constant logits: ties go to lower class
        // indices, so only class 0 is top-1 correct
        let logits: Vec<DVector<f64>> = (0..24).map(|_| DVector::zeros(24)).collect();
        let labels: Vec<usize> = (0..24).collect();
        let m = metrics_from_logits(&logits, &labels, 24).unwrap();
        assert!((m.top1 - 1.0 / 24.0).abs() < 1e-12);
        assert!((m.top3 - 3.0 / 24.0).abs() < 1e-12);
        assert!((m.top5 - 5.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_hand_counted_confusion() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 5;
        let n = 20;
        let logits: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(c, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let m = metrics_from_logits(&logits, &labels, c).unwrap();
        // hand count
        let mut confusion = vec![vec![0usize; c]; c];
        let mut top1 = 0;
        for (lg, &label) in logits.iter().zip(&labels) {
            let mut best = 0;
            for j in 1..c {
                if lg[j] > lg[best] {
                    best = j;
                }
            }
            confusion[label][best] += 1;
            if best == label {
                top1 += 1;
            }
        }
        assert_eq!(m.confusion, confusion);
        assert!((m.top1 - top1 as f64 / n as f64).abs() < 1e-12);
        assert!(m.top1 <= m.top3 && m.top3 <= m.top5);
    }

    #[test]
    fn metrics_absent_class_is_none_and_renders_dash() {
        let logits = vec![DVector::from_vec(vec![1.0, 0.0, 0.0])];
        let labels = vec![0];
        let m = metrics_from_logits(&logits, &labels, 3).unwrap();
        assert_eq!(m.per_class[0], Some(1.0));
        assert_eq!(m.per_class[1], None);
        let csv = m.to_csv();
        assert!(csv.contains("class_1,-"));
        let back = Metrics::from_csv(&csv).unwrap();
        assert_eq!(back.top1, m.top1);
        assert_eq!(back.top3, m.top3);
        assert_eq!(back.top5, m.top5);
        assert_eq!(back.per_class, m.per_class);
    }

    fn separable_sequences(
        n: usize,
        k: usize,
        len: usize,
        seed: u64,
    ) -> (Vec<AlphaSequence>, Vec<usize>) {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let frames = (0..len)
                .map(|_| {
                    DVector::from_fn(k, |j, _| {
                        let base = if j == label { 1.0 } else { 0.0 };
                        base + rng.gen_range(-0.1..0.1)
                    })
                })
                .collect();
            seqs.push(AlphaSequence { frames });
            labels.push(label);
        }
        (seqs, labels)
    }

    #[test]
    fn alpha_classifier_separable_reaches_full_accuracy() {
        let (seqs, labels) = separable_sequences(30, 4, 4, 10);
        let config = alpha_classifier_config(4, 2, 4);
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 6,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, metrics) = train_alpha_classifier(&seqs, &labels, &config, &tc).unwrap();
        assert_eq!(metrics.top1, 1.0, "metrics: {metrics:?}");
    }

    #[test]
    fn alpha_classifier_shuffled_labels_near_chance() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (seqs, mut labels) = separable_sequences(100, 4, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        labels.shuffle(&mut rng);
        let config = alpha_classifier_config(4, 2, 4);
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 10,
            seed: 4,
            ..TrainConfig::default()
        };
        let (_, metrics) = train_alpha_classifier(&seqs, &labels, &config, &tc).unwrap();
        // 20 test samples, chance 0.5, 3 sigma of binomial = 0.335
        assert!(
            (metrics.top1 - 0.5).abs() <= 0.34,
            "top1 {} too far from chance",
            metrics.top1
        );
    }

    #[test]
    fn alpha_classifier_k_mismatch_is_error() {
        let (mut seqs, labels) = separable_sequences(10, 4, 4, 12);
        seqs[3].frames[0] = DVector::zeros(7);
        let config = alpha_classifier_config(4, 2, 4);
        let tc = TrainConfig::default();
        assert!(train_alpha_classifier(&seqs, &labels, &config, &tc).is_err());
    }

    #[test]
    fn finetune_head_swaps_shape_and_keeps_backbone() {
        let config = ModelConfig::tiny();
        let params = init_params(&config, 20);
        let (swapped, new_config) = finetune_head(&params, &config, 8, 21).unwrap();
        assert_eq!(new_config.num_classes, 8);
        assert_eq!(swapped.get("head.class.w").unwrap().ncols(), 8);
        assert_eq!(swapped.get("head.class.b").unwrap().ncols(), 8);
        for (name, m) in params.iter() {
            if !name.starts_with("head.class.w") && !name.starts_with("head.class.b") {
                assert_eq!(swapped.get(name).unwrap(), m, "{name} changed");
            }
        }
        // forward produces logits of the new shape
        let frames = vec![Image::constant(8, 8, 1, 0.5)];
        let out = stvit::forward(&new_config, &swapped, &frames, 1).unwrap();
        assert_eq!(out.class_logits.len(), 8);
    }

    #[test]
    fn finetune_head_same_count_keeps_backbone_bitwise() {
        let config = ModelConfig::tiny();
        let params = init_params(&config, 22);
        let (swapped, _) = finetune_head(&params, &config, config.num_classes, 23).unwrap();
        for (name, m) in params.iter() {
            if !name.starts_with("head.class.w") && !name.starts_with("head.class.b") {
                assert_eq!(swapped.get(name).unwrap(), m);
            }
        }
    }

    #[test]
    fn finetune_head_leaves_regression_path_untouched() {
        let config = ModelConfig::tiny();
        let params = init_params(&config, 24);
        let frames = vec![Image::constant(8, 8, 1, 0.3), Image::constant(8, 8, 1, 0.6)];
        let before = stvit::forward(&config, &params, &frames, 2).unwrap();
        let (swapped, new_config) = finetune_head(&params, &config, 3, 25).unwrap();
        let after = stvit::forward(&new_config, &swapped, &frames, 2).unwrap();
        assert_eq!(before.alpha_pred, after.alpha_pred);
    }

    #[test]
    fn finetune_head_rejects_small_class_count() {
        let config = ModelConfig::tiny();
        let params = init_params(&config, 26);
        assert!(finetune_head(&params, &config, 1, 0).is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let entries = vec![
            ManifestEntry {
                video_id: "v0".into(),
                frames_path: "data/v0.evbin".into(),
                alpha_path: "data/v0.alpha".into(),
                class_label: 3,
                split: Split::Train,
            },
            ManifestEntry {
                video_id: "v1".into(),
                frames_path: "data/v1.evbin".into(),
                alpha_path: "data/v1.alpha".into(),
                class_label: 0,
                split: Split::Test,
            },
        ];
        save_training_manifest(&entries, &path).unwrap();
        let back = load_training_manifest(&path).unwrap();
        assert_eq!(back, entries);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "v0,a,b,3,train\nv1,a,b,x,test\n").unwrap();
        match load_training_manifest(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
