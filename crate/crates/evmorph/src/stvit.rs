//! Spatio-temporal vision transformer with Shifted Patch Tokenization and
//! Locality Self-Attention.
//!
//! Each frame is tokenized by concatenating the image with four diagonally
//! shifted copies (channel order `[x, lu, ru, ld, rd]`, shift magnitude
//! `patch_size / 2`, zero padding at exposed borders) before non-overlapping
//! patchification. A spatial transformer with LSA (diagonal masking plus a
//! per-layer temperature learned in log-space) summarizes each frame into a
//! CLS token; a temporal transformer over the sequence of spatial CLS tokens
//! produces per-frame outputs for the coefficient-regression head and a
//! temporal CLS for the classification head.
//!
//! ```
//! use evmorph::event::Image;
//! use evmorph::stvit::{forward, init_params, shifted_patch_tokenize, ModelConfig};
//!
//! let config = ModelConfig::tiny(); // 8x8 input, 4x4 patches, 1 channel
//! let image = Image::constant(8, 8, 1, 0.5);
//!
//! // Tokens: one row per patch, 5 * C * p^2 features (image + 4 shifted copies).
//! let tokens = shifted_patch_tokenize(&image, config.patch_size).unwrap();
//! assert_eq!(tokens.nrows(), config.n_patches());
//! assert_eq!(tokens.ncols(), 5 * config.in_channels * config.patch_size * config.patch_size);
//!
//! // A full forward pass over a 2-frame clip.
//! let params = init_params(&config, 0);
//! let output = forward(&config, &params, &[image.clone(), image], 2).unwrap();
//! assert_eq!(output.class_logits.len(), config.num_classes);
//! assert_eq!(output.alpha_pred.nrows(), 2);
//! assert_eq!(output.alpha_pred.ncols(), config.alpha_dim);
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var, MASK_NEG};
use crate::error::{Error, Result};
use crate::event::Image;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Input side length (H = W).
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub spatial_depth: usize,
    pub temporal_depth: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Number of regressed shape coefficients per frame.
    pub alpha_dim: usize,
    /// Maximum clip length in frames.
    pub seq_len: usize,
    /// Diagonal masking in the LSA layers.
    pub mask_diagonal: bool,
    /// Hidden width of the regression head.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            patch_size: 8,
            embed_dim: 128,
            spatial_depth: 6,
            temporal_depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 24,
            alpha_dim: 32,
            seq_len: 75,
            mask_diagonal: true,
            head_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// A deliberately small configuration for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            in_channels: 1,
            patch_size: 4,
            embed_dim: 8,
            spatial_depth: 1,
            temporal_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            alpha_dim: 4,
            seq_len: 3,
            mask_diagonal: true,
            head_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size == 0 || self.patch_size == 0 {
            problems.push("image_size and patch_size must be positive".to_string());
        } else if self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 {
            problems.push("embed_dim and heads must be positive".to_string());
        } else if self.embed_dim % self.heads != 0 {
            problems.push(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes < 2 {
            problems.push("num_classes must be >= 2".to_string());
        }
        if self.seq_len == 0 {
            problems.push("seq_len must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn token_dim(&self) -> usize {
        5 * self.in_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Named parameter table with deterministic iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.map.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn init_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize, head_dim: usize) {
    store.insert(&format!("{prefix}.ln1.g"), Mat::repeat(1, d, 1.0));
    store.insert(&format!("{prefix}.ln1.b"), Mat::zeros(1, d));
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.attn.{w}"), uniform_init(rng, d, d, d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.attn.{b}"), Mat::zeros(1, d));
    }
    // temperature learned in log-space, initialized to sqrt(head_dim)
    store.insert(
        &format!("{prefix}.attn.log_temp"),
        Mat::from_element(1, 1, (head_dim as f64).sqrt().ln()),
    );
    store.insert(&format!("{prefix}.ln2.g"), Mat::repeat(1, d, 1.0));
    store.insert(&format!("{prefix}.ln2.b"), Mat::zeros(1, d));
    store.insert(&format!("{prefix}.mlp.w1"), uniform_init(rng, d, hidden, d, hidden));
    store.insert(&format!("{prefix}.mlp.b1"), Mat::zeros(1, hidden));
    store.insert(&format!("{prefix}.mlp.w2"), uniform_init(rng, hidden, d, hidden, d));
    store.insert(&format!("{prefix}.mlp.b2"), Mat::zeros(1, d));
}

/// Initializes all model parameters, deterministic under the seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = config.embed_dim;
    let tok = config.token_dim();
    let hidden = d * config.mlp_ratio;
    let head_dim = config.head_dim();

    store.insert("embed.proj.w", uniform_init(&mut rng, tok, d, tok, d));
    store.insert("embed.proj.b", Mat::zeros(1, d));
    store.insert("spatial.cls", uniform_init(&mut rng, 1, d, d, d));
    store.insert(
        "spatial.pos",
        uniform_init(&mut rng, config.n_patches() + 1, d, d, d) * 0.1,
    );
    for i in 0..config.spatial_depth {
        init_block(&mut store, &mut rng, &format!("spatial.{i}"), d, hidden, head_dim);
    }
    store.insert("temporal.cls", uniform_init(&mut rng, 1, d, d, d));
    store.insert(
        "temporal.pos",
        uniform_init(&mut rng, config.seq_len + 1, d, d, d) * 0.1,
    );
    for i in 0..config.temporal_depth {
        init_block(&mut store, &mut rng, &format!("temporal.{i}"), d, hidden, head_dim);
    }
    store.insert("head.class.ln.g", Mat::repeat(1, d, 1.0));
    store.insert("head.class.ln.b", Mat::zeros(1, d));
    store.insert(
        "head.class.w",
        uniform_init(&mut rng, d, config.num_classes, d, config.num_classes),
    );
    store.insert("head.class.b", Mat::zeros(1, config.num_classes));
    store.insert(
        "head.alpha.w1",
        uniform_init(&mut rng, d, config.head_hidden, d, config.head_hidden),
    );
    store.insert("head.alpha.b1", Mat::zeros(1, config.head_hidden));
    store.insert(
        "head.alpha.w2",
        uniform_init(&mut rng, config.head_hidden, config.alpha_dim, config.head_hidden, config.alpha_dim),
    );
    store.insert("head.alpha.b2", Mat::zeros(1, config.alpha_dim));
    store
}

// ---------------------------------------------------------------------------
// shifted patch tokenization
// ---------------------------------------------------------------------------

/// Diagonal shift offsets in (dy, dx), order [lu, ru, ld, rd].
pub const SHIFT_DIRECTIONS: [(i64, i64); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Tokenizes an image by concatenating it with four diagonally shifted copies
/// (shift magnitude `patch_size / 2`, zero padding) and flattening
/// non-overlapping patches. Output: (H/p * W/p) x (5 * C * p^2); within a
/// token, features are ordered pixel-major, then channel group
/// [x, lu, ru, ld, rd], then channel.
pub fn shifted_patch_tokenize(image: &Image, patch_size: usize) -> Result<Mat> {
    let (h, w, c) = (image.height, image.width, image.channels);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let s = (patch_size / 2) as i64;
    let groups = 5;
    let sample = |y: i64, x: i64, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            image.get(y as usize, x as usize, ch)
        }
    };
    let py = h / patch_size;
    let px = w / patch_size;
    let tok_dim = groups * c * patch_size * patch_size;
    let mut tokens = Mat::zeros(py * px, tok_dim);
    for ty in 0..py {
        for tx in 0..px {
            let token = ty * px + tx;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let y = (ty * patch_size + dy) as i64;
                    let x = (tx * patch_size + dx) as i64;
                    let base = (dy * patch_size + dx) * groups * c;
                    for ch in 0..c {
                        tokens[(token, base + ch)] = sample(y, x, ch);
                    }
                    for (g, (sy, sx)) in SHIFT_DIRECTIONS.iter().enumerate() {
                        // a copy displaced by (sy*s, sx*s) reads from the
                        // opposite offset in the source image
                        for ch in 0..c {
                            tokens[(token, base + (g + 1) * c + ch)] =
                                sample(y - sy * s, x - sx * s, ch);
                        }
                    }
                }
            }
        }
    }
    Ok(tokens)
}

// ---------------------------------------------------------------------------
// locality self-attention (plain, single head)
// ---------------------------------------------------------------------------

/// Locality self-attention over one head: `softmax(q k^T / temperature) v`,
/// optionally with the score diagonal set to a large negative value.
pub fn lsa_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    temperature: f64,
    mask_diagonal: bool,
) -> Result<Mat> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n || k.ncols() != q.ncols() {
        return Err(Error::Shape("q, k, v token counts disagree".into()));
    }
    if mask_diagonal && n < 2 {
        return Err(Error::InvalidArgument(
            "diagonal masking needs at least 2 tokens".into(),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let mut scores = q * k.transpose() / temperature;
    if mask_diagonal {
        for i in 0..n {
            scores[(i, i)] = MASK_NEG;
        }
    }
    let mut attn = scores;
    for i in 0..n {
        let row_max = (0..n).map(|j| attn[(i, j)]).fold(f64::MIN, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (attn[(i, j)] - row_max).exp();
            attn[(i, j)] = e;
            sum += e;
        }
        for j in 0..n {
            attn[(i, j)] /= sum;
        }
    }
    Ok(attn * v)
}

// ---------------------------------------------------------------------------
// graph construction
// ---------------------------------------------------------------------------

/// Parameter leaves bound into a graph, created lazily by name.
pub struct Binding<'a> {
    params: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binding<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            vars: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
            .clone();
        let v = g.param(name, value);
        self.vars.insert(name.to_string(), v);
        v
    }
}

fn linear(g: &mut Graph, b: &mut Binding, x: Var, w: &str, bias: &str) -> Var {
    let wv = b.var(g, w);
    let bv = b.var(g, bias);
    let y = g.matmul(x, wv);
    g.add_row_broadcast(y, bv)
}

/// One pre-norm transformer block with multi-head LSA.
/// `key_valid`, when given, masks invalid key columns out of every
/// attention row (used for padded frames in the temporal stage).
fn transformer_block(
    g: &mut Graph,
    b: &mut Binding,
    x: Var,
    prefix: &str,
    heads: usize,
    mask_diagonal: bool,
    key_valid: Option<&[bool]>,
) -> Var {
    let n = g.value(x).nrows();
    let d = g.value(x).ncols();
    let dh = d / heads;

    let ln1g = b.var(g, &format!("{prefix}.ln1.g"));
    let ln1b = b.var(g, &format!("{prefix}.ln1.b"));
    let normed = g.layer_norm(x, ln1g, ln1b);

    let q = linear(g, b, normed, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"));
    let k = linear(g, b, normed, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"));
    let v = linear(g, b, normed, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"));

    // inverse temperature: exp(-log_temp), shared by all heads of the layer
    let log_temp = b.var(g, &format!("{prefix}.attn.log_temp"));
    let neg = g.scale_const(log_temp, -1.0);
    let inv_temp = g.exp(neg);

    // additive mask, same for every head
    let mut mask = Mat::zeros(n, n);
    if mask_diagonal {
        for i in 0..n {
            mask[(i, i)] = MASK_NEG;
        }
    }
    if let Some(valid) = key_valid {
        for (j, ok) in valid.iter().enumerate() {
            if !ok {
                for i in 0..n {
                    mask[(i, j)] = MASK_NEG;
                }
            }
        }
    }
    let mask_v = g.constant(mask);

    let mut merged: Option<Var> = None;
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let scaled = g.scale_by_scalar(raw, inv_temp);
        let masked = g.add(scaled, mask_v);
        let attn = g.softmax_rows(masked);
        let out = g.matmul(attn, vh);
        merged = Some(match merged {
            None => out,
            Some(acc) => g.concat_cols(acc, out),
        });
    }
    let attn_out = linear(
        g,
        b,
        merged.unwrap(),
        &format!("{prefix}.attn.wo"),
        &format!("{prefix}.attn.bo"),
    );
    let x = g.add(x, attn_out);

    let ln2g = b.var(g, &format!("{prefix}.ln2.g"));
    let ln2b = b.var(g, &format!("{prefix}.ln2.b"));
    let normed2 = g.layer_norm(x, ln2g, ln2b);
    let h1 = linear(g, b, normed2, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"));
    let act = g.relu(h1);
    let h2 = linear(g, b, act, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"));
    g.add(x, h2)
}

/// Encodes one frame's tokens and returns the transformed spatial CLS (1 x d).
pub fn spatial_encode(
    g: &mut Graph,
    b: &mut Binding,
    config: &ModelConfig,
    tokens: Var,
) -> Var {
    let projected = linear(g, b, tokens, "embed.proj.w", "embed.proj.b");
    let cls = b.var(g, "spatial.cls");
    let seq = g.concat_rows(cls, projected);
    let pos = b.var(g, "spatial.pos");
    let seq = g.add(seq, pos);
    let mut x = seq;
    for i in 0..config.spatial_depth {
        x = transformer_block(
            g,
            b,
            x,
            &format!("spatial.{i}"),
            config.heads,
            config.mask_diagonal,
            None,
        );
    }
    g.slice_rows(x, 0, 1)
}

/// Encodes the sequence of frame embeddings (L x d). Returns the transformed
/// per-frame tokens (L x d) and the transformed temporal CLS (1 x d).
pub fn temporal_encode(
    g: &mut Graph,
    b: &mut Binding,
    config: &ModelConfig,
    frame_embeddings: Var,
    valid: &[bool],
) -> (Var, Var) {
    let l = g.value(frame_embeddings).nrows();
    assert_eq!(valid.len(), l);
    let cls = b.var(g, "temporal.cls");
    let seq = g.concat_rows(cls, frame_embeddings);
    let pos_full = b.var(g, "temporal.pos");
    let pos = g.slice_rows(pos_full, 0, l + 1);
    let mut x = g.add(seq, pos);
    let mut key_valid = Vec::with_capacity(l + 1);
    key_valid.push(true); // CLS
    key_valid.extend_from_slice(valid);
    for i in 0..config.temporal_depth {
        x = transformer_block(
            g,
            b,
            x,
            &format!("temporal.{i}"),
            config.heads,
            config.mask_diagonal,
            Some(&key_valid),
        );
    }
    let per_frame = g.slice_rows(x, 1, l);
    let video = g.slice_rows(x, 0, 1);
    (per_frame, video)
}

/// Forward-pass output nodes, for attaching losses.
pub struct ForwardVars {
    /// 1 x num_classes.
    pub class_logits: Var,
    /// L x alpha_dim, one row per input frame (padded rows included).
    pub alpha_pred: Var,
    pub valid_len: usize,
}

/// Model output values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub class_logits: DVector<f64>,
    /// One row per input frame.
    pub alpha_pred: Mat,
}

/// Builds the full forward pass into `g`. Frames beyond `valid_len` are
/// padding: their spatial encoding is skipped (zero embedding) and they are
/// masked out of the temporal attention.
pub fn build_forward(
    g: &mut Graph,
    b: &mut Binding,
    config: &ModelConfig,
    frames: &[Image],
    valid_len: usize,
) -> Result<ForwardVars> {
    config.validate()?;
    if frames.is_empty() || valid_len == 0 {
        return Err(Error::InvalidArgument("empty video".into()));
    }
    if valid_len > frames.len() || frames.len() > config.seq_len {
        return Err(Error::InvalidArgument(format!(
            "video length {} / valid length {} out of range (seq_len {})",
            frames.len(),
            valid_len,
            config.seq_len
        )));
    }
    let d = config.embed_dim;
    let mut embeddings: Option<Var> = None;
    for (t, frame) in frames.iter().enumerate() {
        let row = if t < valid_len {
            if frame.height != config.image_size
                || frame.width != config.image_size
                || frame.channels != config.in_channels
            {
                return Err(Error::Shape(format!(
                    "frame {t} is {}x{}x{}, expected {}x{}x{}",
                    frame.height,
                    frame.width,
                    frame.channels,
                    config.image_size,
                    config.image_size,
                    config.in_channels
                )));
            }
            let tokens = shifted_patch_tokenize(frame, config.patch_size)?;
            let tok_var = g.constant(tokens);
            spatial_encode(g, b, config, tok_var)
        } else {
            g.constant(Mat::zeros(1, d))
        };
        embeddings = Some(match embeddings {
            None => row,
            Some(acc) => g.concat_rows(acc, row),
        });
    }
    let valid: Vec<bool> = (0..frames.len()).map(|t| t < valid_len).collect();
    let (per_frame, video) = temporal_encode(g, b, config, embeddings.unwrap(), &valid);

    // classification head: LN then FC on the temporal CLS
    let lng = b.var(g, "head.class.ln.g");
    let lnb = b.var(g, "head.class.ln.b");
    let normed = g.layer_norm(video, lng, lnb);
    let class_logits = linear(g, b, normed, "head.class.w", "head.class.b");

    // regression head on the temporal per-frame outputs
    let h1 = linear(g, b, per_frame, "head.alpha.w1", "head.alpha.b1");
    let act = g.relu(h1);
    let alpha_pred = linear(g, b, act, "head.alpha.w2", "head.alpha.b2");

    Ok(ForwardVars {
        class_logits,
        alpha_pred,
        valid_len,
    })
}

/// Plain forward pass: values only.
pub fn forward(
    config: &ModelConfig,
    params: &ParamStore,
    frames: &[Image],
    valid_len: usize,
) -> Result<ModelOutput> {
    let mut g = Graph::new();
    let mut b = Binding::new(params);
    let vars = build_forward(&mut g, &mut b, config, frames, valid_len)?;
    let logits = g.value(vars.class_logits);
    Ok(ModelOutput {
        class_logits: DVector::from_iterator(logits.ncols(), logits.iter().copied()),
        alpha_pred: g.value(vars.alpha_pred).clone(),
    })
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"STVT";

/// Writes a checkpoint: magic `STVT`, u32 config JSON length, config JSON,
/// u32 parameter count, then per parameter: u16 name length, name bytes,
/// u32 rows, u32 cols, f32 values row-major; all little-endian.
pub fn save_checkpoint(config: &ModelConfig, params: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let cfg = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let names = params.names();
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    for name in names {
        let m = params.get(&name).unwrap();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u32).to_le_bytes())?;
        w.write_all(&(m.ncols() as u32).to_le_bytes())?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_all(&(m[(i, j)] as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected STVT",
            path.display()
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| Error::Format(e.to_string()))?;
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let mut len_b = [0u8; 2];
        r.read_exact(&mut len_b)?;
        let name_len = u16::from_le_bytes(len_b) as usize;
        let mut name_b = vec![0u8; name_len];
        r.read_exact(&mut name_b)?;
        let name =
            String::from_utf8(name_b).map_err(|e| Error::Format(e.to_string()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                m[(i, j)] = f32::from_le_bytes(b) as f64;
            }
        }
        params.insert(&name, m);
    }
    Ok((config, params))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
