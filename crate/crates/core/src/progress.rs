//! Subgoal (task progress) classifier: a small transformer encoder over ten
//! measurement tokens, trained with cross-entropy and Adam. Forward and
//! backward passes are written out by hand in f64.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{classification_scores, roc_auc_macro, ClassificationScores, RocReport};
use crate::model::{CoordFrame, PoseSequence, Vec3};

pub const N_TOKENS: usize = 10;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub workstation: String,
    /// Task cycle the window was cut from; used by cycle-level splits.
    pub cycle: usize,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedWindow {
    /// Row-major `N_TOKENS × d_in`.
    pub tokens: Vec<f64>,
    pub d_in: usize,
    pub label: usize,
    pub meta: WindowMeta,
}

impl TokenizedWindow {
    pub fn new(tokens: Vec<f64>, d_in: usize, label: usize, meta: WindowMeta) -> Result<Self> {
        if d_in == 0 || tokens.len() != N_TOKENS * d_in {
            return Err(Error::Dimension {
                expected: N_TOKENS * d_in,
                got: tokens.len(),
            });
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("window holds non-finite entries"));
        }
        Ok(Self { tokens, d_in, label, meta })
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.d_in..(i + 1) * self.d_in]
    }
}

/// Ten equal-length chunk means of body-frame joints, worker global
/// position and door centroid. With `door_yaw_deg` the token also carries
/// (cos, sin) of the door yaw; undefined yaw entries count as 0.
pub fn tokenize(
    body: &PoseSequence,
    worker_global: &[Vec3],
    door_centroid: &[Vec3],
    door_yaw_deg: Option<&[Option<f64>]>,
    label: usize,
    meta: WindowMeta,
) -> Result<TokenizedWindow> {
    let n = body.len();
    if n < N_TOKENS {
        return Err(Error::invalid(format!("window has {n} frames, needs at least {N_TOKENS}")));
    }
    if body.coord_frame() != Some(CoordFrame::Body) {
        return Err(Error::invalid("tokenize expects a body-frame sequence"));
    }
    if door_centroid.is_empty() {
        return Err(Error::invalid("window has no door measurements"));
    }
    for len in [worker_global.len(), door_centroid.len()] {
        if len != n {
            return Err(Error::Dimension { expected: n, got: len });
        }
    }
    if let Some(y) = door_yaw_deg {
        if y.len() != n {
            return Err(Error::Dimension { expected: n, got: y.len() });
        }
    }
    let j = body.topology().joints().len();
    let d_in = 3 * j + 6 + if door_yaw_deg.is_some() { 2 } else { 0 };
    let mut tokens = Vec::with_capacity(N_TOKENS * d_in);
    for c in 0..N_TOKENS {
        let (lo, hi) = (c * n / N_TOKENS, (c + 1) * n / N_TOKENS);
        let m = (hi - lo) as f64;
        let mut tok = vec![0.0; d_in];
        for f in lo..hi {
            for (k, p) in body.frames()[f].positions.iter().enumerate() {
                for a in 0..3 {
                    tok[3 * k + a] += p[a];
                }
            }
            for a in 0..3 {
                tok[3 * j + a] += worker_global[f][a];
                tok[3 * j + 3 + a] += door_centroid[f][a];
            }
            if let Some(y) = door_yaw_deg {
                if let Some(deg) = y[f] {
                    tok[3 * j + 6] += deg.to_radians().cos();
                    tok[3 * j + 7] += deg.to_radians().sin();
                }
            }
        }
        tokens.extend(tok.into_iter().map(|v| v / m));
    }
    TokenizedWindow::new(tokens, d_in, label, meta)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowDataset {
    pub class_names: Vec<String>,
    pub d_in: usize,
    pub windows: Vec<TokenizedWindow>,
}

impl WindowDataset {
    pub fn new(class_names: Vec<String>, d_in: usize, windows: Vec<TokenizedWindow>) -> Result<Self> {
        for w in &windows {
            if w.d_in != d_in {
                return Err(Error::Dimension { expected: d_in, got: w.d_in });
            }
            if w.label >= class_names.len() {
                return Err(Error::OutOfRange {
                    index: w.label,
                    len: class_names.len(),
                });
            }
        }
        Ok(Self {
            class_names,
            d_in,
            windows,
        })
    }

    /// First line `classes,<name>...`; then a header and one row per
    /// window: `label,cycle,workstation,start_s,end_s,v0..`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("classes");
        for c in &self.class_names {
            let _ = write!(out, ",{c}");
        }
        out.push_str("\nlabel,cycle,workstation,start_s,end_s");
        for t in 0..N_TOKENS {
            for k in 0..self.d_in {
                let _ = write!(out, ",t{t}_{k}");
            }
        }
        out.push('\n');
        for w in &self.windows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                w.label, w.meta.cycle, w.meta.workstation, w.meta.start_s, w.meta.end_s
            );
            for v in &w.tokens {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let (_, first) = lines.next().ok_or_else(|| bad(0, "empty window file".into()))?;
        let names: Vec<String> = match first.split(',').collect::<Vec<_>>().split_first() {
            Some((&"classes", rest)) if !rest.is_empty() => rest.iter().map(|s| s.to_string()).collect(),
            _ => return Err(bad(0, "expected `classes,<name>...`".into())),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let cols = header.split(',').count();
        if cols < 5 + N_TOKENS || (cols - 5) % N_TOKENS != 0 {
            return Err(bad(1, format!("header has {cols} columns")));
        }
        let d_in = (cols - 5) / N_TOKENS;
        let mut windows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols {
                return Err(bad(i, format!("expected {cols} fields, found {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i, format!("`{s}` is not a number")));
            let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(i, format!("`{s}` is not an index")));
            let meta = WindowMeta {
                workstation: f[2].to_string(),
                cycle: int(f[1])?,
                start_s: num(f[3])?,
                end_s: num(f[4])?,
            };
            let tokens = f[5..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            windows.push(TokenizedWindow::new(tokens, d_in, int(f[0])?, meta).map_err(|e| bad(i, e.to_string()))?);
        }
        Self::new(names, d_in, windows)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
    /// Learned per-token position embedding added after projection.
    pub positional: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn with_io(d_in: usize, n_classes: usize) -> Self {
        Self {
            d_in,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            n_classes,
            dropout_rate: 0.1,
            positional: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_in, self.d_model, self.n_heads, self.n_layers, self.d_ffn, self.n_classes];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be at least 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Window,
    Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train, validation, test fractions.
    pub split: [f64; 3],
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 60,
            batch_size: 16,
            split: [0.7, 0.1, 0.2],
            split_mode: SplitMode::Window,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|f| *f < 0.0) || self.split[0] <= 0.0 {
            return Err(Error::invalid(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

// per-layer tensor offsets
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const G1: usize = 8;
const N1: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const G2: usize = 14;
const N2: usize = 15;
const PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub params: Vec<Tensor>,
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    h_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    o: Vec<f64>,
    drop1: Option<Vec<f64>>,
    ln1: LnCache,
    h1: Vec<f64>,
    u: Vec<f64>,
    f: Vec<f64>,
    drop2: Option<Vec<f64>>,
    ln2: LnCache,
}

struct Cache {
    x: Vec<f64>,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
    probs: Vec<f64>,
}

/// `a (n×k) · b (k×m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, w) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += x * w;
            }
        }
    }
    out
}

/// `aᵀ (k×n)ᵀ · b (n×m)`, accumulated into `out (k×m)`.
fn matmul_tn_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, w) in out[p * m..(p + 1) * m].iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *o += x * w;
            }
        }
    }
}

/// `a (n×m) · bᵀ` where `b` is `k×m`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[i * k + j] = a[i * m..(i + 1) * m].iter().zip(&b[j * m..(j + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, c) in row.iter_mut().zip(b) {
            *v += c;
        }
    }
}

fn col_sum_acc(x: &[f64], out: &mut [f64]) {
    for row in x.chunks(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let d = g.len();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(dy: &[f64], cache: &LnCache, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let d = g.len();
    let mut dx = vec![0.0; dy.len()];
    for (r, row) in dy.chunks(d).enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for c in 0..d {
            dg[c] += row[c] * xh[c];
            db[c] += row[c];
            let dxh = row[c] * g[c];
            sum += dxh;
            sum_x += dxh * xh[c];
        }
        for c in 0..d {
            let dxh = row[c] * g[c];
            dx[r * d + c] = cache.inv_std[r] / d as f64 * (d as f64 * dxh - sum - xh[c] * sum_x);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

impl Transformer {
    /// Uniform fan-in initialization from the config seed; layer-norm gains
    /// start at 1 and offsets at 0.
    pub fn new(config: ModelConfig, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.n_classes {
            return Err(Error::Dimension {
                expected: config.n_classes,
                got: class_names.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.d_ffn);
        let mut params = Vec::new();
        let mut uniform = |name: String, shape: Vec<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
            Tensor { name, shape, data }
        };
        params.push(uniform("in.w".into(), vec![config.d_in, d], config.d_in));
        params.push(uniform("in.b".into(), vec![d], config.d_in));
        if config.positional {
            params.push(uniform("pos".into(), vec![N_TOKENS, d], d));
        }
        for l in 0..config.n_layers {
            for (n, shape, fan) in [
                ("wq", vec![d, d], d),
                ("bq", vec![d], d),
                ("wk", vec![d, d], d),
                ("bk", vec![d], d),
                ("wv", vec![d, d], d),
                ("bv", vec![d], d),
                ("wo", vec![d, d], d),
                ("bo", vec![d], d),
                ("ln1.g", vec![d], 0),
                ("ln1.b", vec![d], 0),
                ("w1", vec![d, f], d),
                ("b1", vec![f], d),
                ("w2", vec![f, d], f),
                ("b2", vec![d], f),
                ("ln2.g", vec![d], 0),
                ("ln2.b", vec![d], 0),
            ] {
                let name = format!("layer{l}.{n}");
                if fan == 0 {
                    let v = if n.ends_with(".g") { 1.0 } else { 0.0 };
                    params.push(Tensor { name, data: vec![v; shape[0]], shape });
                } else {
                    params.push(uniform(name, shape, fan));
                }
            }
        }
        params.push(uniform("out.w".into(), vec![d, config.n_classes], d));
        params.push(uniform("out.b".into(), vec![config.n_classes], d));
        Ok(Self {
            config,
            class_names,
            params,
        })
    }

    fn layer_base(&self, l: usize) -> usize {
        2 + self.config.positional as usize + l * PER_LAYER
    }

    fn out_w(&self) -> usize {
        self.layer_base(self.config.n_layers)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params[i].data
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != N_TOKENS * self.config.d_in {
            return Err(Error::Dimension {
                expected: N_TOKENS * self.config.d_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[f64], mut drop: Option<&mut ChaCha8Rng>) -> Cache {
        let c = &self.config;
        let (t, d, h) = (N_TOKENS, c.d_model, c.n_heads);
        let dk = d / h;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut hcur = matmul(x, self.p(0), t, c.d_in, d);
        add_bias(&mut hcur, self.p(1));
        if c.positional {
            for (v, p) in hcur.iter_mut().zip(self.p(2)) {
                *v += p;
            }
        }
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let base = self.layer_base(l);
            let lin = |inp: &[f64], w: usize, b: usize, k: usize, m: usize| {
                let mut y = matmul(inp, self.p(base + w), t, k, m);
                add_bias(&mut y, self.p(base + b));
                y
            };
            let q = lin(&hcur, WQ, BQ, d, d);
            let k = lin(&hcur, WK, BK, d, d);
            let v = lin(&hcur, WV, BV, d, d);
            let mut attn = vec![0.0; h * t * t];
            let mut o = vec![0.0; t * d];
            for head in 0..h {
                let off = head * dk;
                for i in 0..t {
                    let row = &mut attn[(head * t + i) * t..(head * t + i + 1) * t];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = (0..dk).map(|e| q[i * d + off + e] * k[j * d + off + e]).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    for (j, a) in row.iter().enumerate() {
                        for e in 0..dk {
                            o[i * d + off + e] += a * v[j * d + off + e];
                        }
                    }
                }
            }
            let mut z = lin(&o, WO, BO, d, d);
            let drop1 = drop.as_deref_mut().filter(|_| c.dropout_rate > 0.0).map(|r| dropout_mask(r, t * d, c.dropout_rate));
            if let Some(m) = &drop1 {
                z.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let r1: Vec<f64> = hcur.iter().zip(&z).map(|(a, b)| a + b).collect();
            let (h1, ln1) = layer_norm(&r1, self.p(base + G1), self.p(base + N1));
            let u = lin(&h1, W1, B1, d, c.d_ffn);
            let f: Vec<f64> = u.iter().map(|x| gelu(*x)).collect();
            let mut g = lin(&f, W2, B2, c.d_ffn, d);
            let drop2 = drop.as_deref_mut().filter(|_| c.dropout_rate > 0.0).map(|r| dropout_mask(r, t * d, c.dropout_rate));
            if let Some(m) = &drop2 {
                g.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let r2: Vec<f64> = h1.iter().zip(&g).map(|(a, b)| a + b).collect();
            let (h2, ln2) = layer_norm(&r2, self.p(base + G2), self.p(base + N2));
            layers.push(LayerCache {
                h_in: std::mem::replace(&mut hcur, h2),
                q,
                k,
                v,
                attn,
                o,
                drop1,
                ln1,
                h1,
                u,
                f,
                drop2,
                ln2,
            });
        }
        let mut pooled = vec![0.0; d];
        for row in hcur.chunks(d) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v / t as f64;
            }
        }
        let ow = self.out_w();
        let mut probs = matmul(&pooled, self.p(ow), 1, d, c.n_classes);
        add_bias(&mut probs, self.p(ow + 1));
        softmax_in_place(&mut probs);
        Cache {
            x: x.to_vec(),
            layers,
            pooled,
            probs,
        }
    }

    /// Class probabilities in inference mode (no dropout).
    pub fn forward(&self, tokens: &[f64]) -> Result<Vec<f64>> {
        self.check_input(tokens)?;
        Ok(self.forward_cached(tokens, None).probs)
    }

    pub fn predict(&self, tokens: &[f64]) -> Result<usize> {
        let p = self.forward(tokens)?;
        Ok(argmax(&p))
    }

    /// Cross-entropy of one sample in inference mode.
    pub fn loss(&self, tokens: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(-self.forward(tokens)?[label].ln())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.n_classes {
            return Err(Error::OutOfRange {
                index: label,
                len: self.config.n_classes,
            });
        }
        Ok(())
    }

    /// Loss and parameter gradients for one sample. `drop` enables dropout.
    pub fn loss_and_grad(&self, tokens: &[f64], label: usize, drop: Option<&mut ChaCha8Rng>) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_input(tokens)?;
        self.check_label(label)?;
        let cache = self.forward_cached(tokens, drop);
        let loss = -cache.probs[label].ln();
        Ok((loss, self.backward(&cache, label)))
    }

    fn backward(&self, cache: &Cache, label: usize) -> Vec<Vec<f64>> {
        let c = &self.config;
        let (t, d, h) = (N_TOKENS, c.d_model, c.n_heads);
        let dk = d / h;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.data.len()]).collect();

        let mut dlogits = cache.probs.clone();
        dlogits[label] -= 1.0;
        let ow = self.out_w();
        matmul_tn_acc(&cache.pooled, &dlogits, 1, d, c.n_classes, &mut grads[ow]);
        grads[ow + 1].iter_mut().zip(&dlogits).for_each(|(g, v)| *g += v);
        let dpooled = matmul_nt(&dlogits, self.p(ow), 1, c.n_classes, d);
        let mut dh: Vec<f64> = (0..t).flat_map(|_| dpooled.iter().map(|v| v / t as f64)).collect();

        for l in (0..c.n_layers).rev() {
            let base = self.layer_base(l);
            let lc = &cache.layers[l];
            let (dg2, rest) = grads[base + G2..].split_at_mut(1);
            let dr2 = layer_norm_back(&dh, &lc.ln2, self.p(base + G2), &mut dg2[0], &mut rest[0]);
            let mut dh1 = dr2.clone();
            let mut dgo = dr2;
            if let Some(m) = &lc.drop2 {
                dgo.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            matmul_tn_acc(&lc.f, &dgo, t, c.d_ffn, d, &mut grads[base + W2]);
            col_sum_acc(&dgo, &mut grads[base + B2]);
            let mut du = matmul_nt(&dgo, self.p(base + W2), t, d, c.d_ffn);
            du.iter_mut().zip(&lc.u).for_each(|(g, u)| *g *= gelu_grad(*u));
            matmul_tn_acc(&lc.h1, &du, t, d, c.d_ffn, &mut grads[base + W1]);
            col_sum_acc(&du, &mut grads[base + B1]);
            let back = matmul_nt(&du, self.p(base + W1), t, c.d_ffn, d);
            dh1.iter_mut().zip(&back).for_each(|(a, b)| *a += b);

            let (dg1, rest) = grads[base + G1..].split_at_mut(1);
            let dr1 = layer_norm_back(&dh1, &lc.ln1, self.p(base + G1), &mut dg1[0], &mut rest[0]);
            let mut dh_in = dr1.clone();
            let mut dz = dr1;
            if let Some(m) = &lc.drop1 {
                dz.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            matmul_tn_acc(&lc.o, &dz, t, d, d, &mut grads[base + WO]);
            col_sum_acc(&dz, &mut grads[base + BO]);
            let d_o = matmul_nt(&dz, self.p(base + WO), t, d, d);

            let mut dq = vec![0.0; t * d];
            let mut dkm = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            for head in 0..h {
                let off = head * dk;
                for i in 0..t {
                    let a = &lc.attn[(head * t + i) * t..(head * t + i + 1) * t];
                    let da: Vec<f64> = (0..t)
                        .map(|j| (0..dk).map(|e| d_o[i * d + off + e] * lc.v[j * d + off + e]).sum())
                        .collect();
                    let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    for j in 0..t {
                        let ds = a[j] * (da[j] - dot) * scale;
                        for e in 0..dk {
                            dv[j * d + off + e] += a[j] * d_o[i * d + off + e];
                            dq[i * d + off + e] += ds * lc.k[j * d + off + e];
                            dkm[j * d + off + e] += ds * lc.q[i * d + off + e];
                        }
                    }
                }
            }
            for (dy, w, b) in [(&dq, WQ, BQ), (&dkm, WK, BK), (&dv, WV, BV)] {
                matmul_tn_acc(&lc.h_in, dy, t, d, d, &mut grads[base + w]);
                col_sum_acc(dy, &mut grads[base + b]);
                let back = matmul_nt(dy, self.p(base + w), t, d, d);
                dh_in.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
            dh = dh_in;
        }
        matmul_tn_acc(&cache.x, &dh, t, c.d_in, d, &mut grads[0]);
        col_sum_acc(&dh, &mut grads[1]);
        if c.positional {
            grads[2].iter_mut().zip(&dh).for_each(|(g, v)| *g += v);
        }
        grads
    }

    /// Checkpoint layout, little-endian: magic `HBUTRF01`; u32 d_in,
    /// d_model, n_heads, n_layers, d_ffn, n_classes, positional; f64
    /// dropout; u64 seed; u32 class count then (u32 byte length, UTF-8) per
    /// class; u32 tensor count then (u32 length, f64 values) per tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [c.d_in, c.d_model, c.n_heads, c.n_layers, c.d_ffn, c.n_classes, c.positional as usize] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout_rate.to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&(self.class_names.len() as u32).to_le_bytes());
        for n in &self.class_names {
            out.extend_from_slice(&(n.len() as u32).to_le_bytes());
            out.extend_from_slice(n.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for t in &self.params {
            out.extend_from_slice(&(t.data.len() as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_ = |b: &mut &[u8]| -> Result<usize> {
            let mut x = [0u8; 4];
            b.read_exact(&mut x).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(x) as usize)
        };
        let mut dims = [0usize; 7];
        for v in dims.iter_mut() {
            *v = u32_(&mut bytes)?;
        }
        let mut f8 = [0u8; 8];
        bytes.read_exact(&mut f8).map_err(|_| bad("truncated"))?;
        let dropout_rate = f64::from_le_bytes(f8);
        bytes.read_exact(&mut f8).map_err(|_| bad("truncated"))?;
        let seed = u64::from_le_bytes(f8);
        let config = ModelConfig {
            d_in: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            n_layers: dims[3],
            d_ffn: dims[4],
            n_classes: dims[5],
            positional: dims[6] != 0,
            dropout_rate,
            seed,
        };
        let n_names = u32_(&mut bytes)?;
        let mut names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            let len = u32_(&mut bytes)?;
            if bytes.len() < len {
                return Err(bad("truncated"));
            }
            let (s, rest) = bytes.split_at(len);
            names.push(String::from_utf8(s.to_vec()).map_err(|_| bad("class name is not UTF-8"))?);
            bytes = rest;
        }
        let mut model = Transformer::new(config, names)?;
        if u32_(&mut bytes)? != model.params.len() {
            return Err(bad("tensor count does not match the dimensions"));
        }
        for t in model.params.iter_mut() {
            if u32_(&mut bytes)? != t.data.len() {
                return Err(bad(&format!("tensor `{}` has the wrong length", t.name)));
            }
            for v in t.data.iter_mut() {
                bytes.read_exact(&mut f8).map_err(|_| bad("truncated"))?;
                *v = f64::from_le_bytes(f8);
            }
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HBUTRF01";

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Transformer, tc: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            beta1: tc.adam_beta1,
            beta2: tc.adam_beta2,
            eps: tc.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Transformer, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, t) in model.params.iter_mut().enumerate() {
            for (j, p) in t.data.iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: by class over windows, or over whole task cycles.
pub fn split_dataset(ds: &WindowDataset, fractions: [f64; 3], mode: SplitMode, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    let assign = |mut items: Vec<usize>, rng: &mut ChaCha8Rng| -> Vec<(usize, u8)> {
        items.shuffle(rng);
        let n = items.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1.min(n), n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let mut out = Vec::new();
        for (i, it) in items.into_iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            out.push((it, part));
        }
        out
    };
    let mut parts: Vec<(usize, u8)> = Vec::new();
    match mode {
        SplitMode::Window => {
            for c in 0..ds.class_names.len() {
                let items: Vec<usize> = (0..ds.windows.len()).filter(|&i| ds.windows[i].label == c).collect();
                parts.extend(assign(items, &mut rng));
            }
        }
        SplitMode::Cycle => {
            let mut cycles: Vec<usize> = ds.windows.iter().map(|w| w.meta.cycle).collect();
            cycles.sort_unstable();
            cycles.dedup();
            for (cycle, part) in assign(cycles, &mut rng) {
                parts.extend((0..ds.windows.len()).filter(|&i| ds.windows[i].meta.cycle == cycle).map(|i| (i, part)));
            }
        }
    }
    parts.sort_unstable();
    for (i, p) in parts {
        match p {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    for c in 0..ds.class_names.len() {
        if !split.train.iter().any(|&i| ds.windows[i].label == c) {
            return Err(Error::invalid(format!("class `{}` is absent from the training split", ds.class_names[c])));
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// NaN when the validation split is empty.
    pub val_recall: f64,
    pub val_f1: f64,
    pub val_auc: f64,
}

pub fn trace_to_csv(trace: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,train_accuracy,val_recall,val_f1,val_auc\n");
    for m in trace {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.epoch, m.train_loss, m.train_accuracy, m.val_recall, m.val_f1, m.val_auc
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scores: ClassificationScores,
    /// `None` when no class has both positives and negatives.
    pub roc: Option<RocReport>,
    pub mean_loss: f64,
}

/// Inference-mode scores on a subset of the dataset.
pub fn evaluate(model: &Transformer, ds: &WindowDataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let probs = indices
        .par_iter()
        .map(|&i| model.forward(&ds.windows[i].tokens))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = indices.iter().map(|&i| ds.windows[i].label).collect();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mean_loss = probs.iter().zip(&labels).map(|(p, l)| -p[*l].ln()).sum::<f64>() / labels.len() as f64;
    Ok(EvalReport {
        scores: classification_scores(&preds, &labels, &ds.class_names)?,
        roc: roc_auc_macro(&probs, &labels).ok(),
        mean_loss,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Transformer,
    pub trace: Vec<EpochMetrics>,
    pub split: Split,
    pub test: Option<EvalReport>,
}

/// Mini-batch Adam on the mean batch loss. Per-sample gradients are
/// computed in parallel and summed in sample order, so runs are
/// reproducible from the seeds alone.
pub fn train(ds: &WindowDataset, mc: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if ds.d_in != mc.d_in || ds.class_names.len() != mc.n_classes {
        return Err(Error::invalid(format!(
            "dataset has d_in {} and {} classes, model expects {} and {}",
            ds.d_in,
            ds.class_names.len(),
            mc.d_in,
            mc.n_classes
        )));
    }
    let split = split_dataset(ds, tc.split, tc.split_mode, tc.seed)?;
    let mut model = Transformer::new(*mc, ds.class_names.clone())?;
    let mut adam = Adam::new(&model, tc);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0001);
    let mut order = split.train.clone();
    let mut trace = Vec::with_capacity(tc.epochs);

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| {
                    let w = &ds.windows[i];
                    let mut r = ChaCha8Rng::seed_from_u64(s);
                    let cache = model.forward_cached(&w.tokens, Some(&mut r));
                    let loss = -cache.probs[w.label].ln();
                    let hit = argmax(&cache.probs) == w.label;
                    (loss, hit, model.backward(&cache, w.label))
                })
                .collect::<Vec<_>>();
            let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            let inv = 1.0 / batch.len() as f64;
            for (loss, hit, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                loss_sum += loss;
                correct += *hit as usize;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v * inv);
                }
            }
            adam.step(&mut model, &grads, tc.learning_rate);
        }
        let n = order.len() as f64;
        let (val_recall, val_f1, val_auc) = if split.val.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&model, ds, &split.val)?;
            (r.scores.macro_recall, r.scores.macro_f1, r.roc.map_or(f64::NAN, |r| r.macro_auc))
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_recall,
            val_f1,
            val_auc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} val recall {:.3} f1 {:.3} auc {:.3}",
            m.train_loss,
            m.train_accuracy,
            m.val_recall,
            m.val_f1,
            m.val_auc
        );
        trace.push(m);
    }
    let test = if split.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, ds, &split.test)?)
    };
    Ok(TrainOutcome {
        model,
        trace,
        split,
        test,
    })
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients
/// from turning round-off into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Analytic gradients against central differences with step 1e-4, on
/// every parameter, dropout off.
pub fn grad_check(model: &Transformer, tokens: &[f64], label: usize) -> Result<GradCheckReport> {
    grad_check_tensors(model, tokens, label, &|_| true)
}

pub fn grad_check_tensors(model: &Transformer, tokens: &[f64], label: usize, select: &dyn Fn(&str) -> bool) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grad(tokens, label, None)?;
    let per_tensor = (0..model.params.len())
        .filter(|&i| select(&model.params[i].name))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let mut probe = model.clone();
            let mut worst = 0.0f64;
            for j in 0..probe.params[i].data.len() {
                let orig = probe.params[i].data[j];
                probe.params[i].data[j] = orig + GRAD_CHECK_STEP;
                let up = probe.loss(tokens, label)?;
                probe.params[i].data[j] = orig - GRAD_CHECK_STEP;
                let down = probe.loss(tokens, label)?;
                probe.params[i].data[j] = orig;
                let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
                worst = worst.max(relative_error(grads[i][j], numeric));
            }
            Ok((model.params[i].name.clone(), worst))
        })
        .collect::<Result<Vec<_>>>()?;
    if per_tensor.is_empty() {
        return Err(Error::invalid("no parameter tensor selected"));
    }
    Ok(GradCheckReport {
        max_rel_error: per_tensor.iter().map(|t| t.1).fold(0.0, f64::max),
        per_tensor,
    })
}

/// Separable synthetic windows: each class has a fixed random token
/// pattern, samples add Gaussian-like noise of scale `noise`.
pub fn separable_windows(n_classes: usize, per_class: usize, d_in: usize, noise: f64, seed: u64) -> Result<WindowDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..N_TOKENS * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut windows = Vec::with_capacity(n_classes * per_class);
    for i in 0..per_class {
        for (c, pat) in patterns.iter().enumerate() {
            // sum of uniforms: bounded, roughly normal
            let tokens = pat
                .iter()
                .map(|v| v + noise * (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>())
                .collect();
            let meta = WindowMeta {
                workstation: "synthetic".into(),
                cycle: i,
                start_s: 0.0,
                end_s: 8.0,
            };
            windows.push(TokenizedWindow::new(tokens, d_in, c, meta)?);
        }
    }
    WindowDataset::new((0..n_classes).map(|c| format!("subgoal{}", c + 1)).collect(), d_in, windows)
}
