//! Soft dynamic time warping: alignment cost, its gradient, a hard-DTW
//! reference, and nearest-exemplar sequence classification.
//!
//! The cost uses squared Euclidean ground distances and the smoothed
//! minimum `softmin_γ(a) = -γ log Σ exp(-a_k / γ)`, evaluated with a
//! max-shift so it never overflows.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Time-ordered feature vectors of uniform dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).ok_or_else(|| Error::invalid("empty feature sequence"))?;
        let mut data = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            if v.len() != dim {
                return Err(Error::Dimension { expected: dim, got: v.len() });
            }
            data.extend_from_slice(v);
        }
        Self::from_flat(dim, data)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid(format!("cannot shape {} values into rows of {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Rows `start..end`, stepping by `stride`.
    pub fn subsample(&self, start: usize, end: usize, stride: usize) -> Result<Self> {
        let end = end.min(self.len());
        let mut data = Vec::new();
        for i in (start..end).step_by(stride.max(1)) {
            data.extend_from_slice(self.row(i));
        }
        Self::from_flat(self.dim, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftDtwParams {
    gamma: f64,
}

impl SoftDtwParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma > 0.0 {
            Ok(Self { gamma })
        } else {
            Err(Error::invalid(format!("gamma must be positive and finite, got {gamma}")))
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for SoftDtwParams {
    fn default() -> Self {
        Self { gamma: 0.1 }
    }
}

fn check_pair(x: &FeatureSequence, y: &FeatureSequence) -> Result<()> {
    if x.dim != y.dim {
        return Err(Error::Dimension {
            expected: x.dim,
            got: y.dim,
        });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Pairwise squared distances, `n x m` row-major.
pub fn squared_distances(x: &FeatureSequence, y: &FeatureSequence) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * y.len());
    for a in x.rows() {
        for b in y.rows() {
            out.push(sq_dist(a, b));
        }
    }
    out
}

fn softmin3(a: f64, b: f64, c: f64, gamma: f64) -> f64 {
    let m = a.min(b).min(c);
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s = (-(a - m) / gamma).exp() + (-(b - m) / gamma).exp() + (-(c - m) / gamma).exp();
    m - gamma * s.ln()
}

/// Accumulated cost lattice `(n+2) x (m+2)`, row-major, with the forward
/// boundary set up for the backward pass.
fn forward_lattice(d: &[f64], n: usize, m: usize, gamma: f64) -> Vec<f64> {
    let w = m + 2;
    let mut r = vec![f64::INFINITY; (n + 2) * w];
    r[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = softmin3(r[(i - 1) * w + j - 1], r[(i - 1) * w + j], r[i * w + j - 1], gamma);
            r[i * w + j] = d[(i - 1) * m + j - 1] + best;
        }
    }
    r
}

pub fn soft_dtw(x: &FeatureSequence, y: &FeatureSequence, p: &SoftDtwParams) -> Result<f64> {
    check_pair(x, y)?;
    let (n, m) = (x.len(), y.len());
    let r = forward_lattice(&squared_distances(x, y), n, m, p.gamma);
    Ok(r[n * (m + 2) + m])
}

/// Cost and its gradient with respect to every entry of `x` (row-major,
/// same shape as `x`), from the backward recursion over the lattice.
pub fn soft_dtw_grad(x: &FeatureSequence, y: &FeatureSequence, p: &SoftDtwParams) -> Result<(f64, Vec<f64>)> {
    check_pair(x, y)?;
    let (n, m) = (x.len(), y.len());
    let g = p.gamma;
    let w = m + 2;
    let dist = squared_distances(x, y);
    let mut r = forward_lattice(&dist, n, m, g);
    let cost = r[n * w + m];

    let mut dp = vec![0.0; (n + 2) * w];
    for i in 1..=n {
        for j in 1..=m {
            dp[i * w + j] = dist[(i - 1) * m + j - 1];
        }
    }
    for i in 1..=n {
        r[i * w + m + 1] = f64::NEG_INFINITY;
    }
    for j in 1..=m {
        r[(n + 1) * w + j] = f64::NEG_INFINITY;
    }
    r[(n + 1) * w + m + 1] = cost;

    let mut e = vec![0.0; (n + 2) * w];
    e[(n + 1) * w + m + 1] = 1.0;
    for j in (1..=m).rev() {
        for i in (1..=n).rev() {
            let here = r[i * w + j];
            let a = ((r[(i + 1) * w + j] - here - dp[(i + 1) * w + j]) / g).exp();
            let b = ((r[i * w + j + 1] - here - dp[i * w + j + 1]) / g).exp();
            let c = ((r[(i + 1) * w + j + 1] - here - dp[(i + 1) * w + j + 1]) / g).exp();
            e[i * w + j] = e[(i + 1) * w + j] * a + e[i * w + j + 1] * b + e[(i + 1) * w + j + 1] * c;
        }
    }

    let d = x.dim;
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let xi = x.row(i);
        let gi = &mut grad[i * d..(i + 1) * d];
        for j in 0..m {
            let weight = e[(i + 1) * w + j + 1];
            if weight == 0.0 {
                continue;
            }
            for (k, yk) in y.row(j).iter().enumerate() {
                gi[k] += weight * 2.0 * (xi[k] - yk);
            }
        }
    }
    Ok((cost, grad))
}

/// Classic DTW with a hard minimum; the γ → 0 limit of [`soft_dtw`].
pub fn hard_dtw(x: &FeatureSequence, y: &FeatureSequence) -> Result<f64> {
    check_pair(x, y)?;
    let (n, m) = (x.len(), y.len());
    let d = squared_distances(x, y);
    let w = m + 1;
    let mut r = vec![f64::INFINITY; (n + 1) * w];
    r[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = r[(i - 1) * w + j - 1].min(r[(i - 1) * w + j]).min(r[i * w + j - 1]);
            r[i * w + j] = d[(i - 1) * m + j - 1] + best;
        }
    }
    Ok(r[n * w + m])
}

/// Per-class scores from [`classify_by_alignment`], in class declaration
/// order (order of first appearance in the exemplar list).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentScores<L> {
    pub label: L,
    pub scores: Vec<(L, f64)>,
}

/// Scores each class by the mean of its `k` smallest length-normalized
/// soft-DTW costs to `query` and returns the lowest-scoring class. Ties go
/// to the class declared first.
pub fn classify_by_alignment<L>(
    query: &FeatureSequence,
    exemplars: &[(L, FeatureSequence)],
    p: &SoftDtwParams,
    k: usize,
) -> Result<AlignmentScores<L>>
where
    L: Clone + PartialEq + Send + Sync,
{
    if exemplars.is_empty() {
        return Err(Error::invalid("empty exemplar library"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let costs = exemplars
        .par_iter()
        .map(|(_, e)| soft_dtw(query, e, p).map(|c| c / (query.len() + e.len()) as f64))
        .collect::<Result<Vec<f64>>>()?;

    let mut classes: Vec<L> = Vec::new();
    for (l, _) in exemplars {
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    let mut scores = Vec::with_capacity(classes.len());
    for class in classes {
        let mut own: Vec<f64> = exemplars
            .iter()
            .zip(&costs)
            .filter(|((l, _), _)| *l == class)
            .map(|(_, c)| *c)
            .collect();
        own.sort_by(f64::total_cmp);
        let take = k.min(own.len());
        let score = own[..take].iter().sum::<f64>() / take as f64;
        scores.push((class, score));
    }
    let mut best = 0;
    for (i, (_, s)) in scores.iter().enumerate() {
        if *s < scores[best].1 {
            best = i;
        }
    }
    Ok(AlignmentScores {
        label: scores[best].0.clone(),
        scores,
    })
}

/// Per-dimension z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on every row of every sequence. Constant dimensions get unit
    /// scale.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sumsq: Vec<f64> = Vec::new();
        for s in seqs {
            let d = *dim.get_or_insert(s.dim());
            if s.dim() != d {
                return Err(Error::Dimension { expected: d, got: s.dim() });
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
                sumsq = vec![0.0; d];
            }
            for row in s.rows() {
                for k in 0..d {
                    sum[k] += row[k];
                    sumsq[k] += row[k] * row[k];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit a standardizer on no data"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sumsq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, s: &FeatureSequence) -> Result<FeatureSequence> {
        if s.dim() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                got: s.dim(),
            });
        }
        let d = s.dim();
        let data = s
            .as_flat()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        FeatureSequence::from_flat(d, data)
    }
}

/// Labeled reference sequences, optionally with the standardizer their
/// features were normalized with.
///
/// Text layout:
///
/// ```text
/// # exemplar library
/// dim 8
/// mean 0.1 0.2 ...
/// std 1.0 0.5 ...
/// exemplar P3 4
/// 41.2 0.3 ...
/// (one line per frame)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarLibrary {
    pub dim: usize,
    pub standardizer: Option<Standardizer>,
    pub exemplars: Vec<(String, FeatureSequence)>,
}

impl ExemplarLibrary {
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (l, _) in &self.exemplars {
            if !out.contains(&l.as_str()) {
                out.push(l);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# exemplar library\n");
        let _ = writeln!(out, "dim {}", self.dim);
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        if let Some(s) = &self.standardizer {
            let _ = writeln!(out, "mean {}", join(&s.mean));
            let _ = writeln!(out, "std {}", join(&s.std));
        }
        for (label, seq) in &self.exemplars {
            let _ = writeln!(out, "exemplar {label} {}", seq.len());
            for row in seq.rows() {
                out.push_str(&join(row));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .peekable();
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        let nums = |line: usize, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(line, format!("non-numeric value `{t}`"))))
                .collect()
        };

        let (l, first) = lines.next().ok_or_else(|| err(1, "empty library".into()))?;
        let dim: usize = first
            .strip_prefix("dim ")
            .and_then(|d| d.trim().parse().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| err(l, "expected `dim <n>`".into()))?;

        let mut mean = None;
        let mut std = None;
        let mut exemplars = Vec::new();
        while let Some((l, line)) = lines.next() {
            if let Some(rest) = line.strip_prefix("mean ") {
                mean = Some(nums(l, rest)?);
            } else if let Some(rest) = line.strip_prefix("std ") {
                std = Some(nums(l, rest)?);
            } else if let Some(rest) = line.strip_prefix("exemplar ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(err(l, "expected `exemplar <label> <frames>`".into()));
                }
                let frames: usize = parts[1].parse().map_err(|_| err(l, format!("bad frame count `{}`", parts[1])))?;
                let mut data = Vec::with_capacity(frames * dim);
                for _ in 0..frames {
                    let (fl, row) = lines.next().ok_or_else(|| err(l, "truncated exemplar".into()))?;
                    let v = nums(fl, row)?;
                    if v.len() != dim {
                        return Err(err(fl, format!("expected {dim} values, found {}", v.len())));
                    }
                    data.extend(v);
                }
                let seq = FeatureSequence::from_flat(dim, data).map_err(|e| err(l, e.to_string()))?;
                exemplars.push((parts[0].to_string(), seq));
            } else {
                return Err(err(l, format!("unexpected line `{line}`")));
            }
        }
        let standardizer = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == dim && std.len() == dim => Some(Standardizer { mean, std }),
            (None, None) => None,
            _ => return Err(err(1, "mean/std must both be present with `dim` values".into())),
        };
        Ok(Self {
            dim,
            standardizer,
            exemplars,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
