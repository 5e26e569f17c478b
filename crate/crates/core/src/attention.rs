//! Self-attention and the similarity-masked shared attention used to let a
//! composite image attend to its foreground and background references.
//!
//! The shared layer works on three stacked row blocks `[fg; bg; comp]`. Its
//! mask has the block pattern
//!
//! ```text
//!          K_fg   K_bg   K_comp
//! Q_fg  [  1      ν      ν     ]
//! Q_bg  [  ν      1      ν     ]
//! Q_comp[  α      β      γ     ]
//! ```
//!
//! where `ν` always blocks. A blocked entry forces the logit to the sentinel
//! regardless of the sign of `q·k`; a finite entry multiplies `q·k` before
//! the `√d` division. The dense `3m × 3m` mask is never built: each query
//! block only visits the key blocks its row of the pattern leaves open.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, BlockIndex, Tensor};

/// Row/column block positions inside a shared-attention triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Foreground = 0,
    Background = 1,
    Composite = 2,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Foreground, Source::Background, Source::Composite];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Source::Foreground => "fg",
            Source::Background => "bg",
            Source::Composite => "self",
        }
    }
}

/// One entry of the similarity mask: a finite similarity multiplier or the
/// blocking sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskEntry {
    Weight(f64),
    Blocked,
}

impl MaskEntry {
    pub fn is_blocked(self) -> bool {
        matches!(self, MaskEntry::Blocked)
    }

    pub fn weight(self) -> Option<f64> {
        match self {
            MaskEntry::Weight(w) => Some(w),
            MaskEntry::Blocked => None,
        }
    }

    fn validate(self, name: &str) -> Result<Self> {
        match self {
            MaskEntry::Weight(w) if !w.is_finite() => Err(Error::InvalidEntry(format!(
                "{name} must be finite or blocked, got {w}"
            ))),
            e => Ok(e),
        }
    }
}

impl From<f64> for MaskEntry {
    /// `-inf` maps to [`MaskEntry::Blocked`].
    fn from(x: f64) -> Self {
        if x == f64::NEG_INFINITY {
            MaskEntry::Blocked
        } else {
            MaskEntry::Weight(x)
        }
    }
}

impl fmt::Display for MaskEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskEntry::Weight(w) => write!(f, "{w}"),
            MaskEntry::Blocked => f.write_str("-inf"),
        }
    }
}

impl FromStr for MaskEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "-inf" | "-infinity" | "blocked" | "sentinel" => Ok(MaskEntry::Blocked),
            _ => {
                let w: f64 = s
                    .parse()
                    .map_err(|_| Error::InvalidEntry(format!("cannot parse {s:?}")))?;
                MaskEntry::from(w).validate("entry")
            }
        }
    }
}

impl Serialize for MaskEntry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MaskEntry::Weight(w) => s.serialize_f64(*w),
            MaskEntry::Blocked => s.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for MaskEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(w) => Ok(MaskEntry::Weight(w)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// The composite row of the similarity mask. The reference rows are fixed
/// (own block open with weight 1, everything else blocked).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityMask {
    alpha: MaskEntry,
    beta: MaskEntry,
    gamma: MaskEntry,
}

impl SimilarityMask {
    /// Composite attends only to itself: three independent self-attentions.
    pub const RECONSTRUCT: Self = Self {
        alpha: MaskEntry::Blocked,
        beta: MaskEntry::Blocked,
        gamma: MaskEntry::Weight(1.0),
    };

    /// Composite attends only to the two references, unscaled.
    pub const DISENTANGLE: Self = Self {
        alpha: MaskEntry::Weight(1.0),
        beta: MaskEntry::Weight(1.0),
        gamma: MaskEntry::Blocked,
    };

    /// Default reweighting: content reference damped, style reference boosted.
    pub const REWEIGHT: Self = Self {
        alpha: MaskEntry::Weight(0.9),
        beta: MaskEntry::Weight(1.1),
        gamma: MaskEntry::Blocked,
    };

    pub fn new(alpha: MaskEntry, beta: MaskEntry, gamma: MaskEntry) -> Result<Self> {
        let alpha = alpha.validate("alpha")?;
        let beta = beta.validate("beta")?;
        let gamma = gamma.validate("gamma")?;
        if alpha.is_blocked() && beta.is_blocked() && gamma.is_blocked() {
            return Err(Error::CompositeFullyMasked);
        }
        Ok(Self { alpha, beta, gamma })
    }

    /// Disentangled mask with the given reference weights (`γ` blocked).
    pub fn reweight(alpha: MaskEntry, beta: MaskEntry) -> Result<Self> {
        Self::new(alpha, beta, MaskEntry::Blocked)
    }

    pub fn alpha(&self) -> MaskEntry {
        self.alpha
    }

    pub fn beta(&self) -> MaskEntry {
        self.beta
    }

    pub fn gamma(&self) -> MaskEntry {
        self.gamma
    }

    /// Cross-reference entry; always blocked.
    pub fn nu(&self) -> MaskEntry {
        MaskEntry::Blocked
    }

    /// Entry for queries in `query` attending to keys in `key`.
    pub fn entry(&self, query: Source, key: Source) -> MaskEntry {
        match (query, key) {
            (Source::Composite, Source::Foreground) => self.alpha,
            (Source::Composite, Source::Background) => self.beta,
            (Source::Composite, Source::Composite) => self.gamma,
            (q, k) if q == k => MaskEntry::Weight(1.0),
            _ => self.nu(),
        }
    }

    pub fn is_reconstruct(&self) -> bool {
        *self == Self::RECONSTRUCT
    }
}

/// Convenience constructor mirroring [`SimilarityMask::new`].
pub fn build_mask(
    alpha: impl Into<MaskEntry>,
    beta: impl Into<MaskEntry>,
    gamma: impl Into<MaskEntry>,
) -> Result<SimilarityMask> {
    SimilarityMask::new(alpha.into(), beta.into(), gamma.into())
}

/// Projected queries, keys and values for a stacked triplet.
#[derive(Clone, Debug)]
pub struct AttentionProjections {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub head_count: usize,
    pub block: BlockIndex,
}

impl AttentionProjections {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, head_count: usize, block: BlockIndex) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "q/k/v shapes {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if block.count != 3 || q.rows() != block.total_rows() {
            return Err(Error::Shape(format!(
                "{} rows do not form a triplet of {}-row blocks",
                q.rows(),
                block.m
            )));
        }
        let d = q.cols();
        if head_count == 0 || d == 0 || !d.is_multiple_of(head_count) {
            return Err(Error::Shape(format!(
                "width {d} not divisible into {head_count} heads"
            )));
        }
        Ok(Self {
            q,
            k,
            v,
            head_count,
            block,
        })
    }

    pub fn width(&self) -> usize {
        self.q.cols()
    }

    fn head_ranges(&self) -> Vec<Range<usize>> {
        head_ranges(self.width(), self.head_count)
    }

    fn block_rows<'a>(&self, t: &'a Tensor, s: Source) -> &'a [f64] {
        let r = self.block.range(s.index());
        let d = self.width();
        &t.data()[r.start * d..r.end * d]
    }
}

fn head_ranges(d: usize, heads: usize) -> Vec<Range<usize>> {
    let w = d / heads;
    (0..heads).map(|h| h * w..(h + 1) * w).collect()
}

/// A block of keys/values visible to a query block, with its similarity
/// multiplier. Slices are row-major with the full model width.
struct KeyBlock<'a> {
    weight: f64,
    k: &'a [f64],
    v: &'a [f64],
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Fills `logits` with `(weight · q·k) / √d_head` for every visible key.
fn row_logits(q_row: &[f64], width: usize, head: &Range<usize>, keys: &[KeyBlock<'_>], logits: &mut Vec<f64>) {
    let scale = (head.len() as f64).sqrt();
    let qh = &q_row[head.clone()];
    logits.clear();
    for kb in keys {
        for k_row in kb.k.chunks_exact(width) {
            logits.push((kb.weight * dot(qh, &k_row[head.clone()])) / scale);
        }
    }
}

/// Attention for a block of queries against the visible key blocks, writing
/// the head's columns of `out`.
fn attend_block(
    q: &[f64],
    width: usize,
    head: &Range<usize>,
    keys: &[KeyBlock<'_>],
    out: &mut [f64],
) -> Result<()> {
    let mut logits = Vec::new();
    for (q_row, o_row) in q.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        row_logits(q_row, width, head, keys, &mut logits);
        softmax_in_place(&mut logits)?;
        let o = &mut o_row[head.clone()];
        o.iter_mut().for_each(|x| *x = 0.0);
        let mut j = 0;
        for kb in keys {
            for v_row in kb.v.chunks_exact(width) {
                let w = logits[j];
                j += 1;
                for (acc, &vv) in o.iter_mut().zip(&v_row[head.clone()]) {
                    *acc += w * vv;
                }
            }
        }
    }
    Ok(())
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.shape().len() != 2 || k.shape() != v.shape() || k.shape().len() != 2 || q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "self_attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.cols() == 0 || k.rows() == 0 {
        return Err(Error::Shape("self_attention on empty input".into()));
    }
    Ok(())
}

/// `softmax(q·kᵀ/√d)·v` for a single head.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    multi_head_self_attention(q, k, v, 1)
}

/// Self-attention with the width split evenly into `heads` heads.
pub fn multi_head_self_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("width {d} not divisible into {heads} heads")));
    }
    let mut out = Tensor::zeros(&[q.rows(), d]);
    let keys = [KeyBlock {
        weight: 1.0,
        k: k.data(),
        v: v.data(),
    }];
    for head in head_ranges(d, heads) {
        attend_block(q.data(), d, &head, &keys, out.data_mut())?;
    }
    Ok(out)
}

fn visible_keys<'a>(proj: &'a AttentionProjections, mask: &SimilarityMask, query: Source) -> Vec<KeyBlock<'a>> {
    Source::ALL
        .iter()
        .filter_map(|&key| {
            mask.entry(query, key).weight().map(|weight| KeyBlock {
                weight,
                k: proj.block_rows(&proj.k, key),
                v: proj.block_rows(&proj.v, key),
            })
        })
        .collect()
}

/// Similarity-masked attention over a stacked `[fg; bg; comp]` triplet.
///
/// Reference blocks only see themselves with weight 1, so their output is
/// bit-identical to [`multi_head_self_attention`] on the block alone.
pub fn shared_attention(proj: &AttentionProjections, mask: &SimilarityMask) -> Result<Tensor> {
    let d = proj.width();
    let mut out = Tensor::zeros(&[proj.block.total_rows(), d]);
    for head in proj.head_ranges() {
        for query in Source::ALL {
            let keys = visible_keys(proj, mask, query);
            let r = proj.block.range(query.index());
            let q = proj.block_rows(&proj.q, query);
            let o = &mut out.data_mut()[r.start * d..r.end * d];
            attend_block(q, d, &head, &keys, o)?;
        }
    }
    Ok(out)
}

/// Bin counts of pre-softmax scaled similarities, one series per key source,
/// all sharing the same uniform bin edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub low: f64,
    pub high: f64,
    /// Counts indexed `[source][bin]`.
    pub counts: [Vec<u64>; 3],
}

impl SimilarityHistogram {
    pub const BINS: usize = 64;

    pub fn bin_count(&self) -> usize {
        self.counts[0].len()
    }

    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.high - self.low) / self.bin_count() as f64;
        (self.low + w * bin as f64, self.low + w * (bin + 1) as f64)
    }

    fn build(samples: &[Vec<f64>; 3], bins: usize) -> Self {
        let (mut low, mut high) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in samples.iter().flatten() {
            low = low.min(*s);
            high = high.max(*s);
        }
        if !low.is_finite() {
            low = 0.0;
            high = 1.0;
        } else if high <= low {
            high = low + 1.0;
        }
        let width = (high - low) / bins as f64;
        let counts = std::array::from_fn(|src| {
            let mut c = vec![0u64; bins];
            for &s in &samples[src] {
                let b = (((s - low) / width) as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        });
        Self { low, high, counts }
    }
}

/// Where the composite queries send their attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    pub mass_to_fg: Vec<f64>,
    pub mass_to_bg: Vec<f64>,
    pub mass_to_self: Vec<f64>,
    pub similarity_histogram: SimilarityHistogram,
}

impl AttentionDiagnostics {
    pub fn mass(&self, source: Source) -> &[f64] {
        match source {
            Source::Foreground => &self.mass_to_fg,
            Source::Background => &self.mass_to_bg,
            Source::Composite => &self.mass_to_self,
        }
    }

    pub fn mean_mass(&self, source: Source) -> f64 {
        let m = self.mass(source);
        m.iter().sum::<f64>() / m.len() as f64
    }
}

/// Per-composite-query attention mass split by source (averaged over heads)
/// and the histogram of the scaled similarities feeding the softmax.
pub fn attention_diagnostics(proj: &AttentionProjections, mask: &SimilarityMask) -> Result<AttentionDiagnostics> {
    let d = proj.width();
    let m = proj.block.m;
    let heads = proj.head_ranges();
    let mut mass = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    let mut samples: [Vec<f64>; 3] = Default::default();
    let q = proj.block_rows(&proj.q, Source::Composite);

    let open: Vec<(Source, KeyBlock<'_>)> = Source::ALL
        .iter()
        .filter_map(|&key| {
            mask.entry(Source::Composite, key).weight().map(|weight| {
                (
                    key,
                    KeyBlock {
                        weight,
                        k: proj.block_rows(&proj.k, key),
                        v: proj.block_rows(&proj.v, key),
                    },
                )
            })
        })
        .collect();
    if open.is_empty() {
        return Err(Error::CompositeFullyMasked);
    }
    let keys: Vec<KeyBlock<'_>> = open
        .iter()
        .map(|(_, kb)| KeyBlock {
            weight: kb.weight,
            k: kb.k,
            v: kb.v,
        })
        .collect();

    let mut logits = Vec::new();
    for head in &heads {
        for (i, q_row) in q.chunks_exact(d).enumerate() {
            row_logits(q_row, d, head, &keys, &mut logits);
            let mut j = 0;
            for (src, _) in &open {
                samples[src.index()].extend_from_slice(&logits[j..j + m]);
                j += m;
            }
            softmax_in_place(&mut logits)?;
            let mut per_source = [0.0; 3];
            let mut j = 0;
            for (src, _) in &open {
                per_source[src.index()] = logits[j..j + m].iter().sum::<f64>();
                j += m;
            }
            let total = per_source[0] + per_source[1] + per_source[2];
            for s in 0..3 {
                mass[s][i] += per_source[s] / total;
            }
        }
    }
    let h = heads.len() as f64;
    if heads.len() > 1 {
        for series in mass.iter_mut() {
            series.iter_mut().for_each(|x| *x /= h);
        }
    }
    let [mass_to_fg, mass_to_bg, mass_to_self] = mass;
    Ok(AttentionDiagnostics {
        mass_to_fg,
        mass_to_bg,
        mass_to_self,
        similarity_histogram: SimilarityHistogram::build(&samples, SimilarityHistogram::BINS),
    })
}
