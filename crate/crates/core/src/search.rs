//! Per-filter dilation pattern selection.
//!
//! A supernet layer with base kernel `(2k+1)²` carries enlarged kernels of
//! side `S = 2·k·d_max + 1`. Each candidate pattern `(dx, dy)` samples a
//! `(2k+1)²` sub-grid of that kernel. The representation error of a pattern
//! is the response of the discarded (unsampled) weights to a constant input,
//! which reduces to the absolute value of their signed sum. Every filter is
//! scored independently, so the layer-wide optimum is the concatenation of
//! per-filter optima.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{LayerEntry, ModelContainer};
use crate::error::{dim_err, geom_err, Result};
use crate::tensor::Tensor4;

/// Per-axis dilation rates of one filter. `dx` acts on columns, `dy` on rows.
///
/// Patterns order lexicographically by `(dy, dx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DilationPattern {
    pub dx: usize,
    pub dy: usize,
}

impl DilationPattern {
    pub const fn new(dx: usize, dy: usize) -> Self {
        Self { dx, dy }
    }

    pub const DENSE: DilationPattern = DilationPattern::new(1, 1);

    pub fn is_valid(&self, d_max: usize) -> bool {
        (1..=d_max).contains(&self.dx) && (1..=d_max).contains(&self.dy)
    }

    fn check(&self, d_max: usize) -> Result<()> {
        if self.is_valid(d_max) {
            Ok(())
        } else {
            Err(geom_err(format!("pattern {self} outside [1, {d_max}]²")))
        }
    }

    /// All `d_max²` patterns, `dy` outer and `dx` inner.
    pub fn enumerate(d_max: usize) -> impl Iterator<Item = DilationPattern> {
        (1..=d_max).flat_map(move |dy| (1..=d_max).map(move |dx| DilationPattern::new(dx, dy)))
    }
}

impl Ord for DilationPattern {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.dy, self.dx).cmp(&(other.dy, other.dx))
    }
}

impl PartialOrd for DilationPattern {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for DilationPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.dx, self.dy)
    }
}

/// Geometry of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Base kernel half-width; the base kernel is `(2k+1)²`.
    pub k: usize,
    pub d_max: usize,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "unit_stride")]
    pub stride: [usize; 2],
}

fn one() -> usize {
    1
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, k: usize, d_max: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.into(),
            k,
            d_max,
            c_in,
            c_out,
            groups: 1,
            stride: [1, 1],
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, sy: usize, sx: usize) -> Self {
        self.stride = [sy, sx];
        self
    }

    /// Side of the enlarged supernet kernel.
    pub fn supernet_side(&self) -> usize {
        2 * self.k * self.d_max + 1
    }

    /// Side of the base (compact) kernel.
    pub fn compact_side(&self) -> usize {
        2 * self.k + 1
    }

    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Pointwise (`k = 0`) layers have a single candidate and are not searched.
    pub fn is_searchable(&self) -> bool {
        self.k > 0
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.name;
        if self.d_max == 0 {
            return Err(geom_err(format!("layer `{name}`: d_max must be positive")));
        }
        if self.c_in == 0 || self.c_out == 0 || self.groups == 0 {
            return Err(geom_err(format!(
                "layer `{name}`: channels and groups must be positive"
            )));
        }
        if !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(geom_err(format!(
                "layer `{name}`: channels (in {}, out {}) not divisible by groups {}",
                self.c_in, self.c_out, self.groups
            )));
        }
        if self.stride[0] == 0 || self.stride[1] == 0 {
            return Err(geom_err(format!("layer `{name}`: stride must be positive")));
        }
        Ok(())
    }

    /// Validates the declared supernet weight shape `[c_out, c_in/g, S, S]`.
    pub fn check_supernet_weights(&self, dims: [usize; 4]) -> Result<()> {
        let side = self.supernet_side();
        if dims[2] != side || dims[3] != side {
            return Err(geom_err(format!(
                "layer `{}`: kernel is {}x{}, expected side {} (2·k·d_max+1 with k={}, d_max={})",
                self.name, dims[2], dims[3], side, self.k, self.d_max
            )));
        }
        let expected = [self.c_out, self.cin_per_group(), side, side];
        if dims != expected {
            return Err(dim_err(format!(
                "layer `{}`: weights {:?}, expected {:?}",
                self.name, dims, expected
            )));
        }
        Ok(())
    }
}

/// Selected pattern and its representation error for every output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub layer: String,
    pub d_max: usize,
    pub patterns: Vec<DilationPattern>,
    pub errors: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentDoc {
    layer: String,
    d_max: usize,
    /// `[dy, dx]` per output channel.
    patterns: Vec<[usize; 2]>,
    errors: Vec<f64>,
}

/// Rounds to nine significant digits.
pub(crate) fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

impl Assignment {
    fn to_doc(&self) -> AssignmentDoc {
        AssignmentDoc {
            layer: self.layer.clone(),
            d_max: self.d_max,
            patterns: self.patterns.iter().map(|p| [p.dy, p.dx]).collect(),
            errors: self.errors.iter().map(|&e| round_sig9(e)).collect(),
        }
    }

    fn from_doc(doc: AssignmentDoc) -> Result<Self> {
        if doc.patterns.len() != doc.errors.len() {
            return Err(dim_err(format!(
                "assignment `{}`: {} patterns but {} errors",
                doc.layer,
                doc.patterns.len(),
                doc.errors.len()
            )));
        }
        let patterns: Vec<_> = doc
            .patterns
            .iter()
            .map(|&[dy, dx]| DilationPattern::new(dx, dy))
            .collect();
        for p in &patterns {
            p.check(doc.d_max)
                .map_err(|e| geom_err(format!("assignment `{}`: {e}", doc.layer)))?;
        }
        Ok(Self {
            layer: doc.layer,
            d_max: doc.d_max,
            patterns,
            errors: doc.errors,
        })
    }

    /// Canonical JSON: `{layer, d_max, patterns: [[dy, dx], ...], errors}`,
    /// errors rounded to nine significant digits.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("assignment serializes")
    }

    pub fn to_json_compact(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("assignment serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(s)?)
    }
}

/// Grid coordinates `(row, col)` sampled by `p` inside the `S × S` supernet
/// kernel, in row-major order.
pub fn sampled_positions(k: usize, d_max: usize, p: DilationPattern) -> Result<Vec<(usize, usize)>> {
    p.check(d_max)?;
    let center = k * d_max;
    let mut out = Vec::with_capacity((2 * k + 1) * (2 * k + 1));
    for i in 0..=2 * k {
        for j in 0..=2 * k {
            out.push((center + i * p.dy - k * p.dy, center + j * p.dx - k * p.dx));
        }
    }
    Ok(out)
}

/// `S × S` boolean mask of the sampled positions, row-major.
fn sample_mask(k: usize, d_max: usize, p: DilationPattern) -> Result<Vec<bool>> {
    let side = 2 * k * d_max + 1;
    let mut mask = vec![false; side * side];
    for (r, c) in sampled_positions(k, d_max, p)? {
        mask[r * side + c] = true;
    }
    Ok(mask)
}

fn check_filter_side(filter: &Tensor4, k: usize, d_max: usize) -> Result<usize> {
    let side = 2 * k * d_max + 1;
    let [_, _, h, w] = filter.dims();
    if h != side || w != side {
        return Err(dim_err(format!(
            "filter is {h}x{w}, expected {side}x{side} for k={k}, d_max={d_max}"
        )));
    }
    Ok(side)
}

/// Keeps the filter's values at the sampled positions of `p` and zeroes the
/// rest, identically for every input channel.
pub fn embed_dilated(filter: &Tensor4, p: DilationPattern, k: usize, d_max: usize) -> Result<Tensor4> {
    let side = check_filter_side(filter, k, d_max)?;
    let mask = sample_mask(k, d_max, p)?;
    let plane = side * side;
    let data = filter
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| if mask[idx % plane] { v } else { 0.0 })
        .collect();
    Tensor4::new(filter.dims(), data)
}

/// `|signed sum of unsampled weights|` of one filter stored as
/// `[c, side, side]`, accumulated in `(c, row, col)` order.
fn residual_of(filter: &[f32], mask: &[bool]) -> f64 {
    let plane = mask.len();
    let mut acc = 0.0f64;
    for (idx, &v) in filter.iter().enumerate() {
        if !mask[idx % plane] {
            acc += v as f64;
        }
    }
    acc.abs()
}

/// Representation error of pattern `p` for one filter: the absolute signed
/// sum of every weight `p` discards, over all input channels.
///
/// This is the per-position response of `filter - embed_dilated(filter, p)`
/// to an all-ones input, with the pattern-independent scale factors dropped.
pub fn residual_sum(filter: &Tensor4, p: DilationPattern, k: usize, d_max: usize) -> Result<f64> {
    check_filter_side(filter, k, d_max)?;
    let mask = sample_mask(k, d_max, p)?;
    Ok(residual_of(filter.data(), &mask))
}

struct PatternTable {
    masks: Vec<(DilationPattern, Vec<bool>)>,
}

impl PatternTable {
    fn new(k: usize, d_max: usize) -> Self {
        let masks = DilationPattern::enumerate(d_max)
            .map(|p| (p, sample_mask(k, d_max, p).expect("enumerated pattern is valid")))
            .collect();
        Self { masks }
    }

    /// Strict `<` keeps the first minimum in `(dy, dx)` order.
    fn select(&self, filter: &[f32]) -> (DilationPattern, f64) {
        let mut best = (DilationPattern::DENSE, f64::INFINITY);
        for (p, mask) in &self.masks {
            let e = residual_of(filter, mask);
            if e < best.1 {
                best = (*p, e);
            }
        }
        best
    }
}

/// Scores every pattern for one filter and returns the minimizer.
///
/// Ties go to the lexicographically smallest `(dy, dx)`.
pub fn select_pattern(filter: &Tensor4, k: usize, d_max: usize) -> Result<(DilationPattern, f64)> {
    check_filter_side(filter, k, d_max)?;
    if d_max == 0 {
        return Err(geom_err("d_max must be positive"));
    }
    Ok(PatternTable::new(k, d_max).select(filter.data()))
}

/// Selects a pattern for every output channel of a supernet layer.
pub fn edo_layer(weights: &Tensor4, spec: &LayerSpec) -> Result<Assignment> {
    spec.validate()?;
    spec.check_supernet_weights(weights.dims())?;
    let table = PatternTable::new(spec.k, spec.d_max);
    let picks: Vec<(DilationPattern, f64)> = (0..spec.c_out)
        .into_par_iter()
        .map(|o| table.select(weights.outer(o)))
        .collect();
    let (patterns, errors) = picks.into_iter().unzip();
    Ok(Assignment {
        layer: spec.name.clone(),
        d_max: spec.d_max,
        patterns,
        errors,
    })
}

/// Assignments for every searchable layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSearch {
    pub assignments: Vec<Assignment>,
    /// Pointwise (`k = 0`) layers, which have nothing to search.
    pub skipped: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelSearchDoc {
    assignments: Vec<AssignmentDoc>,
    skipped: Vec<String>,
}

impl ModelSearch {
    pub fn to_json(&self) -> String {
        let doc = ModelSearchDoc {
            assignments: self.assignments.iter().map(Assignment::to_doc).collect(),
            skipped: self.skipped.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("search result serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelSearchDoc = serde_json::from_str(s)?;
        Ok(Self {
            assignments: doc
                .assignments
                .into_iter()
                .map(Assignment::from_doc)
                .collect::<Result<_>>()?,
            skipped: doc.skipped,
        })
    }

    pub fn get(&self, layer: &str) -> Option<&Assignment> {
        self.assignments.iter().find(|a| a.layer == layer)
    }
}

/// Runs the search over every layer of a supernet container using `d_max`.
///
/// Each searchable layer must declare the same `d_max` and carry kernels of
/// side `2·k·d_max + 1`; otherwise a geometry error names the layer.
pub fn edo_model(model: &ModelContainer, d_max: usize) -> Result<ModelSearch> {
    let mut assignments = Vec::new();
    let mut skipped = Vec::new();
    for LayerEntry { spec, weights, .. } in model.layers() {
        if !spec.is_searchable() {
            skipped.push(spec.name.clone());
            continue;
        }
        if spec.d_max != d_max {
            return Err(geom_err(format!(
                "layer `{}` declares d_max={}, search requested d_max={}",
                spec.name, spec.d_max, d_max
            )));
        }
        spec.check_supernet_weights(weights.dims())?;
        assignments.push(edo_layer(weights, spec)?);
    }
    Ok(ModelSearch { assignments, skipped })
}
