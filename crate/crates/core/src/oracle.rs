//! Brute-force reference implementations in `f64`.
//!
//! Nothing here shares code with the fast paths beyond the plain data types.
//! Everything is single-threaded. Dot products are summed exactly and
//! rounded once, so results do not depend on term order.

use crate::container::{ModelContainer, ModelKind};
use crate::error::{dim_err, geom_err, Error, Result};
use crate::search::{Assignment, DilationPattern, LayerSpec};
use crate::tensor::{ConvGeometry, Tensor4};

/// Largest joint search space [`joint_enumeration`] will walk.
pub const JOINT_LIMIT: u64 = 1_000_000;

/// Every candidate pattern with its error, in `(dy, dx)` order.
pub type PatternErrors = Vec<(DilationPattern, f64)>;

/// Dense rank-4 `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor64 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor64 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    fn idx(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.idx(a, b, c, d)]
    }

    fn set(&mut self, a: usize, b: usize, c: usize, d: usize, v: f64) {
        let i = self.idx(a, b, c, d);
        self.data[i] = v;
    }
}

impl From<&Tensor4> for Tensor64 {
    fn from(t: &Tensor4) -> Self {
        Self {
            dims: t.dims(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Exact running sum of `f64` terms as a list of non-overlapping partials.
#[derive(Default)]
struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Adds `a·b` without rounding the product.
    fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        self.add(p);
        self.add(a.mul_add(b, -p));
    }

    /// The sum rounded to nearest, ties to even.
    fn value(&self) -> f64 {
        let mut n = self.partials.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = self.partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            let y = self.partials[n - 1];
            n -= 1;
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // Half-way case: the remaining partials decide the rounding direction.
        if n > 0 && ((lo < 0.0 && self.partials[n - 1] < 0.0) || (lo > 0.0 && self.partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Textbook convolution: seven nested loops `(n, o, y, x, c, i, j)`, each
/// output summed exactly.
pub fn conv2d_naive(input: &Tensor64, weights: &Tensor64, geom: &ConvGeometry) -> Result<Tensor64> {
    let [n, c_in, h, w] = input.dims;
    let [c_out, cin_g, kh, kw] = weights.dims;
    let g = geom.groups;
    let (sy, sx) = geom.stride;
    let (py, px) = geom.padding;
    let (dy, dx) = geom.dilation;
    if g == 0 || sy == 0 || sx == 0 || dy == 0 || dx == 0 {
        return Err(geom_err("stride, dilation and groups must be positive"));
    }
    if c_in % g != 0 || c_out % g != 0 || cin_g * g != c_in {
        return Err(dim_err(format!(
            "input {:?} and weights {:?} disagree for groups {g}",
            input.dims, weights.dims
        )));
    }
    let out_h = (h + 2 * py) as isize - (dy * (kh - 1) + 1) as isize;
    let out_w = (w + 2 * px) as isize - (dx * (kw - 1) + 1) as isize;
    if kh == 0 || kw == 0 || out_h < 0 || out_w < 0 {
        return Err(geom_err("kernel extent exceeds padded input"));
    }
    let ho = out_h as usize / sy + 1;
    let wo = out_w as usize / sx + 1;
    let cout_g = c_out / g;

    let mut out = Tensor64::zeros([n, c_out, ho, wo]);
    for b in 0..n {
        for o in 0..c_out {
            let base = (o / cout_g) * cin_g;
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = ExactSum::default();
                    for c in 0..cin_g {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * sy + i * dy) as isize - py as isize;
                                let ix = (x * sx + j * dx) as isize - px as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc.add_product(
                                    weights.get(o, c, i, j),
                                    input.get(b, base + c, iy as usize, ix as usize),
                                );
                            }
                        }
                    }
                    out.set(b, o, y, x, acc.value());
                }
            }
        }
    }
    Ok(out)
}

/// The pattern's dilated kernel written out at full size: `filter` at
/// `(k·d_max + i·dy, k·d_max + j·dx)` for `i, j ∈ [−k, k]`, zero elsewhere.
fn dilated_kernel(filter: &Tensor64, p: DilationPattern, k: usize, d_max: usize) -> Tensor64 {
    let mut out = Tensor64::zeros(filter.dims);
    let center = (k * d_max) as isize;
    let k = k as isize;
    for a in 0..filter.dims[0] {
        for c in 0..filter.dims[1] {
            for i in -k..=k {
                for j in -k..=k {
                    let r = (center + i * p.dy as isize) as usize;
                    let col = (center + j * p.dx as isize) as usize;
                    out.set(a, c, r, col, filter.get(a, c, r, col));
                }
            }
        }
    }
    out
}

/// Representation error evaluated literally: build the dilated kernel,
/// subtract it from the filter, convolve the difference (valid, stride 1)
/// with an all-ones input of side `input_side`, take the L1 norm and divide
/// by the number of output positions.
pub fn eq4_error_explicit(
    filter: &Tensor4,
    p: DilationPattern,
    k: usize,
    d_max: usize,
    input_side: usize,
) -> Result<f64> {
    let side = 2 * k * d_max + 1;
    let [one, c, h, w] = filter.dims();
    if one != 1 || h != side || w != side {
        return Err(dim_err(format!(
            "filter {:?} is not [1, C, {side}, {side}]",
            filter.dims()
        )));
    }
    if !p.is_valid(d_max) {
        return Err(geom_err(format!("pattern {p} outside d_max={d_max}")));
    }
    if input_side < side {
        return Err(geom_err(format!(
            "input side {input_side} is smaller than the kernel side {side}"
        )));
    }
    let full = Tensor64::from(filter);
    let sampled = dilated_kernel(&full, p, k, d_max);
    let residual = Tensor64 {
        dims: full.dims,
        data: full.data.iter().zip(&sampled.data).map(|(a, b)| a - b).collect(),
    };
    let ones = Tensor64 {
        dims: [1, c, input_side, input_side],
        data: vec![1.0; c * input_side * input_side],
    };
    let response = conv2d_naive(&ones, &residual, &ConvGeometry::default())?;
    let l1: f64 = response.data.iter().map(|v| v.abs()).sum();
    Ok(l1 / response.data.len() as f64)
}

/// Argmin of [`eq4_error_explicit`] over all patterns, first minimum in
/// `(dy, dx)` order, together with every pattern's error.
pub fn explicit_argmin(
    filter: &Tensor4,
    k: usize,
    d_max: usize,
    input_side: usize,
) -> Result<(DilationPattern, f64, PatternErrors)> {
    let mut all = Vec::with_capacity(d_max * d_max);
    for dy in 1..=d_max {
        for dx in 1..=d_max {
            let p = DilationPattern::new(dx, dy);
            all.push((p, eq4_error_explicit(filter, p, k, d_max, input_side)?));
        }
    }
    let mut best = all[0];
    for &(p, e) in &all[1..] {
        if e < best.1 {
            best = (p, e);
        }
    }
    Ok((best.0, best.1, all))
}

/// Exhaustive minimization of the summed objective over all
/// `d_max^(2·c_out)` joint assignments of a layer.
///
/// Candidates are visited in lexicographic order (channel 0 most
/// significant, patterns in `(dy, dx)` order) and the first minimum wins.
pub fn joint_enumeration(weights: &Tensor4, spec: &LayerSpec) -> Result<Assignment> {
    let side = spec.supernet_side();
    let per_channel = (spec.d_max * spec.d_max) as u64;
    let candidates = (per_channel as f64).powi(spec.c_out as i32);
    if candidates > JOINT_LIMIT as f64 {
        return Err(Error::EnumerationLimit {
            candidates,
            limit: JOINT_LIMIT,
        });
    }
    if weights.dims() != [spec.c_out, spec.c_in / spec.groups, side, side] {
        return Err(dim_err(format!(
            "layer `{}`: weights {:?} do not match the supernet shape",
            spec.name,
            weights.dims()
        )));
    }
    let mut patterns = Vec::new();
    for dy in 1..=spec.d_max {
        for dx in 1..=spec.d_max {
            patterns.push(DilationPattern::new(dx, dy));
        }
    }
    let table: Vec<Vec<f64>> = (0..spec.c_out)
        .map(|o| {
            let filter = weights.outer_tensor(o);
            patterns
                .iter()
                .map(|&p| eq4_error_explicit(&filter, p, spec.k, spec.d_max, side))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let m = patterns.len();
    let mut digits = vec![0usize; spec.c_out];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..candidates as u64 {
        let total: f64 = digits.iter().enumerate().map(|(o, &d)| table[o][d]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, digits.clone()));
        }
        // Advance the odometer; the last channel is least significant.
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < m {
                break;
            }
            *d = 0;
        }
    }
    let (_, choice) = best.expect("at least one candidate");
    Ok(Assignment {
        layer: spec.name.clone(),
        d_max: spec.d_max,
        patterns: choice.iter().map(|&d| patterns[d]).collect(),
        errors: choice.iter().enumerate().map(|(o, &d)| table[o][d]).collect(),
    })
}

fn affine64(x: &mut Tensor64, scale: &[f32], bias: &[f32]) {
    let [_, c, h, w] = x.dims;
    for (idx, v) in x.data.iter_mut().enumerate() {
        let ch = (idx / (h * w)) % c;
        *v = *v * scale[ch] as f64 + bias[ch] as f64;
    }
}

/// Runs a chain entirely in `f64` with [`conv2d_naive`].
///
/// Supernet layers convolve their full kernels with padding `k·d_max`.
/// Inception layers run one naive dilated convolution per pattern group
/// and scatter the results into their channel ranges.
pub fn forward_naive(model: &ModelContainer, input: &Tensor64) -> Result<Tensor64> {
    let mut x = input.clone();
    for layer in &model.layers {
        let spec = &layer.spec;
        let [sy, sx] = spec.stride;
        let weights = Tensor64::from(&layer.weights);
        x = match model.kind {
            ModelKind::Supernet => {
                let pad = spec.k * spec.d_max;
                let geom = ConvGeometry::default()
                    .with_stride(sy, sx)
                    .with_padding(pad, pad)
                    .with_groups(spec.groups);
                conv2d_naive(&x, &weights, &geom)?
            }
            ModelKind::Inception => inception_naive(&x, &weights, layer.plan.as_ref(), spec)?,
        };
        if let Some(a) = &layer.affine {
            affine64(&mut x, &a.scale, &a.bias);
        }
    }
    Ok(x)
}

fn inception_naive(
    x: &Tensor64,
    weights: &Tensor64,
    plan: Option<&crate::container::PlanHeader>,
    spec: &LayerSpec,
) -> Result<Tensor64> {
    let [sy, sx] = spec.stride;
    let k = spec.k;
    let Some(plan) = plan else {
        let geom = ConvGeometry::default()
            .with_stride(sy, sx)
            .with_padding(k, k)
            .with_groups(spec.groups);
        return conv2d_naive(x, weights, &geom);
    };
    let cin_g = spec.c_in / spec.groups;
    let cout_g = spec.c_out / spec.groups;
    let mut out: Option<Tensor64> = None;
    for g in &plan.groups {
        let conv_group = g.start / cout_g;
        // Slice this group's filters and its conv-group's input channels.
        let [_, _, kh, kw] = weights.dims;
        let per = cin_g * kh * kw;
        let sub_w = Tensor64 {
            dims: [g.count, cin_g, kh, kw],
            data: weights.data[g.start * per..(g.start + g.count) * per].to_vec(),
        };
        let [n, _, h, w] = x.dims;
        let mut sub_x = Tensor64::zeros([n, cin_g, h, w]);
        for b in 0..n {
            for c in 0..cin_g {
                for r in 0..h {
                    for col in 0..w {
                        sub_x.set(b, c, r, col, x.get(b, conv_group * cin_g + c, r, col));
                    }
                }
            }
        }
        let (dy, dx) = (g.pattern.dy, g.pattern.dx);
        let geom = ConvGeometry::default()
            .with_stride(sy, sx)
            .with_padding(k * dy, k * dx)
            .with_dilation(dy, dx);
        let part = conv2d_naive(&sub_x, &sub_w, &geom)?;
        let [_, _, ho, wo] = part.dims;
        let dst = out.get_or_insert_with(|| Tensor64::zeros([n, spec.c_out, ho, wo]));
        if dst.dims[2..] != part.dims[2..] {
            return Err(geom_err(format!(
                "layer `{}`: group {} output {:?} disagrees with {:?}",
                spec.name, g.pattern, part.dims, dst.dims
            )));
        }
        for b in 0..n {
            for o in 0..g.count {
                for y in 0..ho {
                    for xx in 0..wo {
                        dst.set(b, g.start + o, y, xx, part.get(b, o, y, xx));
                    }
                }
            }
        }
    }
    out.ok_or_else(|| geom_err(format!("layer `{}` has an empty plan", spec.name)))
}
