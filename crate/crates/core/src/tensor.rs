//! Dense rank-4 tensors and direct 2-D convolution.
//!
//! Activations are NCHW and weights OIHW, both row-major with the last axis
//! fastest. Convolution is cross-correlation (no kernel flip). Kernel index
//! `[i, j]` is `[row, col]`; vertical quantities (`sy`, `py`, `dy`) act on rows
//! and horizontal ones (`sx`, `px`, `dx`) on columns.

use rayon::prelude::*;

use crate::error::{dim_err, geom_err, Error, Result};

/// Dense rank-4 array of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    /// Builds a tensor from row-major data, rejecting length mismatches and
    /// non-finite values.
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(dim_err(format!(
                "data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims,
                len
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        constant_tensor(dims, 0.0)
    }

    /// Builds a tensor by evaluating `f` at every `[d0, d1, d2, d3]` index in
    /// row-major order.
    ///
    /// Panics if `f` yields a non-finite value.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        let v = f([a, b, c, d]);
                        assert!(v.is_finite(), "non-finite value at {:?}", [a, b, c, d]);
                        data.push(v);
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> f32 {
        self.data[self.offset(idx)]
    }

    /// Contiguous slice holding entry `i` of the leading axis (one filter for
    /// OIHW weights, one image for NCHW activations).
    pub fn outer(&self, i: usize) -> &[f32] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Copies entry `i` of the leading axis into a `[1, d1, d2, d3]` tensor.
    pub fn outer_tensor(&self, i: usize) -> Tensor4 {
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.outer(i).to_vec(),
        }
    }

    /// Stacks `[1, d1, d2, d3]`-compatible slices along the leading axis.
    pub fn stack(inner: [usize; 3], items: &[&[f32]]) -> Result<Tensor4> {
        let per: usize = inner.iter().product();
        let mut data = Vec::with_capacity(per * items.len());
        for item in items {
            if item.len() != per {
                return Err(dim_err(format!(
                    "stack item has {} elements, expected {}",
                    item.len(),
                    per
                )));
            }
            data.extend_from_slice(item);
        }
        Tensor4::new([items.len(), inner[0], inner[1], inner[2]], data)
    }

    /// Reorders the leading axis so that `out[new] = self[perm[new]]`.
    pub fn permute_axis0(&self, perm: &[usize]) -> Result<Tensor4> {
        if perm.len() != self.dims[0] {
            return Err(dim_err(format!(
                "permutation of length {} applied to axis of size {}",
                perm.len(),
                self.dims[0]
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &old in perm {
            if old >= self.dims[0] {
                return Err(dim_err(format!("permutation index {old} out of range")));
            }
            data.extend_from_slice(self.outer(old));
        }
        Ok(Tensor4 { dims: self.dims, data })
    }

    /// Reorders the second axis so that `out[:, new] = self[:, perm[new]]`.
    pub fn permute_axis1(&self, perm: &[usize]) -> Result<Tensor4> {
        let [d0, d1, d2, d3] = self.dims;
        if perm.len() != d1 {
            return Err(dim_err(format!(
                "permutation of length {} applied to axis of size {}",
                perm.len(),
                d1
            )));
        }
        if let Some(&bad) = perm.iter().find(|&&p| p >= d1) {
            return Err(dim_err(format!("permutation index {bad} out of range")));
        }
        let plane = d2 * d3;
        let mut data = Vec::with_capacity(self.data.len());
        for a in 0..d0 {
            for &old in perm {
                let start = (a * d1 + old) * plane;
                data.extend_from_slice(&self.data[start..start + plane]);
            }
        }
        Ok(Tensor4 { dims: self.dims, data })
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims != other.dims {
            return Err(dim_err(format!(
                "cannot subtract {:?} from {:?}",
                other.dims, self.dims
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor4::new(self.dims, data)
    }

    /// Largest elementwise deviation from `reference`, measured as
    /// `|a - b| / max(|b|, floor)`.
    pub fn max_rel_diff(&self, reference: &Tensor4, floor: f64) -> Result<f64> {
        if self.dims != reference.dims {
            return Err(dim_err(format!(
                "cannot compare {:?} with {:?}",
                self.dims, reference.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let (a, b) = (a as f64, b as f64);
                (a - b).abs() / b.abs().max(floor)
            })
            .fold(0.0, f64::max))
    }
}

/// Tensor of the given dims with every element set to `value`.
///
/// Panics if `value` is not finite.
pub fn constant_tensor(dims: [usize; 4], value: f32) -> Tensor4 {
    assert!(value.is_finite(), "constant tensor value must be finite");
    Tensor4 {
        dims,
        data: vec![value; dims.iter().product()],
    }
}

/// Sum of absolute values, accumulated in `f64`.
pub fn l1_norm(t: &Tensor4) -> f64 {
    t.data.iter().map(|v| (*v as f64).abs()).sum()
}

/// Stride, zero padding, dilation and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn with_stride(mut self, sy: usize, sx: usize) -> Self {
        self.stride = (sy, sx);
        self
    }

    pub fn with_padding(mut self, py: usize, px: usize) -> Self {
        self.padding = (py, px);
        self
    }

    pub fn with_dilation(mut self, dy: usize, dx: usize) -> Self {
        self.dilation = (dy, dx);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(geom_err("stride must be positive"));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(geom_err("dilation must be positive"));
        }
        if self.groups == 0 {
            return Err(geom_err("groups must be positive"));
        }
        Ok(())
    }

    /// Output spatial dims for an `h × w` input and a `kh × kw` kernel.
    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |size: usize, pad: usize, dil: usize, k: usize, stride: usize, name: &str| {
            let span = dil * (k.max(1) - 1) + 1;
            let padded = size + 2 * pad;
            if k == 0 || padded < span {
                return Err(geom_err(format!(
                    "{name}: padded size {padded} is smaller than the dilated kernel extent {span}"
                )));
            }
            Ok((padded - span) / stride + 1)
        };
        Ok((
            axis(h, self.padding.0, self.dilation.0, kh, self.stride.0, "height")?,
            axis(w, self.padding.1, self.dilation.1, kw, self.stride.1, "width")?,
        ))
    }
}

/// Computes one output plane: channels `in_base..in_base + cin_g` of image `n`
/// against one filter of shape `[cin_g, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_plane(
    input: &Tensor4,
    n: usize,
    in_base: usize,
    filter: &[f32],
    kh: usize,
    kw: usize,
    geom: &ConvGeometry,
    out: &mut [f32],
    wo: usize,
) {
    let [_, c_total, h, w] = input.dims;
    let cin_g = filter.len() / (kh * kw);
    let (sy, sx) = geom.stride;
    let (py, px) = geom.padding;
    let (dy, dx) = geom.dilation;
    let image = input.outer(n);
    for (pos, slot) in out.iter_mut().enumerate() {
        let (y, x) = (pos / wo, pos % wo);
        let mut acc = 0.0f64;
        for c in 0..cin_g {
            let chan = &image[(in_base + c) * h * w..(in_base + c + 1) * h * w];
            debug_assert!(in_base + c < c_total);
            let taps = &filter[c * kh * kw..(c + 1) * kh * kw];
            for i in 0..kh {
                let iy = (y * sy + i * dy) as isize - py as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row = &chan[iy as usize * w..(iy as usize + 1) * w];
                for j in 0..kw {
                    let ix = (x * sx + j * dx) as isize - px as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += taps[i * kw + j] as f64 * row[ix as usize] as f64;
                }
            }
        }
        *slot = acc as f32;
    }
}

/// Checks operand shapes against `geom` and returns `(ho, wo)`.
pub(crate) fn check_conv_shapes(input: &Tensor4, weights: &Tensor4, geom: &ConvGeometry) -> Result<(usize, usize)> {
    geom.validate()?;
    let [_, c_in, h, w] = input.dims;
    let [c_out, cin_g, kh, kw] = weights.dims;
    let g = geom.groups;
    if c_in % g != 0 || c_out % g != 0 {
        return Err(dim_err(format!(
            "channels (in {c_in}, out {c_out}) not divisible by groups {g}"
        )));
    }
    if cin_g * g != c_in {
        return Err(dim_err(format!(
            "weights expect {} input channels per group, input has {} channels over {} groups",
            cin_g, c_in, g
        )));
    }
    geom.output_dims(h, w, kh, kw)
}

/// Direct 2-D convolution (cross-correlation) with zero padding.
///
/// Products are accumulated in `f64` in `(c, i, j)` order and rounded once to
/// `f32`. Output planes are computed in parallel; the result does not depend
/// on the thread count.
pub fn conv2d(input: &Tensor4, weights: &Tensor4, geom: &ConvGeometry) -> Result<Tensor4> {
    let (ho, wo) = check_conv_shapes(input, weights, geom)?;
    let n = input.dims[0];
    let [c_out, cin_g, kh, kw] = weights.dims;
    let cout_g = c_out / geom.groups;
    let mut out = vec![0.0f32; n * c_out * ho * wo];
    if !out.is_empty() {
        out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, plane)| {
            let (b, o) = (idx / c_out, idx % c_out);
            let in_base = (o / cout_g) * cin_g;
            conv_plane(input, b, in_base, weights.outer(o), kh, kw, geom, plane, wo);
        });
    }
    Tensor4::new([n, c_out, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_full_overlap() {
        let x = constant_tensor([1, 1, 5, 5], 1.0);
        let w = constant_tensor([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &ConvGeometry::default()).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor4::from_fn([2, 1, 6, 7], |[a, _, c, d]| (a * 100 + c * 7 + d) as f32 - 20.0);
        let w = Tensor4::from_fn([1, 1, 3, 3], |[_, _, i, j]| if i == 1 && j == 1 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &ConvGeometry::default().with_padding(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_tensor_cases() {
        let t = constant_tensor([1, 1, 2, 2], 1.0);
        assert_eq!(t.data(), &[1.0; 4]);
        assert!(constant_tensor([1, 1, 0, 5], 3.0).is_empty());
        let z = constant_tensor([2, 3, 4, 4], 0.0);
        assert_eq!(z.len(), 96);
        assert_eq!(z.data().iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn l1_cases() {
        let t = Tensor4::new([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        assert_eq!(l1_norm(&t), 6.0);
        assert_eq!(l1_norm(&Tensor4::zeros([1, 2, 3, 3])), 0.0);
        assert_eq!(l1_norm(&Tensor4::zeros([0, 2, 3, 3])), 0.0);
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Tensor4::new([1, 1, 1, 2], vec![0.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            Tensor4::new([1, 1, 1, 2], vec![0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn shape_and_geometry_errors() {
        let x = Tensor4::zeros([1, 3, 4, 4]);
        let w = Tensor4::zeros([2, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, &ConvGeometry::default()),
            Err(Error::Dimension(_))
        ));
        let w = Tensor4::zeros([2, 3, 5, 5]);
        assert!(matches!(
            conv2d(&x, &w, &ConvGeometry::default()),
            Err(Error::Geometry(_))
        ));
        let w = Tensor4::zeros([2, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, &ConvGeometry::default().with_dilation(2, 2)),
            Err(Error::Geometry(_))
        ));
        assert!(conv2d(&x, &w, &ConvGeometry::default().with_stride(0, 1)).is_err());
    }

    #[test]
    fn output_dims_formula() {
        let g = ConvGeometry::default().with_stride(2, 2).with_padding(1, 1);
        assert_eq!(g.output_dims(8, 8, 3, 3).unwrap(), (4, 4));
        let g = ConvGeometry::default().with_padding(2, 4).with_dilation(2, 4);
        assert_eq!(g.output_dims(7, 9, 3, 3).unwrap(), (7, 9));
    }

    #[test]
    fn permutations_round_trip() {
        let t = Tensor4::from_fn([3, 4, 2, 2], |[a, b, c, d]| (a * 1000 + b * 100 + c * 10 + d) as f32);
        let p = [2, 0, 1];
        let q = [1, 2, 0];
        assert_eq!(t.permute_axis0(&p).unwrap().permute_axis0(&q).unwrap(), t);
        let p = [3, 1, 0, 2];
        let q = [2, 1, 3, 0];
        let r = t.permute_axis1(&p).unwrap();
        assert_eq!(r.get([1, 0, 1, 1]), t.get([1, 3, 1, 1]));
        assert_eq!(r.permute_axis1(&q).unwrap(), t);
    }
}
