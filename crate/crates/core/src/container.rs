//! The `.icw` weight container.
//!
//! Layout:
//!
//! ```text
//! "ICWEIGHT"            8 bytes magic
//! version               u32 little-endian, currently 1
//! header_len            u64 little-endian
//! header                header_len bytes of UTF-8 JSON
//! zero padding          up to the next 64-byte boundary
//! blobs                 f32 little-endian, row-major, each zero-padded
//!                       to a multiple of 64 bytes
//! ```
//!
//! Tensor offsets in the header are relative to the first blob. Tensors are
//! declared per layer in chain order: `<layer>.weight`, then `<layer>.scale`
//! and `<layer>.bias` when the layer has a per-channel affine.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, geom_err, Error, Result};
use crate::prng::{Distribution, Prng};
use crate::rearrange::{ChannelPermutation, GroupedPlan, PatternGroup};
use crate::search::LayerSpec;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 8] = b"ICWEIGHT";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Enlarged `(2·k·d_max+1)²` kernels.
    Supernet,
    /// Compact `(2k+1)²` kernels plus a grouped plan per searchable layer.
    Inception,
}

/// Per-output-channel `y = scale · x + bias` applied after the convolution
/// (a folded batch norm).
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub scale: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Affine {
    pub fn permuted(&self, perm: &ChannelPermutation) -> Affine {
        Affine {
            scale: perm.apply(&self.scale),
            bias: perm.apply(&self.bias),
        }
    }
}

/// Header form of a grouped plan; the compact kernels are the layer weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanHeader {
    pub groups: Vec<PatternGroup>,
    pub perm: Vec<usize>,
    /// Channels per sort block.
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEntry {
    pub spec: LayerSpec,
    pub weights: Tensor4,
    pub affine: Option<Affine>,
    pub plan: Option<PlanHeader>,
}

impl LayerEntry {
    /// Reassembles the executable plan of an inception layer.
    pub fn grouped_plan(&self) -> Result<GroupedPlan> {
        let plan = self
            .plan
            .as_ref()
            .ok_or_else(|| geom_err(format!("layer `{}` has no grouped plan", self.spec.name)))?;
        GroupedPlan::new(
            plan.groups.clone(),
            ChannelPermutation::new(plan.perm.clone())?,
            plan.block,
            self.weights.clone(),
        )
    }
}

/// A sequential chain of convolution layers with their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelContainer {
    pub kind: ModelKind,
    pub provenance: String,
    pub layers: Vec<LayerEntry>,
    /// Output channel order of the last layer when it differs from the
    /// original order (`out[new] = original[perm[new]]`).
    pub final_output_perm: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    #[serde(flatten)]
    spec: LayerSpec,
    affine: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plan: Option<PlanHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dims: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    provenance: String,
    layers: Vec<LayerHeader>,
    tensors: Vec<TensorHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_output_perm: Option<Vec<usize>>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl ModelContainer {
    pub fn layers(&self) -> &[LayerEntry] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    /// Tensors in declaration order.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let name = &layer.spec.name;
            out.push((
                format!("{name}.weight"),
                layer.weights.dims().to_vec(),
                layer.weights.data(),
            ));
            if let Some(affine) = &layer.affine {
                out.push((format!("{name}.scale"), vec![affine.scale.len()], &affine.scale[..]));
                out.push((format!("{name}.bias"), vec![affine.bias.len()], &affine.bias[..]));
            }
        }
        out
    }

    /// Checks the chain, kernel sides, affine lengths and plans.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidContainer("model has no layers".into()));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let spec = &layer.spec;
            spec.validate()?;
            if self.layers[..idx].iter().any(|l| l.spec.name == spec.name) {
                return Err(Error::InvalidContainer(format!("duplicate layer name `{}`", spec.name)));
            }
            match self.kind {
                ModelKind::Supernet => {
                    spec.check_supernet_weights(layer.weights.dims())?;
                    if layer.plan.is_some() {
                        return Err(Error::InvalidContainer(format!(
                            "supernet layer `{}` carries a grouped plan",
                            spec.name
                        )));
                    }
                }
                ModelKind::Inception => {
                    let side = spec.compact_side();
                    let expected = [spec.c_out, spec.cin_per_group(), side, side];
                    if layer.weights.dims() != expected {
                        return Err(geom_err(format!(
                            "inception layer `{}`: weights {:?}, expected {:?}",
                            spec.name,
                            layer.weights.dims(),
                            expected
                        )));
                    }
                    if spec.is_searchable() {
                        layer.grouped_plan()?.check_against(spec)?;
                    } else if layer.plan.is_some() {
                        return Err(Error::InvalidContainer(format!(
                            "pointwise layer `{}` carries a grouped plan",
                            spec.name
                        )));
                    }
                }
            }
            if let Some(affine) = &layer.affine {
                if affine.scale.len() != spec.c_out || affine.bias.len() != spec.c_out {
                    return Err(dim_err(format!(
                        "layer `{}`: affine has {} scales and {} biases for {} channels",
                        spec.name,
                        affine.scale.len(),
                        affine.bias.len(),
                        spec.c_out
                    )));
                }
                if let Some(i) = affine.scale.iter().chain(&affine.bias).position(|v| !v.is_finite()) {
                    return Err(Error::InvalidContainer(format!(
                        "layer `{}`: non-finite affine value at {i}",
                        spec.name
                    )));
                }
            }
            if let Some(prev) = idx.checked_sub(1).map(|i| &self.layers[i]) {
                if prev.spec.c_out != spec.c_in {
                    return Err(Error::InvalidContainer(format!(
                        "chain break: `{}` produces {} channels, `{}` expects {}",
                        prev.spec.name, prev.spec.c_out, spec.name, spec.c_in
                    )));
                }
            }
        }
        if let Some(perm) = &self.final_output_perm {
            let last = self.layers.last().expect("non-empty");
            let perm = ChannelPermutation::new(perm.clone())?;
            if perm.len() != last.spec.c_out {
                return Err(dim_err(format!(
                    "final_output_perm has length {}, last layer `{}` has {} channels",
                    perm.len(),
                    last.spec.name,
                    last.spec.c_out
                )));
            }
        }
        Ok(())
    }

    /// Canonical serialization.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let tensors = self.tensors();
        let mut offset = 0u64;
        let mut headers = Vec::with_capacity(tensors.len());
        for (name, dims, data) in &tensors {
            let nbytes = (data.len() * 4) as u64;
            headers.push(TensorHeader {
                name: name.clone(),
                dims: dims.clone(),
                offset,
                nbytes,
            });
            offset += align_up(nbytes as usize) as u64;
        }
        let header = Header {
            kind: self.kind,
            provenance: self.provenance.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    spec: l.spec.clone(),
                    affine: l.affine.is_some(),
                    plan: l.plan.clone(),
                })
                .collect(),
            tensors: headers,
            final_output_perm: self.final_output_perm.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let blob_start = align_up(PREAMBLE + json.len());
        let mut out = Vec::with_capacity(blob_start + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(blob_start, 0);
        for (_, _, data) in &tensors {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.resize(align_up(out.len()), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::TruncatedHeader);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or(Error::TruncatedHeader)?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])?;
        let blob_start = align_up(header_end);

        let mut expected_names = Vec::new();
        for l in &header.layers {
            expected_names.push(format!("{}.weight", l.spec.name));
            if l.affine {
                expected_names.push(format!("{}.scale", l.spec.name));
                expected_names.push(format!("{}.bias", l.spec.name));
            }
        }
        let declared: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if declared != expected_names {
            return Err(Error::InvalidContainer(format!(
                "tensor list {declared:?} does not match layers (expected {expected_names:?})"
            )));
        }

        let mut blobs = Vec::with_capacity(header.tensors.len());
        let mut next_offset = 0u64;
        for t in &header.tensors {
            let count: usize = t.dims.iter().product();
            if t.nbytes != 4 * count as u64 {
                return Err(Error::InvalidContainer(format!(
                    "tensor {}: {} bytes declared for dims {:?}",
                    t.name, t.nbytes, t.dims
                )));
            }
            if t.offset != next_offset {
                return Err(Error::InvalidContainer(format!(
                    "tensor {}: offset {} is not canonical (expected {})",
                    t.name, t.offset, next_offset
                )));
            }
            next_offset += align_up(t.nbytes as usize) as u64;
            let start = blob_start + t.offset as usize;
            let end = start + t.nbytes as usize;
            if end > bytes.len() {
                return Err(Error::TruncatedTensor(t.name.clone()));
            }
            let values: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidContainer(format!(
                    "tensor {}: non-finite value at {i}",
                    t.name
                )));
            }
            blobs.push((t, values));
        }

        let mut blobs = blobs.into_iter();
        let mut layers = Vec::with_capacity(header.layers.len());
        for l in header.layers {
            let (t, values) = blobs.next().expect("weight declared");
            let dims: [usize; 4] = t
                .dims
                .clone()
                .try_into()
                .map_err(|_| dim_err(format!("tensor {}: expected rank 4, got dims {:?}", t.name, t.dims)))?;
            let weights = Tensor4::new(dims, values)?;
            let affine = if l.affine {
                let (_, scale) = blobs.next().expect("scale declared");
                let (_, bias) = blobs.next().expect("bias declared");
                Some(Affine { scale, bias })
            } else {
                None
            };
            layers.push(LayerEntry {
                spec: l.spec,
                weights,
                affine,
                plan: l.plan,
            });
        }
        let model = ModelContainer {
            kind: header.kind,
            provenance: header.provenance,
            layers,
            final_output_perm: header.final_output_perm,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One layer of a generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecl {
    #[serde(flatten)]
    pub spec: LayerSpec,
    #[serde(default)]
    pub affine: bool,
}

impl LayerDecl {
    pub fn new(spec: LayerSpec, affine: bool) -> Self {
        Self { spec, affine }
    }
}

/// Contents of a `spec.json` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerDecl>,
    #[serde(default)]
    pub distribution: Distribution,
}

impl ModelSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Builds a supernet container with weights drawn from a seeded stream.
///
/// Values are drawn in tensor declaration order. Weights follow `dist`;
/// affine scales are `0.5 + u` and biases `0.1·(2u − 1)` with `u` from
/// [`Prng::unit24`].
pub fn generate(seed: u64, layers: &[LayerDecl], dist: Distribution) -> Result<ModelContainer> {
    let mut rng = Prng::new(seed);
    let mut entries = Vec::with_capacity(layers.len());
    for decl in layers {
        let spec = decl.spec.clone();
        spec.validate()?;
        let side = spec.supernet_side();
        let dims = [spec.c_out, spec.cin_per_group(), side, side];
        let weights = Tensor4::new(dims, rng.fill(dims.iter().product(), dist))?;
        let affine = decl.affine.then(|| {
            let scale = (0..spec.c_out).map(|_| (0.5 + rng.unit24()) as f32).collect();
            let bias = (0..spec.c_out)
                .map(|_| (0.1 * (2.0 * rng.unit24() - 1.0)) as f32)
                .collect();
            Affine { scale, bias }
        });
        entries.push(LayerEntry {
            spec,
            weights,
            affine,
            plan: None,
        });
    }
    let label = match dist {
        Distribution::Uniform { a } => format!("uniform(a={a})"),
        Distribution::Gaussian { sigma } => format!("gaussian(sigma={sigma})"),
    };
    let model = ModelContainer {
        kind: ModelKind::Supernet,
        provenance: format!("generated seed={seed} {label}"),
        layers: entries,
        final_output_perm: None,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_layer() -> Vec<LayerDecl> {
        vec![
            LayerDecl::new(LayerSpec::new("conv1", 1, 2, 3, 4), true),
            LayerDecl::new(LayerSpec::new("conv2", 1, 2, 4, 4).with_groups(2), false),
            LayerDecl::new(LayerSpec::new("conv3", 1, 2, 4, 6).with_stride(2, 2), true),
        ]
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = generate(42, &three_layer(), Distribution::default()).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = ModelContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], b"ICWEIGHT");
    }

    #[test]
    fn blobs_are_aligned() {
        let m = generate(1, &three_layer(), Distribution::default()).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(bytes.len() % 64, 0);
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let first = align_up(20 + header_len);
        let w = m.layers[0].weights.data();
        assert_eq!(&bytes[first..first + 4], &w[0].to_le_bytes());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(42, &three_layer(), Distribution::default()).unwrap();
        let b = generate(42, &three_layer(), Distribution::default()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = generate(43, &three_layer(), Distribution::default()).unwrap();
        assert_ne!(a.layers[0].weights, c.layers[0].weights);
    }

    #[test]
    fn zero_sigma_gives_zero_weights() {
        let m = generate(5, &three_layer(), Distribution::Gaussian { sigma: 0.0 }).unwrap();
        assert!(m.layers.iter().all(|l| l.weights.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn seed_one_test_vector() {
        let layers = [LayerDecl::new(LayerSpec::new("c", 1, 1, 1, 1), false)];
        let m = generate(1, &layers, Distribution::Uniform { a: 1.0 }).unwrap();
        let first: Vec<f32> = m.layers[0].weights.data()[..4].to_vec();
        let mut rng = Prng::new(1);
        let expected: Vec<f32> = (0..4).map(|_| rng.uniform(1.0)).collect();
        assert_eq!(first, expected);
        assert_eq!(first, GOLDEN_SEED1);
    }

    /// First four `uniform(a=1)` values for seed 1, as multiples of 2⁻²³.
    const GOLDEN_SEED1: [f32; 4] = [
        1116717.0 / 8388608.0,
        4123533.0 / 8388608.0,
        7902114.0 / 8388608.0,
        -933498.0 / 8388608.0,
    ];

    #[test]
    fn truncated_blob_is_named() {
        let m = generate(2, &three_layer(), Distribution::default()).unwrap();
        let bytes = m.to_bytes().unwrap();
        let cut = bytes.len() - 100;
        let err = ModelContainer::from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(err.to_string(), "truncated tensor conv3.bias");
    }

    #[test]
    fn wrong_magic_and_version() {
        let m = generate(2, &three_layer(), Distribution::default()).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        bytes[8] = 2;
        assert!(matches!(
            ModelContainer::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));
        bytes[0] = b'X';
        assert!(matches!(ModelContainer::from_bytes(&bytes), Err(Error::BadMagic)));
        assert!(matches!(
            ModelContainer::from_bytes(b"ICWEIGHT\x01"),
            Err(Error::TruncatedHeader)
        ));
    }

    #[test]
    fn rejects_wrong_supernet_side() {
        let layers = [LayerDecl::new(LayerSpec::new("conv1", 1, 2, 1, 1), false)];
        let mut m = generate(3, &layers, Distribution::default()).unwrap();
        m.layers[0].spec.d_max = 4;
        let err = m.to_bytes().unwrap_err();
        assert!(err.to_string().contains("expected side 9"), "{err}");

        // Same check on the read path: patch the header by hand.
        let ok = generate(3, &layers, Distribution::default()).unwrap();
        let bytes = ok.to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[20..20 + header_len]).unwrap();
        let patched = header.replace("\"d_max\":2", "\"d_max\":4");
        assert_eq!(patched.len(), header.len());
        let mut bad = bytes.clone();
        bad[20..20 + header_len].copy_from_slice(patched.as_bytes());
        let err = ModelContainer::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("expected side 9"), "{err}");
        assert!(err.to_string().contains("conv1"), "{err}");
    }

    #[test]
    fn rejects_chain_break() {
        let layers = [
            LayerDecl::new(LayerSpec::new("a", 1, 2, 1, 3), false),
            LayerDecl::new(LayerSpec::new("b", 1, 2, 2, 1), false),
        ];
        let err = generate(0, &layers, Distribution::default()).unwrap_err();
        assert!(err.to_string().contains("chain break"), "{err}");
    }

    #[test]
    fn spec_json_parses() {
        let s = r#"{"layers":[{"name":"c1","k":1,"d_max":4,"c_in":3,"c_out":8,"groups":1,"stride":[1,1],"affine":true}],
                   "distribution":{"kind":"gaussian","sigma":0.5}}"#;
        let spec = ModelSpec::from_json(s).unwrap();
        assert_eq!(spec.layers[0].spec.supernet_side(), 9);
        assert!(spec.layers[0].affine);
        assert_eq!(spec.distribution, Distribution::Gaussian { sigma: 0.5 });
        let s = r#"{"layers":[{"name":"c1","k":1,"d_max":2,"c_in":1,"c_out":1,"groups":1,"stride":[1,1]}]}"#;
        let spec = ModelSpec::from_json(s).unwrap();
        assert_eq!(spec.distribution, Distribution::Uniform { a: 1.0 });
        assert!(!spec.layers[0].affine);
    }
}
