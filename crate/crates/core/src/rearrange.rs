//! Filter rearrangement: turn an [`Assignment`] into an executable grouped
//! plan and carry the resulting channel permutation through a sequential
//! chain so the network function is unchanged.

use serde::{Deserialize, Serialize};

use crate::container::{LayerEntry, ModelContainer, ModelKind, PlanHeader};
use crate::error::{dim_err, geom_err, Error, Result};
use crate::search::{embed_dilated, sampled_positions, Assignment, DilationPattern, LayerSpec, ModelSearch};
use crate::tensor::Tensor4;

/// Output channel reordering with `perm[new] = old`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPermutation(Vec<usize>);

impl ChannelPermutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(dim_err(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self(perm))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (new, &old) in self.0.iter().enumerate() {
            inv[old] = new;
        }
        Self(inv)
    }

    /// `out[new] = values[perm[new]]`.
    pub fn apply<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.0.iter().map(|&old| values[old]).collect()
    }

    /// True when every contiguous block of `block` channels maps onto itself.
    pub fn preserves_blocks(&self, block: usize) -> bool {
        block > 0 && self.0.iter().enumerate().all(|(new, &old)| new / block == old / block)
    }
}

/// A run of consecutive output channels sharing one dilation pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatternGroup {
    pub pattern: DilationPattern,
    pub start: usize,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct PatternGroupDoc {
    /// `[dy, dx]`
    pattern: [usize; 2],
    start: usize,
    count: usize,
}

impl Serialize for PatternGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PatternGroupDoc {
            pattern: [self.pattern.dy, self.pattern.dx],
            start: self.start,
            count: self.count,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PatternGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = PatternGroupDoc::deserialize(d)?;
        Ok(PatternGroup {
            pattern: DilationPattern::new(doc.pattern[1], doc.pattern[0]),
            start: doc.start,
            count: doc.count,
        })
    }
}

/// Executable form of an inception convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedPlan {
    pub groups: Vec<PatternGroup>,
    pub perm: ChannelPermutation,
    /// Channels per sort block. Patterns ascend within a block; the
    /// permutation never leaves it.
    pub block: usize,
    /// `[c_out, c_in/g, 2k+1, 2k+1]`, in rearranged channel order.
    pub compact_kernels: Tensor4,
}

impl GroupedPlan {
    pub fn new(
        groups: Vec<PatternGroup>,
        perm: ChannelPermutation,
        block: usize,
        compact_kernels: Tensor4,
    ) -> Result<Self> {
        let plan = Self {
            groups,
            perm,
            block,
            compact_kernels,
        };
        let c_out = plan.compact_kernels.dims()[0];
        if plan.perm.len() != c_out {
            return Err(dim_err(format!(
                "plan permutation has length {}, kernels have {} channels",
                plan.perm.len(),
                c_out
            )));
        }
        let mut next = 0;
        for g in &plan.groups {
            if g.start != next || g.count == 0 {
                return Err(geom_err(format!(
                    "plan groups do not tile the channels: group {} at {}+{} (expected start {})",
                    g.pattern, g.start, g.count, next
                )));
            }
            next += g.count;
        }
        if next != c_out {
            return Err(geom_err(format!("plan groups cover {next} of {c_out} channels")));
        }
        if block == 0 || !c_out.is_multiple_of(block) || !plan.perm.preserves_blocks(block) {
            return Err(geom_err(format!(
                "plan permutation does not stay within sort blocks of {block} channels"
            )));
        }
        let mut prev: Option<&PatternGroup> = None;
        for g in &plan.groups {
            if g.start / block != (g.start + g.count - 1) / block {
                return Err(geom_err(format!(
                    "group {} at {}+{} straddles a sort block boundary",
                    g.pattern, g.start, g.count
                )));
            }
            if let Some(p) = prev {
                if p.start / block == g.start / block && p.pattern >= g.pattern {
                    return Err(geom_err(format!(
                        "group patterns not strictly increasing at channel {}",
                        g.start
                    )));
                }
            }
            prev = Some(g);
        }
        Ok(plan)
    }

    /// Checks the plan against the layer geometry: kernel shape, pattern
    /// range, conv-group confinement and pattern order.
    pub fn check_against(&self, spec: &LayerSpec) -> Result<()> {
        let side = spec.compact_side();
        let expected = [spec.c_out, spec.cin_per_group(), side, side];
        if self.compact_kernels.dims() != expected {
            return Err(geom_err(format!(
                "layer `{}`: compact kernels {:?}, expected {:?}",
                spec.name,
                self.compact_kernels.dims(),
                expected
            )));
        }
        if !spec.cout_per_group().is_multiple_of(self.block) {
            return Err(geom_err(format!(
                "layer `{}`: sort blocks of {} channels cross conv-group boundaries",
                spec.name, self.block
            )));
        }
        if let Some(g) = self.groups.iter().find(|g| !g.pattern.is_valid(spec.d_max)) {
            return Err(geom_err(format!(
                "layer `{}`: pattern {} outside d_max={}",
                spec.name, g.pattern, spec.d_max
            )));
        }
        Ok(())
    }

    /// Pattern of every output channel in rearranged order.
    pub fn channel_patterns(&self) -> Vec<DilationPattern> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.pattern, g.count))
            .collect()
    }

    pub fn header(&self) -> PlanHeader {
        PlanHeader {
            groups: self.groups.clone(),
            perm: self.perm.as_slice().to_vec(),
            block: self.block,
        }
    }
}

/// Stable sort of output channels by `(dy, dx)` within each of `blocks`
/// equal contiguous ranges.
pub fn build_permutation(a: &Assignment, blocks: usize) -> Result<ChannelPermutation> {
    let n = a.patterns.len();
    if blocks == 0 || !n.is_multiple_of(blocks) {
        return Err(geom_err(format!(
            "layer `{}`: {} channels cannot be split into {} blocks",
            a.layer, n, blocks
        )));
    }
    let size = n / blocks;
    let mut perm: Vec<usize> = (0..n).collect();
    for chunk in perm.chunks_mut(size.max(1)) {
        chunk.sort_by_key(|&o| a.patterns[o]);
    }
    ChannelPermutation::new(perm)
}

/// Gathers the sampled values of one `[cin_g, S, S]` filter into a dense
/// `[cin_g, 2k+1, 2k+1]` kernel.
pub fn gather_compact(filter: &[f32], cin_g: usize, p: DilationPattern, k: usize, d_max: usize) -> Result<Vec<f32>> {
    let side = 2 * k * d_max + 1;
    if filter.len() != cin_g * side * side {
        return Err(dim_err(format!(
            "filter has {} values, expected {}x{side}x{side}",
            filter.len(),
            cin_g
        )));
    }
    let pos = sampled_positions(k, d_max, p)?;
    let mut out = Vec::with_capacity(cin_g * pos.len());
    for c in 0..cin_g {
        let plane = &filter[c * side * side..(c + 1) * side * side];
        out.extend(pos.iter().map(|&(r, col)| plane[r * side + col]));
    }
    Ok(out)
}

/// Places compact kernels back at their sampled positions of the `S × S`
/// supernet grid (one pattern per output channel).
pub fn expand_compact(compact: &Tensor4, patterns: &[DilationPattern], k: usize, d_max: usize) -> Result<Tensor4> {
    let [c_out, cin_g, kh, kw] = compact.dims();
    if kh != 2 * k + 1 || kw != 2 * k + 1 || patterns.len() != c_out {
        return Err(dim_err(format!(
            "cannot expand {:?} with {} patterns for k={k}",
            compact.dims(),
            patterns.len()
        )));
    }
    let side = 2 * k * d_max + 1;
    let mut data = vec![0.0f32; c_out * cin_g * side * side];
    for (o, &p) in patterns.iter().enumerate() {
        let pos = sampled_positions(k, d_max, p)?;
        let src = compact.outer(o);
        for c in 0..cin_g {
            let dst = &mut data[(o * cin_g + c) * side * side..(o * cin_g + c + 1) * side * side];
            for (t, &(r, col)) in pos.iter().enumerate() {
                dst[r * side + col] = src[c * kh * kw + t];
            }
        }
    }
    Tensor4::new([c_out, cin_g, side, side], data)
}

/// Zero-embeds every filter of a supernet layer with its assigned pattern,
/// keeping the original channel order.
pub fn embed_assignment(weights: &Tensor4, a: &Assignment, spec: &LayerSpec) -> Result<Tensor4> {
    spec.check_supernet_weights(weights.dims())?;
    check_assignment(a, spec)?;
    let filters: Vec<Tensor4> = (0..spec.c_out)
        .map(|o| embed_dilated(&weights.outer_tensor(o), a.patterns[o], spec.k, spec.d_max))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = filters.iter().map(Tensor4::data).collect();
    let [_, c, s, _] = weights.dims();
    Tensor4::stack([c, s, s], &refs)
}

fn check_assignment(a: &Assignment, spec: &LayerSpec) -> Result<()> {
    if a.patterns.len() != spec.c_out {
        return Err(dim_err(format!(
            "assignment `{}` has {} patterns, layer `{}` has {} output channels",
            a.layer,
            a.patterns.len(),
            spec.name,
            spec.c_out
        )));
    }
    if a.d_max != spec.d_max {
        return Err(geom_err(format!(
            "assignment `{}` uses d_max={}, layer `{}` declares {}",
            a.layer, a.d_max, spec.name, spec.d_max
        )));
    }
    if let Some(p) = a.patterns.iter().find(|p| !p.is_valid(spec.d_max)) {
        return Err(geom_err(format!(
            "assignment `{}`: pattern {p} outside d_max={}",
            a.layer, spec.d_max
        )));
    }
    Ok(())
}

/// Builds the grouped plan for one layer, sorting within each conv-group.
pub fn extract_compact(weights: &Tensor4, a: &Assignment, spec: &LayerSpec) -> Result<GroupedPlan> {
    extract_compact_in_blocks(weights, a, spec, spec.groups)
}

/// As [`extract_compact`], with sorting confined to `blocks` equal channel
/// ranges. `blocks` must be a multiple of the layer's conv-group count.
pub fn extract_compact_in_blocks(
    weights: &Tensor4,
    a: &Assignment,
    spec: &LayerSpec,
    blocks: usize,
) -> Result<GroupedPlan> {
    spec.validate()?;
    spec.check_supernet_weights(weights.dims())?;
    check_assignment(a, spec)?;
    if !blocks.is_multiple_of(spec.groups) || !spec.c_out.is_multiple_of(blocks) {
        return Err(geom_err(format!(
            "layer `{}`: {} sort blocks incompatible with {} conv-groups over {} channels",
            spec.name, blocks, spec.groups, spec.c_out
        )));
    }
    let perm = build_permutation(a, blocks)?;
    let block = spec.c_out / blocks;
    let cin_g = spec.cin_per_group();

    let mut groups: Vec<PatternGroup> = Vec::new();
    let mut data = Vec::with_capacity(spec.c_out * cin_g * spec.compact_side().pow(2));
    for (new, &old) in perm.as_slice().iter().enumerate() {
        let p = a.patterns[old];
        match groups.last_mut() {
            Some(g) if g.pattern == p && new % block != 0 => g.count += 1,
            _ => groups.push(PatternGroup {
                pattern: p,
                start: new,
                count: 1,
            }),
        }
        data.extend(gather_compact(weights.outer(old), cin_g, p, spec.k, spec.d_max)?);
    }
    let side = spec.compact_side();
    let compact = Tensor4::new([spec.c_out, cin_g, side, side], data)?;
    GroupedPlan::new(groups, perm, block, compact)
}

/// Permutes the input-channel axis of `[c_out, cin_g, h, w]` weights whose
/// inputs were reordered by `perm` (global channel indices), where each
/// conv-group reads `cin_g` consecutive inputs.
fn permute_inputs(weights: &Tensor4, perm: &ChannelPermutation, groups: usize) -> Tensor4 {
    let [c_out, cin_g, h, w] = weights.dims();
    let cout_g = c_out / groups;
    let plane = h * w;
    let mut data = Vec::with_capacity(weights.len());
    for o in 0..c_out {
        let base = (o / cout_g) * cin_g;
        let filter = weights.outer(o);
        for l in 0..cin_g {
            let old = perm.as_slice()[base + l] - base;
            data.extend_from_slice(&filter[old * plane..(old + 1) * plane]);
        }
    }
    Tensor4::new(weights.dims(), data).expect("same shape")
}

/// Applies each layer's plan permutation to its output channels (weights and
/// affine) and to the next layer's input channels.
///
/// The last layer's permutation is recorded as `final_output_perm` instead
/// of being undone; an identity there is recorded as absent.
pub fn propagate(model: &ModelContainer, plans: &[Option<GroupedPlan>]) -> Result<ModelContainer> {
    if plans.len() != model.layers.len() {
        return Err(dim_err(format!(
            "{} plans for {} layers",
            plans.len(),
            model.layers.len()
        )));
    }
    let perms: Vec<ChannelPermutation> = model
        .layers
        .iter()
        .zip(plans)
        .map(|(l, p)| match p {
            Some(plan) => plan.perm.clone(),
            None => ChannelPermutation::identity(l.spec.c_out),
        })
        .collect();

    let mut layers: Vec<LayerEntry> = Vec::with_capacity(model.layers.len());
    for (i, (layer, perm)) in model.layers.iter().zip(&perms).enumerate() {
        let spec = &layer.spec;
        if perm.len() != spec.c_out {
            return Err(dim_err(format!(
                "layer `{}`: permutation of length {} for {} channels",
                spec.name,
                perm.len(),
                spec.c_out
            )));
        }
        if !perm.preserves_blocks(spec.cout_per_group()) {
            return Err(geom_err(format!(
                "layer `{}`: permutation crosses conv-group boundaries",
                spec.name
            )));
        }
        let mut weights = layer.weights.clone();
        if i > 0 {
            let prev = &perms[i - 1];
            if !prev.is_identity() {
                if !prev.preserves_blocks(spec.cin_per_group()) {
                    return Err(Error::Propagation {
                        from: model.layers[i - 1].spec.name.clone(),
                        to: spec.name.clone(),
                        reason: format!(
                            "permutation moves channels across the {} input groups of `{}`",
                            spec.groups, spec.name
                        ),
                    });
                }
                weights = permute_inputs(&weights, prev, spec.groups);
            }
        }
        if !perm.is_identity() {
            weights = weights.permute_axis0(perm.as_slice())?;
        }
        layers.push(LayerEntry {
            spec: spec.clone(),
            weights,
            affine: layer.affine.as_ref().map(|a| a.permuted(perm)),
            plan: layer.plan.clone(),
        });
    }

    let last = perms.last().expect("model has layers");
    let final_output_perm = match &model.final_output_perm {
        Some(prev) => {
            // Compose with an earlier recorded order: out[new] = orig[prev[last[new]]].
            let composed: Vec<usize> = last.as_slice().iter().map(|&m| prev[m]).collect();
            Some(composed).filter(|p| p.iter().enumerate().any(|(i, &v)| i != v))
        }
        None => (!last.is_identity()).then(|| last.as_slice().to_vec()),
    };
    Ok(ModelContainer {
        kind: model.kind,
        provenance: format!("{}; rearranged", model.provenance),
        layers,
        final_output_perm,
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Number of sort blocks for a layer so its permutation stays inside its own
/// conv-groups and inside the input groups of `next`.
pub fn sort_blocks(spec: &LayerSpec, next: Option<&LayerSpec>) -> usize {
    let own = spec.cout_per_group();
    let block = match next {
        Some(n) if n.c_in == spec.c_out => gcd(own, n.cin_per_group()),
        _ => own,
    };
    spec.c_out / block.max(1)
}

/// Converts a supernet into an inception model: builds every searchable
/// layer's plan, propagates the permutations, and replaces the supernet
/// kernels with compact ones.
pub fn apply(model: &ModelContainer, search: &ModelSearch) -> Result<ModelContainer> {
    if model.kind != ModelKind::Supernet {
        return Err(Error::InvalidContainer("apply expects a supernet model".into()));
    }
    model.validate()?;
    let mut plans = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let spec = &layer.spec;
        if !spec.is_searchable() {
            plans.push(None);
            continue;
        }
        let a = search
            .get(&spec.name)
            .ok_or_else(|| geom_err(format!("no assignment for layer `{}`", spec.name)))?;
        let next = model.layers.get(i + 1).map(|l| &l.spec);
        let blocks = sort_blocks(spec, next);
        plans.push(Some(extract_compact_in_blocks(&layer.weights, a, spec, blocks)?));
    }

    let mut out = propagate(model, &plans)?;
    for (layer, plan) in out.layers.iter_mut().zip(&plans) {
        let Some(plan) = plan else { continue };
        let spec = &layer.spec;
        let patterns = plan.channel_patterns();
        let cin_g = spec.cin_per_group();
        let mut data = Vec::with_capacity(spec.c_out * cin_g * spec.compact_side().pow(2));
        for (new, &p) in patterns.iter().enumerate() {
            data.extend(gather_compact(layer.weights.outer(new), cin_g, p, spec.k, spec.d_max)?);
        }
        let side = spec.compact_side();
        layer.weights = Tensor4::new([spec.c_out, cin_g, side, side], data)?;
        layer.plan = Some(plan.header());
    }
    out.kind = ModelKind::Inception;
    out.provenance = format!("{}; inception", model.provenance);
    out.validate()?;
    Ok(out)
}

/// The supernet with every filter zero-embedded by its assigned pattern, in
/// the original channel order: the function an inception model must match.
pub fn embed_model(model: &ModelContainer, search: &ModelSearch) -> Result<ModelContainer> {
    let mut out = model.clone();
    for layer in out.layers.iter_mut() {
        if !layer.spec.is_searchable() {
            continue;
        }
        let a = search
            .get(&layer.spec.name)
            .ok_or_else(|| geom_err(format!("no assignment for layer `{}`", layer.spec.name)))?;
        layer.weights = embed_assignment(&layer.weights, a, &layer.spec)?;
    }
    out.provenance = format!("{}; embedded", model.provenance);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{generate, LayerDecl};
    use crate::prng::Distribution;

    fn p(dx: usize, dy: usize) -> DilationPattern {
        DilationPattern::new(dx, dy)
    }

    fn assignment(patterns: Vec<DilationPattern>, d_max: usize) -> Assignment {
        let n = patterns.len();
        Assignment {
            layer: "l".into(),
            d_max,
            patterns,
            errors: vec![0.0; n],
        }
    }

    #[test]
    fn stable_sort_permutation() {
        let a = assignment(vec![p(2, 1), p(1, 1), p(2, 1), p(1, 1)], 2);
        assert_eq!(build_permutation(&a, 1).unwrap().as_slice(), &[1, 3, 0, 2]);
        let a = assignment(vec![p(2, 2); 5], 2);
        assert!(build_permutation(&a, 1).unwrap().is_identity());
        let a = assignment(vec![p(2, 2), p(1, 1), p(1, 1), p(2, 2)], 2);
        assert_eq!(build_permutation(&a, 2).unwrap().as_slice(), &[1, 0, 2, 3]);
        assert!(build_permutation(&a, 3).is_err());
    }

    #[test]
    fn permutation_inverse_round_trip() {
        let perm = ChannelPermutation::new(vec![2, 0, 3, 1]).unwrap();
        let t = Tensor4::from_fn([4, 2, 3, 3], |[a, b, c, d]| (a * 50 + b * 9 + c * 3 + d) as f32);
        let back = t
            .permute_axis0(perm.as_slice())
            .unwrap()
            .permute_axis0(perm.inverse().as_slice())
            .unwrap();
        assert_eq!(back, t);
        assert!(ChannelPermutation::new(vec![0, 0]).is_err());
        assert!(ChannelPermutation::new(vec![0, 2]).is_err());
    }

    #[test]
    fn compact_of_dense_pattern_is_center_crop() {
        let w = Tensor4::from_fn([1, 2, 5, 5], |[_, c, r, col]| (c * 25 + r * 5 + col) as f32);
        let spec = LayerSpec::new("l", 1, 2, 2, 1);
        let plan = extract_compact(&w, &assignment(vec![p(1, 1)], 2), &spec).unwrap();
        let expected = Tensor4::from_fn([1, 2, 3, 3], |[_, c, i, j]| w.get([0, c, i + 1, j + 1]));
        assert_eq!(plan.compact_kernels, expected);

        let plan = extract_compact(&w, &assignment(vec![p(2, 2)], 2), &spec).unwrap();
        let expected = Tensor4::from_fn([1, 2, 3, 3], |[_, c, i, j]| w.get([0, c, 2 * i, 2 * j]));
        assert_eq!(plan.compact_kernels, expected);

        let z = extract_compact(&Tensor4::zeros([1, 2, 5, 5]), &assignment(vec![p(2, 1)], 2), &spec).unwrap();
        assert!(z.compact_kernels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expand_inverts_gather() {
        let spec = LayerSpec::new("l", 1, 3, 2, 4);
        let w = Tensor4::from_fn([4, 2, 7, 7], |[o, c, r, col]| {
            (o * 100 + c * 49 + r * 7 + col) as f32 + 1.0
        });
        let a = assignment(vec![p(3, 1), p(1, 1), p(2, 3), p(1, 1)], 3);
        let plan = extract_compact(&w, &a, &spec).unwrap();
        assert_eq!(
            plan.groups,
            vec![
                PatternGroup {
                    pattern: p(1, 1),
                    start: 0,
                    count: 2
                },
                PatternGroup {
                    pattern: p(3, 1),
                    start: 2,
                    count: 1
                },
                PatternGroup {
                    pattern: p(2, 3),
                    start: 3,
                    count: 1
                },
            ]
        );
        let expanded = expand_compact(&plan.compact_kernels, &plan.channel_patterns(), 1, 3).unwrap();
        let embedded = embed_assignment(&w, &a, &spec).unwrap();
        assert_eq!(expanded, embedded.permute_axis0(plan.perm.as_slice()).unwrap());
        let nonzero = expanded.outer(2).iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 9 * 2);
    }

    #[test]
    fn groups_respect_conv_groups() {
        let spec = LayerSpec::new("l", 1, 2, 4, 4).with_groups(2);
        let w = Tensor4::zeros([4, 2, 5, 5]);
        let a = assignment(vec![p(1, 1), p(2, 2), p(1, 1), p(2, 2)], 2);
        let plan = extract_compact(&w, &a, &spec).unwrap();
        assert_eq!(plan.perm.as_slice(), &[0, 1, 2, 3]);
        assert_eq!(plan.groups.len(), 4);
        plan.check_against(&spec).unwrap();
        let a = assignment(vec![p(1, 1), p(1, 1), p(1, 1), p(1, 1)], 2);
        let plan = extract_compact(&w, &a, &spec).unwrap();
        assert_eq!(plan.groups.iter().map(|g| g.count).collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn single_layer_propagation_records_final_perm() {
        let decl = [LayerDecl::new(LayerSpec::new("only", 1, 2, 2, 3), true)];
        let m = generate(4, &decl, Distribution::default()).unwrap();
        let a = assignment(vec![p(2, 2), p(1, 1), p(2, 1)], 2);
        let plan = extract_compact(&m.layers[0].weights, &a, &m.layers[0].spec).unwrap();
        let out = propagate(&m, &[Some(plan.clone())]).unwrap();
        assert_eq!(out.final_output_perm.as_deref(), Some(&[1, 2, 0][..]));
        assert_eq!(
            out.layers[0].weights,
            m.layers[0].weights.permute_axis0(&[1, 2, 0]).unwrap()
        );
        let aff = m.layers[0].affine.as_ref().unwrap();
        assert_eq!(
            out.layers[0].affine.as_ref().unwrap().scale,
            vec![aff.scale[1], aff.scale[2], aff.scale[0]]
        );
    }

    #[test]
    fn identity_propagation_only_changes_provenance() {
        let decl = [
            LayerDecl::new(LayerSpec::new("a", 1, 2, 2, 2), true),
            LayerDecl::new(LayerSpec::new("b", 1, 2, 2, 2), false),
        ];
        let m = generate(8, &decl, Distribution::default()).unwrap();
        let plans: Vec<_> = m
            .layers
            .iter()
            .map(|l| Some(extract_compact(&l.weights, &assignment(vec![p(1, 1); 2], 2), &l.spec).unwrap()))
            .collect();
        let mut out = propagate(&m, &plans).unwrap();
        assert_ne!(out.provenance, m.provenance);
        out.provenance = m.provenance.clone();
        assert_eq!(out.to_bytes().unwrap(), m.to_bytes().unwrap());
    }

    #[test]
    fn incompatible_successor_groups_are_named() {
        let decl = [
            LayerDecl::new(LayerSpec::new("wide", 1, 2, 1, 4), false),
            LayerDecl::new(LayerSpec::new("grouped", 1, 2, 4, 4).with_groups(2), false),
        ];
        let m = generate(1, &decl, Distribution::default()).unwrap();
        // Sorting over the whole range moves channel 3 into the first half.
        let a = assignment(vec![p(2, 2), p(2, 2), p(1, 1), p(1, 1)], 2);
        let plan = extract_compact(&m.layers[0].weights, &a, &m.layers[0].spec).unwrap();
        let err = propagate(&m, &[Some(plan), None]).unwrap_err();
        match err {
            Error::Propagation { from, to, .. } => {
                assert_eq!(from, "wide");
                assert_eq!(to, "grouped");
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(sort_blocks(&m.layers[0].spec, Some(&m.layers[1].spec)), 2);
    }
}
