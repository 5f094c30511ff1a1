//! End-to-end checks of an inception model against the supernet it was
//! derived from.

use crate::container::ModelContainer;
use crate::error::{geom_err, Result};
use crate::exec::{forward, unpermute_output};
use crate::oracle::{explicit_argmin, forward_naive, Tensor64};
use crate::prng::Prng;
use crate::rearrange::embed_model;
use crate::search::{edo_model, select_pattern, ModelSearch};
use crate::tensor::Tensor4;

/// Relative tolerance for 32-bit paths against their reference.
pub const REL_TOL: f64 = 1e-5;
/// Absolute floor used when the reference value is near zero.
pub const ABS_TOL: f64 = 1e-7;
/// Relative tolerance between stored and explicitly evaluated errors.
pub const ERROR_REL_TOL: f64 = 1e-9;

/// `|got - want| <= max(REL_TOL·|want|, ABS_TOL)`.
pub fn within_tolerance(got: f64, want: f64) -> bool {
    (got - want).abs() <= (REL_TOL * want.abs()).max(ABS_TOL)
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    /// Run both models through the `f64` naive path and require equality.
    pub exact: bool,
    /// Spatial side of the random inputs.
    pub input_side: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 8,
            seed: 0,
            exact: false,
            input_side: 12,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOutcome {
    /// One line per passed check, in execution order.
    pub passed: Vec<String>,
    /// First failing check, if any.
    pub failure: Option<String>,
}

impl VerifyOutcome {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

fn search_d_max(model: &ModelContainer) -> Result<Option<usize>> {
    let mut d_max = None;
    for l in model.layers.iter().filter(|l| l.spec.is_searchable()) {
        match d_max {
            None => d_max = Some(l.spec.d_max),
            Some(d) if d != l.spec.d_max => {
                return Err(geom_err(format!(
                    "layer `{}` declares d_max={}, earlier layers use {}",
                    l.spec.name, l.spec.d_max, d
                )))
            }
            _ => {}
        }
    }
    Ok(d_max)
}

/// Runs the pattern, argmin-oracle and equivalence suites, stopping at the
/// first failure.
pub fn verify(supernet: &ModelContainer, ic: &ModelContainer, opts: &VerifyOptions) -> Result<VerifyOutcome> {
    let mut outcome = VerifyOutcome::default();
    if supernet.layers.len() != ic.layers.len() {
        outcome.failure = Some(format!(
            "layer count differs: supernet {} vs inception {}",
            supernet.layers.len(),
            ic.layers.len()
        ));
        return Ok(outcome);
    }
    let search = match search_d_max(supernet)? {
        Some(d) => edo_model(supernet, d)?,
        None => ModelSearch {
            assignments: Vec::new(),
            skipped: supernet.layers.iter().map(|l| l.spec.name.clone()).collect(),
        },
    };

    // Plans must hold exactly the searched patterns, rearranged.
    for (sl, il) in supernet.layers.iter().zip(&ic.layers) {
        let name = &sl.spec.name;
        if sl.spec != il.spec {
            outcome.failure = Some(format!("layer {name}: geometry differs between models"));
            return Ok(outcome);
        }
        let Some(a) = search.get(name) else { continue };
        let plan = il.grouped_plan()?;
        let got = plan.channel_patterns();
        for (new, &old) in plan.perm.as_slice().iter().enumerate() {
            if got[new] != a.patterns[old] {
                outcome.failure = Some(format!(
                    "layer {name} channel {old}: plan has pattern {} but search selects {}",
                    got[new], a.patterns[old]
                ));
                return Ok(outcome);
            }
        }
        outcome
            .passed
            .push(format!("layer {name}: {} channels match search", got.len()));
    }

    // Closed-form selection against the literal objective.
    let mut rng = Prng::new(opts.seed);
    for layer in supernet.layers.iter().filter(|l| l.spec.is_searchable()) {
        let spec = &layer.spec;
        let channels: Vec<usize> = if spec.c_out <= opts.trials {
            (0..spec.c_out).collect()
        } else {
            (0..opts.trials).map(|_| rng.below(spec.c_out)).collect()
        };
        for &o in &channels {
            let filter = layer.weights.outer_tensor(o);
            let (fast, fast_err) = select_pattern(&filter, spec.k, spec.d_max)?;
            let (slow, slow_err, _) = explicit_argmin(&filter, spec.k, spec.d_max, spec.supernet_side())?;
            let err_ok = (fast_err - slow_err).abs() <= ERROR_REL_TOL * slow_err.abs().max(f64::MIN_POSITIVE);
            if fast != slow || !err_ok {
                outcome.failure = Some(format!(
                    "layer {} channel {o}: closed form picks {fast} (error {fast_err}), explicit objective picks {slow} (error {slow_err})",
                    spec.name
                ));
                return Ok(outcome);
            }
        }
        outcome.passed.push(format!(
            "layer {}: argmin oracle agrees on {} channels",
            spec.name,
            channels.len()
        ));
    }

    // Function preservation against the zero-embedded supernet.
    let reference_model = embed_model(supernet, &search)?;
    let first = &supernet.layers[0].spec;
    let dims = [1, first.c_in, opts.input_side, opts.input_side];
    let final_perm = ic.final_output_perm.as_deref();
    let mut worst = 0.0f64;
    for t in 0..opts.trials {
        let input = Tensor4::new(dims, rng.fill(dims.iter().product(), Default::default()))?;
        let mismatch = if opts.exact {
            let x = Tensor64::from(&input);
            let want = forward_naive(&reference_model, &x)?;
            let got = unpermute64(&forward_naive(ic, &x)?, final_perm);
            first_mismatch(&got.data, &want.data, want.dims, |g, w| g == w)
        } else {
            let want = forward(&reference_model, &input)?;
            let got = unpermute_output(&forward(ic, &input)?, final_perm)?;
            worst = worst.max(got.max_rel_diff(&want, ABS_TOL / REL_TOL)?);
            let g: Vec<f64> = got.data().iter().map(|&v| v as f64).collect();
            let w: Vec<f64> = want.data().iter().map(|&v| v as f64).collect();
            first_mismatch(&g, &w, want.dims(), within_tolerance)
        };
        if let Some((channel, got, want)) = mismatch {
            outcome.failure = Some(format!(
                "equivalence trial {t}: output channel {channel} got {got} expected {want}"
            ));
            return Ok(outcome);
        }
    }
    outcome.passed.push(if opts.exact {
        format!("equivalence: {} trials bit-exact in f64", opts.trials)
    } else {
        format!(
            "equivalence: {} trials within tolerance (max scaled diff {worst:.3e})",
            opts.trials
        )
    });
    Ok(outcome)
}

fn first_mismatch(
    got: &[f64],
    want: &[f64],
    dims: [usize; 4],
    ok: impl Fn(f64, f64) -> bool,
) -> Option<(usize, f64, f64)> {
    let plane = dims[2] * dims[3];
    got.iter()
        .zip(want)
        .position(|(&g, &w)| !ok(g, w))
        .map(|i| ((i / plane) % dims[1], got[i], want[i]))
}

fn unpermute64(t: &Tensor64, final_perm: Option<&[usize]>) -> Tensor64 {
    let Some(perm) = final_perm else { return t.clone() };
    let [n, c, h, w] = t.dims;
    let mut out = Tensor64::zeros(t.dims);
    let plane = h * w;
    for b in 0..n {
        for (new, &old) in perm.iter().enumerate() {
            let src = (b * c + new) * plane;
            let dst = (b * c + old) * plane;
            out.data[dst..dst + plane].copy_from_slice(&t.data[src..src + plane]);
        }
    }
    out
}
