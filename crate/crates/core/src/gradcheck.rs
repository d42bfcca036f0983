//! Central finite-difference verification of analytic gradients.
//!
//! The error for a coordinate is `|analytic - numeric| / max(1, |analytic|)`.
//! Coordinates whose ±h perturbation flips a ReLU sign or a max-pool winner
//! are skipped: the function is not differentiable across such a kink and the
//! central difference there is meaningless.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::models::{build_model, residual_unit, ArchConfig, Architecture, ForwardOptions, Model, ResidualUnitVars};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: Option<WorstCoordinate>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

/// Checks the gradient of a scalar function of one tensor.
pub fn finite_difference_check<'m, F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'m, f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..GradCheckOptions::default()
    };
    finite_difference_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), opts)
}

/// Checks the gradient of a scalar function of several tensors at once.
/// `f` may bind further tensors that outlive the check (e.g. model
/// parameters held fixed) into the graph it receives.
pub fn finite_difference_check_many<'m, F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'m, f64>, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return invalid(format!("finite-difference step must be positive, got {}", opts.step));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out).map(|v| (v, g.branch_signature()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let base_signature = g.branch_signature();
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for (input, var) in vars.iter().enumerate() {
        let n = inputs[input].numel();
        let zeros;
        let analytic = match grads.get(*var) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let original = inputs[input].data()[i];
            work[input].data_mut()[i] = original + opts.step;
            let (plus, sig_plus) = eval(&work)?;
            work[input].data_mut()[i] = original - opts.step;
            let (minus, sig_minus) = eval(&work)?;
            work[input].data_mut()[i] = original;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some(WorstCoordinate {
                    input,
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return invalid(format!(
            "gradient check needs a scalar function, got {} elements",
            t.numel()
        ));
    }
    Ok(t.data()[0])
}

/// One named entry of [`standard_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

/// Contracts a tensor-valued node to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
fn project<'m>(g: &mut Graph<'m, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = g.constant(Tensor::randn(shape, 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn binary_targets(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
}

/// A copy of `model` with every tensor redrawn from a scaled normal, so no
/// branch starts at exactly zero.
fn randomised(model: &Model<f64>, rng: &mut ChaCha8Rng) -> Model<f64> {
    let mut m = model.clone();
    for p in m.parameters_mut() {
        let shape = p.tensor.shape().to_vec();
        let fan_in = (p.tensor.numel() / shape[0].max(1)).max(1);
        let std = if shape.len() == 1 {
            0.1
        } else {
            (1.0 / fan_in as f64).sqrt()
        };
        p.tensor = Tensor::randn(shape, std, rng);
    }
    m
}

/// Gradient checks for every differentiable building block: convolutions,
/// activations, concatenation, pooling, residual units, all losses and the
/// full forward pass of each architecture on a 16×16 input.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut push = |name: &str, report: GradCheckReport| {
        cases.push(SuiteCase {
            name: name.to_string(),
            report,
        })
    };
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::randn(shape.to_vec(), 1.0, rng);

    let spec = ConvSpec::new(3, 4);
    let inputs = [
        randn(&[2, 3, 6, 6], &mut rng),
        randn(&spec.weight_shape(), &mut rng),
        randn(&[4], &mut rng),
    ];
    let r = finite_difference_check_many(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], spec)?;
            project(g, y, 1)
        },
        &inputs,
        opts,
    )?;
    push("conv2d", r);

    let spec = ConvSpec::new(2, 4).with_stride(2);
    let inputs = [
        randn(&[1, 2, 8, 8], &mut rng),
        randn(&spec.weight_shape(), &mut rng),
        randn(&[4], &mut rng),
    ];
    let r = finite_difference_check_many(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], spec)?;
            project(g, y, 2)
        },
        &inputs,
        opts,
    )?;
    push("conv2d_stride2", r);

    let spec = ConvSpec::new(3, 2).with_stride(2);
    let inputs = [
        randn(&[1, 3, 4, 4], &mut rng),
        randn(&spec.transposed_weight_shape(), &mut rng),
        randn(&[2], &mut rng),
    ];
    let r = finite_difference_check_many(
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], spec)?;
            project(g, y, 3)
        },
        &inputs,
        opts,
    )?;
    push("conv_transpose2d", r);

    let x = randn(&[2, 2, 4, 4], &mut rng);
    let r = finite_difference_check(
        |g, x| {
            let y = g.relu(x);
            project(g, y, 4)
        },
        &x,
        opts.step,
    )?;
    push("relu", r);
    let r = finite_difference_check(
        |g, x| {
            let y = g.sigmoid(x);
            project(g, y, 5)
        },
        &x,
        opts.step,
    )?;
    push("sigmoid", r);
    let r = finite_difference_check(
        |g, x| {
            let y = g.max_pool2d(x)?;
            project(g, y, 6)
        },
        &x,
        opts.step,
    )?;
    push("max_pool2d", r);

    let x = randn(&[2, 3, 4, 4], &mut rng);
    let r = finite_difference_check(
        |g, x| {
            let y = g.softmax_channels(x)?;
            project(g, y, 7)
        },
        &x,
        opts.step,
    )?;
    push("softmax_channels", r);

    let inputs = [randn(&[1, 2, 4, 4], &mut rng), randn(&[1, 3, 4, 4], &mut rng)];
    let r = finite_difference_check_many(
        |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            project(g, y, 8)
        },
        &inputs,
        opts,
    )?;
    push("concat_channels", r);

    for (name, cin, cout) in [("residual_unit_identity", 4, 4), ("residual_unit_projection", 3, 5)] {
        let c1 = ConvSpec::new(cin, cout);
        let c2 = ConvSpec::new(cout, cout);
        let mut inputs = vec![
            Tensor::rand_uniform(vec![1, cin, 6, 6], 0.0, 1.0, &mut rng),
            Tensor::randn(c1.weight_shape().to_vec(), 0.3, &mut rng),
            randn(&[cout], &mut rng),
            Tensor::randn(c2.weight_shape().to_vec(), 0.3, &mut rng),
            randn(&[cout], &mut rng),
        ];
        if cin != cout {
            let cp = ConvSpec::new(cin, cout).with_kernel(1, 1);
            inputs.push(Tensor::randn(cp.weight_shape().to_vec(), 0.5, &mut rng));
            inputs.push(randn(&[cout], &mut rng));
        }
        let r = finite_difference_check_many(
            |g, v| {
                let unit = ResidualUnitVars {
                    conv1: (v[1], v[2]),
                    conv2: (v[3], v[4]),
                    projection: (v.len() > 5).then(|| (v[5], v[6])),
                    in_channels: cin,
                    out_channels: cout,
                };
                let y = residual_unit(g, v[0], &unit)?;
                project(g, y, 9)
            },
            &inputs,
            opts,
        )?;
        push(name, r);
    }

    let logits = Tensor::randn(vec![2, 1, 4, 4], 3.0, &mut rng);
    let targets = binary_targets(&[2, 1, 4, 4], &mut rng);
    let r = finite_difference_check(|g, z| g.binary_cross_entropy(z, targets.clone()), &logits, opts.step)?;
    push("binary_cross_entropy", r);
    let r = finite_difference_check(
        |g, z| g.binary_cross_entropy(z, targets.clone()),
        &logits.map(|v| v * 4.0),
        opts.step,
    )?;
    push("binary_cross_entropy_large_logits", r);

    let logits2 = Tensor::randn(vec![2, 2, 4, 4], 2.0, &mut rng);
    let onehot = crate::losses::one_hot_binary(&targets)?;
    let r = finite_difference_check(|g, z| g.softmax_cross_entropy(z, onehot.clone()), &logits2, opts.step)?;
    push("softmax_cross_entropy", r);

    let probs = Tensor::rand_uniform(vec![2, 1, 4, 4], 0.05, 0.95, &mut rng);
    for (name, per_image) in [("dice_batch", false), ("dice_per_image", true)] {
        let r = finite_difference_check(|g, p| g.dice(p, targets.clone(), 1.0, per_image), &probs, opts.step)?;
        push(name, r);
    }
    let r = finite_difference_check(
        |g, z| {
            let p = g.sigmoid(z);
            g.dice(p, targets.clone(), 1.0, false)
        },
        &logits,
        opts.step,
    )?;
    push("dice_after_sigmoid", r);

    for arch in Architecture::ALL {
        let base = build_model::<f64>(&ArchConfig::new(arch), seed)?;
        let model = randomised(&base, &mut rng);
        let picks: Vec<usize> = ["enc0.down.weight", "enc3.down.bias", "dec0.up.weight", "head.weight"]
            .iter()
            .chain(if arch == Architecture::SemSeg {
                &[][..]
            } else {
                &["enc1.res0.conv1.weight", "dec3.res0.proj.weight"][..]
            })
            .map(|n| {
                model
                    .parameters()
                    .iter()
                    .position(|p| p.name == *n)
                    .ok_or_else(|| crate::error::Error::InvalidArgument(format!("{arch} has no parameter {n}")))
            })
            .collect::<Result<_>>()?;
        let mut inputs = vec![Tensor::rand_uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng)];
        inputs.extend(picks.iter().map(|&k| model.parameters()[k].tensor.clone()));
        let r = finite_difference_check_many(
            |g, v| {
                let mut params = model.bind_frozen(g);
                for (slot, &k) in picks.iter().enumerate() {
                    params[k] = v[slot + 1];
                }
                let y = model.forward_graph(g, &params, v[0], ForwardOptions::default())?;
                project(g, y, 10)
            },
            &inputs,
            GradCheckOptions {
                max_coords_per_input: Some(16),
                ..opts
            },
        )?;
        push(&format!("forward_{}", arch.tag()), r);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone().with_requires_grad(true));
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 4.0]);

        let report = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // x * stop_gradient(x): the value is sum(x^2) but backward sees only x.
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let report = finite_difference_check_many(
            |g, v| {
                let copy = g.value(v[0]).clone();
                let frozen = g.constant(copy);
                let prod = g.mul(v[0], frozen)?;
                Ok(g.sum(prod))
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error > 0.1, "{report:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::new(vec![2], vec![1e-7, 0.5]).unwrap();
        let report = finite_difference_check(
            |g, x| {
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_relative_error < 1e-8);
    }

    #[test]
    fn non_scalar_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(finite_difference_check(|g, x| Ok(g.relu(x)), &x, DEFAULT_STEP).is_err());
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn standard_suite_passes() {
        let cases = standard_suite(7).unwrap();
        assert!(cases.len() >= 18);
        for c in &cases {
            assert!(c.report.passes(1e-6), "{}: {:?}", c.name, c.report);
        }
    }
}
