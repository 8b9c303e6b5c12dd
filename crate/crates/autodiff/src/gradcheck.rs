//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamSet, Tensor};
use crate::Result;

/// Which parameter elements to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Selection {
    All,
    /// At most `per_param` distinct elements of every parameter, chosen by seed.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Elements whose ±eps evaluations took different ReLU/maxpool branches;
    /// the loss is not differentiable there, so they are not compared.
    pub skipped: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_loss<F>(params: &ParamSet<f64>, build: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let out = build(&mut tape)?;
    match tape.value(out) {
        [v] => Ok((*v, tape.branch_signature())),
        _ => Err(AutodiffError::NotScalar {
            op: "grad_check",
            shape: tape.shape(out).to_vec(),
        }),
    }
}

/// Compares backprop gradients of `build`'s scalar output against central
/// differences with step `eps`, returning the worst relative error.
pub fn grad_check<F>(
    params: &mut ParamSet<f64>,
    selection: Selection,
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(params);
        let out = build(&mut tape)?;
        let grads = tape.backward(out)?;
        params
            .iter()
            .map(|(id, p)| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.tensor.len()])
            })
            .collect()
    };

    let mut rng = match selection {
        Selection::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Selection::All => None,
    };
    let mut report = GradCheckReport::default();
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let n = params.get(id).tensor.len();
        let indices: Vec<usize> = match (selection, rng.as_mut()) {
            (Selection::Sample { per_param, .. }, Some(r)) if per_param < n => {
                let mut v = sample(r, n, per_param).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = params.get(id).tensor.data()[i];
            params.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let plus = scalar_loss(params, &build);
            params.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let minus = scalar_loss(params, &build);
            params.get_mut(id).tensor.data_mut()[i] = orig;
            let ((plus, sig_plus), (minus, sig_minus)) = (plus?, minus?);
            if sig_plus != sig_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[pi][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if away_from_zero {
                v.signum() * (0.1 + 0.9 * v.abs())
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Runs the finite-difference check on every primitive with inputs drawn
/// from `seed`. Inputs are registered as parameters so `∂L/∂x` is checked
/// alongside weight gradients. Each output is contracted with a fixed random
/// tensor before reduction so no gradient is trivially uniform.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = 1e-5;

    macro_rules! check {
        ($name:expr, $ps:expr, $body:expr) => {{
            let report = grad_check(&mut $ps, Selection::All, eps, $body)?;
            out.push(($name, report));
        }};
    }

    // dense, unbatched and batched
    for (name, xs) in [("dense", vec![5]), ("dense_batched", vec![3, 5])] {
        let mut ps = ParamSet::new();
        let x = ps.insert("x", random_tensor(&mut rng, &xs, false))?;
        let w = ps.insert("w", random_tensor(&mut rng, &[4, 5], false))?;
        let b = ps.insert("b", random_tensor(&mut rng, &[4], false))?;
        let mut ys = xs.clone();
        *ys.last_mut().unwrap() = 4;
        let r = random_tensor(&mut rng, &ys, false);
        check!(name, ps, |t| {
            let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
            let y = t.dense(xv, wv, bv)?;
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.mean(p))
        });
    }

    for (name, xs) in [("conv1d", vec![2, 8]), ("conv1d_batched", vec![2, 2, 8])] {
        let mut ps = ParamSet::new();
        let x = ps.insert("x", random_tensor(&mut rng, &xs, false))?;
        let k = ps.insert("k", random_tensor(&mut rng, &[3, 2, 3], false))?;
        let b = ps.insert("b", random_tensor(&mut rng, &[3], false))?;
        let mut ys = xs.clone();
        ys[xs.len() - 2] = 3;
        let r = random_tensor(&mut rng, &ys, false);
        check!(name, ps, |t| {
            let (xv, kv, bv) = (t.param(x), t.param(k), t.param(b));
            let y = t.conv1d(xv, kv, bv)?;
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.mean(p))
        });
    }

    {
        let mut ps = ParamSet::new();
        let x = ps.insert("x", random_tensor(&mut rng, &[2, 3, 7], false))?;
        let r = random_tensor(&mut rng, &[2, 3, 3], false);
        check!("maxpool1d", ps, |t| {
            let xv = t.param(x);
            let y = t.maxpool1d(xv)?;
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.mean(p))
        });
    }

    {
        let mut ps = ParamSet::new();
        let x = ps.insert("x", random_tensor(&mut rng, &[4, 6], true))?;
        let r = random_tensor(&mut rng, &[4, 6], false);
        check!("relu", ps, |t| {
            let xv = t.param(x);
            let y = t.relu(xv);
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.mean(p))
        });
    }

    {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", random_tensor(&mut rng, &[2, 3], false))?;
        let b = ps.insert("b", random_tensor(&mut rng, &[2, 2], false))?;
        let r = random_tensor(&mut rng, &[2, 5], false);
        check!("concat", ps, |t| {
            let (av, bv) = (t.param(a), t.param(b));
            let y = t.concat(&[av, bv])?;
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.mean(p))
        });
    }

    {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", random_tensor(&mut rng, &[3, 4], false))?;
        let b = ps.insert("b", random_tensor(&mut rng, &[3, 4], false))?;
        let r = random_tensor(&mut rng, &[3, 4], false);
        check!("subtract", ps, |t| {
            let (av, bv) = (t.param(a), t.param(b));
            let y = t.sub(av, bv)?;
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.mean(p))
        });
    }

    {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", random_tensor(&mut rng, &[2, 3, 4], false))?;
        let r = random_tensor(&mut rng, &[2, 12], false);
        check!("flatten", ps, |t| {
            let av = t.param(a);
            let y = t.flatten(av)?;
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.mean(p))
        });
    }

    {
        let mut ps = ParamSet::new();
        let z = ps.insert("logits", random_tensor(&mut rng, &[5, 2], false).map(|v| 3.0 * v))?;
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..2)).collect();
        check!("softmax_cross_entropy", ps, |t| {
            let zv = t.param(z);
            t.softmax_cross_entropy(zv, &labels)
        });
    }

    {
        let mut ps = ParamSet::new();
        let a = ps.insert("prediction", random_tensor(&mut rng, &[3, 100], false))?;
        let b = ps.insert("target", random_tensor(&mut rng, &[3, 100], false))?;
        check!("mse", ps, |t| {
            let (av, bv) = (t.param(a), t.param(b));
            t.mse(av, bv)
        });
    }

    Ok(out)
}
