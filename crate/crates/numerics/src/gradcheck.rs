//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block, AttentionMask};
use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative error, so entries whose true gradient is
/// ~0 are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Tolerance the check suite is held to.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.len() != 1 {
        return Err(NumericsError::NotScalar(t.shape.clone()));
    }
    Ok(t.item())
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    scalar_output(&g, out)
}

/// Reverse-mode gradient of scalar `f` at `x`.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    scalar_output(&g, out)?;
    g.backward(out)?;
    Ok(g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
}

/// Max relative error between reverse-mode and central-difference gradients
/// of `f` at `x`, over every entry of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_entries(f, x, eps, &all)
}

/// Like [`grad_check`] but only perturbs the listed entries.
pub fn grad_check_entries<F>(f: F, x: &Tensor, eps: f64, entries: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_with_floor(&f, x, eps, entries, |_| REL_ERROR_FLOOR)
}

/// Like [`grad_check_entries`] with the denominator floor scaled by
/// `max(1, |f(x)|)`. Central differences of a large objective carry
/// roundoff of about `|f| * 1e-16 / eps`, which a fixed floor would report
/// as relative error on near-zero gradient entries.
pub fn grad_check_entries_scaled<F>(f: F, x: &Tensor, eps: f64, entries: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_with_floor(&f, x, eps, entries, |fx| REL_ERROR_FLOOR * fx.abs().max(1.0))
}

fn check_with_floor<F>(f: &F, x: &Tensor, eps: f64, entries: &[usize], floor: impl Fn(f64) -> f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(NumericsError::Invalid {
            op: "grad_check",
            detail: format!("eps {eps} outside [1e-6, 1e-3]"),
        });
    }
    let analytic = analytic_grad(f, x)?;
    let floor = floor(eval(f, x)?);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in entries {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(f, &probe)?;
        probe.data[i] = orig - eps;
        let down = eval(f, &probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

type ScalarFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// Contracts an op output with fixed random weights so every output entry
/// contributes a distinct gradient.
fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(data, shape).expect("shape and data agree")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 0.2, 1.5, rng);
    for x in &mut t.data {
        if rng.random_bool(0.5) {
            *x = -*x;
        }
    }
    t
}

/// Builds one (name, input, function) case per registered op.
fn suite_cases(seed: u64) -> Vec<(&'static str, Tensor, ScalarFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Tensor, ScalarFn)> = Vec::new();

    macro_rules! case {
        ($name:expr, $input:expr, $out_shape:expr, |$g:ident, $x:ident| $body:expr) => {{
            let input = $input;
            let weights = Tensor::randn(&$out_shape, 1.0, &mut rng);
            let f: ScalarFn = Box::new(move |$g: &mut Graph, $x: Var| {
                let out = $body?;
                contract($g, out, &weights)
            });
            cases.push(($name, input, f));
        }};
    }

    let w34 = Tensor::randn(&[4, 3], 1.0, &mut rng);
    case!("matmul", Tensor::randn(&[2, 3, 4], 1.0, &mut rng), [2, 3, 3], |g, x| {
        let w = g.constant(w34.clone());
        g.matmul(x, w)
    });
    let a34 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    case!("matmul_rhs", Tensor::randn(&[4, 3], 1.0, &mut rng), [2, 3, 3], |g, x| {
        let a = g.constant(a34.clone());
        g.matmul(a, x)
    });
    let b_batched = Tensor::randn(&[2, 4, 5], 1.0, &mut rng);
    case!("matmul_batched", Tensor::randn(&[2, 3, 4], 1.0, &mut rng), [2, 3, 5], |g, x| {
        let b = g.constant(b_batched.clone());
        g.matmul(x, b)
    });
    let q = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    case!("matmul_bt", Tensor::randn(&[2, 5, 4], 1.0, &mut rng), [2, 3, 5], |g, x| {
        let a = g.constant(q.clone());
        g.matmul_bt(a, x)
    });
    let bias = Tensor::randn(&[4], 1.0, &mut rng);
    case!("add", Tensor::randn(&[3, 4], 1.0, &mut rng), [3, 4], |g, x| {
        let b = g.constant(bias.clone());
        g.add(x, b)
    });
    let big = Tensor::randn(&[3, 4], 1.0, &mut rng);
    case!("add_broadcast_rhs", Tensor::randn(&[4], 1.0, &mut rng), [3, 4], |g, x| {
        let a = g.constant(big.clone());
        g.add(a, x)
    });
    let big2 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    case!("sub", Tensor::randn(&[4], 1.0, &mut rng), [3, 4], |g, x| {
        let a = g.constant(big2.clone());
        g.sub(a, x)
    });
    let gain = Tensor::randn(&[4], 1.0, &mut rng);
    case!("mul", Tensor::randn(&[3, 4], 1.0, &mut rng), [3, 4], |g, x| {
        let b = g.constant(gain.clone());
        g.mul(x, b)
    });
    case!("mul_self", Tensor::randn(&[3, 4], 1.0, &mut rng), [3, 4], |g, x| g.mul(x, x));
    case!("scale", Tensor::randn(&[5], 1.0, &mut rng), [5], |g, x| g.scale(x, -1.7));
    case!("add_scalar", Tensor::randn(&[5], 1.0, &mut rng), [5], |g, x| g.add_scalar(x, 0.3));
    case!("exp", Tensor::randn(&[5], 1.0, &mut rng), [5], |g, x| g.exp(x));
    case!("log", uniform(&[5], 0.3, 3.0, &mut rng), [5], |g, x| g.log(x));
    case!("abs", away_from_zero(&[6], &mut rng), [6], |g, x| g.abs(x));
    case!("sigmoid", Tensor::randn(&[6], 2.0, &mut rng), [6], |g, x| g.sigmoid(x));
    case!("tanh", Tensor::randn(&[6], 1.0, &mut rng), [6], |g, x| g.tanh(x));
    case!("gelu", Tensor::randn(&[6], 1.5, &mut rng), [6], |g, x| g.gelu(x));
    case!("relu", away_from_zero(&[6], &mut rng), [6], |g, x| g.relu(x));
    case!("clamp", uniform(&[6], -2.0, 2.0, &mut rng), [6], |g, x| g.clamp(x, -1.0, 1.0));
    case!("softmax", Tensor::randn(&[3, 5], 1.0, &mut rng), [3, 5], |g, x| g.softmax(x));
    case!("log_softmax", Tensor::randn(&[3, 5], 1.0, &mut rng), [3, 5], |g, x| g.log_softmax(x));
    case!("layer_norm", Tensor::randn(&[3, 6], 1.0, &mut rng), [3, 6], |g, x| g.layer_norm(x, 1e-5));
    let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    case!("embedding", Tensor::randn(&[4, 3], 1.0, &mut rng), [2, 3, 3], |g, x| g.embedding(x, &ids, &[2, 3]));
    let other = Tensor::randn(&[2, 1, 3], 1.0, &mut rng);
    case!("concat", Tensor::randn(&[2, 2, 3], 1.0, &mut rng), [2, 3, 3], |g, x| {
        let o = g.constant(other.clone());
        g.concat(&[o, x], 1)
    });
    case!("slice", Tensor::randn(&[2, 4, 3], 1.0, &mut rng), [2, 2, 3], |g, x| g.slice(x, 1, 1, 2));
    case!("reshape", Tensor::randn(&[2, 6], 1.0, &mut rng), [3, 4], |g, x| g.reshape(x, &[3, 4]));
    case!("permute", Tensor::randn(&[2, 3, 4, 2], 1.0, &mut rng), [2, 4, 3, 2], |g, x| g.permute(x, &[0, 2, 1, 3]));
    case!("sum", Tensor::randn(&[2, 3], 1.0, &mut rng), [], |g, x| g.sum(x));
    case!("mean", Tensor::randn(&[2, 3], 1.0, &mut rng), [], |g, x| g.mean(x));
    case!("sum_last", Tensor::randn(&[2, 3, 4], 1.0, &mut rng), [2, 3], |g, x| g.sum_last(x));
    let picks: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    case!("gather_last", Tensor::randn(&[4, 5], 1.0, &mut rng), [4], |g, x| g.gather_last(x, &picks));

    for (name, mask) in [
        ("attention_causal", AttentionMask::causal()),
        ("attention_bidirectional", AttentionMask::bidirectional().with_padding(vec![true, true, true, false, true, true, true, true])),
    ] {
        let k = Tensor::randn(&[2, 2, 4, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[2, 2, 4, 3], 1.0, &mut rng);
        case!(name, Tensor::randn(&[2, 2, 4, 3], 1.0, &mut rng), [2, 2, 4, 3], |g, x| {
            let kv = g.constant(k.clone());
            let vv = g.constant(v.clone());
            attention_block(g, x, kv, vv, &mask)
        });
    }
    let qa = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
    let va = Tensor::randn(&[1, 2, 4, 3], 1.0, &mut rng);
    case!("attention_keys_with_memory", Tensor::randn(&[1, 2, 4, 3], 1.0, &mut rng), [1, 2, 3, 3], |g, x| {
        let qv = g.constant(qa.clone());
        let vv = g.constant(va.clone());
        attention_block(g, qv, x, vv, &AttentionMask::causal())
    });

    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
    let input = Tensor::randn(&[4, 6], 1.5, &mut rng);
    let f: ScalarFn = Box::new(move |g: &mut Graph, x: Var| {
        let lp = g.log_softmax(x)?;
        let picked = g.gather_last(lp, &targets)?;
        let nll = g.neg(picked)?;
        g.mean(nll)
    });
    cases.push(("softmax_cross_entropy", input, f));
    cases
}

/// Runs the finite-difference check over every registered op for one seed.
pub fn op_suite(seed: u64, eps: f64) -> Result<Vec<OpCheck>> {
    suite_cases(seed)
        .into_iter()
        .map(|(name, x, f)| {
            Ok(OpCheck {
                name,
                max_rel_error: grad_check(f, &x, eps)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |g: &mut Graph, x: Var| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        };
        assert_eq!(analytic_grad(&f, &x).unwrap(), vec![2.0, 4.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-7);
    }

    #[test]
    fn rejects_vector_output() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(|g: &mut Graph, x: Var| g.exp(x), &x, 1e-5).unwrap_err();
        assert!(matches!(err, NumericsError::NotScalar(_)));
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g: &mut Graph, x: Var| g.sum(x), &x, 0.1).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // central difference straddles the kink of abs
        let x = Tensor::vector(vec![1e-7]);
        let err = grad_check(|g: &mut Graph, x: Var| { let a = g.abs(x)?; g.sum(a) }, &x, 1e-5).unwrap();
        assert!(err > 0.5);
    }
}
