use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

fn eval_loss<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "loss must be a scalar, got dims {:?}",
            t.dims()
        )));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Reverse-mode gradients of `loss` for every parameter in `params`.
pub fn analytic_grads<F>(params: &ParamStore, loss: &F) -> Result<ParamStore>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut store = params.clone();
    store.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, &store)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    let grads = g.backward(out)?;
    g.accumulate_param_grads(&grads, &mut store)?;
    Ok(store)
}

/// Compares reverse-mode gradients against central differences.
///
/// For each parameter tensor the error is
/// `max|analytic − numeric| / max(1e-8, max|numeric|)` (max over its
/// entries); the result is the largest such error over all parameters.
pub fn finite_diff_check<F>(params: &ParamStore, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let analytic = analytic_grads(params, &loss)?;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut worst: f64 = 0.0;
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.numel());
        let grad = analytic.grad(name).expect("grad slot per param");
        let mut diff_max: f64 = 0.0;
        let mut num_max: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(name).expect("listed param").data()[i];
            probe.value_mut(name).expect("listed param").data_mut()[i] = orig + eps;
            let plus = eval_loss(&probe, &loss)?;
            probe.value_mut(name).expect("listed param").data_mut()[i] = orig - eps;
            let minus = eval_loss(&probe, &loss)?;
            probe.value_mut(name).expect("listed param").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            diff_max = diff_max.max((grad.data()[i] - numeric).abs());
            num_max = num_max.max(numeric.abs());
        }
        worst = worst.max(diff_max / num_max.max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Contracts an op output with fixed random weights so every output
    /// element influences the loss differently.
    fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = random(&mut rng, g.dims(v));
        let p = g.mul_const(v, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn sum_of_squares_matches() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        let err = finite_diff_check(&p, 1e-6, |g, s| {
            let x = g.param(s, "x")?;
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let err = finite_diff_check(&p, 1e-5, |g, _| Ok(g.constant(Tensor::scalar(3.0)))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_finite_loss() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[1], vec![-1.0]).unwrap());
        let res = finite_diff_check(&p, 1e-5, |g, s| {
            let x = g.param(s, "x")?;
            let l = g.log(x);
            Ok(g.sum(l))
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_gradient_wrt_left_operand() {
        // d/dA sum(A·B) with B = [[2],[3]] is [[2, 3]].
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let b = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let loss = |g: &mut Graph, s: &ParamStore| {
            let a = g.param(s, "a")?;
            let b = g.constant(b.clone());
            let c = g.matmul(a, b)?;
            Ok(g.sum(c))
        };
        let grads = analytic_grads(&p, &loss).unwrap();
        assert_eq!(grads.grad("a").unwrap().data(), &[2.0, 3.0]);
        assert!(finite_diff_check(&p, 1e-6, loss).unwrap() < 1e-6);
    }

    type OpCase = (
        &'static str,
        Vec<Vec<usize>>,
        fn(&mut Graph, &[Var]) -> Result<Var>,
    );

    fn op_cases() -> Vec<OpCase> {
        vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
                g.matmul(v[0], v[1])
            }),
            ("add", vec![vec![2, 3], vec![2, 3]], |g, v| {
                g.add(v[0], v[1])
            }),
            ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| {
                g.sub(v[0], v[1])
            }),
            ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
                g.mul(v[0], v[1])
            }),
            ("div", vec![vec![2, 3], vec![2, 3]], |g, v| {
                let d = g.offset(v[1], 3.0);
                g.div(v[0], d)
            }),
            ("scale", vec![vec![4]], |g, v| Ok(g.scale(v[0], -1.7))),
            ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
                g.add_row(v[0], v[1])
            }),
            ("mul_row", vec![vec![3, 4], vec![4]], |g, v| {
                g.mul_row(v[0], v[1])
            }),
            ("log", vec![vec![5]], |g, v| {
                let s = g.offset(v[0], 2.0);
                Ok(g.log(s))
            }),
            ("sigmoid", vec![vec![2, 3]], |g, v| Ok(g.sigmoid(v[0]))),
            ("relu", vec![vec![2, 3]], |g, v| Ok(g.relu(v[0]))),
            ("transpose", vec![vec![2, 3]], |g, v| g.transpose(v[0])),
            ("reshape", vec![vec![2, 3]], |g, v| g.reshape(v[0], &[3, 2])),
            ("gram", vec![vec![4, 3]], |g, v| g.gram(v[0])),
            ("normalize_rows", vec![vec![3, 5]], |g, v| {
                g.normalize_rows(v[0], 1e-5)
            }),
            ("masked_softmax", vec![vec![3, 4]], |g, v| {
                g.masked_softmax_rows(v[0], &[true, false, true, true])
            }),
            ("slice_concat", vec![vec![3, 4]], |g, v| {
                let a = g.slice_cols(v[0], 0, 1)?;
                let b = g.slice_cols(v[0], 1, 3)?;
                let c = g.scale(a, 2.0);
                g.concat_cols(&[b, c])
            }),
            (
                "conv2d",
                vec![vec![2, 4, 5], vec![3, 2, 3, 3], vec![3]],
                |g, v| g.conv2d(v[0], v[1], v[2]),
            ),
            ("upsample2", vec![vec![2, 3, 2]], |g, v| {
                g.upsample_bilinear(v[0], 2)
            }),
            ("upsample4", vec![vec![1, 2, 3]], |g, v| {
                g.upsample_bilinear(v[0], 4)
            }),
            ("avg_pool2", vec![vec![2, 4, 6]], |g, v| g.avg_pool2(v[0])),
        ]
    }

    #[test]
    fn every_op_passes_gradient_check_over_many_seeds() {
        for (name, shapes, op) in op_cases() {
            for seed in 0..50u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut p = ParamStore::new();
                for (i, dims) in shapes.iter().enumerate() {
                    p.insert(format!("in{i}"), random(&mut rng, dims));
                }
                let n = shapes.len();
                let err = finite_diff_check(&p, 1e-5, |g, s| {
                    let vars = (0..n)
                        .map(|i| g.param(s, &format!("in{i}")))
                        .collect::<Result<Vec<_>>>()?;
                    let out = op(g, &vars)?;
                    weighted_sum(g, out, seed)
                })
                .unwrap();
                assert!(err <= 1e-4, "{name} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn clamp_gradient_is_zero_outside_range() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[3], vec![-2.0, 0.5, 2.0]).unwrap());
        let grads = analytic_grads(&p, &|g: &mut Graph, s: &ParamStore| {
            let x = g.param(s, "x")?;
            let c = g.clamp(x, 0.0, 1.0);
            Ok(g.sum(c))
        })
        .unwrap();
        assert_eq!(grads.grad("x").unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
