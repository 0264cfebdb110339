use alloc::vec;
use alloc::vec::Vec;

use super::gradcheck::check_gradients;
use super::*;

fn random_matrix(rng: &mut Rng, m: usize, n: usize) -> Tensor {
    Tensor::new(&[m, n], (0..m * n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn matmul_examples() {
    let i2 = Tensor::identity(2);
    assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    assert!(matmul(&a, &Tensor::identity(3)).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(3);
    for _ in 0..10 {
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
    let y = softmax_rows(&x).unwrap();
    assert_eq!(y.row(0), &[0.5, 0.5]);
    assert!((y.at(1, 0) - 1.0).abs() < 1e-12 && y.at(1, 1) < 1e-300);
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let x = random_matrix(&mut rng, 1, 6);
        let y = softmax_rows(&x).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (yi, xi) in y.data().iter().zip(x.data()) {
            assert!((yi - xi.exp() / z).abs() < 1e-12);
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn backward_examples() {
    let mut params = Params::new();
    let p = params.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let v = tape.param(&params, p);
    let s = tape.sum(v);
    tape.backward(s, &mut params).unwrap();
    assert_eq!(params.grad(p).data(), &[1.0, 1.0]);

    let mut tape = Tape::new();
    let v = tape.param(&params, p);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s, &mut params).unwrap();
    // Overwritten, not accumulated onto the previous call.
    assert_eq!(params.grad(p).data(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let v = tape.param(&params, p);
    assert!(tape.backward(v, &mut params).is_err());
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut params = Params::new();
    let a = params.add("a", Tensor::vector(vec![1.0])).unwrap();
    let b = params.add("b", Tensor::vector(vec![1.0])).unwrap();
    params.get_mut(b).grad.data_mut()[0] = 9.0;
    let mut tape = Tape::new();
    let v = tape.param(&params, a);
    let s = tape.sum(v);
    tape.backward(s, &mut params).unwrap();
    assert_eq!(params.grad(b).data(), &[0.0]);
}

/// Builds a store holding two random matrices plus a bias/gain pair.
fn store(rng: &mut Rng, m: usize, n: usize) -> (Params, [ParamId; 4]) {
    let mut p = Params::new();
    let a = p.add("a", random_matrix(rng, m, n)).unwrap();
    let b = p.add("b", random_matrix(rng, m, n)).unwrap();
    let g = p.add("g", Tensor::vector((0..n).map(|_| 1.0 + 0.3 * rng.normal()).collect())).unwrap();
    let c = p.add("c", Tensor::vector((0..n).map(|_| rng.normal()).collect())).unwrap();
    (p, [a, b, g, c])
}

/// Projects a matrix output to a scalar with fixed random weights so that
/// every output entry gets a distinct upstream gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let t = tape.value(x).clone();
    let mut r = Rng::new(seed);
    let w = Tensor::new(t.shape(), (0..t.numel()).map(|_| r.normal()).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

type OpFn = fn(&mut Tape, [Var; 4]) -> Result<Var>;

fn op_table() -> Vec<(&'static str, OpFn)> {
    vec![
        ("matmul", |t, [a, b, ..]| {
            let bt = t.transpose(b)?;
            t.matmul(a, bt)
        }),
        ("matmul_nt", |t, [a, b, ..]| t.matmul_nt(a, b)),
        ("add", |t, [a, b, ..]| t.add(a, b)),
        ("mul", |t, [a, b, ..]| t.mul(a, b)),
        ("add_row", |t, [a, _, _, c]| t.add_row(a, c)),
        ("outer_add_rows", |t, [a, b, ..]| t.outer_add_rows(a, b)),
        ("gelu", |t, [a, ..]| Ok(t.gelu(a))),
        ("tanh", |t, [a, ..]| Ok(t.tanh(a))),
        ("layer_norm", |t, [a, _, g, c]| t.layer_norm(a, g, c)),
        ("softmax_rows", |t, [a, ..]| t.softmax_rows(a)),
        ("masked_softmax_rows", |t, [a, ..]| {
            let (m, n) = (t.value(a).rows(), t.value(a).cols());
            let allowed: Vec<bool> = (0..m * n).map(|i| i % n <= i / n % n).collect();
            t.masked_softmax_rows(a, &allowed)
        }),
        ("log_softmax_rows", |t, [a, ..]| t.log_softmax_rows(a)),
        ("embedding", |t, [a, ..]| {
            let rows = t.value(a).rows();
            let ids: Vec<usize> = (0..5).map(|i| (i * 7) % rows).collect();
            t.embedding(a, &ids)
        }),
        ("dropout", |t, [a, ..]| {
            let mut r = Rng::new(5);
            t.dropout(a, 0.3, &mut r)
        }),
        ("concat_cols", |t, [a, b, ..]| t.concat_cols(&[a, b, a])),
        ("slice_cols", |t, [a, ..]| t.slice_cols(a, 1, 2)),
        ("concat_rows", |t, [a, b, ..]| t.concat_rows(&[b, a])),
        ("slice_rows", |t, [a, ..]| t.slice_rows(a, 1, 2)),
        ("transpose", |t, [a, ..]| t.transpose(a)),
        ("scale", |t, [a, ..]| Ok(t.scale(a, -1.7))),
        ("composite", |t, [a, b, g, c]| {
            let n = t.layer_norm(a, g, c)?;
            let h = t.gelu(n);
            let s = t.matmul_nt(h, b)?;
            let p = t.softmax_rows(s)?;
            t.matmul(p, a)
        }),
    ]
}

#[test]
fn finite_difference_gate_for_every_op() {
    for (name, op) in op_table() {
        let mut worst = 0.0f64;
        for inst in 0..20u64 {
            let mut rng = Rng::derive(100, &[inst]);
            let (mut params, ids) = store(&mut rng, 3, 4);
            let res = check_gradients(&mut params, None, |tape, params| {
                let vars = ids.map(|id| tape.param(params, id));
                let out = op(tape, vars)?;
                if tape.value(out).is_scalar() {
                    Ok(out)
                } else {
                    project(tape, out, 77 + inst)
                }
            })
            .unwrap();
            worst = worst.max(res.max_rel_err);
        }
        assert!(worst < 1e-4, "{name}: max rel err {worst:e}");
    }
}

#[test]
fn reductions_have_exact_gradients() {
    let mut rng = Rng::new(2);
    let (mut params, [a, ..]) = store(&mut rng, 2, 3);
    let mut tape = Tape::new();
    let v = tape.param(&params, a);
    let m = tape.mean(v);
    tape.backward(m, &mut params).unwrap();
    assert!(params.grad(a).data().iter().all(|&g| (g - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn identical_seeds_give_identical_forward() {
    let run = || {
        let mut rng = Rng::new(99);
        let (params, ids) = store(&mut rng, 4, 4);
        let mut tape = Tape::new();
        let vars = ids.map(|id| tape.param(&params, id));
        let out = (op_table()[20].1)(&mut tape, vars).unwrap();
        let d = tape.dropout(out, 0.5, &mut rng).unwrap();
        tape.value(d).data().to_vec()
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn shape_contract_errors() {
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[0, 2], vec![]).is_err());
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 2]));
    assert!(t.add(a, b).is_err());
    assert!(t.embedding(a, &[5]).is_err());
    assert!(logsumexp(&[]).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(xs in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let x = Tensor::new(&[3, 4], xs).unwrap();
            let y = softmax_rows(&x).unwrap();
            for r in 0..3 {
                prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(y.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
