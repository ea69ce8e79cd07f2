use mddkit_tensor::{central_difference, max_relative_error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Evaluates `sum(build(inputs) * weights)` so every output entry matters.
fn scalar_fn(g: &mut Graph, inputs: &[Var], weights: &Tensor, build: &Build) -> Var {
    let out = build(g, inputs);
    let w = g.constant(weights.clone().reshaped(g.shape(out).to_vec()).unwrap());
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn worst_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let out_numel = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).numel()
    };
    let weights = random_tensor(&mut rng, &[out_numel], -1.0, 1.0);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let root = scalar_fn(&mut g, &vars, &weights, build);
    let grads = g.backward(root).unwrap();

    let mut worst = 0.0_f64;
    for (k, v) in vars.iter().enumerate() {
        let numeric = central_difference(
            |probe| {
                let mut g = Graph::new();
                let vs: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
                let r = scalar_fn(&mut g, &vs, &weights, build);
                g.value(r).item()
            },
            inputs,
            k,
            1e-5,
        );
        worst = worst.max(max_relative_error(grads.get(*v).unwrap(), &numeric));
    }
    worst
}

fn check_op(name: &str, shapes: &[&[usize]], range: (f64, f64), build: &Build) {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random_tensor(&mut rng, s, range.0, range.1))
            .collect();
        let err = worst_error(&inputs, build, seed);
        assert!(err <= 1e-4, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn matmul_gradient() {
    check_op("matmul", &[&[3, 4], &[4, 2]], (-1.0, 1.0), &|g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn add_sub_mul_gradients() {
    check_op("add", &[&[3, 4], &[3, 4]], (-1.0, 1.0), &|g, v| g.add(v[0], v[1]).unwrap());
    check_op("add-row", &[&[3, 4], &[4]], (-1.0, 1.0), &|g, v| g.add(v[0], v[1]).unwrap());
    check_op("sub-scalar", &[&[3, 4], &[1]], (-1.0, 1.0), &|g, v| {
        g.sub(v[0], v[1]).unwrap()
    });
    check_op("mul", &[&[2, 5], &[2, 5]], (-1.0, 1.0), &|g, v| g.mul(v[0], v[1]).unwrap());
    check_op("mul-row", &[&[2, 5], &[5]], (-1.0, 1.0), &|g, v| g.mul(v[0], v[1]).unwrap());
    check_op("scale", &[&[4]], (-1.0, 1.0), &|g, v| g.scale(v[0], -2.5));
}

#[test]
fn pointwise_gradients() {
    check_op("exp", &[&[6]], (-2.0, 2.0), &|g, v| g.exp(v[0]));
    check_op("log", &[&[6]], (0.2, 3.0), &|g, v| g.log(v[0]));
    check_op("floor_log", &[&[6]], (0.2, 3.0), &|g, v| g.floor_log(v[0], 1e-12));
    check_op("sigmoid", &[&[6]], (-3.0, 3.0), &|g, v| g.sigmoid(v[0]));
    check_op("tanh", &[&[6]], (-3.0, 3.0), &|g, v| g.tanh(v[0]));
    // Keep relu inputs away from the kink.
    check_op("relu", &[&[6]], (0.05, 2.0), &|g, v| {
        let shifted = g.scale(v[0], -1.0);
        let a = g.relu(v[0]);
        let b = g.relu(shifted);
        g.sub(a, b).unwrap()
    });
}

#[test]
fn softmax_gradients() {
    check_op("softmax-rows", &[&[3, 4]], (-2.0, 2.0), &|g, v| g.softmax(v[0], 1).unwrap());
    check_op("softmax-cols", &[&[3, 4]], (-2.0, 2.0), &|g, v| g.softmax(v[0], 0).unwrap());
    check_op("log_softmax", &[&[3, 4]], (-2.0, 2.0), &|g, v| {
        g.log_softmax(v[0], 1).unwrap()
    });
}

#[test]
fn layer_norm_gradient() {
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], (-1.0, 1.0), &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
}

#[test]
fn structural_gradients() {
    check_op("concat-0", &[&[2, 3], &[1, 3]], (-1.0, 1.0), &|g, v| {
        g.concat(&[v[0], v[1]], 0).unwrap()
    });
    check_op("concat-1", &[&[2, 3], &[2, 2]], (-1.0, 1.0), &|g, v| {
        g.concat(&[v[0], v[1]], 1).unwrap()
    });
    check_op("slice", &[&[4, 5]], (-1.0, 1.0), &|g, v| g.slice(v[0], 1, 1, 4).unwrap());
    check_op("transpose", &[&[3, 2]], (-1.0, 1.0), &|g, v| g.transpose(v[0]).unwrap());
    check_op("reshape", &[&[3, 2]], (-1.0, 1.0), &|g, v| g.reshape(v[0], &[6]).unwrap());
    check_op("gather_rows", &[&[4, 3]], (-1.0, 1.0), &|g, v| {
        g.gather_rows(v[0], &[2, 0, 2]).unwrap()
    });
    check_op("gather_cols", &[&[3, 4]], (-1.0, 1.0), &|g, v| {
        g.gather_cols(v[0], &[3, 1, 3, 0]).unwrap()
    });
}

#[test]
fn reduction_gradients() {
    check_op("sum", &[&[3, 4]], (-1.0, 1.0), &|g, v| g.sum(v[0]));
    check_op("mean", &[&[3, 4]], (-1.0, 1.0), &|g, v| g.mean(v[0]).unwrap());
}

#[test]
fn conv1d_gradient() {
    check_op("conv1d", &[&[7, 3], &[3, 3, 2], &[2]], (-1.0, 1.0), &|g, v| {
        g.conv1d(v[0], v[1], Some(v[2]), 1, 1).unwrap()
    });
    check_op("conv1d-stride", &[&[9, 2], &[4, 2, 3], &[3]], (-1.0, 1.0), &|g, v| {
        g.conv1d(v[0], v[1], Some(v[2]), 4, 0).unwrap()
    });
}

#[test]
fn sum_of_squares_matches_finite_differences() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_grad());
    let sq = g.mul(v, v).unwrap();
    let y = g.sum(sq);
    let grads = g.backward(y).unwrap();
    let numeric = central_difference(
        |t| t[0].data().iter().map(|a| a * a).sum(),
        &[x],
        0,
        1e-6,
    );
    assert!(max_relative_error(grads.get(v).unwrap(), &numeric) < 1e-8);
    assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn log_softmax_composite_matches_finite_differences() {
    let f = |x: &Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(x.clone().with_grad());
        let s = g.softmax(v, 0).unwrap();
        let l = g.log(s);
        let first = g.slice(l, 0, 0, 1).unwrap();
        let y = g.sum(first);
        (g.value(y).item(), g.backward(y).unwrap().get(v).unwrap().clone())
    };
    let x = Tensor::vector(vec![1.0, 0.0]);
    let (_, analytic) = f(&x);
    let numeric = central_difference(|t| f(&t[0]).0, &[x], 0, 1e-6);
    assert!(max_relative_error(&analytic, &numeric) <= 1e-6);
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let t = random_tensor(&mut rng, &[5, 9], -30.0, 30.0);
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.softmax(x, 1).unwrap();
        for r in 0..5 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, &[6, 8], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[3, 8, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.leaf(a.with_grad());
        let wv = g.leaf(w.with_grad());
        let c = g.conv1d(x, wv, None, 1, 1).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let l = g.log(s);
        let y = g.mean(l).unwrap();
        let grads = g.backward(y).unwrap();
        (g.value(y).item().to_bits(), grads.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn independent_graphs_run_on_separate_threads() {
    let handles: Vec<_> = (0..4)
        .map(|k| {
            std::thread::spawn(move || {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::vector(vec![k as f64, 1.0]).with_grad());
                let y = g.mul(x, x).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap().get(x).unwrap().data().to_vec()
            })
        })
        .collect();
    for (k, h) in handles.into_iter().enumerate() {
        assert_eq!(h.join().unwrap(), vec![2.0 * k as f64, 2.0]);
    }
}
