//! Finite-difference verification of every primitive operation's
//! backward pass, in double precision.

use dagn_core::autodiff::{backward, Tape, Tx};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Builds the graph twice per perturbed element and compares the loss
/// slope against the analytic gradient of every input.
fn check<F>(inputs: Vec<ArrayD<f64>>, tol: f64, build: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Tx<'t, f64>]) -> Tx<'t, f64>,
{
    let eval = |ins: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<_> = ins.iter().map(|a| tape.leaf(a.clone())).collect();
        build(&tape, &leaves).scalar()
    };
    // Analytic gradients.
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&tape, &leaves);
    assert_eq!(loss.value().ndim(), 0, "loss must be scalar");
    let grads = backward(loss);
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|l| grads.get(*l).cloned().unwrap_or_else(|| ArrayD::zeros(l.value().raw_dim())))
        .collect();
    // Numeric gradients, every element.
    let mut work = inputs.clone();
    for (i, a) in inputs.iter().enumerate() {
        for idx in 0..a.len() {
            let orig = a.as_slice().unwrap()[idx];
            let eps = 1e-5 * orig.abs().max(1.0);
            work[i].as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a_g = analytic[i].as_slice().unwrap()[idx];
            let diff = (a_g - numeric).abs();
            let scale = a_g.abs().max(numeric.abs()).max(1e-8);
            assert!(
                diff <= tol * scale + 1e-9,
                "input {i} elem {idx}: analytic {a_g:.8e} vs numeric {numeric:.8e}"
            );
        }
    }
}

#[test]
fn elementwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_arr(&mut rng, &[3, 4]);
    let b = rand_arr(&mut rng, &[3, 4]);
    check(vec![a, b], 1e-5, |_t, xs| {
        let (a, b) = (xs[0], xs[1]);
        let y = a.mul(b).add(a).sub(b.neg()).mul_scalar(0.7).add_scalar(0.3);
        y.sigmoid().mean_all()
    });
}

#[test]
fn relu_abs_logsigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_arr(&mut rng, &[4, 5]);
    check(vec![a], 1e-5, |_t, xs| {
        let x = xs[0];
        let y = x.relu().add(x.abs()).add(x.log_sigmoid());
        y.sum_all().mul_scalar(0.1)
    });
}

#[test]
fn softmax_rows_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_arr(&mut rng, &[3, 7]);
    let w = rand_arr(&mut rng, &[3, 7]);
    check(vec![a, w], 1e-5, |_t, xs| {
        xs[0].softmax_rows().mul(xs[1]).sum_all()
    });
}

#[test]
fn matmul_and_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = rand_arr(&mut rng, &[4, 3]);
    let b = rand_arr(&mut rng, &[3, 5]);
    check(vec![a, b], 1e-5, |_t, xs| xs[0].matmul(xs[1]).abs().mean_all());

    let a = rand_arr(&mut rng, &[2, 3, 4]);
    let b = rand_arr(&mut rng, &[2, 4, 2]);
    check(vec![a, b], 1e-5, |_t, xs| xs[0].bmm(xs[1]).sigmoid().sum_all());
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = rand_arr(&mut rng, &[2, 3, 4]);
    let b = rand_arr(&mut rng, &[2, 5, 4]);
    check(vec![a, b], 1e-5, |_t, xs| {
        let p = xs[0].permute(&[0, 2, 1]).reshape(&[2, 12]);
        let q = Tx::concat(&[xs[0], xs[1]], 1).reshape(&[2, 32]);
        p.sum_all().add(q.abs().mean_all())
    });
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_arr(&mut rng, &[2, 3, 4, 5]);
    let cb = rand_arr(&mut rng, &[3]);
    let cs = rand_arr(&mut rng, &[3]);
    let nc = rand_arr(&mut rng, &[2, 3]);
    let ns = rand_arr(&mut rng, &[2, 3]);
    check(vec![x, cb, cs, nc, ns], 1e-5, |_t, xs| {
        let y = xs[0].add_chan(xs[1]).mul_chan(xs[2]).scale_nc(xs[3]).shift_nc(xs[4]);
        y.sigmoid().mean_all()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_arr(&mut rng, &[3, 6]);
    let b = rand_arr(&mut rng, &[6]);
    check(vec![x, b], 1e-5, |_t, xs| xs[0].add_row(xs[1]).abs().sum_all());
}

#[test]
fn conv2d_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    // kernel, stride, pad triples covering the trunk layouts: 3x3 s1 p1,
    // 3x3 s2 p1, 7x7 s2 p3, 1x1 s1 p0, 1x1 s2 p0.
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0)] {
        let x = rand_arr(&mut rng, &[2, 3, 8, 7]);
        let w = rand_arr(&mut rng, &[4, 3, k, k]);
        check(vec![x, w], 1e-4, move |_t, xs| {
            xs[0].conv2d(xs[1], s, p).sigmoid().mean_all()
        });
    }
}

#[test]
fn conv_transpose2d_k2s2() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_arr(&mut rng, &[2, 4, 3, 5]);
    let w = rand_arr(&mut rng, &[4, 3, 2, 2]);
    check(vec![x, w], 1e-4, |_t, xs| {
        xs[0].conv_transpose2d(xs[1], 2).abs().mean_all()
    });
}

#[test]
fn pooling_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_arr(&mut rng, &[2, 3, 7, 7]);
    check(vec![x], 1e-5, |_t, xs| xs[0].max_pool2d(3, 2, 1).sum_all());

    // Adaptive pooling with output both below and above the input size.
    for &o in &[1usize, 2, 4, 8] {
        let x = rand_arr(&mut rng, &[2, 3, 6, 6]);
        check(vec![x], 1e-5, move |_t, xs| {
            xs[0].adaptive_avg_pool2d(o).sigmoid().sum_all()
        });
    }

    let x = rand_arr(&mut rng, &[2, 5, 4, 6]);
    check(vec![x], 1e-5, |_t, xs| xs[0].global_avg_pool().abs().sum_all());
}

#[test]
fn batch_norm_train_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_arr(&mut rng, &[3, 4, 5, 5]);
    let gamma = rand_arr(&mut rng, &[4]);
    let beta = rand_arr(&mut rng, &[4]);
    check(vec![x, gamma, beta], 1e-4, |_t, xs| {
        let (y, _m, _v) = xs[0].batch_norm_train(xs[1], xs[2], 1e-5);
        y.sigmoid().mean_all()
    });
}

#[test]
fn shared_leaf_accumulates() {
    // A leaf used along two paths must receive the sum of both paths'
    // gradients; this mirrors a parameter bound twice in one step.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = rand_arr(&mut rng, &[3, 3]);
    check(vec![a], 1e-5, |_t, xs| {
        let x = xs[0];
        x.mul(x).mean_all().add(x.sigmoid().sum_all().mul_scalar(0.25))
    });
}

#[test]
fn backward_seeded_combines_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = rand_arr(&mut rng, &[4, 4]);
    let tape = Tape::new();
    let x = tape.leaf(a.clone());
    let l1 = x.abs().mean_all();
    let l2 = x.sigmoid().sum_all();
    let grads = dagn_core::autodiff::backward_seeded(&[(l1, 1.0), (l2, 0.5)]);
    let g = grads.get(x).unwrap().clone();

    let tape2 = Tape::new();
    let x2 = tape2.leaf(a);
    let combined = x2.abs().mean_all().add(x2.sigmoid().sum_all().mul_scalar(0.5));
    let grads2 = backward(combined);
    let g2 = grads2.get(x2).unwrap();
    for (u, v) in g.iter().zip(g2.iter()) {
        assert!((u - v).abs() < 1e-12);
    }
}
