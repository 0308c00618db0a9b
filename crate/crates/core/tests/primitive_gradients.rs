//! Backward pass of every tape primitive against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unienc::ctc::{ctc_loss, LogProbLattice};
use unienc::numerics::{
    finite_diff_grad, relative_error, AttnMask, Graph, NodeId, ParamId, ParamStore, Tensor,
};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Contracts `build`'s output with a fixed random tensor and compares the
/// parameter gradients of that scalar against finite differences.
fn check<F>(name: &str, mut store: ParamStore, build: F)
where
    F: Fn(&mut Graph) -> NodeId,
{
    let weights = {
        let g0 = &mut Graph::new(&store);
        let out = build(g0);
        let dims = g0.value(out).dims().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let scalar = |store: &ParamStore| -> (f64, Option<unienc::numerics::Gradients>) {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        let v: f64 = g
            .value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let l = g.loss(out, v, weights.clone()).unwrap();
        (v, g.backward(l).ok())
    };
    let analytic = scalar(&store).1.unwrap().flatten();
    let mut theta = store.flatten();
    let numeric = finite_diff_grad(
        |p| {
            store.assign_flat(p);
            scalar(&store).0
        },
        &mut theta,
        EPS,
    )
    .unwrap();
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n, 1e-6))
        .fold(0.0, f64::max);
    assert!(worst < TOL, "{name}: worst relative error {worst}");
}

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|&(n, r, c)| s.add(n, random(rng, r, c)))
        .collect();
    (s, ids)
}

#[test]
fn matmul_add_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s, p) = store_with(
        &mut rng,
        &[("a", 3, 4), ("b", 4, 2), ("c", 3, 2), ("bias", 1, 2)],
    );
    check("matmul/add/add_bias", s, |g| {
        let (a, b, c, bias) = (g.param(p[0]), g.param(p[1]), g.param(p[2]), g.param(p[3]));
        let m = g.matmul(a, b).unwrap();
        let m = g.add(m, c).unwrap();
        g.add_bias(m, bias).unwrap()
    });
}

#[test]
fn linear_scale_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s, p) = store_with(&mut rng, &[("x", 4, 3), ("w", 3, 5), ("b", 1, 5)]);
    let shift = random(&mut rng, 4, 5);
    let mask: Vec<f64> = (0..20)
        .map(|i| if i % 3 == 0 { 0.0 } else { 1.25 })
        .collect();
    check("linear/scale/add_const/mul_const", s, |g| {
        let x = g.param(p[0]);
        let y = g.linear(x, p[1], p[2]).unwrap();
        let y = g.scale(y, -0.7);
        let y = g.add_const(y, &shift).unwrap();
        g.mul_const(y, mask.clone()).unwrap()
    });
}

#[test]
fn gelu_and_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, p) = store_with(&mut rng, &[("x", 3, 6)]);
    check("gelu", s.clone(), |g| {
        let x = g.param(p[0]);
        let x = g.scale(x, 3.0);
        g.gelu(x)
    });
    check("log_softmax", s, |g| {
        let x = g.param(p[0]);
        g.log_softmax(x).unwrap()
    });
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (s, p) = store_with(&mut rng, &[("x", 3, 5), ("gain", 1, 5), ("bias", 1, 5)]);
    check("layer_norm", s, |g| {
        let x = g.param(p[0]);
        g.layer_norm(x, p[1], p[2]).unwrap()
    });
}

#[test]
fn attention_with_and_without_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s, p) = store_with(&mut rng, &[("q", 3, 4), ("k", 5, 4), ("v", 5, 4)]);
    check("attention", s.clone(), |g| {
        let (q, k, v) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
        g.attention(q, k, v, 2, None).unwrap()
    });
    let mask = AttnMask::from_spans(&[(0, 2), (2, 3), (3, 5)], 5);
    check("masked attention", s, |g| {
        let (q, k, v) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
        g.attention(q, k, v, 2, Some(&mask)).unwrap()
    });
}

#[test]
fn row_plumbing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (s, p) = store_with(&mut rng, &[("a", 5, 3), ("b", 2, 3)]);
    check("concat/slice/unfold", s, |g| {
        let (a, b) = (g.param(p[0]), g.param(p[1]));
        let c = g.concat_rows(&[a, b]).unwrap();
        let c = g.slice_rows(c, 1, 5).unwrap();
        // 5 rows, stride 2: zero-padded to 6
        g.unfold(c, 2).unwrap()
    });
}

#[test]
fn cross_entropy_and_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (s, p) = store_with(&mut rng, &[("z", 4, 5)]);
    check("cross_entropy", s, |g| {
        let z = g.param(p[0]);
        let plain = g.cross_entropy(z, &[0, 3, 3, 1], 0.0).unwrap();
        let smooth = g.cross_entropy(z, &[0, 3, 3, 1], 0.2).unwrap();
        g.weighted_sum(&[(plain, 0.6), (smooth, 1.5)]).unwrap()
    });
}

#[test]
fn ctc_loss_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (s, p) = store_with(&mut rng, &[("z", 7, 4)]);
    check("ctc", s, |g| {
        let z = g.param(p[0]);
        let lat = LogProbLattice::from_logits(g.value(z)).unwrap();
        let out = ctc_loss(&lat, &[1, 3, 3]).unwrap();
        g.loss(z, out.nll, out.grad).unwrap()
    });
}
