//! Every differentiable op checked against central finite differences.

use std::rc::Rc;

use bofi::model::{relative_error, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Compare `backward` with central differences over every parameter entry.
fn check(store: &mut ParamStore, build: impl Fn(&mut Graph<'_>) -> NodeId) {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss).unwrap()
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let loss = build(&mut g);
        g.value(loss).item()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for p in ids {
        for k in 0..store.get(p).len() {
            let orig = store.get(p).data()[k];
            store.get_mut(p).data_mut()[k] = orig + EPS;
            let up = eval(store);
            store.get_mut(p).data_mut()[k] = orig - EPS;
            let down = eval(store);
            store.get_mut(p).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.get(p).data()[k];
            let err = relative_error(a, numeric);
            assert!(
                err < TOL,
                "{}[{k}]: analytic {a} numeric {numeric} rel err {err}",
                store.name(p)
            );
        }
    }
}

/// Random store with an `x` block of the given shape and a projection to
/// five classes, so any op output can be turned into an NLL.
fn setup(rows: usize, cols: usize, seed: u64) -> (ParamStore, ParamId, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = s.add("x", random(rows, cols, &mut rng));
    (s, x, rng)
}

fn head(g: &mut Graph<'_>, out: NodeId, proj: ParamId) -> NodeId {
    let p = g.param(proj);
    let logits = g.matmul(out, p);
    let n = g.value(logits).rows();
    g.nll(logits, (0..n).map(|i| (i * 3 + 1) % 5).collect())
}

#[test]
fn matmul_and_transposed() {
    let (mut s, x, mut rng) = setup(3, 4, 1);
    let w = s.add("w", random(4, 6, &mut rng));
    let v = s.add("v", random(2, 4, &mut rng));
    let proj = s.add("proj", random(6, 5, &mut rng));
    let proj2 = s.add("proj2", random(2, 5, &mut rng));
    check(&mut s, |g| {
        let (xn, wn, vn) = (g.param(x), g.param(w), g.param(v));
        let a = g.matmul(xn, wn);
        let b = g.matmul_nt(xn, vn);
        let la = head(g, a, proj);
        let lb = head(g, b, proj2);
        g.weighted_sum(vec![(la, 1.0), (lb, 0.5)])
    });
}

#[test]
fn add_add_row_scale_linear() {
    let (mut s, x, mut rng) = setup(3, 4, 2);
    let y = s.add("y", random(3, 4, &mut rng));
    let r = s.add("r", random(1, 4, &mut rng));
    let w = s.add("w", random(4, 4, &mut rng));
    let b = s.add("b", random(1, 4, &mut rng));
    let proj = s.add("proj", random(4, 5, &mut rng));
    check(&mut s, |g| {
        let (xn, yn, rn) = (g.param(x), g.param(y), g.param(r));
        let a = g.add(xn, yn);
        let a = g.add_row(a, rn);
        let a = g.scale(a, -1.7);
        let a = g.linear(a, w, b);
        head(g, a, proj)
    });
}

#[test]
fn gelu() {
    let (mut s, x, mut rng) = setup(4, 3, 3);
    let proj = s.add("proj", random(3, 5, &mut rng));
    check(&mut s, |g| {
        let xn = g.param(x);
        let a = g.scale(xn, 2.5);
        let a = g.gelu(a);
        head(g, a, proj)
    });
}

#[test]
fn layer_norm() {
    let (mut s, x, mut rng) = setup(3, 6, 4);
    let gain = s.add("gain", random(1, 6, &mut rng));
    let bias = s.add("bias", random(1, 6, &mut rng));
    let proj = s.add("proj", random(6, 5, &mut rng));
    check(&mut s, |g| {
        let xn = g.param(x);
        let a = g.layer_norm(xn, gain, bias);
        head(g, a, proj)
    });
}

#[test]
fn softmax_plain_and_masked() {
    let (mut s, x, mut rng) = setup(3, 4, 5);
    let proj = s.add("proj", random(4, 5, &mut rng));
    let mask: Rc<Vec<bool>> = Rc::new((0..12).map(|i| i % 4 != 3 || i == 11).collect());
    check(&mut s, |g| {
        let xn = g.param(x);
        let a = g.softmax(xn, None);
        let b = g.softmax(xn, Some(&mask));
        let c = g.add(a, b);
        let c = g.scale(c, 3.0);
        head(g, c, proj)
    });
}

#[test]
fn slicing_and_concatenation() {
    let (mut s, x, mut rng) = setup(4, 6, 6);
    let y = s.add("y", random(2, 6, &mut rng));
    let proj = s.add("proj", random(6, 5, &mut rng));
    check(&mut s, |g| {
        let (xn, yn) = (g.param(x), g.param(y));
        let left = g.slice_cols(xn, 0, 2);
        let right = g.slice_cols(xn, 2, 4);
        let swapped = g.concat_cols(vec![right, left]);
        let picked = g.select_rows(swapped, vec![3, 0, 0, 2]);
        let stacked = g.concat_rows(vec![picked, yn]);
        head(g, stacked, proj)
    });
}

#[test]
fn gather_with_repeats() {
    let (mut s, table, mut rng) = setup(5, 3, 7);
    let proj = s.add("proj", random(3, 5, &mut rng));
    check(&mut s, |g| {
        let e = g.gather(table, vec![4, 1, 4, 0]);
        head(g, e, proj)
    });
}

#[test]
fn divergences() {
    let (mut s, x, mut rng) = setup(3, 5, 8);
    let target = {
        let t = random(3, 5, &mut rng);
        bofi::model::softmax_rows(&t, None)
    };
    let q = vec![0.2, 0.05, 0.6];
    check(&mut s, |g| {
        let xn = g.param(x);
        let a = g.kl_to(xn, &target);
        let b = g.target_kl(xn, vec![1, 4, 2], &q);
        let c = g.nll(xn, vec![0, 3, 2]);
        g.weighted_sum(vec![(a, 0.7), (b, 1.3), (c, -0.4)])
    });
}

#[test]
fn shared_param_leaf_accumulates() {
    let (mut s, x, mut rng) = setup(3, 3, 9);
    let proj = s.add("proj", random(3, 5, &mut rng));
    check(&mut s, |g| {
        let a = g.param(x);
        let b = g.param(x);
        let sq = g.matmul(a, b);
        let t = g.gather(x, vec![2, 2, 1]);
        let sum = g.add(sq, t);
        head(g, sum, proj)
    });
}

#[test]
fn backward_into_scales_and_accumulates() {
    let (s, x, mut rng) = setup(2, 3, 10);
    let mut s = s;
    let proj = s.add("proj", random(3, 5, &mut rng));
    let mut g = Graph::new(&s);
    let xn = g.param(x);
    let loss = head(&mut g, xn, proj);
    let once = g.backward(loss).unwrap();
    let mut acc = bofi::model::Gradients::zeros_like(&s);
    g.backward_into(loss, &mut acc, 0.25).unwrap();
    g.backward_into(loss, &mut acc, 0.75).unwrap();
    for p in s.ids() {
        for (a, b) in acc.get(p).data().iter().zip(once.get(p).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
