//! Central finite-difference checks for every layer type.
//!
//! The oracle perturbs each store parameter entry by +/- h and rebuilds the
//! forward pass, keeping it independent of the backward implementation.

use ndcore::{GruCell, MultiHeadAttention, ParamStore, Session, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Max relative error between autodiff and central differences over every
/// entry of every parameter touched by `build`.
fn check_grads<F>(store: &ParamStore, build: F) -> f64
where
    F: Fn(&mut Session) -> TensorId,
{
    let mut s = Session::new(store);
    let loss = build(&mut s);
    s.backward(loss).unwrap();
    let grads = s.grads();

    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        let n = store.get(name).unwrap().data.len();
        for k in 0..n {
            let eval = |delta: f64| -> f64 {
                let mut st = store.clone();
                st.get_mut(name).unwrap().data[k] += delta;
                let mut s = Session::new(&st);
                let l = build(&mut s);
                s.tape.value(l)[0]
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let denom = fd.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max((fd - g[k]).abs() / denom);
        }
    }
    worst
}

#[test]
fn linear_layer_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (b, i, o) = (
            rng.random_range(1..4usize),
            rng.random_range(1..6usize),
            rng.random_range(1..6usize),
        );
        let mut store = ParamStore::new();
        store.init_uniform("w", &[o, i], &mut rng).unwrap();
        store.init_uniform("b", &[o], &mut rng).unwrap();
        let x: Vec<f64> = (0..b * i).map(|_| rng.random_range(-1.0..1.0)).collect();
        let worst = check_grads(&store, |s| {
            let w = s.param("w").unwrap();
            let bias = s.param("b").unwrap();
            let xi = s.input(&[b, i], x.clone()).unwrap();
            let y = ndcore::linear_forward(&mut s.tape, xi, w, bias).unwrap();
            let sq = s.tape.mul(y, y).unwrap();
            s.tape.mean(sq)
        });
        assert!(worst < TOL, "linear relative error {worst}");
    }
}

#[test]
fn embedding_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (v, e) = (rng.random_range(2..8usize), rng.random_range(1..6usize));
        let mut store = ParamStore::new();
        store.init_uniform("table", &[v, e], &mut rng).unwrap();
        let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..v)).collect();
        let worst = check_grads(&store, |s| {
            let t = s.param("table").unwrap();
            let rows = s.tape.gather(t, &idx).unwrap();
            let sq = s.tape.mul(rows, rows).unwrap();
            s.tape.sum(sq)
        });
        assert!(worst < TOL, "embedding relative error {worst}");
    }
}

#[test]
fn gru_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (i, h) = (rng.random_range(1..5usize), rng.random_range(1..5usize));
        let mut store = ParamStore::new();
        let cell = GruCell::init(&mut store, "g", i, h, &mut rng).unwrap();
        store.init_uniform("h0", &[1, h], &mut rng).unwrap();
        let x1: Vec<f64> = (0..i).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..i).map(|_| rng.random_range(-1.0..1.0)).collect();
        let worst = check_grads(&store, |s| {
            let h0 = s.param("h0").unwrap();
            let xa = s.input(&[1, i], x1.clone()).unwrap();
            let xb = s.input(&[1, i], x2.clone()).unwrap();
            let h1 = cell.step(s, h0, xa).unwrap();
            let h2 = cell.step(s, h1, xb).unwrap();
            let sq = s.tape.mul(h2, h2).unwrap();
            s.tape.sum(sq)
        });
        assert!(worst < TOL, "gru relative error {worst}");
    }
}

#[test]
fn attention_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let heads = rng.random_range(1..3usize);
        let d = heads * rng.random_range(1..4usize);
        let l = rng.random_range(1..5usize);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", d, heads, &mut rng).unwrap();
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let worst = check_grads(&store, |s| {
            let qi = s.input(&[1, d], q.clone()).unwrap();
            let kvi = s.input(&[l, d], kv.clone()).unwrap();
            let y = mha.forward(s, qi, kvi).unwrap();
            let sq = s.tape.mul(y, y).unwrap();
            s.tape.sum(sq)
        });
        assert!(worst < TOL, "attention relative error {worst}");
    }
}

#[test]
fn softmax_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let k = rng.random_range(2..7usize);
        let mut store = ParamStore::new();
        store.init_uniform("x", &[1, k], &mut rng).unwrap();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let worst = check_grads(&store, |s| {
            let x = s.param("x").unwrap();
            let p = s.tape.softmax(x);
            let wi = s.input(&[1, k], w.clone()).unwrap();
            let m = s.tape.mul(p, wi).unwrap();
            s.tape.sum(m)
        });
        assert!(worst < TOL, "softmax relative error {worst}");
    }
}

#[test]
fn composite_three_layer_gradcheck() {
    // random 3-layer composite: linear -> tanh -> linear -> sigmoid -> mse
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let (i, h, o) = (
            rng.random_range(1..5usize),
            rng.random_range(1..5usize),
            rng.random_range(1..4usize),
        );
        let mut store = ParamStore::new();
        store.init_uniform("w1", &[h, i], &mut rng).unwrap();
        store.init_zeros("b1", &[h]).unwrap();
        store.init_uniform("w2", &[o, h], &mut rng).unwrap();
        store.init_zeros("b2", &[o]).unwrap();
        let x: Vec<f64> = (0..i).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..o).map(|_| rng.random_range(0.0..1.0)).collect();
        let worst = check_grads(&store, |s| {
            let w1 = s.param("w1").unwrap();
            let b1 = s.param("b1").unwrap();
            let w2 = s.param("w2").unwrap();
            let b2 = s.param("b2").unwrap();
            let xi = s.input(&[1, i], x.clone()).unwrap();
            let h1 = ndcore::linear_forward(&mut s.tape, xi, w1, b1).unwrap();
            let a1 = s.tape.tanh(h1);
            let h2 = ndcore::linear_forward(&mut s.tape, a1, w2, b2).unwrap();
            let a2 = s.tape.sigmoid(h2);
            let ti = s.input(&[1, o], t.clone()).unwrap();
            s.tape.mse(a2, ti).unwrap()
        });
        assert!(worst < TOL, "composite relative error {worst}");
    }
}

#[test]
fn layernorm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let k = rng.random_range(2..7usize);
        let mut store = ParamStore::new();
        store.init_uniform("x", &[2, k], &mut rng).unwrap();
        let w: Vec<f64> = (0..2 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let worst = check_grads(&store, |s| {
            let x = s.param("x").unwrap();
            let y = s.tape.layer_norm(x);
            let wi = s.input(&[2, k], w.clone()).unwrap();
            let m = s.tape.mul(y, wi).unwrap();
            s.tape.sum(m)
        });
        assert!(worst < TOL, "layernorm relative error {worst}");
    }
}
