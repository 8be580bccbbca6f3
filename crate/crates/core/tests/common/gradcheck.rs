//! Finite-difference checks of each layer's backward pass against a random
//! linear functional of its outputs.

use physgan::nn::{
    affine, affine_backward, conv1d, conv1d_backward, grad_check, highway, highway_backward,
    lstm_step, lstm_step_backward, max_over_time, max_over_time_backward, HighwayParams,
    LstmParams, ParamSet, Tensor,
};

use super::{dot, rng, uniform, vec_uniform};

const STEP: f64 = 1e-5;

pub fn random_lstm(seed: u64, input: usize, hidden: usize) -> LstmParams<f64> {
    let mut r = rng(seed);
    LstmParams {
        w_x: uniform(&mut r, &[4 * hidden, input], -1.0, 1.0),
        w_h: uniform(&mut r, &[4 * hidden, hidden], -1.0, 1.0),
        bias: uniform(&mut r, &[4 * hidden], -1.0, 1.0),
    }
}

pub fn random_highway(seed: u64, n: usize) -> HighwayParams<f64> {
    let mut r = rng(seed);
    HighwayParams {
        w_h: uniform(&mut r, &[n, n], -1.0, 1.0),
        b_h: uniform(&mut r, &[n], -1.0, 1.0),
        w_t: uniform(&mut r, &[n, n], -1.0, 1.0),
        b_t: uniform(&mut r, &[n], -1.0, 1.0),
    }
}

pub fn affine_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, n) = (4, 3);
    let w = uniform(&mut r, &[m, n], -1.0, 1.0);
    let b = vec_uniform(&mut r, m, -1.0, 1.0);
    let x = vec_uniform(&mut r, n, -1.0, 1.0);
    let coef = vec_uniform(&mut r, m, -1.0, 1.0);
    let mut dw = Tensor::zeros(&[m, n]);
    let mut db = vec![0.0; m];
    let mut dx = vec![0.0; n];
    affine_backward(&x, &w, &coef, &mut dw, &mut db, Some(&mut dx));
    let flat: Vec<f64> = [x.clone(), w.data().to_vec(), b.clone()].concat();
    let analytic: Vec<f64> = [dx, dw.data().to_vec(), db].concat();
    grad_check(&flat, &analytic, STEP, |v| {
        let w = Tensor::from_vec(&[m, n], v[n..n + m * n].to_vec()).unwrap();
        dot(&affine(&v[..n], &w, &v[n + m * n..]).unwrap(), &coef)
    })
    .unwrap()
}

pub fn conv_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, l, k, w) = (2, 8, 3, 3);
    let x = uniform(&mut r, &[c, l], -1.0, 1.0);
    let ker = uniform(&mut r, &[k, c, w], -1.0, 1.0);
    let b = vec_uniform(&mut r, k, -1.0, 1.0);
    let coef = uniform(&mut r, &[k, l - w + 1], -1.0, 1.0);
    let mut dk = Tensor::zeros(&[k, c, w]);
    let mut db = vec![0.0; k];
    let mut dx = Tensor::zeros(&[c, l]);
    conv1d_backward(&x, &ker, &coef, &mut dk, &mut db, Some(&mut dx));
    let (nx, nk) = (c * l, k * c * w);
    let flat: Vec<f64> = [x.data(), ker.data(), &b].concat();
    let analytic: Vec<f64> = [dx.data(), dk.data(), &db].concat();
    grad_check(&flat, &analytic, STEP, |v| {
        let x = Tensor::from_vec(&[c, l], v[..nx].to_vec()).unwrap();
        let ker = Tensor::from_vec(&[k, c, w], v[nx..nx + nk].to_vec()).unwrap();
        dot(conv1d(&x, &ker, &v[nx + nk..]).unwrap().data(), coef.data())
    })
    .unwrap()
}

pub fn max_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 7], -1.0, 1.0);
    let coef = vec_uniform(&mut r, 3, -1.0, 1.0);
    let (_, arg) = max_over_time(&x).unwrap();
    let mut dx = Tensor::zeros(&[3, 7]);
    max_over_time_backward(&arg, &coef, &mut dx);
    grad_check(x.data(), dx.data(), STEP, |v| {
        let x = Tensor::from_vec(&[3, 7], v.to_vec()).unwrap();
        dot(&max_over_time(&x).unwrap().0, &coef)
    })
    .unwrap()
}

pub fn lstm_grad_error(seed: u64) -> f64 {
    let (ni, hs) = (3, 4);
    let p = random_lstm(seed, ni, hs);
    let mut r = rng(seed ^ 0xabc);
    let (x, h, c) = (
        vec_uniform(&mut r, ni, -1.0, 1.0),
        vec_uniform(&mut r, hs, -1.0, 1.0),
        vec_uniform(&mut r, hs, -1.0, 1.0),
    );
    let (a, bc) = (
        vec_uniform(&mut r, hs, -1.0, 1.0),
        vec_uniform(&mut r, hs, -1.0, 1.0),
    );
    let (_, _, cache) = lstm_step(&x, &h, &c, &p).unwrap();
    let mut g = p.zeros_like();
    let (dx, dh, dc) = lstm_step_backward(&p, &cache, &a, &bc, &mut g);
    let flat: Vec<f64> = [x.clone(), h.clone(), c.clone(), p.flatten()].concat();
    let analytic: Vec<f64> = [dx, dh, dc, g.flatten()].concat();
    grad_check(&flat, &analytic, STEP, |v| {
        let mut q = p.clone();
        q.assign_flat(&v[ni + 2 * hs..]);
        let (h2, c2, _) =
            lstm_step(&v[..ni], &v[ni..ni + hs], &v[ni + hs..ni + 2 * hs], &q).unwrap();
        dot(&h2, &a) + dot(&c2, &bc)
    })
    .unwrap()
}

pub fn highway_grad_error(seed: u64) -> f64 {
    let n = 5;
    let p = random_highway(seed, n);
    let mut r = rng(seed ^ 0xdef);
    let x = vec_uniform(&mut r, n, -1.0, 1.0);
    let coef = vec_uniform(&mut r, n, -1.0, 1.0);
    let (_, cache) = highway(&x, &p).unwrap();
    let mut g = p.zeros_like();
    let dx = highway_backward(&p, &cache, &coef, &mut g);
    let flat: Vec<f64> = [x.clone(), p.flatten()].concat();
    let analytic: Vec<f64> = [dx, g.flatten()].concat();
    grad_check(&flat, &analytic, STEP, |v| {
        let mut q = p.clone();
        q.assign_flat(&v[n..]);
        dot(&highway(&v[..n], &q).unwrap().0, &coef)
    })
    .unwrap()
}
