#![allow(dead_code)]
//! Oracle builders shared by the integration test targets.

use sambay::gradcheck::{check, random_tensor};
use sambay::layers::*;
use sambay::{Graph, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;

pub fn scaled(shape: &[usize], seed: u64, s: f64) -> Tensor<f64> {
    random_tensor(shape, seed).scale(s)
}

pub fn ssm_tensors(dm: usize, seed: u64) -> (SsmDims, Vec<Tensor<f64>>) {
    let d = SsmDims::standard(dm);
    let di = d.d_inner;
    let a_log = Tensor::from_fn(vec![di, d.d_state], |i| ((i % d.d_state) as f64 + 1.0).ln());
    let dt_bias = Tensor::from_fn(vec![di], |i| {
        let dt: f64 = 0.001 * (100f64).powf(i as f64 / di as f64);
        dt + (-(-dt).exp_m1()).ln()
    });
    let ts = vec![
        scaled(&[2 * di, dm], seed, 0.5),
        scaled(&[di, d.d_conv], seed + 1, 0.5),
        scaled(&[di], seed + 2, 0.1),
        scaled(&[d.dt_rank + 2 * d.d_state, di], seed + 3, 0.3),
        scaled(&[di, d.dt_rank], seed + 4, 0.5),
        dt_bias,
        a_log,
        Tensor::ones(vec![di]),
        scaled(&[dm, di], seed + 5, 0.3),
    ];
    (d, ts)
}

pub fn ssm_params<P: Copy>(d: SsmDims, v: &[P]) -> SsmParams<P> {
    SsmParams {
        in_proj: v[0],
        conv_kernel: v[1],
        conv_bias: v[2],
        x_proj: v[3],
        dt_proj: v[4],
        dt_bias: v[5],
        a_log: v[6],
        d_skip: v[7],
        out_proj: v[8],
        dims: d,
    }
}

pub fn geom(h: usize, kv: usize, hd: usize, window: Option<usize>, rope: bool) -> AttnGeometry {
    AttnGeometry {
        n_heads: h,
        n_kv_heads: kv,
        head_dim: hd,
        window,
        logit_scale: 1.0 / (hd as f64).sqrt(),
        rope_base: rope.then_some(10000.0),
    }
}

pub fn attn_tensors(dm: usize, g: &AttnGeometry, seed: u64) -> Vec<Tensor<f64>> {
    vec![
        scaled(&[g.q_width(), dm], seed, 0.5),
        scaled(&[g.kv_width(), dm], seed + 1, 0.5),
        scaled(&[g.kv_width(), dm], seed + 2, 0.5),
        scaled(&[dm, g.q_width()], seed + 3, 0.5),
    ]
}

pub fn attn_params<P: Copy>(g: AttnGeometry, v: &[P], cross: bool) -> AttnParams<P> {
    AttnParams {
        q_proj: v[0],
        k_proj: (!cross).then(|| v[1]),
        v_proj: (!cross).then(|| v[2]),
        o_proj: v[3],
        geom: g,
    }
}

pub fn diff_tensors(dm: usize, g: &AttnGeometry, seed: u64) -> Vec<Tensor<f64>> {
    let mut v = attn_tensors(dm, g, seed);
    for i in 0..4 {
        v.push(scaled(&[g.head_dim], seed + 10 + i, 0.3));
    }
    v.push(random_tensor(&[g.q_width()], seed + 20).map(|x| 1.0 + 0.3 * x));
    v
}

pub fn diff_params<P: Copy>(g: AttnGeometry, v: &[P], l: usize, cross: bool) -> DiffAttnParams<P> {
    DiffAttnParams {
        attn: attn_params(g, v, cross),
        lambda_q1: v[4],
        lambda_k1: v[5],
        lambda_q2: v[6],
        lambda_k2: v[7],
        norm_weight: v[8],
        lambda_init: lambda_init(l),
        norm_eps: 1e-6,
    }
}

pub fn refs(v: &[Tensor<f64>]) -> Vec<&Tensor<f64>> {
    v.iter().collect()
}

pub fn assert_grad(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> sambay::Result<Var>) {
    let rep = check(inputs, 1e-5, build).unwrap();
    assert!(
        rep.worst() < GRAD_TOL,
        "{name}: relative gradient errors {:?}",
        rep.rel_errors
    );
}

/// Max-abs gap between Differential Attention with zeroed λ vectors and
/// λ_init = 0 and plain attention over the first query/key groups, plus the
/// gap of the pre-projection outputs.
pub fn da_reduction_gap() -> (f64, f64) {
    let (n, dm, h, hd) = (7, 8, 2, 4);
    let gm = geom(h, 1, hd, None, false);
    let x = random_tensor(&[n, dm], 121);
    let mut dt = diff_tensors(dm, &gm, 122);
    // zero the second query/key groups
    let (qh, kh) = (gm.q_width() / 2, gm.kv_width() / 2);
    for (t, half) in [(0usize, qh), (1, kh)] {
        let c = dt[t].cols();
        for r in 0..dt[t].rows() {
            if r >= half {
                for v in &mut dt[t].data_mut()[r * c..(r + 1) * c] {
                    *v = 0.0;
                }
            }
        }
    }
    // λ = exp(0) − exp(0) + λ_init with λ_init = 0
    for t in &mut dt[4..8] {
        *t = Tensor::zeros(vec![hd]);
    }
    let mut p = diff_params(gm, &refs(&dt), 1, false);
    p.lambda_init = 0.0;
    p.attn.geom.logit_scale = 1.0 / ((hd / 2) as f64).sqrt();
    let y = diff_attention_forward(&x, &p, AttnMode::Full, None).unwrap();

    // plain attention over the first groups only (head_dim hd/2 for q,k)
    let q1 = sambay::tensor::kernels::linear(&x, &dt[0].slice_rows(0, qh)).unwrap();
    let k1 = sambay::tensor::kernels::linear(&x, &dt[1].slice_rows(0, kh)).unwrap();
    let v = sambay::tensor::kernels::linear(&x, &dt[2]).unwrap();
    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (g.input(q1), g.input(k1), g.input(v));
    let dims = sambay::tensor::kernels::AttnDims {
        seqs: 1,
        n_q: n,
        n_k: n,
        q_heads: h,
        kv_heads: 1,
        dk: hd / 2,
        dv: hd,
        scale: p.attn.geom.logit_scale,
        window: None,
        q_offset: 0,
    };
    let a = g.attention(qv, kv, vv, dims).unwrap();
    let nw = g.input(dt[8].clone());
    let normed = g.rmsnorm_grouped(a, nw, hd, 1e-6).unwrap();
    let expect = sambay::tensor::kernels::linear(g.value(normed), &dt[3]).unwrap();
    (y.out.max_abs_diff(&expect), y.pre_o.max_abs_diff(g.value(normed)))
}
