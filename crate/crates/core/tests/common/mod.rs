//! Helpers shared by the integration tests, including a plain-`Vec`
//! dense re-implementation of the encoder used as an oracle.

#![allow(dead_code)]

use docgat::autodiff::{ParameterRegistry, Tensor};
use docgat::embedding::{RawFeatures, StubProvider};
use docgat::encoder::EncoderConfig;
use docgat::io::synthetic::{gen_synthetic, SyntheticSpec};
use docgat::layout::NormalizedBox;
use docgat::model::{prepare_document, ModelConfig, PreparedDocument};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn model_config(
    layers: usize,
    dim: usize,
    heads: usize,
    top_k: usize,
    raw: usize,
) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::small(layers, dim, heads, top_k),
        text_dim: raw,
        visual_dim: raw,
        proj_bias: true,
    }
}

pub fn synthetic_prepared(cfg: &ModelConfig, spec: SyntheticSpec) -> Vec<PreparedDocument<f64>> {
    let provider = StubProvider {
        text_dim: cfg.text_dim,
        visual_dim: cfg.visual_dim,
        seed: 0,
    };
    gen_synthetic(&spec)
        .unwrap()
        .iter()
        .map(|d| prepare_document(d, &provider, cfg).unwrap())
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> NormalizedBox {
    let x0 = rng.gen_range(0..400);
    let y0 = rng.gen_range(0..450);
    NormalizedBox::from_corners(
        x0,
        y0,
        x0 + rng.gen_range(5..110),
        y0 + rng.gen_range(5..60),
    )
}

pub fn random_raw(rng: &mut ChaCha8Rng, n: usize, td: usize, vd: usize) -> RawFeatures<f64> {
    RawFeatures {
        text: random_matrix(rng, n, td, 1.0),
        visual: random_matrix(rng, n, vd, 1.0),
        visual_global: random_matrix(rng, 1, vd, 1.0),
    }
}

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor<f64>) -> Rows {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn param(reg: &ParameterRegistry<f64>, name: &str) -> Rows {
    let t = reg.get(name).unwrap_or_else(|| panic!("missing {name}"));
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        rows_of(t)
    }
}

fn matmul(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &mut Rows, b: &[f64]) {
    for row in a {
        for (x, y) in row.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(rows: &Rows, gamma: &[f64], beta: &[f64], eps: f64) -> Rows {
    rows.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(c, x)| gamma[c] * (x - mean) / (var + eps).sqrt() + beta[c])
                .collect()
        })
        .collect()
}

fn sinusoid(delta: i32, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for t in 0..dim / 2 {
        let angle = f64::from(delta) / 10000f64.powf(2.0 * t as f64 / dim as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Dense (all-pairs) reference for the encoder stack on given `S`, `V`.
pub fn dense_reference(
    reg: &ParameterRegistry<f64>,
    cfg: &EncoderConfig,
    boxes: &[NormalizedBox],
    s: &Rows,
    v: &Rows,
) -> Rows {
    let n = s.len();
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let ds = d / 2;
    let mut h = s.clone();
    for l in 0..cfg.layers {
        let p = |name: &str| param(reg, &format!("encoder.layer{l}.{name}"));
        // gate fusion
        let m: Rows = if l < cfg.residual_gate_layers {
            let joint: Rows = v
                .iter()
                .zip(&h)
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect();
            let mut pre = matmul(&joint, &p("gate.w1"));
            add_bias(&mut pre, &p("gate.b1")[0]);
            let act: Rows = pre
                .iter()
                .map(|r| r.iter().map(|&x| gelu(x)).collect())
                .collect();
            let mut logit = matmul(&act, &p("gate.w2"));
            add_bias(&mut logit, &p("gate.b2")[0]);
            (0..n)
                .map(|i| {
                    let z = 1.0 / (1.0 + (-logit[i][0]).exp());
                    (0..d).map(|c| (1.0 - z) * h[i][c] + z * v[i][c]).collect()
                })
                .collect()
        } else {
            h.clone()
        };
        let q = matmul(&m, &p("attn.wq"));
        let k = matmul(&m, &p("attn.wk"));
        let vv = matmul(&m, &p("attn.wv"));
        let corner_w: Vec<Rows> = ["tl", "tr", "br", "bl"]
            .iter()
            .map(|c| p(&format!("rpe.w_{c}")))
            .collect();
        let bias = |i: usize, j: usize| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for (corner, w) in corner_w.iter().enumerate() {
                let (xi, yi) = boxes[i].vertices[corner];
                let (xj, yj) = boxes[j].vertices[corner];
                let enc: Vec<f64> = sinusoid(xi - xj, ds)
                    .into_iter()
                    .chain(sinusoid(yi - yj, ds))
                    .collect();
                for (r, e) in enc.iter().enumerate() {
                    for c in 0..d {
                        out[c] += e * w[r][c];
                    }
                }
            }
            out
        };
        let bb: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if cfg.use_rpe {
                            bias(i, j)
                        } else {
                            vec![0.0; d]
                        }
                    })
                    .collect()
            })
            .collect();
        let mut joined = vec![vec![0.0; d]; n];
        for head in 0..cfg.heads {
            let sl = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let content: f64 =
                            sl.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt();
                        let rel: f64 = sl.clone().map(|c| q[i][c] * bb[i][j][c]).sum();
                        content + rel
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in sl.clone() {
                    joined[i][c] = (0..n).map(|j| e[j] / z * vv[j][c]).sum();
                }
            }
        }
        let mut hat = matmul(&joined, &p("attn.wo"));
        add_bias(&mut hat, &p("attn.bo")[0]);
        let mut inner = matmul(&hat, &p("ffn.w1"));
        add_bias(&mut inner, &p("ffn.b1")[0]);
        let inner: Rows = inner
            .iter()
            .map(|r| r.iter().map(|&x| gelu(x)).collect())
            .collect();
        let mut f = matmul(&inner, &p("ffn.w2"));
        add_bias(&mut f, &p("ffn.b2")[0]);
        let res: Rows = hat
            .iter()
            .zip(&f)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        h = layer_norm(&res, &p("ln.gamma")[0], &p("ln.beta")[0], cfg.ln_eps);
    }
    h
}

pub fn max_abs_rows(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
