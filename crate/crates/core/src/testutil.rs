//! Plain nested-`Vec` reference implementations used as test oracles.

use crate::attention::{DecoderStack, EncoderStack, MultiHeadParams};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn linear(store: &ParamStore, lin: &Linear, x: &Mat) -> Mat {
    let mut y = matmul(x, &mat(store.get(&lin.weight).unwrap()));
    if let Some(b) = &lin.bias {
        let b = store.get(b).unwrap().values();
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum())
                .collect()
        })
        .collect()
}

pub fn mha(store: &ParamStore, p: &MultiHeadParams, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let heads: Vec<Mat> = p
        .heads
        .iter()
        .map(|h| {
            attention(
                &linear(store, &h.query, q),
                &linear(store, &h.key, k),
                &linear(store, &h.value, v),
            )
        })
        .collect();
    let joined: Mat = (0..q.len())
        .map(|i| heads.iter().flat_map(|h| h[i].iter().copied()).collect())
        .collect();
    linear(store, &p.output, &joined)
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let g = store.get(&ln.gamma).unwrap().values();
    let b = store.get(&ln.beta).unwrap().values();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let s = (var + ln.eps).sqrt();
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(v, (gg, bb))| (v - mu) / s * gg + bb)
                .collect()
        })
        .collect()
}

fn mlp(store: &ParamStore, hidden: &Linear, out: &Linear, x: &Mat) -> Mat {
    let h: Mat = linear(store, hidden, x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    linear(store, out, &h)
}

pub fn encoder(store: &ParamStore, stack: &EncoderStack, x: &Mat) -> Mat {
    let mut h = x.clone();
    for l in &stack.layers {
        let a = mha(store, &l.attn, &h, &h, &h);
        h = layer_norm(store, &l.attn_norm, &add(&h, &a));
        let m = mlp(store, &l.mlp.hidden, &l.mlp.out, &h);
        h = layer_norm(store, &l.mlp_norm, &add(&h, &m));
    }
    h
}

pub fn decoder(store: &ParamStore, stack: &DecoderStack, q: &Mat, memory: &Mat) -> Mat {
    let mut h = q.clone();
    for l in &stack.layers {
        if let Some((attn, norm)) = &l.self_attn {
            let a = mha(store, attn, &h, &h, &h);
            h = layer_norm(store, norm, &add(&h, &a));
        }
        let c = mha(store, &l.cross_attn, &h, memory, memory);
        h = layer_norm(store, &l.cross_norm, &add(&h, &c));
        let m = mlp(store, &l.mlp.hidden, &l.mlp.out, &h);
        h = layer_norm(store, &l.mlp_norm, &add(&h, &m));
    }
    h
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Every permutation of `0..n`, by Heap's algorithm.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            if i + 1 < k {
                let j = if k % 2 == 0 { i } else { 0 };
                a.swap(j, k - 1);
            }
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}
