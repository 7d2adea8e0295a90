//! Forward and backward rules for the layers the model is built from.
//!
//! Weights are row-major `(out, in)` slices. Backward functions accumulate
//! into the provided gradient buffers rather than overwrite them.

/// `y = W x + b`.
pub fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    debug_assert_eq!(w.len() % n_in.max(1), 0);
    let n_out = if n_in == 0 { b.map_or(0, <[f64]>::len) } else { w.len() / n_in };
    let mut y = match b {
        Some(b) => b.to_vec(),
        None => vec![0.0; n_out],
    };
    for (yo, row) in y.iter_mut().zip(w.chunks_exact(n_in.max(1))) {
        *yo += dot(row, x);
    }
    y
}

/// Accumulates `gW += gy xᵀ`, `gb += gy`, `gx += Wᵀ gy`.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
    gx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, g) in gy.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let row = &mut gw[o * n_in..(o + 1) * n_in];
        for (r, xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(gb) = gb {
        for (b, g) in gb.iter_mut().zip(gy) {
            *b += g;
        }
    }
    if let Some(gx) = gx {
        for (o, g) in gy.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            for (xi, wi) in gx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *xi += g * wi;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// Gradient through `y = tanh(z)` given the output `y`.
pub fn tanh_backward(y: &[f64], gy: &[f64]) -> Vec<f64> {
    y.iter().zip(gy).map(|(y, g)| g * (1.0 - y * y)).collect()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient through `s = sigmoid(z)` given the output `s`.
#[inline]
pub fn sigmoid_backward(s: f64, gs: f64) -> f64 {
    gs * s * (1.0 - s)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradient through `p = softmax(z)` given `p` and `∂L/∂p`.
pub fn softmax_backward(p: &[f64], gp: &[f64]) -> Vec<f64> {
    let inner = dot(p, gp);
    p.iter().zip(gp).map(|(p, g)| p * (g - inner)).collect()
}

/// `-log softmax(z)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

/// `∂CE/∂z = softmax(z) - onehot(target)`.
pub fn cross_entropy_backward(probs: &[f64], target: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[target] -= 1.0;
    g
}

/// Mean of the selected embedding rows.
pub fn mean_embedding(table: &[f64], dim: usize, ids: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for &id in ids {
        for (o, v) in out.iter_mut().zip(&table[id * dim..(id + 1) * dim]) {
            *o += v;
        }
    }
    let inv = 1.0 / ids.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub fn mean_embedding_backward(dim: usize, ids: &[usize], g_out: &[f64], g_table: &mut [f64]) {
    let inv = 1.0 / ids.len().max(1) as f64;
    for &id in ids {
        for (t, g) in g_table[id * dim..(id + 1) * dim].iter_mut().zip(g_out) {
            *t += g * inv;
        }
    }
}

/// Additive attention pooling over rows of `values`:
/// `s_i = w · tanh(query_proj + W2 v_i)`, `α = softmax(s)`, `out = Σ α_i v_i`.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub hidden: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl AttentionPool {
    pub fn forward(query_proj: &[f64], w2: &[f64], w: &[f64], values: &[f64], dim: usize) -> Self {
        Self::forward_with_offsets(query_proj, w2, w, values, dim, &[])
    }

    /// `offsets[i]` is added to row `i`'s score as a constant; missing
    /// entries count as zero. An offset of `ln k` makes one row stand in
    /// for `k` identical rows.
    pub fn forward_with_offsets(query_proj: &[f64], w2: &[f64], w: &[f64], values: &[f64], dim: usize, offsets: &[f64]) -> Self {
        let h = query_proj.len();
        let n = values.len() / dim.max(1);
        let mut hidden = Vec::with_capacity(n * h);
        let mut scores = Vec::with_capacity(n);
        for (i, v) in values.chunks_exact(dim).enumerate() {
            let mut z = affine(w2, Some(query_proj), v);
            tanh_in_place(&mut z);
            scores.push(dot(w, &z) + offsets.get(i).copied().unwrap_or(0.0));
            hidden.extend(z);
        }
        let alpha = if n == 0 { Vec::new() } else { softmax(&scores) };
        let mut pooled = vec![0.0; dim];
        for (a, v) in alpha.iter().zip(values.chunks_exact(dim)) {
            for (p, x) in pooled.iter_mut().zip(v) {
                *p += a * x;
            }
        }
        Self { hidden, alpha, pooled }
    }

    /// Returns `∂L/∂query_proj`, accumulating into `gw2`, `gw` and `g_values`.
    pub fn backward(
        &self,
        w2: &[f64],
        w: &[f64],
        values: &[f64],
        dim: usize,
        g_pooled: &[f64],
        gw2: &mut [f64],
        gw: &mut [f64],
        g_values: &mut [f64],
    ) -> Vec<f64> {
        let h = w.len();
        let mut g_query = vec![0.0; h];
        if self.alpha.is_empty() {
            return g_query;
        }
        let g_alpha: Vec<f64> = values.chunks_exact(dim).map(|v| dot(g_pooled, v)).collect();
        for ((gv, a), _) in g_values.chunks_exact_mut(dim).zip(&self.alpha).zip(&g_alpha) {
            for (x, g) in gv.iter_mut().zip(g_pooled) {
                *x += a * g;
            }
        }
        let g_scores = softmax_backward(&self.alpha, &g_alpha);
        for (i, gs) in g_scores.iter().enumerate() {
            let z = &self.hidden[i * h..(i + 1) * h];
            for (gwk, zk) in gw.iter_mut().zip(z) {
                *gwk += gs * zk;
            }
            let g_pre: Vec<f64> = z.iter().zip(w).map(|(zk, wk)| gs * wk * (1.0 - zk * zk)).collect();
            for (q, g) in g_query.iter_mut().zip(&g_pre) {
                *q += g;
            }
            let v = &values[i * dim..(i + 1) * dim];
            affine_backward(w2, v, &g_pre, gw2, None, Some(&mut g_values[i * dim..(i + 1) * dim]));
        }
        g_query
    }
}
