use super::forward::ForwardCache;
use super::kernels::{axpy, dot, gelu_grad, gemm, layernorm_backward, linear_backward};
use super::{Model, ModelInput, Slot};
use crate::error::{Error, Result};

/// Flat gradient vector aligned with `Model::params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients(vec![0.0; n])
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            *g *= s;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        axpy(1.0, &other.0, &mut self.0);
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

/// Weighted next-token cross-entropy. `weights[p]` weighs target `tokens[p]`,
/// which is predicted by logits row `p - 1`. Returns the loss and `dloss/dlogits`.
pub fn masked_cross_entropy(logits: &[f64], vocab: usize, tokens: &[u32], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if tokens.len() != weights.len() {
        return Err(Error::data("tokens and weights differ in length"));
    }
    let rows = logits.len() / vocab;
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for p in 1..tokens.len() {
        let w = weights[p];
        if w == 0.0 {
            continue;
        }
        if p > rows {
            return Err(Error::data(format!("no logits row for weighted target at {p}")));
        }
        let target = tokens[p] as usize;
        let row = &logits[(p - 1) * vocab..p * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        loss += w * (sum.ln() + max - row[target]);
        let g = &mut dlogits[(p - 1) * vocab..p * vocab];
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = w * (x - max).exp() / sum;
        }
        g[target] -= w;
    }
    Ok((loss, dlogits))
}

impl Model {
    /// Accumulates `dL/dparams` into `grads` given `dL/dlogits` for the forward pass in `cache`.
    pub fn backward(&self, input: &ModelInput, cache: &ForwardCache, dlogits: &[f64], grads: &mut Gradients) -> Result<()> {
        let c = &self.config;
        let (n, d, h, hd, v) = (cache.len, c.embed_dim, c.hidden_dim(), c.head_dim(), c.vocab_size);
        if dlogits.len() != n * v {
            return Err(Error::data(format!("dlogits has {} entries, expected {}", dlogits.len(), n * v)));
        }
        if grads.0.len() != self.params.len() {
            return Err(Error::data("gradient buffer does not match parameter count"));
        }
        let p = &self.params;
        let lay = &self.layout;
        let g = &mut grads.0;

        let mut dln = vec![0.0; n * d];
        {
            let (gw, gb) = split_pair(g, lay.head_w, d * v, lay.head_b, v);
            linear_backward(Some(&mut dln), gw, gb, dlogits, &cache.lnf.out, &p[lay.head_w..lay.head_w + d * v], n, d, v);
        }
        let mut dx = vec![0.0; n * d];
        {
            let (gg, gb) = split_pair(g, lay.lnf_g, d, lay.lnf_b, d);
            layernorm_backward(&mut dx, gg, gb, &dln, &cache.x_final, &p[lay.lnf_g..lay.lnf_g + d], &cache.lnf.mean, &cache.lnf.rstd, d);
        }

        let scale = 1.0 / (hd as f64).sqrt();
        for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
            let mut dx_mid = dx.clone();
            let mut dact = vec![0.0; n * h];
            {
                let (gw, gb) = split_pair(g, l.w_proj, h * d, l.b_proj, d);
                linear_backward(Some(&mut dact), gw, gb, &dx, &lc.fc_act, &p[l.w_proj..l.w_proj + h * d], n, h, d);
            }
            for (da, &pre) in dact.iter_mut().zip(&lc.fc_pre) {
                *da *= gelu_grad(pre);
            }
            let mut dln2 = vec![0.0; n * d];
            {
                let (gw, gb) = split_pair(g, l.w_fc, d * h, l.b_fc, h);
                linear_backward(Some(&mut dln2), gw, gb, &dact, &lc.ln2.out, &p[l.w_fc..l.w_fc + d * h], n, d, h);
            }
            {
                let (gg, gb) = split_pair(g, l.ln2_g, d, l.ln2_b, d);
                layernorm_backward(&mut dx_mid, gg, gb, &dln2, &lc.x_mid, &p[l.ln2_g..l.ln2_g + d], &lc.ln2.mean, &lc.ln2.rstd, d);
            }

            // Attention: x_mid = x_in + o(attn(ln1(x_in)))
            let mut dx_in = dx_mid.clone();
            let mut dy = vec![0.0; n * d];
            {
                let (gw, gb) = split_pair(g, l.w_o, d * d, l.b_o, d);
                linear_backward(Some(&mut dy), gw, gb, &dx_mid, &lc.y, &p[l.w_o..l.w_o + d * d], n, d, d);
            }
            let mut dqkv = vec![0.0; n * 3 * d];
            let mut da = vec![0.0; n * n];
            for head in 0..c.n_heads {
                let a = &lc.att[head * n * n..(head + 1) * n * n];
                let hh = head * hd;
                // dA = dY_h V_h^T, dV_h += A^T dY_h
                gemm(n, hd, n, &dy[hh..], d, 1, &lc.qkv[2 * d + hh..], 1, 3 * d, 0.0, &mut da, n);
                gemm(n, n, hd, a, 1, n, &dy[hh..], d, 1, 1.0, &mut dqkv[2 * d + hh..], 3 * d);
                // softmax backward, folded with the score scale
                for t in 0..n {
                    let arow = &a[t * n..t * n + t + 1];
                    let drow = &mut da[t * n..(t + 1) * n];
                    let weighted = dot(arow, &drow[..=t]);
                    for s in 0..=t {
                        drow[s] = arow[s] * (drow[s] - weighted) * scale;
                    }
                    drow[t + 1..].fill(0.0);
                }
                // dQ_h += dS K_h, dK_h += dS^T Q_h
                gemm(n, n, hd, &da, n, 1, &lc.qkv[d + hh..], 3 * d, 1, 1.0, &mut dqkv[hh..], 3 * d);
                gemm(n, n, hd, &da, 1, n, &lc.qkv[hh..], 3 * d, 1, 1.0, &mut dqkv[d + hh..], 3 * d);
            }
            let mut dln1 = vec![0.0; n * d];
            {
                let (gw, gb) = split_pair(g, l.w_qkv, d * 3 * d, l.b_qkv, 3 * d);
                linear_backward(Some(&mut dln1), gw, gb, &dqkv, &lc.ln1.out, &p[l.w_qkv..l.w_qkv + d * 3 * d], n, d, 3 * d);
            }
            {
                let (gg, gb) = split_pair(g, l.ln1_g, d, l.ln1_b, d);
                layernorm_backward(&mut dx_in, gg, gb, &dln1, &lc.x_in, &p[l.ln1_g..l.ln1_g + d], &lc.ln1.mean, &lc.ln1.rstd, d);
            }
            dx = dx_in;
        }

        let pd = c.patch_dim();
        let mut pmat = Vec::new();
        let mut dvis = Vec::new();
        for (t, (&slot, &pos)) in input.slots.iter().zip(&input.positions).enumerate() {
            let dxt = &dx[t * d..(t + 1) * d];
            axpy(1.0, dxt, &mut g[lay.pos_emb + pos * d..lay.pos_emb + (pos + 1) * d]);
            match slot {
                Slot::Token(id) => {
                    let id = id as usize;
                    axpy(1.0, dxt, &mut g[lay.tok_emb + id * d..lay.tok_emb + (id + 1) * d]);
                }
                Slot::Patch(k) => {
                    pmat.extend_from_slice(&input.patches[k * pd..(k + 1) * pd]);
                    dvis.extend_from_slice(dxt);
                }
            }
        }
        let rows = dvis.len() / d;
        let (gw, gb) = split_pair(g, lay.patch_w, pd * d, lay.patch_b, d);
        linear_backward(None, gw, gb, &dvis, &pmat, &[], rows, pd, d);
        Ok(())
    }

    /// Loss and gradient of the weighted next-token cross-entropy over `input`.
    pub fn loss_and_gradient(&self, input: &ModelInput, tokens: &[u32], weights: &[f64]) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros(self.params.len());
        let loss = self.accumulate_gradient(input, tokens, weights, &mut grads)?;
        Ok((loss, grads))
    }

    pub fn accumulate_gradient(&self, input: &ModelInput, tokens: &[u32], weights: &[f64], grads: &mut Gradients) -> Result<f64> {
        let out = self.forward(input)?;
        let n = input.len();
        let (loss, dlogits) = masked_cross_entropy(&out.logits, self.config.vocab_size, &tokens[..n.min(tokens.len())], &weights[..n.min(weights.len())])?;
        self.backward(input, &out.cache, &dlogits, grads)?;
        Ok(loss)
    }
}

/// Two disjoint mutable sub-slices of the gradient buffer; `a` must precede `b`.
fn split_pair(g: &mut [f64], a: usize, na: usize, b: usize, nb: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + na <= b);
    let (left, right) = g.split_at_mut(b);
    (&mut left[a..a + na], &mut right[..nb])
}
