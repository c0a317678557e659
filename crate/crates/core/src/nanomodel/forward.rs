use super::kernels::{gelu, gemm, layernorm, linear, softmax_inplace};
use super::{Model, ModelInput, Slot};
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub out: Vec<f64>,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

impl LnCache {
    fn new(rows: usize, d: usize) -> Self {
        LnCache {
            out: vec![0.0; rows * d],
            mean: vec![0.0; rows],
            rstd: vec![0.0; rows],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub ln1: LnCache,
    pub qkv: Vec<f64>,
    /// `heads x len x len`, zero above the diagonal.
    pub att: Vec<f64>,
    pub y: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub ln2: LnCache,
    pub fc_pre: Vec<f64>,
    pub fc_act: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) len: usize,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) x_final: Vec<f64>,
    pub(crate) lnf: LnCache,
}

impl ForwardCache {
    /// Attention probabilities of one head, `len x len` row-major.
    pub fn attention(&self, layer: usize, head: usize) -> &[f64] {
        let l = self.len;
        &self.layers[layer].att[head * l * l..(head + 1) * l * l]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `len x vocab`; row `t` predicts the token after slot `t`.
    pub logits: Vec<f64>,
    /// Last-block residual stream at each visual slot, L2-normalised, in slot order.
    pub visual_embeddings: Vec<Vec<f64>>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct LastOutput {
    pub last_logits: Vec<f64>,
    pub visual_embeddings: Vec<Vec<f64>>,
}

impl Model {
    fn trunk(&self, input: &ModelInput) -> Result<ForwardCache> {
        self.check_input(input)?;
        let c = &self.config;
        let p = &self.params;
        let lay = &self.layout;
        let (n, d, h, hd) = (input.len(), c.embed_dim, c.hidden_dim(), c.head_dim());
        let pd = c.patch_dim();

        let mut x = vec![0.0; n * d];
        let vis = input.visual_slots();
        let mut pmat = Vec::with_capacity(vis.len() * pd);
        for &t in &vis {
            if let Slot::Patch(k) = input.slots[t] {
                pmat.extend_from_slice(&input.patches[k * pd..(k + 1) * pd]);
            }
        }
        let mut pemb = vec![0.0; vis.len() * d];
        linear(
            &mut pemb,
            &pmat,
            &p[lay.patch_w..lay.patch_w + pd * d],
            &p[lay.patch_b..lay.patch_b + d],
            vis.len(),
            pd,
            d,
        );
        let mut next_vis = 0;
        for (t, (&slot, &pos)) in input.slots.iter().zip(&input.positions).enumerate() {
            let xt = &mut x[t * d..(t + 1) * d];
            match slot {
                Slot::Token(id) => {
                    let id = id as usize;
                    xt.copy_from_slice(&p[lay.tok_emb + id * d..lay.tok_emb + (id + 1) * d]);
                }
                Slot::Patch(_) => {
                    xt.copy_from_slice(&pemb[next_vis * d..(next_vis + 1) * d]);
                    next_vis += 1;
                }
            }
            let pe = &p[lay.pos_emb + pos * d..lay.pos_emb + (pos + 1) * d];
            for (a, b) in xt.iter_mut().zip(pe) {
                *a += b;
            }
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in &lay.layers {
            let mut ln1 = LnCache::new(n, d);
            layernorm(&mut ln1.out, &mut ln1.mean, &mut ln1.rstd, &x, &p[l.ln1_g..l.ln1_g + d], &p[l.ln1_b..l.ln1_b + d], d);
            let mut qkv = vec![0.0; n * 3 * d];
            linear(&mut qkv, &ln1.out, &p[l.w_qkv..l.w_qkv + d * 3 * d], &p[l.b_qkv..l.b_qkv + 3 * d], n, d, 3 * d);

            let mut att = vec![0.0; c.n_heads * n * n];
            let mut y = vec![0.0; n * d];
            for head in 0..c.n_heads {
                let hh = head * hd;
                let a = &mut att[head * n * n..(head + 1) * n * n];
                // scores = Q_h K_h^T, causal rows softmaxed in place
                gemm(n, hd, n, &qkv[hh..], 3 * d, 1, &qkv[d + hh..], 1, 3 * d, 0.0, a, n);
                for t in 0..n {
                    let row = &mut a[t * n..(t + 1) * n];
                    for r in row[..=t].iter_mut() {
                        *r *= scale;
                    }
                    softmax_inplace(&mut row[..=t]);
                    row[t + 1..].fill(0.0);
                }
                gemm(n, n, hd, a, n, 1, &qkv[2 * d + hh..], 3 * d, 1, 0.0, &mut y[hh..], d);
            }
            let mut x_mid = vec![0.0; n * d];
            linear(&mut x_mid, &y, &p[l.w_o..l.w_o + d * d], &p[l.b_o..l.b_o + d], n, d, d);
            for (m, xi) in x_mid.iter_mut().zip(&x) {
                *m += xi;
            }

            let mut ln2 = LnCache::new(n, d);
            layernorm(&mut ln2.out, &mut ln2.mean, &mut ln2.rstd, &x_mid, &p[l.ln2_g..l.ln2_g + d], &p[l.ln2_b..l.ln2_b + d], d);
            let mut fc_pre = vec![0.0; n * h];
            linear(&mut fc_pre, &ln2.out, &p[l.w_fc..l.w_fc + d * h], &p[l.b_fc..l.b_fc + h], n, d, h);
            let fc_act: Vec<f64> = fc_pre.iter().map(|&v| gelu(v)).collect();
            let mut x_out = vec![0.0; n * d];
            linear(&mut x_out, &fc_act, &p[l.w_proj..l.w_proj + h * d], &p[l.b_proj..l.b_proj + d], n, h, d);
            for (o, m) in x_out.iter_mut().zip(&x_mid) {
                *o += m;
            }

            let x_in = std::mem::replace(&mut x, x_out);
            layers.push(LayerCache {
                x_in,
                ln1,
                qkv,
                att,
                y,
                x_mid,
                ln2,
                fc_pre,
                fc_act,
            });
        }

        let mut lnf = LnCache::new(n, d);
        layernorm(
            &mut lnf.out,
            &mut lnf.mean,
            &mut lnf.rstd,
            &x,
            &p[lay.lnf_g..lay.lnf_g + d],
            &p[lay.lnf_b..lay.lnf_b + d],
            d,
        );
        Ok(ForwardCache {
            len: n,
            layers,
            x_final: x,
            lnf,
        })
    }

    fn visual_embeddings(&self, input: &ModelInput, cache: &ForwardCache) -> Vec<Vec<f64>> {
        let d = self.config.embed_dim;
        input
            .visual_slots()
            .into_iter()
            .map(|t| {
                let v = &cache.x_final[t * d..(t + 1) * d];
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    v.to_vec()
                }
            })
            .collect()
    }

    fn head_rows(&self, lnf_out: &[f64], rows: usize) -> Vec<f64> {
        let (d, v) = (self.config.embed_dim, self.config.vocab_size);
        let lay = &self.layout;
        let mut logits = vec![0.0; rows * v];
        linear(
            &mut logits,
            lnf_out,
            &self.params[lay.head_w..lay.head_w + d * v],
            &self.params[lay.head_b..lay.head_b + v],
            rows,
            d,
            v,
        );
        logits
    }

    /// Logits at every slot plus the cache needed by [`Model::backward`].
    pub fn forward(&self, input: &ModelInput) -> Result<ForwardOutput> {
        let cache = self.trunk(input)?;
        let logits = self.head_rows(&cache.lnf.out, cache.len);
        let visual_embeddings = self.visual_embeddings(input, &cache);
        Ok(ForwardOutput {
            logits,
            visual_embeddings,
            cache,
        })
    }

    /// Logits at the final slot only.
    pub fn forward_last(&self, input: &ModelInput) -> Result<LastOutput> {
        let cache = self.trunk(input)?;
        let d = self.config.embed_dim;
        let last = &cache.lnf.out[(cache.len - 1) * d..cache.len * d];
        let last_logits = self.head_rows(last, 1);
        let visual_embeddings = self.visual_embeddings(input, &cache);
        Ok(LastOutput {
            last_logits,
            visual_embeddings,
        })
    }
}
