//! Scalar reference implementation of the transference forward pass, built
//! from nested loops over `Vec<Vec<f64>>` with no shared code from the crate.

use transference::model::ModelConfig;
use transference::tensor::NamedTensors;

pub type Mat = Vec<Vec<f64>>;

pub fn param_mat(p: &NamedTensors<f64>, name: &str) -> Mat {
    let t = p.get(name).unwrap();
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
        .collect()
}

pub fn param_vec(p: &NamedTensors<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn cols(a: &Mat, from: usize, to: usize) -> Mat {
    a.iter().map(|r| r[from..to].to_vec()).collect()
}

pub fn rows(a: &Mat, from: usize, to: usize) -> Mat {
    a[from..to].to_vec()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

/// One head: softmax(QKᵀ/√d_k)V with `visible(i, j)` masking.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, visible: &dyn Fn(usize, usize) -> bool) -> Mat {
    let dk = q[0].len() as f64;
    let mut out = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let scores: Vec<Option<f64>> = k
            .iter()
            .enumerate()
            .map(|(j, kj)| {
                visible(i, j)
                    .then(|| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
            })
            .collect();
        let max = scores
            .iter()
            .flatten()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores
            .iter()
            .map(|s| s.map_or(0.0, |s| (s - max).exp()))
            .collect();
        let z: f64 = exps.iter().sum();
        let mut row = vec![0.0; v[0].len()];
        for (j, e) in exps.iter().enumerate() {
            for (d, r) in row.iter_mut().enumerate() {
                *r += e / z * v[j][d];
            }
        }
        out.push(row);
    }
    out
}

/// Multi-head: per-head projections by column blocks, concat, Wᴼ.
pub fn multi_head(
    q_in: &Mat,
    kv_in: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    wo: &Mat,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let d = wq[0].len();
    let dk = d / heads;
    let mut concat = vec![Vec::new(); q_in.len()];
    for h in 0..heads {
        let q = matmul(q_in, &cols(wq, h * dk, (h + 1) * dk));
        let k = matmul(kv_in, &cols(wk, h * dk, (h + 1) * dk));
        let v = matmul(kv_in, &cols(wv, h * dk, (h + 1) * dk));
        for (row, head_row) in concat.iter_mut().zip(attention(&q, &k, &v, visible)) {
            row.extend(head_row);
        }
    }
    matmul(&concat, wo)
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * gain[i] + bias[i])
                .collect()
        })
        .collect()
}

pub struct Oracle<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a NamedTensors<f64>,
}

const EPS: f64 = 1e-6;

impl Oracle<'_> {
    fn norm(&self, x: &Mat, sub: &Mat, prefix: &str) -> Mat {
        layer_norm(
            &add(x, sub),
            &param_vec(self.p, &format!("{prefix}/gain")),
            &param_vec(self.p, &format!("{prefix}/bias")),
            EPS,
        )
    }

    fn mha(
        &self,
        prefix: &str,
        q_in: &Mat,
        kv_in: &Mat,
        visible: &dyn Fn(usize, usize) -> bool,
    ) -> Mat {
        let w = |n: &str| param_mat(self.p, &format!("{prefix}/{n}"));
        multi_head(
            q_in,
            kv_in,
            &w("w_q"),
            &w("w_k"),
            &w("w_v"),
            &w("w_o"),
            self.cfg.heads,
            visible,
        )
    }

    fn ffn(&self, prefix: &str, x: &Mat) -> Mat {
        let h = add_bias(
            &matmul(x, &param_mat(self.p, &format!("{prefix}/w_1"))),
            &param_vec(self.p, &format!("{prefix}/b_1")),
        );
        let h: Mat = h
            .iter()
            .map(|r| r.iter().map(|v| v.max(0.0)).collect())
            .collect();
        add_bias(
            &matmul(&h, &param_mat(self.p, &format!("{prefix}/w_2"))),
            &param_vec(self.p, &format!("{prefix}/b_2")),
        )
    }

    pub fn embed(&self, table: &str, ids: &[usize], start: usize) -> Mat {
        let t = param_mat(self.p, table);
        let d = self.cfg.d_model;
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|i| {
                        let angle =
                            (start + pos) as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                        let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                        t[id][i] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    pub fn self_stack(&self, stack: &str, layers: usize, mut x: Mat) -> Mat {
        for l in 0..layers {
            let pre = format!("{stack}/layer_{l}");
            let a = self.mha(&format!("{pre}/self_attn"), &x, &x, &|_, _| true);
            x = self.norm(&x, &a, &format!("{pre}/self_attn_norm"));
            let f = self.ffn(&format!("{pre}/ffn"), &x);
            x = self.norm(&x, &f, &format!("{pre}/ffn_norm"));
        }
        x
    }

    pub fn two_source_stack(
        &self,
        stack: &str,
        layers: usize,
        mut x: Mat,
        memory: &Mat,
        causal: bool,
    ) -> Mat {
        for l in 0..layers {
            let pre = format!("{stack}/layer_{l}");
            let a = self.mha(&format!("{pre}/self_attn"), &x, &x, &|i, j| {
                !causal || j <= i
            });
            x = self.norm(&x, &a, &format!("{pre}/self_attn_norm"));
            let c = self.mha(&format!("{pre}/cross_attn"), &x, memory, &|_, _| true);
            x = self.norm(&x, &c, &format!("{pre}/cross_attn_norm"));
            let f = self.ffn(&format!("{pre}/ffn"), &x);
            x = self.norm(&x, &f, &format!("{pre}/ffn_norm"));
        }
        x
    }

    /// (enc1, enc2, enc12) for one unpadded sentence.
    pub fn encode(&self, words: &[usize], subwords: &[usize]) -> (Mat, Mat, Mat) {
        let c = self.cfg;
        let enc1 = self.self_stack(
            "enc_word",
            c.n_layers_fw,
            self.embed("embed/word", words, 0),
        );
        let enc2 = self.self_stack(
            "enc_bpe",
            c.n_layers_fs,
            self.embed("embed/bpe", subwords, 0),
        );
        let enc12 = self.two_source_stack("enc_cross", c.n_layers_es, enc2.clone(), &enc1, false);
        (enc1, enc2, enc12)
    }

    /// Decoder logits for one sentence; `prefix` starts with BOS.
    pub fn logits(&self, words: &[usize], subwords: &[usize], prefix: &[usize]) -> Mat {
        let (_, _, enc12) = self.encode(words, subwords);
        let x = self.embed("embed/bpe", prefix, 0);
        let x = self.two_source_stack("dec", self.cfg.n_layers_dec, x, &enc12, true);
        add_bias(
            &matmul(&x, &param_mat(self.p, "out/weight")),
            &param_vec(self.p, "out/bias"),
        )
    }
}
