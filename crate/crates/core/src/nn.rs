//! Layers shared by the encoder, decoder and ICCM, written against [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::seed::derive_rng;
use crate::tensor::{BatchStats, Graph, Mask, Params, Scalar, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

/// Parameter factory: each tensor is drawn from a stream keyed by its name,
/// so adding or removing modules never perturbs the others.
pub struct Init<T: Scalar> {
    seed: u64,
    pub params: Params<T>,
    pub buffers: Params<T>,
}

impl<T: Scalar> Init<T> {
    pub fn new(seed: u64) -> Self {
        Init { seed, params: Params::new(), buffers: Params::new() }
    }

    fn draw(&self, name: &str, n: usize, dist: impl Distribution<f64>) -> Vec<T> {
        let mut rng = derive_rng(self.seed, name);
        (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
    }

    fn put(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) {
        self.params.insert(name, Tensor::new(shape, data).expect("init shapes are positive"));
    }

    /// Xavier-uniform `[fan_in, fan_out]` weight plus zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let name = format!("{prefix}.weight");
        let w = self.draw(&name, fan_in * fan_out, Uniform::new_inclusive(-a, a).expect("finite bound"));
        self.put(name, vec![fan_in, fan_out], w);
        if bias {
            self.zeros(&format!("{prefix}.bias"), &[fan_out]);
        }
    }

    /// Kaiming-normal `[out, in, k, k]` kernel.
    pub fn conv(&mut self, prefix: &str, out_ch: usize, in_ch: usize, k: usize, bias: bool) {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let name = format!("{prefix}.weight");
        let w = self.draw(&name, out_ch * in_ch * k * k, Normal::new(0.0, std).expect("positive std"));
        self.put(name, vec![out_ch, in_ch, k, k], w);
        if bias {
            self.zeros(&format!("{prefix}.bias"), &[out_ch]);
        }
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) {
        let std = (1.0 / dim as f64).sqrt();
        let w = self.draw(name, rows * dim, Normal::new(0.0, std).expect("positive std"));
        self.put(name.to_string(), vec![rows, dim], w);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.params.insert(format!("{prefix}.gamma"), Tensor::ones(vec![dim]));
        self.zeros(&format!("{prefix}.beta"), &[dim]);
    }

    pub fn batch_norm(&mut self, prefix: &str, ch: usize) {
        self.layer_norm(prefix, ch);
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(vec![ch]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::ones(vec![ch]));
    }

    pub fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d, true);
        }
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), d, hidden, true);
        self.linear(&format!("{prefix}.fc2"), hidden, d, true);
    }
}

/// One forward pass: the tape, read-only parameters, and the train/eval mode.
pub struct Ctx<'p, T: Scalar> {
    pub g: Graph<T>,
    pub params: &'p Params<T>,
    pub buffers: &'p Params<T>,
    pub train: bool,
    dropout: Option<ChaCha8Rng>,
    /// Batch statistics seen in training mode, for running-average updates.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    pub fn eval(params: &'p Params<T>, buffers: &'p Params<T>) -> Self {
        Ctx { g: Graph::new(), params, buffers, train: false, dropout: None, bn_stats: Vec::new() }
    }

    /// Training mode; `dropout` is the mask source (`None` disables dropout).
    pub fn train(params: &'p Params<T>, buffers: &'p Params<T>, dropout: Option<ChaCha8Rng>) -> Self {
        Ctx { g: Graph::new(), params, buffers, train: true, dropout, bn_stats: Vec::new() }
    }

    pub fn p(&mut self, name: &str) -> Result<Var, TensorError> {
        self.g.param(self.params, name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// `x @ W + b` over the last axis.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, TensorError> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.g.matmul(x, w)?;
        let bias = format!("{prefix}.bias");
        if self.has(&bias) {
            let b = self.p(&bias)?;
            self.g.add(y, b)
        } else {
            Ok(y)
        }
    }

    /// Layer norm over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var, TensorError> {
        let n = self.g.layer_normalize(x, T::lit(LN_EPS))?;
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let y = self.g.mul(n, gamma)?;
        self.g.add(y, beta)
    }

    /// Batch norm over `[B, C, H, W]`: masked batch statistics when training,
    /// running statistics otherwise.
    pub fn batch_norm(&mut self, x: Var, prefix: &str, mask: &Mask) -> Result<Var, TensorError> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        if self.train {
            let (n, stats) = self.g.batch_normalize(x, Some(mask), T::lit(BN_EPS))?;
            self.bn_stats.push((prefix.to_string(), stats));
            return self.g.channel_affine(n, gamma, beta);
        }
        let get = |k: &str| {
            self.buffers
                .get(&format!("{prefix}.{k}"))
                .cloned()
                .ok_or_else(|| TensorError::UnknownParam(format!("{prefix}.{k}")))
        };
        let (mean, var) = (get("running_mean")?, get("running_var")?);
        let eps = T::lit(BN_EPS);
        let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.data().iter().zip(&inv).map(|(&m, &s)| -m * s).collect();
        let c = inv.len();
        let sc = self.g.constant(Tensor::new(vec![c], inv)?);
        let sh = self.g.constant(Tensor::new(vec![c], shift)?);
        let n = self.g.channel_affine(x, sc, sh)?;
        self.g.channel_affine(n, gamma, beta)
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        let Some(rng) = self.dropout.as_mut().filter(|_| self.train && p > 0.0) else {
            return Ok(x);
        };
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let m = self.g.constant(Tensor::new(shape, data)?);
        self.g.mul(x, m)
    }

    /// `fc2(dropout(relu(fc1 x)))`.
    pub fn ffn(&mut self, x: Var, prefix: &str, p: f64) -> Result<Var, TensorError> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.g.relu(h)?;
        let h = self.dropout(h, p)?;
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// Split `[B, T, D]` into heads: `[B, heads, T, D / heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let s = self.g.shape(x).to_vec();
        let r = self.g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
        self.g.permute(r, &[0, 2, 1, 3])
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.g.shape(x).to_vec();
        let p = self.g.permute(x, &[0, 2, 1, 3])?;
        self.g.reshape(p, &[s[0], s[2], s[1] * s[3]])
    }

    /// Scaled dot-product energies `[B, heads, Tq, Tk]` and the value heads.
    pub fn attention_energies(
        &mut self,
        prefix: &str,
        query: Var,
        key: Var,
        value: Var,
        heads: usize,
    ) -> Result<(Var, Var), TensorError> {
        let d = *self.g.shape(query).last().expect("rank-3 input");
        if !d.is_multiple_of(heads) {
            return Err(TensorError::InvalidShape { shape: vec![d, heads], reason: "d_model not divisible by heads".into() });
        }
        let q = self.linear(query, &format!("{prefix}.q"))?;
        let k = self.linear(key, &format!("{prefix}.k"))?;
        let v = self.linear(value, &format!("{prefix}.v"))?;
        let q = self.split_heads(q, heads)?;
        let k = self.split_heads(k, heads)?;
        let v = self.split_heads(v, heads)?;
        let kt = self.g.transpose_last(k)?;
        let e = self.g.matmul(q, kt)?;
        let e = self.g.scale(e, T::lit(1.0 / ((d / heads) as f64).sqrt()))?;
        Ok((e, v))
    }

    /// Softmax over keys, weighted values, concat, output projection.
    /// Returns the output `[B, Tq, D]` and the attention weights.
    pub fn attend(
        &mut self,
        prefix: &str,
        energies: Var,
        values: Var,
        mask: &Mask,
        p: f64,
    ) -> Result<(Var, Var), TensorError> {
        let a = self.g.softmax(energies, Some(mask))?;
        let ad = self.dropout(a, p)?;
        let h = self.g.matmul(ad, values)?;
        let h = self.merge_heads(h)?;
        Ok((self.linear(h, &format!("{prefix}.o"))?, a))
    }

    /// Multi-head attention; `mask` broadcasts to `[B, heads, Tq, Tk]`.
    #[allow(clippy::too_many_arguments)]
    pub fn mha(
        &mut self,
        prefix: &str,
        query: Var,
        key: Var,
        value: Var,
        mask: &Mask,
        heads: usize,
        p: f64,
    ) -> Result<(Var, Var), TensorError> {
        let (e, v) = self.attention_energies(prefix, query, key, value, heads)?;
        self.attend(prefix, e, v, mask, p)
    }
}

/// Self-attention mask `[B, 1, T, T]`: causal and excluding PAD keys.
pub fn causal_pad_mask(valid: &Mask) -> Result<Mask, TensorError> {
    let (b, t) = (valid.shape()[0], valid.shape()[1]);
    let keys = valid.reshape(vec![b, 1, 1, t])?;
    keys.and(&Mask::causal(t).reshape(vec![1, 1, t, t])?)
}

/// Fixed sinusoidal encoding `[len, dim]` for positions `0..len`.
pub fn sinusoid(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            out[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    out
}

/// 2-D encoding `[h * w, dim]`: first half of channels encodes the row,
/// second half the column.
pub fn sinusoid_2d(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let (rows, cols) = (sinusoid(h, half), sinusoid(w, half));
    let mut out = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * dim;
            out[o..o + half].copy_from_slice(&rows[y * half..(y + 1) * half]);
            out[o + half..o + 2 * half].copy_from_slice(&cols[x * half..(x + 1) * half]);
        }
    }
    out
}
