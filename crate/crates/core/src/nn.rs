//! Parameterised building blocks shared by the three models.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Dropout rates at the three sites of a transformer block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub attn: f64,
    pub relu: f64,
    pub res: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropSite {
    Attn,
    Relu,
    Res,
}

/// One forward pass: a fresh tape bound to a parameter store, plus an
/// optional dropout stream (absent at inference).
pub struct Session<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    dropout: Option<(Dropout, Rng)>,
}

impl<'a> Session<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            dropout: None,
        }
    }

    pub fn train(store: &'a ParamStore, rates: Dropout, rng: Rng) -> Self {
        Self {
            g: Graph::new(),
            store,
            dropout: Some((rates, rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn drop(&mut self, x: Var, site: DropSite) -> Result<Var> {
        let Some((rates, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = match site {
            DropSite::Attn => rates.attn,
            DropSite::Relu => rates.relu,
            DropSite::Res => rates.res,
        };
        self.g.dropout(x, p, rng)
    }

    /// Random draw from the session's stream; `None` at inference.
    pub fn draw(&mut self) -> Option<f64> {
        self.dropout.as_mut().map(|(_, rng)| rng.gen())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[input, output], input, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, output]));
        Self {
            w,
            b: Some(b),
            input,
            output,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[input, output], input, rng);
        Self {
            w,
            b: None,
            input,
            output,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Linear -> ReLU -> (dropout) -> Linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), input, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, output, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.g.relu(h);
        let h = s.drop(h, DropSite::Relu)?;
        self.l2.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[1, width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gain), s.p(self.bias));
        s.g.layer_norm(x, g, b, Self::EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Attention output plus the per-head probability rows (`queries x keys`).
pub struct AttnOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
            width,
        }
    }

    /// `mask`, when given, is added to the `queries x keys` score matrix of every head.
    pub fn forward(&self, s: &mut Session, query: Var, memory: Var, mask: Option<&[f64]>) -> Result<AttnOut> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, memory)?;
        let v = self.v.forward(s, memory)?;
        self.attend(s, q, k, v, mask)
    }

    pub fn attend(&self, s: &mut Session, q: Var, k: Var, v: Var, mask: Option<&[f64]>) -> Result<AttnOut> {
        let dk = self.width / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.g.slice_cols(q, h * dk, (h + 1) * dk)?,
                    s.g.slice_cols(k, h * dk, (h + 1) * dk)?,
                    s.g.slice_cols(v, h * dk, (h + 1) * dk)?,
                )
            };
            let scores = s.g.matmul_bt(qh, kh)?;
            let mut scores = s.g.scale(scores, scale);
            if let Some(m) = mask {
                scores = s.g.add_const(scores, m)?;
            }
            let p = s.g.softmax_rows(scores);
            weights.push(p);
            let p = s.drop(p, DropSite::Attn)?;
            outs.push(s.g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { s.g.concat_cols(&outs)? };
        let out = self.o.forward(s, cat)?;
        Ok(AttnOut { out, weights })
    }
}

/// Causal mask for `n` positions: position `i` may attend to `j <= i`.
pub fn causal_mask(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = -1e30;
        }
    }
    m
}

/// Fixed sinusoidal position table, `len x width`.
pub fn sinusoidal(len: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * width];
    for p in 0..len {
        for i in 0..width {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = p as f64 * rate;
            out[p * width + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

pub fn add_positions(s: &mut Session, x: Var) -> Result<Var> {
    let (n, d) = s.g.shape(x);
    let table = sinusoidal(n, d);
    s.g.add_const(x, &table)
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ffn: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ffn: Mlp::new(store, &format!("{name}.ffn"), width, ffn, width, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: Option<&[f64]>) -> Result<(Var, Vec<Var>)> {
        let h = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, h, h, mask)?;
        let r = s.drop(a.out, DropSite::Res)?;
        let x = s.g.add(x, r)?;
        let h = self.ln2.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        let f = s.drop(f, DropSite::Res)?;
        Ok((s.g.add(x, f)?, a.weights))
    }
}

/// Pre-norm transformer decoder block: causal self-attention, cross-attention, FFN.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: Mlp,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ffn: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), width, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), width),
            ffn: Mlp::new(store, &format!("{name}.ffn"), width, ffn, width, rng),
        }
    }

    /// Returns the new states and the cross-attention weights per head.
    pub fn forward(&self, s: &mut Session, x: Var, memory: Var) -> Result<(Var, Vec<Var>)> {
        let n = s.g.shape(x).0;
        let mask = causal_mask(n);
        let h = self.ln1.forward(s, x)?;
        let a = self.self_attn.forward(s, h, h, Some(&mask))?;
        let r = s.drop(a.out, DropSite::Res)?;
        let x = s.g.add(x, r)?;
        let h = self.ln2.forward(s, x)?;
        let c = self.cross.forward(s, h, memory, None)?;
        let r = s.drop(c.out, DropSite::Res)?;
        let x = s.g.add(x, r)?;
        let h = self.ln3.forward(s, x)?;
        let f = self.ffn.forward(s, h)?;
        let f = s.drop(f, DropSite::Res)?;
        Ok((s.g.add(x, f)?, c.weights))
    }
}

/// Gated recurrent cell: reset/update gates and a candidate state.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            wx: Linear::new(store, &format!("{name}.x"), input, 3 * hidden, rng),
            wh: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    /// Input projections for every row at once (`T x 3H`).
    pub fn project_inputs(&self, s: &mut Session, xs: Var) -> Result<Var> {
        self.wx.forward(s, xs)
    }

    /// One step from a precomputed `1 x 3H` input projection.
    pub fn step(&self, s: &mut Session, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let hp = self.wh.forward(s, h)?;
        let xr = s.g.slice_cols(xp, 0, hd)?;
        let xz = s.g.slice_cols(xp, hd, 2 * hd)?;
        let xn = s.g.slice_cols(xp, 2 * hd, 3 * hd)?;
        let hr = s.g.slice_cols(hp, 0, hd)?;
        let hz = s.g.slice_cols(hp, hd, 2 * hd)?;
        let hn = s.g.slice_cols(hp, 2 * hd, 3 * hd)?;
        let r = s.g.add(xr, hr)?;
        let r = s.g.sigmoid(r);
        let z = s.g.add(xz, hz)?;
        let z = s.g.sigmoid(z);
        let rn = s.g.mul(r, hn)?;
        let n = s.g.add(xn, rn)?;
        let n = s.g.tanh(n);
        // h' = n + z * (h - n)
        let d = s.g.sub(h, n)?;
        let zd = s.g.mul(z, d)?;
        s.g.add(n, zd)
    }

    /// Runs over all rows of `xs` from a zero state; returns `T x H`.
    pub fn run(&self, s: &mut Session, xs: Var) -> Result<Var> {
        let t = s.g.shape(xs).0;
        let xp = self.project_inputs(s, xs)?;
        let mut h = s.g.constant_rows(1, self.hidden, vec![0.0; self.hidden]);
        let mut states = Vec::with_capacity(t);
        for i in 0..t {
            let row = s.g.slice_rows(xp, i, i + 1)?;
            h = self.step(s, row, h)?;
            states.push(h);
        }
        s.g.concat_rows(&states)
    }
}

/// Stacked bidirectional recurrent layers; each layer concatenates the
/// forward and time-reversed backward passes per position.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(GruCell, GruCell)>,
    pub hidden: usize,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut width = input;
        for l in 0..layers {
            let f = GruCell::new(store, &format!("{name}.{l}.fwd"), width, hidden, rng);
            let b = GruCell::new(store, &format!("{name}.{l}.bwd"), width, hidden, rng);
            out.push((f, b));
            width = 2 * hidden;
        }
        Self { layers: out, hidden }
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn forward(&self, s: &mut Session, xs: Var) -> Result<Var> {
        if s.g.shape(xs).0 == 0 {
            return Err(dim_err("empty sequence"));
        }
        let mut x = xs;
        for (f, b) in &self.layers {
            let fw = f.run(s, x)?;
            let rev = s.g.reverse_rows(x);
            let bw = b.run(s, rev)?;
            let bw = s.g.reverse_rows(bw);
            x = s.g.concat_cols(&[fw, bw])?;
        }
        Ok(x)
    }
}
