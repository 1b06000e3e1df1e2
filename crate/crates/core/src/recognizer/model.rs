use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{add_positions, BiGru, DecoderBlock, DropSite, EncoderBlock, LayerNorm, Linear, Mlp, Session};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var, GATHER_ZERO};
use crate::posespace::codebook::{BOS, RESERVED};
use crate::rng::{self, Rng};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const MASK_NAME: &str = "prune.mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizerArch {
    pub d_in: usize,
    pub kernels: Vec<usize>,
    /// Channels per convolution branch.
    pub branch: usize,
    pub conv_width: usize,
    /// Recurrent hidden size per direction.
    pub hidden: usize,
    pub rnn_layers: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub teacher_width: usize,
    pub teacher_blocks: usize,
    pub vocab: usize,
}

impl RecognizerArch {
    pub fn desk(d_in: usize, vocab: usize) -> Self {
        Self {
            d_in,
            kernels: vec![3, 5, 7],
            branch: 32,
            conv_width: 64,
            hidden: 32,
            rnn_layers: 2,
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn: 256,
            teacher_width: 48,
            teacher_blocks: 2,
            vocab,
        }
    }

    pub fn full(vocab: usize) -> Self {
        Self {
            d_in: 2048,
            kernels: vec![3, 5, 7],
            branch: 512,
            conv_width: 1024,
            hidden: 512,
            rnn_layers: 2,
            d_model: 256,
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            ffn: 1024,
            teacher_width: 256,
            teacher_blocks: 2,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(format!("recognizer: {m}")));
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return bad("kernel sizes must be odd and nonempty");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by the head count");
        }
        if self.vocab <= RESERVED {
            return bad("vocabulary has no gloss entries");
        }
        let widths = [self.d_in, self.branch, self.conv_width, self.hidden, self.d_model, self.ffn, self.teacher_width];
        if widths.contains(&0) || self.rnn_layers == 0 {
            return bad("widths and layer counts must be positive");
        }
        Ok(())
    }
}

/// Output length after the two stride-2 pooling stages.
pub fn pooled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

#[derive(Clone, Debug)]
pub struct ConvBranch {
    pub kernel: usize,
    pub conv: Linear,
    pub gain: ParamId,
    pub bias: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub branches: Vec<ConvBranch>,
    pub proj: Linear,
}

/// Batch statistics observed by one BatchNorm during a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, obs) in [(self.mean_id, &self.mean), (self.var_id, &self.var)] {
            for (r, o) in store.get_mut(id).data_mut().iter_mut().zip(obs) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * o;
            }
        }
    }
}

/// Gather indices turning packed segments into `rows x (k * c)` windows
/// with zero padding at every segment edge.
pub fn window_index(lens: &[usize], c: usize, k: usize) -> Vec<usize> {
    let rows: usize = lens.iter().sum();
    let half = (k / 2) as isize;
    let mut idx = Vec::with_capacity(rows * k * c);
    let mut base = 0;
    for &len in lens {
        for r in 0..len as isize {
            for o in 0..k as isize {
                let src = r + o - half;
                if src >= 0 && src < len as isize {
                    let row = base + src as usize;
                    idx.extend((0..c).map(|ch| row * c + ch));
                } else {
                    idx.extend(std::iter::repeat_n(GATHER_ZERO, c));
                }
            }
        }
        base += len;
    }
    idx
}

/// Same-length 1D convolution over packed segments.
pub fn conv1d(s: &mut Session, x: Var, lens: &[usize], lin: &Linear, k: usize) -> Result<Var> {
    let (rows, c) = s.g.shape(x);
    let idx = window_index(lens, c, k);
    let win = s.g.gather(x, idx, rows, k * c)?;
    lin.forward(s, win)
}

fn split_rows(g: &mut Graph, x: Var, lens: &[usize]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &l in lens {
        out.push(g.slice_rows(x, at, at + l)?);
        at += l;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub stem: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub head: Linear,
}

pub struct RefineOut {
    pub dec_logits: Var,
    pub ctc_logits: Var,
    pub enc: Var,
    /// Last decoder layer's cross-attention, one `prefix x T'` map per head.
    pub cross: Vec<Var>,
}

/// Encoder-side results for one sequence, detached from any tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub enc: Tensor,
    pub ctc_log_probs: Tensor,
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub arch: RecognizerArch,
    pub stages: Vec<ConvStage>,
    pub birnn: BiGru,
    pub in_proj: Linear,
    pub enc_blocks: Vec<EncoderBlock>,
    pub enc_ln: LayerNorm,
    pub ctc_head: Mlp,
    pub embed: ParamId,
    pub dec_blocks: Vec<DecoderBlock>,
    pub dec_ln: LayerNorm,
    pub out: Linear,
    pub teacher: Teacher,
    pub mask: ParamId,
}

fn conv_stage(store: &mut ParamStore, name: &str, arch: &RecognizerArch, input: usize, rng: &mut Rng) -> ConvStage {
    let branches = arch
        .kernels
        .iter()
        .map(|&k| {
            let n = format!("{name}.k{k}");
            ConvBranch {
                kernel: k,
                conv: Linear::new(store, &format!("{n}.conv"), k * input, arch.branch, rng),
                gain: store.add(format!("{n}.bn.gain"), Tensor::ones(&[1, arch.branch])),
                bias: store.add(format!("{n}.bn.bias"), Tensor::zeros(&[1, arch.branch])),
                run_mean: store.add_buffer(format!("{n}.bn.mean"), Tensor::zeros(&[1, arch.branch])),
                run_var: store.add_buffer(format!("{n}.bn.var"), Tensor::ones(&[1, arch.branch])),
            }
        })
        .collect();
    let proj = Linear::new(store, &format!("{name}.proj"), arch.kernels.len() * arch.branch, arch.conv_width, rng);
    ConvStage { branches, proj }
}

impl Recognizer {
    pub fn new(arch: RecognizerArch, seed: u64) -> Result<(Self, ParamStore)> {
        arch.validate()?;
        let mut rng = rng::stream(seed, "cslr-init");
        let mut st = ParamStore::new();
        let a = &arch;
        let stages = vec![
            conv_stage(&mut st, "conv0", a, a.d_in, &mut rng),
            conv_stage(&mut st, "conv1", a, a.conv_width, &mut rng),
        ];
        let birnn = BiGru::new(&mut st, "birnn", a.conv_width, a.hidden, a.rnn_layers, &mut rng);
        let in_proj = Linear::new(&mut st, "in_proj", birnn.output_width(), a.d_model, &mut rng);
        let enc_blocks = (0..a.enc_layers)
            .map(|l| EncoderBlock::new(&mut st, &format!("enc.{l}"), a.d_model, a.heads, a.ffn, &mut rng))
            .collect();
        let enc_ln = LayerNorm::new(&mut st, "enc.ln", a.d_model);
        let ctc_head = Mlp::new(&mut st, "ctc_head", a.d_model, a.d_model, a.vocab, &mut rng);
        let embed = st.add_uniform("dec.embed", &[a.vocab, a.d_model], a.d_model, &mut rng);
        let dec_blocks = (0..a.dec_layers)
            .map(|l| DecoderBlock::new(&mut st, &format!("dec.{l}"), a.d_model, a.heads, a.ffn, &mut rng))
            .collect();
        let dec_ln = LayerNorm::new(&mut st, "dec.ln", a.d_model);
        let out = Linear::new(&mut st, "dec.out", a.d_model, a.vocab, &mut rng);
        let tw = a.teacher_width;
        let teacher = Teacher {
            stem: Linear::new(&mut st, "teacher.stem", 3 * a.d_in, tw, &mut rng),
            blocks: (0..a.teacher_blocks)
                .map(|b| {
                    (
                        Linear::new(&mut st, &format!("teacher.{b}.a"), 3 * tw, tw, &mut rng),
                        Linear::new(&mut st, &format!("teacher.{b}.b"), 3 * tw, tw, &mut rng),
                    )
                })
                .collect(),
            head: Linear::new(&mut st, "teacher.head", tw, a.vocab, &mut rng),
        };
        let mask = st.add_buffer(MASK_NAME, Tensor::ones(&[1, a.d_in]));
        let model = Self {
            arch,
            stages,
            birnn,
            in_proj,
            enc_blocks,
            enc_ln,
            ctc_head,
            embed,
            dec_blocks,
            dec_ln,
            out,
            teacher,
            mask,
        };
        Ok((model, st))
    }

    /// Places a latent sequence on the tape with the current prune mask applied.
    pub fn input(&self, s: &mut Session, z: &Tensor) -> Result<Var> {
        if z.cols() != self.arch.d_in {
            return Err(crate::error::Error::Dimension(format!(
                "recognizer expects width {}, got {}",
                self.arch.d_in,
                z.cols()
            )));
        }
        let x = s.g.constant(z);
        let m = s.g.constant(s.store.get(self.mask));
        s.g.mul_row(x, m)
    }

    fn batch_norm(&self, s: &mut Session, y: Var, b: &ConvBranch, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let (rows, n) = s.g.shape(y);
        let norm = if s.is_training() {
            let (xh, mean, var) = s.g.col_norm(y, BN_EPS);
            updates.push(BnUpdate {
                mean_id: b.run_mean,
                var_id: b.run_var,
                mean,
                var,
            });
            xh
        } else {
            let mean = s.store.get(b.run_mean).data();
            let var = s.store.get(b.run_var).data();
            let shift: Vec<f64> = (0..rows * n).map(|i| -mean[i % n]).collect();
            let inv: Vec<f64> = (0..rows * n).map(|i| 1.0 / (var[i % n] + BN_EPS).sqrt()).collect();
            let c = s.g.add_const(y, &shift)?;
            s.g.mul_const(c, inv)?
        };
        let gain = s.p(b.gain);
        let bias = s.p(b.bias);
        let scaled = s.g.mul_row(norm, gain)?;
        s.g.add_row(scaled, bias)
    }

    /// Multi-kernel convolution stack over a batch of sequences; BatchNorm
    /// statistics are shared across the batch.
    pub fn conv_stack(&self, s: &mut Session, inputs: &[Var]) -> Result<(Vec<Var>, Vec<BnUpdate>)> {
        if inputs.is_empty() {
            return Err(contract("conv stack: empty batch"));
        }
        let mut lens: Vec<usize> = inputs.iter().map(|&x| s.g.shape(x).0).collect();
        if let Some(t) = lens.iter().find(|&&t| t < 4) {
            return Err(Error::SequenceTooShort(format!("{t} frames, the conv stack needs at least 4")));
        }
        let mut x = s.g.concat_rows(inputs)?;
        let mut updates = Vec::new();
        for stage in &self.stages {
            let mut outs = Vec::with_capacity(stage.branches.len());
            for b in &stage.branches {
                let y = conv1d(s, x, &lens, &b.conv, b.kernel)?;
                let y = self.batch_norm(s, y, b, &mut updates)?;
                let y = s.g.relu(y);
                outs.push(s.g.max_pool_segments(y, &lens)?);
            }
            lens = lens.iter().map(|l| l.div_ceil(2)).collect();
            let cat = s.g.concat_cols(&outs)?;
            x = stage.proj.forward(s, cat)?;
        }
        Ok((split_rows(&mut s.g, x, &lens)?, updates))
    }

    /// Residual convolutional teacher producing `T' x V` logits per sequence.
    pub fn teacher_logits(&self, s: &mut Session, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(contract("teacher: empty batch"));
        }
        let lens: Vec<usize> = inputs.iter().map(|&x| s.g.shape(x).0).collect();
        let x = s.g.concat_rows(inputs)?;
        let t = &self.teacher;
        let h = conv1d(s, x, &lens, &t.stem, 3)?;
        let mut h = s.g.relu(h);
        for (a, b) in &t.blocks {
            let r = conv1d(s, h, &lens, a, 3)?;
            let r = s.g.relu(r);
            let r = conv1d(s, r, &lens, b, 3)?;
            let sum = s.g.add(h, r)?;
            h = s.g.relu(sum);
        }
        let h = s.g.max_pool_segments(h, &lens)?;
        let half: Vec<usize> = lens.iter().map(|l| l.div_ceil(2)).collect();
        let h = s.g.max_pool_segments(h, &half)?;
        let quarter: Vec<usize> = half.iter().map(|l| l.div_ceil(2)).collect();
        let logits = t.head.forward(s, h)?;
        split_rows(&mut s.g, logits, &quarter)
    }

    pub fn birnn(&self, s: &mut Session, h: Var) -> Result<Var> {
        self.birnn.forward(s, h)
    }

    /// Transformer encoder over the recurrent features; returns final-normed states.
    pub fn encode(&self, s: &mut Session, u: Var) -> Result<Var> {
        let x = self.in_proj.forward(s, u)?;
        let x = add_positions(s, x)?;
        let mut x = s.drop(x, DropSite::Res)?;
        for b in &self.enc_blocks {
            x = b.forward(s, x, None)?.0;
        }
        self.enc_ln.forward(s, x)
    }

    pub fn ctc_logits(&self, s: &mut Session, enc: Var) -> Result<Var> {
        self.ctc_head.forward(s, enc)
    }

    /// Causally masked decoder over `prefix`, which must start with BOS.
    pub fn decode(&self, s: &mut Session, enc: Var, prefix: &[usize]) -> Result<(Var, Vec<Var>)> {
        if prefix.first() != Some(&BOS) {
            return Err(contract("decoder prefix must begin with BOS"));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t >= self.arch.vocab) {
            return Err(Error::Codebook(format!("token {t} outside the vocabulary")));
        }
        let e = s.p(self.embed);
        let x = s.g.select_rows(e, prefix)?;
        let x = s.g.scale(x, (self.arch.d_model as f64).sqrt());
        let x = add_positions(s, x)?;
        let mut x = s.drop(x, DropSite::Res)?;
        let mut cross = Vec::new();
        for b in &self.dec_blocks {
            let (y, w) = b.forward(s, x, enc)?;
            x = y;
            cross = w;
        }
        let x = self.dec_ln.forward(s, x)?;
        Ok((self.out.forward(s, x)?, cross))
    }

    pub fn refine_forward(&self, s: &mut Session, u: Var, prefix: &[usize]) -> Result<RefineOut> {
        if prefix.first() != Some(&BOS) {
            return Err(contract("decoder prefix must begin with BOS"));
        }
        let enc = self.encode(s, u)?;
        let ctc_logits = self.ctc_logits(s, enc)?;
        let (dec_logits, cross) = self.decode(s, enc, prefix)?;
        Ok(RefineOut {
            dec_logits,
            ctc_logits,
            enc,
            cross,
        })
    }

    /// Inference-mode encoder pass for one latent sequence.
    pub fn encode_sequence(&self, store: &ParamStore, z: &Tensor) -> Result<Encoded> {
        let mut s = Session::eval(store);
        let x = self.input(&mut s, z)?;
        let (hs, _) = self.conv_stack(&mut s, &[x])?;
        let u = self.birnn(&mut s, hs[0])?;
        let enc = self.encode(&mut s, u)?;
        let logits = self.ctc_logits(&mut s, enc)?;
        let lp = s.g.log_softmax_rows(logits);
        Ok(Encoded {
            enc: s.g.value(enc).clone(),
            ctc_log_probs: s.g.value(lp).clone(),
        })
    }

    /// Next-token logits after `prefix` and the last step's cross-attention per head.
    pub fn decoder_step(&self, store: &ParamStore, enc: &Tensor, prefix: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut s = Session::eval(store);
        let e = s.g.constant(enc);
        let (logits, cross) = self.decode(&mut s, e, prefix)?;
        let last = prefix.len() - 1;
        let row = s.g.value(logits).row(last).to_vec();
        let heads = cross.iter().map(|&w| s.g.value(w).row(last).to_vec()).collect();
        Ok((row, heads))
    }

    /// Greedy CTC readout of the student head.
    pub fn ctc_log_probs(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        Ok(self.encode_sequence(store, z)?.ctc_log_probs)
    }

    pub fn set_mask(&self, store: &mut ParamStore, mask: &[bool]) -> Result<()> {
        if mask.len() != self.arch.d_in {
            return Err(crate::error::Error::Dimension("prune mask width".into()));
        }
        let m = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        store.set(self.mask, Tensor::new(&[1, self.arch.d_in], m)?)
    }

    pub fn mask(&self, store: &ParamStore) -> Vec<bool> {
        store.get(self.mask).data().iter().map(|&v| v != 0.0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;

    fn tiny() -> RecognizerArch {
        RecognizerArch {
            d_in: 6,
            kernels: vec![3, 5, 7],
            branch: 4,
            conv_width: 8,
            hidden: 4,
            rnn_layers: 2,
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn: 16,
            teacher_width: 6,
            teacher_blocks: 1,
            vocab: 7,
        }
    }

    fn rand_seq(t: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test");
        Tensor::uniform(&[t, d], 1.0, &mut r)
    }

    #[test]
    fn pooled_lengths() {
        let (m, st) = Recognizer::new(tiny(), 1).unwrap();
        for t in 4..=23 {
            let mut s = Session::eval(&st);
            let x = m.input(&mut s, &rand_seq(t, 6, t as u64)).unwrap();
            let (h, _) = m.conv_stack(&mut s, &[x]).unwrap();
            assert_eq!(s.g.shape(h[0]), (pooled_len(t), 8));
            assert_eq!(pooled_len(t), t.div_ceil(2).div_ceil(2));
        }
        assert_eq!(pooled_len(16), 4);
    }

    #[test]
    fn short_sequence_rejected() {
        let (m, st) = Recognizer::new(tiny(), 1).unwrap();
        let mut s = Session::eval(&st);
        let x = m.input(&mut s, &rand_seq(3, 6, 0)).unwrap();
        assert!(matches!(m.conv_stack(&mut s, &[x]), Err(Error::SequenceTooShort(_))));
    }

    #[test]
    fn batched_conv_matches_single() {
        let (m, st) = Recognizer::new(tiny(), 2).unwrap();
        let (a, b) = (rand_seq(9, 6, 1), rand_seq(6, 6, 2));
        let mut s = Session::eval(&st);
        let (xa, xb) = (m.input(&mut s, &a).unwrap(), m.input(&mut s, &b).unwrap());
        let (both, _) = m.conv_stack(&mut s, &[xa, xb]).unwrap();
        let (solo, _) = m.conv_stack(&mut s, &[xb]).unwrap();
        assert!(s.g.value(both[1]).max_abs_diff(s.g.value(solo[0])) < 1e-12);
        let tb = m.teacher_logits(&mut s, &[xa, xb]).unwrap();
        let ts = m.teacher_logits(&mut s, &[xb]).unwrap();
        assert!(s.g.value(tb[1]).max_abs_diff(s.g.value(ts[0])) < 1e-12);
        assert_eq!(s.g.shape(tb[0]).0, pooled_len(9));
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let (m, st) = Recognizer::new(tiny(), 3).unwrap();
        let mut s = Session::eval(&st);
        let x = s.g.constant(&Tensor::full(&[40, 6], 0.7));
        let b = &m.stages[0].branches[0];
        let y = conv1d(&mut s, x, &[40], &b.conv, b.kernel).unwrap();
        let v = s.g.value(y);
        for r in 2..38 {
            assert!(v.row(r).iter().zip(v.row(1)).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn prefix_must_start_with_bos() {
        let (m, st) = Recognizer::new(tiny(), 4).unwrap();
        let mut s = Session::eval(&st);
        let u = s.g.constant(&rand_seq(3, 8, 5));
        assert!(matches!(m.refine_forward(&mut s, u, &[4, 5]), Err(Error::Contract(_))));
        let out = m.refine_forward(&mut s, u, &[BOS, 4, 5]).unwrap();
        assert_eq!(s.g.shape(out.ctc_logits), (3, 7));
        assert_eq!(s.g.shape(out.dec_logits), (3, 7));
        assert_eq!(out.cross.len(), 2);
    }

    #[test]
    fn decoder_is_causal() {
        let (m, st) = Recognizer::new(tiny(), 5).unwrap();
        let enc = rand_seq(4, 8, 6);
        let a = m.decoder_step(&st, &enc, &[BOS, 4]).unwrap().0;
        let mut s = Session::eval(&st);
        let e = s.g.constant(&enc);
        let (full, _) = m.decode(&mut s, e, &[BOS, 4, 6, 5]).unwrap();
        let row = s.g.value(full).row(1);
        assert!(a.iter().zip(row).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn conv_branch_gradient() {
        let (m, st) = Recognizer::new(tiny(), 6).unwrap();
        let x0 = rand_seq(7, 6, 7);
        let err = grad_check(
            |g, x| {
                let mut s = Session::train(&st, crate::nn::Dropout::default(), rng::stream(0, "t"));
                s.g = std::mem::take(g);
                let mut ups = Vec::new();
                let b = &m.stages[0].branches[1];
                let y = conv1d(&mut s, x, &[4, 3], &b.conv, b.kernel)?;
                let y = m.batch_norm(&mut s, y, b, &mut ups)?;
                let y = s.g.tanh(y);
                let y = s.g.max_pool_segments(y, &[4, 3])?;
                let l = s.g.square(y);
                let l = s.g.sum(l);
                *g = std::mem::take(&mut s.g);
                Ok(l)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
