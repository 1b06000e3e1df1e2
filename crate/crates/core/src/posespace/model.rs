//! The Stage-1 network: per-track encoders, attention fusion over the five
//! tracks, PadMatch into the unified width, a transformer latent encoder and
//! a recurrent codebook decoder.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Error, Result};
use crate::nn::{self, EncoderBlock, GruCell, LayerNorm, Linear, Mlp, Session};
use crate::numcore::{ParamId, ParamStore, Tensor, Var, GATHER_ZERO};
use crate::rng::{self, Rng};

use super::codebook::{BOS, EOS};
use super::types::{PoseTracks, TrackDims, NUM_TRACKS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Arch {
    pub dims: TrackDims,
    pub d_h: usize,
    pub d_u: usize,
    pub fusion_heads: usize,
    pub latent_heads: usize,
    pub blocks: usize,
    pub ffn: usize,
    pub vocab: usize,
}

impl Stage1Arch {
    pub fn desk(vocab: usize) -> Self {
        Self {
            dims: TrackDims::DESK,
            d_h: 32,
            d_u: 64,
            fusion_heads: 4,
            latent_heads: 4,
            blocks: 2,
            ffn: 128,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h > self.d_u {
            return Err(contract(format!("d_h {} exceeds d_u {}", self.d_h, self.d_u)));
        }
        if !self.d_h.is_multiple_of(self.fusion_heads) || !self.d_u.is_multiple_of(self.latent_heads) {
            return Err(Error::Parameter("widths must divide evenly into heads".into()));
        }
        if self.vocab <= super::codebook::RESERVED {
            return Err(Error::Parameter("vocabulary has no glosses".into()));
        }
        Ok(())
    }
}

/// Per-head fusion weights for one sequence: `T x 5` rows summing to one.
pub struct FusionOut {
    pub fused: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub arch: Stage1Arch,
    pub encoders: Vec<Mlp>,
    pub query: ParamId,
    pub fuse_k: Linear,
    pub fuse_v: Linear,
    pub fuse_o: Linear,
    pub pad_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
    pub embed: ParamId,
    pub init_h: Linear,
    pub gru: GruCell,
    pub attn_q: Linear,
    pub out: Linear,
    pub contrast_proj: Linear,
}

impl Stage1Model {
    pub fn new(arch: Stage1Arch, seed: u64) -> Result<(Self, ParamStore)> {
        arch.validate()?;
        let mut r: Rng = rng::stream(seed, "stage1-init");
        let mut s = ParamStore::new();
        let (dh, du) = (arch.d_h, arch.d_u);
        let encoders = (0..NUM_TRACKS)
            .map(|i| Mlp::new(&mut s, &format!("enc{i}"), arch.dims.0[i], dh, dh, &mut r))
            .collect();
        let query = s.add_uniform("fuse.query", &[1, dh], dh, &mut r);
        let fuse_k = Linear::new(&mut s, "fuse.k", dh, dh, &mut r);
        let fuse_v = Linear::new(&mut s, "fuse.v", dh, dh, &mut r);
        let fuse_o = Linear::new(&mut s, "fuse.o", dh, dh, &mut r);
        let pad_proj = Linear::new(&mut s, "padmatch", du, du, &mut r);
        let blocks = (0..arch.blocks)
            .map(|b| EncoderBlock::new(&mut s, &format!("vit{b}"), du, arch.latent_heads, arch.ffn, &mut r))
            .collect();
        let final_ln = LayerNorm::new(&mut s, "vit.ln", du);
        let embed = s.add_uniform("codebook.embed", &[arch.vocab, dh], 1, &mut r);
        let init_h = Linear::new(&mut s, "dec.init", du, dh, &mut r);
        let gru = GruCell::new(&mut s, "dec.gru", dh, dh, &mut r);
        let attn_q = Linear::new(&mut s, "dec.attn", dh, du, &mut r);
        let out = Linear::new(&mut s, "dec.out", dh + du, arch.vocab, &mut r);
        let contrast_proj = Linear::new(&mut s, "contrast.proj", du, dh, &mut r);
        Ok((
            Self {
                arch,
                encoders,
                query,
                fuse_k,
                fuse_v,
                fuse_o,
                pad_proj,
                blocks,
                final_ln,
                embed,
                init_h,
                gru,
                attn_q,
                out,
                contrast_proj,
            },
            s,
        ))
    }

    /// `E_i` applied to every frame of track `i` (`T x D_i -> T x d_h`).
    pub fn encode_track(&self, s: &mut Session, track: usize, raw: Var) -> Result<Var> {
        let want = self.arch.dims.0[track];
        if s.g.shape(raw).1 != want {
            return Err(dim_err(format!(
                "track {track} expects width {want}, got {}",
                s.g.shape(raw).1
            )));
        }
        self.encoders[track].forward(s, raw)
    }

    /// Attention of a learned query over the five track features of each frame.
    pub fn fuse_attention(&self, s: &mut Session, feats: &[Var]) -> Result<FusionOut> {
        if feats.len() != NUM_TRACKS {
            return Err(contract(format!("fusion needs {NUM_TRACKS} tracks, got {}", feats.len())));
        }
        let dh = self.arch.d_h;
        let heads = self.arch.fusion_heads;
        let dk = dh / heads;
        let q = s.p(self.query);
        let mut keys = Vec::with_capacity(NUM_TRACKS);
        let mut vals = Vec::with_capacity(NUM_TRACKS);
        for &f in feats {
            if s.g.shape(f).1 != dh {
                return Err(dim_err("track feature width differs from d_h"));
            }
            keys.push(self.fuse_k.forward(s, f)?);
            vals.push(self.fuse_v.forward(s, f)?);
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = s.g.slice_cols(q, h * dk, (h + 1) * dk)?;
            let mut cols = Vec::with_capacity(NUM_TRACKS);
            for &k in &keys {
                let kh = s.g.slice_cols(k, h * dk, (h + 1) * dk)?;
                cols.push(s.g.matmul_bt(kh, qh)?);
            }
            let scores = s.g.concat_cols(&cols)?;
            let scores = s.g.scale(scores, scale);
            let p = s.g.softmax_rows(scores);
            weights.push(p);
            let mut acc: Option<Var> = None;
            for (i, &v) in vals.iter().enumerate() {
                let vh = s.g.slice_cols(v, h * dk, (h + 1) * dk)?;
                let pi = s.g.slice_cols(p, i, i + 1)?;
                let term = s.g.mul_col(vh, pi)?;
                acc = Some(match acc {
                    Some(a) => s.g.add(a, term)?,
                    None => term,
                });
            }
            outs.push(acc.expect("five tracks"));
        }
        let cat = s.g.concat_cols(&outs)?;
        let fused = self.fuse_o.forward(s, cat)?;
        Ok(FusionOut { fused, weights })
    }

    /// Zero-pads each row to `d_u`, then applies the square projection.
    pub fn pad_match(&self, s: &mut Session, f: Var) -> Result<Var> {
        pad_match_with(s, &self.pad_proj, f, self.arch.d_u)
    }

    /// Positional encoding, the self-attention stack and a final norm.
    pub fn latent_encode(&self, s: &mut Session, z: Var) -> Result<Var> {
        if s.g.shape(z).0 == 0 {
            return Err(contract("latent encoder on an empty sequence"));
        }
        let mut x = nn::add_positions(s, z)?;
        for b in &self.blocks {
            x = b.forward(s, x, None)?.0;
        }
        self.final_ln.forward(s, x)
    }

    /// Raw tracks to the `T x d_u` pose-rich latent.
    pub fn latents_var(&self, s: &mut Session, tracks: &PoseTracks) -> Result<(Var, FusionOut)> {
        if tracks.dims() != self.arch.dims {
            return Err(dim_err(format!(
                "track widths {:?} differ from model {:?}",
                tracks.dims().0,
                self.arch.dims.0
            )));
        }
        let mut feats = Vec::with_capacity(NUM_TRACKS);
        for (i, t) in tracks.tracks.iter().enumerate() {
            let x = s.g.constant(t);
            feats.push(self.encode_track(s, i, x)?);
        }
        let fusion = self.fuse_attention(s, &feats)?;
        let z = self.pad_match(s, fusion.fused)?;
        Ok((self.latent_encode(s, z)?, fusion))
    }

    pub fn latents_from_vars(&self, s: &mut Session, tracks: &[Var]) -> Result<Var> {
        let mut feats = Vec::with_capacity(NUM_TRACKS);
        for (i, &x) in tracks.iter().enumerate() {
            feats.push(self.encode_track(s, i, x)?);
        }
        let fusion = self.fuse_attention(s, &feats)?;
        let z = self.pad_match(s, fusion.fused)?;
        self.latent_encode(s, z)
    }

    /// Inference-only latent extraction.
    pub fn latents(&self, store: &ParamStore, tracks: &PoseTracks) -> Result<Tensor> {
        let mut s = Session::eval(store);
        let (z, _) = self.latents_var(&mut s, tracks)?;
        Ok(s.g.value(z).clone())
    }

    /// Runs the codebook decoder for `steps` steps. `feed(k, prev_pred)`
    /// chooses the input token at step `k > 0`. Returns `steps x V` logits.
    pub fn decode_logits(
        &self,
        s: &mut Session,
        latent: Var,
        steps: usize,
        mut feed: impl FnMut(&mut Session, usize, usize) -> usize,
    ) -> Result<Var> {
        let du = self.arch.d_u;
        let pooled = s.g.col_mean(latent);
        let h0 = self.init_h.forward(s, pooled)?;
        let mut h = s.g.tanh(h0);
        let emb = s.p(self.embed);
        let mut token = BOS;
        let mut rows = Vec::with_capacity(steps);
        for k in 0..steps {
            let x = s.g.select_rows(emb, &[token])?;
            let xp = self.gru.project_inputs(s, x)?;
            h = self.gru.step(s, xp, h)?;
            let q = self.attn_q.forward(s, h)?;
            let scores = s.g.matmul_bt(q, latent)?;
            let scores = s.g.scale(scores, 1.0 / (du as f64).sqrt());
            let p = s.g.softmax_rows(scores);
            let ctx = s.g.matmul(p, latent)?;
            let hc = s.g.concat_cols(&[h, ctx])?;
            let logits = self.out.forward(s, hc)?;
            let pred = crate::numcore::kernels::argmax(s.g.value(logits).data());
            rows.push(logits);
            if k + 1 < steps {
                token = feed(s, k + 1, pred);
            }
        }
        s.g.concat_rows(&rows)
    }

    /// Greedy decoding until EOS or `max_len` glosses.
    pub fn greedy_decode(&self, store: &ParamStore, tracks: &PoseTracks, max_len: usize) -> Result<Vec<usize>> {
        let mut s = Session::eval(store);
        let (z, _) = self.latents_var(&mut s, tracks)?;
        let logits = self.decode_logits(&mut s, z, max_len + 1, |_, _, pred| pred)?;
        let v = self.arch.vocab;
        let mut out = Vec::new();
        for row in s.g.value(logits).data().chunks(v) {
            let t = crate::numcore::kernels::argmax(row);
            if t == EOS {
                break;
            }
            out.push(t);
        }
        Ok(out)
    }
}

/// PadMatch with an explicit projection: rows of width `w <= d_u` are
/// zero-padded to `d_u` and multiplied by the `d_u x d_u` projection.
pub fn pad_match_with(s: &mut Session, proj: &Linear, f: Var, d_u: usize) -> Result<Var> {
    let (n, w) = s.g.shape(f);
    if w > d_u {
        return Err(contract(format!("feature width {w} exceeds unified width {d_u}")));
    }
    let idx = (0..n)
        .flat_map(|i| (0..d_u).map(move |j| if j < w { i * w + j } else { GATHER_ZERO }))
        .collect();
    let padded = s.g.gather(f, idx, n, d_u)?;
    proj.forward(s, padded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posespace::types::TrackId;

    fn tiny() -> Stage1Arch {
        Stage1Arch {
            dims: TrackDims([3, 2, 2, 4, 4]),
            d_h: 8,
            d_u: 12,
            fusion_heads: 2,
            latent_heads: 2,
            blocks: 1,
            ffn: 16,
            vocab: 7,
        }
    }

    fn tracks(t: usize, dims: TrackDims, phase: f64) -> PoseTracks {
        PoseTracks::new(TrackId::ALL.map(|id| {
            let d = dims.get(id);
            let data = (0..t * d).map(|k| ((k as f64) * 0.61 + phase).sin()).collect();
            Tensor::new(&[t, d], data).unwrap()
        }))
        .unwrap()
    }

    #[test]
    fn zero_input_zero_bias_encoder_gives_zero() {
        let (m, store) = Stage1Model::new(tiny(), 1).unwrap();
        let mut s = Session::eval(&store);
        let x = s.g.constant(&Tensor::zeros(&[2, 3]));
        let f = m.encode_track(&mut s, 0, x).unwrap();
        assert!(s.g.value(f).data().iter().all(|&v| v == 0.0));
        let bad = s.g.constant(&Tensor::zeros(&[2, 4]));
        assert!(matches!(m.encode_track(&mut s, 0, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn fusion_weights_are_a_simplex_over_five_tracks() {
        let arch = tiny();
        let (m, store) = Stage1Model::new(arch, 2).unwrap();
        let mut s = Session::eval(&store);
        let (_, fusion) = m.latents_var(&mut s, &tracks(4, arch.dims, 0.3)).unwrap();
        assert_eq!(fusion.weights.len(), 2);
        for &w in &fusion.weights {
            assert_eq!(s.g.shape(w), (4, 5));
            for row in s.g.value(w).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tracks_with_identity_value_path_pass_through() {
        let (m, mut store) = Stage1Model::new(tiny(), 3).unwrap();
        for lin in [&m.fuse_v, &m.fuse_o] {
            store.set(lin.w, Tensor::eye(8)).unwrap();
            store.set(lin.b.unwrap(), Tensor::zeros(&[1, 8])).unwrap();
        }
        let f = Tensor::new(&[1, 8], (0..8).map(|k| k as f64 - 3.5).collect()).unwrap();
        let mut s = Session::eval(&store);
        let feats: Vec<Var> = (0..5).map(|_| s.g.constant(&f)).collect();
        let out = m.fuse_attention(&mut s, &feats).unwrap();
        assert!(s.g.value(out.fused).max_abs_diff(&f) < 1e-12);
        assert!(m.fuse_attention(&mut s, &feats[..4]).is_err());
    }

    #[test]
    fn swapping_tracks_changes_nothing() {
        let (m, store) = Stage1Model::new(tiny(), 4).unwrap();
        let mut s = Session::eval(&store);
        let f: Vec<Var> = (0..5)
            .map(|i| {
                let row = (0..8).map(|k| ((i * 8 + k) as f64 * 0.37).cos()).collect();
                s.g.constant(&Tensor::new(&[1, 8], row).unwrap())
            })
            .collect();
        let base = m.fuse_attention(&mut s, &f).unwrap().fused;
        let dup = m.fuse_attention(&mut s, &[f[0], f[1], f[1], f[3], f[4]]).unwrap().fused;
        let dup_swapped = m.fuse_attention(&mut s, &[f[0], f[1], f[1], f[3], f[4]]).unwrap().fused;
        assert_eq!(s.g.value(dup), s.g.value(dup_swapped));
        let swapped = m.fuse_attention(&mut s, &[f[1], f[0], f[2], f[3], f[4]]).unwrap().fused;
        assert!(s.g.value(base).max_abs_diff(s.g.value(swapped)) < 1e-12);
    }

    #[test]
    fn pad_match_identity_and_bias() {
        let (_, mut store) = Stage1Model::new(tiny(), 5).unwrap();
        let mut r = rng::stream(0, "t");
        let lin = Linear::new(&mut store, "pm", 5, 5, &mut r);
        store.set(lin.w, Tensor::eye(5)).unwrap();
        let mut s = Session::eval(&store);
        let f = s.g.constant(&Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let z = pad_match_with(&mut s, &lin, f, 5).unwrap();
        assert_eq!(s.g.value(z).data(), &[1.0, 2.0, 3.0, 0.0, 0.0]);
        let wide = s.g.constant(&Tensor::zeros(&[1, 6]));
        assert!(matches!(pad_match_with(&mut s, &lin, wide, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn latent_shape_and_determinism() {
        let arch = tiny();
        let (m, store) = Stage1Model::new(arch, 6).unwrap();
        for t in [1, 3, 9] {
            let x = tracks(t, arch.dims, 0.0);
            let a = m.latents(&store, &x).unwrap();
            let b = m.latents(&store, &x).unwrap();
            assert_eq!(a.shape(), &[t, arch.d_u]);
            assert_eq!(a, b);
        }
        let (_, again) = Stage1Model::new(arch, 6).unwrap();
        assert_eq!(store.content_hash(), again.content_hash());
    }
}
