//! Acceptance report: one PASS/FAIL line per criterion, then a nonzero exit
//! if any criterion failed.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;

use signx::config::RunConfig;
use signx::decoder::{beam_decode, DecodeConfig, StepModel};
use signx::error::Result;
use signx::evalkit::{bleu, edit_counts, wer};
use signx::latentops::augment::fold_key;
use signx::latentops::{apply_mask, augment, build_prune_mask, container_read, container_write, AugmentConfig, GlossSpan, LatentSequence};
use signx::nn::{causal_mask, Dropout, GruCell, LayerNorm, MultiHeadAttention, Session};
use signx::numcore::{grad_check, Graph, OptimizerState, ParamStore, Tensor, Var};
use signx::pipeline::{full_scale_shapes, sha256_file, Pipeline, Stage, REPORT, STAGE1};
use signx::posespace::codebook::{BOS, EOS};
use signx::posespace::{composite_stage1_loss, contrastive_loss, text_loss, word_match_loss, LossWeights};
use signx::recognizer::{average_checkpoints, batch_loss, ctc_loss, kd_loss, lipschitz_reg, noam_lr, Recognizer, RecognizerArch, TrainSchedule};
use signx::rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(name: &str, started: Instant, limit: Duration) -> std::result::Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("{name} took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "acceptance");
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

// ---------------------------------------------------------------- CTC oracle

/// -log of the summed probability of every frame path collapsing to `target`.
fn brute_ctc(lp: &[Vec<f64>], target: &[usize]) -> f64 {
    let t = lp.len();
    let v = lp[0].len();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % v;
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &p in &path {
            if p != prev && p != 0 {
                collapsed.push(p);
            }
            prev = p;
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &p)| lp[i][p]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn all_sequences(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &a in alphabet {
                let mut e: Vec<usize> = s.clone();
                e.push(a);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn ctc_oracle() -> Outcome {
    let started = Instant::now();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for frames in 1..=6 {
        let lp: Vec<Vec<f64>> = (0..frames)
            .map(|i| log_softmax(random(1, 3, 100 + i as u64 + 10 * frames as u64).data()))
            .collect();
        let lpt = Tensor::from_rows(&lp).unwrap();
        for target in all_sequences(&[1, 2], frames) {
            let want = brute_ctc(&lp, &target);
            let mut g = Graph::new();
            let x = g.constant(&lpt);
            match ctc_loss(&mut g, x, &target) {
                Ok(l) => {
                    let got = g.scalar_value(l);
                    worst = worst.max((got - want).abs());
                    ensure((got - want).abs() <= 1e-8, || format!("T'={frames} target {target:?}: {got} vs brute force {want}"))?;
                }
                Err(e) => ensure(want.is_infinite(), || format!("T'={frames} target {target:?}: error {e} but brute force gives {want}"))?,
            }
            checked += 1;
        }
    }
    within("CTC oracle", started, Duration::from_secs(10))?;
    Ok(format!("{checked} (T', target) pairs, max |diff| {worst:.2e}"))
}

// ------------------------------------------------------------- gradient suite

/// Runs `body` inside a training session (dropout off) sharing `g`.
fn in_session(store: &ParamStore, g: &mut Graph, body: impl FnOnce(&mut Session) -> Result<Var>) -> Result<Var> {
    let mut s = Session::train(store, Dropout::default(), rng::stream(0, "grad"));
    s.g = std::mem::take(g);
    let out = body(&mut s);
    *g = std::mem::take(&mut s.g);
    out
}

fn sum_sq(g: &mut Graph, y: Var) -> Var {
    let sq = g.square(y);
    g.sum(sq)
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(y);
    let w = random(r, c, seed).data().to_vec();
    let p = g.mul_const(y, w)?;
    Ok(g.sum(p))
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut r = rng::stream(3, "grad-init");
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    let attn = MultiHeadAttention::new(&mut store, "attn", 6, 2, &mut r);
    let gru = GruCell::new(&mut store, "gru", 6, 4, &mut r);
    let (rec, rec_store) = Recognizer::new(
        RecognizerArch {
            branch: 4,
            conv_width: 6,
            hidden: 3,
            rnn_layers: 1,
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn: 8,
            teacher_width: 5,
            teacher_blocks: 1,
            ..RecognizerArch::desk(6, 7)
        },
        5,
    )
    .map_err(|e| e.to_string())?;
    let teacher = random(3, 7, 11);
    let text_targets = [4usize, 5, 2];

    type Check<'a> = (&'a str, Tensor, Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>);
    let checks: Vec<Check> = vec![
        ("layer_norm", random(4, 6, 1), Box::new(|g, x| {
            let y = in_session(&store, g, |s| ln.forward(s, x))?;
            weighted_sum(g, y, 21)
        })),
        ("attention", random(5, 6, 2), Box::new(|g, x| {
            let mask = causal_mask(5);
            let y = in_session(&store, g, |s| Ok(attn.forward(s, x, x, Some(&mask))?.out))?;
            weighted_sum(g, y, 22)
        })),
        ("conv branches", random(9, 6, 3), Box::new(|g, x| {
            let y = in_session(&rec_store, g, |s| Ok(rec.conv_stack(s, &[x])?.0[0]))?;
            weighted_sum(g, y, 23)
        })),
        ("recurrent cell", random(5, 6, 4), Box::new(|g, x| {
            let y = in_session(&store, g, |s| gru.run(s, x))?;
            weighted_sum(g, y, 24)
        })),
        ("bidirectional recurrent layer", random(4, 6, 5), Box::new(|g, x| {
            let y = in_session(&rec_store, g, |s| rec.birnn(s, x))?;
            weighted_sum(g, y, 25)
        })),
        ("decoder with cross-attention", random(3, 8, 6), Box::new(|g, x| {
            let y = in_session(&rec_store, g, |s| Ok(rec.decode(s, x, &[BOS, 4, 5])?.0))?;
            weighted_sum(g, y, 26)
        })),
        ("CTC", random(6, 4, 7), Box::new(|g, x| {
            let lp = g.log_softmax_rows(x);
            ctc_loss(g, lp, &[1, 2, 2])
        })),
        ("KD", random(3, 7, 8), Box::new(|g, x| kd_loss(g, x, &teacher, &[0.5, 1.0, 1.5]))),
        ("Lipschitz regulariser", random(5, 4, 9), Box::new(|g, x| {
            let y = g.scale(x, 3.0);
            lipschitz_reg(g, y, 1.0)
        })),
        ("text loss", random(3, 7, 10), Box::new(|g, x| text_loss(g, x, &text_targets, 0.1))),
        ("word-match loss", random(3, 5, 11), Box::new(|g, x| {
            let truth = g.constant(&random(3, 5, 31));
            word_match_loss(g, x, truth)
        })),
        ("contrastive loss", random(3, 5, 12), Box::new(|g, x| {
            let cand = g.constant(&random(4, 5, 32));
            contrastive_loss(g, x, cand, &[0, 2, 3], 0.2)
        })),
        ("composite Stage-1 loss", random(3, 5, 13), Box::new(|g, x| {
            let t = text_loss(g, x, &[1, 2, 4], 0.1)?;
            let truth = g.constant(&random(3, 5, 33));
            let w = word_match_loss(g, x, truth)?;
            let cand = g.constant(&random(3, 5, 34));
            let c = contrastive_loss(g, x, cand, &[0, 1, 2], 0.2)?;
            composite_stage1_loss(g, t, w, c, &LossWeights { text: 1.0, word: 0.5, contrast: 0.3 })
        })),
        ("row product and pooling", random(7, 3, 14), Box::new(|g, x| {
            let row = g.constant(&random(1, 3, 35));
            let y = g.mul_row(x, row)?;
            let y = g.max_pool_segments(y, &[4, 3])?;
            Ok(sum_sq(g, y))
        })),
    ];
    let mut worst = (0.0f64, "");
    for (name, x, f) in &checks {
        let err = grad_check(|g, v| f(g, v), x, 1e-5).map_err(|e| format!("{name}: {e}"))?;
        ensure(err < 1e-4, || format!("{name}: relative error {err:.3e}"))?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    within("gradient suite", started, Duration::from_secs(60))?;
    Ok(format!("{} checks, worst {:.2e} ({})", checks.len(), worst.0, worst.1))
}

// -------------------------------------------------------------- beam oracle

/// Logits are a fixed pseudo-random function of the whole prefix.
struct Toy {
    vocab: usize,
    seed: u64,
}

impl StepModel for Toy {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn step(&self, prefix: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let keys: Vec<u64> = prefix.iter().map(|&t| t as u64).collect();
        let mut r = rng::keyed(self.seed, "toy-model", &keys);
        Ok(((0..self.vocab).map(|_| r.gen_range(-3.0..3.0)).collect(), vec![vec![1.0]]))
    }
}

/// Highest-scoring EOS-terminated sequence of at most `max_len` tokens.
fn exhaustive(m: &Toy, banned: &[usize], max_len: usize) -> (Vec<usize>, f64) {
    fn go(m: &Toy, banned: &[usize], prefix: &mut Vec<usize>, score: f64, left: usize, best: &mut (Vec<usize>, f64)) {
        if left == 0 {
            return;
        }
        let lp = log_softmax(&m.step(prefix).unwrap().0);
        for (w, &l) in lp.iter().enumerate() {
            if banned.contains(&w) {
                continue;
            }
            if w == EOS {
                if score + l > best.1 {
                    *best = (prefix[1..].to_vec(), score + l);
                }
            } else {
                prefix.push(w);
                go(m, banned, prefix, score + l, left - 1, best);
                prefix.pop();
            }
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    go(m, banned, &mut vec![BOS], 0.0, max_len, &mut best);
    best
}

fn beam_oracle() -> Outcome {
    let started = Instant::now();
    let mut mismatches = Vec::new();
    for i in 0..100u64 {
        let vocab = 3 + (i % 2) as usize;
        let max_len = 1 + (i / 2 % 4) as usize;
        let m = Toy { vocab, seed: 1000 + i };
        let cfg = DecodeConfig {
            beam: vocab,
            alpha: 0.0,
            top_k: vocab,
            max_len,
            banned: vec![BOS],
            ..DecodeConfig::default()
        };
        let got = beam_decode(&m, &cfg).map_err(|e| e.to_string())?;
        let (want, score) = exhaustive(&m, &cfg.banned, max_len);
        if got.tokens != want || (got.score - score).abs() > 1e-12 {
            mismatches.push(format!("model {i} (|V|={vocab}, T_max={max_len}): beam {:?} {:.4} vs exhaustive {want:?} {score:.4}", got.tokens, got.score));
        }
    }
    within("beam oracle", started, Duration::from_secs(30))?;
    ensure(mismatches.is_empty(), || format!("{}/100 differ; first: {}", mismatches.len(), mismatches[0]))?;
    Ok("100 random prefix-dependent models, |V| in {3,4}, T_max 1..4".into())
}

// ----------------------------------------------------------- entropy flip

struct Crafted {
    high: Vec<f64>,
}

impl StepModel for Crafted {
    fn vocab(&self) -> usize {
        6
    }

    fn step(&self, prefix: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut logits = vec![-1e9; 6];
        let attn = match prefix {
            [_] => {
                logits[4] = 0.05;
                logits[5] = 0.0;
                vec![vec![1.0, 0.0, 0.0]]
            }
            [_, 4] => {
                logits[EOS] = 0.0;
                vec![self.high.clone()]
            }
            _ => {
                logits[EOS] = 0.0;
                vec![vec![0.0, 1.0, 0.0]]
            }
        };
        Ok((logits, attn))
    }
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum()
}

fn entropy_flip() -> Outcome {
    // Distribution (q, (1-q)/2, (1-q)/2) with entropy exactly 1 nat.
    let (mut lo, mut hi) = (1.0 / 3.0, 1.0);
    for _ in 0..200 {
        let q = 0.5 * (lo + hi);
        if entropy(&[q, (1.0 - q) / 2.0, (1.0 - q) / 2.0]) > 1.0 {
            lo = q;
        } else {
            hi = q;
        }
    }
    let q = 0.5 * (lo + hi);
    let m = Crafted {
        high: vec![q, (1.0 - q) / 2.0, (1.0 - q) / 2.0],
    };
    let gap = log_softmax(&[0.05, 0.0]);
    ensure(((gap[0] - gap[1]) - 0.05).abs() < 1e-12, || "log-prob gap is not 0.05".into())?;
    let run = |alpha| {
        beam_decode(&m, &DecodeConfig { beam: 2, alpha, top_k: 6, max_len: 3, ..DecodeConfig::default() })
            .map(|r| r.tokens)
            .map_err(|e| e.to_string())
    };
    let (a0, a1) = (run(0.0)?, run(0.1)?);
    ensure(a0 == vec![4] && a1 == vec![5], || format!("alpha 0 -> {a0:?}, alpha 0.1 -> {a1:?}"))?;
    Ok("alpha 0 selects A, alpha 0.1 selects B".into())
}

// ------------------------------------------------------------------ Noam

fn noam() -> Outcome {
    let (d, w) = (256usize, 4000u64);
    let lr = |t| noam_lr(t, d, w).map_err(|e| e.to_string());
    let reference = 1.0 / (16.0 * 4000f64.sqrt());
    let at_w = lr(w)?;
    ensure((at_w - reference).abs() <= 1e-12, || format!("eta(W) = {at_w}, expected {reference}"))?;
    let warm_branch = w as f64 / (16.0 * (w as f64).powf(1.5));
    ensure((warm_branch - reference).abs() <= 1e-15, || "branches disagree at t = W".into())?;
    let (left, right) = (lr(w - 1)?, lr(w + 1)?);
    ensure((at_w - left).abs() < 1e-3 * at_w && (at_w - right).abs() < 1e-3 * at_w, || "jump at t = W".into())?;
    let samples: Vec<u64> = (1..=1000).map(|i| i * 8).collect();
    let values = samples.iter().map(|&t| lr(t)).collect::<std::result::Result<Vec<_>, _>>()?;
    for (pair, v) in samples.windows(2).zip(values.windows(2)) {
        let ok = if pair[1] <= w { v[1] > v[0] } else if pair[0] >= w { v[1] < v[0] } else { true };
        ensure(ok, || format!("not monotone between t={} and t={}", pair[0], pair[1]))?;
    }
    Ok(format!("eta(4000) = {at_w:.6e}; increasing to W, decreasing after (1000 samples)"))
}

// ------------------------------------------------------------ full-width shapes

fn shapes() -> Outcome {
    let started = Instant::now();
    let r = full_scale_shapes(16, 16, 7).map_err(|e| e.to_string())?;
    let checks = [
        ("track concat", r.track_concat, 1959),
        ("Stage-2 output total", r.vid2pose_widths.iter().sum(), 1959),
        ("unified width", r.unified_width, 2048),
        ("frames in", r.frames_in, 16),
        ("frames out", r.frames_out, 4),
        ("recurrent width", r.recurrent_width, 1024),
        ("refinement layers", r.refine_layers, 6),
        ("refinement width", r.refine_width, 256),
    ];
    for (name, got, want) in checks {
        ensure(got == want, || format!("{name}: {got}, expected {want}"))?;
    }
    within("full-width shapes", started, Duration::from_secs(120))?;
    Ok(format!("1959 -> 2048, T 16 -> 4, recurrent 1024, 6 x 256 ({:.1}s)", started.elapsed().as_secs_f64()))
}

// ----------------------------------------------------------------- pruning

fn pruning() -> Outcome {
    let spreads = [0.0, 0.01, 0.2, 0.3, 1.0, 0.05, 2.0, 0.0];
    let offsets = [1.0, -2.0, 0.5, 0.0, 3.0, 0.0, -1.0, 0.25];
    let tau = 0.05;
    let d = spreads.len();
    let mut batch = Vec::new();
    for (b, len) in [7usize, 9, 8].into_iter().enumerate() {
        let mut data = Vec::with_capacity(len * d);
        for t in 0..len {
            for k in 0..d {
                let wave = ((t * 7 + b * 3 + k) % 5) as f64 - 2.0;
                data.push(offsets[k] + spreads[k] * wave);
            }
        }
        let mut seq = LatentSequence::new(Tensor::new(&[len, d], data).unwrap(), vec![GlossSpan::new(4, 0, len - 1)]).unwrap();
        // An invalid frame with huge values must not count.
        seq.mask[2] = false;
        for v in &mut seq.z.data_mut()[2 * d..3 * d] {
            *v = 1e6;
        }
        batch.push(seq);
    }
    // Independent two-pass unbiased variance over valid frames.
    let rows: Vec<&[f64]> = batch
        .iter()
        .flat_map(|s| s.z.data().chunks(d).zip(&s.mask).filter(|(_, &m)| m).map(|(r, _)| r))
        .collect();
    let n = rows.len() as f64;
    let want: Vec<bool> = (0..d)
        .map(|k| {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0) >= tau
        })
        .collect();
    let mask = build_prune_mask(&batch, tau).map_err(|e| e.to_string())?;
    ensure(mask.mask == want, || format!("mask {:?}, expected {want:?}", mask.mask))?;
    ensure(want.iter().any(|m| !m) && want.iter().any(|&m| m), || "engineered batch should keep and drop dims".into())?;
    let masked = apply_mask(&batch[0].z, &mask).map_err(|e| e.to_string())?;
    ensure(masked.shape() == batch[0].z.shape(), || "masking changed the shape".into())?;

    // Masked input dims get zero gradient through three optimizer steps.
    let arch = RecognizerArch {
        branch: 4,
        conv_width: 6,
        hidden: 4,
        rnn_layers: 1,
        d_model: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn: 8,
        teacher_width: 5,
        teacher_blocks: 1,
        ..RecognizerArch::desk(d, 6)
    };
    let (model, mut store) = Recognizer::new(arch, 9).map_err(|e| e.to_string())?;
    model.set_mask(&mut store, &mask.mask).map_err(|e| e.to_string())?;
    let sched = TrainSchedule::default();
    let mut opt = OptimizerState::new(&store, sched.adam);
    let refs: Vec<&LatentSequence> = batch.iter().collect();
    let first_layers: Vec<(usize, signx::numcore::ParamId)> = model.stages[0]
        .branches
        .iter()
        .map(|b| (b.kernel, b.conv.w))
        .chain([(3, model.teacher.stem.w)])
        .collect();
    for step in 0..3 {
        let grads = {
            let mut s = Session::train(&store, sched.dropout, rng::keyed(1, "prune-steps", &[step]));
            let loss = batch_loss(&model, &mut s, &refs, &[1.0; 6], &sched, false).map_err(|e| e.to_string())?;
            let g = s.g.backward(loss.total).map_err(|e| e.to_string())?;
            s.g.store_grads(&g, &store)
        };
        for &(k, id) in &first_layers {
            let gw = grads.get(id).ok_or("missing first-layer gradient")?;
            let cols = store.get(id).cols();
            for tap in 0..k {
                for (dim, keep) in mask.mask.iter().enumerate() {
                    let row = &gw[(tap * d + dim) * cols..(tap * d + dim + 1) * cols];
                    ensure(*keep || row.iter().all(|&v| v == 0.0), || format!("step {step}: masked dim {dim} has gradient"))?;
                }
            }
        }
        opt.step(&mut store, &grads, 1e-3).map_err(|e| e.to_string())?;
    }
    Ok(format!("mask {:?} (width {} -> {}), zero gradient on masked dims for 3 steps", mask.mask, d, mask.effective_width))
}

// ------------------------------------------------------------ augmentation

fn augmentation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sources: Vec<LatentSequence> = (0..3)
        .map(|i| LatentSequence::new(random(8 + i, 5, 40 + i as u64), vec![GlossSpan::new(4, 0, 3), GlossSpan::new(5, 4, 7 + i)]).unwrap())
        .collect();
    let mut records = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        for (key, seq) in augment(i, s, &AugmentConfig::default(), 7).map_err(|e| e.to_string())? {
            records.push(seq.to_record(key).map_err(|e| e.to_string())?);
        }
    }
    let path = dir.path().join("aug.sxf");
    container_write(&path, &records).map_err(|e| e.to_string())?;
    let keys: Vec<String> = container_read(&path).map_err(|e| e.to_string())?.into_iter().map(|r| r.key).collect();
    let want: Vec<String> = (0..3).flat_map(|i| (0..10).map(move |j| format!("{i}_{j}"))).collect();
    ensure(keys == want, || format!("keys {keys:?}"))?;
    ensure(fold_key(2, 9) == "2_9", || "fold key scheme".into())?;
    for (i, s) in sources.iter().enumerate() {
        for (_, seq) in augment(i, s, &AugmentConfig::identity(10), 7).map_err(|e| e.to_string())? {
            ensure(seq.z.data() == s.z.data() && seq.spans == s.spans && seq.mask == s.mask, || format!("identity fold of source {i} differs"))?;
        }
    }
    Ok("30 records \"0_0\"..\"2_9\"; identity folds equal their source".into())
}

// ----------------------------------------------------------------- metrics

fn levenshtein(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let sub = levenshtein(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = levenshtein(&a[1..], b, memo) + 1;
    let ins = levenshtein(a, &b[1..], memo) + 1;
    let v = sub.min(del).min(ins);
    memo.insert((a.len(), b.len()), v);
    v
}

fn metrics() -> Outcome {
    let seqs = all_sequences(&[0, 1, 2], 6);
    let mut pairs = 0u64;
    for h in &seqs {
        for r in &seqs {
            let want = levenshtein(h, r, &mut HashMap::new());
            let c = edit_counts(h, r);
            ensure(c.errors() == want && c.n == r.len(), || format!("edit counts {h:?} vs {r:?}"))?;
            if r.is_empty() {
                ensure(wer(h, r).is_err(), || "empty reference must be undefined".into())?;
            } else {
                let w = wer(h, r).map_err(|e| e.to_string())?.0;
                ensure(w == want as f64 / r.len() as f64, || format!("WER {h:?} vs {r:?}"))?;
            }
            pairs += 1;
        }
    }
    let toks = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let b = bleu(&[toks("A A A")], &[toks("A B")], 1).map_err(|e| e.to_string())?;
    ensure(b[0] == 1.0 / 3.0, || format!("BLEU-1 {}", b[0]))?;
    let w = wer(&toks("A X C D"), &toks("A B C D")).map_err(|e| e.to_string())?.0;
    ensure(w == 0.25, || format!("WER {w}"))?;
    Ok(format!("{pairs} pairs exhaustive; BLEU-1 = 1/3 and WER = 0.25 exact"))
}

// ------------------------------------------------------- checkpoint averaging

fn averaging() -> Outcome {
    let names = ["a.w", "b.b", "c.w"];
    let shapes = [(3, 4), (1, 5), (2, 2)];
    let cks: Vec<Vec<(String, Tensor)>> = (0..5)
        .map(|k| names.iter().zip(shapes).enumerate().map(|(i, (n, (r, c)))| (n.to_string(), random(r, c, 100 * k + i as u64))).collect())
        .collect();
    let avg = average_checkpoints(&cks).map_err(|e| e.to_string())?;
    for (name, t) in &avg {
        let i = names.iter().position(|n| n == name).ok_or("unknown tensor")?;
        for (j, v) in t.data().iter().enumerate() {
            let mut s = 0.0;
            for ck in &cks {
                s += ck[i].1.data()[j];
            }
            ensure((v - s / 5.0).abs() <= 1e-12, || format!("{name}[{j}]"))?;
        }
    }
    ensure(avg.len() == names.len(), || "tensor count".into())?;
    Ok("5 checkpoints x 3 tensors match elementwise means".into())
}

// ----------------------------------------------------------- end to end

struct Run {
    seconds: f64,
    dev_wer: f64,
    test_wer: f64,
    stage1_before: String,
    stage1_after: String,
    held_out_mse: f64,
}

fn run_pipeline(dir: &Path) -> std::result::Result<Run, String> {
    let started = Instant::now();
    let mut p = Pipeline::new(RunConfig::default(), dir).map_err(|e| e.to_string())?;
    p.verbose = std::env::var_os("SIGNX_VERBOSE").is_some();
    let mut stage1_before = String::new();
    let mut stage1_after = String::new();
    let mut held_out_mse = f64::NAN;
    for stage in Stage::ALL {
        if stage == Stage::Stage2 {
            stage1_before = sha256_file(&dir.join(STAGE1)).map_err(|e| e.to_string())?;
        }
        let out = p.run(stage).map_err(|e| format!("{}: {e}", stage.name()))?;
        if stage == Stage::Stage2 {
            stage1_after = sha256_file(&dir.join(STAGE1)).map_err(|e| e.to_string())?;
            held_out_mse = out.summary.metrics["held_out_mse"].as_f64().unwrap_or(f64::NAN);
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    let report = std::fs::read_to_string(dir.join(REPORT)).map_err(|e| e.to_string())?;
    let wer_of = |split: &str| -> std::result::Result<f64, String> {
        report
            .lines()
            .find(|l| l.starts_with(&format!("{split},")))
            .and_then(|l| l.split(',').nth(1))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("no {split} row in report"))
    };
    Ok(Run {
        seconds,
        dev_wer: wer_of("dev")?,
        test_wer: wer_of("test")?,
        stage1_before,
        stage1_after,
        held_out_mse,
    })
}

fn dir_digest(dir: &Path) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        out.push((name, sha256_file(&p).map_err(|e| e.to_string())?));
    }
    out.sort();
    Ok(out)
}

fn end_to_end(first: &std::result::Result<Run, String>, a: &Path) -> Outcome {
    let run = first.as_ref().map_err(|e| e.clone())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(b.path())?;
    let (da, db) = (dir_digest(a)?, dir_digest(b.path())?);
    let same = da == db;
    let detail = format!(
        "dev WER {:.4} (<= 0.10), test WER {:.4} (<= 0.15), {:.0}s (< 900s), rerun identical: {same}",
        run.dev_wer, run.test_wer, run.seconds
    );
    ensure(run.dev_wer <= 0.10 && run.test_wer <= 0.15 && run.seconds < 900.0 && same, || detail.clone())?;
    Ok(detail)
}

fn stage_separation(first: &std::result::Result<Run, String>) -> Outcome {
    let run = first.as_ref().map_err(|e| e.clone())?;
    let detail = format!("Stage-1 hash unchanged: {}, held-out MSE {:.4} (< 0.05)", run.stage1_before == run.stage1_after, run.held_out_mse);
    ensure(run.stage1_before == run.stage1_after && run.held_out_mse < 0.05, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, f: &dyn Fn() -> Outcome| {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s]: {detail}");
            }
        }
    };
    report("CTC oracle equivalence", &ctc_oracle);
    report("Gradient suite", &gradient_suite);
    report("Beam-search oracle", &beam_oracle);
    report("Entropy-penalty flip", &entropy_flip);
    report("Noam schedule", &noam);
    report("Full-width shape contracts", &shapes);
    report("Pruning mask and zero gradient", &pruning);
    report("Augmentation keys and identity fold", &augmentation);
    report("Metrics", &metrics);
    let dir = tempfile::tempdir().expect("temp dir");
    let first = run_pipeline(dir.path());
    report("End-to-end convergence and determinism", &|| end_to_end(&first, dir.path()));
    report("Stage separation", &|| stage_separation(&first));
    report("Checkpoint averaging", &averaging);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
