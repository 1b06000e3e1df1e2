//! Trains the frame-to-pose estimator against a frozen pose-fusion encoder
//! and reports held-out reconstruction error. The encoder weights are hashed
//! before and after to show they do not move.

use signx::posespace::{Stage1Arch, Stage1Model, TrackDims};
use signx::synth::{gen_corpus, render_frames, FrameGrid, Split, SynthConfig, Utterance};
use signx::vid2pose::{per_dim_mse, train_stage2, Stage2TrainConfig, Vid2Pose, Vid2PoseArch};

fn main() -> signx::error::Result<()> {
    let corpus = gen_corpus(&SynthConfig { utterances: 40, ..SynthConfig::default() })?;
    let frames: Vec<FrameGrid> = corpus.utterances.iter().map(|u| render_frames(&u.tracks)).collect::<Result<_, _>>()?;
    let (_, mut stage1) = Stage1Model::new(Stage1Arch::desk(corpus.codebook.len()), 5)?;
    let (v, mut store) = Vid2Pose::new(Vid2PoseArch::desk(TrackDims::DESK), 5)?;

    let train: Vec<(&Utterance, &FrameGrid)> =
        corpus.utterances.iter().zip(&frames).filter(|(u, _)| u.split == Split::Train).collect();
    let before = stage1.content_hash();
    let cfg = Stage2TrainConfig { epochs: 6, seed: 5, ..Stage2TrainConfig::default() };
    train_stage2(&v, &mut store, &mut stage1, &train, &cfg, |l| {
        println!("epoch {:>2} lr {:.2e} loss {:.5}", l.epoch, l.lr, l.loss);
    })?;
    println!("frozen encoder unchanged: {}", before == stage1.content_hash());

    for (u, f) in corpus.utterances.iter().zip(&frames).filter(|(u, _)| u.split != Split::Train) {
        let pred = v.predict(&store, f)?;
        println!("#{:<3} {:<5} per-dim MSE {:.5}", u.id, u.split.name(), per_dim_mse(&pred, &u.tracks)?);
    }
    Ok(())
}
