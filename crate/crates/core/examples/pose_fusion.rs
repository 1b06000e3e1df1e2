//! Trains the pose-fusion latent encoder for a few epochs on a small corpus,
//! then extracts per-frame latents and greedy-decodes one training utterance.

use signx::posespace::{train_stage1, Stage1Arch, Stage1Model, Stage1TrainConfig};
use signx::synth::{gen_corpus, Split, SynthConfig, Utterance};

fn main() -> signx::error::Result<()> {
    let corpus = gen_corpus(&SynthConfig { utterances: 60, ..SynthConfig::default() })?;
    let train: Vec<&Utterance> = corpus.split(Split::Train).collect();
    let (model, mut store) = Stage1Model::new(Stage1Arch::desk(corpus.codebook.len()), 3)?;
    println!("{} trainable parameters", store.num_trainable());

    let cfg = Stage1TrainConfig { epochs: 8, seed: 3, ..Stage1TrainConfig::default() };
    train_stage1(&model, &mut store, &train, &cfg, |l| {
        println!(
            "epoch {:>2} tf {:.2} text {:.3} word {:.3} contrast {:.3} total {:.3}",
            l.epoch, l.teacher_forcing, l.text, l.word, l.contrast, l.total
        );
    })?;

    let u = train[0];
    let z = model.latents(&store, &u.tracks)?;
    println!("utterance #{}: {} frames -> latents {}x{}", u.id, u.frames(), z.rows(), z.cols());
    let hyp = model.greedy_decode(&store, &u.tracks, u.glosses.len() + 2)?;
    println!("reference {:?}", corpus.codebook.decode(&u.glosses)?);
    println!("greedy    {:?}", corpus.codebook.decode(&hyp)?);
    Ok(())
}
