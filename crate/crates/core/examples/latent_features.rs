//! Latent-space operations on hand-made sequences: compile (normalise,
//! whiten, drop), temporal augmentation, variance pruning and the feature
//! container round trip.

use signx::latentops::container::sort_fold_keys;
use signx::latentops::{
    apply_mask, augment, build_prune_mask, compile, container_read, container_write, AugmentConfig, CompileConfig,
    GlossSpan, LatentSequence,
};
use signx::numcore::Tensor;

fn sequence(t: usize, d: usize, phase: f64) -> signx::error::Result<LatentSequence> {
    let data = (0..t * d)
        .map(|k| {
            let (row, col) = (k / d, k % d);
            // The last column is constant and gets pruned.
            if col == d - 1 { 0.25 } else { ((row as f64 + phase) * (col + 1) as f64 * 0.3).sin() * (col + 1) as f64 }
        })
        .collect();
    let spans = vec![GlossSpan::new(4, 0, t / 2 - 1), GlossSpan::new(7, t / 2, t - 1)];
    LatentSequence::new(Tensor::new(&[t, d], data)?, spans)
}

fn main() -> signx::error::Result<()> {
    let raw: Vec<LatentSequence> = (0..3).map(|i| sequence(12, 6, i as f64)).collect::<Result<_, _>>()?;
    let cfg = CompileConfig { gamma: 0.5, rho: 0.1, seed: 1 };
    let compiled: Vec<LatentSequence> = raw.iter().map(|s| compile(s, &cfg)).collect::<Result<_, _>>()?;
    let q = &compiled[0];
    println!("compiled 12x6: kept frames {:?}", q.mask.iter().map(|&m| m as u8).collect::<Vec<_>>());
    println!("frame -> gloss alignment {:?}", q.align);

    let folds = augment(0, &raw[0], &AugmentConfig { folds: 4, ..AugmentConfig::default() }, 9)?;
    for (key, s) in &folds {
        let spans: Vec<String> = s.spans.iter().map(|sp| format!("{}:{}..={}", sp.gloss, sp.start, sp.end)).collect();
        println!("fold {key}: {} frames, spans {}", s.frames(), spans.join(" "));
    }

    let mask = build_prune_mask(&raw, 1e-3)?;
    println!("prune mask {:?} (effective width {})", mask.mask, mask.effective_width);
    let pruned = apply_mask(&raw[0].z, &mask)?;
    println!("masked shape {}x{}, last column {:?}", pruned.rows(), pruned.cols(), pruned.row(0)[5]);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("folds.sxf");
    let mut records = folds.iter().map(|(k, s)| s.to_record(k.clone())).collect::<Result<Vec<_>, _>>()?;
    sort_fold_keys(&mut records);
    container_write(&path, &records)?;
    let back = container_read(&path)?;
    println!("container round trip: {} records, keys {:?}", back.len(), back.iter().map(|r| r.key.as_str()).collect::<Vec<_>>());
    Ok(())
}
