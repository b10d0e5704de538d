//! Trains TQE and NQE embeddings on a toy two-class set and compares the
//! trace distance of the embedded classes with the fixed ZZ map.
use qmargin::embed::{embedded_trace_distance, train_embedding, EmbedTrainConfig, EmbeddingModel, EmbeddingSpec, Scheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> qmargin::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 4;
    let data: Vec<(Vec<f64>, usize)> = (0..32)
        .map(|i| {
            let y = i % 2;
            let centre = if y == 0 { 0.8 } else { 2.2 };
            ((0..n).map(|_| centre + rng.gen_range(-0.5..0.5)).collect(), y)
        })
        .collect();
    let config = EmbedTrainConfig {
        epochs: 10,
        batch_size: 8,
        learning_rate: 0.01,
        ..EmbedTrainConfig::default()
    };
    for scheme in [Scheme::ZzFixed, Scheme::Tqe, Scheme::Nqe] {
        let model = EmbeddingModel::new(EmbeddingSpec::new(scheme, n)?, 0)?;
        let before = embedded_trace_distance(&model, &data)?;
        let trained = train_embedding(&model, &data, &config)?;
        println!(
            "{scheme:?}: trainable={} D_tr {before:.4} -> {:.4} (best epoch {})",
            model.n_trainable(),
            embedded_trace_distance(&trained.model, &data)?,
            trained.best_epoch
        );
    }
    Ok(())
}
