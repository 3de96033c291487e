//! Writes region features, word vectors and answers to disk in the formats
//! the loaders expect, reads them back, and encodes a question.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_core::data::{AnswerVocabulary, FeatureStore};
use vqa_core::encoders::{load_word_vectors, pad_trim, tokenize};
use vqa_core::tensor::Tensor;

fn main() -> vqa_core::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| vqa_core::Error::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut store = FeatureStore::new(4, 3);
    for id in ["img_a", "img_b", "img_c"] {
        let data = (0..12).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect();
        store.insert(id, Tensor::matrix(4, 3, data)?)?;
    }
    let (bin, idx) = (dir.path().join("regions.vqaf"), dir.path().join("regions.idx"));
    store.write(&bin, &idx)?;
    let loaded = FeatureStore::load(&bin, &idx)?;
    println!(
        "feature store: {} images, {}×{} each, {} bytes on disk, round trip equal: {}",
        loaded.len(),
        loaded.regions(),
        loaded.dim(),
        std::fs::metadata(&bin).map(|m| m.len()).unwrap_or(0),
        loaded == store
    );
    println!("img_b region 2: {:?}", loaded.get("img_b")?.row(2));

    let vectors = dir.path().join("vectors.txt");
    std::fs::write(&vectors, "what 0.1 0.2\ncolor 0.3 -0.1\nis 0.0 0.5\nthe -0.2 0.2\n")
        .map_err(|e| vqa_core::Error::Data(e.to_string()))?;
    let (vocab, table) = load_word_vectors(&vectors)?;
    println!("vocabulary: {:?}", vocab.tokens());
    let q = pad_trim(&tokenize("What colour is the cat?"), &vocab, 8)?;
    println!("encoded question: {:?} (true length {})", q.indices, q.len);
    println!("embedding rows trainable: {:?}", table.trainable);

    let counts = [("red", 5), ("blue", 9), ("green", 5)]
        .into_iter()
        .map(|(a, c)| (a.to_string(), c))
        .collect();
    let answers = AnswerVocabulary::from_counts(&counts);
    println!("answers by frequency: {:?}", answers.answers());
    Ok(())
}
