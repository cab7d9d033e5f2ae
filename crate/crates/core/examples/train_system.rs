//! Builds a clean text classification system: synthetic corpus, word
//! embedding, and every kind of host classifier on top of it.
//!
//! ```text
//! cargo run --release --example train_system
//! ```

use bombworks::classifiers::{self, HostHyper, HostKind};
use bombworks::dataset::{self, SequenceTaskConfig};
use bombworks::embedding::{self, VectorizerConfig};
use bombworks::io::Precision;
use bombworks::numeric::RngStream;

fn main() -> bombworks::Result<()> {
    let rng = RngStream::new(7);
    let corpus = dataset::generate_sequence_task(&SequenceTaskConfig::default(), &mut rng.split(1))?;
    let (train, val) = dataset::split(&corpus, 0.8, &mut rng.split(2))?;
    println!(
        "corpus: {} sequences, vocabulary {}, class counts {:?}",
        corpus.len(),
        corpus.input_size,
        corpus.class_counts()
    );

    let m = embedding::train_embedding(&train, 100, &mut rng.split(3))?;
    println!("embedding: {} x {}", m.dim(), m.vocab());

    let vcfg = VectorizerConfig::default();
    let featurize = |d: &dataset::SequenceDataset| {
        d.samples
            .iter()
            .map(|s| embedding::extract(&m, &embedding::vectorize_tokens(&s.tokens, corpus.input_size, &vcfg)?))
            .collect::<bombworks::Result<Vec<_>>>()
    };
    let (tf, vf) = (featurize(&train)?, featurize(&val)?);

    for kind in [HostKind::Lr, HostKind::Svm, HostKind::Mlp, HostKind::ResMlp(2)] {
        let host = classifiers::train_host(kind, &tf, &train.labels(), 2, &HostHyper::for_kind(kind), &mut rng.split(4))?;
        println!("{kind:>8}: validation accuracy {:.3}", classifiers::accuracy(&host, &vf, &val.labels())?);
    }

    // model files survive a round trip bit for bit at f64
    let bytes = embedding::encode_emb1(&m, Precision::F64);
    let (back, _) = embedding::decode_emb1(&bytes)?;
    println!("EMB1 file: {} bytes, identical after reload: {}", bytes.len(), back == m);
    Ok(())
}
