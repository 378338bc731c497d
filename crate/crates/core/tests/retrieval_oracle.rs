use proptest::prelude::*;

use oncex_core::corpus::{Document, PatientCorpus};
use oncex_core::retrieval::{build_index, vector_retrieve, HashEmbedder, Query};

const WORDS: [&str; 16] = [
    "melanoma", "braf", "nivolumab", "biopsy", "stage", "scan", "lesion", "brain", "dose", "infusion",
    "negative", "positive", "nodal", "patient", "follow", "review",
];

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 2..8).prop_map(|w| {
        let mut s = w.join(" ");
        s[..1].make_ascii_uppercase();
        s + ". "
    })
}

fn corpus() -> impl Strategy<Value = PatientCorpus> {
    prop::collection::vec(prop::collection::vec(sentence(), 1..8), 1..5).prop_map(|docs| {
        let docs = docs
            .into_iter()
            .enumerate()
            .map(|(i, s)| Document::new(format!("doc{i}"), "p", s.concat()))
            .collect();
        PatientCorpus::from_documents("p", docs, 90)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn top_k_matches_brute_force(c in corpus(), q in sentence(), seed in 0u64..4) {
        let emb = HashEmbedder::new(seed, 64);
        let index = build_index(&c, &emb).unwrap();
        let qv = emb.embed_one(&q);
        let mut oracle: Vec<(f64, String, usize)> = c
            .chunks
            .iter()
            .map(|ch| (cosine(&emb.embed_one(&ch.text), &qv), ch.document_id.clone(), ch.chunk_index))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for k in [1usize, 4, 8, 16] {
            let got = vector_retrieve(&index, &emb, &Query { text: q.clone(), top_k: k }).unwrap();
            prop_assert_eq!(got.len(), k.min(c.chunks.len()));
            for (g, o) in got.iter().zip(&oracle) {
                prop_assert!((g.score - o.0).abs() < 1e-12);
                // chunks with equal scores up to rounding may swap places
                let exact = (&g.document_id, g.chunk_index) == (&o.1, o.2);
                let tied = oracle.iter().any(|x| x.1 == g.document_id && x.2 == g.chunk_index && (x.0 - o.0).abs() < 1e-12);
                prop_assert!(exact || tied);
            }
            let mut keys: Vec<_> = got.iter().map(|g| (g.document_id.clone(), g.chunk_index)).collect();
            keys.sort();
            keys.dedup();
            prop_assert_eq!(keys.len(), got.len());
        }
    }
}

#[test]
fn zero_k_is_rejected() {
    let emb = HashEmbedder::new(0, 16);
    let c = PatientCorpus::from_documents("p", vec![Document::new("d", "p", "Stage IIIB.")], 100);
    let index = build_index(&c, &emb).unwrap();
    assert!(vector_retrieve(&index, &emb, &Query { text: "stage".into(), top_k: 0 }).is_err());
}

#[test]
fn embedding_is_seeded_and_normalized() {
    let a = HashEmbedder::new(1, 32).embed_one("BRAF V600E detected");
    let b = HashEmbedder::new(1, 32).embed_one("BRAF V600E detected");
    let c = HashEmbedder::new(2, 32).embed_one("BRAF V600E detected");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
}
