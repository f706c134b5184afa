//! Synthetic CVE benchmark for exercising retrieval without a model.
//!
//! Each question names a CVE id. The gold record paraphrases the question and
//! carries a unique evidence marker. Decoy records repeat the question
//! verbatim with a different CVE id, so a bag-of-words embedder prefers the
//! decoys, BM25 is pulled towards the gold record by the rare id token, and
//! the id boost always surfaces it. Question `i` gets `i % 6` decoys.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::SourceDocument;
use crate::eval::BenchmarkQuestion;
use crate::generation::AnswerSpace;

const PRODUCTS: [&str; 10] = [
    "nginx",
    "openssl",
    "libpng",
    "tomcat",
    "postgresql",
    "firefox",
    "jenkins",
    "wordpress",
    "sudo",
    "busybox",
];
const COMPONENTS: [&str; 6] = [
    "parser",
    "scheduler",
    "upload handler",
    "auth module",
    "session cache",
    "renderer",
];
const FLAWS: [&str; 6] = [
    "heap overflow",
    "path traversal",
    "use after free",
    "sql injection",
    "cross site scripting",
    "integer underflow",
];
const FILLER: [&str; 8] = [
    "Vendors shipped a fix in the following maintenance release.",
    "Administrators should upgrade promptly.",
    "Public exploit code has not been observed.",
    "The advisory credits an external researcher.",
    "Mitigations include restricting network exposure.",
    "Logs may show malformed requests prior to exploitation.",
    "The weakness was introduced by a refactoring.",
    "Default configurations are affected.",
];

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub documents: Vec<SourceDocument>,
    pub questions: Vec<BenchmarkQuestion>,
}

pub fn cve_id(i: usize) -> String {
    format!("CVE-2024-{}", 31000 + 7 * i)
}

fn decoy_cve_id(i: usize, j: usize) -> String {
    format!("CVE-2023-{}", 40000 + 11 * i + j)
}

/// Builds `n_questions` true/false questions over a corpus of gold and decoy
/// CVE records. Every document is shorter than 512 characters.
pub fn generate(n_questions: usize, seed: u64) -> SyntheticBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = Vec::new();
    let mut questions = Vec::new();
    for i in 0..n_questions {
        let id = cve_id(i);
        let product = PRODUCTS[i % PRODUCTS.len()];
        let component = COMPONENTS[rng.gen_range(0..COMPONENTS.len())];
        let flaw = FLAWS[rng.gen_range(0..FLAWS.len())];
        let version = format!("{}.{}", rng.gen_range(1..9), rng.gen_range(0..20));
        let evidence = format!("evidence-marker-{i:03}");
        let filler = FILLER.choose(&mut rng).copied().unwrap_or_default();

        let question =
            format!("Does {id} let attackers exploit a {flaw} in the {product} {component} before version {version}?");
        documents.push(SourceDocument {
            doc_id: format!("gold-{i:03}"),
            text: format!(
                "{id} lets attackers exploit a {flaw} in the {product} {component}. Fixed in version {version}. Reference {evidence}. {filler}"
            ),
            metadata: BTreeMap::from([("cve".to_string(), id.clone())]),
        });
        // Questions cycle through 0..=5 decoys so difficulty varies.
        for j in 0..(i % 6) {
            let other = decoy_cve_id(i, j);
            documents.push(SourceDocument {
                doc_id: format!("decoy-{i:03}-{j}"),
                text: format!(
                    "Does {other} let attackers exploit a {flaw} in the {product} {component} before version {version}? Yes."
                ),
                metadata: BTreeMap::from([("cve".to_string(), other)]),
            });
        }
        questions.push(BenchmarkQuestion {
            qid: format!("syn-{i:03}"),
            question,
            options: Vec::new(),
            answer_space: AnswerSpace::true_false(),
            gold_label: if rng.gen_bool(0.5) { "T" } else { "F" }.into(),
            gold_evidence: Some(evidence),
        });
    }
    SyntheticBenchmark { documents, questions }
}
