//! Unoptimized reference implementations written directly from the scoring
//! formulas. They share no code with the library.

pub const K1: f64 = 1.5;
pub const B: f64 = 0.75;

pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-tokens counts, not normalized.
pub fn embed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for t in tokens(text) {
        v[(fnv1a(t.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// BM25: sum over query terms of idf * f(k1+1) / (f + k1(1 - b + b|D|/avgdl)),
/// idf = ln(1 + (N - df + 0.5)/(df + 0.5)).
pub fn bm25(query: &[String], doc: &[String], corpus: &[Vec<String>], k1: f64, b: f64) -> f64 {
    let n = corpus.len() as f64;
    let avgdl = corpus.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut total = 0.0;
    for q in query {
        let df = corpus.iter().filter(|d| d.contains(q)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let f = doc.iter().filter(|t| *t == q).count() as f64;
        total += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * doc.len() as f64 / avgdl));
    }
    total
}

/// Scans for `CVE-` + 4 digits + `-` + 4..=6 digits not followed by a digit.
pub fn cve_ids(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i + 4 <= bytes.len() {
        if &bytes[i..i + 4] == b"CVE-" {
            let year = &bytes[i + 4..(i + 8).min(bytes.len())];
            if year.len() == 4 && year.iter().all(u8::is_ascii_digit) && bytes.get(i + 8) == Some(&b'-') {
                let start = i + 9;
                let digits = bytes[start..].iter().take_while(|c| c.is_ascii_digit()).count();
                if (4..=6).contains(&digits) {
                    out.push(text[i..start + digits].to_string());
                    i = start + digits;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

pub fn sort_desc(list: &mut [(String, f64)]) {
    list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
}

pub fn min_max(list: &[(String, f64)]) -> Vec<(String, f64)> {
    let max = list.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let min = list.iter().map(|s| s.1).fold(f64::MAX, f64::min);
    list.iter()
        .map(|(id, s)| (id.clone(), if max == min { 1.0 } else { (s - min) / (max - min) }))
        .collect()
}

/// Normalize sparse, union by id, missing component = 0, weighted sum, ranked.
pub fn fuse(sparse: &[(String, f64)], dense: &[(String, f64)], alpha: f64) -> Vec<(String, f64)> {
    let sparse = if sparse.is_empty() { Vec::new() } else { min_max(sparse) };
    let mut ids: Vec<String> = sparse.iter().chain(dense).map(|x| x.0.clone()).collect();
    ids.sort();
    ids.dedup();
    let mut out: Vec<(String, f64)> = ids
        .into_iter()
        .map(|id| {
            let s = sparse.iter().find(|x| x.0 == id).map_or(0.0, |x| x.1);
            let d = dense.iter().find(|x| x.0 == id).map_or(0.0, |x| x.1);
            (id, alpha * s + (1.0 - alpha) * d)
        })
        .collect();
    sort_desc(&mut out);
    out
}

pub struct Corpus {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    tokens: Vec<Vec<String>>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl Corpus {
    pub fn new(chunks: &[(String, String)], dim: usize) -> Self {
        Self {
            ids: chunks.iter().map(|c| c.0.clone()).collect(),
            texts: chunks.iter().map(|c| c.1.clone()).collect(),
            tokens: chunks.iter().map(|c| tokens(&c.1)).collect(),
            vectors: chunks.iter().map(|c| embed(&c.1, dim)).collect(),
            dim,
        }
    }

    /// Chunks with positive BM25 score, ranked.
    pub fn sparse_ranked(&self, query: &str) -> Vec<(String, f64)> {
        let q = tokens(query);
        let n = self.tokens.len() as f64;
        let avgdl = self.tokens.iter().map(|d| d.len() as f64).sum::<f64>() / n;
        let idf: Vec<f64> = q
            .iter()
            .map(|t| {
                let df = self.tokens.iter().filter(|d| d.contains(t)).count() as f64;
                (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
            })
            .collect();
        let mut out: Vec<(String, f64)> = self
            .ids
            .iter()
            .zip(&self.tokens)
            .map(|(id, doc)| {
                let mut s = 0.0;
                for (t, w) in q.iter().zip(&idf) {
                    let f = doc.iter().filter(|x| *x == t).count() as f64;
                    s += w * f * (K1 + 1.0) / (f + K1 * (1.0 - B + B * doc.len() as f64 / avgdl));
                }
                (id.clone(), s)
            })
            .filter(|x| x.1 > 0.0)
            .collect();
        sort_desc(&mut out);
        out
    }

    pub fn dense_ranked(&self, query: &str) -> Vec<(String, f64)> {
        let qv = embed(query, self.dim);
        let mut out: Vec<(String, f64)> = self
            .ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.clone(), (1.0 + cosine(&qv, v)) / 2.0))
            .collect();
        sort_desc(&mut out);
        out
    }

    fn text(&self, id: &str) -> &str {
        &self.texts[self.ids.iter().position(|x| x == id).unwrap()]
    }

    pub fn hybrid(
        &self,
        query: &str,
        alpha: f64,
        (k_sparse, k_dense, k_final): (usize, usize, usize),
        regex: bool,
    ) -> Vec<(String, f64)> {
        let mut sparse = self.sparse_ranked(query);
        sparse.truncate(k_sparse);
        let mut dense = self.dense_ranked(query);
        dense.truncate(k_dense);
        let mut fused = fuse(&sparse, &dense, alpha);
        if regex {
            let qids = cve_ids(query);
            for (id, score) in &mut fused {
                if cve_ids(self.text(id)).iter().any(|c| qids.contains(c)) {
                    *score += 1.0;
                }
            }
            sort_desc(&mut fused);
        }
        fused.truncate(k_final);
        fused
    }

    pub fn dense_only(&self, query: &str, k_dense: usize, k_final: usize) -> Vec<(String, f64)> {
        let mut dense = self.dense_ranked(query);
        dense.truncate(k_dense.min(k_final));
        dense
    }
}
