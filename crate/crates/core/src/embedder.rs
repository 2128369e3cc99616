//! Text featurization for agent responses.
//!
//! The default [`HashingEmbedder`] maps each token to a signed bucket and
//! L2-normalizes the accumulated vector. [`RemoteEmbedder`] delegates to an
//! HTTP service instead. Both implement [`Embedder`], which is all the graph
//! builder needs.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{GuardianError, Result};

pub const DEFAULT_DIM: usize = 64;
pub const MIN_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub hash_seed: u64,
    pub lowercase: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            hash_seed: 0x5e_ed0f_9a7d,
            lowercase: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_DIM {
            return Err(GuardianError::Config(format!(
                "embedding dim must be at least {MIN_DIM}, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Anything that turns a response text into a fixed-length vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    cfg: EmbeddingConfig,
}

impl HashingEmbedder {
    pub fn new(cfg: EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.cfg
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(embed(&self.cfg, text))
    }
}

/// Splits on non-alphanumeric characters.
pub fn tokenize(text: &str, lowercase: bool) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(move |t| if lowercase { t.to_lowercase() } else { t.to_string() })
}

// FNV-1a followed by a splitmix64 finalizer so that nearby seeds diverge.
fn hash_token(token: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Signed feature hashing with L2 normalization. The empty text (or any text
/// without alphanumeric tokens) maps to the zero vector.
pub fn embed(cfg: &EmbeddingConfig, text: &str) -> Vec<f64> {
    let mut v = vec![0.0; cfg.dim];
    let sign_seed = mix64(cfg.hash_seed ^ 0xa5a5_a5a5_a5a5_a5a5);
    for token in tokenize(text, cfg.lowercase) {
        let bucket = (hash_token(&token, cfg.hash_seed) % cfg.dim as u64) as usize;
        let sign = if hash_token(&token, sign_seed) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

/// Delegates embedding to `POST {url}` with `{"text": ...}`, expecting
/// `{"vector": [...]}` of length `dim`.
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GuardianError::Embedding(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            dim,
            client,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest { text })
            .send()
            .map_err(|e| GuardianError::Embedding(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GuardianError::Embedding(format!("{} returned {status}", self.url)));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| GuardianError::Embedding(format!("bad response body: {e}")))?;
        if body.vector.len() != self.dim {
            return Err(GuardianError::Embedding(format!(
                "expected {} dims, got {}",
                self.dim,
                body.vector.len()
            )));
        }
        if body.vector.iter().any(|v| !v.is_finite()) {
            return Err(GuardianError::Embedding("non-finite component".into()));
        }
        Ok(body.vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    }

    #[test]
    fn empty_text_is_zero() {
        let cfg = EmbeddingConfig::default();
        assert!(embed(&cfg, "").iter().all(|&x| x == 0.0));
        assert!(embed(&cfg, " ,.;! ").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_and_order_free() {
        let cfg = EmbeddingConfig::default();
        let a = embed(&cfg, "the quick brown fox");
        assert_eq!(a, embed(&cfg, "the quick brown fox"));
        assert_eq!(embed(&cfg, "alpha beta"), embed(&cfg, "beta  ALPHA"));
        assert!((norm(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn case_sensitive_when_lowercase_off() {
        let cfg = EmbeddingConfig {
            lowercase: false,
            ..EmbeddingConfig::default()
        };
        let corpus = ["Alpha", "BETA", "Gamma", "DELTA", "Epsilon"];
        let differ = corpus
            .iter()
            .filter(|w| embed(&cfg, w) != embed(&cfg, &w.to_lowercase()))
            .count();
        assert!(differ >= 4);
    }

    #[test]
    fn seed_changes_outputs() {
        let a = EmbeddingConfig::default();
        let b = EmbeddingConfig {
            hash_seed: a.hash_seed + 1,
            ..a
        };
        let differ = (0..100)
            .map(|i| format!("response number {i} with token w{}", i * 7))
            .filter(|s| embed(&a, s) != embed(&b, s))
            .count();
        assert!(differ >= 99, "{differ}");
    }

    #[test]
    fn simulator_answers_are_separable() {
        let cfg = EmbeddingConfig::default();
        let texts: Vec<String> = (0..6)
            .map(|j| format!("Answer: t7opt{j}. Reasoning: Debate the question and state your answer. 2"))
            .collect();
        for i in 0..texts.len() {
            for j in i + 1..texts.len() {
                let c = cosine(&embed(&cfg, &texts[i]), &embed(&cfg, &texts[j]));
                assert!(c < 0.99, "{i} {j} {c}");
            }
        }
    }

    #[test]
    fn rejects_tiny_dim() {
        assert!(HashingEmbedder::new(EmbeddingConfig {
            dim: 4,
            ..EmbeddingConfig::default()
        })
        .is_err());
    }

    fn serve_once(status: &'static str, body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; content_length];
            reader.read_exact(&mut buf).unwrap();
            assert!(String::from_utf8(buf).unwrap().contains("\"text\""));
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        });
        format!("http://{addr}/embed")
    }

    #[test]
    fn remote_embedder_round_trip() {
        let url = serve_once("200 OK", r#"{"vector": [0.5, 0.5, 0.5, 0.5, 0, 0, 0, 0]}"#);
        let e = RemoteEmbedder::new(url, 8, Duration::from_secs(5)).unwrap();
        assert_eq!(e.embed("hello").unwrap()[0], 0.5);
    }

    #[test]
    fn remote_embedder_surfaces_errors() {
        let url = serve_once("500 Internal Server Error", "{}");
        let e = RemoteEmbedder::new(url, 8, Duration::from_secs(5)).unwrap();
        assert!(matches!(e.embed("x"), Err(GuardianError::Embedding(_))));

        let url = serve_once("200 OK", r#"{"vector": [1.0]}"#);
        let e = RemoteEmbedder::new(url, 8, Duration::from_secs(5)).unwrap();
        assert!(e.embed("x").unwrap_err().to_string().contains("expected 8"));
    }
}
