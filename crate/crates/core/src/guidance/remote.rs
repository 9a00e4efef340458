//! HTTP client for the image-text scoring service.

use std::thread;
use std::time::Duration;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::wire::{TensorPayload, CONTENT_TYPE};
use super::{Caption, GuidanceResult, Scorer};
use crate::error::{Error, Result};
use crate::real::Real;

/// Bounded exponential backoff for transport failures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 3, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

/// Static metadata reported by `GET /v1/info`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model: String,
    pub resolution: usize,
    pub embedding_dim: usize,
}

#[derive(Serialize)]
struct EmbedTextRequest<'a> {
    captions: &'a [String],
}

#[derive(Deserialize)]
struct LossTrailer {
    loss: f64,
}

const RESPONSE_LIMIT: u64 = 256 << 20;

#[derive(Clone, Debug)]
pub struct ServiceClient {
    base: String,
    agent: ureq::Agent,
    pub retry: RetryPolicy,
}

struct Reply {
    body: Vec<u8>,
    loss: Option<String>,
}

fn transport(err: ureq::Error) -> Error {
    match err {
        ureq::Error::BadUri(u) => Error::Config(format!("bad endpoint url: {u}")),
        other => Error::Transport(other.to_string()),
    }
}

impl ServiceClient {
    pub fn new(endpoint: &str) -> Self {
        Self::with_timeout(endpoint, Duration::from_secs(120))
    }

    pub fn with_timeout(endpoint: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { base: endpoint.trim_end_matches('/').to_string(), agent, retry: RetryPolicy::default() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn once(&self, send: &dyn Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Reply> {
        let mut resp = send().map_err(transport)?;
        let status = resp.status().as_u16();
        let loss = resp.headers().get("x-loss").and_then(|v| v.to_str().ok()).map(str::to_string);
        let body = resp
            .body_mut()
            .with_config()
            .limit(RESPONSE_LIMIT)
            .read_to_vec()
            .map_err(transport)?;
        match status {
            200..=299 => Ok(Reply { body, loss }),
            429 | 502 | 503 | 504 => Err(Error::Transport(format!("service returned HTTP {status}"))),
            _ => Err(Error::Protocol(format!(
                "service returned HTTP {status}: {}",
                String::from_utf8_lossy(&body).trim()
            ))),
        }
    }

    fn call(&self, send: &dyn Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Reply> {
        let mut attempt = 0;
        loop {
            match self.once(send) {
                Err(e) if e.is_transport() && attempt < self.retry.retries => {
                    let wait = self.retry.delay(attempt);
                    log::warn!("{e}; retrying in {wait:?}");
                    thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn health(&self) -> Result<()> {
        let url = self.url("/v1/health");
        self.call(&|| self.agent.get(&url).call()).map(|_| ())
    }

    pub fn info(&self) -> Result<ModelInfo> {
        let url = self.url("/v1/info");
        let reply = self.call(&|| self.agent.get(&url).call())?;
        serde_json::from_slice(&reply.body).map_err(|e| Error::Protocol(format!("bad /v1/info body: {e}")))
    }

    pub fn embed_text(&self, captions: &[String]) -> Result<Vec<Vec<f32>>> {
        if captions.is_empty() {
            return Err(Error::Argument("no captions to embed".into()));
        }
        let url = self.url("/v1/embed_text");
        let body = serde_json::to_vec(&EmbedTextRequest { captions }).expect("captions serialize");
        let reply = self.call(&|| {
            self.agent.post(&url).header("content-type", "application/json").send(&body[..])
        })?;
        rows(TensorPayload::decode(&reply.body)?, captions.len())
    }

    pub fn embed_image(&self, images: &[ArrayView3<'_, f32>]) -> Result<Vec<Vec<f32>>> {
        let first = images.first().ok_or_else(|| Error::Argument("no images to embed".into()))?;
        let (h, w, c) = first.dim();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dim() != (h, w, c) {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", (h, w, c), img.dim())));
            }
            data.extend(img.iter().copied());
        }
        let body = TensorPayload::new(vec![images.len(), h, w, c], data)?.encode();
        let url = self.url("/v1/embed_image");
        let reply = self.call(&|| self.agent.post(&url).header("content-type", CONTENT_TYPE).send(&body[..]))?;
        rows(TensorPayload::decode(&reply.body)?, images.len())
    }

    /// Loss `-⟨g(image), h(caption)⟩` and its pixel gradient.
    pub fn image_grad(&self, image: ArrayView3<'_, f32>, caption: &str) -> Result<(f64, Array3<f32>)> {
        let (h, w, c) = image.dim();
        let body = TensorPayload::new(vec![1, h, w, c], image.iter().copied().collect())?.encode();
        let url = self.url("/v1/image_grad");
        let reply = self.call(&|| {
            self.agent.post(&url).query("caption", caption).header("content-type", CONTENT_TYPE).send(&body[..])
        })?;
        let trailer = reply.loss.ok_or_else(|| Error::Protocol("image_grad response lacks x-loss".into()))?;
        let loss = serde_json::from_str::<LossTrailer>(&trailer)
            .map_err(|e| Error::Protocol(format!("bad x-loss value `{trailer}`: {e}")))?
            .loss;
        let grad = TensorPayload::decode(&reply.body)?;
        if grad.shape != [1, h, w, c] {
            return Err(Error::Protocol(format!("gradient shape {:?} for a {h}x{w}x{c} image", grad.shape)));
        }
        let grad = Array3::from_shape_vec((h, w, c), grad.data).expect("shape checked");
        Ok((loss, grad))
    }
}

fn rows(payload: TensorPayload, expected: usize) -> Result<Vec<Vec<f32>>> {
    match payload.shape[..] {
        [n, d] if n == expected => Ok(payload.data.chunks(d.max(1)).take(n).map(<[f32]>::to_vec).collect()),
        _ => Err(Error::Protocol(format!("expected [{expected}, D] embeddings, got {:?}", payload.shape))),
    }
}

/// Items for [`embed_batch`].
#[derive(Clone, Copy, Debug)]
pub enum EmbedItems<'a> {
    Captions(&'a [String]),
    Images(&'a [Array3<f32>]),
}

impl EmbedItems<'_> {
    pub fn len(&self) -> usize {
        match self {
            EmbedItems::Captions(c) => c.len(),
            EmbedItems::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embeds `items` in chunks of `batch_size`, with at most `in_flight`
/// requests outstanding. Every returned row is checked to be unit norm.
pub fn embed_batch(client: &ServiceClient, items: EmbedItems<'_>, batch_size: usize, in_flight: usize) -> Result<Vec<Vec<f32>>> {
    if items.is_empty() {
        return Err(Error::Argument("empty embedding batch".into()));
    }
    let batch_size = batch_size.max(1);
    let ranges: Vec<(usize, usize)> =
        (0..items.len()).step_by(batch_size).map(|s| (s, (s + batch_size).min(items.len()))).collect();
    let run = |(s, e): (usize, usize)| match items {
        EmbedItems::Captions(c) => client.embed_text(&c[s..e]),
        EmbedItems::Images(imgs) => {
            let views: Vec<_> = imgs[s..e].iter().map(|i| i.view()).collect();
            client.embed_image(&views)
        }
    };
    let mut out = Vec::with_capacity(items.len());
    for group in ranges.chunks(in_flight.max(1)) {
        let results: Vec<Result<Vec<Vec<f32>>>> = thread::scope(|scope| {
            let handles: Vec<_> = group.iter().map(|&r| scope.spawn(move || run(r))).collect();
            handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
        });
        for r in results {
            out.extend(r?);
        }
    }
    for (i, row) in out.iter().enumerate() {
        let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Protocol(format!("embedding {i} has norm {norm}")));
        }
    }
    Ok(out)
}

/// Scores renders through the remote service.
#[derive(Debug)]
pub struct RemoteScorer {
    pub client: ServiceClient,
    pub caption: Caption,
    pub info: ModelInfo,
}

impl RemoteScorer {
    /// Connects and fetches the model metadata.
    pub fn connect(client: ServiceClient, caption: impl Into<String>) -> Result<Self> {
        let info = client.info()?;
        Ok(Self { client, caption: Caption::new(caption), info })
    }

    /// The caption embedding, requested once and cached.
    pub fn caption_embedding(&mut self) -> Result<&[f32]> {
        if self.caption.embedding.is_none() {
            let mut rows = self.client.embed_text(std::slice::from_ref(&self.caption.text))?;
            self.caption.embedding = rows.pop();
        }
        Ok(self.caption.embedding.as_deref().expect("embedding cached"))
    }
}

impl<F: Real> Scorer<F> for RemoteScorer {
    fn input_resolution(&self) -> Option<usize> {
        Some(self.info.resolution)
    }

    fn score(&mut self, image: ArrayView3<'_, F>, _target: Option<ArrayView3<'_, F>>) -> Result<GuidanceResult<F>> {
        self.caption_embedding()?;
        let pixels = image.mapv(|v| v.to_f64_lossy() as f32);
        let (loss, grad) = self.client.image_grad(pixels.view(), &self.caption.text)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Protocol("service returned a non-finite loss or gradient".into()));
        }
        Ok(GuidanceResult { loss, image_gradient: grad.mapv(|g| F::lit(g as f64)) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_millis(2000));
    }

    #[test]
    fn unreachable_service_is_a_transport_error() {
        // Port 9 on localhost is closed in the sandbox.
        let client = ServiceClient::with_timeout("http://127.0.0.1:9", Duration::from_secs(2))
            .with_retry(RetryPolicy { retries: 1, base_delay: Duration::from_millis(1) });
        assert!(client.health().unwrap_err().is_transport());
    }

    #[test]
    fn rows_checks_shape() {
        let p = TensorPayload::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(rows(p.clone(), 2).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(rows(p, 3).is_err());
    }
}
