//! HTTP denoiser: `POST {endpoint}/predict_noise` with base64 f32 payloads.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AttentionControl, BackendKind, Capabilities, Condition, DenoiserBackend};
use crate::error::{Error, Result};
use crate::scene::Image;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    pub timeout_secs: f64,
    pub attempts: u32,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
    /// Side length of the square pixel-space arrays the service consumes.
    pub image_size: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000".into(),
            timeout_secs: 60.0,
            attempts: 3,
            backoff_ms: 200,
            image_size: 64,
        }
    }
}

pub fn encode_f32(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| Error::Remote(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Remote("payload length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// JSON POST with timeout and exponential-backoff retries.
pub(crate) fn post_json(url: &str, body: &Value, timeout_secs: f64, attempts: u32, backoff_ms: u64) -> Result<Value> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
        .build()
        .into();
    let mut last = String::new();
    for attempt in 0..attempts.max(1) {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(backoff_ms << (attempt - 1)));
        }
        match agent.post(url).send_json(body) {
            Ok(mut resp) => match resp.body_mut().read_json::<Value>() {
                Ok(v) => return Ok(v),
                Err(e) => last = format!("invalid response body: {e}"),
            },
            Err(e) => last = e.to_string(),
        }
        log::warn!("request to {url} failed (attempt {}): {last}", attempt + 1);
    }
    Err(Error::Remote(format!("{url}: {last} after {} attempts", attempts.max(1))))
}

pub(crate) fn image_payload(img: &Image) -> Value {
    json!({
        "shape": [img.height, img.width, img.channels],
        "b64": encode_f32(&img.data),
    })
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    pub config: RemoteConfig,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self { config }
    }

    fn model_for(cond: &Condition) -> &'static str {
        if cond.view.is_some() {
            "zero123"
        } else if cond.depth.is_some() {
            "sd_depth"
        } else {
            "sd"
        }
    }

    fn condition_json(cond: &Condition) -> Value {
        let mut c = serde_json::Map::new();
        if let Some(p) = &cond.prompt {
            c.insert("prompt".into(), json!(p));
        }
        if let Some(v) = &cond.view {
            c.insert("reference".into(), image_payload(&v.reference));
            // row-major rotation
            let r: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| v.rotation[(i, j)]).collect();
            c.insert("rotation".into(), json!(r));
            c.insert("translation".into(), json!([v.translation.x, v.translation.y, v.translation.z]));
        }
        if let Some(d) = &cond.depth {
            c.insert("depth".into(), image_payload(d));
        }
        Value::Object(c)
    }

    fn request(&self, x_t: &Image, cond: &Condition, t: usize, cfg: f64, attn: &AttentionControl) -> Result<Image> {
        if attn.is_active() {
            return Err(Error::Capability {
                backend: "Remote".into(),
                capability: "attention taps",
            });
        }
        let body = json!({
            "model": Self::model_for(cond),
            "t": t,
            "cfg": cfg,
            "shape": [x_t.height, x_t.width, x_t.channels],
            "input_b64": encode_f32(&x_t.data),
            "condition": Self::condition_json(cond),
        });
        let url = format!("{}/predict_noise", self.config.endpoint.trim_end_matches('/'));
        let c = &self.config;
        let resp = post_json(&url, &body, c.timeout_secs, c.attempts, c.backoff_ms)?;
        let eps = resp
            .get("eps_b64")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Remote("response lacks eps_b64".into()))?;
        let data = decode_f32(eps)?;
        if data.len() != x_t.data.len() {
            return Err(Error::Remote(format!(
                "eps has {} values, expected {}",
                data.len(),
                x_t.data.len()
            )));
        }
        Ok(Image { data, ..x_t.clone() })
    }
}

impl DenoiserBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            view: true,
            depth: true,
            attention: false,
        }
    }

    fn image_size(&self) -> (usize, usize) {
        (self.config.image_size, self.config.image_size)
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (3, self.config.image_size, self.config.image_size)
    }

    fn encode(&self, image: &Image) -> Result<Image> {
        Ok(image.map(|v| 2.0 * v - 1.0))
    }

    fn encode_adjoint(&self, grad: &Image) -> Result<Image> {
        Ok(grad.map(|g| 2.0 * g))
    }

    fn decode(&self, latent: &Image) -> Result<Image> {
        Ok(latent.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
    }

    fn predict_noise(&self, x_t: &Image, cond: &Condition, t: usize, attn: &mut AttentionControl) -> Result<Image> {
        self.request(x_t, cond, t, 1.0, attn)
    }

    /// Guidance is applied server-side in a single request.
    fn predict_guided(
        &self,
        x_t: &Image,
        cond: &Condition,
        t: usize,
        cfg: f64,
        attn: &mut AttentionControl,
    ) -> Result<Image> {
        self.request(x_t, cond, t, cfg, attn)
    }

    fn fingerprint(&self) -> String {
        sha256_hex(self.config.endpoint.as_bytes())
    }
}

#[cfg(test)]
pub(crate) mod test_server {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use serde_json::Value;

    /// Serves `handler(path, body) -> (status, json)` on a loopback port.
    pub fn spawn<F>(handler: F) -> (String, Arc<AtomicUsize>)
    where
        F: Fn(usize, &str, &Value) -> (u16, Value) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() {
                    continue;
                }
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut len = 0;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h == "\r\n" || h.is_empty() {
                        break;
                    }
                    let lower = h.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let json: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, out) = handler(n, &path, &json);
                let text = out.to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
            }
        });
        (addr, hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::Ordering;

    #[test]
    fn round_trips_the_wire_envelope_with_retries() {
        let (addr, hits) = test_server::spawn(|n, path, body| {
            assert_eq!(path, "/predict_noise");
            if n < 2 {
                return (503, json!({"error": "busy"}));
            }
            assert_eq!(body["model"], "sd");
            assert_eq!(body["cfg"], 7.5);
            let data = decode_f32(body["input_b64"].as_str().unwrap()).unwrap();
            let eps: Vec<f64> = data.iter().map(|v| -v).collect();
            (200, json!({"eps_b64": encode_f32(&eps)}))
        });
        let backend = RemoteBackend::new(RemoteConfig {
            endpoint: addr,
            timeout_secs: 5.0,
            attempts: 3,
            backoff_ms: 1,
            image_size: 4,
        });
        let x = Image::filled(4, 4, 3, 0.25);
        let eps = backend
            .predict_guided(&x, &Condition::text("p"), 10, 7.5, &mut AttentionControl::off())
            .unwrap();
        assert!(eps.data.iter().all(|&v| v == -0.25));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_the_configured_attempts() {
        let (addr, hits) = test_server::spawn(|_, _, _| (500, json!({})));
        let backend = RemoteBackend::new(RemoteConfig {
            endpoint: addr,
            timeout_secs: 5.0,
            attempts: 3,
            backoff_ms: 1,
            image_size: 4,
        });
        let err = backend.predict_noise(&Image::new(4, 4, 3), &Condition::text("p"), 1, &mut AttentionControl::off());
        assert!(matches!(err, Err(Error::Remote(_))));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn attention_taps_are_unsupported() {
        let backend = RemoteBackend::new(RemoteConfig::default());
        let err = backend.predict_noise(&Image::new(4, 4, 3), &Condition::text("p"), 1, &mut AttentionControl::capture());
        assert!(matches!(err, Err(Error::Capability { .. })));
    }
}
