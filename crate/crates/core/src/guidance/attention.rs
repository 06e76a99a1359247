//! Self-attention taps: capture keys/values in one branch, inject them into another.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Self-attention layers of the mock denoiser, in evaluation order.
pub const MOCK_ATTENTION_LAYERS: [&str; 4] = ["down.0.attn", "mid.attn", "up.0.attn", "up.1.attn"];

/// Decoder-half layers: the default injection set.
pub const DECODER_ATTENTION_LAYERS: [&str; 2] = ["up.0.attn", "up.1.attn"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pass {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Off,
    /// Record q/k/v of every layer.
    Capture,
    /// Replace k/v of the selected layers with the recorded ones.
    Inject,
}

/// Features seen by one attention layer at one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTap {
    pub layer_id: String,
    pub tokens: usize,
    pub dim: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionControl {
    pub mode: AttentionMode,
    pub layers: BTreeSet<String>,
    pass: Pass,
    store: BTreeMap<(String, Pass), AttentionTap>,
}

impl AttentionControl {
    pub fn off() -> Self {
        Self {
            mode: AttentionMode::Off,
            layers: BTreeSet::new(),
            pass: Pass::Conditional,
            store: BTreeMap::new(),
        }
    }

    pub fn capture() -> Self {
        Self {
            mode: AttentionMode::Capture,
            ..Self::off()
        }
    }

    /// Injects from `source` (which must have captured) into `layers`.
    pub fn inject_from(source: &AttentionControl, layers: &BTreeSet<String>) -> Self {
        Self {
            mode: AttentionMode::Inject,
            layers: layers.clone(),
            pass: Pass::Conditional,
            store: source.store.clone(),
        }
    }

    pub fn set_pass(&mut self, pass: Pass) {
        self.pass = pass;
    }

    pub fn is_active(&self) -> bool {
        self.mode != AttentionMode::Off
    }

    pub fn taps(&self) -> impl Iterator<Item = &AttentionTap> {
        self.store.values()
    }

    pub fn tap(&self, layer: &str, pass: Pass) -> Option<&AttentionTap> {
        self.store.get(&(layer.to_string(), pass))
    }

    /// Called by a backend's attention layer. Returns the keys/values the
    /// layer should attend over.
    pub fn route(&mut self, layer: &str, tap: AttentionTap) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.mode {
            AttentionMode::Off => Ok((tap.k, tap.v)),
            AttentionMode::Capture => {
                let kv = (tap.k.clone(), tap.v.clone());
                self.store.insert((layer.to_string(), self.pass), tap);
                Ok(kv)
            }
            AttentionMode::Inject => {
                if !self.layers.contains(layer) {
                    return Ok((tap.k, tap.v));
                }
                let src = self.store.get(&(layer.to_string(), self.pass)).ok_or_else(|| Error::InjectionShape {
                    layer: layer.to_string(),
                    detail: "no features captured from the source branch".into(),
                })?;
                if src.dim != tap.dim || src.k.len() != src.v.len() {
                    return Err(Error::InjectionShape {
                        layer: layer.to_string(),
                        detail: format!(
                            "source dim {} ({} keys, {} values) vs target dim {}",
                            src.dim,
                            src.k.len(),
                            src.v.len(),
                            tap.dim
                        ),
                    });
                }
                Ok((src.k.clone(), src.v.clone()))
            }
        }
    }
}

/// Scaled dot-product attention over row-major token matrices.
pub(crate) fn attend(q: &[f64], k: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    let nq = q.len() / dim;
    let nk = k.len() / dim;
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut logits = vec![0.0; nk];
    for i in 0..nq {
        let qi = &q[i * dim..(i + 1) * dim];
        let mut max = f64::NEG_INFINITY;
        for j in 0..nk {
            let kj = &k[j * dim..(j + 1) * dim];
            logits[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            max = max.max(logits[j]);
        }
        let mut total = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            total += *l;
        }
        let oi = &mut out[i * dim..(i + 1) * dim];
        for j in 0..nk {
            let w = logits[j] / total;
            for (o, vv) in oi.iter_mut().zip(&v[j * dim..(j + 1) * dim]) {
                *o += w * vv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_keys_average_values() {
        let q = vec![1.0, 0.0];
        let k = vec![0.0, 0.0, 0.0, 0.0];
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(attend(&q, &k, &v, 2), vec![2.0, 3.0]);
    }

    #[test]
    fn injection_without_capture_is_an_error() {
        let layers: BTreeSet<String> = ["mid.attn".to_string()].into();
        let mut ctl = AttentionControl::inject_from(&AttentionControl::capture(), &layers);
        let tap = AttentionTap {
            layer_id: "mid.attn".into(),
            tokens: 1,
            dim: 1,
            q: vec![0.0],
            k: vec![0.0],
            v: vec![0.0],
        };
        assert!(matches!(ctl.route("mid.attn", tap), Err(Error::InjectionShape { .. })));
    }
}
