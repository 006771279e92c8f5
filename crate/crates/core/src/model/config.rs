use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::N_VARS;
use crate::error::{Error, Result};
use crate::multires::{BandSpec, WaveletFamily};
use crate::retrieval::RetrievalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Fc,
    Gnn,
    #[default]
    LocAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub kind: TransferKind,
    /// FC transfer: inverse-distance weights instead of a plain mean.
    #[serde(default = "yes")]
    pub idw: bool,
    /// GNN transfer: edge weight `exp(-d / tau_km)`.
    #[serde(default = "default_tau")]
    pub tau_km: f64,
}

fn yes() -> bool {
    true
}

fn default_tau() -> f64 {
    100.0
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            kind: TransferKind::LocAttn,
            idw: true,
            tau_km: default_tau(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Deterministic,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_loc: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Key width of the location-attention transfer.
    pub d_k: usize,
    /// Context hours `L_x`.
    pub lx: usize,
    /// Horizon hours `L_y`.
    pub ly: usize,
    /// Decomposition depth `J`; 0 forecasts the raw series as one band.
    pub wavelet_levels: usize,
    pub wavelet_family: WaveletFamily,
    pub use_retrieval: bool,
    pub retrieval: RetrievalConfig,
    pub transfer: TransferConfig,
    pub head: HeadKind,
    /// Context lengths that each get a linear map from the target's own
    /// context (and retrieved contexts) to the forecast, added to the
    /// network output. Must contain `lx` unless empty; empty disables it.
    #[serde(default = "default_highway_contexts")]
    pub highway_contexts: Vec<usize>,
}

fn default_highway_contexts() -> Vec<usize> {
    vec![96, 48, 24, 0]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            d_loc: 16,
            heads: 2,
            layers: 2,
            d_ff: 32,
            d_k: 8,
            lx: 96,
            ly: 48,
            wavelet_levels: 3,
            wavelet_family: WaveletFamily::Haar,
            use_retrieval: true,
            retrieval: RetrievalConfig::default(),
            transfer: TransferConfig::default(),
            head: HeadKind::Deterministic,
            highway_contexts: default_highway_contexts(),
        }
    }
}

/// Static shape of one band's sub-model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandLayout {
    pub name: String,
    /// Flattened coefficient sequences carried by this band.
    pub seqs: Vec<usize>,
    pub ctx_len: usize,
    pub horizon_len: usize,
    pub in_channels: usize,
    pub k: usize,
}

impl BandLayout {
    pub fn out_channels(&self) -> usize {
        self.seqs.len()
    }
}

impl ModelConfig {
    /// Plain retrieval-free encoder–decoder on the raw series.
    pub fn no_retrieval() -> Self {
        Self {
            wavelet_levels: 0,
            use_retrieval: false,
            retrieval: RetrievalConfig::new(vec![50]).expect("valid"),
            ..Self::default()
        }
    }

    /// Single-band retrieval model with `k` stations.
    pub fn retrieval_only(k: usize) -> Self {
        Self {
            wavelet_levels: 0,
            retrieval: RetrievalConfig::new(vec![k]).expect("k > 0"),
            ..Self::default()
        }
    }

    pub fn band_spec(&self) -> Option<BandSpec> {
        (self.wavelet_levels > 0).then(|| BandSpec {
            levels: self.wavelet_levels,
            family: self.wavelet_family,
            ..BandSpec::default()
        })
    }

    pub fn n_bands(&self) -> usize {
        self.wavelet_levels.max(1)
    }

    pub fn band_names(&self) -> Vec<String> {
        match self.band_spec() {
            Some(s) => s.band_names(),
            None => vec!["full".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_loc == 0 || self.d_ff == 0 || self.d_k == 0 {
            return bad("model widths must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ly == 0 {
            return bad("ly must be at least 1".into());
        }
        if let Some(spec) = self.band_spec() {
            spec.validate()?;
            spec.check_len(self.lx)?;
            spec.check_len(self.ly)?;
        }
        self.retrieval.validate()?;
        if self.retrieval.ks.len() != self.n_bands() {
            return bad(format!(
                "{} retrieval sizes for {} bands",
                self.retrieval.ks.len(),
                self.n_bands()
            ));
        }
        if !(self.transfer.tau_km > 0.0) {
            return bad("tau_km must be positive".into());
        }
        if !self.highway_contexts.is_empty() {
            if !self.highway_contexts.contains(&self.lx) {
                return bad(format!("highway_contexts must include lx = {}", self.lx));
            }
            for (i, &c) in self.highway_contexts.iter().enumerate() {
                self.check_context_len(c)?;
                if self.highway_contexts[..i].contains(&c) {
                    return bad(format!("highway context {c} listed twice"));
                }
            }
        }
        Ok(())
    }

    pub fn bands(&self) -> Vec<BandLayout> {
        let names = self.band_names();
        match self.band_spec() {
            None => vec![BandLayout {
                name: names[0].clone(),
                seqs: vec![0],
                ctx_len: self.lx,
                horizon_len: self.ly,
                in_channels: N_VARS,
                k: self.retrieval.ks[0],
            }],
            Some(spec) => (0..spec.n_bands())
                .map(|b| {
                    let seqs = spec.band_sequences(b);
                    let shift = seqs[0] + 1;
                    BandLayout {
                        name: names[b].clone(),
                        in_channels: N_VARS * seqs.len(),
                        seqs,
                        ctx_len: self.lx >> shift,
                        horizon_len: self.ly >> shift,
                        k: self.retrieval.ks[b],
                    }
                })
                .collect(),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn has_highway(&self) -> bool {
        !self.highway_contexts.is_empty()
    }

    /// Shortest highway context covering `c` hours.
    pub fn highway_for(&self, c: usize) -> Option<usize> {
        self.highway_contexts.iter().copied().filter(|&h| h >= c).min()
    }

    /// Context length accepted for the target: zero, or divisible by `2^J`
    /// and at most `lx`.
    pub fn check_context_len(&self, c: usize) -> Result<()> {
        if c == 0 {
            return Ok(());
        }
        if c > self.lx {
            return Err(Error::Config(format!(
                "target context {c} exceeds lx = {}",
                self.lx
            )));
        }
        if let Some(spec) = self.band_spec() {
            spec.check_len(c)?;
        }
        Ok(())
    }
}
