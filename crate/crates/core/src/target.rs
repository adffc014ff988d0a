//! What the measurement pipelines need from a model, so the same sweep
//! and attribution code runs against the built-in model or a remote one.

use serde::{Deserialize, Serialize};

use crate::attribution::{SpanAttributions, SpanTag};
use crate::error::{Error, Result};
use crate::format::parse_output;
use crate::model::TrainedModel;
use crate::robustness::noise_sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCapabilities {
    pub supports_decode: bool,
    pub supports_noise: bool,
    pub supports_gradients: bool,
    pub embedding_dim: usize,
    pub max_len: usize,
    /// Whether one noise draw is kept for the whole decode.
    pub noise_fixed_per_decode: bool,
    pub name: String,
}

impl TargetCapabilities {
    pub fn validate(&self) -> Result<()> {
        if (self.supports_gradients || self.supports_noise) && !self.supports_decode {
            return Err(Error::Protocol(
                "noise and gradient support require decode support".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian noise of variance `sigma2` drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRequest {
    pub sigma2: f64,
    pub seed: u64,
}

/// Attributions of a clean decode, one score per input token for each span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAttribution {
    pub decoded: Vec<String>,
    pub label: Vec<f64>,
    pub rationale: Vec<f64>,
    pub total: Vec<f64>,
}

impl TargetAttribution {
    pub fn spans(&self) -> SpanAttributions {
        use crate::attribution::AttributionVector as V;
        SpanAttributions {
            label: V::new(self.label.clone(), SpanTag::Label),
            rationale: V::new(self.rationale.clone(), SpanTag::Rationale),
            total: V::new(self.total.clone(), SpanTag::Total),
        }
    }
}

pub trait MeasurementTarget {
    fn capabilities(&self) -> &TargetCapabilities;

    /// Greedy decode of already-serialized input tokens; the returned
    /// tokens end with EOS unless the length cap was hit.
    fn decode(&mut self, input: &[String], noise: Option<NoiseRequest>) -> Result<Vec<String>>;

    /// Label, rationale and total attributions for the clean decode. All
    /// three are always returned, so an unparseable decode or an empty
    /// rationale is an error whichever `span` the caller is after.
    fn attribute(&mut self, input: &[String], span: SpanTag) -> Result<TargetAttribution>;
}

/// The built-in model, called directly.
#[derive(Debug, Clone)]
pub struct LocalTarget {
    model: TrainedModel,
    caps: TargetCapabilities,
}

impl LocalTarget {
    pub fn new(model: TrainedModel) -> Self {
        let caps = TargetCapabilities {
            supports_decode: true,
            supports_noise: true,
            supports_gradients: true,
            embedding_dim: model.params.config.d_model,
            max_len: model.max_decode_len,
            noise_fixed_per_decode: true,
            name: format!("builtin {}", model.mode),
        };
        LocalTarget { model, caps }
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }
}

impl MeasurementTarget for LocalTarget {
    fn capabilities(&self) -> &TargetCapabilities {
        &self.caps
    }

    fn decode(&mut self, input: &[String], noise: Option<NoiseRequest>) -> Result<Vec<String>> {
        let ids = self.model.vocab.encode(input)?;
        let sample = match noise {
            Some(NoiseRequest { sigma2, seed }) if sigma2 != 0.0 => {
                Some(noise_sample(ids.len(), self.caps.embedding_dim, sigma2, seed)?)
            }
            _ => None,
        };
        let trace = self.model.decode_ids(&ids, sample.as_ref())?;
        Ok(self.model.vocab.decode(&trace.decoded))
    }

    fn attribute(&mut self, input: &[String], _span: SpanTag) -> Result<TargetAttribution> {
        let ids = self.model.vocab.encode(input)?;
        let trace = self.model.decode_ids(&ids, None)?;
        let decoded = self.model.vocab.decode(&trace.decoded);
        let parsed = parse_output(&decoded)?;
        let a = SpanAttributions::compute(&self.model.params, &trace, &parsed)?;
        Ok(TargetAttribution {
            decoded,
            label: a.label.values,
            rationale: a.rationale.values,
            total: a.total.values,
        })
    }
}
