//! Labeled per-layer activation records.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    InPolicy,
    OutOfPolicy,
    Unlabeled,
}

impl Label {
    pub fn to_byte(self) -> u8 {
        match self {
            Label::InPolicy => 0,
            Label::OutOfPolicy => 1,
            Label::Unlabeled => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::InPolicy),
            1 => Some(Label::OutOfPolicy),
            2 => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

/// Source of per-layer activations, 1-based layer indices.
pub trait ActivationSource {
    fn layer(&self, layer: usize) -> Option<Cow<'_, [f64]>>;
}

/// One conversation's final-token hidden states, one `f32` vector per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub conversation_id: String,
    pub category: String,
    pub label: Label,
    /// `layers[l - 1]` holds layer `l`.
    pub layers: Vec<Vec<f32>>,
}

impl ActivationRecord {
    pub fn layer_f64(&self, layer: usize) -> Option<Vec<f64>> {
        let values = self.layers.get(layer.checked_sub(1)?)?;
        Some(values.iter().map(|&v| f64::from(v)).collect())
    }
}

impl ActivationSource for ActivationRecord {
    fn layer(&self, layer: usize) -> Option<Cow<'_, [f64]>> {
        self.layer_f64(layer).map(Cow::Owned)
    }
}

/// Activations keyed by layer, for callers that only have some layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerActivations(pub BTreeMap<usize, Vec<f64>>);

impl LayerActivations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_layer(mut self, layer: usize, values: Vec<f64>) -> Self {
        self.0.insert(layer, values);
        self
    }
}

impl ActivationSource for LayerActivations {
    fn layer(&self, layer: usize) -> Option<Cow<'_, [f64]>> {
        self.0.get(&layer).map(|v| Cow::Borrowed(v.as_slice()))
    }
}

/// A set of activation records sharing layer count and hidden size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledActivationSet {
    pub model_id: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub records: Vec<ActivationRecord>,
}

impl LabeledActivationSet {
    pub fn new(
        model_id: impl Into<String>,
        layer_count: usize,
        hidden_dim: usize,
        records: Vec<ActivationRecord>,
    ) -> Result<Self> {
        let set = Self {
            model_id: model_id.into(),
            layer_count,
            hidden_dim,
            records,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.hidden_dim == 0 {
            return Err(Error::Configuration(format!(
                "layer count and hidden size must be positive (L = {}, d = {})",
                self.layer_count, self.hidden_dim
            )));
        }
        for record in &self.records {
            if record.layers.len() != self.layer_count {
                return Err(Error::DimensionMismatch {
                    expected: self.layer_count,
                    actual: record.layers.len(),
                });
            }
            for layer in &record.layers {
                if layer.len() != self.hidden_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.hidden_dim,
                        actual: layer.len(),
                    });
                }
                if let Some(index) = layer.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteInput { index });
                }
            }
        }
        Ok(())
    }

    /// Record indices grouped by category, categories in sorted order.
    pub fn category_indices(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.category.as_str()).or_default().push(i);
        }
        out
    }

    /// A copy restricted to one category.
    pub fn category_subset(&self, category: &str) -> Self {
        Self {
            model_id: self.model_id.clone(),
            layer_count: self.layer_count,
            hidden_dim: self.hidden_dim,
            records: self
                .records
                .iter()
                .filter(|r| r.category == category)
                .cloned()
                .collect(),
        }
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }
}
