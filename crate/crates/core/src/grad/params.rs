use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// A named, contiguous range inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter storage with a named segment layout.
///
/// Segments are disjoint and cover `values` exactly. The JSON checkpoint form
/// is `{"layout": [{"name", "offset", "len"}], "values": [f64...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamVector {
    layout: Vec<Segment>,
    values: Vec<f64>,
}

impl ParamVector {
    /// Builds a zero vector from `(name, len)` pairs laid out in order.
    pub fn zeros<S: Into<String>>(segments: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (name, len) in segments {
            let name = name.into();
            if layout.iter().any(|s: &Segment| s.name == name) {
                return Err(Error::invalid(format!("duplicate segment '{name}'")));
            }
            layout.push(Segment { name, offset, len });
            offset += len;
        }
        Ok(Self {
            layout,
            values: vec![0.0; offset],
        })
    }

    pub fn from_parts(layout: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let pv = Self { layout, values };
        pv.validate()?;
        Ok(pv)
    }

    /// Checks the layout invariant: disjoint segments covering every value.
    pub fn validate(&self) -> Result<()> {
        let mut spans: Vec<(usize, usize, &str)> = self
            .layout
            .iter()
            .map(|s| (s.offset, s.offset + s.len, s.name.as_str()))
            .collect();
        spans.sort();
        let mut cursor = 0;
        for (start, end, name) in spans {
            if start != cursor {
                return Err(Error::invalid(format!(
                    "segment '{name}' starts at {start}, expected {cursor} (gap or overlap)"
                )));
            }
            cursor = end;
        }
        if cursor != self.values.len() {
            return Err(Error::invalid(format!(
                "layout covers {cursor} values but vector holds {}",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|s| s.name == name)
    }

    fn find(&self, name: &str) -> Result<&Segment> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter segment '{name}'")))
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let s = self.find(name)?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let s = self.find(name)?.clone();
        Ok(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_at(&self, index: usize) -> &[f64] {
        let s = &self.layout[index];
        &self.values[s.offset..s.offset + s.len]
    }

    /// Zero vector with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// SHA-256 over the layout and the exact bit patterns of the values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.layout {
            h.update(s.name.as_bytes());
            h.update((s.offset as u64).to_le_bytes());
            h.update((s.len as u64).to_le_bytes());
        }
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pv: ParamVector = serde_json::from_str(text)?;
        pv.validate()?;
        Ok(pv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
