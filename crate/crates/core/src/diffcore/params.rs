use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment names used by full characteristic models.
pub const FEATURE_SEGMENT: &str = "theta1";
pub const FIELD_SEGMENT: &str = "theta2";
pub const HEAD_SEGMENT: &str = "theta3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameter store partitioned into named, contiguous segments.
///
/// Segments tile `0..len` in order; zero-length segments are allowed so that
/// identity components of a model still appear by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// Builds a vector by concatenating named parts in order.
    pub fn from_parts<S: Into<String>>(parts: Vec<(S, Vec<f64>)>) -> Result<Self> {
        let mut values = Vec::new();
        let mut segments: Vec<Segment> = Vec::with_capacity(parts.len());
        for (name, part) in parts {
            let name = name.into();
            if segments.iter().any(|s| s.name == name) {
                return Err(Error::Contract(format!("duplicate segment `{name}`")));
            }
            segments.push(Segment {
                name,
                offset: values.len(),
                len: part.len(),
            });
            values.extend(part);
        }
        Ok(Self { values, segments })
    }

    /// Reassembles a vector from raw storage and a segment table, validating the tiling.
    pub fn from_raw(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for seg in &segments {
            if seg.offset != cursor {
                return Err(Error::Contract(format!(
                    "segment `{}` starts at {} but previous segment ends at {cursor}",
                    seg.name, seg.offset
                )));
            }
            cursor += seg.len;
        }
        if cursor != values.len() {
            return Err(Error::dim("segment table coverage", values.len(), cursor));
        }
        Ok(Self { values, segments })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let seg = self
            .find(name)
            .ok_or_else(|| Error::Contract(format!("no parameter segment `{name}`")))?;
        Ok(&self.values[seg.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self
            .find(name)
            .ok_or_else(|| Error::Contract(format!("no parameter segment `{name}`")))?
            .range();
        Ok(&mut self.values[range])
    }

    /// Name of the segment owning flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| s.name.as_str())
    }

    pub fn split(&self) -> Vec<(String, Vec<f64>)> {
        self.segments
            .iter()
            .map(|s| (s.name.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    /// A vector with the same layout and all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::dim(
                "parameter values",
                self.values.len(),
                values.len(),
            ));
        }
        Ok(Self {
            values,
            segments: self.segments.clone(),
        })
    }
}
