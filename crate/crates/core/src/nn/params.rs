use crate::error::{Error, Result};

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat `f64` parameter store with a segment table describing its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    /// Builds a zero-filled vector from `(name, shape)` pairs laid out back to back.
    pub fn zeros<I, S>(segments: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (name, shape) in segments {
            let seg = Segment {
                name: name.into(),
                offset,
                shape,
            };
            offset += seg.len();
            layout.push(seg);
        }
        Self {
            values: vec![0.0; offset],
            layout,
        }
    }

    pub fn empty() -> Self {
        Self {
            values: Vec::new(),
            layout: Vec::new(),
        }
    }

    /// Reassembles a vector from raw values and a layout, checking consistency.
    pub fn from_parts(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for seg in &layout {
            if seg.offset != expected {
                return Err(Error::contract(format!(
                    "segment `{}` starts at {} but previous segments end at {}",
                    seg.name, seg.offset, expected
                )));
            }
            expected += seg.len();
        }
        if expected != values.len() {
            return Err(Error::contract(format!(
                "layout covers {} values but {} were supplied",
                expected,
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Same layout, zero values.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
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

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> &[f64] {
        let seg = self
            .segment(name)
            .unwrap_or_else(|| panic!("no parameter segment named `{name}`"));
        &self.values[seg.range()]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self
            .segment(name)
            .unwrap_or_else(|| panic!("no parameter segment named `{name}`"))
            .range();
        &mut self.values[range]
    }

    /// Splits into per-segment owned arrays.
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.layout
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.shape.clone(),
                    self.values[s.range()].to_vec(),
                )
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(parts: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut out = Self::zeros(parts.iter().map(|(n, s, _)| (n.clone(), s.clone())));
        for ((_, shape, vals), seg) in parts.iter().zip(out.layout.clone()) {
            if vals.len() != shape.iter().product::<usize>() {
                return Err(Error::contract(format!(
                    "segment `{}` has {} values for shape {:?}",
                    seg.name,
                    vals.len(),
                    shape
                )));
            }
            out.values[seg.range()].copy_from_slice(vals);
        }
        Ok(out)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
