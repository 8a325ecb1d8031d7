use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named region of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
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

/// Flat parameter storage with an ordered, contiguous block layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block. Names must be unique.
    pub fn push_block(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        if self.layout.iter().any(|b| b.name == name) {
            return Err(Error::shape(
                "ParamVector::push_block",
                "unique block name",
                format!("duplicate `{name}`"),
            ));
        }
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::shape(format!("block `{name}`"), len, values.len()));
        }
        self.layout.push(ParamBlock {
            name: name.to_string(),
            offset: self.values.len(),
            shape: shape.to_vec(),
        });
        self.values.extend_from_slice(values);
        Ok(())
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

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn block_info(&self, name: &str) -> Option<&ParamBlock> {
        self.layout.iter().find(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.block_info(name).map(|b| &self.values[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.block_info(name)?.range();
        Some(&mut self.values[range])
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    /// Rebuilds a vector from a layout and values, validating contiguity.
    pub fn from_parts(layout: Vec<ParamBlock>, values: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for (i, b) in layout.iter().enumerate() {
            if b.offset != offset {
                return Err(Error::shape(format!("block `{}` offset", b.name), offset, b.offset));
            }
            if layout[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::shape("ParamVector layout", "unique names", &b.name));
            }
            offset += b.len();
        }
        if offset != values.len() {
            return Err(Error::shape("ParamVector values", offset, values.len()));
        }
        Ok(ParamVector { values, layout })
    }
}
