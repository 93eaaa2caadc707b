//! Integer label maps shared by fusion, metrics and the data pipeline.

use crate::error::{LeError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    labels: Vec<u32>,
    height: usize,
    width: usize,
    /// Total number of label values (background included).
    num_classes: usize,
}

impl LabelMask {
    pub fn new(labels: Vec<u32>, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(LeError::ShapeMismatch {
                context: "LabelMask::new".into(),
                expected: vec![height * width],
                got: vec![labels.len()],
            });
        }
        if num_classes < 2 || labels.iter().any(|&l| l as usize >= num_classes) {
            return Err(LeError::InvalidArgument(format!(
                "label values must lie in [0, {})",
                num_classes
            )));
        }
        Ok(Self {
            labels,
            height,
            width,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn class_count(&self, class: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }
}
