//! Person-level feature buffer: one running-average feature per class.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Column `p_i` (stored as row `i`) is the feature of class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonBuffer {
    features: Array2<f64>,
    initialized: Vec<bool>,
    iteration: u64,
}

impl PersonBuffer {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            features: Array2::zeros((num_classes, dim)),
            initialized: vec![false; num_classes],
            iteration: 0,
        }
    }

    /// Rebuilds a buffer from stored parts (checkpoint loading).
    pub fn from_parts(features: Array2<f64>, initialized: Vec<bool>, iteration: u64) -> Result<Self> {
        if features.nrows() != initialized.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} flags",
                features.nrows(),
                initialized.len()
            )));
        }
        Ok(Self {
            features,
            initialized,
            iteration,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn tick(&mut self) {
        self.iteration += 1;
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    pub fn uninitialized(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| !self.initialized[c]).collect()
    }

    pub fn feature(&self, class: usize) -> Option<ArrayView1<'_, f64>> {
        self.initialized[class].then(|| self.features.row(class))
    }

    /// All rows, including uninitialized (zero) ones.
    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// `p <- (p + mean(batch)) / 2`, or `p <- mean(batch)` on first touch.
    pub fn update_person(&mut self, class: usize, batch_features: ArrayView2<f64>) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::Contract(format!(
                "class {class} out of range for {} buffer columns",
                self.num_classes()
            )));
        }
        if batch_features.nrows() == 0 {
            return Err(Error::Contract(format!("empty feature batch for class {class}")));
        }
        if batch_features.ncols() != self.dim() {
            return Err(Error::Dimension {
                what: "buffer feature",
                expected: self.dim(),
                got: batch_features.ncols(),
            });
        }
        let mean: Array1<f64> = batch_features.mean_axis(Axis(0)).expect("nonempty");
        let mut row = self.features.row_mut(class);
        if self.initialized[class] {
            row.zip_mut_with(&mean, |p, &m| *p = 0.5 * (*p + m));
        } else {
            row.assign(&mean);
            self.initialized[class] = true;
        }
        Ok(())
    }
}
