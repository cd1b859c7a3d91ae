use super::DataError;
use crate::dataset::LabeledDataset;

/// Per-feature min/max fitted on one dataset.
///
/// The transform is the unclamped affine map `(x - min) / (max - min)`, so
/// data seen at fit time lands in `[0, 1]` but later data may fall outside.
/// A constant feature (`min == max`) maps to `0.0` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn transform_value(&self, col: usize, x: f64) -> f64 {
        let range = self.max[col] - self.min[col];
        if range > 0.0 {
            (x - self.min[col]) / range
        } else {
            0.0
        }
    }

    pub fn transform_row(&self, src: &[f64], dst: &mut [f64]) {
        for (c, (d, &x)) in dst.iter_mut().zip(src).enumerate() {
            *d = self.transform_value(c, x);
        }
    }

    pub fn transform(&self, data: &LabeledDataset) -> Result<LabeledDataset, DataError> {
        if data.dim() != self.dim() {
            return Err(DataError::Width { got: data.dim(), expected: self.dim() });
        }
        Ok(data.map_rows(|src, dst| self.transform_row(src, dst)))
    }
}

pub fn fit_scaler(data: &LabeledDataset) -> Result<ScalerParams, DataError> {
    if data.is_empty() {
        return Err(DataError::Empty);
    }
    let dim = data.dim();
    let mut min = vec![f64::INFINITY; dim];
    let mut max = vec![f64::NEG_INFINITY; dim];
    for row in data.features().iter_rows() {
        for c in 0..dim {
            min[c] = min[c].min(row[c]);
            max[c] = max[c].max(row[c]);
        }
    }
    Ok(ScalerParams { min, max })
}
