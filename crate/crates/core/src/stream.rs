//! Device reports and the per-device sliding window the edge node keeps.
//!
//! Every device owns a bounded buffer of its `W` most recent reports. Reports
//! carry an explicit missing mask; masked slots are never exposed through the
//! read accessors, whatever number happens to sit in them.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{ImputeError, Result};

/// One timestamped M-dimensional vector from one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReport {
    pub device_id: usize,
    pub timestamp: i64,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl DeviceReport {
    /// A fully observed report.
    pub fn new(device_id: usize, timestamp: i64, values: Vec<f64>) -> Self {
        let missing = vec![false; values.len()];
        Self {
            device_id,
            timestamp,
            values,
            missing,
        }
    }

    pub fn with_mask(
        device_id: usize,
        timestamp: i64,
        values: Vec<f64>,
        missing: Vec<bool>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(ImputeError::Schema(
                "a report needs at least one dimension".into(),
            ));
        }
        if values.len() != missing.len() {
            return Err(ImputeError::Schema(format!(
                "{} values but {} mask entries",
                values.len(),
                missing.len()
            )));
        }
        Ok(Self {
            device_id,
            timestamp,
            values,
            missing,
        })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    /// The value in `dimension`, or `None` when it is masked or out of range.
    pub fn value(&self, dimension: usize) -> Option<f64> {
        match self.missing.get(dimension) {
            Some(false) => Some(self.values[dimension]),
            _ => None,
        }
    }

    pub fn is_missing(&self, dimension: usize) -> bool {
        self.missing.get(dimension).copied().unwrap_or(true)
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn missing_dims(&self) -> impl Iterator<Item = usize> + '_ {
        self.missing
            .iter()
            .enumerate()
            .filter_map(|(d, &m)| m.then_some(d))
    }

    /// Raw storage including masked slots. Only serializers should need this.
    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    /// Mark `dimension` missing. The stored number is left untouched.
    pub fn mask(&mut self, dimension: usize) {
        self.missing[dimension] = true;
    }

    /// Store `value` in `dimension` and clear its mask bit.
    pub fn fill(&mut self, dimension: usize, value: f64) {
        self.values[dimension] = value;
        self.missing[dimension] = false;
    }
}

/// Per-device ring buffers of the `W` latest reports, newest last.
#[derive(Debug, Clone)]
pub struct WindowStore {
    capacity: usize,
    dims: Option<usize>,
    buffers: BTreeMap<usize, VecDeque<DeviceReport>>,
}

impl WindowStore {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be at least 1");
        Self {
            capacity,
            dims: None,
            buffers: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Dimensionality fixed by the first ingested report.
    pub fn dims(&self) -> Option<usize> {
        self.dims
    }

    pub fn device_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.buffers.keys().copied()
    }

    pub fn len(&self, device_id: usize) -> usize {
        self.buffers.get(&device_id).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    /// Stored reports of a device, oldest first. Empty for unknown devices.
    pub fn reports(&self, device_id: usize) -> impl Iterator<Item = &DeviceReport> + '_ {
        self.buffers.get(&device_id).into_iter().flatten()
    }

    pub fn ingest(&mut self, report: DeviceReport) -> Result<()> {
        if let Some(dims) = self.dims {
            if report.dims() != dims {
                return Err(ImputeError::Schema(format!(
                    "device {} reported {} dimensions, store holds {}",
                    report.device_id,
                    report.dims(),
                    dims
                )));
            }
        }
        let buffer = self.buffers.entry(report.device_id).or_default();
        if let Some(newest) = buffer.back() {
            if report.timestamp <= newest.timestamp {
                return Err(ImputeError::Sequencing {
                    device: report.device_id,
                    timestamp: report.timestamp,
                    newest: newest.timestamp,
                });
            }
        }
        if buffer.len() == self.capacity {
            buffer.pop_front();
        }
        self.dims.get_or_insert(report.dims());
        buffer.push_back(report);
        Ok(())
    }

    pub fn latest(&self, device_id: usize) -> Result<&DeviceReport> {
        self.buffers
            .get(&device_id)
            .and_then(VecDeque::back)
            .ok_or(ImputeError::DeviceNotFound(device_id))
    }

    /// Unmasked values of one dimension, oldest first, with their window positions.
    pub fn window(&self, device_id: usize, dimension: usize) -> Result<StreamSlice> {
        if let Some(dims) = self.dims {
            if dimension >= dims {
                return Err(ImputeError::DimensionOutOfRange { dimension, dims });
            }
        }
        let mut slice = StreamSlice {
            device_id,
            dimension,
            positions: Vec::new(),
            values: Vec::new(),
        };
        for (pos, report) in self.reports(device_id).enumerate() {
            if let Some(v) = report.value(dimension) {
                slice.positions.push(pos);
                slice.values.push(v);
            }
        }
        Ok(slice)
    }

    /// Overwrite one cell of a device's newest report and clear its mask.
    pub fn fill_latest(&mut self, device_id: usize, dimension: usize, value: f64) -> Result<()> {
        let dims = self.dims.unwrap_or(0);
        if dimension >= dims {
            return Err(ImputeError::DimensionOutOfRange { dimension, dims });
        }
        let report = self
            .buffers
            .get_mut(&device_id)
            .and_then(VecDeque::back_mut)
            .ok_or(ImputeError::DeviceNotFound(device_id))?;
        report.fill(dimension, value);
        Ok(())
    }
}

/// Per-dimension view of a device window; masked entries omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSlice {
    pub device_id: usize,
    pub dimension: usize,
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
}

impl StreamSlice {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            device_id: 0,
            dimension: 0,
            positions: (0..values.len()).collect(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
