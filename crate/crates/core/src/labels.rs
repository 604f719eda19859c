//! Per-pixel label maps and their stride-matched downsampled pyramids.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::kernels::nearest_source;
use crate::error::{Error, Result};

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// `B x H x W` integer class map. Values are `< n_classes` or `ignore_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u32>,
    ignore_index: u32,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u32>, ignore_index: u32) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("label map extents must be positive".into()));
        }
        if data.len() != batch * height * width {
            return Err(Error::InvalidArgument(format!(
                "label map {batch}x{height}x{width} needs {} values, got {}",
                batch * height * width,
                data.len()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
            ignore_index,
        })
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: u32) -> Self {
        Self {
            batch,
            height,
            width,
            data: vec![value; batch * height * width],
            ignore_index: DEFAULT_IGNORE_INDEX,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn ignore_index(&self) -> u32 {
        self.ignore_index
    }

    pub fn get(&self, b: usize, r: usize, c: usize) -> u32 {
        self.data[(b * self.height + r) * self.width + c]
    }

    pub fn is_ignored(&self, v: u32) -> bool {
        v == self.ignore_index
    }

    /// Checks every non-ignored value is below `n_classes`.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != self.ignore_index && v as usize >= n_classes)
        {
            Some(v) => Err(Error::InvalidArgument(format!(
                "label {v} out of range for {n_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Distinct non-ignored classes.
    pub fn classes(&self) -> BTreeSet<u32> {
        self.data.iter().copied().filter(|&v| v != self.ignore_index).collect()
    }

    /// Selects a contiguous range of batch elements.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.batch {
            return Err(Error::InvalidArgument(format!(
                "batch slice {start}..{} out of range for {}",
                start + len,
                self.batch
            )));
        }
        let plane = self.height * self.width;
        Ok(Self {
            batch: len,
            height: self.height,
            width: self.width,
            data: self.data[start * plane..(start + len) * plane].to_vec(),
            ignore_index: self.ignore_index,
        })
    }

    /// Stacks single elements (all with equal spatial size) into a batch.
    pub fn stack(items: &[&LabelMap]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero label maps".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in items {
            if m.height != first.height || m.width != first.width || m.ignore_index != first.ignore_index {
                return Err(Error::InvalidArgument(
                    "label maps differ in size or ignore index".into(),
                ));
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        Ok(Self {
            batch,
            height: first.height,
            width: first.width,
            data,
            ignore_index: first.ignore_index,
        })
    }
}

/// Nearest-neighbour label subsampling at cell centers; the output has
/// `ceil(H/s) x ceil(W/s)` cells and ignored pixels stay ignored.
pub fn downsample_labels(labels: &LabelMap, stride: usize) -> Result<LabelMap> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if labels.height < stride || labels.width < stride {
        return Err(Error::InvalidArgument(format!(
            "label map {}x{} smaller than stride {stride}",
            labels.height, labels.width
        )));
    }
    if stride == 1 {
        return Ok(labels.clone());
    }
    let (oh, ow) = (labels.height.div_ceil(stride), labels.width.div_ceil(stride));
    let rows: Vec<usize> = (0..oh).map(|i| nearest_source(i, stride, labels.height)).collect();
    let cols: Vec<usize> = (0..ow).map(|j| nearest_source(j, stride, labels.width)).collect();
    let mut data = Vec::with_capacity(labels.batch * oh * ow);
    for b in 0..labels.batch {
        for &r in &rows {
            for &c in &cols {
                data.push(labels.get(b, r, c));
            }
        }
    }
    Ok(LabelMap {
        batch: labels.batch,
        height: oh,
        width: ow,
        data,
        ignore_index: labels.ignore_index,
    })
}

/// Label maps keyed by output stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPyramid {
    levels: BTreeMap<usize, LabelMap>,
}

impl LabelPyramid {
    pub fn get(&self, stride: usize) -> Option<&LabelMap> {
        self.levels.get(&stride)
    }

    pub fn strides(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LabelMap)> {
        self.levels.iter().map(|(s, m)| (*s, m))
    }
}

pub fn build_pyramid(labels: &LabelMap, strides: &[usize]) -> Result<LabelPyramid> {
    if strides.is_empty() {
        return Err(Error::InvalidArgument("pyramid needs at least one stride".into()));
    }
    if strides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "pyramid strides must be strictly ascending, got {strides:?}"
        )));
    }
    let levels = strides
        .iter()
        .map(|&s| Ok((s, downsample_labels(labels, s)?)))
        .collect::<Result<_>>()?;
    Ok(LabelPyramid { levels })
}
