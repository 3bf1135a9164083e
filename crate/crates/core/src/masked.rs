//! Convolution restricted to active pixel positions, plus FLOP accounting.
//!
//! Positions that are inactive in a [`PixelMask`] are frozen: their outputs
//! are copied from a caller-supplied carry tensor and cost nothing. Active
//! positions are computed exactly as [`conv2d`](crate::tensor::conv2d) would
//! compute them. Neighbours are read as they are, so a frozen pixel keeps
//! contributing its last computed features to active neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tensor};

/// Binary `height × width` map. `true` marks a pixel that is still computed.
///
/// Bits can only be cleared: the pipeline narrows a mask through
/// [`PixelMask::intersect`] or [`PixelMask::retain`], never widens it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    active: usize,
}

impl PixelMask {
    pub fn all_active(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
            active: height * width,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::config(format!(
                "mask has {} bits, expected {height}x{width}",
                bits.len()
            )));
        }
        let active = bits.iter().filter(|b| **b).count();
        Ok(Self {
            height,
            width,
            bits,
            active,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn is_active(&self, pos: usize) -> bool {
        self.bits[pos]
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn is_all_inactive(&self) -> bool {
        self.active == 0
    }

    /// Positions active in both masks.
    pub fn intersect(&self, other: &PixelMask) -> Result<PixelMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::config("mask dimensions differ"));
        }
        let bits: Vec<bool> = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a && *b)
            .collect();
        let active = bits.iter().filter(|b| **b).count();
        Ok(PixelMask {
            height: self.height,
            width: self.width,
            bits,
            active,
        })
    }

    /// Keeps an active position only if `keep(pos)` holds. Inactive positions
    /// are never passed to `keep`.
    pub fn retain(&self, mut keep: impl FnMut(usize) -> bool) -> PixelMask {
        let bits: Vec<bool> = self
            .bits
            .iter()
            .enumerate()
            .map(|(pos, b)| *b && keep(pos))
            .collect();
        let active = bits.iter().filter(|b| **b).count();
        PixelMask {
            height: self.height,
            width: self.width,
            bits,
            active,
        }
    }

    /// True if every position active in `self` is also active in `other`.
    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }
}

/// How active convolutions read neighbours that are frozen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenRead {
    /// Read the frozen features as they stand.
    #[default]
    Carry,
    /// Experimental: treat frozen positions as zeros on the input side.
    Zero,
}

/// FLOPs for one output position: two per weight (multiply and add) plus one
/// bias add per output channel.
pub fn cost_per_position(params: &ConvParams) -> u64 {
    let k = params.kernel() as u64;
    (2 * k * k * params.in_channels() as u64 + 1) * params.out_channels() as u64
}

/// Dense FLOPs of `params` over an `height × width` plane.
pub fn dense_cost(params: &ConvParams, height: usize, width: usize) -> u64 {
    cost_per_position(params) * (height * width) as u64
}

/// Convolution evaluated only at active positions of `mask`.
///
/// Inactive positions take their value from `carry`, which must already have
/// the output shape. Returns the output and the FLOPs spent.
pub fn masked_conv2d(
    input: &Tensor,
    params: &ConvParams,
    mask: &PixelMask,
    carry: &Tensor,
) -> Result<(Tensor, u64)> {
    masked_conv2d_with(input, params, mask, carry, FrozenRead::Carry)
}

pub fn masked_conv2d_with(
    input: &Tensor,
    params: &ConvParams,
    mask: &PixelMask,
    carry: &Tensor,
    read: FrozenRead,
) -> Result<(Tensor, u64)> {
    params.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    if carry.shape() != (params.out_channels(), h, w) {
        return Err(Error::config(format!(
            "carry shape {:?} does not match output shape {:?}",
            carry.shape(),
            (params.out_channels(), h, w)
        )));
    }
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::config(format!(
            "mask {}x{} does not match input {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }

    let zeroed;
    let source = match read {
        FrozenRead::Carry => input,
        FrozenRead::Zero => {
            let mut t = input.clone();
            let plane = t.plane();
            let data = t.data_mut();
            for pos in (0..plane).filter(|p| !mask.is_active(*p)) {
                for c in 0..params.in_channels() {
                    data[c * plane + pos] = 0.0;
                }
            }
            zeroed = t;
            &zeroed
        }
    };

    let mut out = carry.clone();
    let plane = h * w;
    let mut buf = vec![0.0f32; params.out_channels()];
    let data = out.data_mut();
    for pos in (0..plane).filter(|p| mask.is_active(*p)) {
        params.apply_at(source, pos / w, pos % w, &mut buf);
        for (o, v) in buf.iter().enumerate() {
            data[o * plane + pos] = *v;
        }
    }
    Ok((out, mask.active_count() as u64 * cost_per_position(params)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: usize,
    pub flops: u64,
}

/// Per-stage FLOP entries for one inference pass, with cumulative totals
/// snapshotted at each exit boundary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    entries: Vec<StageEntry>,
    exit_totals: Vec<u64>,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry. Stage ids must be strictly increasing.
    pub fn record(&mut self, stage: usize, flops: u64) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if stage <= last.stage {
                return Err(Error::usage(format!(
                    "stage {stage} recorded after stage {}",
                    last.stage
                )));
            }
        }
        self.entries.push(StageEntry { stage, flops });
        Ok(())
    }

    /// Closes the current exit and returns the cumulative total through it.
    pub fn close_exit(&mut self) -> u64 {
        let total = self.total();
        self.exit_totals.push(total);
        total
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn entries(&self) -> &[StageEntry] {
        &self.entries
    }

    /// Cumulative FLOPs from the input through each closed exit.
    pub fn exit_totals(&self) -> &[u64] {
        &self.exit_totals
    }
}
