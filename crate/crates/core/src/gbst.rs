//! Four-direction channel-partitioned shift over a token grid.
//!
//! The first half of the channels is split into quarters shifted right, left,
//! down and up (outward stream); the second half into quarters shifted left,
//! right, up and down (inward stream). Vacated positions are zero. Remainder
//! channels ride with the last quarter of each half.

use std::ops::Range;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    /// `(dy, dx)` such that `out(y, x) = in(y - dy*s, x - dx*s)`.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::Right => (0, 1),
            Direction::Left => (0, -1),
            Direction::Down => (1, 0),
            Direction::Up => (-1, 0),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Right => Direction::Left,
            Direction::Left => Direction::Right,
            Direction::Down => Direction::Up,
            Direction::Up => Direction::Down,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftGroup {
    pub channels: Range<usize>,
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GbstSpec {
    pub shift: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

const OUTWARD: [Direction; 4] = [
    Direction::Right,
    Direction::Left,
    Direction::Down,
    Direction::Up,
];
const INWARD: [Direction; 4] = [
    Direction::Left,
    Direction::Right,
    Direction::Up,
    Direction::Down,
];

impl GbstSpec {
    pub fn new(shift: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        if channels < 8 {
            return Err(Error::Invalid(format!(
                "gbst needs at least 8 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 || shift >= height.min(width) {
            return Err(Error::Invalid(format!(
                "gbst shift {shift} must be smaller than the {height}x{width} grid"
            )));
        }
        Ok(GbstSpec {
            shift,
            height,
            width,
            channels,
        })
    }

    /// The eight channel groups in order, covering `0..channels` exactly once.
    pub fn groups(&self) -> Vec<ShiftGroup> {
        let half = self.channels / 2;
        let q = half / 4;
        let sq = (self.channels - half) / 4;
        let mut groups = Vec::with_capacity(8);
        for (i, &direction) in OUTWARD.iter().enumerate() {
            let end = if i == 3 { half } else { (i + 1) * q };
            groups.push(ShiftGroup {
                channels: i * q..end,
                direction,
            });
        }
        for (i, &direction) in INWARD.iter().enumerate() {
            let end = if i == 3 {
                self.channels
            } else {
                half + (i + 1) * sq
            };
            groups.push(ShiftGroup {
                channels: half + i * sq..end,
                direction,
            });
        }
        groups
    }

    fn check(&self, x: &Tensor, op: &'static str) -> Result<usize> {
        x.expect_rank(op, 3)?;
        let (b, n, c) = (x.dim(0), x.dim(1), x.dim(2));
        if n != self.height * self.width {
            return Err(Error::shape(
                op,
                format!("{n} tokens for a {}x{} grid", self.height, self.width),
            ));
        }
        if c != self.channels {
            return Err(Error::shape(
                op,
                format!("{c} channels, spec has {}", self.channels),
            ));
        }
        Ok(b)
    }
}

fn shift(x: &Tensor, spec: &GbstSpec, adjoint: bool, op: &'static str) -> Result<Tensor> {
    let batch = spec.check(x, op)?;
    let (h, w, c) = (spec.height as isize, spec.width as isize, spec.channels);
    let s = spec.shift as isize;
    let n = spec.height * spec.width;
    let groups = spec.groups();
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for b in 0..batch {
        let base = b * n * c;
        for g in &groups {
            let dir = if adjoint {
                g.direction.opposite()
            } else {
                g.direction
            };
            let (dy, dx) = dir.offset();
            for y in 0..h {
                let sy = y - dy * s;
                if !(0..h).contains(&sy) {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx - dx * s;
                    if !(0..w).contains(&sx) {
                        continue;
                    }
                    let o = base + (y * w + xx) as usize * c;
                    let i = base + (sy * w + sx) as usize * c;
                    out[o + g.channels.start..o + g.channels.end]
                        .copy_from_slice(&src[i + g.channels.start..i + g.channels.end]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Applies the eight directional shifts to `[B, N, C]` tokens.
pub fn gbst(x: &Tensor, spec: &GbstSpec) -> Result<Tensor> {
    shift(x, spec, false, "gbst")
}

/// Transpose of [`gbst`]: every group shifted the opposite way.
pub fn gbst_adjoint(g: &Tensor, spec: &GbstSpec) -> Result<Tensor> {
    shift(g, spec, true, "gbst_adjoint")
}

impl<'t> Var<'t> {
    pub fn gbst(&self, spec: &GbstSpec) -> Result<Var<'t>> {
        let out = gbst(self.value(), spec)?;
        let spec = *spec;
        Ok(self.tape().apply(out, &[self], move |a| {
            vec![Some(
                gbst_adjoint(a.grad, &spec).expect("validated in forward"),
            )]
        }))
    }
}
