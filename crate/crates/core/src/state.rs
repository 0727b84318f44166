//! Canonical 19-dimensional state layout.
//!
//! Every module obtains state indices from here. The layout is:
//!
//! | indices | contents                                         |
//! |---------|--------------------------------------------------|
//! | 0..3    | end-effector position x, y, z (m)                |
//! | 3..12   | end-effector rotation, row-major `R_xx .. R_zz`  |
//! | 12..15  | human position x, y, z (m)                       |
//! | 15..18  | laptop position x, y, z (m)                      |
//! | 18      | table surface height z (m)                       |
//!
//! Rotations are world-from-local: column `i` is local axis `i` expressed
//! in the world frame, so `R_ji` is the alignment of local axis `i` with
//! world axis `j`.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of state dimensions.
pub const STATE_DIM: usize = 19;

/// Number of waypoints in every trajectory.
pub const TRAJECTORY_LEN: usize = 21;

/// Tolerance used when validating rotation blocks.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// A contiguous group of state dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateBlock {
    EefPos,
    EefRot,
    Human,
    Laptop,
    Table,
}

impl StateBlock {
    /// All blocks in layout order.
    pub const ALL: [StateBlock; 5] = [
        StateBlock::EefPos,
        StateBlock::EefRot,
        StateBlock::Human,
        StateBlock::Laptop,
        StateBlock::Table,
    ];

    pub const fn range(self) -> Range<usize> {
        match self {
            StateBlock::EefPos => 0..3,
            StateBlock::EefRot => 3..12,
            StateBlock::Human => 12..15,
            StateBlock::Laptop => 15..18,
            StateBlock::Table => 18..19,
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub const fn len(self) -> usize {
        let r = self.range();
        r.end - r.start
    }

    /// Short name used in prompts and mask JSON.
    pub const fn key(self) -> &'static str {
        match self {
            StateBlock::EefPos => "eef_pos",
            StateBlock::EefRot => "eef_rot",
            StateBlock::Human => "human",
            StateBlock::Laptop => "laptop",
            StateBlock::Table => "table",
        }
    }
}

pub const EEF_X: usize = 0;
pub const EEF_Y: usize = 1;
pub const EEF_Z: usize = 2;
pub const HUMAN_X: usize = 12;
pub const HUMAN_Y: usize = 13;
pub const HUMAN_Z: usize = 14;
pub const LAPTOP_X: usize = 15;
pub const LAPTOP_Y: usize = 16;
pub const LAPTOP_Z: usize = 17;
pub const TABLE_Z: usize = 18;

/// Index of rotation element `R[row][col]`.
pub const fn rot_index(row: usize, col: usize) -> usize {
    3 + row * 3 + col
}

/// `R_zx`: world-z component of the local x-axis.
pub const ROT_ZX: usize = rot_index(2, 0);

/// Column names in layout order.
pub const DIM_NAMES: [&str; STATE_DIM] = [
    "eef_x", "eef_y", "eef_z", "R_xx", "R_xy", "R_xz", "R_yx", "R_yy", "R_yz", "R_zx", "R_zy", "R_zz", "human_x",
    "human_y", "human_z", "laptop_x", "laptop_y", "laptop_z", "table_z",
];

/// Row-major 3x3 rotation matrix.
pub type Rotation = [[f64; 3]; 3];

pub const IDENTITY_ROTATION: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("state vector must have {STATE_DIM} entries, got {0}")]
    WrongLength(usize),
    #[error("non-finite value in {block:?} block at index {index}")]
    NonFinite { block: StateBlock, index: usize },
    #[error("{block:?} block is not a rotation: {reason}")]
    InvalidRotation { block: StateBlock, reason: String },
}

/// A single world state in canonical layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub [f64; STATE_DIM]);

/// Named view of a [`StateVector`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateParts {
    pub eef_pos: Vec3,
    pub eef_rot: Rotation,
    pub human: Vec3,
    pub laptop: Vec3,
    pub table_z: f64,
}

fn block_of(index: usize) -> StateBlock {
    StateBlock::ALL
        .into_iter()
        .find(|b| b.range().contains(&index))
        .expect("index inside layout")
}

/// Checks orthonormality and unit determinant.
pub fn validate_rotation(rot: &Rotation) -> Result<(), StateError> {
    let invalid = |reason: String| StateError::InvalidRotation {
        block: StateBlock::EefRot,
        reason,
    };
    for (r, row) in rot.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(StateError::NonFinite {
                    block: StateBlock::EefRot,
                    index: rot_index(r, c),
                });
            }
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            // (R^T R)_ij = sum_k R_ki R_kj
            let dot: f64 = (0..3).map(|k| rot[k][i] * rot[k][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > ROTATION_TOLERANCE {
                return Err(invalid(format!("R^T R [{i}][{j}] = {dot}")));
            }
        }
    }
    let det = determinant(rot);
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(invalid(format!("det = {det}")));
    }
    Ok(())
}

pub fn determinant(r: &Rotation) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

fn check_finite(values: &[f64], offset: usize) -> Result<(), StateError> {
    for (k, v) in values.iter().enumerate() {
        if !v.is_finite() {
            let index = offset + k;
            return Err(StateError::NonFinite {
                block: block_of(index),
                index,
            });
        }
    }
    Ok(())
}

/// Packs named components into the canonical layout.
pub fn pack_state(
    eef_pos: Vec3,
    eef_rot: Rotation,
    human: Vec3,
    laptop: Vec3,
    table_z: f64,
) -> Result<StateVector, StateError> {
    check_finite(&eef_pos, 0)?;
    check_finite(&human, HUMAN_X)?;
    check_finite(&laptop, LAPTOP_X)?;
    check_finite(&[table_z], TABLE_Z)?;
    validate_rotation(&eef_rot)?;
    Ok(pack_unchecked(eef_pos, eef_rot, human, laptop, table_z))
}

pub(crate) fn pack_unchecked(eef_pos: Vec3, eef_rot: Rotation, human: Vec3, laptop: Vec3, table_z: f64) -> StateVector {
    let mut s = [0.0; STATE_DIM];
    s[StateBlock::EefPos.range()].copy_from_slice(&eef_pos);
    for (r, row) in eef_rot.iter().enumerate() {
        s[rot_index(r, 0)..rot_index(r, 0) + 3].copy_from_slice(row);
    }
    s[StateBlock::Human.range()].copy_from_slice(&human);
    s[StateBlock::Laptop.range()].copy_from_slice(&laptop);
    s[TABLE_Z] = table_z;
    StateVector(s)
}

/// Splits a raw slice into named components.
pub fn unpack_state(values: &[f64]) -> Result<StateParts, StateError> {
    if values.len() != STATE_DIM {
        return Err(StateError::WrongLength(values.len()));
    }
    let v3 = |r: Range<usize>| -> Vec3 { [values[r.start], values[r.start + 1], values[r.start + 2]] };
    let mut eef_rot = [[0.0; 3]; 3];
    for (r, row) in eef_rot.iter_mut().enumerate() {
        for (c, e) in row.iter_mut().enumerate() {
            *e = values[rot_index(r, c)];
        }
    }
    Ok(StateParts {
        eef_pos: v3(StateBlock::EefPos.range()),
        eef_rot,
        human: v3(StateBlock::Human.range()),
        laptop: v3(StateBlock::Laptop.range()),
        table_z: values[TABLE_Z],
    })
}

impl StateVector {
    pub fn from_slice(values: &[f64]) -> Result<Self, StateError> {
        let arr: [f64; STATE_DIM] = values.try_into().map_err(|_| StateError::WrongLength(values.len()))?;
        check_finite(&arr, 0)?;
        Ok(StateVector(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn parts(&self) -> StateParts {
        unpack_state(&self.0).expect("fixed-length state")
    }

    pub fn eef_pos(&self) -> Vec3 {
        [self.0[EEF_X], self.0[EEF_Y], self.0[EEF_Z]]
    }

    pub fn eef_rot(&self) -> Rotation {
        self.parts().eef_rot
    }

    pub fn human(&self) -> Vec3 {
        [self.0[HUMAN_X], self.0[HUMAN_Y], self.0[HUMAN_Z]]
    }

    pub fn laptop(&self) -> Vec3 {
        [self.0[LAPTOP_X], self.0[LAPTOP_Y], self.0[LAPTOP_Z]]
    }

    pub fn table_z(&self) -> f64 {
        self.0[TABLE_Z]
    }

    /// Validates finiteness and the rotation block.
    pub fn validate(&self) -> Result<(), StateError> {
        check_finite(&self.0, 0)?;
        validate_rotation(&self.eef_rot())
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for StateVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}
