//! Grid scheme: the 3×3 labeling of a password image, click-to-cell mapping and
//! the theoretical password space.
//!
//! Every image password is cut into nine cells. The user picks one of four
//! labeling orders when the image is registered; at login the session key names
//! a label per level and the user has to click the cell carrying that label.
//!
//! ```text
//!  LeftToRight   RightToLeft   TopToBottom   BottomToTop
//!   1 2 3         3 2 1         1 4 7         3 6 9
//!   4 5 6         6 5 4         2 5 8         2 5 8
//!   7 8 9         9 8 7         3 6 9         1 4 7
//! ```

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the login grid, in cells.
pub const GRID_SIDE: u8 = 3;
/// Number of cells (and labels) per image.
pub const CELL_COUNT: u8 = GRID_SIDE * GRID_SIDE;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid label {0} outside 1..=9")]
    LabelOutOfRange(u8),
    #[error("grid cell ({row}, {col}) outside the 3x3 grid")]
    CellOutOfRange { row: u8, col: u8 },
    #[error("click ({x}, {y}) outside the {w}x{h} image")]
    ClickOutOfBounds { x: f64, y: f64, w: f64, h: f64 },
    #[error("rendered image size {w}x{h} must be positive")]
    EmptyImage { w: f64, h: f64 },
    #[error("unknown labeling status {0:?}")]
    UnknownStatus(String),
    #[error("invalid password space parameters: {0}")]
    InvalidSpace(&'static str),
}

/// Labeling order of the nine grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingStatus {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl LabelingStatus {
    pub const ALL: [LabelingStatus; 4] = [
        LabelingStatus::LeftToRight,
        LabelingStatus::RightToLeft,
        LabelingStatus::TopToBottom,
        LabelingStatus::BottomToTop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelingStatus::LeftToRight => "left_to_right",
            LabelingStatus::RightToLeft => "right_to_left",
            LabelingStatus::TopToBottom => "top_to_bottom",
            LabelingStatus::BottomToTop => "bottom_to_top",
        }
    }

    /// Label carried by `cell` under this ordering.
    pub fn label_of(self, cell: GridCell) -> GridLabel {
        let (row, col) = (cell.row, cell.col);
        let last = GRID_SIDE - 1;
        let zero_based = match self {
            LabelingStatus::LeftToRight => GRID_SIDE * row + col,
            LabelingStatus::RightToLeft => GRID_SIDE * row + (last - col),
            LabelingStatus::TopToBottom => GRID_SIDE * col + row,
            LabelingStatus::BottomToTop => GRID_SIDE * col + (last - row),
        };
        GridLabel(zero_based + 1)
    }

    /// Cell carrying `label` under this ordering. Inverse of [`label_of`](Self::label_of).
    pub fn cell_of(self, label: GridLabel) -> GridCell {
        let idx = label.0 - 1;
        let (major, minor) = (idx / GRID_SIDE, idx % GRID_SIDE);
        let last = GRID_SIDE - 1;
        let (row, col) = match self {
            LabelingStatus::LeftToRight => (major, minor),
            LabelingStatus::RightToLeft => (major, last - minor),
            LabelingStatus::TopToBottom => (minor, major),
            LabelingStatus::BottomToTop => (last - minor, major),
        };
        GridCell { row, col }
    }
}

impl fmt::Display for LabelingStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelingStatus {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match norm.as_str() {
            "left_to_right" | "lr" | "lefttoright" => Ok(LabelingStatus::LeftToRight),
            "right_to_left" | "rl" | "righttoleft" => Ok(LabelingStatus::RightToLeft),
            "top_to_bottom" | "tb" | "toptobottom" => Ok(LabelingStatus::TopToBottom),
            "bottom_to_top" | "bt" | "bottomtotop" => Ok(LabelingStatus::BottomToTop),
            _ => Err(GridError::UnknownStatus(s.to_string())),
        }
    }
}

/// One of the nine cells; row 0 is the top, col 0 the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    row: u8,
    col: u8,
}

impl GridCell {
    pub fn new(row: u8, col: u8) -> Result<Self, GridError> {
        if row < GRID_SIDE && col < GRID_SIDE {
            Ok(GridCell { row, col })
        } else {
            Err(GridError::CellOutOfRange { row, col })
        }
    }

    pub fn row(self) -> u8 {
        self.row
    }

    pub fn col(self) -> u8 {
        self.col
    }

    /// All nine cells in row-major order.
    pub fn all() -> impl Iterator<Item = GridCell> {
        (0..GRID_SIDE).flat_map(|row| (0..GRID_SIDE).map(move |col| GridCell { row, col }))
    }

    /// Pixel coordinates of the cell centre on a `w`×`h` rendering.
    pub fn center(self, w: f64, h: f64) -> (f64, f64) {
        let side = f64::from(GRID_SIDE);
        (
            (f64::from(self.col) + 0.5) * w / side,
            (f64::from(self.row) + 0.5) * h / side,
        )
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// A cell label, 1..=9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct GridLabel(u8);

impl GridLabel {
    pub fn new(value: u8) -> Result<Self, GridError> {
        if (1..=CELL_COUNT).contains(&value) {
            Ok(GridLabel(value))
        } else {
            Err(GridError::LabelOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = GridLabel> {
        (1..=CELL_COUNT).map(GridLabel)
    }
}

impl TryFrom<u8> for GridLabel {
    type Error = GridError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        GridLabel::new(value)
    }
}

impl From<GridLabel> for u8 {
    fn from(label: GridLabel) -> u8 {
        label.0
    }
}

impl fmt::Display for GridLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Free-function form of [`LabelingStatus::label_of`].
pub fn label_of(status: LabelingStatus, cell: GridCell) -> GridLabel {
    status.label_of(cell)
}

/// Free-function form of [`LabelingStatus::cell_of`].
pub fn cell_of(status: LabelingStatus, label: GridLabel) -> GridCell {
    status.cell_of(label)
}

/// The cell a legitimate user must click at a level whose key digit is `digit`.
pub fn expected_cell(status: LabelingStatus, digit: GridLabel) -> GridCell {
    status.cell_of(digit)
}

/// Maps a click on a `w`×`h` rendering to its grid cell.
///
/// Clicks exactly on the right or bottom edge clamp into the last cell.
pub fn map_click(x: f64, y: f64, w: f64, h: f64) -> Result<GridCell, GridError> {
    // Written as negations so NaN falls through to the error arms.
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(GridError::EmptyImage { w, h });
    }
    if !(x >= 0.0 && y >= 0.0 && x <= w && y <= h) {
        return Err(GridError::ClickOutOfBounds { x, y, w, h });
    }
    let side = f64::from(GRID_SIDE);
    let last = GRID_SIDE - 1;
    let row = ((side * y / h).floor() as u8).min(last);
    let col = ((side * x / w).floor() as u8).min(last);
    Ok(GridCell { row, col })
}

/// Parameters of the theoretical password space `(((w·h / t²)·m)^n)^c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceParams {
    /// Image width in pixels.
    pub w: u64,
    /// Image height in pixels.
    pub h: u64,
    /// Side of a tolerance square in pixels.
    pub t: u64,
    /// Images shown per challenge level.
    pub m: u64,
    /// Labeling statuses to choose from.
    pub n: u32,
    /// Click points (levels).
    pub c: u32,
}

impl Default for SpaceParams {
    fn default() -> Self {
        SpaceParams {
            w: 450,
            h: 450,
            t: 150,
            m: 4,
            n: 4,
            c: 3,
        }
    }
}

impl SpaceParams {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.w == 0 || self.h == 0 || self.t == 0 {
            return Err(GridError::InvalidSpace("w, h and t must be positive"));
        }
        if self.m == 0 || self.n == 0 || self.c == 0 {
            return Err(GridError::InvalidSpace("m, n and c must be positive"));
        }
        if self.t > self.w || self.t > self.h {
            return Err(GridError::InvalidSpace("t must not exceed w or h"));
        }
        Ok(())
    }
}

/// Exact password space `(((floor(w·h / t²))·m)^n)^c`.
pub fn password_space(p: &SpaceParams) -> Result<BigUint, GridError> {
    p.validate()?;
    let area = BigUint::from(p.w) * BigUint::from(p.h);
    let squares = area / (BigUint::from(p.t) * BigUint::from(p.t));
    let per_level = squares * BigUint::from(p.m);
    Ok(per_level.pow(p.n).pow(p.c))
}
