//! Mini 4x4 Sudoku task (2x2 boxes).
//!
//! Vocabulary: token 0 is a reserved blank that never appears in solutions;
//! tokens 1..=4 are the digits. Boards are generated by validity-preserving
//! transformations of a base grid (digit relabeling, row/column swaps inside
//! bands/stacks, band/stack swaps, transposition) and clues are revealed
//! uniformly at random.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sampler::ClueMask;

pub const SIDE: usize = 4;
pub const CELLS: usize = SIDE * SIDE;
/// Digits 1..=4 plus the reserved blank.
pub const VOCAB: usize = 5;

const BASE: [usize; CELLS] = [
    1, 2, 3, 4, //
    3, 4, 1, 2, //
    2, 1, 4, 3, //
    4, 3, 2, 1,
];

/// A bundle of solved boards with one clue mask each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiniSudokuTask {
    pub boards: Vec<Vec<usize>>,
    pub clue_masks: Vec<Vec<bool>>,
    pub clue_fraction: f64,
}

/// Row/column/box uniqueness of digits 1..=4; any blank fails.
pub fn is_valid(grid: &[usize]) -> bool {
    if grid.len() != CELLS {
        return false;
    }
    let group_ok = |cells: [usize; SIDE]| {
        let mut seen = [false; SIDE + 1];
        for &c in &cells {
            if c == 0 || c > SIDE || seen[c] {
                return false;
            }
            seen[c] = true;
        }
        true
    };
    for i in 0..SIDE {
        let row = [
            grid[4 * i],
            grid[4 * i + 1],
            grid[4 * i + 2],
            grid[4 * i + 3],
        ];
        let col = [grid[i], grid[i + 4], grid[i + 8], grid[i + 12]];
        if !group_ok(row) || !group_ok(col) {
            return false;
        }
    }
    for (br, bc) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        let at = |r: usize, c: usize| grid[4 * (br + r) + bc + c];
        if !group_ok([at(0, 0), at(0, 1), at(1, 0), at(1, 1)]) {
            return false;
        }
    }
    true
}

/// One random validity-preserving transform of the base grid.
pub fn random_solution(rng: &mut impl Rng) -> Vec<usize> {
    let mut grid = BASE.to_vec();

    // digit relabeling
    let mut digits = [1usize, 2, 3, 4];
    for i in (1..4).rev() {
        let j = rng.random_range(0..=i);
        digits.swap(i, j);
    }
    for cell in grid.iter_mut() {
        *cell = digits[*cell - 1];
    }

    let mut rows: [usize; 4] = [0, 1, 2, 3];
    if rng.random::<bool>() {
        rows.swap(0, 1);
    }
    if rng.random::<bool>() {
        rows.swap(2, 3);
    }
    if rng.random::<bool>() {
        rows.swap(0, 2);
        rows.swap(1, 3);
    }
    let mut cols: [usize; 4] = [0, 1, 2, 3];
    if rng.random::<bool>() {
        cols.swap(0, 1);
    }
    if rng.random::<bool>() {
        cols.swap(2, 3);
    }
    if rng.random::<bool>() {
        cols.swap(0, 2);
        cols.swap(1, 3);
    }
    let transpose = rng.random::<bool>();

    let mut out = vec![0usize; CELLS];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let src = grid[4 * rows[r] + cols[c]];
            if transpose {
                out[4 * c + r] = src;
            } else {
                out[4 * r + c] = src;
            }
        }
    }
    debug_assert!(is_valid(&out));
    out
}

/// Clue mask revealing `round(16 * clue_fraction)` cells uniformly.
pub fn random_clue_mask(clue_fraction: f64, board: &[usize], rng: &mut impl Rng) -> ClueMask {
    let n_clues = ((CELLS as f64) * clue_fraction).round() as usize;
    let mut order: Vec<usize> = (0..CELLS).collect();
    for i in (1..CELLS).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut pinned = vec![false; CELLS];
    for &cell in order.iter().take(n_clues) {
        pinned[cell] = true;
    }
    ClueMask {
        pinned,
        values: board.to_vec(),
    }
}

/// Generate `count` solved boards with clue masks.
pub fn mini_sudoku(count: usize, clue_fraction: f64, rng: &mut impl Rng) -> MiniSudokuTask {
    assert!(clue_fraction > 0.0 && clue_fraction < 1.0);
    let mut boards = Vec::with_capacity(count);
    let mut clue_masks = Vec::with_capacity(count);
    for _ in 0..count {
        let board = random_solution(rng);
        let mask = random_clue_mask(clue_fraction, &board, rng);
        clue_masks.push(mask.pinned);
        boards.push(board);
    }
    MiniSudokuTask {
        boards,
        clue_masks,
        clue_fraction,
    }
}

/// Measured validity rate of filling every non-clue cell uniformly from the
/// digits; the floor any trained model must beat.
pub fn uniform_fill_baseline(clue_fraction: f64, n_boards: usize, rng: &mut impl Rng) -> f64 {
    let mut valid = 0usize;
    for _ in 0..n_boards {
        let board = random_solution(rng);
        let mask = random_clue_mask(clue_fraction, &board, rng);
        let mut filled = board.clone();
        for (cell, item) in filled.iter_mut().enumerate() {
            if !mask.pinned[cell] {
                *item = rng.random_range(1..=SIDE);
            }
        }
        if is_valid(&filled) {
            valid += 1;
        }
    }
    valid as f64 / n_boards as f64
}
