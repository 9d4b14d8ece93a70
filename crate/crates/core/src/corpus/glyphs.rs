//! Glyph bitmaps: a fixed Latin-like font and procedurally generated
//! scripts for the synthetic resource-poor language.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::seeds::derive_seed;

/// Side length of the glyph cell grid.
pub const GLYPH_SIDE: usize = 7;

/// A 7x7 binary bitmap packed into the low 49 bits of a u64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Glyph(u64);

impl Glyph {
    pub fn from_bits(bits: u64) -> Self {
        Self(bits & ((1u64 << 49) - 1))
    }

    pub fn bits(&self) -> u64 {
        self.0
    }

    pub fn cell(&self, y: usize, x: usize) -> bool {
        debug_assert!(y < GLYPH_SIDE && x < GLYPH_SIDE);
        self.0 >> (y * GLYPH_SIDE + x) & 1 == 1
    }

    fn set(&mut self, y: usize, x: usize) {
        self.0 |= 1 << (y * GLYPH_SIDE + x);
    }

    pub fn popcount(&self) -> u32 {
        self.0.count_ones()
    }

    /// Parse seven rows of '.'/'#' art, each 5 wide, centered into 7x7.
    fn from_rows5(rows: [&str; 7]) -> Self {
        let mut g = Glyph(0);
        for (y, row) in rows.iter().enumerate() {
            debug_assert_eq!(row.len(), 5);
            for (x, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    g.set(y, x + 1);
                }
            }
        }
        g
    }

    /// True when every set cell can reach every other through
    /// 4-neighborhood moves.
    pub fn is_connected(&self) -> bool {
        let cells: Vec<(usize, usize)> = (0..GLYPH_SIDE)
            .flat_map(|y| (0..GLYPH_SIDE).map(move |x| (y, x)))
            .filter(|&(y, x)| self.cell(y, x))
            .collect();
        if cells.is_empty() {
            return false;
        }
        let mut seen = vec![cells[0]];
        let mut queue = vec![cells[0]];
        while let Some((y, x)) = queue.pop() {
            let mut neighbors = Vec::new();
            if y > 0 {
                neighbors.push((y - 1, x));
            }
            if y + 1 < GLYPH_SIDE {
                neighbors.push((y + 1, x));
            }
            if x > 0 {
                neighbors.push((y, x - 1));
            }
            if x + 1 < GLYPH_SIDE {
                neighbors.push((y, x + 1));
            }
            for n in neighbors {
                if self.cell(n.0, n.1) && !seen.contains(&n) {
                    seen.push(n);
                    queue.push(n);
                }
            }
        }
        seen.len() == cells.len()
    }
}

/// The 36 fixed Latin-like glyphs (A-Z then 0-9), 5x7 art centered in 7x7.
pub fn latin_like_glyphs() -> Vec<Glyph> {
    LATIN_ART.iter().map(|rows| Glyph::from_rows5(*rows)).collect()
}

#[rustfmt::skip]
const LATIN_ART: [[&str; 7]; 36] = [
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"], // A
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."], // B
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."], // C
    ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."], // D
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"], // E
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."], // F
    [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."], // G
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"], // H
    [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."], // I
    ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."], // J
    ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"], // K
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"], // L
    ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"], // M
    ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"], // N
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."], // O
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."], // P
    [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"], // Q
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"], // R
    [".####", "#....", "#....", ".###.", "....#", "....#", "####."], // S
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."], // T
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."], // U
    ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."], // V
    ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"], // W
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"], // X
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."], // Y
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"], // Z
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."], // 0
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."], // 1
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"], // 2
    [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."], // 3
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."], // 4
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."], // 5
    [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."], // 6
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."], // 7
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."], // 8
    [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."], // 9
];

/// Symbol ids matching [`latin_like_glyphs`], "A".."Z" then "0".."9".
pub fn latin_like_symbols() -> Vec<String> {
    ('A'..='Z')
        .chain('0'..='9')
        .map(|c| c.to_string())
        .collect()
}

/// Generate `n` pairwise-distinct connected glyphs from a seed.
///
/// Each glyph is a 4-neighborhood random walk plus a second stroke, so
/// connectivity holds by construction; candidates that are too sparse,
/// too dense, or colliding with an earlier glyph are re-drawn.
pub fn generated_glyphs(n: usize, seed: u64) -> Vec<Glyph> {
    let mut glyphs: Vec<Glyph> = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempt = 0u64;
        loop {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64, attempt));
            let g = walk_glyph(&mut rng);
            let cells = g.popcount();
            if (8..=30).contains(&cells) && !glyphs.contains(&g) {
                glyphs.push(g);
                break;
            }
            attempt += 1;
            assert!(attempt < 10_000, "glyph generation failed to converge");
        }
    }
    glyphs
}

fn walk_glyph(rng: &mut ChaCha12Rng) -> Glyph {
    let mut g = Glyph(0);
    let mut y = rng.gen_range(2..5usize);
    let mut x = rng.gen_range(2..5usize);
    g.set(y, x);
    let steps = rng.gen_range(10..22usize);
    let mut visited = vec![(y, x)];
    for _ in 0..steps {
        match rng.gen_range(0..4u8) {
            0 if y > 0 => y -= 1,
            1 if y + 1 < GLYPH_SIDE => y += 1,
            2 if x > 0 => x -= 1,
            _ if x + 1 < GLYPH_SIDE => x += 1,
            _ => {}
        }
        g.set(y, x);
        visited.push((y, x));
    }
    // Second stroke from a visited cell keeps the bitmap connected.
    let (mut sy, mut sx) = visited[rng.gen_range(0..visited.len())];
    for _ in 0..rng.gen_range(3..8usize) {
        match rng.gen_range(0..4u8) {
            0 if sy > 0 => sy -= 1,
            1 if sy + 1 < GLYPH_SIDE => sy += 1,
            2 if sx > 0 => sx -= 1,
            _ if sx + 1 < GLYPH_SIDE => sx += 1,
            _ => {}
        }
        g.set(sy, sx);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latin_glyphs_distinct_and_dense_enough() {
        let glyphs = latin_like_glyphs();
        assert_eq!(glyphs.len(), 36);
        for (i, g) in glyphs.iter().enumerate() {
            assert!(g.popcount() >= 4, "glyph {i} too sparse");
            for other in &glyphs[i + 1..] {
                assert_ne!(g, other);
            }
        }
    }

    #[test]
    fn generated_glyphs_connected_distinct_deterministic() {
        let a = generated_glyphs(40, 7);
        let b = generated_glyphs(40, 7);
        assert_eq!(a, b);
        for (i, g) in a.iter().enumerate() {
            assert!(g.popcount() >= 8);
            assert!(g.is_connected(), "glyph {i} disconnected");
            for other in &a[i + 1..] {
                assert_ne!(g, other);
            }
        }
        let c = generated_glyphs(40, 8);
        assert_ne!(a, c);
    }
}
