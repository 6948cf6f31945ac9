//! Fixed 5x7 bitmap font, one row per string, `#` is ink.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

const FONT: &[(&str, [&str; GLYPH_H])] = &[
    ("0", [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ("1", ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ("2", [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ("3", ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ("4", ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ("5", ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ("6", ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ("7", ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ("8", [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ("9", [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
    ("a", [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"]),
    ("b", ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."]),
    ("c", [".....", ".....", ".###.", "#....", "#....", "#...#", ".###."]),
    ("d", ["....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"]),
    ("e", [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."]),
    ("f", ["..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."]),
    ("g", [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."]),
    ("h", ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"]),
    ("i", ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."]),
    ("j", ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."]),
    ("k", ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."]),
    ("l", [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ("m", [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"]),
    ("n", [".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"]),
    ("o", [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."]),
    ("p", [".....", ".....", "####.", "#...#", "####.", "#....", "#...."]),
    ("q", [".....", ".....", ".##.#", "#..##", ".####", "....#", "....#"]),
    ("r", [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."]),
    ("s", [".....", ".....", ".###.", "#....", ".###.", "....#", "####."]),
    ("t", [".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."]),
    ("u", [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"]),
    ("v", [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ("w", [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."]),
    ("x", [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),
    ("y", [".....", ".....", "#...#", "#...#", ".####", "....#", ".###."]),
    ("z", [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"]),
    ("+", [".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."]),
    ("-", [".....", ".....", ".....", "#####", ".....", ".....", "....."]),
    ("=", [".....", ".....", "#####", ".....", "#####", ".....", "....."]),
];

/// Bitmap rows for a symbol, if the font has it.
pub fn glyph(symbol: &str) -> Option<&'static [&'static str; GLYPH_H]> {
    FONT.iter().find(|(s, _)| *s == symbol).map(|(_, g)| g)
}

/// Every symbol the font can draw.
pub fn symbols() -> impl Iterator<Item = &'static str> {
    FONT.iter().map(|(s, _)| *s)
}
