//! Deterministic synthetic expressions: a small grammar with superscripts,
//! subscripts and fractions, rendered from the bitmap font.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::font::{self, GLYPH_H, GLYPH_W};
use super::{Image, Sample};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Atom(&'static str),
    Sup(&'static str, Vec<Expr>),
    Sub(&'static str, Vec<Expr>),
    Frac(Vec<Expr>, Vec<Expr>),
}

impl Expr {
    pub fn depth(&self) -> usize {
        let seq = |s: &[Expr]| s.iter().map(Expr::depth).max().unwrap_or(0);
        match self {
            Expr::Atom(_) => 0,
            Expr::Sup(_, e) | Expr::Sub(_, e) => 1 + seq(e),
            Expr::Frac(n, d) => 1 + seq(n).max(seq(d)),
        }
    }

    pub fn tokens(&self, out: &mut Vec<String>) {
        let group = |out: &mut Vec<String>, s: &[Expr]| {
            out.push("{".into());
            s.iter().for_each(|e| e.tokens(out));
            out.push("}".into());
        };
        match self {
            Expr::Atom(a) => out.push((*a).into()),
            Expr::Sup(b, e) | Expr::Sub(b, e) => {
                out.push((*b).into());
                out.push(if matches!(self, Expr::Sup(..)) { "^" } else { "_" }.into());
                group(out, e);
            }
            Expr::Frac(n, d) => {
                out.push("\\frac".into());
                group(out, n);
                group(out, d);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SynthOptions {
    /// Pixel size of one font dot at the top level.
    pub scale: usize,
    pub margin: usize,
    pub max_depth: usize,
    /// Items per top-level sequence.
    pub max_items: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { scale: 3, margin: 8, max_depth: 2, max_items: 4 }
    }
}

const OPERATORS: [&str; 3] = ["+", "-", "="];

fn operand(rng: &mut ChaCha8Rng) -> &'static str {
    let syms: Vec<&'static str> = font::symbols().filter(|s| !OPERATORS.contains(s)).collect();
    syms[rng.random_range(0..syms.len())]
}

fn gen_seq(rng: &mut ChaCha8Rng, budget: usize, max_items: usize) -> Vec<Expr> {
    let n = rng.random_range(1..=max_items);
    (0..n)
        .map(|i| {
            let r: f64 = rng.random();
            if budget > 0 && r < 0.24 {
                Expr::Sup(operand(rng), gen_seq(rng, budget - 1, 2))
            } else if budget > 0 && r < 0.44 {
                Expr::Sub(operand(rng), gen_seq(rng, budget - 1, 2))
            } else if budget > 0 && r < 0.54 {
                Expr::Frac(gen_seq(rng, budget - 1, 2), gen_seq(rng, budget - 1, 2))
            } else if i > 0 && r > 0.85 {
                Expr::Atom(OPERATORS[rng.random_range(0..OPERATORS.len())])
            } else {
                Expr::Atom(operand(rng))
            }
        })
        .collect()
}

/// Symbols the generator can emit, in a fixed order.
pub fn synth_vocab() -> Vocab {
    let mut syms: Vec<&str> = font::symbols().collect();
    syms.extend(["^", "_", "{", "}", "\\frac"]);
    Vocab::new(&syms).expect("synthetic symbol set is valid")
}

enum Draw {
    Glyph { sym: &'static str, x: i64, top: i64, scale: usize },
    Bar { x0: i64, x1: i64, y: i64, thick: usize },
}

/// Laid-out box; coordinates are relative to its left edge and baseline (y down).
struct LBox {
    w: i64,
    asc: i64,
    desc: i64,
    ops: Vec<Draw>,
}

impl LBox {
    fn place(&mut self, other: LBox, dx: i64, dy: i64) {
        for op in other.ops {
            self.ops.push(match op {
                Draw::Glyph { sym, x, top, scale } => Draw::Glyph { sym, x: x + dx, top: top + dy, scale },
                Draw::Bar { x0, x1, y, thick } => Draw::Bar { x0: x0 + dx, x1: x1 + dx, y: y + dy, thick },
            });
        }
    }
}

fn atom_box(sym: &'static str, s: usize) -> LBox {
    let si = s as i64;
    LBox {
        w: GLYPH_W as i64 * si,
        asc: GLYPH_H as i64 * si,
        desc: 0,
        ops: vec![Draw::Glyph { sym, x: 0, top: -(GLYPH_H as i64) * si, scale: s }],
    }
}

fn seq_box(items: &[Expr], s: usize) -> LBox {
    let gap = s as i64;
    let mut out = LBox { w: 0, asc: 0, desc: 0, ops: Vec::new() };
    for (i, e) in items.iter().enumerate() {
        let b = expr_box(e, s);
        let x = if i == 0 { 0 } else { out.w + gap };
        out.asc = out.asc.max(b.asc);
        out.desc = out.desc.max(b.desc);
        out.w = x + b.w;
        out.place(b, x, 0);
    }
    out
}

fn expr_box(e: &Expr, s: usize) -> LBox {
    let si = s as i64;
    let script = s.saturating_sub(1).max(1);
    match e {
        Expr::Atom(a) => atom_box(a, s),
        Expr::Sup(base, body) | Expr::Sub(base, body) => {
            let mut b = atom_box(base, s);
            let sc = seq_box(body, script);
            let x = b.w + 1;
            // Baseline shift of the script, positive is downward.
            let shift = if matches!(e, Expr::Sup(..)) {
                -((GLYPH_H as i64 * si * 3) / 5)
            } else {
                (GLYPH_H as i64 * si * 2) / 5
            };
            b.asc = b.asc.max(sc.asc - shift);
            b.desc = b.desc.max(sc.desc + shift);
            b.w = x + sc.w;
            b.place(sc, x, shift);
            b
        }
        Expr::Frac(num, den) => {
            let n = seq_box(num, s);
            let d = seq_box(den, s);
            let w = n.w.max(d.w) + 2 * si;
            let axis = (GLYPH_H as i64 * si) / 2;
            let thick = s.saturating_sub(1).max(1);
            let gap = si;
            let n_base = -axis - gap - n.desc;
            let d_base = -axis + thick as i64 + gap + d.asc;
            let mut out = LBox {
                w,
                asc: -(n_base - n.asc),
                desc: d_base + d.desc,
                ops: vec![Draw::Bar { x0: 0, x1: w, y: -axis, thick }],
            };
            let (nw, dw) = (n.w, d.w);
            out.place(n, (w - nw) / 2, n_base);
            out.place(d, (w - dw) / 2, d_base);
            out
        }
    }
}

/// Render an expression sequence to an ink-high image.
pub fn render(items: &[Expr], opts: &SynthOptions) -> Image {
    let b = seq_box(items, opts.scale);
    let m = opts.margin as i64;
    let (h, w) = ((b.asc + b.desc + 2 * m) as usize, (b.w + 2 * m) as usize);
    let mut img = Image::blank(h, w);
    let base = m + b.asc;
    for op in &b.ops {
        match *op {
            Draw::Glyph { sym, x, top, scale } => {
                let rows = font::glyph(sym).expect("generator emits font symbols");
                for (r, row) in rows.iter().enumerate() {
                    for (c, px) in row.bytes().enumerate() {
                        if px != b'#' {
                            continue;
                        }
                        for dy in 0..scale {
                            for dx in 0..scale {
                                let yy = base + top + (r * scale + dy) as i64;
                                let xx = m + x + (c * scale + dx) as i64;
                                img.set(yy as usize, xx as usize, 1.0);
                            }
                        }
                    }
                }
            }
            Draw::Bar { x0, x1, y, thick } => {
                for t in 0..thick as i64 {
                    for xx in x0..x1 {
                        img.set((base + y + t) as usize, (m + xx) as usize, 1.0);
                    }
                }
            }
        }
    }
    img
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn synth_generate(seed: u64, n: usize, opts: &SynthOptions) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let items = gen_seq(&mut rng, opts.max_depth, opts.max_items);
            let mut tokens = Vec::new();
            items.iter().for_each(|e| e.tokens(&mut tokens));
            Sample { id: format!("synth_{i:06}"), image: render(&items, opts), tokens }
        })
        .collect()
}

/// Expression trees for the same `(seed, i)` streams, for structural checks.
pub fn synth_exprs(seed: u64, n: usize, opts: &SynthOptions) -> Vec<Vec<Expr>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            gen_seq(&mut rng, opts.max_depth, opts.max_items)
        })
        .collect()
}
