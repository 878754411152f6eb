//! Synthetic shapes dataset: 3×3 layouts of colored shapes rendered at 30×30,
//! relational yes/no queries, balanced split generation and the SVDS split format.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::rng::{mix64, seeded, stream, Rng};
use crate::tensor::Tensor;

pub const GRID: usize = 3;
pub const CELL: usize = 10;
pub const IMAGE_SIZE: usize = GRID * CELL;
pub const IMAGE_LEN: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;
pub const MAX_TOKENS: usize = 5;
pub const PAD: u16 = 0;
pub const VOCAB: [&str; 12] = [
    "<pad>", "is", "red", "green", "blue", "circle", "square", "triangle", "above", "below", "left_of", "right_of",
];
pub const VOCAB_SIZE: usize = VOCAB.len();
pub const QUERY_LENGTHS: [usize; 3] = [3, 4, 5];
pub const LENGTH_MIX: [f64; 3] = [0.125, 0.625, 0.25];
/// Rejection budget per query before it is considered unbalanceable.
pub const MAX_REJECTIONS: usize = 10_000;
/// Fraction of length-4/5 query strings reserved for the test split.
pub const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
}

/// Cells in row-major order; `cells[r * 3 + c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Layout {
    pub cells: [Option<Object>; GRID * GRID],
}

impl Layout {
    pub fn get(&self, r: isize, c: isize) -> Option<Object> {
        if (0..GRID as isize).contains(&r) && (0..GRID as isize).contains(&c) {
            self.cells[r as usize * GRID + c as usize]
        } else {
            None
        }
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().flatten().count()
    }
}

/// Each cell independently occupied with `occupancy`, uniform shape and color;
/// resampled while empty.
pub fn sample_layout(rng: &mut Rng, occupancy: f64) -> Result<Layout> {
    if !(occupancy > 0.0 && occupancy <= 1.0) {
        return Err(Error::Config(format!("occupancy {occupancy} not in (0, 1]")));
    }
    loop {
        let mut l = Layout::default();
        for cell in &mut l.cells {
            if rng.random::<f64>() < occupancy {
                *cell = Some(Object {
                    shape: Shape::ALL[rng.random_range(0..3)],
                    color: Color::ALL[rng.random_range(0..3)],
                });
            }
        }
        if l.occupied() > 0 {
            return Ok(l);
        }
    }
}

/// Whether cell-local pixel `(y, x)` (0..10) belongs to `shape`.
pub fn shape_covers(shape: Shape, y: usize, x: usize) -> bool {
    let (fy, fx) = (y as f64 + 0.5 - 5.0, x as f64 + 0.5 - 5.0);
    match shape {
        Shape::Square => (1..=8).contains(&y) && (1..=8).contains(&x),
        Shape::Circle => fy * fy + fx * fx <= 16.0,
        Shape::Triangle => (1..=8).contains(&y) && fx.abs() <= y as f64 / 2.0,
    }
}

/// `3×30×30` image, channel-major, shape pixels set to 1 in the object's color channel.
pub fn render_image(layout: &Layout) -> Tensor {
    let mut data = vec![0.0; IMAGE_LEN];
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for (idx, cell) in layout.cells.iter().enumerate() {
        let Some(o) = cell else { continue };
        let (r0, c0) = ((idx / GRID) * CELL, (idx % GRID) * CELL);
        for y in 0..CELL {
            for x in 0..CELL {
                if shape_covers(o.shape, y, x) {
                    data[o.color.channel() * plane + (r0 + y) * IMAGE_SIZE + c0 + x] = 1.0;
                }
            }
        }
    }
    Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attr {
    Color(Color),
    Shape(Shape),
}

impl Attr {
    pub const ALL: [Attr; 6] = [
        Attr::Color(Color::Red),
        Attr::Color(Color::Green),
        Attr::Color(Color::Blue),
        Attr::Shape(Shape::Circle),
        Attr::Shape(Shape::Square),
        Attr::Shape(Shape::Triangle),
    ];

    pub fn matches(self, o: Object) -> bool {
        match self {
            Attr::Color(c) => o.color == c,
            Attr::Shape(s) => o.shape == s,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Attr::Color(Color::Red) => "red",
            Attr::Color(Color::Green) => "green",
            Attr::Color(Color::Blue) => "blue",
            Attr::Shape(Shape::Circle) => "circle",
            Attr::Shape(Shape::Square) => "square",
            Attr::Shape(Shape::Triangle) => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Above, Relation::Below, Relation::LeftOf, Relation::RightOf];

    /// Offset from the object named after the relation word to the object named before it:
    /// "A below B" puts A one row under B.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Relation::Above => (-1, 0),
            Relation::Below => (1, 0),
            Relation::LeftOf => (0, -1),
            Relation::RightOf => (0, 1),
        }
    }

    fn word(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
        }
    }
}

/// `is ATTR REL{0,2} ATTR`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub first: Attr,
    pub relations: Vec<Relation>,
    pub last: Attr,
}

impl Query {
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        for w in &words {
            if !VOCAB[1..].contains(w) {
                return Err(Error::UnknownWord(w.to_string()));
            }
        }
        let attr = |w: &str| Attr::ALL.into_iter().find(|a| a.word() == w);
        let rel = |w: &str| Relation::ALL.into_iter().find(|r| r.word() == w);
        let bad = || Error::Grammar(format!("expected `is ATTR [REL [REL]] ATTR`, got {text:?}"));
        if !(3..=5).contains(&words.len()) || words[0] != "is" {
            return Err(bad());
        }
        let first = attr(words[1]).ok_or_else(bad)?;
        let last = attr(words[words.len() - 1]).ok_or_else(bad)?;
        let relations = words[2..words.len() - 1]
            .iter()
            .map(|w| rel(w).ok_or_else(bad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Query { first, relations, last })
    }

    pub fn len(&self) -> usize {
        3 + self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Length-3 queries naming two different colors or two different shapes.
    pub fn is_self_conflict(&self) -> bool {
        self.relations.is_empty()
            && self.first != self.last
            && matches!(
                (self.first, self.last),
                (Attr::Color(_), Attr::Color(_)) | (Attr::Shape(_), Attr::Shape(_))
            )
    }

    pub fn tokens(&self) -> Vec<u16> {
        tokenize(&self.to_string()).unwrap()
    }

    /// Every grammar string of the given length.
    pub fn all_of_length(len: usize) -> Vec<Query> {
        let rels: Vec<Vec<Relation>> = match len {
            3 => vec![vec![]],
            4 => Relation::ALL.iter().map(|&r| vec![r]).collect(),
            5 => Relation::ALL
                .iter()
                .flat_map(|&a| Relation::ALL.iter().map(move |&b| vec![a, b]))
                .collect(),
            _ => vec![],
        };
        let mut out = Vec::new();
        for first in Attr::ALL {
            for r in &rels {
                for last in Attr::ALL {
                    out.push(Query {
                        first,
                        relations: r.clone(),
                        last,
                    });
                }
            }
        }
        out
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "is {}", self.first.word())?;
        for r in &self.relations {
            write!(f, " {}", r.word())?;
        }
        write!(f, " {}", self.last.word())
    }
}

/// Length 3: one object with both attributes. Longer: a chain `o0, o1[, o2]` of
/// occupied cells where each object sits in its relation's direction from the next,
/// `o0` has the first attribute and the final object the last.
pub fn evaluate_query(layout: &Layout, q: &Query) -> bool {
    if q.relations.is_empty() {
        return layout.cells.iter().flatten().any(|&o| q.first.matches(o) && q.last.matches(o));
    }
    (0..GRID * GRID).any(|start| {
        let (r, c) = ((start / GRID) as isize, (start % GRID) as isize);
        match layout.get(r, c) {
            Some(o) if q.first.matches(o) => chain_holds(layout, r, c, &q.relations, q.last),
            _ => false,
        }
    })
}

fn chain_holds(layout: &Layout, r: isize, c: isize, rels: &[Relation], last: Attr) -> bool {
    let (dr, dc) = rels[0].offset();
    let (nr, nc) = (r - dr, c - dc);
    match layout.get(nr, nc) {
        None => false,
        Some(o) if rels.len() == 1 => last.matches(o),
        Some(_) => chain_holds(layout, nr, nc, &rels[1..], last),
    }
}

pub fn tokenize(text: &str) -> Result<Vec<u16>> {
    text.split_whitespace()
        .map(|w| {
            VOCAB[1..]
                .iter()
                .position(|v| *v == w)
                .map(|p| p as u16 + 1)
                .ok_or_else(|| Error::UnknownWord(w.to_string()))
        })
        .collect()
}

/// Inverse of [`tokenize`]; pad ids are skipped.
pub fn detokenize(ids: &[u16]) -> Result<String> {
    let words = ids
        .iter()
        .filter(|&&t| t != PAD)
        .map(|&t| {
            VOCAB
                .get(t as usize)
                .copied()
                .ok_or_else(|| Error::Format(format!("token id {t} outside vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

pub fn pad_tokens(mut ids: Vec<u16>) -> Vec<u16> {
    ids.resize(MAX_TOKENS, PAD);
    ids
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSample {
    pub image: Tensor,
    /// Padded to [`MAX_TOKENS`].
    pub tokens: Vec<u16>,
    /// 1 = yes, 0 = no.
    pub answer: u8,
    pub query_len: u8,
    /// Ground truth; absent for samples read back from disk.
    pub layout: Option<Layout>,
}

impl ShapesSample {
    pub fn query_text(&self) -> String {
        detokenize(&self.tokens).unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// `(train, test)` sizes for `small`, `medium`, `large`.
pub fn named_size(name: &str) -> Result<(usize, usize)> {
    match name {
        "small" => Ok((14_592, 1_024)),
        "medium" => Ok((29_184, 2_048)),
        "large" => Ok((43_776, 3_072)),
        other => Err(Error::Config(format!("unknown dataset size {other:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub balance: bool,
    pub occupancy: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            balance: true,
            occupancy: 0.5,
        }
    }
}

/// Query strings available to a split. Length-4/5 strings are partitioned by a
/// seed-dependent shuffle; length-3 strings are shared.
pub fn split_queries(seed: u64, split: Split, len: usize) -> Vec<Query> {
    let mut all = Query::all_of_length(len);
    if len == 3 {
        return all;
    }
    all.shuffle(&mut seeded(mix64(seed ^ 0x5155_4552_5953_504c) ^ len as u64));
    let held = (all.len() as f64 * HELD_OUT_FRACTION).round() as usize;
    match split {
        Split::Test => all[..held].to_vec(),
        Split::Train => all[held..].to_vec(),
    }
}

/// Whether both answers occur for `q` within the rejection budget (self-conflict
/// queries always qualify).
pub fn is_balanceable(q: &Query, seed: u64, occupancy: f64) -> Result<bool> {
    if q.is_self_conflict() {
        return Ok(true);
    }
    let mut rng = seeded(mix64(seed ^ fxhash(&q.to_string())));
    let (mut yes, mut no) = (false, false);
    for _ in 0..MAX_REJECTIONS {
        if evaluate_query(&sample_layout(&mut rng, occupancy)?, q) {
            yes = true;
        } else {
            no = true;
        }
        if yes && no {
            return Ok(true);
        }
    }
    Ok(false)
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Clone, Debug)]
pub struct GeneratedSplit {
    pub samples: Vec<ShapesSample>,
    /// Query strings removed because one answer never occurred.
    pub dropped: Vec<String>,
}

/// Exact per-length counts for `size` samples under [`LENGTH_MIX`].
pub fn length_counts(size: usize) -> [usize; 3] {
    let n3 = (size as f64 * LENGTH_MIX[0]).round() as usize;
    let n5 = (size as f64 * LENGTH_MIX[2]).round() as usize;
    [n3, size - n3 - n5, n5]
}

/// Deterministic in `(seed, size, split, opts)`. Query choice and per-query answer
/// targets are drawn first; each sample's layout then comes from its own stream.
pub fn generate_dataset(seed: u64, size: usize, split: Split, opts: GenerateOptions) -> Result<GeneratedSplit> {
    if size == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let master = mix64(seed.wrapping_mul(3).wrapping_add(split_tag));
    let mut dropped = Vec::new();
    let mut pools: Vec<Vec<Query>> = Vec::new();
    for len in QUERY_LENGTHS {
        let mut pool = Vec::new();
        for q in split_queries(seed, split, len) {
            if is_balanceable(&q, seed, opts.occupancy)? {
                pool.push(q);
            } else {
                warn!("dropping unbalanceable query {q:?}", q = q.to_string());
                dropped.push(q.to_string());
            }
        }
        pools.push(pool);
    }

    let counts = length_counts(size);
    let mut lengths: Vec<usize> = (0..3).flat_map(|k| std::iter::repeat_n(k, counts[k])).collect();
    let mut plan_rng = seeded(master);
    lengths.shuffle(&mut plan_rng);
    let mut seen: std::collections::HashMap<String, usize> = Default::default();
    let plan: Vec<(Query, bool)> = lengths
        .into_iter()
        .map(|k| {
            let pool = &pools[k];
            let q = pool[plan_rng.random_range(0..pool.len())].clone();
            let n = seen.entry(q.to_string()).or_default();
            // alternate targets per query string so each stays near 50/50
            let target = if q.is_self_conflict() {
                false
            } else {
                (*n + (fxhash(&q.to_string()) & 1) as usize) % 2 == 0
            };
            *n += 1;
            (q, target)
        })
        .collect();

    let mut samples = Vec::with_capacity(size);
    for (idx, (q, target)) in plan.into_iter().enumerate() {
        let mut rng = stream(master, idx as u64);
        let mut layout = sample_layout(&mut rng, opts.occupancy)?;
        if opts.balance {
            let mut tries = 1;
            while evaluate_query(&layout, &q) != target && tries < MAX_REJECTIONS {
                layout = sample_layout(&mut rng, opts.occupancy)?;
                tries += 1;
            }
            if evaluate_query(&layout, &q) != target {
                warn!("sample {idx}: target answer unreachable for {q}");
            }
        }
        let answer = evaluate_query(&layout, &q);
        samples.push(ShapesSample {
            image: render_image(&layout),
            tokens: pad_tokens(q.tokens()),
            answer: answer as u8,
            query_len: q.len() as u8,
            layout: Some(layout),
        });
    }
    Ok(GeneratedSplit { samples, dropped })
}

/// Re-evaluates every sample carrying a layout; returns the number verified.
pub fn audit_labels(samples: &[ShapesSample]) -> Result<usize> {
    let mut checked = 0;
    for (i, s) in samples.iter().enumerate() {
        let Some(layout) = &s.layout else { continue };
        let q = Query::parse(&s.query_text())?;
        if evaluate_query(layout, &q) as u8 != s.answer {
            return Err(Error::Format(format!("sample {i}: stored answer disagrees with its layout")));
        }
        checked += 1;
    }
    Ok(checked)
}

const SVDS_MAGIC: &[u8; 4] = b"SVDS";
const SVDS_VERSION: u32 = 1;

pub fn write_svds(w: &mut impl Write, samples: &[ShapesSample]) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + samples.len() * (IMAGE_LEN * 4 + MAX_TOKENS * 2 + 2));
    buf.extend_from_slice(SVDS_MAGIC);
    buf.extend_from_slice(&SVDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(MAX_TOKENS as u16).to_le_bytes());
    for s in samples {
        if s.image.len() != IMAGE_LEN || s.tokens.len() != MAX_TOKENS {
            return Err(Error::Format("sample does not match split geometry".into()));
        }
        for &v in s.image.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &t in &s.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        buf.push(s.answer);
        buf.push(s.query_len);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_svds(r: &mut impl Read) -> Result<Vec<ShapesSample>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let err = |m: &str| Error::Format(format!("SVDS: {m}"));
    if buf.len() < 14 || &buf[..4] != SVDS_MAGIC {
        return Err(err("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    if u32_at(4) != SVDS_VERSION {
        return Err(err("unsupported version"));
    }
    let count = u32_at(8) as usize;
    let max_len = u16::from_le_bytes([buf[12], buf[13]]) as usize;
    let rec = IMAGE_LEN * 4 + max_len * 2 + 2;
    if buf.len() != 14 + count * rec {
        return Err(err("length does not match header"));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let b = &buf[14 + i * rec..14 + (i + 1) * rec];
        let image: Vec<f64> = b[..IMAGE_LEN * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = &b[IMAGE_LEN * 4..IMAGE_LEN * 4 + max_len * 2];
        let tokens: Vec<u16> = t.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if tokens.iter().any(|&t| t as usize >= VOCAB_SIZE) {
            return Err(err("token id outside vocabulary"));
        }
        let answer = b[rec - 2];
        if answer > 1 {
            return Err(err("answer byte must be 0 or 1"));
        }
        out.push(ShapesSample {
            image: Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], image)?,
            tokens,
            answer,
            query_len: b[rec - 1],
            layout: None,
        });
    }
    Ok(out)
}

pub fn save_split(path: &Path, samples: &[ShapesSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_svds(&mut f, samples)?;
    f.flush()?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Vec<ShapesSample>> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Format(format!("cannot open split {}: {e}", path.display())))?;
    read_svds(&mut f)
}

/// Sidecar manifest contents for a generated split.
pub fn manifest(seed: u64, split: Split, opts: GenerateOptions, g: &GeneratedSplit) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("seed", seed);
    kv.set("split", split.name());
    kv.set("size", g.samples.len());
    kv.set("balance", opts.balance);
    kv.set("occupancy", opts.occupancy);
    for len in QUERY_LENGTHS {
        let n = g.samples.iter().filter(|s| s.query_len as usize == len).count();
        kv.set(&format!("count_len{len}"), n);
    }
    let yes = g.samples.iter().filter(|s| s.answer == 1).count();
    kv.set("yes_fraction", yes as f64 / g.samples.len() as f64);
    kv.set("dropped_queries", g.dropped.len());
    kv
}
