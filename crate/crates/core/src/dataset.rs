//! Synthetic referring-segmentation scenes.
//!
//! Each scene places two to four non-overlapping shapes in distinct slots
//! (left/right/top/bottom). The expression names a subset of the target's
//! attributes that matches no other shape in the scene, and the target mask
//! is the exact rasterization of the target shape.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Dims;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;

pub const VOCABULARY: [&str; 24] = [
    "<pad>", "the", "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "object",
    "on", "at", "left", "right", "top", "bottom", "shape", "one", "in", "of", "side", "image",
    "<unk>",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCABULARY.iter().position(|w| *w == word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.9],
            Color::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

impl Position {
    pub const ALL: [Position; 4] = [Position::Left, Position::Right, Position::Top, Position::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Right => "right",
            Position::Top => "top",
            Position::Bottom => "bottom",
        }
    }

    /// Slot center as fractions of (width, height).
    fn anchor(self) -> (f64, f64) {
        match self {
            Position::Left => (0.22, 0.5),
            Position::Right => (0.78, 0.5),
            Position::Top => (0.5, 0.22),
            Position::Bottom => (0.5, 0.78),
        }
    }
}

const BACKGROUND: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: Color,
    pub position: Position,
    pub cx: f64,
    pub cy: f64,
    /// Radius for circles, half side for squares, half height for triangles.
    pub size: f64,
}

impl SceneObject {
    /// Whether the point `(x, y)` (pixel units) lies inside the shape.
    /// Triangles point up: apex at `(cx, cy − size)`, base on `y = cy + size`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.size;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        let mut m = vec![false; height * width];
        for y in 0..height {
            for x in 0..width {
                m[y * width + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        m
    }
}

/// Which attributes an expression names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttributeQuery {
    pub color: Option<Color>,
    pub kind: Option<ShapeKind>,
    pub position: Option<Position>,
}

impl AttributeQuery {
    pub fn matches(&self, o: &SceneObject) -> bool {
        self.color.is_none_or(|c| c == o.color)
            && self.kind.is_none_or(|k| k == o.kind)
            && self.position.is_none_or(|p| p == o.position)
    }

    fn words(&self, article: &'static str) -> Vec<&'static str> {
        let mut w = vec![article];
        if let Some(c) = self.color {
            w.push(c.word());
        }
        w.push(self.kind.map_or("object", ShapeKind::word));
        if let Some(p) = self.position {
            let prep = match p {
                Position::Left | Position::Right => "on",
                Position::Top | Position::Bottom => "at",
            };
            w.extend([prep, "the", p.word()]);
        }
        w
    }
}

/// Scene layout knobs, in fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub jitter: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            min_objects: 2,
            max_objects: 4,
            min_size: 0.09,
            max_size: 0.13,
            jitter: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `4H×4W×3`, values in `[0, 1]`.
    pub image: Tensor,
    /// Token ids padded with [`PAD`] to the configured length.
    pub tokens: Vec<usize>,
    /// `4H×4W`, exactly 1 on the target's pixels.
    pub target_mask: Tensor,
    pub expression: String,
    pub objects: Vec<SceneObject>,
    pub target: usize,
}

impl Sample {
    /// `true` for real tokens, `false` for padding.
    pub fn token_keep(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != PAD).collect()
    }

    pub fn target_bits(&self) -> Vec<bool> {
        self.target_mask.data().iter().map(|&v| v > 0.5).collect()
    }
}

fn place(rng: &mut ChaCha8Rng, dims: &Dims, p: &SceneParams, count: usize) -> Option<Vec<SceneObject>> {
    let (hh, ww) = (dims.image_height() as f64, dims.image_width() as f64);
    let side = hh.min(ww);
    let mut slots = Position::ALL.to_vec();
    slots.shuffle(rng);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for &position in slots.iter().take(count) {
        let (ax, ay) = position.anchor();
        let size = rng.gen_range(p.min_size..=p.max_size) * side;
        let o = SceneObject {
            kind: *ShapeKind::ALL.choose(rng).unwrap(),
            color: *Color::ALL.choose(rng).unwrap(),
            position,
            cx: ax * ww + rng.gen_range(-p.jitter..=p.jitter) * side,
            cy: ay * hh + rng.gen_range(-p.jitter..=p.jitter) * side,
            size,
        };
        if o.cx - size < 0.0 || o.cy - size < 0.0 || o.cx + size > ww || o.cy + size > hh {
            return None;
        }
        objects.push(o);
    }
    let (h, w) = (dims.image_height(), dims.image_width());
    let masks: Vec<Vec<bool>> = objects.iter().map(|o| o.rasterize(h, w)).collect();
    for i in 0..masks.len() {
        if !masks[i].iter().any(|&b| b) {
            return None;
        }
        for j in 0..i {
            if masks[i].iter().zip(&masks[j]).any(|(a, b)| *a && *b) {
                return None;
            }
        }
    }
    Some(objects)
}

fn render(objects: &[SceneObject], h: usize, w: usize) -> Vec<f64> {
    let mut img = vec![BACKGROUND; h * w * 3];
    for o in objects {
        let rgb = o.color.rgb();
        for (i, inside) in o.rasterize(h, w).into_iter().enumerate() {
            if inside {
                img[i * 3..i * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    img
}

/// Generates sample `index` of the dataset identified by `seed`. Pure in
/// `(seed, index)`.
pub fn generate_sample(seed: u64, index: u64, dims: &Dims, params: &SceneParams) -> Result<Sample> {
    if params.min_objects < 2 || params.max_objects > 4 || params.min_objects > params.max_objects {
        return Err(Error::Config("scenes hold between 2 and 4 objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (dims.image_height(), dims.image_width());

    let objects = loop {
        let count = rng.gen_range(params.min_objects..=params.max_objects);
        if let Some(o) = place(&mut rng, dims, params, count) {
            break o;
        }
    };
    let target = rng.gen_range(0..objects.len());
    let t = objects[target];

    // Non-empty attribute subsets in random order; position alone is always
    // unique since slots are distinct, so the search terminates.
    let mut subsets: Vec<u8> = (1..8).collect();
    subsets.shuffle(&mut rng);
    let query = subsets
        .into_iter()
        .map(|bits| AttributeQuery {
            color: (bits & 1 != 0).then_some(t.color),
            kind: (bits & 2 != 0).then_some(t.kind),
            position: (bits & 4 != 0).then_some(t.position),
        })
        .find(|q| objects.iter().filter(|o| q.matches(o)).count() == 1)
        .expect("position always identifies the target");
    let article = if rng.gen_bool(0.5) { "the" } else { "a" };
    let words = query.words(article);
    if words.len() > dims.max_tokens {
        return Err(Error::Config(format!(
            "expression of {} words exceeds max_tokens {}",
            words.len(),
            dims.max_tokens
        )));
    }
    let mut tokens: Vec<usize> = words.iter().map(|w| token_id(w).unwrap()).collect();
    tokens.resize(dims.max_tokens, PAD);

    let mask: Vec<f64> = t
        .rasterize(h, w)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    Ok(Sample {
        image: Tensor::new(&[h, w, 3], render(&objects, h, w))?,
        tokens,
        target_mask: Tensor::new(&[h, w], mask)?,
        expression: words.join(" "),
        objects,
        target,
    })
}

/// `n` samples with indices `0..n` under `seed`.
pub fn generate_dataset(seed: u64, n: usize, dims: &Dims, params: &SceneParams) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    (0..n as u64)
        .map(|i| generate_sample(seed, i, dims, params))
        .collect()
}

/// Recovers the attribute query from token ids.
pub fn parse_tokens(tokens: &[usize]) -> AttributeQuery {
    let mut q = AttributeQuery::default();
    for &t in tokens {
        let Some(word) = VOCABULARY.get(t) else { continue };
        if let Some(c) = Color::ALL.into_iter().find(|c| c.word() == *word) {
            q.color = Some(c);
        }
        if let Some(k) = ShapeKind::ALL.into_iter().find(|k| k.word() == *word) {
            q.kind = Some(k);
        }
        if let Some(p) = Position::ALL.into_iter().find(|p| p.word() == *word) {
            q.position = Some(p);
        }
    }
    q
}
