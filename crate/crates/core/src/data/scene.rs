//! Seeded synthetic scenes: flat-coloured shapes on a gray background, each
//! paired with an expression that picks out exactly one of them.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::raster::Mask;

/// Shape attempts per scene before [`generate_scene`] gives up on it.
pub const MAX_ATTEMPTS: usize = 100;
const PLACEMENT_TRIES: usize = 50;
pub const BACKGROUND: u8 = 128;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::Data(format!(concat!("unknown ", stringify!($name), " {:?}"), other))),
                }
            }
        }
    };
}

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Cyan => "cyan",
    Magenta => "magenta",
});

word_enum!(Kind {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

word_enum!(Side {
    Left => "left",
    Right => "right",
    Top => "top",
    Bottom => "bottom",
});

word_enum!(Template {
    ColorShape => "color_shape",
    ColorShapeSide => "color_shape_side",
    Relation => "relation",
});

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Cyan => [40, 200, 210],
            Color::Magenta => [200, 60, 200],
        }
    }
}

/// One shape. `(cx, cy)` is the centre pixel and `size` the half-extent in
/// pixels, so every shape spans `2·size+1` pixels across.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: Kind,
    pub color: Color,
    pub cx: usize,
    pub cy: usize,
    pub size: usize,
}

impl Shape {
    /// Pixel membership, in integer offsets from the centre pixel.
    ///
    /// Triangles point up: apex at `cy − size`, base row at `cy + size`,
    /// half-width `(dy + size) / 2` on row offset `dy`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let s = self.size as i64;
        let dx = x as i64 - self.cx as i64;
        let dy = y as i64 - self.cy as i64;
        match self.kind {
            Kind::Circle => dx * dx + dy * dy <= s * s,
            Kind::Square => dx.abs() <= s && dy.abs() <= s,
            Kind::Triangle => dy.abs() <= s && 2 * dx.abs() <= dy + s,
        }
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        (self.cx - self.size, self.cy - self.size, self.cx + self.size, self.cy + self.size)
    }

    /// Which half of a `width×height` image the centre lies in, if any.
    pub fn in_half(&self, side: Side, width: usize, height: usize) -> bool {
        match side {
            Side::Left => 2 * self.cx + 1 < width,
            Side::Right => 2 * self.cx + 1 > width,
            Side::Top => 2 * self.cy + 1 < height,
            Side::Bottom => 2 * self.cy + 1 > height,
        }
    }

    /// Whether `self` lies strictly to `side` of `anchor`.
    pub fn is_beside(&self, side: Side, anchor: &Shape) -> bool {
        match side {
            Side::Left => self.cx < anchor.cx,
            Side::Right => self.cx > anchor.cx,
            Side::Top => self.cy < anchor.cy,
            Side::Bottom => self.cy > anchor.cy,
        }
    }

    fn overlaps(&self, other: &Shape, gap: usize) -> bool {
        let (a0, b0, a1, b1) = self.bounds();
        let (c0, d0, c1, d1) = other.bounds();
        a0 <= c1 + gap && c0 <= a1 + gap && b0 <= d1 + gap && d0 <= b1 + gap
    }
}

/// A referring expression in structured form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expression {
    /// `red circle`
    ColorShape { color: Color, kind: Kind },
    /// `red circle on the left`: the shape of that colour and kind whose
    /// centre is in that half of the image.
    ColorShapeSide { color: Color, kind: Kind, side: Side },
    /// `circle left of red square`: the shape of `kind` strictly on `side`
    /// of the anchor, which must itself be unique by colour and kind.
    Relation { kind: Kind, side: Side, anchor_color: Color, anchor_kind: Kind },
}

impl Expression {
    pub fn template(&self) -> Template {
        match self {
            Expression::ColorShape { .. } => Template::ColorShape,
            Expression::ColorShapeSide { .. } => Template::ColorShapeSide,
            Expression::Relation { .. } => Template::Relation,
        }
    }

    /// Indices of every shape in `scene` the expression describes.
    pub fn resolve(&self, scene: &SceneDescriptor) -> Vec<usize> {
        let (w, h) = (scene.width, scene.height);
        let shapes = &scene.shapes;
        let by = |f: &dyn Fn(&Shape) -> bool| -> Vec<usize> {
            shapes.iter().enumerate().filter(|(_, s)| f(s)).map(|(i, _)| i).collect()
        };
        match *self {
            Expression::ColorShape { color, kind } => by(&|s| s.color == color && s.kind == kind),
            Expression::ColorShapeSide { color, kind, side } => {
                by(&|s| s.color == color && s.kind == kind && s.in_half(side, w, h))
            }
            Expression::Relation {
                kind,
                side,
                anchor_color,
                anchor_kind,
            } => {
                let anchors = by(&|s| s.color == anchor_color && s.kind == anchor_kind);
                let [a] = anchors[..] else { return Vec::new() };
                let anchor = shapes[a];
                shapes
                    .iter()
                    .enumerate()
                    .filter(|&(i, s)| i != a && s.kind == kind && s.is_beside(side, &anchor))
                    .map(|(i, _)| i)
                    .collect()
            }
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::ColorShape { color, kind } => write!(f, "{color} {kind}"),
            Expression::ColorShapeSide { color, kind, side } => write!(f, "{color} {kind} on the {side}"),
            Expression::Relation {
                kind,
                side,
                anchor_color,
                anchor_kind,
            } => write!(f, "{kind} {side} of {anchor_color} {anchor_kind}"),
        }
    }
}

impl FromStr for Expression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        match words[..] {
            [c, k] => Ok(Expression::ColorShape {
                color: c.parse()?,
                kind: k.parse()?,
            }),
            [c, k, "on", "the", side] => Ok(Expression::ColorShapeSide {
                color: c.parse()?,
                kind: k.parse()?,
                side: side.parse()?,
            }),
            [k, side, "of", c, ak] => Ok(Expression::Relation {
                kind: k.parse()?,
                side: side.parse()?,
                anchor_color: c.parse()?,
                anchor_kind: ak.parse()?,
            }),
            _ => Err(Error::Data(format!("{s:?} does not match any template"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<Shape>,
    /// Index of the referred shape.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub templates: Vec<Template>,
}

impl GrammarConfig {
    /// Scene sizes scale with the image: half-extents from `side/16` to
    /// `side/8`.
    pub fn for_image(height: usize, width: usize) -> Self {
        let side = height.min(width);
        Self {
            width,
            height,
            min_shapes: 2,
            max_shapes: 5,
            min_size: (side / 16).max(1),
            max_size: (side / 8).max(1),
            templates: Template::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.min_shapes < 2 || self.min_shapes > self.max_shapes {
            return fail(format!("shape count {}..={} must start at 2 or more", self.min_shapes, self.max_shapes));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return fail(format!("size range {}..={} is empty", self.min_size, self.max_size));
        }
        if 2 * self.max_size + 1 > self.width.min(self.height) {
            return fail(format!("size {} does not fit a {}x{} image", self.max_size, self.width, self.height));
        }
        if self.templates.is_empty() {
            return fail("no templates enabled".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let templates: Vec<&str> = self.templates.iter().map(|t| t.word()).collect();
        [
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("min_shapes", self.min_shapes.to_string()),
            ("max_shapes", self.max_shapes.to_string()),
            ("min_size", self.min_size.to_string()),
            ("max_size", self.max_size.to_string()),
            ("templates", templates.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (format!("grammar.{k}"), v))
        .collect()
    }

    /// Applies one `grammar.*` key (without the prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::kv::parse_num;
        match key {
            "width" => self.width = parse_num(key, value)?,
            "height" => self.height = parse_num(key, value)?,
            "min_shapes" => self.min_shapes = parse_num(key, value)?,
            "max_shapes" => self.max_shapes = parse_num(key, value)?,
            "min_size" => self.min_size = parse_num(key, value)?,
            "max_size" => self.max_size = parse_num(key, value)?,
            "templates" => {
                self.templates = value
                    .split(',')
                    .map(|t| t.trim().parse())
                    .collect::<Result<Vec<_>>>()?;
            }
            other => return Err(Error::Config(format!("unknown grammar key {other:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub image: RgbImage,
    pub expression: String,
    pub mask: Mask,
    pub scene: SceneDescriptor,
}

impl Sample {
    /// Rebuilds image and mask from a descriptor.
    pub fn from_scene(seed: u64, expression: String, scene: SceneDescriptor) -> Result<Self> {
        let target = scene
            .shapes
            .get(scene.target)
            .ok_or_else(|| Error::Data(format!("target {} out of range", scene.target)))?;
        Ok(Self {
            seed,
            image: render(&scene),
            mask: Mask::rasterize(target, scene.height, scene.width),
            expression,
            scene,
        })
    }
}

pub fn render(scene: &SceneDescriptor) -> RgbImage {
    let mut img = RgbImage::from_pixel(scene.width as u32, scene.height as u32, Rgb([BACKGROUND; 3]));
    for s in &scene.shapes {
        let (x0, y0, x1, y1) = s.bounds();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if s.contains(x, y) {
                    img.put_pixel(x as u32, y as u32, Rgb(s.color.rgb()));
                }
            }
        }
    }
    img
}

fn place_shapes(rng: &mut ChaCha8Rng, g: &GrammarConfig) -> Option<Vec<Shape>> {
    let count = rng.gen_range(g.min_shapes..=g.max_shapes);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = *Kind::ALL.choose(rng).expect("kinds");
        let color = *Color::ALL.choose(rng).expect("colors");
        let size = rng.gen_range(g.min_size..=g.max_size);
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let s = Shape {
                kind,
                color,
                cx: rng.gen_range(size..g.width - size),
                cy: rng.gen_range(size..g.height - size),
                size,
            };
            (!shapes.iter().any(|o| o.overlaps(&s, 1))).then_some(s)
        });
        shapes.push(placed?);
    }
    Some(shapes)
}

fn candidates(template: Template, target: &Shape, shapes: &[Shape]) -> Vec<Expression> {
    let (color, kind) = (target.color, target.kind);
    match template {
        Template::ColorShape => vec![Expression::ColorShape { color, kind }],
        Template::ColorShapeSide => Side::ALL
            .iter()
            .map(|&side| Expression::ColorShapeSide { color, kind, side })
            .collect(),
        Template::Relation => shapes
            .iter()
            .filter(|a| *a != target)
            .flat_map(|a| {
                Side::ALL.iter().map(move |&side| Expression::Relation {
                    kind,
                    side,
                    anchor_color: a.color,
                    anchor_kind: a.kind,
                })
            })
            .collect(),
    }
}

/// Draws a scene and a uniquely resolving expression from `seed`.
///
/// The template is fixed per seed; each attempt redraws the whole scene and
/// tries every shape as the target. Fails after [`MAX_ATTEMPTS`] attempts.
pub fn generate_scene(seed: u64, grammar: &GrammarConfig) -> Result<Sample> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = *grammar.templates.choose(&mut rng).expect("validated");
    for _ in 0..MAX_ATTEMPTS {
        let Some(shapes) = place_shapes(&mut rng, grammar) else { continue };
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.shuffle(&mut rng);
        for t in order {
            let mut exprs = candidates(template, &shapes[t], &shapes);
            exprs.shuffle(&mut rng);
            let scene = SceneDescriptor {
                width: grammar.width,
                height: grammar.height,
                shapes: shapes.clone(),
                target: t,
            };
            if let Some(e) = exprs.into_iter().find(|e| e.resolve(&scene) == [t]) {
                return Sample::from_scene(seed, e.to_string(), scene);
            }
        }
    }
    Err(Error::Data(format!(
        "seed {seed}: no uniquely resolving {template} expression after {MAX_ATTEMPTS} attempts"
    )))
}
