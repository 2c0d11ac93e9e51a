//! Object vocabulary: drawable shapes, the fixed color palette, and the
//! per-dataset catalog that selects a subset of both.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat background color of every canvas.
pub const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Point-in-shape test in object-local coordinates, `r` being half the
    /// object size. Triangles point up (apex at `-r`, base at `+r`).
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Cyan,
        Color::Orange,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    pub fn from_name(name: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Palette value. These constants are part of the dataset format.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 230],
            Color::Yellow => [240, 220, 40],
            Color::Purple => [150, 50, 190],
            Color::Cyan => [40, 210, 220],
            Color::Orange => [245, 140, 30],
            Color::White => [250, 250, 250],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectType {
    pub shape: Shape,
    pub color: Color,
}

impl ObjectType {
    pub fn new(shape: Shape, color: Color) -> Self {
        Self { shape, color }
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

/// The shapes and colors in play for one dataset / model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
}

impl Default for Catalog {
    fn default() -> Self {
        Self {
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle],
            colors: vec![
                Color::Red,
                Color::Green,
                Color::Blue,
                Color::Yellow,
                Color::Purple,
                Color::Cyan,
            ],
        }
    }
}

impl Catalog {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() < 2 || self.colors.len() < 2 {
            return Err(Error::Config(format!(
                "catalog needs at least 2 shapes and 2 colors, got {} and {}",
                self.shapes.len(),
                self.colors.len()
            )));
        }
        let mut shapes = self.shapes.clone();
        shapes.sort();
        shapes.dedup();
        let mut colors = self.colors.clone();
        colors.sort();
        colors.dedup();
        if shapes.len() != self.shapes.len() || colors.len() != self.colors.len() {
            return Err(Error::Config("catalog contains duplicate entries".into()));
        }
        Ok(())
    }

    /// All (shape, color) pairs in a fixed order: shape-major.
    pub fn pairs(&self) -> Vec<ObjectType> {
        self.shapes
            .iter()
            .flat_map(|&s| self.colors.iter().map(move |&c| ObjectType::new(s, c)))
            .collect()
    }

    pub fn num_pairs(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn pair_index(&self, otype: ObjectType) -> Option<usize> {
        let s = self.shapes.iter().position(|&x| x == otype.shape)?;
        let c = self.colors.iter().position(|&x| x == otype.color)?;
        Some(s * self.colors.len() + c)
    }

    pub fn pair_at(&self, index: usize) -> ObjectType {
        let n = self.colors.len();
        ObjectType::new(self.shapes[index / n], self.colors[index % n])
    }
}
