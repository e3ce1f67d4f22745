//! Scene objects, transformation semantics and sequence canonicalisation.

use std::cmp::Reverse;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::transform::{Cell, StepValue, TransformFn, TransformStep};

/// Closed attribute vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocab {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub materials: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl AttributeVocab {
    /// CLEVR-like vocabulary.
    pub fn in_domain() -> Self {
        AttributeVocab {
            shapes: strings(&["cube", "sphere", "cylinder"]),
            colors: strings(&["gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"]),
            sizes: strings(&["small", "large"]),
            materials: strings(&["rubber", "metal"]),
        }
    }

    /// Shifted vocabulary: shapes and colours disjoint from [`Self::in_domain`].
    pub fn shifted() -> Self {
        AttributeVocab {
            shapes: strings(&["car", "bus", "motorbike", "aeroplane", "bicycle"]),
            colors: strings(&["orange", "pink", "white", "black", "teal", "olive"]),
            sizes: strings(&["small", "medium", "large"]),
            materials: strings(&["rubber", "metal"]),
        }
    }

    /// Reduced vocabulary for small training environments.
    pub fn mini() -> Self {
        AttributeVocab {
            shapes: strings(&["cube", "sphere", "cylinder"]),
            colors: strings(&["red", "blue", "green", "yellow"]),
            sizes: strings(&["small", "large"]),
            materials: strings(&["rubber", "metal"]),
        }
    }

    pub fn values(&self, attr: Attribute) -> &[String] {
        match attr {
            Attribute::Shape => &self.shapes,
            Attribute::Color => &self.colors,
            Attribute::Size => &self.sizes,
            Attribute::Material => &self.materials,
        }
    }

    pub fn all_values(&self) -> impl Iterator<Item = &String> {
        self.sizes.iter().chain(&self.colors).chain(&self.materials).chain(&self.shapes)
    }
}

/// Non-positional object attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Size,
    Color,
    Material,
    Shape,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Size, Attribute::Color, Attribute::Material, Attribute::Shape];

    pub fn of(f: TransformFn) -> Option<Attribute> {
        match f {
            TransformFn::ChangeSize => Some(Attribute::Size),
            TransformFn::ChangeColor => Some(Attribute::Color),
            TransformFn::ChangeMaterial => Some(Attribute::Material),
            TransformFn::ChangeShape => Some(Attribute::Shape),
            TransformFn::ChangePosition => None,
        }
    }

    pub fn function(self) -> TransformFn {
        match self {
            Attribute::Size => TransformFn::ChangeSize,
            Attribute::Color => TransformFn::ChangeColor,
            Attribute::Material => TransformFn::ChangeMaterial,
            Attribute::Shape => TransformFn::ChangeShape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub shape: String,
    pub color: String,
    pub size: String,
    pub material: String,
}

impl SceneObject {
    pub fn get(&self, attr: Attribute) -> &str {
        match attr {
            Attribute::Shape => &self.shape,
            Attribute::Color => &self.color,
            Attribute::Size => &self.size,
            Attribute::Material => &self.material,
        }
    }

    pub fn set(&mut self, attr: Attribute, value: String) {
        match attr {
            Attribute::Shape => self.shape = value,
            Attribute::Color => self.color = value,
            Attribute::Size => self.size = value,
            Attribute::Material => self.material = value,
        }
    }

    fn describe(&self) -> String {
        format!("{} {} {} {} {}", self.id, self.size, self.color, self.material, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacedObject {
    #[serde(flatten)]
    pub object: SceneObject,
    pub position: Cell,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TranceScene {
    pub objects: Vec<PlacedObject>,
    pub grid_extent: (i32, i32),
}

impl TranceScene {
    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.grid_extent.0 && c.y < self.grid_extent.1
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.object.id == id)
    }

    pub fn occupant(&self, c: Cell) -> Option<usize> {
        self.objects.iter().position(|o| o.position == c)
    }

    /// Positions distinct and in bounds, ids unique.
    pub fn is_valid(&self) -> bool {
        let ids: BTreeSet<&str> = self.objects.iter().map(|o| o.object.id.as_str()).collect();
        let cells: BTreeSet<Cell> = self.objects.iter().map(|o| o.position).collect();
        ids.len() == self.objects.len()
            && cells.len() == self.objects.len()
            && self.objects.iter().all(|o| self.in_bounds(o.position))
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.grid_extent.1 {
            for x in 0..self.grid_extent.0 {
                let c = Cell::new(x, y);
                if self.occupant(c).is_none() {
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("cell {0} is occupied")]
    OccupiedCell(Cell),
    #[error("cell {0} is outside the grid")]
    OutOfBounds(Cell),
    #[error("step does not change `{0}`")]
    NoOpChange(String),
    #[error("value kind does not match the function")]
    ValueKind,
}

/// Apply one step; exactly one attribute of one object changes.
pub fn apply_step(scene: &TranceScene, step: &TransformStep) -> Result<TranceScene, StepError> {
    let mut next = scene.clone();
    apply_in_place(&mut next, step)?;
    Ok(next)
}

fn apply_in_place(scene: &mut TranceScene, step: &TransformStep) -> Result<(), StepError> {
    let i = scene
        .find(&step.object)
        .ok_or_else(|| StepError::UnknownObject(step.object.clone()))?;
    match (&step.value, Attribute::of(step.function)) {
        (StepValue::Cell(c), None) => {
            if scene.objects[i].position == *c {
                return Err(StepError::NoOpChange(step.object.clone()));
            }
            if !scene.in_bounds(*c) {
                return Err(StepError::OutOfBounds(*c));
            }
            if scene.occupant(*c).is_some() {
                return Err(StepError::OccupiedCell(*c));
            }
            scene.objects[i].position = *c;
        }
        (StepValue::Attr(v), Some(attr)) => {
            if scene.objects[i].object.get(attr) == v {
                return Err(StepError::NoOpChange(step.object.clone()));
            }
            scene.objects[i].object.set(attr, v.clone());
        }
        _ => return Err(StepError::ValueKind),
    }
    Ok(())
}

pub fn apply_all(scene: &TranceScene, steps: &[TransformStep]) -> Result<TranceScene, StepError> {
    let mut s = scene.clone();
    for step in steps {
        apply_in_place(&mut s, step)?;
    }
    Ok(s)
}

/// Steps taking `initial` to `target`, one per changed (object, attribute),
/// sorted by (object id, function).
fn diff_steps(initial: &TranceScene, target: &TranceScene) -> Vec<TransformStep> {
    let mut steps = Vec::new();
    for (a, b) in initial.objects.iter().zip(&target.objects) {
        for attr in Attribute::ALL {
            if a.object.get(attr) != b.object.get(attr) {
                steps.push(TransformStep::attr(attr.function(), a.object.id.clone(), b.object.get(attr)));
            }
        }
        if a.position != b.position {
            steps.push(TransformStep {
                function: TransformFn::ChangePosition,
                object: a.object.id.clone(),
                value: StepValue::Cell(b.position),
            });
        }
    }
    steps.sort_by(|x, y| (&x.object, x.function).cmp(&(&y.object, y.function)));
    steps
}

/// Canonical form of a sequence that applies cleanly to `initial`.
///
/// Only the net change per (object, attribute) survives; changes that return
/// an attribute to its initial value vanish, and repeated moves collapse into
/// one move to the final cell. Steps are emitted in (object id, function)
/// order, except that a move waits until its target cell has been vacated.
/// A cyclic chain of moves is broken by parking its lowest-id object in the
/// first free cell, which adds one step.
pub fn canonicalize_sequence(seq: &[TransformStep], initial: &TranceScene) -> Result<Vec<TransformStep>, StepError> {
    let target = apply_all(initial, seq)?;
    let mut pending = diff_steps(initial, &target);
    let mut scene = initial.clone();
    let mut out = Vec::with_capacity(pending.len());
    while !pending.is_empty() {
        let ready = pending.iter().position(|s| match &s.value {
            StepValue::Cell(c) => scene.occupant(*c).is_none(),
            StepValue::Attr(_) => true,
        });
        match ready {
            Some(i) => {
                let step = pending.remove(i);
                apply_in_place(&mut scene, &step)?;
                out.push(step);
            }
            None => {
                // Every pending step is a blocked move: a cycle.
                let obj = pending[0].object.clone();
                let free = scene.free_cells();
                let park = *free.first().ok_or(StepError::OccupiedCell(Cell::new(0, 0)))?;
                let step = TransformStep {
                    function: TransformFn::ChangePosition,
                    object: obj,
                    value: StepValue::Cell(park),
                };
                apply_in_place(&mut scene, &step)?;
                out.push(step);
            }
        }
    }
    Ok(out)
}

/// Camera view used when listing a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    #[default]
    Center,
    Left,
    Right,
}

/// Deterministic text listing of a scene.
///
/// Center lists objects row-major from the top-left cell; left lists them
/// column-major from the left edge and right column-major from the right edge.
pub fn serialize_observation(scene: &TranceScene, view: View) -> String {
    if scene.objects.is_empty() {
        return "objects: none".to_string();
    }
    let mut objs: Vec<&PlacedObject> = scene.objects.iter().collect();
    match view {
        View::Center => objs.sort_by_key(|o| (o.position.y, o.position.x)),
        View::Left => objs.sort_by_key(|o| (o.position.x, o.position.y)),
        View::Right => objs.sort_by_key(|o| (Reverse(o.position.x), o.position.y)),
    }
    let mut out = String::from("objects:");
    for o in objs {
        out.push_str(&format!("\n{} at {}", o.object.describe(), o.position));
    }
    out
}

/// Listing of position-free objects, in the given order.
pub fn serialize_objects(objects: &[SceneObject]) -> String {
    if objects.is_empty() {
        return "objects: none".to_string();
    }
    let mut out = String::from("objects:");
    for o in objects {
        out.push('\n');
        out.push_str(&o.describe());
    }
    out
}
