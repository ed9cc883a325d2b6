//! Discrete hyper-parameter search space: definition, validation, sampling,
//! enumeration, and normalization of points for the surrogate.
//!
//! A space is an ordered list of dimensions. Each dimension carries its
//! admissible raw settings plus a kind that says how a raw setting maps to
//! the value the trainer actually consumes (e.g. a base-2 exponent raw value
//! of 6 means 64 filters). Points are encoded for the surrogate by per-dim
//! rank, scaled into [0,1].

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// One admissible raw setting of a dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    /// Integer setting (ranges, exponents, multipliers).
    Int(i64),
    /// Named categorical setting.
    Name(String),
}

impl RawValue {
    pub fn name(s: &str) -> Self {
        RawValue::Name(s.to_string())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            RawValue::Int(v) => Some(*v),
            RawValue::Name(_) => None,
        }
    }
}

impl fmt::Display for RawValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawValue::Int(v) => write!(f, "{v}"),
            RawValue::Name(s) => write!(f, "{s}"),
        }
    }
}

impl From<i64> for RawValue {
    fn from(v: i64) -> Self {
        RawValue::Int(v)
    }
}

/// How a dimension's raw setting maps to the value the pipeline consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DimKind {
    /// Raw integer used as-is.
    IntegerRange,
    /// Derived value is `2^raw`.
    IntegerExponentBase2,
    /// Derived value is `10^raw`.
    IntegerExponentBase10,
    /// Derived value is `factor * raw`.
    IntegerMultiple { factor: i64 },
    /// Unordered labels; rank is the position in the declared value list.
    Categorical,
}

/// One dimension of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDim {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimKind,
    pub values: Vec<RawValue>,
}

impl ParamDim {
    pub fn new(name: &str, kind: DimKind, values: Vec<RawValue>) -> Self {
        ParamDim {
            name: name.to_string(),
            kind,
            values,
        }
    }

    fn int_range(name: &str, kind: DimKind, lo: i64, hi: i64) -> Self {
        Self::new(name, kind, (lo..=hi).map(RawValue::Int).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rank of a raw value within this dimension, if admissible.
    pub fn rank_of(&self, v: &RawValue) -> Option<usize> {
        self.values.iter().position(|x| x == v)
    }

    /// The value the pipeline consumes for a raw setting.
    /// `None` for categorical dims, which have no derived number.
    pub fn derived(&self, v: &RawValue) -> Option<f64> {
        let raw = v.as_int();
        match self.kind {
            DimKind::IntegerRange => raw.map(|r| r as f64),
            DimKind::IntegerExponentBase2 => raw.map(|r| 2f64.powi(r as i32)),
            DimKind::IntegerExponentBase10 => raw.map(|r| 10f64.powi(r as i32)),
            DimKind::IntegerMultiple { factor } => raw.map(|r| (factor * r) as f64),
            DimKind::Categorical => None,
        }
    }
}

/// One point of the space: one raw setting per dimension, in dim order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamPoint {
    pub values: Vec<RawValue>,
}

impl ParamPoint {
    pub fn new(values: Vec<RawValue>) -> Self {
        ParamPoint { values }
    }
}

impl fmt::Display for ParamPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// A point normalized for the surrogate: one coordinate in [0,1] per dim.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPoint {
    pub coords: Vec<f64>,
}

impl EncodedPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        EncodedPoint { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("dimension `{0}` has no values")]
    EmptyDim(String),
    #[error("dimension `{0}` has duplicate values")]
    DuplicateValues(String),
    #[error("dimension `{0}` must list integer values in ascending order")]
    UnorderedValues(String),
    #[error("dimension `{0}` mixes integer and named values")]
    MixedValues(String),
    #[error("point has {got} values, space has {expected} dimensions")]
    WrongArity { expected: usize, got: usize },
    #[error("value `{value}` is not admissible for dimension `{dim}`")]
    InvalidValue { dim: String, value: String },
    #[error("cardinality {cardinality} exceeds enumeration limit {max}")]
    TooLarge { cardinality: u128, max: u64 },
    #[error("encoded point has {got} coordinates, space has {expected} dimensions")]
    EncodedArity { expected: usize, got: usize },
    #[error("space config: {0}")]
    Config(String),
}

/// The discrete search space: an ordered list of dimensions.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    dims: Vec<ParamDim>,
}

impl ParamSpace {
    /// Validates and wraps a dimension list.
    pub fn new(dims: Vec<ParamDim>) -> Result<Self, SpaceError> {
        for dim in &dims {
            if dim.values.is_empty() {
                return Err(SpaceError::EmptyDim(dim.name.clone()));
            }
            let ints = dim.values.iter().filter(|v| v.as_int().is_some()).count();
            if ints != 0 && ints != dim.values.len() {
                return Err(SpaceError::MixedValues(dim.name.clone()));
            }
            if dim.kind != DimKind::Categorical && ints != dim.values.len() {
                return Err(SpaceError::MixedValues(dim.name.clone()));
            }
            for pair in dim.values.windows(2) {
                if let (Some(a), Some(b)) = (pair[0].as_int(), pair[1].as_int()) {
                    if dim.kind != DimKind::Categorical && a >= b {
                        return Err(SpaceError::UnorderedValues(dim.name.clone()));
                    }
                }
            }
            for (i, v) in dim.values.iter().enumerate() {
                if dim.values[..i].contains(v) {
                    return Err(SpaceError::DuplicateValues(dim.name.clone()));
                }
            }
        }
        Ok(ParamSpace { dims })
    }

    pub fn dims(&self) -> &[ParamDim] {
        &self.dims
    }

    pub fn ndims(&self) -> usize {
        self.dims.len()
    }

    pub fn dim_named(&self, name: &str) -> Option<(usize, &ParamDim)> {
        self.dims
            .iter()
            .enumerate()
            .find(|(_, d)| d.name == name)
            .map(|(i, d)| (i, d))
    }

    /// Exact number of points: the product of per-dim value counts.
    pub fn cardinality(&self) -> u128 {
        self.dims.iter().map(|d| d.len() as u128).product()
    }

    /// Checks that a point has one admissible value per dimension.
    pub fn validate(&self, p: &ParamPoint) -> Result<(), SpaceError> {
        if p.values.len() != self.dims.len() {
            return Err(SpaceError::WrongArity {
                expected: self.dims.len(),
                got: p.values.len(),
            });
        }
        for (dim, v) in self.dims.iter().zip(&p.values) {
            if dim.rank_of(v).is_none() {
                return Err(SpaceError::InvalidValue {
                    dim: dim.name.clone(),
                    value: v.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Per-dim ranks of a valid point.
    pub fn ranks(&self, p: &ParamPoint) -> Result<Vec<usize>, SpaceError> {
        self.validate(p)?;
        Ok(self
            .dims
            .iter()
            .zip(&p.values)
            .map(|(d, v)| d.rank_of(v).expect("validated"))
            .collect())
    }

    /// The point whose per-dim ranks are the given indices.
    pub fn point_from_ranks(&self, ranks: &[usize]) -> ParamPoint {
        assert_eq!(ranks.len(), self.dims.len(), "rank arity");
        ParamPoint::new(
            self.dims
                .iter()
                .zip(ranks)
                .map(|(d, &r)| d.values[r].clone())
                .collect(),
        )
    }

    /// Draws every dimension independently and uniformly over its values.
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> ParamPoint {
        ParamPoint::new(
            self.dims
                .iter()
                .map(|d| d.values[rng.gen_range(0..d.len())].clone())
                .collect(),
        )
    }

    /// Normalizes a valid point to per-dim rank coordinates in [0,1].
    ///
    /// Coordinate = rank / (count - 1); 0.0 for singleton dims. Monotone in
    /// rank, so grid neighbors stay neighbors in the encoded cube.
    pub fn encode(&self, p: &ParamPoint) -> Result<EncodedPoint, SpaceError> {
        let ranks = self.ranks(p)?;
        Ok(self.encode_ranks(&ranks))
    }

    /// `encode` on a rank vector that is already known to be in range.
    pub fn encode_ranks(&self, ranks: &[usize]) -> EncodedPoint {
        EncodedPoint::new(
            self.dims
                .iter()
                .zip(ranks)
                .map(|(d, &r)| {
                    if d.len() <= 1 {
                        0.0
                    } else {
                        r as f64 / (d.len() - 1) as f64
                    }
                })
                .collect(),
        )
    }

    /// Nearest-rank inverse of `encode`.
    pub fn decode(&self, e: &EncodedPoint) -> Result<ParamPoint, SpaceError> {
        if e.coords.len() != self.dims.len() {
            return Err(SpaceError::EncodedArity {
                expected: self.dims.len(),
                got: e.coords.len(),
            });
        }
        let ranks: Vec<usize> = self
            .dims
            .iter()
            .zip(&e.coords)
            .map(|(d, &c)| {
                let r = (c * (d.len().saturating_sub(1)) as f64).round();
                (r.max(0.0) as usize).min(d.len() - 1)
            })
            .collect();
        Ok(self.point_from_ranks(&ranks))
    }

    /// All points exactly once, lexicographic in dim order (last dim fastest).
    ///
    /// Refuses when the cardinality exceeds `max`; callers then fall back to
    /// candidate sampling.
    pub fn enumerate(&self, max: u64) -> Result<Vec<ParamPoint>, SpaceError> {
        let card = self.cardinality();
        if card > max as u128 {
            return Err(SpaceError::TooLarge {
                cardinality: card,
                max,
            });
        }
        Ok(self.iter_points().collect())
    }

    /// Lazy lexicographic traversal of all points.
    pub fn iter_points(&self) -> PointIter<'_> {
        PointIter {
            space: self,
            ranks: vec![0; self.dims.len()],
            done: self.dims.iter().any(|d| d.is_empty()),
            started: false,
        }
    }
}

/// Lexicographic point iterator returned by [`ParamSpace::iter_points`].
pub struct PointIter<'a> {
    space: &'a ParamSpace,
    ranks: Vec<usize>,
    done: bool,
    started: bool,
}

impl<'a> PointIter<'a> {
    /// Current rank vector; advances like a mixed-radix counter.
    fn advance(&mut self) -> bool {
        for i in (0..self.ranks.len()).rev() {
            self.ranks[i] += 1;
            if self.ranks[i] < self.space.dims[i].len() {
                return true;
            }
            self.ranks[i] = 0;
        }
        false
    }
}

impl<'a> Iterator for PointIter<'a> {
    type Item = ParamPoint;

    fn next(&mut self) -> Option<ParamPoint> {
        if self.done {
            return None;
        }
        if self.started {
            if !self.advance() {
                self.done = true;
                return None;
            }
        } else {
            self.started = true;
        }
        Some(self.space.point_from_ranks(&self.ranks))
    }
}

/// Dimension names used by the default space and expected by the trainer.
pub mod dim_names {
    pub const BLOCKS: &str = "blocks";
    pub const CONVS_PER_BLOCK: &str = "convs_per_block";
    pub const FILTERS_EXP: &str = "filters_exp";
    pub const FILTER_SIZE: &str = "filter_size";
    pub const LR_EXP: &str = "lr_exp";
    pub const BATCH_EXP: &str = "batch_exp";
    pub const EPOCHS_FACTOR: &str = "epochs_factor";
    pub const AUGMENT: &str = "augment";
}

/// The 8-dimensional default space.
///
/// blocks 1..5, convs per block 1..7, filters 2^(2..7), filter size {3,5},
/// learning rate 10^(-7..0), batch 2^(2..8), epochs 10*(1..10),
/// augmentation {Yes,No}. Cardinality 470,400.
pub fn default_space() -> ParamSpace {
    ParamSpace::new(vec![
        ParamDim::int_range(dim_names::BLOCKS, DimKind::IntegerRange, 1, 5),
        ParamDim::int_range(dim_names::CONVS_PER_BLOCK, DimKind::IntegerRange, 1, 7),
        ParamDim::int_range(dim_names::FILTERS_EXP, DimKind::IntegerExponentBase2, 2, 7),
        ParamDim::new(
            dim_names::FILTER_SIZE,
            DimKind::IntegerRange,
            vec![RawValue::Int(3), RawValue::Int(5)],
        ),
        ParamDim::int_range(dim_names::LR_EXP, DimKind::IntegerExponentBase10, -7, 0),
        ParamDim::int_range(dim_names::BATCH_EXP, DimKind::IntegerExponentBase2, 2, 8),
        ParamDim::int_range(
            dim_names::EPOCHS_FACTOR,
            DimKind::IntegerMultiple { factor: 10 },
            1,
            10,
        ),
        ParamDim::new(
            dim_names::AUGMENT,
            DimKind::Categorical,
            vec![RawValue::name("Yes"), RawValue::name("No")],
        ),
    ])
    .expect("default space is well-formed")
}

/// The hand-tuned reference configuration: 5 blocks of one 64-filter 3x3
/// conv layer, learning rate 0.001, batch 8, 70 epochs, augmentation on.
pub fn baseline_point() -> ParamPoint {
    ParamPoint::new(vec![
        RawValue::Int(5),
        RawValue::Int(1),
        RawValue::Int(6),
        RawValue::Int(3),
        RawValue::Int(-3),
        RawValue::Int(3),
        RawValue::Int(7),
        RawValue::name("Yes"),
    ])
}

#[derive(Serialize, Deserialize)]
struct SpaceFile {
    dim: Vec<ParamDim>,
}

impl ParamSpace {
    /// Serializes the space definition to its TOML config form.
    ///
    /// One `[[dim]]` table per dimension with `name`, `kind`, `values`, and
    /// `factor` for integer-multiple dims. `default_space()` written through
    /// this function is the canonical example of the format.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&SpaceFile {
            dim: self.dims.clone(),
        })
        .expect("space serializes")
    }

    /// Parses a space definition from its TOML config form.
    pub fn from_toml_str(text: &str) -> Result<Self, SpaceError> {
        let file: SpaceFile =
            toml::from_str(text).map_err(|e| SpaceError::Config(e.to_string()))?;
        ParamSpace::new(file.dim)
    }
}
