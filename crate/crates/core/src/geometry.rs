//! Geometric primitives, the per-kernel control-error maps and the
//! relevance-weighted aggregate control error.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

pub type FeatureId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("expected a {expected} feature, found {found}")]
    KindMismatch {
        expected: PrimitiveKind,
        found: PrimitiveKind,
    },
    #[error("{kernel} takes {expected} features, got {got}")]
    Arity {
        kernel: KernelKind,
        expected: usize,
        got: usize,
    },
    #[error("line is not normalized (a²+b² = {norm_sq})")]
    UnnormalizedLine { norm_sq: f64 },
    #[error("line carries no endpoints")]
    MissingEndpoints,
    #[error("line segment endpoints coincide")]
    DegenerateSegment,
    #[error("coplanarity needs four distinct points")]
    RepeatedPoints,
    #[error("relevance weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
    #[error("error vector has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0} weights for {1} error vectors")]
    Count(usize, usize),
    #[error("aggregate over zero instances")]
    Empty,
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Point2d,
    Line2d,
    Point3d,
}

impl PrimitiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrimitiveKind::Point2d => "point2d",
            PrimitiveKind::Line2d => "line2d",
            PrimitiveKind::Point3d => "point3d",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrimitiveKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point2d" => Ok(PrimitiveKind::Point2d),
            "line2d" => Ok(PrimitiveKind::Line2d),
            "point3d" => Ok(PrimitiveKind::Point3d),
            other => Err(GeometryError::Unknown {
                what: "primitive kind",
                value: other.to_string(),
            }),
        }
    }
}

/// Homogeneous image line `a·x + b·y + c = 0`, optionally with the segment
/// endpoints it was fitted to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Line2<T = f64> {
    pub abc: [T; 3],
    pub endpoints: Option<[[T; 2]; 2]>,
}

impl<T: Scalar> Line2<T> {
    /// Scales `(a, b, c)` so that `a² + b² = 1`.
    pub fn normalized(a: T, b: T, c: T) -> Self {
        let n = (a * a + b * b).sqrt();
        Line2 {
            abc: [a / n, b / n, c / n],
            endpoints: None,
        }
    }

    /// Line through two points, keeping them as endpoints.
    pub fn through(p: [T; 2], q: [T; 2]) -> Result<Self, GeometryError> {
        if p == q {
            return Err(GeometryError::DegenerateSegment);
        }
        // (p, 1) × (q, 1)
        let a = p[1] - q[1];
        let b = q[0] - p[0];
        let c = p[0] * q[1] - q[0] * p[1];
        let mut line = Self::normalized(a, b, c);
        line.endpoints = Some([p, q]);
        Ok(line)
    }

    pub fn is_normalized(&self) -> bool {
        let [a, b, _] = self.abc;
        (a * a + b * b - T::one()).abs() <= T::tolerance(1e-9)
    }

    fn require_normalized(&self) -> Result<(), GeometryError> {
        if self.is_normalized() {
            Ok(())
        } else {
            let [a, b, _] = self.abc;
            Err(GeometryError::UnnormalizedLine {
                norm_sq: (a * a + b * b).to_f64_lossless(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coords<T = f64> {
    /// Pixel coordinates `(x, y)`.
    Point2d([T; 2]),
    Line2d(Line2<T>),
    /// Scene coordinates `(x, y, z)`.
    Point3d([T; 3]),
}

impl<T: Scalar> Coords<T> {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Coords::Point2d(_) => PrimitiveKind::Point2d,
            Coords::Line2d(_) => PrimitiveKind::Line2d,
            Coords::Point3d(_) => PrimitiveKind::Point3d,
        }
    }

    /// Flat parameter list: `[x, y]`, `[a, b, c]` or `[a, b, c, x1, y1, x2, y2]`,
    /// `[x, y, z]`.
    pub fn to_flat(&self) -> Vec<T> {
        match self {
            Coords::Point2d(p) => p.to_vec(),
            Coords::Point3d(p) => p.to_vec(),
            Coords::Line2d(l) => {
                let mut v = l.abc.to_vec();
                if let Some([p, q]) = l.endpoints {
                    v.extend_from_slice(&[p[0], p[1], q[0], q[1]]);
                }
                v
            }
        }
    }

    pub fn from_flat(kind: PrimitiveKind, v: &[T]) -> Option<Self> {
        match (kind, v.len()) {
            (PrimitiveKind::Point2d, 2) => Some(Coords::Point2d([v[0], v[1]])),
            (PrimitiveKind::Point3d, 3) => Some(Coords::Point3d([v[0], v[1], v[2]])),
            (PrimitiveKind::Line2d, 3) => Some(Coords::Line2d(Line2 {
                abc: [v[0], v[1], v[2]],
                endpoints: None,
            })),
            (PrimitiveKind::Line2d, 7) => Some(Coords::Line2d(Line2 {
                abc: [v[0], v[1], v[2]],
                endpoints: Some([[v[3], v[4]], [v[5], v[6]]]),
            })),
            _ => None,
        }
    }
}

/// One observed feature: a locally invariant descriptor plus the coordinate
/// parameters of its primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricFeature<T = f64> {
    pub id: FeatureId,
    pub descriptor: Vec<T>,
    pub coords: Coords<T>,
}

impl<T: Scalar> GeometricFeature<T> {
    pub fn point2d(id: FeatureId, descriptor: Vec<T>, xy: [T; 2]) -> Self {
        GeometricFeature {
            id,
            descriptor,
            coords: Coords::Point2d(xy),
        }
    }

    pub fn line2d(id: FeatureId, descriptor: Vec<T>, line: Line2<T>) -> Self {
        GeometricFeature {
            id,
            descriptor,
            coords: Coords::Line2d(line),
        }
    }

    pub fn point3d(id: FeatureId, descriptor: Vec<T>, xyz: [T; 3]) -> Self {
        GeometricFeature {
            id,
            descriptor,
            coords: Coords::Point3d(xyz),
        }
    }

    pub fn kind(&self) -> PrimitiveKind {
        self.coords.kind()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Coincidence of two image points.
    P2p,
    /// Image point lies on an image line.
    P2l,
    /// Two image lines are collinear.
    L2l,
    /// Four scene points are coplanar.
    Copl,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::P2p,
        KernelKind::P2l,
        KernelKind::L2l,
        KernelKind::Copl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::P2p => "p2p",
            KernelKind::P2l => "p2l",
            KernelKind::L2l => "l2l",
            KernelKind::Copl => "copl",
        }
    }

    pub fn template(self) -> KernelTemplate {
        use PrimitiveKind::*;
        match self {
            KernelKind::P2p => KernelTemplate {
                kind: self,
                roles: vec![Point2d, Point2d],
                edges: vec![(0, 1)],
                error_dim: 2,
                symmetric: true,
            },
            KernelKind::P2l => KernelTemplate {
                kind: self,
                roles: vec![Point2d, Line2d],
                edges: vec![(0, 1)],
                error_dim: 1,
                symmetric: false,
            },
            KernelKind::L2l => KernelTemplate {
                kind: self,
                roles: vec![Line2d, Line2d],
                edges: vec![(0, 1)],
                error_dim: 2,
                symmetric: true,
            },
            KernelKind::Copl => KernelTemplate {
                kind: self,
                roles: vec![Point3d; 4],
                edges: vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
                error_dim: 1,
                symmetric: true,
            },
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| GeometryError::Unknown {
                what: "kernel kind",
                value: s.to_string(),
            })
    }
}

/// Fixed unit-graph structure of one kernel type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelTemplate {
    pub kind: KernelKind,
    /// Primitive kind expected at each node; `roles.len()` is the arity.
    pub roles: Vec<PrimitiveKind>,
    /// Undirected edges; messages flow both ways along each.
    pub edges: Vec<(usize, usize)>,
    /// Degrees of freedom the constraint contributes.
    pub error_dim: usize,
    /// Whether node order carries no meaning.
    pub symmetric: bool,
}

impl KernelTemplate {
    pub fn arity(&self) -> usize {
        self.roles.len()
    }

    /// Senders of every node, in ascending order.
    pub fn neighbours(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }
}

fn point2<T: Scalar>(f: &GeometricFeature<T>) -> Result<[T; 2], GeometryError> {
    match f.coords {
        Coords::Point2d(p) => Ok(p),
        _ => Err(GeometryError::KindMismatch {
            expected: PrimitiveKind::Point2d,
            found: f.kind(),
        }),
    }
}

fn line2<T: Scalar>(f: &GeometricFeature<T>) -> Result<Line2<T>, GeometryError> {
    match f.coords {
        Coords::Line2d(l) => Ok(l),
        _ => Err(GeometryError::KindMismatch {
            expected: PrimitiveKind::Line2d,
            found: f.kind(),
        }),
    }
}

fn point3<T: Scalar>(f: &GeometricFeature<T>) -> Result<[T; 3], GeometryError> {
    match f.coords {
        Coords::Point3d(p) => Ok(p),
        _ => Err(GeometryError::KindMismatch {
            expected: PrimitiveKind::Point3d,
            found: f.kind(),
        }),
    }
}

/// Point-to-point error `y2 − y1`.
pub fn error_p2p<T: Scalar>(y1: [T; 2], y2: [T; 2]) -> [T; 2] {
    [y2[0] - y1[0], y2[1] - y1[1]]
}

/// Point-to-line error: the homogeneous dot product `a·x + b·y + c`, which is
/// the signed point-line distance for a normalized line.
pub fn error_p2l<T: Scalar>(p: [T; 2], line: &Line2<T>) -> Result<T, GeometryError> {
    line.require_normalized()?;
    let [a, b, c] = line.abc;
    Ok(a * p[0] + b * p[1] + c)
}

/// Line-to-line error: distances of both endpoints of `segment` to `line`.
pub fn error_l2l<T: Scalar>(segment: &Line2<T>, line: &Line2<T>) -> Result<[T; 2], GeometryError> {
    let [p, q] = segment.endpoints.ok_or(GeometryError::MissingEndpoints)?;
    if p == q {
        return Err(GeometryError::DegenerateSegment);
    }
    Ok([error_p2l(p, line)?, error_p2l(q, line)?])
}

/// Coplanarity error: the 4×4 determinant of the rows `(1, x, y, z)` divided
/// by the product of the three edge lengths leaving `p[0]`.
///
/// The determinant is evaluated as `det[p1−p0; p2−p0; p3−p0]`, which it
/// equals after subtracting the first row.
pub fn error_copl<T: Scalar>(p: [[T; 3]; 4]) -> Result<T, GeometryError> {
    for i in 0..4 {
        for j in i + 1..4 {
            if p[i] == p[j] {
                return Err(GeometryError::RepeatedPoints);
            }
        }
    }
    let d = |i: usize| [p[i][0] - p[0][0], p[i][1] - p[0][1], p[i][2] - p[0][2]];
    let (u, v, w) = (d(1), d(2), d(3));
    let det = u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0]);
    let len = |x: [T; 3]| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    Ok(det / (len(u) * len(v) * len(w)))
}

/// Control error `E_k` of one kernel over features in template node order.
pub fn kernel_error<T: Scalar>(
    kind: KernelKind,
    nodes: &[&GeometricFeature<T>],
) -> Result<Vec<T>, GeometryError> {
    let template = kind.template();
    if nodes.len() != template.arity() {
        return Err(GeometryError::Arity {
            kernel: kind,
            expected: template.arity(),
            got: nodes.len(),
        });
    }
    match kind {
        KernelKind::P2p => Ok(error_p2p(point2(nodes[0])?, point2(nodes[1])?).to_vec()),
        KernelKind::P2l => Ok(vec![error_p2l(point2(nodes[0])?, &line2(nodes[1])?)?]),
        KernelKind::L2l => Ok(error_l2l(&line2(nodes[0])?, &line2(nodes[1])?)?.to_vec()),
        KernelKind::Copl => Ok(vec![error_copl([
            point3(nodes[0])?,
            point3(nodes[1])?,
            point3(nodes[2])?,
            point3(nodes[3])?,
        ])?]),
    }
}

/// `Ec = Σ gᵢ·E_kⁱ`; the weights must sum to one.
pub fn aggregate_error<T: Scalar>(weights: &[T], errors: &[Vec<T>]) -> Result<Vec<T>, GeometryError> {
    if weights.len() != errors.len() {
        return Err(GeometryError::Count(weights.len(), errors.len()));
    }
    let dim = errors.first().ok_or(GeometryError::Empty)?.len();
    let sum: T = weights.iter().copied().sum();
    if (sum - T::one()).abs() > T::tolerance(1e-9) {
        return Err(GeometryError::WeightSum {
            sum: sum.to_f64_lossless(),
        });
    }
    let mut out = vec![T::zero(); dim];
    for (&g, e) in weights.iter().zip(errors) {
        if e.len() != dim {
            return Err(GeometryError::Dimension {
                expected: dim,
                got: e.len(),
            });
        }
        for (o, &v) in out.iter_mut().zip(e) {
            *o += g * v;
        }
    }
    Ok(out)
}

/// Euclidean norm of a control-error vector.
pub fn error_norm<T: Scalar>(e: &[T]) -> T {
    e.iter().map(|&v| v * v).sum::<T>().sqrt()
}
