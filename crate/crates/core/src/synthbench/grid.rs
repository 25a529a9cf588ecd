use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// 2-3 rows by 2-3 columns.
    Rect,
    /// Plus sign in a 3x3 box.
    Cross,
    /// One row, 3-5 columns.
    HBar,
    /// 3-5 rows, one column.
    VBar,
}

/// Geometry and input intensity a class is drawn with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub shape: ShapeKind,
    pub intensity: f64,
}

impl Signature {
    pub const fn new(shape: ShapeKind, intensity: f64) -> Self {
        Self { shape, intensity }
    }
}

/// Signatures handed out, in order, to classes outside any aliased pair.
const DISTINCT_PALETTE: [Signature; 8] = [
    Signature::new(ShapeKind::Rect, 1.0),
    Signature::new(ShapeKind::Rect, -1.0),
    Signature::new(ShapeKind::Cross, 1.0),
    Signature::new(ShapeKind::Cross, -1.0),
    Signature::new(ShapeKind::HBar, 1.0),
    Signature::new(ShapeKind::VBar, -1.0),
    Signature::new(ShapeKind::HBar, -1.0),
    Signature::new(ShapeKind::VBar, 1.0),
];

/// Signatures shared by the members of each aliased pair, in pair order.
const ALIASED_PALETTE: [Signature; 4] = [
    Signature::new(ShapeKind::Cross, 0.5),
    Signature::new(ShapeKind::Rect, 0.5),
    Signature::new(ShapeKind::HBar, 0.5),
    Signature::new(ShapeKind::VBar, 0.5),
];

const PLACEMENT_TRIES: usize = 50;
const IMAGE_RETRIES: usize = 20;

/// Toy segmentation: shapes stamped onto a `grid x grid` canvas, with
/// aliased class pairs drawn identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSegSpec {
    pub grid: usize,
    /// Including background class 0.
    pub n_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Pairs of foreground classes sharing one signature.
    pub aliased_pairs: Vec<(usize, usize)>,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_std: f64,
    /// Adds a second auxiliary target: occupancy of the four quadrants.
    pub quadrant_head: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GridSegSpec {
    fn default() -> Self {
        Self {
            grid: 8,
            n_classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            aliased_pairs: vec![(3, 4)],
            noise_std: 0.2,
            quadrant_head: false,
            n_train: 2000,
            n_test: 400,
            seed: 11,
        }
    }
}

impl GridSegSpec {
    /// Eight foreground classes, six with distinct signatures and one aliased pair.
    pub fn eight_foreground() -> Self {
        Self {
            n_classes: 9,
            aliased_pairs: vec![(7, 8)],
            ..Self::default()
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Width of the tag vector (foreground classes only).
    pub fn n_tags(&self) -> usize {
        self.n_classes - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if !(6..=12).contains(&self.grid) {
            return bad(format!("grid side {} outside [6, 12]", self.grid));
        }
        if self.n_classes < 2 {
            return bad("need background plus at least one foreground class".into());
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > 3 || self.max_shapes == 0 {
            return bad(format!(
                "shapes per image must satisfy min <= max, 1 <= max <= 3; got [{}, {}]",
                self.min_shapes, self.max_shapes
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        if self.aliased_pairs.len() > ALIASED_PALETTE.len() {
            return bad(format!("at most {} aliased pairs", ALIASED_PALETTE.len()));
        }
        let mut seen = vec![false; self.n_classes];
        for &(a, b) in &self.aliased_pairs {
            if a == 0 || b == 0 || a >= self.n_classes || b >= self.n_classes || a == b {
                return bad(format!("invalid aliased pair ({a}, {b})"));
            }
            for c in [a, b] {
                if std::mem::replace(&mut seen[c], true) {
                    return bad(format!("class {c} appears in more than one aliased pair"));
                }
            }
        }
        let distinct = self.n_classes - 1 - 2 * self.aliased_pairs.len();
        if distinct > DISTINCT_PALETTE.len() {
            return bad(format!(
                "at most {} non-aliased foreground classes",
                DISTINCT_PALETTE.len()
            ));
        }
        Ok(())
    }

    /// Signature of every foreground class (index 0 is class 1).
    pub fn signatures(&self) -> Vec<Signature> {
        let mut sig = vec![None; self.n_classes];
        for (p, &(a, b)) in self.aliased_pairs.iter().enumerate() {
            sig[a] = Some(ALIASED_PALETTE[p]);
            sig[b] = Some(ALIASED_PALETTE[p]);
        }
        let mut palette = DISTINCT_PALETTE.iter();
        for s in sig.iter_mut().skip(1) {
            if s.is_none() {
                *s = palette.next().copied();
            }
        }
        sig.into_iter()
            .skip(1)
            .map(|s| s.unwrap_or(DISTINCT_PALETTE[0]))
            .collect()
    }

    pub fn aliased_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.aliased_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        v.sort_unstable();
        v
    }
}

/// Cells covered by a shape of `kind` at `(r, c)` of size `h x w`.
fn footprint(kind: ShapeKind, r: usize, c: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    match kind {
        ShapeKind::Cross => vec![(r, c + 1), (r + 1, c), (r + 1, c + 1), (r + 1, c + 2), (r + 2, c + 1)],
        _ => (r..r + h).flat_map(|i| (c..c + w).map(move |j| (i, j))).collect(),
    }
}

fn sample_size(kind: ShapeKind, rng: &mut ChaCha8Rng) -> (usize, usize) {
    match kind {
        ShapeKind::Rect => (rng.random_range(2..=3), rng.random_range(2..=3)),
        ShapeKind::Cross => (3, 3),
        ShapeKind::HBar => (1, rng.random_range(3..=5)),
        ShapeKind::VBar => (rng.random_range(3..=5), 1),
    }
}

/// Stamps shapes onto an empty canvas; `None` if some shape could not be placed.
fn try_layout(spec: &GridSegSpec, sigs: &[Signature], rng: &mut ChaCha8Rng) -> Option<(Vec<usize>, Vec<f64>)> {
    let g = spec.grid;
    let mut labels = vec![0usize; g * g];
    let mut clean = vec![0.0; g * g];
    let k = rng.random_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..k {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let class = rng.random_range(1..spec.n_classes);
            let sig = sigs[class - 1];
            let (h, w) = sample_size(sig.shape, rng);
            let r = rng.random_range(0..=g - h);
            let c = rng.random_range(0..=g - w);
            let cells = footprint(sig.shape, r, c, h, w);
            if cells.iter().any(|&(i, j)| labels[i * g + j] != 0) {
                continue;
            }
            for (i, j) in cells {
                labels[i * g + j] = class;
                clean[i * g + j] = sig.intensity;
            }
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some((labels, clean))
}

/// Tag bits of the foreground classes present in `labels`.
pub fn tags_of(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_classes - 1];
    for &l in labels {
        if l > 0 {
            t[l - 1] = 1.0;
        }
    }
    t
}

/// Foreground occupancy of the four quadrants (top-left, top-right,
/// bottom-left, bottom-right).
pub fn quadrants_of(labels: &[usize], grid: usize) -> Vec<f64> {
    let half = grid.div_ceil(2);
    let mut q = vec![0.0; 4];
    for (idx, &l) in labels.iter().enumerate() {
        if l > 0 {
            let (i, j) = (idx / grid, idx % grid);
            q[2 * usize::from(i >= half) + usize::from(j >= half)] = 1.0;
        }
    }
    q
}

pub fn gen_grid_segmentation(spec: &GridSegSpec) -> Result<(Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    let sigs = spec.signatures();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |n: usize| -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        for idx in 0..n {
            let (labels, clean) = (0..IMAGE_RETRIES)
                .find_map(|_| try_layout(spec, &sigs, &mut rng))
                .ok_or_else(|| Error::Spec(format!("could not place shapes for image {idx}")))?;
            // A separate stream per image keeps the layouts independent of
            // `noise_std`: the same seed at zero noise yields the clean canvases.
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let x = clean
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    v + spec.noise_std * z
                })
                .collect();
            let mut aux = vec![tags_of(&labels, spec.n_classes)];
            if spec.quadrant_head {
                aux.push(quadrants_of(&labels, spec.grid));
            }
            out.push(Example { x, y: labels, aux });
        }
        Ok(out)
    };
    let train = make(spec.n_train)?;
    let test = make(spec.n_test)?;
    Ok((train, test))
}
