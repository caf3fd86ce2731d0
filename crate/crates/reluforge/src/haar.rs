//! Piecewise-constant functions on hyperrectangle cells and their
//! compilation into ReLU networks.
//!
//! One cell compiles to `2n` separation layers (one per face, each a
//! companion bundle whose hyperplane 1 runs parallel to the face at
//! `outer_offset` outside it, positive side toward the cell) followed by one
//! two-unit plateau layer realizing `g = v - ReLU(v - K*a)` where `a` sums
//! the last separation layer, and a linear readout. Inside the cell the
//! clamp saturates at exactly `v`; outside the enclosing polygon the module
//! is exactly zero; in between it ramps within `[0, v]` (mirrored for
//! negative values).
//!
//! Two constructed properties carry all the exactness claims:
//!
//! * companions are tilted by at most `outer_offset / 2` in evaluation units
//!   anywhere in a guard box around the instance, so every point further
//!   than `2*outer_offset` from the cell is rejected by a whole bundle at
//!   once (never a mixed sign pattern), and
//! * each bundle's companions pivot about an apex placed far beyond the
//!   next face, so the bias vector any later layer sees after a rejection
//!   is componentwise nonpositive and the zero state propagates to the end.
//!
//! A whole function is the parallel block-diagonal composition of its cell
//! modules: separation layers have width `m*n`, hidden depth stays `2n + 1`
//! for every `m`, and the readout sums the per-cell plateau pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bundle_map, dot, map_hyperplane, Hyperplane, Hyperrectangle};
use crate::net::{Activation, Layer, Network};
use crate::verify::uniform_points;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaarCell {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub value: f64,
}

impl HaarCell {
    pub fn rect(&self) -> Hyperrectangle {
        Hyperrectangle {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        }
    }
}

/// Piecewise-constant function: disjoint cells, each with a constant value.
/// The domain `S` is the union of the cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaarFunction {
    pub dim: usize,
    pub cells: Vec<HaarCell>,
}

impl HaarFunction {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::InvariantViolation(
                "a piecewise-constant function needs at least one cell".into(),
            ));
        }
        for cell in &self.cells {
            if cell.lower.len() != self.dim || cell.upper.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: cell.lower.len(),
                });
            }
            cell.rect().validate()?;
        }
        for a in 0..self.cells.len() {
            for b in a + 1..self.cells.len() {
                if self.cells[a].rect().interiors_overlap(&self.cells[b].rect()) {
                    return Err(Error::OverlappingCells { a, b });
                }
            }
        }
        Ok(())
    }

    /// Value at `x`, or `None` outside the domain. Shared boundaries go to
    /// the first matching cell.
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.rect().contains(x))
            .map(|c| c.value)
    }

    pub fn bounding_box(&self) -> Hyperrectangle {
        let mut hull = self.cells[0].rect();
        for c in &self.cells[1..] {
            hull = hull.hull(&c.rect());
        }
        hull
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("haar serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: HaarFunction = serde_json::from_str(text).map_err(|e| Error::ParseError {
            context: format!("haar document line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        f.validate()?;
        Ok(f)
    }
}

/// Maximum variation of the function over its domain: the largest pairwise
/// difference of cell values.
pub fn omega(f: &HaarFunction) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in &f.cells {
        lo = lo.min(c.value);
        hi = hi.max(c.value);
    }
    if f.cells.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlateauGain {
    /// `K = v / (0.5 * a_min)` with `a_min` the aggregate minimum over the
    /// cell's vertices, so the clamp saturates on the whole cell with a
    /// factor-two margin.
    Auto,
    Fixed(f64),
}

/// Construction parameters for cell separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightenParams {
    /// Distance from each cell face to its parallel hyperplane 1.
    pub outer_offset: f64,
    /// Companion perturbation magnitude relative to `outer_offset`, in (0, 1].
    pub wedge_scale: f64,
    pub plateau_gain: PlateauGain,
}

impl Default for TightenParams {
    fn default() -> Self {
        Self {
            outer_offset: 0.05,
            wedge_scale: 0.5,
            plateau_gain: PlateauGain::Auto,
        }
    }
}

impl TightenParams {
    pub fn validate_for(&self, rect: &Hyperrectangle) -> Result<()> {
        if !(self.outer_offset > 0.0) {
            return Err(Error::ParamsTooLoose(format!(
                "outer_offset must be positive, got {}",
                self.outer_offset
            )));
        }
        if !(self.wedge_scale > 0.0 && self.wedge_scale <= 1.0) {
            return Err(Error::ParamsTooLoose(format!(
                "wedge_scale must be in (0, 1], got {}",
                self.wedge_scale
            )));
        }
        let min_side = rect.side_lengths().into_iter().fold(f64::INFINITY, f64::min);
        if self.outer_offset >= 0.5 * min_side {
            return Err(Error::ParamsTooLoose(format!(
                "outer_offset {} must stay below half the minimum cell side {}",
                self.outer_offset,
                0.5 * min_side
            )));
        }
        Ok(())
    }
}

/// Eq.-style error report. `measure_error` fills the measured fields,
/// `error_bound` the analytic ones; `bound = omega * band_area_bound` always.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub l2_error: f64,
    pub bound: f64,
    pub omega: f64,
    pub band_area_bound: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Analytic band-measure bound: per cell, the outer shell
/// `prod(side + 2e) - prod(side)` plus a wedge allowance of
/// `n * wedge_scale * e` times the outer surface measure.
pub fn error_bound(f: &HaarFunction, params: &TightenParams) -> Result<ErrorReport> {
    f.validate()?;
    let n = f.dim as f64;
    let e = params.outer_offset;
    let mut band = 0.0;
    for cell in &f.cells {
        params.validate_for(&cell.rect())?;
        let sides = cell.rect().side_lengths();
        let outer: f64 = sides.iter().map(|s| s + 2.0 * e).product();
        let inner: f64 = sides.iter().product();
        let mut surface = 0.0;
        for i in 0..sides.len() {
            let face: f64 = sides
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, s)| s + 2.0 * e)
                .product();
            surface += 2.0 * face;
        }
        band += outer - inner + n * params.wedge_scale * e * surface;
    }
    let om = omega(f);
    Ok(ErrorReport {
        l2_error: 0.0,
        bound: om * band,
        omega: om,
        band_area_bound: band,
        samples: 0,
        seed: 0,
    })
}

/// Sampling strategy for the quadrature estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    /// Uniform grid with `resolution` points per axis over the bounding box.
    Grid { resolution: usize },
    MonteCarlo { count: usize, seed: u64 },
}

/// Quadrature estimate of the L2 error `(int_S (fhat - f)^2 dx)^(1/2)`,
/// restricted to the domain where `f` is defined.
pub fn measure_error(net: &Network, f: &HaarFunction, sampler: Sampler) -> Result<ErrorReport> {
    f.validate()?;
    let hull = f.bounding_box();
    let volume = hull.volume();
    let mut total = 0usize;
    let mut inside = 0usize;
    let mut sum_sq = 0.0;
    let mut seed = 0u64;
    let mut accumulate = |x: &[f64]| -> Result<()> {
        total += 1;
        if let Some(v) = f.eval(x) {
            inside += 1;
            let d = net.forward_scalar(x)? - v;
            sum_sq += d * d;
        }
        Ok(())
    };
    match sampler {
        Sampler::Grid { resolution } => {
            if resolution == 0 {
                return Err(Error::EmptyDomain);
            }
            let mut idx = vec![0usize; f.dim];
            loop {
                let x: Vec<f64> = (0..f.dim)
                    .map(|i| {
                        hull.lower[i]
                            + (hull.upper[i] - hull.lower[i]) * (idx[i] as f64 + 0.5)
                                / resolution as f64
                    })
                    .collect();
                accumulate(&x)?;
                let mut k = 0;
                loop {
                    if k == f.dim {
                        break;
                    }
                    idx[k] += 1;
                    if idx[k] < resolution {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == f.dim {
                    break;
                }
            }
        }
        Sampler::MonteCarlo { count, seed: s } => {
            seed = s;
            for x in uniform_points(&hull, count, s) {
                accumulate(&x)?;
            }
        }
    }
    if inside == 0 {
        return Err(Error::EmptyDomain);
    }
    let l2 = (sum_sq * volume / total as f64).sqrt();
    Ok(ErrorReport {
        l2_error: l2,
        bound: 0.0,
        omega: omega(f),
        band_area_bound: 0.0,
        samples: inside,
        seed,
    })
}

/// Midpoint projection of `g` onto a uniform grid of `resolution^n` cells.
pub fn haar_project(
    g: &dyn Fn(&[f64]) -> f64,
    domain: &Hyperrectangle,
    resolution: usize,
) -> Result<HaarFunction> {
    domain.validate()?;
    if resolution == 0 {
        return Err(Error::InvariantViolation("resolution must be at least 1".into()));
    }
    let n = domain.dim();
    let steps: Vec<f64> = domain
        .side_lengths()
        .iter()
        .map(|s| s / resolution as f64)
        .collect();
    let mut cells = Vec::with_capacity(resolution.pow(n as u32));
    let mut idx = vec![0usize; n];
    loop {
        let lower: Vec<f64> = (0..n)
            .map(|i| domain.lower[i] + steps[i] * idx[i] as f64)
            .collect();
        let upper: Vec<f64> = (0..n)
            .map(|i| {
                if idx[i] + 1 == resolution {
                    domain.upper[i]
                } else {
                    domain.lower[i] + steps[i] * (idx[i] + 1) as f64
                }
            })
            .collect();
        let center: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect();
        cells.push(HaarCell {
            lower,
            upper,
            value: g(&center),
        });
        let mut k = 0;
        loop {
            if k == n {
                break;
            }
            idx[k] += 1;
            if idx[k] < resolution {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == n {
            break;
        }
    }
    let f = HaarFunction { dim: n, cells };
    f.validate()?;
    Ok(f)
}

// ---------------------------------------------------------------------------
// Cell compilation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FaceSide {
    Low,
    Up,
}

/// Face processing order. Consecutive faces always touch different
/// coordinates when `n >= 2`, which the apex chain needs. In one dimension
/// the upper face goes first so that rejection on the lower side happens at
/// the last layer and feeds the plateau an exact zero.
fn face_order(n: usize) -> Vec<(usize, FaceSide)> {
    if n == 1 {
        return vec![(0, FaceSide::Up), (0, FaceSide::Low)];
    }
    let mut faces = Vec::with_capacity(2 * n);
    for i in 0..n {
        faces.push((i, FaceSide::Low));
    }
    for i in 0..n {
        faces.push((i, FaceSide::Up));
    }
    faces
}

fn face_h1(rect: &Hyperrectangle, face: (usize, FaceSide), e: f64) -> Hyperplane {
    let n = rect.dim();
    let mut normal = vec![0.0; n];
    match face.1 {
        FaceSide::Low => {
            normal[face.0] = 1.0;
            Hyperplane::new(normal, -(rect.lower[face.0] - e))
        }
        FaceSide::Up => {
            normal[face.0] = -1.0;
            Hyperplane::new(normal, rect.upper[face.0] + e)
        }
    }
}

/// The per-cell construction record verification needs.
#[derive(Debug, Clone)]
pub struct CellConstruction {
    pub rect: Hyperrectangle,
    pub value: f64,
    /// Input-space bundles, one per face in layer order.
    pub bundles: Vec<Vec<Hyperplane>>,
    /// Guard box inside which the separation guarantees hold.
    pub guard: Hyperrectangle,
    pub gain: f64,
    pub aggregate_min: f64,
    pub wedge: f64,
}

/// A compiled cell module: `2n` separation layers, one plateau layer of two
/// units, one linear readout.
#[derive(Debug, Clone)]
pub struct CompiledCell {
    pub net: Network,
    pub construction: CellConstruction,
}

struct CellLayers {
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    construction: CellConstruction,
}

fn build_cell_layers(
    rect: &Hyperrectangle,
    value: f64,
    params: &TightenParams,
    guard: &Hyperrectangle,
) -> Result<CellLayers> {
    rect.validate()?;
    params.validate_for(rect)?;
    let n = rect.dim();
    let e = params.outer_offset;
    let faces = face_order(n);
    let center = rect.center();
    // Apexes must be strongly rejected by the following face's hyperplane 1.
    let extent = guard
        .side_lengths()
        .into_iter()
        .fold(0.0f64, f64::max);
    let margin = 1.0 + extent;

    // Apex coordinates per face: pinned to the face plane in its own
    // coordinate, pushed beyond the next face in that face's coordinate,
    // cell-centered elsewhere.
    let mut apexes: Vec<Vec<f64>> = Vec::with_capacity(faces.len());
    for (k, face) in faces.iter().enumerate() {
        let mut q = center.clone();
        q[face.0] = match face.1 {
            FaceSide::Low => rect.lower[face.0] - e,
            FaceSide::Up => rect.upper[face.0] + e,
        };
        if k + 1 < faces.len() {
            let (i, side) = faces[k + 1];
            if i != face.0 {
                q[i] = match side {
                    FaceSide::Low => rect.lower[i] - e - margin,
                    FaceSide::Up => rect.upper[i] + e + margin,
                };
            }
        }
        apexes.push(q);
    }

    // Companion tilt: requested scale, capped so the tilt contributes at
    // most e/2 to any evaluation inside the guard box. This keeps every
    // sign pattern clean outside the 2e shell.
    let mut reach: f64 = 1.0;
    for q in &apexes {
        for corner in guard.vertices() {
            for j in 0..n {
                reach = reach.max((corner[j] - q[j]).abs());
            }
        }
    }
    let mut wedge = (params.wedge_scale * e).min(e / (2.0 * reach));

    for attempt in 0..=20 {
        if attempt == 20 {
            return Err(Error::BundleFailure(
                "separation biases kept firing on the zero state after 20 wedge halvings".into(),
            ));
        }
        let mut bundles: Vec<Vec<Hyperplane>> = Vec::with_capacity(faces.len());
        for (k, face) in faces.iter().enumerate() {
            let h1 = face_h1(rect, *face, e);
            let mut bundle = vec![h1.clone()];
            for j in (0..n).filter(|j| *j != face.0) {
                let mut normal = h1.normal.clone();
                normal[j] += wedge;
                bundle.push(Hyperplane::new(normal, h1.offset - wedge * apexes[k][j]));
            }
            bundles.push(bundle);
        }

        // Assemble separation layers and check the zero-state chain.
        let mut layers: Vec<(Vec<Vec<f64>>, Vec<f64>)> = Vec::with_capacity(2 * n + 2);
        let mut chain_ok = true;
        for (k, bundle) in bundles.iter().enumerate() {
            let pulled: Vec<Hyperplane> = if k == 0 {
                bundle.clone()
            } else {
                let amap = bundle_map(&bundles[k - 1]);
                bundle
                    .iter()
                    .map(|h| map_hyperplane(h, &amap))
                    .collect::<Result<_>>()?
            };
            let rows: Vec<Vec<f64>> = pulled.iter().map(|h| h.normal.clone()).collect();
            let biases: Vec<f64> = pulled.iter().map(|h| h.offset).collect();
            if k > 0 && n >= 2 && biases.iter().any(|b| *b > 0.0) {
                chain_ok = false;
                break;
            }
            layers.push((rows, biases));
        }
        if !chain_ok {
            wedge *= 0.5;
            continue;
        }

        // Aggregate over the last separation layer: affine inside the
        // all-positive region, minimized over the cell at a vertex.
        let mut a_min = f64::INFINITY;
        for vertex in rect.vertices() {
            let mut state = vertex.clone();
            for (rows, biases) in &layers {
                state = rows
                    .iter()
                    .zip(biases)
                    .map(|(row, b)| (dot(row, &state) + b).max(0.0))
                    .collect();
            }
            a_min = a_min.min(state.iter().sum::<f64>());
        }
        if !(a_min > 0.0) {
            return Err(Error::PlateauGainFailure(format!(
                "aggregate minimum {a_min} over the cell vertices is not positive"
            )));
        }
        let gain = match params.plateau_gain {
            PlateauGain::Auto => value.abs() / (0.5 * a_min),
            PlateauGain::Fixed(k) => {
                if !(k > 0.0) || k * a_min < value.abs() {
                    return Err(Error::PlateauGainFailure(format!(
                        "fixed gain {k} cannot certify the plateau: K*a_min = {} < |v| = {}",
                        k * a_min,
                        value.abs()
                    )));
                }
                k
            }
        };

        // Plateau pair over the last separation layer. For v > 0:
        // u1 = ReLU(K a), u2 = ReLU(K a - v), readout u1 - u2 = min(v, K a).
        // For v < 0 the pair mirrors and the readout is u2 - u1.
        let last_width = layers.last().map_or(n, |(rows, _)| rows.len());
        let ka_row = vec![gain; last_width];
        let (b1, b2) = if value >= 0.0 {
            (0.0, -value)
        } else {
            (value, 0.0)
        };
        layers.push((vec![ka_row.clone(), ka_row], vec![b1, b2]));

        // Same +-1 pattern for both signs: the plateau biases encode the mirror.
        layers.push((vec![vec![1.0, -1.0]], vec![0.0]));

        return Ok(CellLayers {
            layers,
            construction: CellConstruction {
                rect: rect.clone(),
                value,
                bundles,
                guard: guard.clone(),
                gain,
                aggregate_min: a_min,
                wedge,
            },
        });
    }
    unreachable!()
}

fn default_guard(hull: &Hyperrectangle) -> Hyperrectangle {
    let extent = hull.side_lengths().into_iter().fold(0.0f64, f64::max);
    hull.inflate(2.0 * (1.0 + extent) + 2.0)
}

/// Compile a single cell into a standalone module network.
pub fn compile_cell(
    rect: &Hyperrectangle,
    value: f64,
    params: &TightenParams,
) -> Result<CompiledCell> {
    let guard = default_guard(rect);
    if value == 0.0 {
        // The zero function: nothing to separate.
        let net = Network::new(
            rect.dim(),
            vec![Layer::new(
                vec![vec![0.0; rect.dim()]],
                vec![0.0],
                Activation::Linear,
            )],
            "compiled-cell value=0",
        )?;
        return Ok(CompiledCell {
            net,
            construction: CellConstruction {
                rect: rect.clone(),
                value,
                bundles: Vec::new(),
                guard,
                gain: 0.0,
                aggregate_min: 0.0,
                wedge: 0.0,
            },
        });
    }
    let built = build_cell_layers(rect, value, params, &guard)?;
    let count = built.layers.len();
    let layers: Vec<Layer> = built
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, (rows, biases))| {
            let activation = if i + 1 == count {
                Activation::Linear
            } else {
                Activation::Relu
            };
            Layer::new(rows, biases, activation)
        })
        .collect();
    let net = Network::new(
        rect.dim(),
        layers,
        format!("compiled-cell value={value} eps={}", params.outer_offset),
    )?;
    Ok(CompiledCell {
        net,
        construction: built.construction,
    })
}

/// A compiled piecewise-constant function.
#[derive(Debug, Clone)]
pub struct CompiledHaar {
    pub net: Network,
    pub cells: Vec<CellConstruction>,
    pub params: TightenParams,
    /// Unit ranges of each live cell inside every separation layer.
    pub cell_blocks: Vec<(usize, std::ops::Range<usize>)>,
    pub separation_layers: usize,
}

impl CompiledHaar {
    pub fn hidden_depth(&self) -> usize {
        self.net.layers.len() - 1
    }

    pub fn separation_width(&self) -> usize {
        self.net
            .layers
            .first()
            .map_or(0, crate::net::Layer::output_dim)
    }
}

/// Compile a whole function: block-diagonal composition of the live cell
/// modules with a shared linear readout that sums the plateau pairs.
pub fn compile_haar(f: &HaarFunction, params: &TightenParams) -> Result<CompiledHaar> {
    f.validate()?;
    let n = f.dim;
    let e = params.outer_offset;

    // The outer shells must not reach across the gap to a detached cell.
    for a in 0..f.cells.len() {
        for b in a + 1..f.cells.len() {
            let gap = f.cells[a].rect().gap(&f.cells[b].rect());
            if gap > 0.0 && e >= gap {
                return Err(Error::ParamsTooLoose(format!(
                    "outer_offset {e} reaches across the gap {gap} between cells {a} and {b}"
                )));
            }
        }
    }

    let guard = default_guard(&f.bounding_box());
    let live: Vec<(usize, &HaarCell)> = f
        .cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.value != 0.0)
        .collect();
    if live.is_empty() {
        let net = Network::new(
            n,
            vec![Layer::new(vec![vec![0.0; n]], vec![0.0], Activation::Linear)],
            "compiled-haar all cells zero",
        )?;
        return Ok(CompiledHaar {
            net,
            cells: Vec::new(),
            params: *params,
            cell_blocks: Vec::new(),
            separation_layers: 0,
        });
    }

    let mut modules = Vec::with_capacity(live.len());
    for (_, cell) in &live {
        modules.push(build_cell_layers(&cell.rect(), cell.value, params, &guard)?);
    }

    let depth = 2 * n + 1; // separation layers + plateau
    let mut layers: Vec<Layer> = Vec::with_capacity(depth + 1);
    for l in 0..depth {
        let prev_widths: Vec<usize> = if l == 0 {
            vec![n; modules.len()]
        } else {
            modules.iter().map(|m| m.layers[l - 1].0.len()).collect()
        };
        let prev_total: usize = if l == 0 { n } else { prev_widths.iter().sum() };
        let mut rows = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0usize;
        for (mi, module) in modules.iter().enumerate() {
            let (mrows, mbiases) = &module.layers[l];
            for (row, b) in mrows.iter().zip(mbiases) {
                let mut full = vec![0.0; prev_total];
                let start = if l == 0 { 0 } else { offset };
                full[start..start + row.len()].copy_from_slice(row);
                rows.push(full);
                biases.push(*b);
            }
            offset += if l == 0 { 0 } else { prev_widths[mi] };
        }
        layers.push(Layer::new(rows, biases, Activation::Relu));
    }

    // Linear readout: the concatenated per-cell plateau combinations.
    let mut out_row = Vec::with_capacity(2 * modules.len());
    for module in &modules {
        let (or, _) = &module.layers[depth];
        debug_assert_eq!(or.len(), 1);
        out_row.extend_from_slice(&or[0]);
    }
    layers.push(Layer::new(vec![out_row], vec![0.0], Activation::Linear));

    let net = Network::new(
        n,
        layers,
        format!(
            "compiled-haar cells={} eps={} wedge={}",
            f.cells.len(),
            params.outer_offset,
            params.wedge_scale
        ),
    )?;

    let mut cell_blocks = Vec::with_capacity(live.len());
    for (k, (idx, _)) in live.iter().enumerate() {
        cell_blocks.push((*idx, k * n..(k + 1) * n));
    }
    Ok(CompiledHaar {
        net,
        cells: modules.into_iter().map(|m| m.construction).collect(),
        params: *params,
        cell_blocks,
        separation_layers: 2 * n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Hyperrectangle {
        Hyperrectangle::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    fn params(e: f64) -> TightenParams {
        TightenParams {
            outer_offset: e,
            wedge_scale: 0.5,
            plateau_gain: PlateauGain::Auto,
        }
    }

    #[test]
    fn one_dimensional_cell_hand_trace() {
        let r = Hyperrectangle::new(vec![0.0], vec![1.0]).unwrap();
        let compiled = compile_cell(&r, 3.0, &params(0.1)).unwrap();
        // 2 separation layers + plateau + readout.
        assert_eq!(compiled.net.layers.len(), 4);
        assert_eq!(compiled.net.forward_scalar(&[0.5]).unwrap(), 3.0);
        assert_eq!(compiled.net.forward_scalar(&[-5.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_value_cell_short_circuits() {
        let compiled = compile_cell(&unit_square(), 0.0, &params(0.05)).unwrap();
        assert_eq!(compiled.net.forward_scalar(&[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(compiled.net.forward_scalar(&[9.0, -9.0]).unwrap(), 0.0);
    }

    #[test]
    fn too_loose_params_rejected() {
        assert!(matches!(
            compile_cell(&unit_square(), 1.0, &params(0.6)),
            Err(Error::ParamsTooLoose(_))
        ));
    }

    #[test]
    fn cell_module_plateau_band_and_exclusion() {
        let compiled = compile_cell(&unit_square(), 2.0, &params(0.05)).unwrap();
        // Plateau: exact value well inside.
        for p in [[0.2, 0.2], [0.5, 0.9], [0.85, 0.15]] {
            let out = compiled.net.forward_scalar(&p).unwrap();
            assert!((out - 2.0).abs() <= 1e-9, "plateau at {p:?}: {out}");
        }
        // Far outside: exact zero.
        for p in [[-1.0, 0.5], [2.0, 2.0], [0.5, -3.0], [4.0, 0.2]] {
            assert_eq!(compiled.net.forward_scalar(&p).unwrap(), 0.0);
        }
        // Band: within [0, v].
        for t in 0..50 {
            let x = -0.08 + 0.16 * (t as f64) / 49.0;
            let out = compiled.net.forward_scalar(&[x, 0.5]).unwrap();
            assert!((0.0..=2.0).contains(&out), "band value {out} at x={x}");
        }
    }

    #[test]
    fn negative_value_mirrors() {
        let compiled = compile_cell(&unit_square(), -1.5, &params(0.05)).unwrap();
        assert!((compiled.net.forward_scalar(&[0.4, 0.6]).unwrap() + 1.5).abs() <= 1e-9);
        assert_eq!(compiled.net.forward_scalar(&[3.0, 3.0]).unwrap(), 0.0);
        let band = compiled.net.forward_scalar(&[-0.03, 0.5]).unwrap();
        assert!((-1.5..=0.0).contains(&band));
    }

    #[test]
    fn omega_examples() {
        let mk = |values: &[f64]| HaarFunction {
            dim: 1,
            cells: values
                .iter()
                .enumerate()
                .map(|(i, v)| HaarCell {
                    lower: vec![2.0 * i as f64],
                    upper: vec![2.0 * i as f64 + 1.0],
                    value: *v,
                })
                .collect(),
        };
        assert_eq!(omega(&mk(&[1.0, 4.0, 2.0])), 3.0);
        assert_eq!(omega(&mk(&[5.0])), 0.0);
        assert_eq!(omega(&mk(&[-2.0, 5.0])), 7.0);
    }

    #[test]
    fn error_bound_shell_term() {
        let f = HaarFunction {
            dim: 2,
            cells: vec![HaarCell {
                lower: vec![0.0, 0.0],
                upper: vec![1.0, 1.0],
                value: 1.0,
            }],
        };
        let mut p = params(0.05);
        p.wedge_scale = 1e-12;
        let report = error_bound(&f, &p).unwrap();
        assert!((report.band_area_bound - 0.21).abs() < 1e-6);
        // Single cell: omega = 0 so the bound collapses.
        assert_eq!(report.bound, 0.0);
        // Halving the offset strictly shrinks the band.
        p.outer_offset = 0.025;
        let half = error_bound(&f, &p).unwrap();
        assert!(half.band_area_bound < report.band_area_bound);
    }

    #[test]
    fn haar_project_midpoints() {
        let domain = Hyperrectangle::new(vec![0.0], vec![1.0]).unwrap();
        let f = haar_project(&|x| x[0], &domain, 2).unwrap();
        assert_eq!(f.cells.len(), 2);
        assert_eq!(f.cells[0].value, 0.25);
        assert_eq!(f.cells[1].value, 0.75);
        let constant = haar_project(&|_| 7.0, &domain, 4).unwrap();
        assert_eq!(omega(&constant), 0.0);
        let single = haar_project(&|x| x[0] * 2.0, &domain, 1).unwrap();
        assert_eq!(single.cells.len(), 1);
        assert_eq!(single.cells[0].value, 1.0);
    }

    #[test]
    fn compile_haar_structure_and_width() {
        let f = HaarFunction {
            dim: 2,
            cells: vec![
                HaarCell {
                    lower: vec![0.0, 0.0],
                    upper: vec![1.0, 1.0],
                    value: 1.0,
                },
                HaarCell {
                    lower: vec![2.0, 0.0],
                    upper: vec![3.0, 1.0],
                    value: 2.0,
                },
                HaarCell {
                    lower: vec![0.0, 2.5],
                    upper: vec![1.0, 3.5],
                    value: -1.0,
                },
            ],
        };
        let compiled = compile_haar(&f, &params(0.05)).unwrap();
        // Depth 2n + 1 hidden layers; separation width m*n = 6.
        assert_eq!(compiled.hidden_depth(), 5);
        assert_eq!(compiled.separation_width(), 6);
        for cell in &f.cells {
            let c = cell.rect().center();
            let out = compiled.net.forward_scalar(&c).unwrap();
            assert!((out - cell.value).abs() <= 1e-9, "at {c:?}: {out}");
        }
        assert_eq!(compiled.net.forward_scalar(&[-2.0, -2.0]).unwrap(), 0.0);
        assert_eq!(compiled.net.forward_scalar(&[5.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn compile_haar_rejects_overlap_and_tight_gaps() {
        let overlapping = HaarFunction {
            dim: 2,
            cells: vec![
                HaarCell {
                    lower: vec![0.0, 0.0],
                    upper: vec![1.0, 1.0],
                    value: 1.0,
                },
                HaarCell {
                    lower: vec![0.5, 0.5],
                    upper: vec![1.5, 1.5],
                    value: 2.0,
                },
            ],
        };
        assert!(matches!(
            compile_haar(&overlapping, &params(0.05)),
            Err(Error::OverlappingCells { .. })
        ));

        let gapped = HaarFunction {
            dim: 2,
            cells: vec![
                HaarCell {
                    lower: vec![0.0, 0.0],
                    upper: vec![1.0, 1.0],
                    value: 1.0,
                },
                HaarCell {
                    lower: vec![1.02, 0.0],
                    upper: vec![2.0, 1.0],
                    value: 2.0,
                },
            ],
        };
        assert!(matches!(
            compile_haar(&gapped, &params(0.05)),
            Err(Error::ParamsTooLoose(_))
        ));
    }

    #[test]
    fn adjacent_cells_error_stays_under_bound() {
        // Large cell above, small one below, sharing a boundary line.
        let f = HaarFunction {
            dim: 2,
            cells: vec![
                HaarCell {
                    lower: vec![0.0, 0.0],
                    upper: vec![1.0, 1.0],
                    value: 1.0,
                },
                HaarCell {
                    lower: vec![0.2, -0.5],
                    upper: vec![0.6, 0.0],
                    value: 4.0,
                },
            ],
        };
        let p = params(0.05);
        let compiled = compile_haar(&f, &p).unwrap();
        let measured = measure_error(&compiled.net, &f, Sampler::Grid { resolution: 160 }).unwrap();
        let bound = error_bound(&f, &p).unwrap();
        assert!(
            measured.l2_error <= bound.bound,
            "measured {} vs bound {}",
            measured.l2_error,
            bound.bound
        );
        // The band is the sole error source: off-band points are exact.
        for point in [[0.5, 0.5], [0.4, -0.25], [0.11, 0.5]] {
            let v = f.eval(&point).unwrap();
            let out = compiled.net.forward_scalar(&point).unwrap();
            assert!((out - v).abs() <= 1e-9, "off-band at {point:?}");
        }
        // Halving the offset does not increase the measured error.
        let mut tighter = p;
        tighter.outer_offset = 0.025;
        let compiled2 = compile_haar(&f, &tighter).unwrap();
        let measured2 =
            measure_error(&compiled2.net, &f, Sampler::Grid { resolution: 160 }).unwrap();
        assert!(measured2.l2_error <= measured.l2_error + 1e-12);
    }

    #[test]
    fn measure_error_zero_on_exact_plateau() {
        let f = HaarFunction {
            dim: 2,
            cells: vec![HaarCell {
                lower: vec![0.0, 0.0],
                upper: vec![1.0, 1.0],
                value: 5.0,
            }],
        };
        let compiled = compile_haar(&f, &params(0.05)).unwrap();
        let report = measure_error(&compiled.net, &f, Sampler::Grid { resolution: 64 }).unwrap();
        assert!(report.l2_error <= 1e-9);
    }

    #[test]
    fn haar_json_round_trip() {
        let f = HaarFunction {
            dim: 2,
            cells: vec![HaarCell {
                lower: vec![0.0, 0.25],
                upper: vec![1.0, 1.0],
                value: -2.5,
            }],
        };
        let back = HaarFunction::from_json(&f.to_json()).unwrap();
        assert_eq!(f, back);
    }
}
