//! Oblique decision trees, one-vs-rest forests, and their compilation into
//! ReLU networks.
//!
//! Layout of a compiled tree: hidden layer `l` corresponds to tree level `l`
//! (the root's children occupy layer 1). Each child of an internal node owns
//! a block of `n` units realizing a companion bundle of the node's split in
//! the child's layer space; the zero-side child's block is the positive
//! block with weights and biases negated. A leaf above the deepest level
//! keeps one pass-through unit per deeper layer (all-ones over its own
//! previous units, bias zero). The output layer is a single ReLU wired `+1`
//! to every label-1 leaf's final units and `-1` to every label-0 leaf's.
//!
//! Blocks whose bundle bias would fire on an all-zero parent block get
//! large negative "ballast" weights on the other blocks of the previous
//! layer. Exactly one block per layer is active for any routed point, so
//! ballast never touches a live path (its sources are exact zeros there) and
//! pins every dead subtree at exact zero, which is what makes the
//! mutual-exclusivity and zero-propagation checks hold with no tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bundle_map, companion_bundle_with_tol, dot, map_hyperplane, Hyperplane, LabeledPoints,
    DEFAULT_TOL,
};
use crate::net::{Activation, Layer, Network};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Internal {
        split: Hyperplane,
        pos: NodeId,
        zero: NodeId,
    },
    Leaf {
        leaf: u8,
    },
}

/// Binary tree over hyperplane predicates. `pos` handles the positive side
/// of the split, `zero` the other one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDecisionTree {
    pub input_dim: usize,
    pub root: NodeId,
    pub nodes: Vec<Node>,
}

impl LinearDecisionTree {
    pub fn validate(&self) -> Result<()> {
        if self.root >= self.nodes.len() {
            return Err(Error::InvariantViolation(format!(
                "root id {} out of range",
                self.root
            )));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if id >= self.nodes.len() {
                return Err(Error::InvariantViolation(format!("node id {id} out of range")));
            }
            if seen[id] {
                return Err(Error::InvariantViolation(format!(
                    "node {id} reachable twice; not a tree"
                )));
            }
            seen[id] = true;
            match &self.nodes[id] {
                Node::Internal { split, pos, zero } => {
                    split.validate()?;
                    if split.dim() != self.input_dim {
                        return Err(Error::DimensionMismatch {
                            expected: self.input_dim,
                            got: split.dim(),
                        });
                    }
                    stack.push(*pos);
                    stack.push(*zero);
                }
                Node::Leaf { leaf } => {
                    if *leaf > 1 {
                        return Err(Error::InvariantViolation(format!(
                            "leaf label must be 0 or 1, got {leaf}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Ids of the nodes along the routing path of `x`, ending at a leaf.
    pub fn route(&self, x: &[f64], tol: f64) -> Result<Vec<NodeId>> {
        let mut path = vec![self.root];
        let mut id = self.root;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return Ok(path),
                Node::Internal { split, pos, zero } => {
                    id = match split.side(x, tol)? {
                        crate::geometry::Side::Positive => *pos,
                        crate::geometry::Side::ZeroSide => *zero,
                    };
                    path.push(id);
                }
            }
        }
    }

    pub fn leaf_label(&self, id: NodeId) -> Option<u8> {
        match self.nodes.get(id) {
            Some(Node::Leaf { leaf }) => Some(*leaf),
            _ => None,
        }
    }

    /// Depth in edges of the deepest leaf.
    pub fn depth(&self) -> usize {
        fn walk(tree: &LinearDecisionTree, id: NodeId, d: usize) -> usize {
            match &tree.nodes[id] {
                Node::Leaf { .. } => d,
                Node::Internal { pos, zero, .. } => {
                    walk(tree, *pos, d + 1).max(walk(tree, *zero, d + 1))
                }
            }
        }
        walk(self, self.root, 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tree: LinearDecisionTree = serde_json::from_str(text).map_err(|e| Error::ParseError {
            context: format!("tree document line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        tree.validate()?;
        Ok(tree)
    }
}

/// Reference oracle: route and read the leaf label.
pub fn oracle_tree_predict(tree: &LinearDecisionTree, x: &[f64], tol: f64) -> Result<u8> {
    let path = tree.route(x, tol)?;
    Ok(tree.leaf_label(*path.last().unwrap()).unwrap())
}

/// One two-class tree per class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub class_count: usize,
    pub trees: Vec<ForestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestEntry {
    pub class: usize,
    pub tree: LinearDecisionTree,
}

impl Forest {
    pub fn validate(&self) -> Result<()> {
        if self.trees.len() != self.class_count {
            return Err(Error::InconsistentDims(format!(
                "{} trees for {} classes",
                self.trees.len(),
                self.class_count
            )));
        }
        let mut seen = vec![false; self.class_count];
        let dim = self.trees.first().map_or(0, |e| e.tree.input_dim);
        for entry in &self.trees {
            if entry.class >= self.class_count {
                return Err(Error::InconsistentDims(format!(
                    "class id {} out of range",
                    entry.class
                )));
            }
            if seen[entry.class] {
                return Err(Error::InconsistentDims(format!(
                    "class id {} appears twice",
                    entry.class
                )));
            }
            seen[entry.class] = true;
            if entry.tree.input_dim != dim {
                return Err(Error::InconsistentDims(
                    "trees disagree on input dimension".into(),
                ));
            }
            entry.tree.validate()?;
        }
        Ok(())
    }

    pub fn tree_for_class(&self, class: usize) -> Option<&LinearDecisionTree> {
        self.trees
            .iter()
            .find(|e| e.class == class)
            .map(|e| &e.tree)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("forest serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let forest: Forest = serde_json::from_str(text).map_err(|e| Error::ParseError {
            context: format!("forest document line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        forest.validate()?;
        Ok(forest)
    }
}

/// Reference oracle: the unique tree claiming `x` names the class.
pub fn oracle_forest_predict(forest: &Forest, x: &[f64], tol: f64) -> Result<usize> {
    let mut claim = None;
    let mut claims = 0;
    for entry in &forest.trees {
        if oracle_tree_predict(&entry.tree, x, tol)? == 1 {
            claims += 1;
            claim = Some(entry.class);
        }
    }
    match (claims, claim) {
        (1, Some(class)) => Ok(class),
        _ => Err(Error::AmbiguousForest { claims }),
    }
}

/// Calibration set for multi-class compilation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPoints {
    pub points: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ModuleLayer {
    rows: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

/// One compiled tree as layer blocks local to the tree, padded with
/// pass-through chains up to `target_depth`.
#[derive(Debug, Clone)]
struct TreeModule {
    input_dim: usize,
    layers: Vec<ModuleLayer>,
    /// Final-layer unit ids per leaf, with the leaf's label.
    leaf_final: Vec<(NodeId, u8, Vec<usize>)>,
    /// Per layer, per node: the bundle block's unit ids (for inspection).
    blocks: Vec<Vec<(NodeId, Vec<usize>)>>,
    planes: Vec<Hyperplane>,
    gamma_hat: f64,
}

fn node_label_points(points: &[Vec<f64>], labels: &[u8], idx: &[usize]) -> LabeledPoints {
    LabeledPoints {
        points: idx.iter().map(|i| points[*i].clone()).collect(),
        labels: idx.iter().map(|i| labels[*i]).collect(),
    }
}

impl TreeModule {
    fn build(
        tree: &LinearDecisionTree,
        calib: &LabeledPoints,
        target_depth: usize,
        tol: f64,
    ) -> Result<TreeModule> {
        tree.validate()?;
        calib.validate()?;
        let n = tree.input_dim;

        // Route every calibration point; reject on-split points and label
        // mismatches up front.
        let mut node_points: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes.len()];
        for (index, p) in calib.points.iter().enumerate() {
            let path = tree.route(p, tol).map_err(|e| match e {
                Error::OnHyperplane { .. } => {
                    let node = on_split_node(tree, p, tol);
                    Error::CalibrationOnSplit { index, node }
                }
                other => other,
            })?;
            let leaf = *path.last().unwrap();
            let routed = tree.leaf_label(leaf).unwrap();
            if routed != calib.labels[index] {
                return Err(Error::LabelMismatch {
                    index,
                    routed,
                    given: calib.labels[index],
                });
            }
            for id in path {
                node_points[id].push(index);
            }
        }

        // Levels and parents in BFS order.
        let mut level = vec![0usize; tree.nodes.len()];
        let mut bfs = vec![tree.root];
        let mut order = Vec::new();
        let mut parent: Vec<Option<NodeId>> = vec![None; tree.nodes.len()];
        let mut positive_side = vec![true; tree.nodes.len()];
        while let Some(id) = bfs.pop() {
            order.push(id);
            if let Node::Internal { pos, zero, .. } = &tree.nodes[id] {
                for (child, is_pos) in [(*pos, true), (*zero, false)] {
                    level[child] = level[id] + 1;
                    parent[child] = Some(id);
                    positive_side[child] = is_pos;
                    bfs.push(child);
                }
            }
        }
        order.sort_by_key(|id| (level[*id], *id));
        let tree_depth = tree.depth();
        if target_depth < tree_depth {
            return Err(Error::InconsistentDims(format!(
                "target depth {target_depth} below tree depth {tree_depth}"
            )));
        }

        // Degenerate single-leaf tree: a constant block carried to the end.
        if tree_depth == 0 {
            return Self::build_constant(tree, target_depth, n);
        }

        // Oriented input-space bundle per non-root node, built from the
        // parent's split and the calibration points that reach the parent.
        let mut bundles: Vec<Option<Vec<Hyperplane>>> = vec![None; tree.nodes.len()];
        let mut planes = Vec::new();
        for &id in &order {
            if let Node::Internal { split, pos, zero } = &tree.nodes[id] {
                let data = node_label_points(&calib.points, &calib.labels, &node_points[id]);
                let bundle = companion_bundle_with_tol(split, &data, tol)
                    .map_err(|e| Error::BundleFailure(format!("node {id}: {e}")))?;
                planes.extend(bundle.iter().cloned());
                bundles[*zero] = Some(bundle.iter().map(Hyperplane::negated).collect());
                bundles[*pos] = Some(bundle);
            }
        }

        let gamma_hat = normalized_margin(&planes, &calib.points);
        // Activity floor for ballast: the random-point equivalence claim is
        // made at filter margin gamma_hat / 2, so any live block unit is at
        // least that margin times its row norm.
        let min_norm = planes
            .iter()
            .map(Hyperplane::norm)
            .fold(f64::INFINITY, f64::min);
        let filter_floor = (0.5 * gamma_hat * min_norm).max(1e-300);

        // Layer slot layout, in (level, id) order: bundle blocks first, then
        // one pass-through per shallower leaf.
        #[derive(Clone)]
        enum Slot {
            Bundle { node: NodeId, row: usize },
            Pass { leaf: NodeId },
        }
        let mut slot_layout: Vec<Vec<Slot>> = Vec::with_capacity(target_depth);
        for l in 1..=target_depth {
            let mut slots = Vec::new();
            for &id in &order {
                if level[id] == l && l <= tree_depth {
                    for row in 0..n {
                        slots.push(Slot::Bundle { node: id, row });
                    }
                }
            }
            for &id in &order {
                let is_leaf = matches!(tree.nodes[id], Node::Leaf { .. });
                if is_leaf && level[id] < l {
                    slots.push(Slot::Pass { leaf: id });
                }
            }
            slot_layout.push(slots);
        }

        // Unit index of each node block / pass unit per layer.
        let mut block_at: Vec<Vec<Option<Vec<usize>>>> =
            vec![vec![None; tree.nodes.len()]; target_depth + 1];
        let mut pass_at: Vec<Vec<Option<usize>>> =
            vec![vec![None; tree.nodes.len()]; target_depth + 1];
        for (li, slots) in slot_layout.iter().enumerate() {
            let l = li + 1;
            for (u, slot) in slots.iter().enumerate() {
                match slot {
                    Slot::Bundle { node, .. } => {
                        block_at[l][*node].get_or_insert_with(Vec::new).push(u)
                    }
                    Slot::Pass { leaf } => pass_at[l][*leaf] = Some(u),
                }
            }
        }

        // Assemble layers; track calibration states for the ballast floor.
        let mut layers: Vec<ModuleLayer> = Vec::with_capacity(target_depth);
        let mut calib_states: Vec<Vec<f64>> = calib.points.clone();
        let mut blocks_by_layer: Vec<Vec<(NodeId, Vec<usize>)>> = Vec::with_capacity(target_depth);
        for l in 1..=target_depth {
            let prev_width = if l == 1 {
                n
            } else {
                layers[l - 2].rows.len()
            };
            let slots = &slot_layout[l - 1];
            let mut rows = vec![vec![0.0; prev_width]; slots.len()];
            let mut biases = vec![0.0; slots.len()];
            // The live path keeps every layer nonempty, so a dead block can
            // always lean on the activity of the rest of the layer.
            let mut needs_ballast: Vec<Option<NodeId>> = vec![None; slots.len()];
            for (u, slot) in slots.iter().enumerate() {
                match slot {
                    Slot::Bundle { node, row } => {
                        let bundle = bundles[*node].as_ref().unwrap();
                        let pulled = if l == 1 {
                            bundle[*row].clone()
                        } else {
                            let pid = parent[*node].unwrap();
                            let amap = bundle_map(bundles[pid].as_ref().unwrap());
                            map_hyperplane(&bundle[*row], &amap)
                                .map_err(|e| Error::BundleFailure(format!("node {node}: {e}")))?
                        };
                        if l == 1 {
                            rows[u].copy_from_slice(&pulled.normal);
                        } else {
                            let pid = parent[*node].unwrap();
                            let cols = block_at[l - 1][pid].as_ref().unwrap();
                            for (k, c) in cols.iter().enumerate() {
                                rows[u][*c] = pulled.normal[k];
                            }
                        }
                        biases[u] = pulled.offset;
                        if l >= 2 && pulled.offset > 0.0 {
                            needs_ballast[u] = Some(parent[*node].unwrap());
                        }
                    }
                    Slot::Pass { leaf } => {
                        let sources: Vec<usize> = if level[*leaf] == l - 1 && l - 1 >= 1 {
                            block_at[l - 1][*leaf].clone().unwrap()
                        } else {
                            vec![pass_at[l - 1][*leaf].unwrap()]
                        };
                        for s in sources {
                            rows[u][s] = 1.0;
                        }
                    }
                }
            }

            // Ballast pass: suppress positive biases on an all-zero parent
            // block by leaning on every other unit of the previous layer.
            let mut live_floor = if l >= 2 {
                calib_states
                    .iter()
                    .map(|s| s.iter().sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .min(filter_floor)
            } else {
                filter_floor
            };
            if !live_floor.is_finite() || live_floor <= 0.0 {
                live_floor = 1e-6;
            }
            for (u, ballast_parent) in needs_ballast.iter().enumerate() {
                if let Some(pid) = ballast_parent {
                    let lambda = 2.0 * (1.0 + biases[u]) / live_floor;
                    let own = block_at[l - 1][*pid].as_ref().unwrap();
                    for c in 0..prev_width {
                        if !own.contains(&c) {
                            rows[u][c] = -lambda;
                        }
                    }
                }
            }

            let layer = ModuleLayer { rows, biases };
            calib_states = calib_states
                .iter()
                .map(|s| forward_module_layer(&layer, s))
                .collect();
            let mut layer_blocks = Vec::new();
            for &id in &order {
                if l <= tree_depth && level[id] == l {
                    layer_blocks.push((id, block_at[l][id].clone().unwrap()));
                }
            }
            blocks_by_layer.push(layer_blocks);
            layers.push(layer);
        }

        let mut leaf_final = Vec::new();
        for &id in &order {
            if let Node::Leaf { leaf } = tree.nodes[id] {
                let units = if level[id] == target_depth {
                    block_at[target_depth][id].clone().unwrap()
                } else {
                    vec![pass_at[target_depth][id].unwrap()]
                };
                leaf_final.push((id, leaf, units));
            }
        }

        Ok(TreeModule {
            input_dim: n,
            layers,
            leaf_final,
            blocks: blocks_by_layer,
            planes,
            gamma_hat,
        })
    }

    /// Single-leaf tree: one always-on unit carried through every layer.
    fn build_constant(
        tree: &LinearDecisionTree,
        target_depth: usize,
        n: usize,
    ) -> Result<TreeModule> {
        let label = tree.leaf_label(tree.root).unwrap();
        let depth = target_depth.max(1);
        let mut layers = Vec::with_capacity(depth);
        layers.push(ModuleLayer {
            rows: vec![vec![0.0; n]],
            biases: vec![1.0],
        });
        for _ in 1..depth {
            layers.push(ModuleLayer {
                rows: vec![vec![1.0]],
                biases: vec![0.0],
            });
        }
        Ok(TreeModule {
            input_dim: n,
            layers,
            leaf_final: vec![(tree.root, label, vec![0])],
            blocks: vec![Vec::new(); depth],
            planes: Vec::new(),
            gamma_hat: f64::INFINITY,
        })
    }

    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn width(&self, layer: usize) -> usize {
        self.layers[layer].rows.len()
    }
}

fn forward_module_layer(layer: &ModuleLayer, state: &[f64]) -> Vec<f64> {
    layer
        .rows
        .iter()
        .zip(&layer.biases)
        .map(|(row, b)| (dot(row, state) + b).max(0.0))
        .collect()
}

fn on_split_node(tree: &LinearDecisionTree, x: &[f64], tol: f64) -> NodeId {
    let mut id = tree.root;
    loop {
        match &tree.nodes[id] {
            Node::Leaf { .. } => return id,
            Node::Internal { split, pos, zero } => match split.side(x, tol) {
                Err(_) => return id,
                Ok(crate::geometry::Side::Positive) => id = *pos,
                Ok(crate::geometry::Side::ZeroSide) => id = *zero,
            },
        }
    }
}

fn normalized_margin(planes: &[Hyperplane], points: &[Vec<f64>]) -> f64 {
    let mut gamma = f64::INFINITY;
    for p in points {
        for plane in planes {
            gamma = gamma.min(plane.distance(p));
        }
    }
    gamma
}

/// A compiled tree: the network plus everything verification needs.
#[derive(Debug, Clone)]
pub struct CompiledTree {
    pub net: Network,
    /// All input-space construction hyperplanes (splits and companions).
    pub planes: Vec<Hyperplane>,
    /// Smallest normalized calibration margin to any construction plane.
    pub gamma_hat: f64,
    pub tree_depth: usize,
    /// Final-hidden-layer unit indices per leaf, with the leaf label.
    pub leaf_final_units: Vec<(NodeId, u8, Vec<usize>)>,
    /// Per hidden layer: the bundle block unit ids per node at that level.
    pub bundle_blocks: Vec<Vec<(NodeId, Vec<usize>)>>,
}

impl CompiledTree {
    /// Exactly one leaf has positive final-layer units and every other
    /// leaf's units are exactly zero; returns the winning leaf.
    pub fn check_mutual_exclusivity(&self, x: &[f64]) -> Result<NodeId> {
        let trace = self.net.forward_trace(x)?;
        let penultimate = &trace[trace.len() - 2];
        check_exclusive_leaf(&self.leaf_final_units, penultimate)
    }
}

pub(crate) fn check_exclusive_leaf(
    leaf_units: &[(NodeId, u8, Vec<usize>)],
    state: &[f64],
) -> Result<NodeId> {
    let mut winner = None;
    for (id, _, units) in leaf_units {
        let positives = units.iter().filter(|u| state[**u] > 0.0).count();
        if positives == units.len() {
            if winner.is_some() {
                return Err(Error::InvariantViolation(
                    "two leaves active at the final hidden layer".into(),
                ));
            }
            winner = Some(*id);
        } else if positives > 0 || units.iter().any(|u| state[*u] != 0.0) {
            return Err(Error::InvariantViolation(format!(
                "leaf {id} is partially active at the final hidden layer"
            )));
        }
    }
    winner.ok_or_else(|| Error::InvariantViolation("no leaf active at the final hidden layer".into()))
}

fn module_into_layers(module: &TreeModule) -> Vec<Layer> {
    module
        .layers
        .iter()
        .map(|l| Layer::new(l.rows.clone(), l.biases.clone(), Activation::Relu))
        .collect()
}

/// Compile one two-class tree. The network has one hidden layer per tree
/// level plus a single-ReLU output; `forward(x) > 0` iff the tree labels
/// `x` with 1, exactly, for every calibration point.
pub fn compile_tree(tree: &LinearDecisionTree, calib: &LabeledPoints) -> Result<CompiledTree> {
    compile_tree_with_tol(tree, calib, DEFAULT_TOL)
}

pub fn compile_tree_with_tol(
    tree: &LinearDecisionTree,
    calib: &LabeledPoints,
    tol: f64,
) -> Result<CompiledTree> {
    let depth = tree.depth().max(1);
    let module = TreeModule::build(tree, calib, depth, tol)?;
    let mut layers = module_into_layers(&module);

    let final_width = module.width(module.depth() - 1);
    let mut out_row = vec![0.0; final_width];
    for (_, label, units) in &module.leaf_final {
        let w = if *label == 1 { 1.0 } else { -1.0 };
        for u in units {
            out_row[*u] = w;
        }
    }
    layers.push(Layer::new(vec![out_row], vec![0.0], Activation::Relu));

    let net = Network::new(
        module.input_dim,
        layers,
        format!("compiled-tree depth={} nodes={}", tree.depth(), tree.nodes.len()),
    )?;
    let compiled = CompiledTree {
        net,
        planes: module.planes,
        gamma_hat: module.gamma_hat,
        tree_depth: tree.depth(),
        leaf_final_units: module.leaf_final,
        bundle_blocks: module.blocks,
    };

    // Construction guarantees, checked rather than trusted.
    for (i, p) in calib.points.iter().enumerate() {
        let out = compiled.net.forward_scalar(p)?;
        let want = calib.labels[i] == 1;
        if (out > 0.0) != want {
            return Err(Error::BundleFailure(format!(
                "calibration point {i} disagrees with the tree after compilation"
            )));
        }
        compiled.check_mutual_exclusivity(p)?;
    }
    Ok(compiled)
}

/// A compiled one-vs-rest forest.
#[derive(Debug, Clone)]
pub struct CompiledForest {
    pub net: Network,
    pub planes: Vec<Hyperplane>,
    pub gamma_hat: f64,
    pub class_count: usize,
    /// Per class: leaf final-unit indices (into the last hidden layer).
    pub leaf_final_units: Vec<(usize, Vec<(NodeId, u8, Vec<usize>)>)>,
}

impl CompiledForest {
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let out = self.net.forward(x)?;
        Ok(crate::net::argmax_class(&out))
    }

    /// Mutual exclusivity within every class module at once.
    pub fn check_mutual_exclusivity(&self, x: &[f64]) -> Result<()> {
        let trace = self.net.forward_trace(x)?;
        let penultimate = &trace[trace.len() - 2];
        for (_, leaves) in &self.leaf_final_units {
            check_exclusive_leaf(leaves, penultimate)?;
        }
        Ok(())
    }
}

/// Compile a forest: per-class tree modules run in parallel (pass-through
/// padded to a common depth) and the output layer holds one ReLU per class,
/// wired exactly like the single-tree output. Prediction is the argmax,
/// ties toward the lowest class id.
pub fn compile_forest(forest: &Forest, calib: &ClassPoints) -> Result<CompiledForest> {
    compile_forest_with_tol(forest, calib, DEFAULT_TOL)
}

pub fn compile_forest_with_tol(
    forest: &Forest,
    calib: &ClassPoints,
    tol: f64,
) -> Result<CompiledForest> {
    forest.validate()?;
    if calib.points.len() != calib.classes.len() {
        return Err(Error::DimensionMismatch {
            expected: calib.points.len(),
            got: calib.classes.len(),
        });
    }
    if let Some(c) = calib.classes.iter().find(|c| **c >= forest.class_count) {
        return Err(Error::InconsistentDims(format!(
            "calibration class {c} out of range"
        )));
    }
    let n = forest.trees.first().map_or(0, |e| e.tree.input_dim);

    let target_depth = forest
        .trees
        .iter()
        .map(|e| e.tree.depth())
        .max()
        .unwrap_or(1)
        .max(1);

    let mut modules = Vec::with_capacity(forest.class_count);
    for class in 0..forest.class_count {
        let tree = forest.tree_for_class(class).unwrap();
        let labels: Vec<u8> = calib
            .classes
            .iter()
            .map(|c| u8::from(*c == class))
            .collect();
        let data = LabeledPoints::new(calib.points.clone(), labels)?;
        let module = TreeModule::build(tree, &data, target_depth, tol)?;
        modules.push(module);
    }

    // Block-diagonal merge, class-major.
    let mut layers = Vec::with_capacity(target_depth + 1);
    for l in 0..target_depth {
        let prev_offsets = layer_offsets(&modules, l.checked_sub(1));
        let prev_width = if l == 0 {
            n
        } else {
            modules.iter().map(|m| m.width(l - 1)).sum()
        };
        let mut rows = Vec::new();
        let mut biases = Vec::new();
        for (mi, module) in modules.iter().enumerate() {
            for (row, bias) in module.layers[l].rows.iter().zip(&module.layers[l].biases) {
                let mut full = vec![0.0; prev_width];
                let off = if l == 0 { 0 } else { prev_offsets[mi] };
                full[off..off + row.len()].copy_from_slice(row);
                rows.push(full);
                biases.push(*bias);
            }
        }
        layers.push(Layer::new(rows, biases, Activation::Relu));
    }

    let final_offsets = layer_offsets(&modules, Some(target_depth - 1));
    let final_width: usize = modules.iter().map(|m| m.width(target_depth - 1)).sum();
    let mut out_rows = Vec::with_capacity(forest.class_count);
    let mut leaf_final_units = Vec::new();
    for (class, module) in modules.iter().enumerate() {
        let mut row = vec![0.0; final_width];
        let mut leaves = Vec::new();
        for (id, label, units) in &module.leaf_final {
            let global: Vec<usize> = units.iter().map(|u| u + final_offsets[class]).collect();
            let w = if *label == 1 { 1.0 } else { -1.0 };
            for g in &global {
                row[*g] = w;
            }
            leaves.push((*id, *label, global));
        }
        out_rows.push(row);
        leaf_final_units.push((class, leaves));
    }
    layers.push(Layer::new(
        out_rows,
        vec![0.0; forest.class_count],
        Activation::Relu,
    ));

    let net = Network::new(
        n,
        layers,
        format!(
            "compiled-forest classes={} depth={target_depth}",
            forest.class_count
        ),
    )?;
    let planes: Vec<Hyperplane> = modules.iter().flat_map(|m| m.planes.clone()).collect();
    let gamma_hat = modules
        .iter()
        .map(|m| m.gamma_hat)
        .fold(f64::INFINITY, f64::min);
    let compiled = CompiledForest {
        net,
        planes,
        gamma_hat,
        class_count: forest.class_count,
        leaf_final_units,
    };

    for (i, p) in calib.points.iter().enumerate() {
        let predicted = compiled.predict(p)?;
        if predicted != calib.classes[i] {
            return Err(Error::BundleFailure(format!(
                "calibration point {i}: predicted class {predicted}, oracle {}",
                calib.classes[i]
            )));
        }
        compiled.check_mutual_exclusivity(p)?;
    }
    Ok(compiled)
}

fn layer_offsets(modules: &[TreeModule], layer: Option<usize>) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(modules.len());
    let mut acc = 0;
    for m in modules {
        offsets.push(acc);
        acc += match layer {
            Some(l) => m.width(l),
            None => 0,
        };
    }
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(normal: &[f64], offset: f64) -> Hyperplane {
        Hyperplane::new(normal.to_vec(), offset)
    }

    /// Depth-1 tree over 2-D: split x_0 > 0, positive side labeled 1.
    fn depth1_tree() -> LinearDecisionTree {
        LinearDecisionTree {
            input_dim: 2,
            root: 0,
            nodes: vec![
                Node::Internal {
                    split: plane(&[1.0, 0.0], 0.0),
                    pos: 1,
                    zero: 2,
                },
                Node::Leaf { leaf: 1 },
                Node::Leaf { leaf: 0 },
            ],
        }
    }

    fn depth1_calib() -> LabeledPoints {
        LabeledPoints::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1, 0]).unwrap()
    }

    /// The four-level shape: root 1; leaf 2 and internal 3; internal 4 and
    /// leaf 5 under 3; leaves 6 and 7 under 4.
    fn four_level_tree() -> LinearDecisionTree {
        LinearDecisionTree {
            input_dim: 2,
            root: 0,
            nodes: vec![
                Node::Internal {
                    split: plane(&[1.0, 0.0], 0.0), // node 1: x > 0
                    pos: 2,                         // node 3
                    zero: 1,                        // node 2 (leaf)
                },
                Node::Leaf { leaf: 0 }, // node 2
                Node::Internal {
                    split: plane(&[0.0, 1.0], 0.0), // node 3: y > 0
                    pos: 3,                         // node 4
                    zero: 4,                        // node 5 (leaf)
                },
                Node::Internal {
                    split: plane(&[1.0, 1.0], -1.5), // node 4
                    pos: 5,                          // node 6
                    zero: 6,                         // node 7
                },
                Node::Leaf { leaf: 1 }, // node 5
                Node::Leaf { leaf: 1 }, // node 6
                Node::Leaf { leaf: 0 }, // node 7
            ],
        }
    }

    fn four_level_calib() -> LabeledPoints {
        let points = vec![
            vec![-1.0, 0.3],
            vec![-2.0, -1.0],
            vec![1.0, -1.0],
            vec![0.5, -2.0],
            vec![2.0, 1.0],
            vec![1.0, 2.0],
            vec![0.2, 0.4],
            vec![0.3, 0.9],
        ];
        let tree = four_level_tree();
        let labels = points
            .iter()
            .map(|p| oracle_tree_predict(&tree, p, 1e-9).unwrap())
            .collect();
        LabeledPoints::new(points, labels).unwrap()
    }

    #[test]
    fn oracle_routes_depth1() {
        let tree = depth1_tree();
        assert_eq!(oracle_tree_predict(&tree, &[2.0, 5.0], 1e-9).unwrap(), 1);
        assert_eq!(oracle_tree_predict(&tree, &[-2.0, 5.0], 1e-9).unwrap(), 0);
        assert!(matches!(
            oracle_tree_predict(&tree, &[0.0, 5.0], 1e-9),
            Err(Error::OnHyperplane { .. })
        ));
    }

    #[test]
    fn compile_depth1_matches_worked_example() {
        let compiled = compile_tree(&depth1_tree(), &depth1_calib()).unwrap();
        // 1 hidden layer of 4 units (2 per child) plus the output ReLU.
        assert_eq!(compiled.net.layers.len(), 2);
        assert_eq!(compiled.net.layers[0].output_dim(), 4);
        assert_eq!(compiled.net.layers[1].output_dim(), 1);
        assert!(compiled.net.forward_scalar(&[1.0, 0.0]).unwrap() > 0.0);
        assert_eq!(compiled.net.forward_scalar(&[-1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn compile_rejects_on_split_calibration() {
        let calib = LabeledPoints::new(vec![vec![0.0, 1.0]], vec![1]).unwrap();
        assert!(matches!(
            compile_tree(&depth1_tree(), &calib),
            Err(Error::CalibrationOnSplit { index: 0, node: 0 })
        ));
    }

    #[test]
    fn compile_rejects_label_mismatch() {
        let calib = LabeledPoints::new(vec![vec![1.0, 0.0]], vec![0]).unwrap();
        assert!(matches!(
            compile_tree(&depth1_tree(), &calib),
            Err(Error::LabelMismatch { .. })
        ));
    }

    #[test]
    fn four_level_tree_layer_counts() {
        let compiled = compile_tree(&four_level_tree(), &four_level_calib()).unwrap();
        // Levels below the root: 3 hidden layers, then the output layer.
        let widths: Vec<usize> = compiled
            .net
            .layers
            .iter()
            .map(Layer::output_dim)
            .collect();
        assert_eq!(widths, vec![4, 5, 6, 1]);
        assert_eq!(compiled.tree_depth + 1, compiled.net.layers.len());
    }

    #[test]
    fn four_level_tree_agrees_with_oracle_everywhere_safe() {
        let tree = four_level_tree();
        let compiled = compile_tree(&tree, &four_level_calib()).unwrap();
        let delta = compiled.gamma_hat / 2.0;
        let mut checked = 0;
        for ix in -20..=20 {
            for iy in -20..=20 {
                let p = vec![ix as f64 * 0.17 + 0.013, iy as f64 * 0.19 - 0.007];
                if compiled.planes.iter().any(|h| h.distance(&p) <= delta) {
                    continue;
                }
                let want = oracle_tree_predict(&tree, &p, 1e-9).unwrap();
                let got = compiled.net.forward_scalar(&p).unwrap();
                assert_eq!(got > 0.0, want == 1, "disagree at {p:?}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn sign_flip_symmetry_of_sibling_blocks() {
        let tree = four_level_tree();
        let calib = four_level_calib();
        let compiled = compile_tree(&tree, &calib).unwrap();
        // Node 3's block (positive side of the root split) and node 2's leaf
        // block occupy layer 1; the bundle parameters must be exact negations.
        let layer = &compiled.net.layers[0];
        let blocks = &compiled.bundle_blocks[0];
        let pos_units = &blocks.iter().find(|(id, _)| *id == 2).unwrap().1;
        let zero_units = &blocks.iter().find(|(id, _)| *id == 1).unwrap().1;
        for (pu, zu) in pos_units.iter().zip(zero_units.iter()) {
            for c in 0..layer.weights[*pu].len() {
                assert_eq!(layer.weights[*pu][c], -layer.weights[*zu][c]);
            }
            assert_eq!(layer.biases[*pu], -layer.biases[*zu]);
        }
    }

    #[test]
    fn zero_propagation_for_routed_away_subtrees() {
        let tree = four_level_tree();
        let compiled = compile_tree(&tree, &four_level_calib()).unwrap();
        // A point on the zero side of the root: the entire node-3 subtree
        // (all of layers 1..3 except leaf 2's chain) must be exactly zero.
        let trace = compiled.net.forward_trace(&[-1.5, 0.4]).unwrap();
        let leaf2_chain: Vec<Vec<usize>> = vec![
            compiled.bundle_blocks[0]
                .iter()
                .find(|(id, _)| *id == 1)
                .unwrap()
                .1
                .clone(),
        ];
        for (l, state) in trace.iter().take(3).enumerate() {
            for (u, v) in state.iter().enumerate() {
                let on_live_chain = if l == 0 {
                    leaf2_chain[0].contains(&u)
                } else {
                    // pass-through unit of leaf 2 is the only live unit
                    *v > 0.0 && compiled.bundle_blocks[l].iter().all(|(_, us)| !us.contains(&u))
                };
                if !on_live_chain {
                    assert_eq!(*v, 0.0, "unit {u} of layer {l} should be dead");
                }
            }
        }
    }

    #[test]
    fn forest_of_three_classes_predicts_like_oracle() {
        // Three one-vs-rest trees over an axis-aligned 3-way partition.
        let t0 = LinearDecisionTree {
            input_dim: 2,
            root: 0,
            nodes: vec![
                Node::Internal {
                    split: plane(&[-1.0, 0.0], -1.0), // x < -1
                    pos: 1,
                    zero: 2,
                },
                Node::Leaf { leaf: 1 },
                Node::Leaf { leaf: 0 },
            ],
        };
        let t1 = LinearDecisionTree {
            input_dim: 2,
            root: 0,
            nodes: vec![
                Node::Internal {
                    split: plane(&[-1.0, 0.0], -1.0),
                    pos: 1,
                    zero: 2,
                },
                Node::Leaf { leaf: 0 },
                Node::Internal {
                    split: plane(&[1.0, 0.0], -1.0), // x > 1
                    pos: 3,
                    zero: 4,
                },
                Node::Leaf { leaf: 1 },
                Node::Leaf { leaf: 0 },
            ],
        };
        let t2 = LinearDecisionTree {
            input_dim: 2,
            root: 0,
            nodes: vec![
                Node::Internal {
                    split: plane(&[-1.0, 0.0], -1.0),
                    pos: 1,
                    zero: 2,
                },
                Node::Leaf { leaf: 0 },
                Node::Internal {
                    split: plane(&[1.0, 0.0], -1.0),
                    pos: 3,
                    zero: 4,
                },
                Node::Leaf { leaf: 0 },
                Node::Leaf { leaf: 1 },
            ],
        };
        let forest = Forest {
            class_count: 3,
            trees: vec![
                ForestEntry { class: 0, tree: t0 },
                ForestEntry { class: 1, tree: t1 },
                ForestEntry { class: 2, tree: t2 },
            ],
        };
        let points = vec![
            vec![-3.0, 0.5],
            vec![-2.0, -1.0],
            vec![2.0, 0.3],
            vec![3.0, -0.2],
            vec![0.0, 0.0],
            vec![0.5, 2.0],
        ];
        let classes: Vec<usize> = points
            .iter()
            .map(|p| oracle_forest_predict(&forest, p, 1e-9).unwrap())
            .collect();
        let calib = ClassPoints {
            points: points.clone(),
            classes: classes.clone(),
        };
        let compiled = compile_forest(&forest, &calib).unwrap();
        assert_eq!(compiled.net.output_dim(), 3);
        for (p, c) in points.iter().zip(&classes) {
            assert_eq!(compiled.predict(p).unwrap(), *c);
        }
    }

    #[test]
    fn forest_oracle_flags_ambiguity() {
        let both_claim = Forest {
            class_count: 2,
            trees: vec![
                ForestEntry {
                    class: 0,
                    tree: LinearDecisionTree {
                        input_dim: 1,
                        root: 0,
                        nodes: vec![Node::Leaf { leaf: 1 }],
                    },
                },
                ForestEntry {
                    class: 1,
                    tree: LinearDecisionTree {
                        input_dim: 1,
                        root: 0,
                        nodes: vec![Node::Leaf { leaf: 1 }],
                    },
                },
            ],
        };
        assert!(matches!(
            oracle_forest_predict(&both_claim, &[0.0], 1e-9),
            Err(Error::AmbiguousForest { claims: 2 })
        ));
    }

    #[test]
    fn tree_json_round_trip() {
        let tree = four_level_tree();
        let back = LinearDecisionTree::from_json(&tree.to_json()).unwrap();
        assert_eq!(tree, back);
    }
}
