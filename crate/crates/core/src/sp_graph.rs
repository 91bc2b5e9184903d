//! k-nn graphs over superpixel clouds and the GNN that refines superpixel
//! features.

use std::fmt::Write as _;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use sgseg_tensor::{Graph, Var};

use crate::error::{invalid, Error, Result};
use crate::nn::{Dense, DenseBnRelu, Group, ParamStore, Session};
use crate::superpixel::SuperpixelCloud;

/// Guard added under the square root of the centroid distance.
pub const DELTA_EPS: f64 = 1e-8;
pub const DEFAULT_K: usize = 20;

/// Which cloud columns enter the k-nn distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KnnFeatures {
    /// Coordinates, colors and deep features, unscaled.
    #[default]
    Full,
    /// Only the `(x, y)` centroid.
    Coords,
}

impl FromStr for KnnFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "coords" => Ok(Self::Coords),
            _ => Err(invalid(format!("unknown k-nn feature set `{s}`"))),
        }
    }
}

impl KnnFeatures {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Coords => "coords",
        }
    }
}

/// Directed k-nn graph. Edges are grouped by target node: the incoming
/// edges of node `i` are `edges[offsets[i]..offsets[i + 1]]`, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SpGraph {
    pub n_nodes: usize,
    pub k: usize,
    /// `(target i, source j)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub offsets: Vec<usize>,
}

impl SpGraph {
    /// Builds a graph from explicit per-node neighbor lists.
    pub fn from_neighbors(neighbors: &[Vec<usize>]) -> Result<Self> {
        let n = neighbors.len();
        let mut edges = Vec::new();
        let mut offsets = vec![0];
        let mut k = 0;
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if j >= n || j == i {
                    return Err(invalid(format!("bad neighbor {j} of node {i}")));
                }
                edges.push((i, j));
            }
            k = k.max(list.len());
            offsets.push(edges.len());
        }
        let distances = vec![0.0; edges.len()];
        Ok(Self {
            n_nodes: n,
            k,
            edges,
            distances,
            offsets,
        })
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges[self.offsets[i]..self.offsets[i + 1]].iter().map(|e| e.1)
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut lists = vec![Vec::new(); self.n_nodes];
        let mut dists = vec![Vec::new(); self.n_nodes];
        for i in 0..self.n_nodes {
            for e in self.offsets[i]..self.offsets[i + 1] {
                lists[perm[i]].push(perm[self.edges[e].1]);
                dists[perm[i]].push(self.distances[e]);
            }
        }
        let mut g = Self::from_neighbors(&lists).expect("permutation keeps the graph valid");
        g.distances = dists.concat();
        g.k = self.k;
        g
    }

    /// Edge list text: a `# nodes=N k=K` header and one `i j distance` line
    /// per edge.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("# nodes={} k={}\n", self.n_nodes, self.k);
        for (&(i, j), d) in self.edges.iter().zip(&self.distances) {
            writeln!(s, "{i} {j} {d}").unwrap();
        }
        s
    }
}

/// Connects every node to its `k` nearest distinct nodes in Euclidean
/// distance; equidistant candidates are taken in index order.
pub fn build_knn_graph(cloud: &SuperpixelCloud, k: usize, features: KnnFeatures) -> Result<SpGraph> {
    let n = cloud.len();
    if n < 2 {
        return Err(invalid(format!("k-nn graph needs at least 2 nodes, got {n}")));
    }
    if k < 1 {
        return Err(invalid("k must be at least 1"));
    }
    let cols = match features {
        KnnFeatures::Full => cloud.width(),
        KnnFeatures::Coords => 2,
    };
    let kk = k.min(n - 1);
    let mut lists = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n * kk);
    for i in 0..n {
        let fi = &cloud.feats.row(i)[..cols];
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2 = fi
                    .iter()
                    .zip(&cloud.feats.row(j)[..cols])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d2, j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(kk);
        distances.extend(cand.iter().map(|c| c.0.sqrt()));
        lists.push(cand.into_iter().map(|c| c.1).collect::<Vec<_>>());
    }
    let mut g = SpGraph::from_neighbors(&lists)?;
    g.distances = distances;
    g.k = k;
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Backbone {
    PointNet,
    Dgcnn,
    #[default]
    DiffGcn,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Self::PointNet => "pointnet",
            Self::Dgcnn => "dgcnn",
            Self::DiffGcn => "diffgcn",
        }
    }

    /// Width of the per-edge message relative to the node width.
    fn message_factor(self) -> usize {
        match self {
            Self::PointNet => 1,
            Self::Dgcnn => 2,
            Self::DiffGcn => 3,
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointnet" => Ok(Self::PointNet),
            "dgcnn" => Ok(Self::Dgcnn),
            "diffgcn" => Ok(Self::DiffGcn),
            _ => Err(invalid(format!("unknown backbone `{s}`"))),
        }
    }
}

/// DGCNN edge message `F_i (+) (F_i - F_j)` for every edge.
pub fn dgcnn_messages(g: &mut Graph, feats: Var, graph: &SpGraph) -> Result<Var> {
    let fi = g.gather_rows(feats, &graph.targets())?;
    let fj = g.gather_rows(feats, &graph.sources())?;
    let diff = g.sub(fi, fj)?;
    Ok(g.concat(&[fi, diff])?)
}

/// Directional derivative terms along x and y for every edge:
/// `(F_i - F_j) / Delta(i, j) * (x_i - x_j)` and likewise for y.
pub fn diffgcn_derivatives(g: &mut Graph, feats: Var, coords: Var, graph: &SpGraph) -> Result<(Var, Var)> {
    let (t, s) = (graph.targets(), graph.sources());
    let fi = g.gather_rows(feats, &t)?;
    let fj = g.gather_rows(feats, &s)?;
    let df = g.sub(fi, fj)?;
    let ci = g.gather_rows(coords, &t)?;
    let cj = g.gather_rows(coords, &s)?;
    let dc = g.sub(ci, cj)?;
    let dc2 = g.square(dc);
    let d2 = g.sum_cols(dc2);
    let guarded = g.add_scalar(d2, DELTA_EPS * DELTA_EPS);
    let inv_delta = g.powf(guarded, -0.5);
    let dir = g.mul_col(dc, inv_delta)?;
    let ux = g.slice_cols(dir, 0, 1)?;
    let uy = g.slice_cols(dir, 1, 1)?;
    let dx = g.mul_col(df, ux)?;
    let dy = g.mul_col(df, uy)?;
    Ok((dx, dy))
}

/// DiffGCN edge message `F_i (+) dx F (+) dy F`.
pub fn diffgcn_messages(g: &mut Graph, feats: Var, coords: Var, graph: &SpGraph) -> Result<Var> {
    let (dx, dy) = diffgcn_derivatives(g, feats, coords, graph)?;
    let fi = g.gather_rows(feats, &graph.targets())?;
    Ok(g.concat(&[fi, dx, dy])?)
}

/// One GNN layer: an MLP `h` (1x1 conv, BN, ReLU) applied per node
/// (PointNet) or per edge message followed by a max over incoming edges.
#[derive(Clone, Debug)]
pub struct GnnBlock {
    pub backbone: Backbone,
    h: DenseBnRelu,
}

impl GnnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        backbone: Backbone,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = DenseBnRelu::new(store, name, Group::Gnn, backbone.message_factor() * cin, cout, rng);
        Self { backbone, h }
    }

    pub fn forward(&self, s: &mut Session, feats: Var, coords: Var, graph: &SpGraph) -> Result<Var> {
        match self.backbone {
            Backbone::PointNet => self.h.forward(s, feats),
            Backbone::Dgcnn => {
                let m = dgcnn_messages(&mut s.graph, feats, graph)?;
                let h = self.h.forward(s, m)?;
                Ok(s.graph.segment_max(h, &graph.offsets)?)
            }
            Backbone::DiffGcn => {
                let m = diffgcn_messages(&mut s.graph, feats, coords, graph)?;
                let h = self.h.forward(s, m)?;
                Ok(s.graph.segment_max(h, &graph.offsets)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GnnArch {
    pub in_width: usize,
    pub width: usize,
    pub blocks: usize,
    pub head: [usize; 2],
    pub out: usize,
    pub backbone: Backbone,
}

impl GnnArch {
    /// Input width `2 + C + deep`, 64-wide blocks, L = 4, 64 outputs.
    pub fn new(in_width: usize, backbone: Backbone) -> Self {
        Self {
            in_width,
            width: 64,
            blocks: 4,
            head: [256, 128],
            out: 64,
            backbone,
        }
    }
}

/// Lift, `L` chained GNN blocks whose outputs are concatenated, then a
/// pointwise head down to the output width.
#[derive(Clone, Debug)]
pub struct Gnn {
    pub arch: GnnArch,
    lift: DenseBnRelu,
    blocks: Vec<GnnBlock>,
    head: Vec<DenseBnRelu>,
    out: Dense,
}

impl Gnn {
    pub fn new(store: &mut ParamStore, arch: GnnArch, rng: &mut ChaCha8Rng) -> Self {
        let lift = DenseBnRelu::new(store, "gnn.lift", Group::Gnn, arch.in_width, arch.width, rng);
        let blocks = (0..arch.blocks)
            .map(|b| GnnBlock::new(store, &format!("gnn.block{b}"), arch.backbone, arch.width, arch.width, rng))
            .collect();
        let head = vec![
            DenseBnRelu::new(store, "gnn.head0", Group::Gnn, arch.blocks * arch.width, arch.head[0], rng),
            DenseBnRelu::new(store, "gnn.head1", Group::Gnn, arch.head[0], arch.head[1], rng),
        ];
        let out = Dense::new(store, "gnn.out", Group::Gnn, arch.head[1], arch.out, true, rng);
        Self {
            arch,
            lift,
            blocks,
            head,
            out,
        }
    }

    /// Refines an `[N, in_width]` cloud whose first two columns are the
    /// centroid coordinates.
    pub fn forward(&self, s: &mut Session, cloud: Var, graph: &SpGraph) -> Result<Var> {
        let shape = s.graph.shape(cloud).to_vec();
        if shape.len() != 2 || shape[1] != self.arch.in_width {
            return Err(invalid(format!(
                "GNN expects an [N, {}] cloud, got {shape:?}",
                self.arch.in_width
            )));
        }
        if self.arch.backbone != Backbone::PointNet && graph.n_nodes != shape[0] {
            return Err(invalid("graph and cloud disagree on the node count"));
        }
        let coords = s.graph.slice_cols(cloud, 0, 2)?;
        let mut x = self.lift.forward(s, cloud)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(s, x, coords, graph)?;
            outs.push(x);
        }
        let mut y = s.graph.concat(&outs)?;
        for layer in &self.head {
            y = layer.forward(s, y)?;
        }
        self.out.forward(s, y)
    }
}

/// Anisotropic total variation of an `[H, W, d]` map.
pub fn tv_loss(g: &mut Graph, m: Var) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    if shape.len() != 3 {
        return Err(invalid("tv loss expects an [H, W, d] map"));
    }
    let hw = (shape[0] * shape[1]) as f64;
    let dx = g.diff_x(m)?;
    let dy = g.diff_y(m)?;
    let ax = g.abs(dx);
    let ay = g.abs(dy);
    let sx = g.sum(ax);
    let sy = g.sum(ay);
    let s = g.add(sx, sy)?;
    Ok(g.scale(s, 1.0 / hw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sgseg_tensor::Tensor;

    fn scalar_cloud(values: &[f64]) -> SuperpixelCloud {
        SuperpixelCloud {
            feats: Tensor::new(&[values.len(), 1], values.to_vec()).unwrap(),
            mass: vec![1.0; values.len()],
        }
    }

    #[test]
    fn collinear_points_k1() {
        let g = build_knn_graph(&scalar_cloud(&[0.0, 1.0, 3.0]), 1, KnnFeatures::Full).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0), (2, 1)]);
        assert_eq!(g.distances, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn small_clouds_become_complete() {
        let g = build_knn_graph(&scalar_cloud(&[0.0, 5.0, 2.0]), 7, KnnFeatures::Full).unwrap();
        assert_eq!(g.edges.len(), 6);
        assert!(g.edges.iter().all(|(i, j)| i != j));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let g = build_knn_graph(&scalar_cloud(&[0.0, -1.0, 1.0]), 1, KnnFeatures::Full).unwrap();
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn knn_rejects_degenerate_input() {
        assert!(build_knn_graph(&scalar_cloud(&[0.0]), 1, KnnFeatures::Full).is_err());
        assert!(build_knn_graph(&scalar_cloud(&[0.0, 1.0]), 0, KnnFeatures::Full).is_err());
    }

    #[test]
    fn edge_list_format() {
        let g = build_knn_graph(&scalar_cloud(&[0.0, 1.0, 3.0]), 1, KnnFeatures::Full).unwrap();
        assert_eq!(g.to_edge_list(), "# nodes=3 k=1\n0 1 1\n1 0 1\n2 1 2\n");
    }

    #[test]
    fn tv_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[3, 4, 2], 0.3));
        let v = tv_loss(&mut g, c).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
        let m = g.constant(Tensor::new(&[1, 2, 1], vec![0.0, 3.0]).unwrap());
        let v = tv_loss(&mut g, m).unwrap();
        assert_eq!(g.value(v).item(), 1.5);
    }

    #[test]
    fn diffgcn_hand_example() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let graph = SpGraph::from_neighbors(&[vec![1], vec![0]]).unwrap();
        let (dx, dy) = diffgcn_derivatives(&mut g, f, c, &graph).unwrap();
        assert!((g.value(dx).data()[0] - 2.0).abs() < 1e-15);
        assert_eq!(g.value(dy).data()[0], 0.0);
    }

    #[test]
    fn coincident_centroids_give_zero_derivatives() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let graph = SpGraph::from_neighbors(&[vec![1], vec![0]]).unwrap();
        let (dx, dy) = diffgcn_derivatives(&mut g, f, c, &graph).unwrap();
        assert!(g.value(dx).data().iter().chain(g.value(dy).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_nodes_output_zero() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let graph = SpGraph::from_neighbors(&[vec![1], vec![]]).unwrap();
        let m = dgcnn_messages(&mut g, f, &graph).unwrap();
        let out = g.segment_max(m, &graph.offsets).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, -1.0, 0.0, 0.0]);
    }
}
