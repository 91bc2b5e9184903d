//! The full per-image pipeline: superpixels, graph refinement, projection
//! and rasterized segmentation, together with the combined objective.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgseg_tensor::{Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::nn::{Group, Mode, ParamStore, Session};
use crate::seg_head::{cnn_objective, Rasterization, SegArch, SegCnn};
use crate::sp_graph::{build_knn_graph, tv_loss, Backbone, Gnn, GnnArch, KnnFeatures, SpGraph};
use crate::superpixel::{
    coordinate_planes, pool_superpixel_features, project_to_image, spnn_objective, AssignmentMap, Spnn, SpnnArch,
    SpnnLossWeights, SuperpixelCloud,
};

/// Which parts of the pipeline are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// The segmentation CNN on the raw image alone.
    CnnOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::CnnOnly => "cnn-only",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "cnn-only" => Ok(Self::CnnOnly),
            _ => Err(invalid(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArch {
    pub image_channels: usize,
    pub classes: usize,
    pub n_superpixels: usize,
    pub knn_k: usize,
    pub knn_features: KnnFeatures,
    pub backbone: Backbone,
    /// Every hidden width is divided by this (1 keeps the reference widths).
    pub width_divisor: usize,
    pub variant: Variant,
    pub weights: SpnnLossWeights,
}

impl ModelArch {
    fn scaled(&self, w: usize) -> usize {
        (w / self.width_divisor.max(1)).max(1)
    }

    pub fn spnn_arch(&self) -> SpnnArch {
        let mut a = SpnnArch::new(self.image_channels, self.n_superpixels);
        a.widths = a.widths.map(|w| self.scaled(w));
        a.fuse = self.scaled(a.fuse);
        a
    }

    pub fn gnn_arch(&self) -> GnnArch {
        let in_width = 2 + self.image_channels + self.spnn_arch().fuse;
        let mut a = GnnArch::new(in_width, self.backbone);
        a.width = self.scaled(a.width);
        a.head = a.head.map(|w| self.scaled(w));
        a.out = self.scaled(a.out);
        a
    }

    pub fn seg_arch(&self) -> SegArch {
        let mut a = SegArch::new(self.image_channels, self.classes);
        a.feature_channels = match self.variant {
            Variant::Full => self.gnn_arch().out,
            Variant::CnnOnly => 0,
        };
        a.stem = self.scaled(a.stem);
        a.blocks = a.blocks.map(|w| self.scaled(w));
        a
    }
}

/// Which objective a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// The superpixel losses alone.
    Spnn,
    /// Graph and CNN losses with the superpixel network frozen.
    Segmentation,
    /// Everything jointly.
    Joint,
}

/// Scalar loss components of one forward pass. Absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub spnn: f64,
    pub clustering: f64,
    pub smoothness: f64,
    pub recon: f64,
    pub edge: f64,
    pub tv: f64,
    pub cnn: f64,
    pub mi: f64,
    pub cnn_recon: f64,
    pub total: f64,
}

impl LossParts {
    pub const FIELDS: [&'static str; 10] = [
        "total",
        "spnn",
        "clustering",
        "smoothness",
        "recon",
        "edge",
        "tv",
        "cnn",
        "mi",
        "cnn_recon",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.total,
            self.spnn,
            self.clustering,
            self.smoothness,
            self.recon,
            self.edge,
            self.tv,
            self.cnn,
            self.mi,
            self.cnn_recon,
        ]
    }

    pub fn accumulate(&mut self, o: &LossParts) {
        self.spnn += o.spnn;
        self.clustering += o.clustering;
        self.smoothness += o.smoothness;
        self.recon += o.recon;
        self.edge += o.edge;
        self.tv += o.tv;
        self.cnn += o.cnn;
        self.mi += o.mi;
        self.cnn_recon += o.cnn_recon;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        let v = self.values().map(|x| x * s);
        LossParts {
            total: v[0],
            spnn: v[1],
            clustering: v[2],
            smoothness: v[3],
            recon: v[4],
            edge: v[5],
            tv: v[6],
            cnn: v[7],
            mi: v[8],
            cnn_recon: v[9],
        }
    }
}

/// Result of running the pipeline on one image inside a session.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Scalar objective for the requested phase.
    pub total: Var,
    pub parts: LossParts,
    pub assignment: Option<Var>,
    pub cloud: Option<SuperpixelCloud>,
    pub graph: Option<SpGraph>,
    /// Class probabilities under r1 and r2 (absent in the SPNN phase).
    pub probs: Option<[Var; 2]>,
}

/// Prediction for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[H, W, k]` mean of the two rasterizations' probabilities.
    pub probs: Tensor,
    /// Row-major argmax class per pixel.
    pub labels: Vec<usize>,
    pub assignment: Option<AssignmentMap>,
    pub cloud: Option<SuperpixelCloud>,
    pub graph: Option<SpGraph>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ModelArch,
    pub spnn: Option<Spnn>,
    pub gnn: Option<Gnn>,
    pub cnn: SegCnn,
}

impl Model {
    /// Builds the networks and registers their freshly initialized
    /// parameters in `store`.
    pub fn new(store: &mut ParamStore, arch: ModelArch, seed: u64) -> Result<Self> {
        if arch.image_channels == 0 {
            return Err(invalid("images need at least one channel"));
        }
        if arch.n_superpixels < 2 {
            return Err(invalid("need at least 2 superpixels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spnn, gnn) = match arch.variant {
            Variant::Full => (
                Some(Spnn::new(store, arch.spnn_arch(), &mut rng)),
                Some(Gnn::new(store, arch.gnn_arch(), &mut rng)),
            ),
            Variant::CnnOnly => (None, None),
        };
        let cnn = SegCnn::new(store, arch.seg_arch(), &mut rng)?;
        Ok(Self { arch, spnn, gnn, cnn })
    }

    /// Records the pipeline for one `[H, W, C]` image on the session graph.
    pub fn forward(&self, s: &mut Session, image: &Tensor, phase: Phase) -> Result<PipelineOutput> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != self.arch.image_channels {
            return Err(invalid(format!(
                "expected an [H, W, {}] image, got {shape:?}",
                self.arch.image_channels
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        let img = s.graph.constant(image.clone());
        let mut parts = LossParts::default();
        let mut terms = Vec::new();
        let mut out = PipelineOutput {
            total: img,
            parts,
            assignment: None,
            cloud: None,
            graph: None,
            probs: None,
        };

        let cnn_input = match (&self.spnn, &self.gnn) {
            (Some(spnn), Some(gnn)) => {
                let sp = spnn.forward(s, img)?;
                out.assignment = Some(sp.assignment);
                if phase != Phase::Segmentation {
                    let (l, _) = spnn_objective(&mut s.graph, img, &sp, self.arch.weights)?;
                    let g = &s.graph;
                    parts.spnn = g.value(l.total).item();
                    parts.clustering = g.value(l.clustering).item();
                    parts.smoothness = g.value(l.smoothness).item();
                    parts.recon = g.value(l.recon).item();
                    parts.edge = g.value(l.edge).item();
                    terms.push(l.total);
                }
                if phase == Phase::Spnn {
                    None
                } else {
                    let coords = s.graph.constant(coordinate_planes(h, w));
                    let feats = s.graph.concat(&[coords, img, sp.deep_features])?;
                    let pooled = pool_superpixel_features(&mut s.graph, feats, sp.assignment)?;
                    let cloud = pooled.to_cloud(&s.graph);
                    let graph = build_knn_graph(&cloud, self.arch.knn_k, self.arch.knn_features)?;
                    let refined = gnn.forward(s, pooled.feats, &graph)?;
                    let projected = project_to_image(&mut s.graph, sp.assignment, refined)?;
                    let tv = tv_loss(&mut s.graph, projected)?;
                    parts.tv = s.graph.value(tv).item();
                    terms.push(tv);
                    out.cloud = Some(cloud);
                    out.graph = Some(graph);
                    Some(s.graph.concat(&[img, projected])?)
                }
            }
            _ => (phase != Phase::Spnn).then_some(img),
        };

        if let Some(x) = cnn_input {
            let r1 = self.cnn.forward(s, x, Rasterization::R1)?;
            let r2 = self.cnn.forward(s, x, Rasterization::R2)?;
            let l = cnn_objective(&mut s.graph, img, &r1, &r2)?;
            parts.cnn = s.graph.value(l.total).item();
            parts.mi = s.graph.value(l.mi).item();
            parts.cnn_recon = s.graph.value(l.recon).item();
            terms.push(l.total);
            out.probs = Some([r1.probs, r2.probs]);
        }

        let Some((&first, rest)) = terms.split_first() else {
            return Err(invalid(format!("{:?} phase has no objective for this variant", phase)));
        };
        let mut total = first;
        for &t in rest {
            total = s.graph.add(total, t)?;
        }
        parts.total = s.graph.value(total).item();
        out.total = total;
        out.parts = parts;
        Ok(out)
    }

    /// Segments one image with batch norms in evaluation mode.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Prediction> {
        let mut s = Session::new(store, Mode::Eval);
        let out = self.forward(&mut s, image, Phase::Joint)?;
        let [p1, p2] = out.probs.expect("joint phase runs the CNN");
        let a = s.graph.value(p1);
        let b = s.graph.value(p2);
        let probs = Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect(),
        )?;
        let labels = probs.argmax_rows();
        let assignment = match out.assignment {
            Some(v) => Some(AssignmentMap::new(s.graph.value(v).clone())?),
            None => None,
        };
        Ok(Prediction {
            probs,
            labels,
            assignment,
            cloud: out.cloud,
            graph: out.graph,
        })
    }

    /// Soft superpixel assignment of one image (evaluation mode).
    pub fn superpixels(&self, store: &ParamStore, image: &Tensor) -> Result<AssignmentMap> {
        let spnn = self
            .spnn
            .as_ref()
            .ok_or_else(|| invalid("this model variant has no superpixel network"))?;
        let mut s = Session::new(store, Mode::Eval);
        let img = s.graph.constant(image.clone());
        let out = spnn.forward(&mut s, img)?;
        AssignmentMap::new(s.graph.value(out.assignment).clone())
    }

    /// Parameter groups that a phase leaves untouched.
    pub fn frozen_groups(phase: Phase) -> &'static [Group] {
        match phase {
            Phase::Spnn => &[Group::Gnn, Group::Cnn],
            Phase::Segmentation => &[Group::Spnn],
            Phase::Joint => &[],
        }
    }
}
