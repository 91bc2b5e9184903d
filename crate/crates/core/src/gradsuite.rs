//! Finite-difference gradient checks of every loss and every network block
//! on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

use sgseg_tensor::{check_gradients, GradCheckReport, Graph, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ConvSpec, DenseBnRelu, Group, Mode, ParamStore, Session};
use crate::seg_head::{cnn_recon_loss, mi_loss, Rasterization, ResidualBlock, SegArch, SegCnn};
use crate::sp_graph::{build_knn_graph, tv_loss, Backbone, Gnn, GnnArch, GnnBlock, KnnFeatures, SpGraph};
use crate::superpixel::{
    clustering_loss, edge_loss, pool_superpixel_features, project_to_image, recon_loss, smoothness_loss,
    soft_superpixelate, Spnn, SpnnArch, SuperpixelCloud, CLUSTERING_LAMBDA, SMOOTHNESS_SIGMA,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Fixed pseudo-random linear functional, so that vector-valued outputs
/// reduce to a scalar without symmetric cancellation.
fn contract(g: &mut Graph, out: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = random(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// `check_gradients` for closures returning the crate error type.
fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    let failure = RefCell::new(None);
    let report = check_gradients(inputs, STEP, |g, v| {
        f(g, v).map_err(|e| {
            let msg = e.to_string();
            failure.borrow_mut().get_or_insert(e);
            TensorError::Invalid { op: "gradcheck", msg }
        })
    });
    match (report, failure.into_inner()) {
        (_, Some(e)) => Err(e),
        (r, None) => r.map_err(Error::from),
    }
}

/// Checks a block with respect to its input and every parameter in `store`.
fn block_check(
    store: &ParamStore,
    input: Tensor,
    forward: impl Fn(&mut Session, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut inputs = vec![input];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    check(&inputs, |g, vars| {
        let mut s = Session::with_graph(std::mem::take(g), store, Mode::Train);
        for (i, &v) in vars[1..].iter().enumerate() {
            s.bind(crate::nn::ParamId::from_index(i), v);
        }
        let out = forward(&mut s, vars[0]);
        *g = s.into_graph();
        contract(g, out?)
    })
}

fn probs(g: &mut Graph, logits: Var) -> Result<Var> {
    Ok(g.softmax(logits, 2)?)
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Result<SpGraph> {
    let cloud = SuperpixelCloud {
        feats: random(rng, &[n, 3], 0.0, 1.0),
        mass: vec![1.0; n],
    };
    build_knn_graph(&cloud, k, KnnFeatures::Full)
}

/// Runs every check with inputs drawn from `seed`.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, report| out.push(SuiteEntry { name, report });

    let (h, w, n, c) = (4, 4, 3, 3);
    let logits = random(&mut rng, &[h, w, n], -2.0, 2.0);
    let image = random(&mut rng, &[h, w, c], 0.0, 1.0);
    let recon = random(&mut rng, &[h, w, c], 0.0, 1.0);

    push(
        "clustering_loss",
        check(&[logits.clone()], |g, v| {
            let p = probs(g, v[0])?;
            clustering_loss(g, p, CLUSTERING_LAMBDA)
        })?,
    );
    push(
        "smoothness_loss",
        check(&[logits.clone(), image.clone()], |g, v| {
            let p = probs(g, v[0])?;
            smoothness_loss(g, p, v[1], SMOOTHNESS_SIGMA)
        })?,
    );
    push(
        "recon_loss",
        check(&[image.clone(), recon.clone(), logits.clone()], |g, v| {
            let p = probs(g, v[2])?;
            let sp = soft_superpixelate(g, v[0], p)?;
            recon_loss(g, v[0], v[1], sp)
        })?,
    );
    push(
        "edge_loss",
        check(&[image.clone(), recon.clone(), logits.clone()], |g, v| {
            let p = probs(g, v[2])?;
            let sp = soft_superpixelate(g, v[0], p)?;
            edge_loss(g, v[0], v[1], sp)
        })?,
    );
    push(
        "soft_superpixelate",
        check(&[image.clone(), logits.clone()], |g, v| {
            let p = probs(g, v[1])?;
            let sp = soft_superpixelate(g, v[0], p)?;
            contract(g, sp)
        })?,
    );
    push(
        "pool_superpixel_features",
        check(&[image.clone(), logits.clone()], |g, v| {
            let p = probs(g, v[1])?;
            let pooled = pool_superpixel_features(g, v[0], p)?;
            contract(g, pooled.feats)
        })?,
    );
    let feats = random(&mut rng, &[n, 2], -1.0, 1.0);
    push(
        "project_to_image",
        check(&[logits.clone(), feats], |g, v| {
            let p = probs(g, v[0])?;
            let m = project_to_image(g, p, v[1])?;
            contract(g, m)
        })?,
    );
    // Keep differences away from the kink of |x|.
    let tv_in = Tensor::from_fn(&[h, w, 2], |i| i as f64 * 0.37 + rng.gen_range(0.0..0.1));
    push("tv_loss", check(&[tv_in], |g, v| tv_loss(g, v[0]))?);
    let l2 = random(&mut rng, &[h, w, 3], -2.0, 2.0);
    push(
        "mi_loss",
        check(&[logits.clone(), l2], |g, v| {
            let a = probs(g, v[0])?;
            let b = probs(g, v[1])?;
            mi_loss(g, a, b)
        })?,
    );
    let recon2 = random(&mut rng, &[h, w, c], 0.0, 1.0);
    push(
        "cnn_recon_loss",
        check(&[image.clone(), recon.clone(), recon2], |g, v| {
            cnn_recon_loss(g, v[0], v[1], v[2])
        })?,
    );

    // Network blocks, with respect to inputs and parameters.
    let x = random(&mut rng, &[5, 5, 2], -1.0, 1.0);
    let mut store = ParamStore::new();
    let layer = ConvBnRelu::new(&mut store, "b", Group::Spnn, ConvSpec::new(3, 2, 3).dilation(2), &mut rng);
    push("conv_bn_relu", block_check(&store, x, |s, v| layer.forward(s, v))?);

    let cloud = random(&mut rng, &[5, 3], -1.0, 1.0);
    let mut store = ParamStore::new();
    let layer = DenseBnRelu::new(&mut store, "b", Group::Gnn, 3, 4, &mut rng);
    push("dense_bn_relu", block_check(&store, cloud.clone(), |s, v| layer.forward(s, v))?);

    let graph = random_graph(&mut rng, 5, 2)?;
    for (name, backbone) in [
        ("pointnet_block", Backbone::PointNet),
        ("dgcnn_block", Backbone::Dgcnn),
        ("diffgcn_block", Backbone::DiffGcn),
    ] {
        let mut store = ParamStore::new();
        let block = GnnBlock::new(&mut store, "b", backbone, 3, 4, &mut rng);
        push(
            name,
            block_check(&store, cloud.clone(), |s, v| {
                let coords = s.graph.slice_cols(v, 0, 2)?;
                block.forward(s, v, coords, &graph)
            })?,
        );
    }

    let mut store = ParamStore::new();
    let mut arch = GnnArch::new(3, Backbone::DiffGcn);
    (arch.width, arch.head, arch.out) = (3, [4, 3], 2);
    let gnn = Gnn::new(&mut store, arch, &mut rng);
    push("gnn", block_check(&store, cloud, |s, v| gnn.forward(s, v, &graph))?);

    let x = random(&mut rng, &[4, 4, 2], -1.0, 1.0);
    for (name, r) in [("residual_block_r1", Rasterization::R1), ("residual_block_r2", Rasterization::R2)] {
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "b", 2, 3, &mut rng)?;
        push(name, block_check(&store, x.clone(), |s, v| block.forward(s, v, r))?);
    }

    let mut store = ParamStore::new();
    let mut arch = SegArch::new(2, 2);
    (arch.feature_channels, arch.stem, arch.blocks) = (1, 2, [2, 2, 3, 3]);
    let cnn = SegCnn::new(&mut store, arch, &mut rng)?;
    let x = random(&mut rng, &[6, 6, 3], 0.0, 1.0);
    push(
        "segmentation_cnn",
        block_check(&store, x, |s, v| {
            let o = cnn.forward(s, v, Rasterization::R1)?;
            Ok(s.graph.concat(&[o.probs, o.recon])?)
        })?,
    );

    // The smallest image the superpixel network accepts.
    let mut store = ParamStore::new();
    let mut arch = SpnnArch::new(2, 3);
    (arch.widths, arch.fuse) = ([2, 2, 3, 3], 2);
    let spnn = Spnn::new(&mut store, arch, &mut rng);
    let x = random(&mut rng, &[8, 8, 2], 0.0, 1.0);
    push(
        "superpixel_network",
        block_check(&store, x, |s, v| {
            let o = spnn.forward(s, v)?;
            Ok(s.graph.concat(&[o.assignment, o.recon, o.deep_features])?)
        })?,
    );

    Ok(out)
}
