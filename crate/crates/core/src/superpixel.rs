//! Superpixel extraction network, (soft) superpixelation and the losses that
//! train the network without labels.

use rand_chacha::ChaCha8Rng;
use sgseg_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::nn::{Conv, ConvBnRelu, ConvSpec, Group, ParamStore, Session};

/// Weight of the superpixel-balance term of the clustering loss.
pub const CLUSTERING_LAMBDA: f64 = 2.0;
/// Edge sensitivity of the smoothness prior.
pub const SMOOTHNESS_SIGMA: f64 = 10.0;
/// Guard for weighted-mean denominators (empty superpixels).
pub const MASS_EPS: f64 = 1e-8;
/// Smallest image side the dilated stack accepts.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Per-pixel probability distribution over `N` superpixels, `[H, W, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap(Tensor);

impl AssignmentMap {
    /// Validates nonnegativity and unit row sums (to 1e-6).
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 3 {
            return Err(invalid(format!("assignment map must be [H, W, N], got {:?}", probs.shape())));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(invalid(format!("pixel {r} has a negative or non-finite probability")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("pixel {r} probabilities sum to {s}")));
            }
        }
        Ok(Self(probs))
    }

    /// One-hot map from a hard label per pixel.
    pub fn one_hot(h: usize, w: usize, n: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != h * w || labels.iter().any(|&l| l >= n) {
            return Err(invalid("labels must cover every pixel and lie in 0..N"));
        }
        let mut t = Tensor::zeros(&[h, w, n]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[i * n + l] = 1.0;
        }
        Ok(Self(t))
    }

    pub fn uniform(h: usize, w: usize, n: usize) -> Self {
        Self(Tensor::full(&[h, w, n], 1.0 / n as f64))
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.cols()
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    /// Argmax superpixel of every pixel; ties go to the lower index.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.0.argmax_rows()
    }
}

/// Pooled superpixel features: columns `[x, y, color.., deep..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelCloud {
    pub feats: Tensor,
    /// Summed assignment probability of every superpixel.
    pub mass: Vec<f64>,
}

impl SuperpixelCloud {
    pub fn len(&self) -> usize {
        self.feats.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.feats.cols()
    }

    pub fn centroid(&self, s: usize) -> (f64, f64) {
        let row = self.feats.row(s);
        (row[0], row[1])
    }
}

/// `[H, W, 2]` planes holding the normalized `(x, y)` pixel coordinates.
pub fn coordinate_planes(h: usize, w: usize) -> Tensor {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut t = Tensor::zeros(&[h, w, 2]);
    for y in 0..h {
        for x in 0..w {
            t.set(&[y, x, 0], norm(x, w));
            t.set(&[y, x, 1], norm(y, h));
        }
    }
    t
}

fn check_same_extent(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 3 || b.len() != 3 || a[..2] != b[..2] {
        return Err(invalid(format!("spatial extents differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Replaces every pixel by the mean color of the pixels sharing its argmax
/// superpixel. Not differentiable.
pub fn hard_superpixelate(image: &Tensor, p: &AssignmentMap) -> Result<Tensor> {
    check_same_extent(image.shape(), p.probs().shape())?;
    let one_hot = AssignmentMap::one_hot(p.height(), p.width(), p.n(), &p.hard_labels())?;
    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let q = g.constant(one_hot.into_tensor());
    let out = soft_superpixelate(&mut g, img, q)?;
    Ok(g.value(out).clone())
}

/// Graph handles of a pooled superpixel cloud.
#[derive(Clone, Copy, Debug)]
pub struct PooledCloud {
    /// `[N, c]` mass-weighted feature means.
    pub feats: Var,
    /// `[N]` summed assignment probabilities.
    pub mass: Var,
}

impl PooledCloud {
    pub fn to_cloud(self, g: &Graph) -> SuperpixelCloud {
        SuperpixelCloud {
            feats: g.value(self.feats).clone(),
            mass: g.value(self.mass).data().to_vec(),
        }
    }
}

fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    Ok(g.reshape(x, &[s[0] * s[1], s[2]])?)
}

/// Mass-weighted mean of the `[H, W, c]` map `feats` under every superpixel
/// of the `[H, W, N]` map `p`.
pub fn pool_superpixel_features(g: &mut Graph, feats: Var, p: Var) -> Result<PooledCloud> {
    check_same_extent(g.shape(feats), g.shape(p))?;
    let f2 = flatten(g, feats)?;
    let p2 = flatten(g, p)?;
    let pt = g.transpose(p2)?;
    let num = g.matmul(pt, f2)?;
    let mass = g.sum_rows(p2);
    let guarded = g.clamp_min(mass, MASS_EPS);
    let inv = g.powf(guarded, -1.0);
    let feats = g.mul_col(num, inv)?;
    Ok(PooledCloud { feats, mass })
}

/// Projects `[N, d]` superpixel features back to an `[H, W, d]` map through
/// the soft assignment `p`.
pub fn project_to_image(g: &mut Graph, p: Var, feats: Var) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 3 || g.shape(feats).len() != 2 || g.shape(feats)[0] != shape[2] {
        return Err(invalid(format!(
            "cannot project {:?} superpixel features through {:?}",
            g.shape(feats),
            shape
        )));
    }
    let d = g.shape(feats)[1];
    let p2 = flatten(g, p)?;
    let m = g.matmul(p2, feats)?;
    Ok(g.reshape(m, &[shape[0], shape[1], d])?)
}

/// Soft-superpixelated image: each pixel becomes the assignment-weighted
/// blend of superpixel mean colors.
pub fn soft_superpixelate(g: &mut Graph, image: Var, p: Var) -> Result<Var> {
    let pooled = pool_superpixel_features(g, image, p)?;
    project_to_image(g, p, pooled.feats)
}

/// Pixel entropy minus `lambda` times the entropy of the mean assignment.
pub fn clustering_loss(g: &mut Graph, p: Var, lambda: f64) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 3 {
        return Err(invalid("clustering loss expects an [H, W, N] map"));
    }
    let hw = (shape[0] * shape[1]) as f64;
    let plogp = g.xlogx(p);
    let s = g.sum(plogp);
    let pixel_entropy = g.scale(s, -1.0 / hw);
    let p2 = flatten(g, p)?;
    let colsum = g.sum_rows(p2);
    let mean = g.scale(colsum, 1.0 / hw);
    let mlogm = g.xlogx(mean);
    let neg_entropy = g.sum(mlogm);
    let balance = g.scale(neg_entropy, lambda);
    Ok(g.add(pixel_entropy, balance)?)
}

/// Edge-aware smoothness prior on the assignment map.
pub fn smoothness_loss(g: &mut Graph, p: Var, image: Var, sigma: f64) -> Result<Var> {
    check_same_extent(g.shape(p), g.shape(image))?;
    let hw = (g.shape(p)[0] * g.shape(p)[1]) as f64;
    let mut terms = Vec::with_capacity(2);
    for axis in 0..2 {
        let (dp, di) = if axis == 0 {
            (g.diff_x(p)?, g.diff_x(image)?)
        } else {
            (g.diff_y(p)?, g.diff_y(image)?)
        };
        let adp = g.abs(dp);
        let l1 = g.sum_cols(adp);
        let di2 = g.square(di);
        let n2 = g.sum_cols(di2);
        let e = g.scale(n2, -1.0 / sigma);
        let wgt = g.exp(e);
        let t = g.mul(l1, wgt)?;
        terms.push(g.sum(t));
    }
    let s = g.add(terms[0], terms[1])?;
    Ok(g.scale(s, 1.0 / hw))
}

fn sq_dist_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d2 = g.square(d);
    Ok(g.sum(d2))
}

/// Reconstruction loss of the extra output channels and of the
/// soft-superpixelated image, normalized by `C * H * W`.
pub fn recon_loss(g: &mut Graph, image: Var, recon: Var, softsp: Var) -> Result<Var> {
    let n = g.value(image).numel() as f64;
    let a = sq_dist_sum(g, image, recon)?;
    let b = sq_dist_sum(g, image, softsp)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 1.0 / n))
}

fn laplacian_kernel(channels: usize) -> Tensor {
    let taps = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    Tensor::from_fn(&[3, 3, 1, channels], |i| taps[i / channels])
}

/// Log of the edge distribution of an `[H, W, C]` image: per-channel
/// 4-neighbor Laplacian response, softmax-normalized over all positions.
pub fn log_edge_map(g: &mut Graph, image: Var) -> Result<Var> {
    let c = g.shape(image)[2];
    let k = g.constant(laplacian_kernel(c));
    let lap = g.conv2d(image, k, 1, c)?;
    let flat = flatten(g, lap)?;
    Ok(g.log_softmax(flat, 0)?)
}

/// `KL(p || q)` per channel of two log edge maps, averaged over channels.
fn edge_kl(g: &mut Graph, log_p: Var, log_q: Var) -> Result<Var> {
    let c = g.shape(log_p)[1] as f64;
    let p = g.exp(log_p);
    let diff = g.sub(log_p, log_q)?;
    let t = g.mul(p, diff)?;
    let s = g.sum(t);
    Ok(g.scale(s, 1.0 / c))
}

/// Edge-awareness loss with the input image's edge map as reference.
pub fn edge_loss(g: &mut Graph, image: Var, recon: Var, softsp: Var) -> Result<Var> {
    check_same_extent(g.shape(image), g.shape(recon))?;
    check_same_extent(g.shape(image), g.shape(softsp))?;
    let ei = log_edge_map(g, image)?;
    let er = log_edge_map(g, recon)?;
    let es = log_edge_map(g, softsp)?;
    let a = edge_kl(g, ei, er)?;
    let b = edge_kl(g, ei, es)?;
    Ok(g.add(a, b)?)
}

/// Balancing weights of the superpixel objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpnnLossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Edge weight (listed as gamma in the hyper-parameter presets).
    pub eta: f64,
}

impl Default for SpnnLossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 5.0,
            eta: 1.0,
        }
    }
}

/// Handles to the superpixel objective and each of its addends.
#[derive(Clone, Copy, Debug)]
pub struct SpnnLoss {
    pub total: Var,
    pub clustering: Var,
    pub smoothness: Var,
    pub recon: Var,
    pub edge: Var,
}

/// `clustering + alpha * smoothness + beta * recon + eta * edge`.
pub fn spnn_loss(
    g: &mut Graph,
    clustering: Var,
    smoothness: Var,
    recon: Var,
    edge: Var,
    w: SpnnLossWeights,
) -> Result<SpnnLoss> {
    if w.alpha < 0.0 || w.beta < 0.0 || w.eta < 0.0 {
        return Err(invalid("loss weights must be nonnegative"));
    }
    let a = g.scale(smoothness, w.alpha);
    let b = g.scale(recon, w.beta);
    let e = g.scale(edge, w.eta);
    let t = g.add(clustering, a)?;
    let t = g.add(t, b)?;
    let total = g.add(t, e)?;
    Ok(SpnnLoss {
        total,
        clustering,
        smoothness,
        recon,
        edge,
    })
}

/// All four losses for an image, its assignment map and reconstruction.
pub fn spnn_objective(
    g: &mut Graph,
    image: Var,
    out: &SpnnOutput,
    weights: SpnnLossWeights,
) -> Result<(SpnnLoss, Var)> {
    let softsp = soft_superpixelate(g, image, out.assignment)?;
    let clustering = clustering_loss(g, out.assignment, CLUSTERING_LAMBDA)?;
    let smoothness = smoothness_loss(g, out.assignment, image, SMOOTHNESS_SIGMA)?;
    let recon = recon_loss(g, image, out.recon, softsp)?;
    let edge = edge_loss(g, image, out.recon, softsp)?;
    Ok((spnn_loss(g, clustering, smoothness, recon, edge, weights)?, softsp))
}

/// Channel widths of the superpixel network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpnnArch {
    pub in_channels: usize,
    pub n_superpixels: usize,
    /// Widths of the 5x5 stem and the three 3x3 convolutions.
    pub widths: [usize; 4],
    /// Width of the fusion layer after the dilated branches (deep features).
    pub fuse: usize,
}

impl SpnnArch {
    pub fn new(in_channels: usize, n_superpixels: usize) -> Self {
        Self {
            in_channels,
            n_superpixels,
            widths: [64, 128, 256, 512],
            fuse: 512,
        }
    }
}

pub const DWA_DILATIONS: [usize; 3] = [1, 2, 4];

/// Graph handles produced by the superpixel network.
#[derive(Clone, Copy, Debug)]
pub struct SpnnOutput {
    /// `[H, W, N]` soft assignment.
    pub assignment: Var,
    /// `[H, W, C]` sigmoid reconstruction.
    pub recon: Var,
    /// `[H, W, fuse]` penultimate (post-ReLU) features.
    pub deep_features: Var,
}

#[derive(Clone, Debug)]
pub struct Spnn {
    pub arch: SpnnArch,
    stem: ConvBnRelu,
    body: Vec<ConvBnRelu>,
    dwa: Vec<Conv>,
    fuse: ConvBnRelu,
    head: Conv,
}

impl Spnn {
    pub fn new(store: &mut ParamStore, arch: SpnnArch, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Spnn;
        let w = arch.widths;
        let stem = ConvBnRelu::new(store, "spnn.stem", g, ConvSpec::new(5, arch.in_channels, w[0]), rng);
        let body = (1..4)
            .map(|i| ConvBnRelu::new(store, &format!("spnn.conv{i}"), g, ConvSpec::new(3, w[i - 1], w[i]), rng))
            .collect();
        let dwa = DWA_DILATIONS
            .iter()
            .map(|&d| {
                let spec = ConvSpec::new(3, w[3], w[3]).dilation(d).groups(w[3]);
                Conv::new(store, &format!("spnn.dwa{d}"), g, spec, rng)
            })
            .collect();
        let fuse = ConvBnRelu::new(store, "spnn.fuse", g, ConvSpec::new(3, 3 * w[3], arch.fuse), rng);
        let head = Conv::new(
            store,
            "spnn.head",
            g,
            ConvSpec::new(1, arch.fuse, arch.n_superpixels + arch.in_channels).bias(),
            rng,
        );
        Self {
            arch,
            stem,
            body,
            dwa,
            fuse,
            head,
        }
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<SpnnOutput> {
        let shape = s.graph.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != self.arch.in_channels {
            return Err(invalid(format!(
                "expected an [H, W, {}] image, got {shape:?}",
                self.arch.in_channels
            )));
        }
        if shape[0] < MIN_IMAGE_SIDE || shape[1] < MIN_IMAGE_SIDE {
            return Err(invalid(format!(
                "image {}x{} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                shape[0], shape[1]
            )));
        }
        let mut x = self.stem.forward(s, image)?;
        for layer in &self.body {
            x = layer.forward(s, x)?;
        }
        let branches = self
            .dwa
            .iter()
            .map(|c| c.forward(s, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.graph.concat(&branches)?;
        let deep = self.fuse.forward(s, cat)?;
        let logits = self.head.forward(s, deep)?;
        let n = self.arch.n_superpixels;
        let assign_logits = s.graph.slice_cols(logits, 0, n)?;
        let assignment = s.graph.softmax(assign_logits, 2)?;
        let recon_logits = s.graph.slice_cols(logits, n, self.arch.in_channels)?;
        let recon = s.graph.sigmoid(recon_logits);
        Ok(SpnnOutput {
            assignment,
            recon,
            deep_features: deep,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn assignment_map_validation() {
        assert!(AssignmentMap::new(Tensor::full(&[2, 2, 2], 0.5)).is_ok());
        assert!(AssignmentMap::new(Tensor::full(&[2, 2, 2], 0.6)).is_err());
        assert!(AssignmentMap::new(Tensor::full(&[4, 2], 0.5)).is_err());
        let mut t = Tensor::full(&[1, 1, 2], 0.5);
        t.data_mut()[0] = -0.5;
        t.data_mut()[1] = 1.5;
        assert!(AssignmentMap::new(t).is_err());
        assert!(AssignmentMap::one_hot(1, 2, 2, &[0, 2]).is_err());
    }

    #[test]
    fn hard_superpixelate_ties_go_low() {
        let img = Tensor::new(&[1, 2, 1], vec![0.0, 1.0]).unwrap();
        // both pixels tie between superpixels 0 and 1 -> both land in 0
        let p = AssignmentMap::uniform(1, 2, 2);
        let out = hard_superpixelate(&img, &p).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn hard_superpixelate_rejects_mismatch() {
        let img = Tensor::zeros(&[2, 3, 3]);
        assert!(hard_superpixelate(&img, &AssignmentMap::uniform(3, 2, 2)).is_err());
    }

    #[test]
    fn clustering_loss_uniform_and_balanced() {
        let u = eval(|g| {
            let p = g.constant(AssignmentMap::uniform(2, 2, 4).into_tensor());
            clustering_loss(g, p, 2.0)
        });
        assert!((u + 4f64.ln()).abs() < 1e-12);
        let b = eval(|g| {
            let p = g.constant(AssignmentMap::one_hot(2, 2, 4, &[0, 1, 2, 3]).unwrap().into_tensor());
            clustering_loss(g, p, 2.0)
        });
        assert!((b + 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothness_hand_example() {
        let v = eval(|g| {
            let p = g.constant(AssignmentMap::one_hot(1, 2, 2, &[0, 1]).unwrap().into_tensor());
            let img = g.constant(Tensor::full(&[1, 2, 3], 0.4));
            smoothness_loss(g, p, img, SMOOTHNESS_SIGMA)
        });
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothness_zero_for_constant_assignment() {
        let v = eval(|g| {
            let p = g.constant(Tensor::from_fn(&[3, 3, 2], |i| if i % 2 == 0 { 0.3 } else { 0.7 }));
            let img = g.constant(Tensor::from_fn(&[3, 3, 3], |i| (i as f64 * 0.37).sin()));
            smoothness_loss(g, p, img, SMOOTHNESS_SIGMA)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn recon_loss_closed_forms() {
        let zero = eval(|g| {
            let i = g.constant(Tensor::full(&[3, 2, 3], 0.2));
            recon_loss(g, i, i, i)
        });
        assert_eq!(zero, 0.0);
        let one = eval(|g| {
            let i = g.constant(Tensor::zeros(&[3, 5, 4]));
            let r = g.constant(Tensor::ones(&[3, 5, 4]));
            recon_loss(g, i, r, i)
        });
        assert!((one - 1.0).abs() < 1e-15);
    }

    #[test]
    fn edge_loss_vanishes_on_identical_maps() {
        let v = eval(|g| {
            let i = g.constant(Tensor::from_fn(&[4, 4, 3], |k| (k as f64 * 0.61).cos()));
            edge_loss(g, i, i, i)
        });
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn spnn_loss_weighting() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let w = SpnnLossWeights {
            alpha: 2.0,
            beta: 5.0,
            eta: 1.0,
        };
        let l = spnn_loss(&mut g, one, one, one, one, w).unwrap();
        assert_eq!(g.value(l.total).item(), 9.0);
        let c = g.constant(Tensor::scalar(-0.75));
        let zero_w = SpnnLossWeights {
            alpha: 0.0,
            beta: 0.0,
            eta: 0.0,
        };
        let l = spnn_loss(&mut g, c, one, one, one, zero_w).unwrap();
        assert_eq!(g.value(l.total).item(), -0.75);
        let neg = SpnnLossWeights { alpha: -1.0, ..w };
        assert!(spnn_loss(&mut g, one, one, one, one, neg).is_err());
    }

    #[test]
    fn coordinate_planes_are_normalized() {
        let c = coordinate_planes(3, 5);
        assert_eq!(c.at(&[0, 0, 0]), 0.0);
        assert_eq!(c.at(&[2, 4, 0]), 1.0);
        assert_eq!(c.at(&[2, 4, 1]), 1.0);
        assert_eq!(c.at(&[1, 2, 0]), 0.5);
        assert_eq!(c.at(&[1, 2, 1]), 0.5);
    }
}
