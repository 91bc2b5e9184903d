//! Segmentation CNN with autoregressive (rasterized) convolutions, the
//! mutual-information loss between two rasterizations, and the CNN
//! reconstruction loss.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use sgseg_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::nn::{BatchNorm, Conv, ConvBnRelu, ConvSpec, Group, ParamStore, Session};

/// Raster order in which a masked kernel is causal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rasterization {
    /// Top-left to bottom-right: only taps strictly before the center.
    R1,
    /// The 180 degree rotation of `R1`: only taps strictly after the center.
    R2,
}

impl Rasterization {
    pub const BOTH: [Rasterization; 2] = [Rasterization::R1, Rasterization::R2];

    pub fn name(self) -> &'static str {
        match self {
            Self::R1 => "r1",
            Self::R2 => "r2",
        }
    }

    /// Row-major `kh x kw` tap mask.
    pub fn mask(self, kh: usize, kw: usize) -> Vec<f64> {
        let center = (kh / 2) * kw + kw / 2;
        (0..kh * kw)
            .map(|t| {
                let keep = match self {
                    Self::R1 => t < center,
                    Self::R2 => t > center,
                };
                if keep {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// The tap mask broadcast over a `[kh, kw, cin, cout]` kernel.
    pub fn kernel_mask(self, kernel_shape: &[usize]) -> Result<Tensor> {
        let &[kh, kw, cin, cout] = kernel_shape else {
            return Err(invalid(format!("expected a rank-4 kernel, got {kernel_shape:?}")));
        };
        let taps = self.mask(kh, kw);
        let per_tap = cin * cout;
        Ok(Tensor::from_fn(kernel_shape, |i| taps[i / per_tap]))
    }
}

impl FromStr for Rasterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r1" => Ok(Self::R1),
            "r2" => Ok(Self::R2),
            _ => Err(invalid(format!("unknown rasterization `{s}`"))),
        }
    }
}

/// Ordinary same-padded convolution with the kernel masked by `r`.
pub fn rasterized_conv(g: &mut Graph, input: Var, kernel: Var, r: Rasterization) -> Result<Var> {
    let shape = g.shape(kernel).to_vec();
    if shape.len() != 4 || shape[0] != shape[1] || shape[0] % 2 == 0 {
        return Err(invalid(format!("rasterized conv needs a square odd kernel, got {shape:?}")));
    }
    let mask = g.constant(r.kernel_mask(&shape)?);
    let masked = g.mul(kernel, mask)?;
    Ok(g.conv2d(input, masked, 1, 1)?)
}

/// 1x1 conv, BN, ReLU, 1x1 conv, plus the identity.
#[derive(Clone, Debug)]
struct PointwiseResidual {
    inner: ConvBnRelu,
    outer: Conv,
}

impl PointwiseResidual {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Cnn;
        Self {
            inner: ConvBnRelu::new(store, &format!("{name}.a"), g, ConvSpec::new(1, c, c), rng),
            outer: Conv::new(store, &format!("{name}.b"), g, ConvSpec::new(1, c, c), rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.inner.forward(s, x)?;
        let y = self.outer.forward(s, y)?;
        Ok(s.graph.add(x, y)?)
    }
}

/// Residual block whose first convolution is rasterized. The skip path is
/// the input zero-padded along channels to the output width.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub cin: usize,
    pub cout: usize,
    ac: Conv,
    ac_bn: BatchNorm,
    pointwise: ConvBnRelu,
    tail: [PointwiseResidual; 2],
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cout < cin {
            return Err(invalid(format!("residual block cannot shrink {cin} to {cout} channels")));
        }
        let g = Group::Cnn;
        Ok(Self {
            cin,
            cout,
            ac: Conv::new(store, &format!("{name}.ac"), g, ConvSpec::new(3, cin, cout), rng),
            ac_bn: BatchNorm::new(store, &format!("{name}.ac_bn"), g, cout),
            pointwise: ConvBnRelu::new(store, &format!("{name}.pw"), g, ConvSpec::new(1, cout, cout), rng),
            tail: [
                PointwiseResidual::new(store, &format!("{name}.res0"), cout, rng),
                PointwiseResidual::new(store, &format!("{name}.res1"), cout, rng),
            ],
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, r: Rasterization) -> Result<Var> {
        let k = s.param(self.ac.kernel);
        let y = rasterized_conv(&mut s.graph, x, k, r)?;
        let y = self.ac_bn.forward(s, y)?;
        let y = s.graph.relu(y);
        let y = self.pointwise.forward(s, y)?;
        let skip = if self.cout > self.cin {
            let shape = s.graph.shape(x).to_vec();
            let pad = s
                .graph
                .constant(Tensor::zeros(&[shape[0], shape[1], self.cout - self.cin]));
            s.graph.concat(&[x, pad])?
        } else {
            x
        };
        let mut y = s.graph.add(y, skip)?;
        for t in &self.tail {
            y = t.forward(s, y)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegArch {
    /// Image channels `C`.
    pub image_channels: usize,
    /// Width of the projected superpixel features concatenated to the image.
    pub feature_channels: usize,
    pub classes: usize,
    pub stem: usize,
    pub blocks: [usize; 4],
}

impl SegArch {
    pub fn new(image_channels: usize, classes: usize) -> Self {
        Self {
            image_channels,
            feature_channels: 64,
            classes,
            stem: 64,
            blocks: [128, 128, 256, 512],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.image_channels + self.feature_channels
    }

    pub fn out_channels(&self) -> usize {
        self.classes + self.image_channels
    }
}

/// Graph handles of one rasterized CNN pass.
#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// `[H, W, k]` class probabilities.
    pub probs: Var,
    /// `[H, W, C]` image reconstruction.
    pub recon: Var,
}

#[derive(Clone, Debug)]
pub struct SegCnn {
    pub arch: SegArch,
    stem: ConvBnRelu,
    blocks: Vec<ResidualBlock>,
    head: [Conv; 2],
    recon: Conv,
}

impl SegCnn {
    pub fn new(store: &mut ParamStore, arch: SegArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        if arch.classes < 2 {
            return Err(invalid("segmentation needs at least 2 classes"));
        }
        let g = Group::Cnn;
        let stem = ConvBnRelu::new(store, "cnn.stem", g, ConvSpec::new(3, arch.in_channels(), arch.stem), rng);
        let mut blocks = Vec::with_capacity(4);
        let mut c = arch.stem;
        for (i, &out) in arch.blocks.iter().enumerate() {
            blocks.push(ResidualBlock::new(store, &format!("cnn.block{i}"), c, out, rng)?);
            c = out;
        }
        let co = arch.out_channels();
        let head = [
            Conv::new(store, "cnn.head0", g, ConvSpec::new(1, c, co).bias(), rng),
            Conv::new(store, "cnn.head1", g, ConvSpec::new(1, co, co).bias(), rng),
        ];
        let recon = Conv::new(store, "cnn.recon", g, ConvSpec::new(3, co, arch.image_channels).bias(), rng);
        Ok(Self {
            arch,
            stem,
            blocks,
            head,
            recon,
        })
    }

    /// Runs the network on `I (+) M~` under rasterization `r`.
    pub fn forward(&self, s: &mut Session, x: Var, r: Rasterization) -> Result<SegOutput> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.arch.in_channels() {
            return Err(invalid(format!(
                "expected an [H, W, {}] input, got {shape:?}",
                self.arch.in_channels()
            )));
        }
        if shape[0] % 2 != 0 || shape[1] % 2 != 0 {
            return Err(invalid(format!(
                "spatial extent {}x{} is not divisible by 2",
                shape[0], shape[1]
            )));
        }
        let y = self.stem.forward(s, x)?;
        let mut y = s.graph.max_pool2x(y)?;
        for b in &self.blocks {
            y = b.forward(s, y, r)?;
        }
        for h in &self.head {
            y = h.forward(s, y)?;
        }
        let up = s.graph.upsample2x(y)?;
        let logits = s.graph.slice_cols(up, 0, self.arch.classes)?;
        let probs = s.graph.softmax(logits, 2)?;
        let recon = self.recon.forward(s, up)?;
        Ok(SegOutput { probs, recon })
    }
}

/// Negative mutual information between two `[H, W, k]` probability maps,
/// estimated from their symmetrized joint distribution.
pub fn mi_loss(g: &mut Graph, m1: Var, m2: Var) -> Result<Var> {
    let s1 = g.shape(m1).to_vec();
    if s1.len() != 3 || g.shape(m2) != s1.as_slice() {
        return Err(invalid(format!(
            "mi loss needs two equal [H, W, k] maps, got {s1:?} and {:?}",
            g.shape(m2)
        )));
    }
    let k = s1[2];
    if k < 2 {
        return Err(invalid("mi loss needs at least 2 classes"));
    }
    let hw = s1[0] * s1[1];
    let a = g.reshape(m1, &[hw, k])?;
    let b = g.reshape(m2, &[hw, k])?;
    let at = g.transpose(a)?;
    let j = g.matmul(at, b)?;
    let j = g.scale(j, 1.0 / hw as f64);
    let jt = g.transpose(j)?;
    let j = g.add(j, jt)?;
    let j = g.scale(j, 0.5);
    let row = g.sum_cols(j);
    let col = g.sum_rows(j);
    let neg_entropy = |g: &mut Graph, p: Var| {
        let t = g.xlogx(p);
        g.sum(t)
    };
    let nh_row = neg_entropy(g, row);
    let nh_col = neg_entropy(g, col);
    let nh_joint = neg_entropy(g, j);
    // -MI = -H(row) - H(col) + H(J)
    let marg = g.add(nh_row, nh_col)?;
    Ok(g.sub(marg, nh_joint)?)
}

/// Squared reconstruction error of both rasterizations, normalized by
/// `C * H * W`.
pub fn cnn_recon_loss(g: &mut Graph, image: Var, recon_r1: Var, recon_r2: Var) -> Result<Var> {
    let n = g.value(image).numel() as f64;
    let mut total = None;
    for r in [recon_r1, recon_r2] {
        let d = g.sub(r, image)?;
        let d2 = g.square(d);
        let s = g.sum(d2);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / n))
}

#[derive(Clone, Copy, Debug)]
pub struct CnnLoss {
    pub total: Var,
    pub mi: Var,
    pub recon: Var,
}

pub fn cnn_loss(g: &mut Graph, mi: Var, recon: Var) -> Result<CnnLoss> {
    let total = g.add(mi, recon)?;
    Ok(CnnLoss { total, mi, recon })
}

/// CNN objective for the two rasterized passes over the same input.
pub fn cnn_objective(g: &mut Graph, image: Var, r1: &SegOutput, r2: &SegOutput) -> Result<CnnLoss> {
    let mi = mi_loss(g, r1.probs, r2.probs)?;
    let recon = cnn_recon_loss(g, image, r1.recon, r2.recon)?;
    cnn_loss(g, mi, recon)
}
