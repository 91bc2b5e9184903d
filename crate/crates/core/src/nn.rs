//! Parameters, forward sessions and the handful of layers the networks use.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sgseg_tensor::norm::{BN_EPS, BN_MOMENTUM};
use sgseg_tensor::{batch_norm_eval, batch_norm_train, BatchStats, Graph, RunningStats, Tensor, Var};

use crate::error::Result;

/// Parameter group; each has its own learning rate and optimizer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Spnn,
    Gnn,
    Cnn,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Spnn, Group::Gnn, Group::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Group::Spnn => "spnn",
            Group::Gnn => "gnn",
            Group::Cnn => "cnn",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub name: String,
    pub group: Group,
    pub stats: RunningStats,
}

/// Owns every trainable tensor and every batch-norm running statistic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    bn: Vec<BnState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, group: Group, channels: usize) -> BnId {
        self.bn.push(BnState {
            name: name.into(),
            group,
            stats: RunningStats::new(channels),
        });
        BnId(self.bn.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count_in(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Folds recorded batch statistics into the running averages, in order.
    pub fn apply_bn_updates(&mut self, updates: &[(BnId, BatchStats)]) {
        for (id, stats) in updates {
            self.bn[id.0].stats.update(stats, BN_MOMENTUM);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) evaluation over a fresh graph.
///
/// Parameters are bound lazily as graph leaves. Parameters of frozen groups
/// are bound as constants and their batch norms use running statistics.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: Mode,
    frozen: [bool; 3],
    bound: Vec<Option<Var>>,
    bn_updates: Vec<(BnId, BatchStats)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            frozen: [false; 3],
            bound: vec![None; store.params.len()],
            bn_updates: Vec::new(),
        }
    }

    /// Records onto an existing graph.
    pub fn with_graph(graph: Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            ..Self::new(store, mode)
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// Uses `v` for parameter `id` instead of binding a fresh leaf.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn freeze(mut self, group: Group) -> Self {
        self.frozen[group.index()] = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen[group.index()]
    }

    fn trains(&self, group: Group) -> bool {
        self.mode == Mode::Train && !self.is_frozen(group)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.graph.leaf(p.value.clone(), self.trains(p.group));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.graph.take_grad(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        out
    }

    pub fn take_bn_updates(&mut self) -> Vec<(BnId, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Xavier/Glorot uniform initialization for a `[kh, kw, cin/groups, cout]`
/// kernel or a `[cin, cout]` matrix.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Same-padded 2D convolution layer, optionally with a bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: usize,
    pub groups: usize,
    pub cout: usize,
}

pub struct ConvSpec {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(k: usize, cin: usize, cout: usize) -> Self {
        Self {
            k,
            cin,
            cout,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let cin_g = spec.cin / spec.groups;
        let rf = spec.k * spec.k;
        let kernel = xavier_uniform(&[spec.k, spec.k, cin_g, spec.cout], cin_g * rf, spec.cout * rf, rng);
        let kernel = store.add(format!("{name}.weight"), group, kernel);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[spec.cout])));
        Self {
            kernel,
            bias,
            dilation: spec.dilation,
            groups: spec.groups,
            cout: spec.cout,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let k = s.param(self.kernel);
        self.forward_with_kernel(s, x, k)
    }

    /// Runs the layer with a substitute kernel (e.g. a masked copy).
    pub fn forward_with_kernel(&self, s: &mut Session, x: Var, kernel: Var) -> Result<Var> {
        let y = s.graph.conv2d(x, kernel, self.dilation, self.groups)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                Ok(s.graph.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Pointwise linear map on the rows of an `N x cin` matrix (a 1x1 Conv1D).
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = xavier_uniform(&[cin, cout], cin, cout, rng);
        let weight = store.add(format!("{name}.weight"), group, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout])));
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                Ok(s.graph.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over all rows of the input (pixels or nodes).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
    pub group: Group,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels]));
        let stats = store.add_bn(name, group, channels);
        Self {
            gamma,
            beta,
            stats,
            group,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.trains(self.group) {
            let (y, stats) = batch_norm_train(&mut s.graph, x, gamma, beta, BN_EPS)?;
            s.bn_updates.push((self.stats, stats));
            Ok(y)
        } else {
            let stats = &s.store.bn[self.stats.0].stats;
            Ok(batch_norm_eval(&mut s.graph, x, gamma, beta, stats, BN_EPS)?)
        }
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let cout = spec.cout;
        let conv = Conv::new(store, &format!("{name}.conv"), group, spec, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), group, cout);
        Self { conv, bn }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

/// Dense layer followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct DenseBnRelu {
    pub dense: Dense,
    pub bn: BatchNorm,
}

impl DenseBnRelu {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dense = Dense::new(store, &format!("{name}.fc"), group, cin, cout, false, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), group, cout);
        Self { dense, bn }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.dense.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn xavier_bound() {
        let t = xavier_uniform(&[3, 3, 4, 8], 36, 72, &mut rng());
        let bound = (6.0f64 / 108.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        assert!(t.data().iter().any(|v| v.abs() > 0.5 * bound));
    }

    #[test]
    fn store_counts_by_group() {
        let mut store = ParamStore::new();
        store.add("a", Group::Spnn, Tensor::zeros(&[3]));
        store.add("b", Group::Cnn, Tensor::zeros(&[2, 2]));
        store.add_bn("bn", Group::Cnn, 2);
        assert_eq!(store.len(), 2);
        assert_eq!(store.count_in(Group::Cnn), 4);
        assert_eq!(store.count_in(Group::Gnn), 0);
        assert_eq!(store.bn_states()[0].stats.var, vec![1.0, 1.0]);
    }

    #[test]
    fn frozen_groups_yield_no_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Spnn, Tensor::ones(&[2]));
        let b = store.add("b", Group::Cnn, Tensor::ones(&[2]));
        let mut s = Session::new(&store, Mode::Train).freeze(Group::Spnn);
        let (va, vb) = (s.param(a), s.param(b));
        let y = s.graph.mul(va, vb).unwrap();
        let y = s.graph.sum(y);
        s.graph.backward_scalar(y).unwrap();
        let grads = s.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, b);
    }

    #[test]
    fn batch_norm_records_stats_only_when_training() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", Group::Gnn, 1);
        let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

        let mut s = Session::new(&store, Mode::Train);
        let v = s.graph.constant(x.clone());
        let y = bn.forward(&mut s, v).unwrap();
        let mean: f64 = s.graph.value(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let updates = s.take_bn_updates();
        assert_eq!(updates.len(), 1);
        store.apply_bn_updates(&updates);
        let stats = &store.bn_states()[0].stats;
        assert!((stats.mean[0] - 0.25).abs() < 1e-12);

        let mut s = Session::new(&store, Mode::Eval);
        let v = s.graph.constant(x);
        bn.forward(&mut s, v).unwrap();
        assert!(s.take_bn_updates().is_empty());
    }

    #[test]
    fn conv_bias_starts_at_zero() {
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "c", Group::Cnn, ConvSpec::new(1, 2, 3).bias(), &mut rng());
        assert_eq!(store.get(conv.bias.unwrap()).data(), &[0.0; 3]);
        assert_eq!(store.get(conv.kernel).shape(), &[1, 1, 2, 3]);
        assert_eq!(store.params()[0].name, "c.weight");
    }
}
