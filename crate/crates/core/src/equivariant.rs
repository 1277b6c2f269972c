//! Dense layers that commute with the symmetric group acting jointly on all
//! matrix indices.
//!
//! A layer maps a list of input nodes (each a tensor of some rank over `d`
//! dimensions) to output nodes. Weights `W_{I,J}` are constant on orbits of
//! index-tuple pairs `(I, J)` under simultaneous permutation, so one scalar
//! per orbit is stored. The final layer may additionally merge orbits that
//! coincide under minor/major symmetry of a rank-4 output and drop output
//! tuples outside an orthorhombic zero pattern.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output entries that are structurally zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroPattern {
    None,
    /// Rank-4 tuples in which some index occurs an odd number of times.
    OrthorhombicRank4,
}

impl FromStr for ZeroPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ZeroPattern::None),
            "orthorhombic-rank4" => Ok(ZeroPattern::OrthorhombicRank4),
            other => Err(Error::UnknownZeroPattern(other.to_string())),
        }
    }
}

impl fmt::Display for ZeroPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZeroPattern::None => "none",
            ZeroPattern::OrthorhombicRank4 => "orthorhombic-rank4",
        })
    }
}

impl ZeroPattern {
    fn prunes(self, tuple: &[usize], dim: usize) -> bool {
        match self {
            ZeroPattern::None => false,
            ZeroPattern::OrthorhombicRank4 => (0..dim).any(|v| tuple.iter().filter(|&&t| t == v).count() % 2 == 1),
        }
    }
}

/// All index tuples of length `rank` over `0..dim`, most significant first.
pub fn index_tuples(rank: usize, dim: usize) -> Vec<Vec<usize>> {
    let count = dim.pow(rank as u32);
    (0..count)
        .map(|mut flat| {
            let mut t = vec![0; rank];
            for slot in t.iter_mut().rev() {
                *slot = flat % dim;
                flat /= dim;
            }
            t
        })
        .collect()
}

/// Flat index of a tuple in the ordering of [`index_tuples`].
pub fn flat_index(tuple: &[usize], dim: usize) -> usize {
    tuple.iter().fold(0, |acc, &t| acc * dim + t)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        out.push(current.clone());
        // Next lexicographic permutation.
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) else {
            return out;
        };
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).expect("successor exists");
        current.swap(i, j);
        current[i + 1..].reverse();
    }
}

/// Position permutations that leave a symmetric output tensor unchanged:
/// the swap for rank 2, minor and major symmetry for rank 4.
fn output_symmetry_group(rank: usize, symmetrize: bool) -> Vec<Vec<usize>> {
    if !symmetrize {
        return vec![(0..rank).collect()];
    }
    match rank {
        2 => vec![vec![0, 1], vec![1, 0]],
        4 => {
            let mut group = Vec::new();
            for major in [false, true] {
                for a in [false, true] {
                    for b in [false, true] {
                        let first = if a { [1, 0] } else { [0, 1] };
                        let second = if b { [3, 2] } else { [2, 3] };
                        let g: Vec<usize> = if major {
                            second.iter().chain(first.iter()).copied().collect()
                        } else {
                            first.iter().chain(second.iter()).copied().collect()
                        };
                        group.push(g);
                    }
                }
            }
            group
        }
        _ => vec![(0..rank).collect()],
    }
}

/// Partition of index-tuple pairs into weight orbits and of output tuples
/// into bias orbits. `None` marks pruned entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrbitPartition {
    pub input_rank: usize,
    pub output_rank: usize,
    pub dim: usize,
    /// Indexed by `flat(I) * dim^output_rank + flat(J)`.
    pub weight_orbit: Vec<Option<usize>>,
    pub n_weight_orbits: usize,
    /// Indexed by `flat(J)`.
    pub bias_orbit: Vec<Option<usize>>,
    pub n_bias_orbits: usize,
}

impl OrbitPartition {
    pub fn weight(&self, input: &[usize], output: &[usize]) -> Option<usize> {
        let n_out = self.dim.pow(self.output_rank as u32);
        self.weight_orbit[flat_index(input, self.dim) * n_out + flat_index(output, self.dim)]
    }

    pub fn bias(&self, output: &[usize]) -> Option<usize> {
        self.bias_orbit[flat_index(output, self.dim)]
    }
}

/// Canonical orbit ids from the lexicographically smallest member of each
/// orbit, found by brute force over the group.
pub fn enumerate_orbits(
    input_rank: usize,
    output_rank: usize,
    dim: usize,
    symmetrize: bool,
    zero_pattern: ZeroPattern,
) -> Result<OrbitPartition> {
    if dim == 0 {
        return Err(Error::Shape("dimension must be positive".into()));
    }
    if zero_pattern == ZeroPattern::OrthorhombicRank4 && output_rank != 4 {
        return Err(Error::Shape(format!("zero pattern {zero_pattern} needs rank-4 outputs, got rank {output_rank}")));
    }
    let group = permutations(dim);
    let positions = output_symmetry_group(output_rank, symmetrize);
    let inputs = index_tuples(input_rank, dim);
    let outputs = index_tuples(output_rank, dim);

    let canonical = |input: &[usize], output: &[usize]| -> Vec<usize> {
        let mut best: Option<Vec<usize>> = None;
        for pi in &group {
            let pin: Vec<usize> = input.iter().map(|&i| pi[i]).collect();
            let pout: Vec<usize> = output.iter().map(|&j| pi[j]).collect();
            for g in &positions {
                let key: Vec<usize> = pin.iter().copied().chain(g.iter().map(|&p| pout[p])).collect();
                if best.as_ref().is_none_or(|b| key < *b) {
                    best = Some(key);
                }
            }
        }
        best.expect("group is non-empty")
    };

    let assign = |keys: Vec<Option<Vec<usize>>>| -> (Vec<Option<usize>>, usize) {
        let mut ids = BTreeMap::new();
        for key in keys.iter().flatten() {
            ids.entry(key.clone()).or_insert(0);
        }
        for (id, value) in ids.values_mut().enumerate() {
            *value = id;
        }
        let n = ids.len();
        (keys.into_iter().map(|k| k.map(|k| ids[&k])).collect(), n)
    };

    let mut weight_keys = Vec::with_capacity(inputs.len() * outputs.len());
    for input in &inputs {
        for output in &outputs {
            weight_keys.push(if zero_pattern.prunes(output, dim) { None } else { Some(canonical(input, output)) });
        }
    }
    let bias_keys =
        outputs.iter().map(|output| (!zero_pattern.prunes(output, dim)).then(|| canonical(&[], output))).collect();
    let (weight_orbit, n_weight_orbits) = assign(weight_keys);
    let (bias_orbit, n_bias_orbits) = assign(bias_keys);
    Ok(OrbitPartition { input_rank, output_rank, dim, weight_orbit, n_weight_orbits, bias_orbit, n_bias_orbits })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Linear,
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], the logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Linear => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => logistic(x),
            Activation::Linear => 1.0,
        }
    }
}

/// A group of `count` nodes that are tensors of rank `rank`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeGroup {
    pub rank: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: Vec<NodeGroup>,
    pub output: NodeGroup,
    pub activation: Activation,
    pub symmetrize: bool,
    pub zero_pattern: ZeroPattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Two softplus hidden layers of ten rank-1 neurons each; the angles
    /// enter as one rank-1 node and the volume fraction as one rank-0 node
    /// feeding the first layer only. The linear output is one symmetric
    /// rank-4 node with orthorhombic zeros.
    pub fn standard() -> Self {
        Self::with_hidden(&[10, 10])
    }

    pub fn with_hidden(widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut inputs = vec![NodeGroup { rank: 1, count: 1 }, NodeGroup { rank: 0, count: 1 }];
        for &w in widths {
            let output = NodeGroup { rank: 1, count: w };
            layers.push(LayerSpec {
                inputs,
                output,
                activation: Activation::Softplus,
                symmetrize: false,
                zero_pattern: ZeroPattern::None,
            });
            inputs = vec![output];
        }
        layers.push(LayerSpec {
            inputs,
            output: NodeGroup { rank: 4, count: 1 },
            activation: Activation::Linear,
            symmetrize: true,
            zero_pattern: ZeroPattern::OrthorhombicRank4,
        });
        NetworkSpec { dim: 3, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[1].inputs != [pair[0].output] {
                return Err(Error::Shape(format!("layer {} does not consume the output of layer {k}", k + 1)));
            }
        }
        for layer in &self.layers {
            if layer.output.count == 0 || layer.inputs.iter().any(|g| g.count == 0) {
                return Err(Error::Shape("empty node group".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Connection {
    n_orbits: usize,
    /// `(flat input entry, flat output entry, orbit)`.
    entries: Vec<(u32, u32, u32)>,
}

#[derive(Clone, Debug)]
struct CompiledLayer {
    spec: LayerSpec,
    connections: Vec<Connection>,
    /// `(flat output entry, orbit)` for non-pruned outputs.
    bias: Vec<(u32, u32)>,
    n_bias: usize,
    /// Per output entry: `false` when pruned.
    live: Vec<bool>,
    out_len: usize,
    per_neuron: usize,
    n_inputs: usize,
}

impl CompiledLayer {
    fn new(spec: &LayerSpec, dim: usize) -> Result<Self> {
        let mut connections = Vec::new();
        let mut bias_partition = None;
        let out_len = dim.pow(spec.output.rank as u32);
        for group in &spec.inputs {
            let p = enumerate_orbits(group.rank, spec.output.rank, dim, spec.symmetrize, spec.zero_pattern)?;
            let mut entries = Vec::new();
            for (k, orbit) in p.weight_orbit.iter().enumerate() {
                if let Some(o) = orbit {
                    entries.push(((k / out_len) as u32, (k % out_len) as u32, *o as u32));
                }
            }
            connections.push(Connection { n_orbits: p.n_weight_orbits, entries });
            bias_partition = Some(p);
        }
        let p = bias_partition.ok_or_else(|| Error::Shape("layer without inputs".into()))?;
        let bias: Vec<(u32, u32)> =
            p.bias_orbit.iter().enumerate().filter_map(|(j, o)| o.map(|o| (j as u32, o as u32))).collect();
        let live = p.bias_orbit.iter().map(Option::is_some).collect();
        let weights: usize = spec.inputs.iter().zip(&connections).map(|(g, c)| g.count * c.n_orbits).sum();
        Ok(CompiledLayer {
            spec: spec.clone(),
            connections,
            n_bias: p.n_bias_orbits,
            bias,
            live,
            out_len,
            per_neuron: weights + p.n_bias_orbits,
            n_inputs: spec.inputs.iter().map(|g| g.count).sum(),
        })
    }

    fn n_params(&self) -> usize {
        self.per_neuron * self.spec.output.count
    }

    fn check_inputs(&self, x: &[Vec<f64>], dim: usize) -> Result<()> {
        if x.len() != self.n_inputs {
            return Err(Error::Shape(format!("expected {} input nodes, got {}", self.n_inputs, x.len())));
        }
        let mut node = 0;
        for group in &self.spec.inputs {
            let len = dim.pow(group.rank as u32);
            for _ in 0..group.count {
                if x[node].len() != len {
                    return Err(Error::Shape(format!(
                        "input node {node} has {} entries, expected {len}",
                        x[node].len()
                    )));
                }
                node += 1;
            }
        }
        Ok(())
    }

    /// Pre-activations of all output nodes.
    fn pre_activation(&self, x: &[Vec<f64>], params: &[f64]) -> Vec<Vec<f64>> {
        (0..self.spec.output.count)
            .map(|j| {
                let w = &params[j * self.per_neuron..(j + 1) * self.per_neuron];
                let mut y = vec![0.0; self.out_len];
                let mut node = 0;
                let mut offset = 0;
                for (group, conn) in self.spec.inputs.iter().zip(&self.connections) {
                    for _ in 0..group.count {
                        let xi = &x[node];
                        let wi = &w[offset..offset + conn.n_orbits];
                        for &(i, o, orbit) in &conn.entries {
                            y[o as usize] += wi[orbit as usize] * xi[i as usize];
                        }
                        node += 1;
                        offset += conn.n_orbits;
                    }
                }
                let b = &w[offset..offset + self.n_bias];
                for &(o, orbit) in &self.bias {
                    y[o as usize] += b[orbit as usize];
                }
                y
            })
            .collect()
    }

    fn activate(&self, pre: &[Vec<f64>]) -> Vec<Vec<f64>> {
        pre.iter()
            .map(|y| {
                y.iter()
                    .zip(&self.live)
                    .map(|(&v, &live)| if live { self.spec.activation.apply(v) } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns input cotangents.
    fn backward(
        &self,
        x: &[Vec<f64>],
        pre: &[Vec<f64>],
        params: &[f64],
        upstream: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let mut gx: Vec<Vec<f64>> = x.iter().map(|v| vec![0.0; v.len()]).collect();
        for j in 0..self.spec.output.count {
            let dpre: Vec<f64> = upstream[j]
                .iter()
                .zip(&pre[j])
                .zip(&self.live)
                .map(|((&u, &p), &live)| if live { u * self.spec.activation.derivative(p) } else { 0.0 })
                .collect();
            let w = &params[j * self.per_neuron..(j + 1) * self.per_neuron];
            let g = &mut grad[j * self.per_neuron..(j + 1) * self.per_neuron];
            let mut node = 0;
            let mut offset = 0;
            for (group, conn) in self.spec.inputs.iter().zip(&self.connections) {
                for _ in 0..group.count {
                    let xi = &x[node];
                    let gxi = &mut gx[node];
                    for &(i, o, orbit) in &conn.entries {
                        let d = dpre[o as usize];
                        g[offset + orbit as usize] += d * xi[i as usize];
                        gxi[i as usize] += w[offset + orbit as usize] * d;
                    }
                    node += 1;
                    offset += conn.n_orbits;
                }
            }
            for &(o, orbit) in &self.bias {
                g[offset + orbit as usize] += dpre[o as usize];
            }
        }
        gx
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `inputs[k]` are the input nodes of layer `k`; the last entry holds the
    /// network output.
    nodes: Vec<Vec<Vec<f64>>>,
    pre: Vec<Vec<Vec<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &[Vec<f64>] {
        self.nodes.last().expect("trace holds at least the inputs")
    }
}

/// A compiled network: orbit tables are built once and shared by every
/// evaluation.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<CompiledLayer>,
    offsets: Vec<usize>,
    n_params: usize,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers.iter().map(|l| CompiledLayer::new(l, spec.dim)).collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut n_params = 0;
        for l in &layers {
            offsets.push(n_params);
            n_params += l.n_params();
        }
        Ok(Network { spec, layers, offsets, n_params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Parameter count of each layer.
    pub fn layer_params(&self) -> Vec<usize> {
        self.layers.iter().map(CompiledLayer::n_params).collect()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params, params.len())));
        }
        Ok(())
    }

    /// Uniform in `(−a, a)` per orbit with `a = 1/√(input nodes)` of the layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params);
        for l in &self.layers {
            let a = 1.0 / (l.n_inputs as f64).sqrt();
            params.extend((0..l.n_params()).map(|_| rng.gen_range(-a..a)));
        }
        params
    }

    /// Evaluates a single layer on its own parameter slice.
    pub fn layer_forward(&self, layer: usize, inputs: &[Vec<f64>], params: &[f64]) -> Result<Vec<Vec<f64>>> {
        let l = self.layers.get(layer).ok_or_else(|| Error::Shape(format!("no layer {layer}")))?;
        if params.len() != l.n_params() {
            return Err(Error::Shape(format!(
                "layer {layer} expects {} parameters, got {}",
                l.n_params(),
                params.len()
            )));
        }
        l.check_inputs(inputs, self.spec.dim)?;
        Ok(l.activate(&l.pre_activation(inputs, params)))
    }

    pub fn forward(&self, inputs: &[Vec<f64>], params: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_trace(inputs, params)?.nodes.pop().expect("output present"))
    }

    pub fn forward_trace(&self, inputs: &[Vec<f64>], params: &[f64]) -> Result<Trace> {
        self.check_params(params)?;
        self.layers[0].check_inputs(inputs, self.spec.dim)?;
        let mut nodes = vec![inputs.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, &off) in self.layers.iter().zip(&self.offsets) {
            let p = l.pre_activation(nodes.last().expect("nodes non-empty"), &params[off..off + l.n_params()]);
            nodes.push(l.activate(&p));
            pre.push(p);
        }
        Ok(Trace { nodes, pre })
    }

    /// Reverse pass. Adds `∂L/∂params` into `grad` and returns `∂L/∂inputs`.
    pub fn backward(
        &self,
        trace: &Trace,
        params: &[f64],
        upstream: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        if grad.len() != self.n_params {
            return Err(Error::Shape("gradient buffer has the wrong length".into()));
        }
        let out = trace.output();
        if upstream.len() != out.len() || upstream.iter().zip(out).any(|(u, o)| u.len() != o.len()) {
            return Err(Error::Shape("upstream cotangent does not match the network output".into()));
        }
        let mut cot = upstream.to_vec();
        for (k, (l, &off)) in self.layers.iter().zip(&self.offsets).enumerate().rev() {
            let range = off..off + l.n_params();
            cot = l.backward(&trace.nodes[k], &trace.pre[k], &params[range.clone()], &cot, &mut grad[range]);
        }
        Ok(cot)
    }
}

/// `(π∘x)_I = x_{π·I}` for a flat tensor of the given rank.
pub fn permute_tensor(x: &[f64], rank: usize, dim: usize, perm: &[usize]) -> Vec<f64> {
    index_tuples(rank, dim)
        .iter()
        .map(|t| {
            let moved: Vec<usize> = t.iter().map(|&i| perm[i]).collect();
            x[flat_index(&moved, dim)]
        })
        .collect()
}
