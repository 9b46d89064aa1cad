//! Model composition, configuration records, and checkpointing.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bijections::{
    ActNorm, AffineCoupling, Bijection, ConditionalSpline, ElementwiseSpline, FixedPermutation,
    LuLinear, RqSplineCoupling,
};
use crate::densities::{
    normal_draws, ConditionalFlowDensity, Density, DiagGaussianAnsatz, StandardNormal,
};
use crate::error::{FunnelError, Result};
use crate::funnels::{
    Conv1DFunnel, ConvKxKFunnel, ConvStride, FmlpBlock, FmlpFunnel, FmlpMode, FunnelLayer,
    GenerativeFunnel, LikelihoodParts, PartitionSpec, Surjection,
};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub enum Layer {
    Bijection(Box<dyn Bijection>),
    Surjection(Box<dyn Surjection>),
}

impl Layer {
    fn in_dim(&self) -> usize {
        match self {
            Layer::Bijection(b) => b.dim(),
            Layer::Surjection(s) => s.in_dim(),
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Layer::Bijection(b) => b.dim(),
            Layer::Surjection(s) => s.out_dim(),
        }
    }
}

/// Nodes of a full forward pass, before any reduction.
pub struct LikelihoodNodes {
    pub z: NodeId,
    pub base_logprob: NodeId,
    pub contributions: Vec<NodeId>,
    pub bound_loose: bool,
}

impl LikelihoodNodes {
    pub fn total(&self, g: &mut Graph) -> NodeId {
        let mut t = self.base_logprob;
        for &c in &self.contributions {
            t = g.add(t, c);
        }
        t
    }
}

pub struct FlowModel {
    pub in_dim: usize,
    pub latent_dim: usize,
    pub layers: Vec<Layer>,
    base: StandardNormal,
}

impl FlowModel {
    pub fn new(in_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut dim = in_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim() != dim {
                return Err(FunnelError::Config(format!(
                    "layer {i} expects {} inputs but receives {dim}",
                    l.in_dim()
                )));
            }
            dim = l.out_dim();
        }
        Ok(FlowModel { in_dim, latent_dim: dim, layers, base: StandardNormal::new(dim) })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng) {
        for l in &self.layers {
            match l {
                Layer::Bijection(b) => b.init_params(store, rng),
                Layer::Surjection(s) => s.init_params(store, rng),
            }
        }
    }

    pub fn bound_loose(&self) -> bool {
        self.layers.iter().any(|l| match l {
            Layer::Bijection(_) => false,
            Layer::Surjection(s) => s.bound_loose(),
        })
    }

    /// Full forward pass on the tape.
    pub fn log_prob_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<LikelihoodNodes> {
        let mut h = x;
        let mut contributions = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            match l {
                Layer::Bijection(b) => {
                    let (y, ld) = b.forward_graph(g, h, None, dropout_rng.as_deref_mut());
                    h = y;
                    contributions.push(ld);
                }
                Layer::Surjection(s) => {
                    let (z, v) = s.forward_graph(g, h, dropout_rng.as_deref_mut())?;
                    h = z;
                    contributions.push(v);
                }
            }
        }
        let base_logprob = self.base.log_prob_graph(g, h, None, None);
        Ok(LikelihoodNodes { z: h, base_logprob, contributions, bound_loose: self.bound_loose() })
    }

    /// Per-element likelihood decomposition, without gradients.
    pub fn log_prob(&self, store: &ParamStore, x: &Tensor) -> Result<LikelihoodParts> {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let nodes = self.log_prob_graph(&mut g, xn, None)?;
        Ok(LikelihoodParts {
            base_logprob: g.value(nodes.base_logprob).clone(),
            contributions: nodes.contributions.iter().map(|&c| g.value(c).clone()).collect(),
            bound_loose: nodes.bound_loose,
        })
    }

    /// Deterministic encoding to the final latent.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let xn = g.constant(x.clone());
        let nodes = self.log_prob_graph(&mut g, xn, None)?;
        Ok(g.value(nodes.z).clone())
    }

    /// Draw n samples at temperature t.
    pub fn sample(&self, store: &ParamStore, n: usize, t: f64, rng: &mut ChaCha12Rng) -> Result<Tensor> {
        if t <= 0.0 || !t.is_finite() {
            return Err(FunnelError::Domain(format!("temperature must be positive, got {t}")));
        }
        let mut h = normal_draws(rng, n, self.latent_dim, t);
        for l in self.layers.iter().rev() {
            h = match l {
                Layer::Bijection(b) => b.inverse(store, &h, None)?.output,
                Layer::Surjection(s) => s.inverse_sample(store, &h, t, rng)?,
            };
        }
        Ok(h)
    }

    /// Run data-dependent initialization (actnorm) on one batch.
    pub fn data_init(&self, store: &mut ParamStore, batch: &Tensor) -> Result<()> {
        let mut h = batch.clone();
        for l in &self.layers {
            match l {
                Layer::Bijection(b) => {
                    h = match b.data_init(store, &h)? {
                        Some(out) => out,
                        None => b.forward_values(store, &h, None).output,
                    };
                }
                Layer::Surjection(s) => {
                    let (z, _) = s.forward_values(store, &h)?;
                    h = z;
                }
            }
        }
        Ok(())
    }
}

/// Reconstruction-density choice for configured funnels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PPhiSpec {
    Gaussian { hidden: Vec<usize> },
    Flow { layers: usize, hidden: Vec<usize>, bins: usize, tail_bound: f64 },
}

/// One layer of a configured model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    ActNorm { dim: usize },
    AffineCoupling { dim: usize, hidden: Vec<usize>, swap: bool, #[serde(default)] dropout: f64 },
    SplineCoupling {
        dim: usize,
        hidden: Vec<usize>,
        bins: usize,
        tail_bound: f64,
        swap: bool,
        #[serde(default)] dropout: f64,
    },
    ElementwiseSpline { dim: usize, bins: usize, tail_bound: f64 },
    LuLinear { dim: usize, bias: bool },
    Permutation { dim: usize, seed: u64 },
    FmlpBlock { dim: usize, bins: usize, tail_bound: f64 },
    /// Generic funnel: conditional spline F over x₊, configurable p_φ.
    Funnel {
        in_dim: usize,
        out_dim: usize,
        f_hidden: Vec<usize>,
        bins: usize,
        tail_bound: f64,
        p_phi: PPhiSpec,
    },
    /// Slice: F is the identity.
    Slice { in_dim: usize, out_dim: usize, p_phi: PPhiSpec },
    Conv1d { n: usize, stride: ConvStride, hidden: Vec<usize> },
    ConvKxK { height: usize, width: usize, channels: usize, k: usize, hidden: Vec<usize> },
    Fmlp {
        n: usize,
        z_dim: usize,
        mode: FmlpMode,
        perm_seed: Option<u64>,
        hidden: Vec<usize>,
        bins: usize,
        tail_bound: f64,
    },
    Generative { n: usize, aug: usize, hidden: Vec<usize> },
}

fn build_p_phi(prefix: &str, dim: usize, ctx_dim: usize, spec: &PPhiSpec) -> Box<dyn Density> {
    match spec {
        PPhiSpec::Gaussian { hidden } => {
            Box::new(DiagGaussianAnsatz::new(format!("{prefix}.p"), dim, ctx_dim, hidden.clone(), 0.0))
        }
        PPhiSpec::Flow { layers, hidden, bins, tail_bound } => {
            let flows: Vec<Box<dyn Bijection>> = (0..*layers)
                .map(|i| {
                    Box::new(ConditionalSpline::new(
                        format!("{prefix}.p{i}"),
                        dim,
                        ctx_dim,
                        hidden.clone(),
                        *bins,
                        *tail_bound,
                        0.0,
                    )) as Box<dyn Bijection>
                })
                .collect();
            Box::new(ConditionalFlowDensity::new(dim, ctx_dim, flows))
        }
    }
}

/// Complete model configuration; the single source of truth stored in
/// checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub in_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<FlowModel> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let p = format!("l{i}");
            let layer = match spec {
                LayerSpec::ActNorm { dim } => Layer::Bijection(Box::new(ActNorm::new(p, *dim))),
                LayerSpec::AffineCoupling { dim, hidden, swap, dropout } => Layer::Bijection(
                    Box::new(AffineCoupling::new(p, *dim, 0, hidden.clone(), *swap, *dropout)),
                ),
                LayerSpec::SplineCoupling { dim, hidden, bins, tail_bound, swap, dropout } => {
                    Layer::Bijection(Box::new(RqSplineCoupling::new(
                        p,
                        *dim,
                        0,
                        hidden.clone(),
                        *bins,
                        *tail_bound,
                        *swap,
                        *dropout,
                    )))
                }
                LayerSpec::ElementwiseSpline { dim, bins, tail_bound } => {
                    Layer::Bijection(Box::new(ElementwiseSpline::new(p, *dim, *bins, *tail_bound)))
                }
                LayerSpec::LuLinear { dim, bias } => {
                    Layer::Bijection(Box::new(LuLinear::new(p, *dim, *bias)))
                }
                LayerSpec::Permutation { dim, seed } => {
                    Layer::Bijection(Box::new(FixedPermutation::from_seed(*dim, *seed)))
                }
                LayerSpec::FmlpBlock { dim, bins, tail_bound } => {
                    Layer::Bijection(Box::new(FmlpBlock::new(p, *dim, *bins, *tail_bound)))
                }
                LayerSpec::Funnel { in_dim, out_dim, f_hidden, bins, tail_bound, p_phi } => {
                    if out_dim >= in_dim {
                        return Err(FunnelError::Config("funnel must reduce dimension".into()));
                    }
                    let drop = in_dim - out_dim;
                    let f = ConditionalSpline::new(
                        format!("{p}.f"),
                        *out_dim,
                        drop,
                        f_hidden.clone(),
                        *bins,
                        *tail_bound,
                        0.0,
                    );
                    let pphi = build_p_phi(&p, drop, *out_dim, p_phi);
                    Layer::Surjection(Box::new(FunnelLayer::new(
                        p,
                        PartitionSpec::split(*in_dim, drop)?,
                        Box::new(f),
                        Some(pphi),
                    )?))
                }
                LayerSpec::Slice { in_dim, out_dim, p_phi } => {
                    if out_dim >= in_dim {
                        return Err(FunnelError::Config("slice must reduce dimension".into()));
                    }
                    let drop = in_dim - out_dim;
                    let pphi = build_p_phi(&p, drop, *out_dim, p_phi);
                    Layer::Surjection(Box::new(FunnelLayer::new(
                        p,
                        PartitionSpec::split(*in_dim, drop)?,
                        Box::new(crate::bijections::Identity { dim: *out_dim }),
                        Some(pphi),
                    )?))
                }
                LayerSpec::Conv1d { n, stride, hidden } => {
                    Layer::Surjection(Box::new(Conv1DFunnel::new(p, *n, *stride, hidden.clone())?))
                }
                LayerSpec::ConvKxK { height, width, channels, k, hidden } => Layer::Surjection(
                    Box::new(ConvKxKFunnel::new(p, *height, *width, *channels, *k, hidden.clone())?),
                ),
                LayerSpec::Fmlp { n, z_dim, mode, perm_seed, hidden, bins, tail_bound } => {
                    Layer::Surjection(Box::new(FmlpFunnel::new(
                        p,
                        *n,
                        *z_dim,
                        *mode,
                        *perm_seed,
                        hidden.clone(),
                        *bins,
                        *tail_bound,
                    )?))
                }
                LayerSpec::Generative { n, aug, hidden } => {
                    Layer::Surjection(Box::new(GenerativeFunnel::new(
                        p.clone(),
                        *n,
                        *aug,
                        Box::new(crate::bijections::Identity { dim: *n }),
                        hidden.clone(),
                    )?))
                }
            };
            layers.push(layer);
        }
        FlowModel::new(self.in_dim, layers)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FNLC";
const CHECKPOINT_VERSION: u32 = 1;
/// Upper bounds keeping a corrupt header from driving huge allocations.
const MAX_SECTION: u64 = 1 << 28;

/// Serialize the model spec and every parameter tensor. Values are raw
/// little-endian f64, so a save/load round trip is bit-exact.
pub fn save_checkpoint(path: &Path, spec: &ModelSpec, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let spec_json = serde_json::to_vec(spec).map_err(|e| FunnelError::Parse(e.to_string()))?;
    buf.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    let names: Vec<&str> = store.names().collect();
    buf.extend_from_slice(&(names.len() as u64).to_le_bytes());
    for name in names {
        let t = store.get(name).unwrap();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FunnelError::Parse("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes. Every length is validated before use, so corrupt
/// or adversarial input fails cleanly.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelSpec, ParamStore)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(FunnelError::Parse("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FunnelError::Parse(format!("unsupported checkpoint version {version}")));
    }
    let spec_len = c.u64()?;
    if spec_len > MAX_SECTION {
        return Err(FunnelError::Parse("unreasonable spec length".into()));
    }
    let spec: ModelSpec = serde_json::from_slice(c.take(spec_len as usize)?)
        .map_err(|e| FunnelError::Parse(format!("bad spec record: {e}")))?;
    let count = c.u64()?;
    if count > 1 << 20 {
        return Err(FunnelError::Parse("unreasonable parameter count".into()));
    }
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        if name_len > 4096 {
            return Err(FunnelError::Parse("unreasonable parameter name length".into()));
        }
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| FunnelError::Parse("parameter name not utf-8".into()))?
            .to_string();
        let ndim = c.u32()? as usize;
        if ndim > 8 {
            return Err(FunnelError::Parse("unreasonable tensor rank".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len: u64 = 1;
        for _ in 0..ndim {
            let d = c.u64()?;
            len = len.saturating_mul(d);
            if len > MAX_SECTION {
                return Err(FunnelError::Parse("unreasonable tensor size".into()));
            }
            shape.push(d as usize);
        }
        let raw = c.take(len as usize * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if store.get(&name).is_some() {
            return Err(FunnelError::Parse(format!("duplicate parameter '{name}'")));
        }
        store.register(&name, Tensor::new(shape, data));
    }
    if c.pos != bytes.len() {
        return Err(FunnelError::Parse("trailing bytes after checkpoint payload".into()));
    }
    Ok((spec, store))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamStore)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn spec_2d() -> ModelSpec {
        ModelSpec {
            in_dim: 2,
            layers: vec![
                LayerSpec::SplineCoupling {
                    dim: 2,
                    hidden: vec![16],
                    bins: 8,
                    tail_bound: 4.0,
                    swap: false,
                    dropout: 0.0,
                },
                LayerSpec::Funnel {
                    in_dim: 2,
                    out_dim: 1,
                    f_hidden: vec![16],
                    bins: 8,
                    tail_bound: 4.0,
                    p_phi: PPhiSpec::Gaussian { hidden: vec![16] },
                },
                LayerSpec::ElementwiseSpline { dim: 1, bins: 8, tail_bound: 4.0 },
            ],
        }
    }

    fn randomized(spec: &ModelSpec, seed: u64) -> (FlowModel, ParamStore) {
        let model = spec.build().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        model.init_params(&mut store, &mut rng);
        // nudge the zero-initialized heads so the model is nontrivial
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for n in names {
            let t = store.get(&n).unwrap().clone();
            store.set_value(&n, t.map(|v| v + 0.1 * (rng.gen::<f64>() - 0.5)));
        }
        (model, store)
    }

    #[test]
    fn empty_model_equals_base() {
        let model = FlowModel::new(2, vec![]).unwrap();
        let store = ParamStore::new();
        let x = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, -0.5]);
        let parts = model.log_prob(&store, &x).unwrap();
        assert!(parts.contributions.is_empty());
        let base = StandardNormal::new(2);
        let want = base.log_prob_values(&store, &x, None);
        assert_eq!(parts.total().data, want.data);
        // identity encode
        assert_eq!(model.encode(&store, &x).unwrap().data, x.data);
    }

    #[test]
    fn permutation_insertion_is_volume_preserving() {
        // appending a permutation before the isotropic base changes nothing
        let spec = ModelSpec {
            in_dim: 3,
            layers: vec![
                LayerSpec::AffineCoupling { dim: 3, hidden: vec![8], swap: false, dropout: 0.0 },
                LayerSpec::LuLinear { dim: 3, bias: true },
            ],
        };
        let (model, store) = randomized(&spec, 5);
        let mut spec2 = spec.clone();
        spec2.layers.push(LayerSpec::Permutation { dim: 3, seed: 123 });
        let model2 = spec2.build().unwrap();
        let x = Tensor::matrix(3, 3, vec![0.2, -0.4, 1.0, 0.3, -1.2, 0.8, 0.0, 0.5, -0.7]);
        let a = model.log_prob(&store, &x).unwrap().total();
        let b = model2.log_prob(&store, &x).unwrap().total();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn exact_model_normalizes_by_quadrature() {
        let (model, store) = randomized(&spec_2d(), 11);
        let n = 401;
        let h = 16.0 / (n - 1) as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let x0 = -8.0 + i as f64 * h;
            let xs = Tensor::matrix(n, 2, (0..n).flat_map(|j| [x0, -8.0 + j as f64 * h]).collect());
            let lp = model.log_prob(&store, &xs).unwrap().total();
            let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            for j in 0..n {
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                integral += wi * wj * lp.data[j].exp() * h * h;
            }
        }
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    #[test]
    fn sample_encode_roundtrip() {
        let (model, store) = randomized(&spec_2d(), 13);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let x = model.sample(&store, 200, 1.0, &mut rng).unwrap();
        assert_eq!(x.shape, vec![200, 2]);
        let z = model.encode(&store, &x).unwrap();
        let z2 = model.encode(&store, &x).unwrap();
        assert_eq!(z.data, z2.data, "encode must be deterministic");
    }

    #[test]
    fn surjective_right_inverse_through_model() {
        // decode(z) then encode returns z for exact funnels
        let (model, store) = randomized(&spec_2d(), 17);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let z = Tensor::matrix(300, 1, (0..300).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
        let mut x = z.clone();
        for l in model.layers.iter().rev() {
            x = match l {
                Layer::Bijection(b) => b.inverse(&store, &x, None).unwrap().output,
                Layer::Surjection(s) => s.inverse_sample(&store, &x, 1.0, &mut rng).unwrap(),
            };
        }
        let z2 = model.encode(&store, &x).unwrap();
        let max_err = z.data.iter().zip(&z2.data).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(max_err < 1e-7, "max err {max_err}");
    }

    #[test]
    fn temperature_scales_latent_variance() {
        let model = FlowModel::new(1, vec![]).unwrap();
        let store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let s = model.sample(&store, 100_000, 0.7, &mut rng).unwrap();
        let mean: f64 = s.data.iter().sum::<f64>() / s.len() as f64;
        let var: f64 = s.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s.len() as f64;
        assert!((var - 0.49).abs() < 0.05 * 0.49, "var {var}");
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let spec = spec_2d();
        let (_, store) = randomized(&spec, 29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fnlc");
        save_checkpoint(&path, &spec, &store).unwrap();
        let (spec2, store2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let names2: Vec<String> = store2.names().map(|s| s.to_string()).collect();
        assert_eq!(names, names2);
        for n in names {
            let a = store.get(&n).unwrap();
            let b = store2.get(&n).unwrap();
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter {n} not bit-identical");
        }
    }

    #[test]
    fn corrupt_checkpoints_fail_cleanly() {
        let spec = spec_2d();
        let (_, store) = randomized(&spec, 31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fnlc");
        save_checkpoint(&path, &spec, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(parse_checkpoint(&bad_magic).is_err());
        let mut huge_len = bytes.clone();
        huge_len[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(parse_checkpoint(&huge_len).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(parse_checkpoint(&trailing).is_err());
    }

    #[test]
    fn mismatched_layer_dims_rejected() {
        let spec = ModelSpec {
            in_dim: 3,
            layers: vec![LayerSpec::LuLinear { dim: 2, bias: false }],
        };
        assert!(spec.build().is_err());
    }
}
