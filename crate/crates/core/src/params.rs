//! Named parameter tensors, their optimizer groups, and per-pass binding
//! onto an autograd graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};
use crate::container::{Container, Kind, Payload};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Backbone,
    Afm,
    Neck,
    Spectral,
    Decoder,
    DecoderAux,
    Text,
}

impl Group {
    pub const ALL: [Group; 7] = [Group::Backbone, Group::Afm, Group::Neck, Group::Spectral, Group::Decoder, Group::DecoderAux, Group::Text];

    /// Checkpoint section name.
    pub fn section(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Afm => "afm",
            Group::Neck => "neck",
            Group::Spectral => "spectral_embed",
            Group::Decoder => "decoder",
            Group::DecoderAux => "decoder_aux",
            Group::Text => "text_encoder",
        }
    }

    pub fn from_section(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.section() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn count_in(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// FNV-1a over the bit patterns of every value in the group.
    pub fn checksum(&self, group: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Copies values from `other` for every parameter with a matching name and shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        let by_name: HashMap<&str, &Param> = other.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &mut self.params {
            let src = by_name.get(p.name.as_str()).ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("parameter `{}`: checkpoint {:?} vs model {:?}", p.name, src.value.shape(), p.value.shape())));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Parameter construction with a shared generator and a name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: Group,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, group: Group, prefix: &str) -> Self {
        Self { store, rng, group, prefix: prefix.to_string() }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> Builder<'b, R> {
        Builder { store: self.store, rng: self.rng, group: self.group, prefix: format!("{}.{name}", self.prefix) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let d = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| d.sample(self.rng)).collect();
        self.store.add(format!("{}.{name}", self.prefix), self.group, Tensor::new(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(format!("{}.{name}", self.prefix), self.group, Tensor::full(shape, v))
    }
}

/// Lazily creates one graph leaf per parameter used in a pass.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: Vec<Group>,
    vars: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> Binder<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: &[Group]) -> Self {
        Self { graph, store, trainable: trainable.to_vec(), vars: RefCell::new(vec![None; store.len()]) }
    }

    /// Binds every parameter as a constant.
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, &[])
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), self.trainable.contains(&p.group));
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter; parameters the loss does
    /// not reach get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| v.requires_grad()).map(|v| (ParamId(i), grads.get_or_zeros(v))))
            .collect()
    }
}

/// Model weights plus metadata, stored as one container.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: KvFile,
    pub params: ParamStore,
    /// Extra named tensors (optimizer moments) not part of the model.
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.meta.clone();
        let mut payload = Vec::new();
        let mut push = |key: String, section: &str, name: &str, t: &Tensor, meta: &mut KvFile| {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            meta.set(&key, format!("{section}|{name}|{}", dims.join("x")));
            payload.extend_from_slice(t.data());
        };
        for (i, p) in self.params.params.iter().enumerate() {
            push(format!("tensor.{i:05}"), p.group.section(), &p.name, &p.value, &mut meta);
        }
        for (i, (name, t)) in self.extra.iter().enumerate() {
            push(format!("extra.{i:05}"), "extra", name, t, &mut meta);
        }
        Container {
            kind: Kind::Checkpoint,
            shape: vec![payload.len()],
            wavelengths: Vec::new(),
            gsd: 0.0,
            id: "checkpoint".into(),
            meta: meta.to_text(),
            payload: Payload::F64(payload),
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(Kind::Checkpoint, path)?;
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        let all = KvFile::parse(&c.meta).map_err(|e| bad(e.to_string()))?;
        let data = c.payload.to_f64();
        let mut offset = 0;
        let mut meta = KvFile::new();
        let mut params = ParamStore::new();
        let mut extra = Vec::new();
        for e in all.entries() {
            let is_tensor = e.key.starts_with("tensor.");
            if !is_tensor && !e.key.starts_with("extra.") {
                meta.set(&e.key, &e.value);
                continue;
            }
            let parts: Vec<&str> = e.value.split('|').collect();
            if parts.len() != 3 {
                return Err(bad(format!("malformed tensor entry `{}`", e.value)));
            }
            let shape: Vec<usize> = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2].split('x').map(|d| d.parse().map_err(|_| bad(format!("bad dims `{}`", parts[2])))).collect::<Result<_>>()?
            };
            let n: usize = shape.iter().product();
            if offset + n > data.len() {
                return Err(bad("payload shorter than declared tensors".into()));
            }
            let t = Tensor::new(&shape, data[offset..offset + n].to_vec());
            offset += n;
            if is_tensor {
                let group = Group::from_section(parts[0]).ok_or_else(|| bad(format!("unknown section `{}`", parts[0])))?;
                params.add(parts[1], group, t);
            } else {
                extra.push((parts[1].to_string(), t));
            }
        }
        if offset != data.len() {
            return Err(bad("payload longer than declared tensors".into()));
        }
        Ok(Self { meta, params, extra })
    }
}


/// One backprop vs central-difference comparison.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub group: Group,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares backprop gradients of `loss` with central differences (step `h`)
/// for parameters of the `trainable` groups. At most `per_param` elements of
/// each tensor are probed, spread evenly over its flat index range.
pub fn check_param_gradients<F>(store: &ParamStore, trainable: &[Group], per_param: usize, h: f64, loss: F) -> Vec<GradSample>
where
    F: for<'g, 's> Fn(&Binder<'g, 's>) -> Var<'g>,
{
    let graph = Graph::new();
    let bind = Binder::new(&graph, store, trainable);
    let l = loss(&bind);
    let grads = graph.backward(l);
    let analytic: HashMap<ParamId, Tensor> = bind.gradients(&grads).into_iter().collect();
    let eval = |s: &ParamStore| {
        let g = Graph::new();
        let b = Binder::frozen(&g, s);
        loss(&b).value().item()
    };
    let mut probe = store.clone();
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if !trainable.contains(&p.group) {
            continue;
        }
        let n = p.value.len();
        let step = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig;
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            out.push(GradSample { name: p.name.clone(), group: p.group, index: i, analytic: a, numeric: (fp - fm) / (2.0 * h) });
        }
    }
    out
}
