//! Named parameter storage.
//!
//! Every learnable tensor has a dotted name (`stage2.block0.attn.head1.
//! sim_proj`, `stem.conv1.w`, ...). The table below fixes the full list,
//! the shapes and the init rule for a given config, and everything else
//! (random init, serialization, watching, counting, validation) walks that
//! one list, always in the same order. Changing the order would change
//! what a seed produces, so additions go at the natural structural spot
//! and nowhere else.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use super::ModelConfig;
use crate::scalar::lit;
use crate::tensor::{Tape, TensorBase};
use crate::{io, Error, Result, Scalar};

/// How a parameter starts life.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    Const(f64),
}

/// The full parameter list for a config: name, shape, init rule.
pub(crate) fn param_spec(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut spec: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| spec.push((name, shape, init));

    let c1 = cfg.channels[0];
    push("stem.conv1.w".into(), vec![3, 3, 3, c1 / 2], Init::Uniform { fan_in: 27 });
    push("stem.conv1.b".into(), vec![c1 / 2], Init::Zeros);
    push("stem.conv2.w".into(), vec![3, 3, c1 / 2, c1], Init::Uniform { fan_in: 9 * (c1 / 2) });
    push("stem.conv2.b".into(), vec![c1], Init::Zeros);

    for s in 0..4 {
        let d = cfg.channels[s];
        let dh = cfg.d_head;
        for b in 0..cfg.blocks[s] {
            let p = format!("stage{}.block{}", s + 1, b);
            push(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
            push(format!("{p}.ln1.delta"), vec![d], Init::Zeros);
            for h in 0..cfg.heads[s] {
                let q = format!("{p}.attn.head{h}");
                push(format!("{q}.sim_proj"), vec![d, dh], Init::Uniform { fan_in: d });
                push(format!("{q}.sim_bias"), vec![dh], Init::Zeros);
                push(format!("{q}.val_proj"), vec![d, dh], Init::Uniform { fan_in: d });
                push(format!("{q}.val_bias"), vec![dh], Init::Zeros);
                push(format!("{q}.alpha"), vec![1], Init::Ones);
                push(format!("{q}.beta"), vec![1], Init::Zeros);
                for &r in &cfg.rates {
                    push(format!("{q}.rate{r}.w"), vec![1], Init::Const(0.5));
                }
                push(format!("{q}.epsilon"), vec![1], Init::Zeros);
                push(format!("{q}.update_kernel"), vec![3, 3, dh], Init::Uniform { fan_in: 9 });
                push(format!("{q}.update_fc"), vec![dh, dh], Init::Uniform { fan_in: dh });
                push(format!("{q}.update_bias"), vec![dh], Init::Zeros);
            }
            let hd = cfg.heads[s] * dh;
            push(format!("{p}.attn.fusion.w"), vec![hd, d], Init::Uniform { fan_in: hd });
            push(format!("{p}.attn.fusion.b"), vec![d], Init::Zeros);
            push(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
            push(format!("{p}.ln2.delta"), vec![d], Init::Zeros);
            let e = d * cfg.ffn_ratio;
            push(format!("{p}.ffn.fc1.w"), vec![d, e], Init::Uniform { fan_in: d });
            push(format!("{p}.ffn.fc1.b"), vec![e], Init::Zeros);
            push(format!("{p}.ffn.dw.w"), vec![3, 3, e], Init::Uniform { fan_in: 9 });
            push(format!("{p}.ffn.fc2.w"), vec![e, d], Init::Uniform { fan_in: e });
            push(format!("{p}.ffn.fc2.b"), vec![d], Init::Zeros);
        }
        if s < 3 {
            let dn = cfg.channels[s + 1];
            push(format!("down{}.w", s + 1), vec![3, 3, d, dn], Init::Uniform { fan_in: 9 * d });
            push(format!("down{}.b", s + 1), vec![dn], Init::Zeros);
        }
    }
    push("classifier.w".into(), vec![cfg.channels[3], cfg.classes], Init::Uniform {
        fan_in: cfg.channels[3],
    });
    push("classifier.b".into(), vec![cfg.classes], Init::Zeros);
    spec
}

/// Total learnable scalars for a config, computed from the parameter list
/// without allocating any of the tensors.
pub fn count_params_for(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(param_spec(cfg).iter().map(|(_, shape, _)| shape.iter().product::<usize>()).sum())
}

/// Insertion-ordered name-to-tensor map.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f64> {
    entries: Vec<(String, TensorBase<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_entries(entries: Vec<(String, TensorBase<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn get(&self, name: &str) -> Option<&TensorBase<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Like [`get`](Self::get) but a missing name is an error.
    pub fn expect(&self, name: &str) -> Result<TensorBase<T>> {
        self.get(name).cloned().ok_or_else(|| Error::MissingTensor { name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorBase<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// The same store with every tensor registered on `tape`, for
    /// gradient runs.
    pub fn watched(&self, tape: &Tape<T>) -> Self {
        let entries =
            self.entries.iter().map(|(n, t)| (n.clone(), tape.watch(t))).collect();
        Self { entries, index: self.index.clone() }
    }

    /// Replace one tensor (same name, same shape), e.g. for perturbation
    /// studies. Returns the previous value.
    pub fn replace(&mut self, name: &str, value: TensorBase<T>) -> Result<TensorBase<T>> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingTensor { name: name.into() })?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_store",
                expected: format!("{name} {:?}", self.entries[i].1.shape()),
                got: format!("{:?}", value.shape()),
            });
        }
        Ok(std::mem::replace(&mut self.entries[i].1, value))
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        io::save_tensors(prefix, &self.entries)
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        Self::from_entries(io::load_tensors(prefix)?)
    }

    /// Check this store holds exactly the parameters `cfg` calls for.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        let spec = param_spec(cfg);
        if spec.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "store has {} parameters, config {} wants {}",
                self.entries.len(),
                cfg.name,
                spec.len()
            )));
        }
        for (name, shape, _) in &spec {
            let t = self
                .get(name)
                .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
            if t.shape() != &shape[..] {
                return Err(Error::ShapeMismatch {
                    op: "param_store",
                    expected: format!("{name} {shape:?}"),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Fresh parameters for a config, reproducibly random from `cfg.seed`: the
/// spec order fixes which draws feed which tensor.
pub fn init_params<T: Scalar>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entries = param_spec(cfg)
        .into_iter()
        .map(|(name, shape, init)| {
            let t = match init {
                Init::Uniform { fan_in } => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    TensorBase::rand_uniform(shape, -b, b, &mut rng)
                }
                Init::Zeros => TensorBase::zeros(shape),
                Init::Ones => TensorBase::full(shape, T::one()),
                Init::Const(c) => TensorBase::full(shape, lit::<T>(c)),
            };
            (name, t)
        })
        .collect();
    ParamStore::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn init_is_reproducible_and_ordered() {
        let cfg = ModelConfig::toy();
        let a: ParamStore = init_params(&cfg).unwrap();
        let b: ParamStore = init_params(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
        // a different seed moves every uniformly drawn tensor
        let mut reseeded = cfg.clone();
        reseeded.seed = 1;
        let c: ParamStore = init_params(&reseeded).unwrap();
        let moved = a
            .iter()
            .zip(c.iter())
            .filter(|((_, ta), (_, tc))| ta.data() != tc.data())
            .count();
        assert!(moved > 0);
    }

    #[test]
    fn spec_and_store_agree() {
        let cfg = ModelConfig::toy();
        let store: ParamStore = init_params(&cfg).unwrap();
        store.validate_against(&cfg).unwrap();
        let spec = param_spec(&cfg);
        assert_eq!(store.len(), spec.len());
        let total: usize = spec.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        assert_eq!(store.param_count(), total);
    }

    #[test]
    fn init_rules_hold() {
        let cfg = ModelConfig::toy();
        let store: ParamStore = init_params(&cfg).unwrap();
        let alpha = store.get("stage1.block0.attn.head0.alpha").unwrap();
        assert_eq!(alpha.data(), &[1.0]);
        let beta = store.get("stage1.block0.attn.head0.beta").unwrap();
        assert_eq!(beta.data(), &[0.0]);
        let w1 = store.get("stage1.block0.attn.head0.rate1.w").unwrap();
        assert_eq!(w1.data(), &[0.5]);
        let gamma = store.get("stage2.block0.ln1.gamma").unwrap();
        assert!(gamma.data().iter().all(|&v| v == 1.0));
        let proj = store.get("stage1.block0.attn.head0.sim_proj").unwrap();
        let bound = 1.0 / (cfg.channels[0] as f64).sqrt();
        assert!(proj.data().iter().all(|&v| v.abs() <= bound));
        assert!(proj.data().iter().any(|&v| v != 0.0));
        // toy has no stage3 blocks at all
        assert!(store.get("stage3.block0.ln1.gamma").is_none());
        assert!(store.get("down3.w").is_some());
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let cfg = ModelConfig::toy();
        let store: ParamStore = init_params(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let prefix = dir.path().join("weights");
        store.save(&prefix).unwrap();
        let back = ParamStore::<f64>::load(&prefix).unwrap();
        back.validate_against(&cfg).unwrap();
        for ((n, t), (m, u)) in store.iter().zip(back.iter()) {
            assert_eq!(n, m);
            assert_eq!(t.data(), u.data());
        }
        // the wrong config notices immediately
        assert!(back.validate_against(&ModelConfig::tiny()).is_err());
    }

    #[test]
    fn replace_guards_name_and_shape() {
        let cfg = ModelConfig::toy();
        let mut store: ParamStore = init_params(&cfg).unwrap();
        let bad = TensorBase::zeros(vec![3]);
        assert!(store.replace("stage1.block0.attn.head0.alpha", bad).is_err());
        assert!(store.replace("nope", TensorBase::zeros(vec![1])).is_err());
        let old = store
            .replace("stage1.block0.attn.head0.alpha", TensorBase::full(vec![1], 2.0))
            .unwrap();
        assert_eq!(old.data(), &[1.0]);
        assert_eq!(store.get("stage1.block0.attn.head0.alpha").unwrap().data(), &[2.0]);
    }
}
