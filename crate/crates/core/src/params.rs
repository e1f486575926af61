//! Named parameter storage shared by every model component.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map of hierarchical names (`encoder.block0.attn.wq`) to tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.split('.').any(str::is_empty) {
            return Err(Error::invalid(format!("malformed parameter name {name:?}")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let (i, _) = self.params.insert_full(name, tensor);
        Ok(ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).unwrap().0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    /// Mutable access to several tensors at once; `ids` must be strictly
    /// increasing.
    pub fn many_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor<T>> {
        assert!(
            ids.windows(2).all(|w| w[0].0 < w[1].0),
            "ids must be strictly increasing"
        );
        let mut want = ids.iter().map(|id| id.0).peekable();
        self.params
            .values_mut()
            .enumerate()
            .filter_map(|(i, t)| {
                (want.peek() == Some(&i)).then(|| {
                    want.next();
                    t
                })
            })
            .collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Put every parameter on `tape` as a leaf. The returned handles are
    /// indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|(name, t)| tape.leaf(t.clone(), trainable(name)))
                .collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// `uniform(±1/sqrt(fan_in))` for a `[fan_in, fan_out]` weight.
pub fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::from_f64c(rng.gen_range(-bound..bound)))
}

/// SHA-256 over names, shapes and native-precision values.
pub fn fingerprint<'a, T: Real>(tensors: impl Iterator<Item = (&'a str, &'a Tensor<T>)>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        buf.clear();
        for &v in t.data() {
            v.le_bytes(&mut buf);
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_names() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.b", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a.b", Tensor::zeros(&[1])).is_err());
        assert!(s.add("", Tensor::zeros(&[1])).is_err());
        assert!(s.add("a..c", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn fingerprint_sees_every_bit() {
        let a = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert_ne!(
            fingerprint([("w", &a)].into_iter()),
            fingerprint([("w", &b)].into_iter())
        );
        assert_ne!(
            fingerprint([("w", &a)].into_iter()),
            fingerprint([("v", &a)].into_iter())
        );
    }
}
