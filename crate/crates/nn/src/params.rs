use std::collections::BTreeMap;

use crate::error::NnError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One named parameter array plus its gradient marker.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// `false` marks arrays that must never receive gradients (EMA targets).
    pub trainable: bool,
}

/// Named parameter arrays, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

/// Gradients keyed by parameter name.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NnError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .range(prefix.to_string()..)
            .map(|(k, _)| k.as_str())
            .take_while(move |k| k.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Replaces the value of an existing parameter, keeping its marker.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(NnError::ParamShape {
                name: name.to_string(),
                expected: entry.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    /// Copies every array under `src_prefix` onto the same-suffix array under `dst_prefix`.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) -> Result<(), NnError> {
        let pairs = self.aligned_pairs(src_prefix, dst_prefix)?;
        for (src, dst) in pairs {
            let value = self.entries[&src].value.clone();
            self.set(&dst, value)?;
        }
        Ok(())
    }

    /// Matches `src_prefix.*` with `dst_prefix.*` by suffix; both sides must
    /// have the same suffix set and shapes.
    pub fn aligned_pairs(&self, src_prefix: &str, dst_prefix: &str) -> Result<Vec<(String, String)>, NnError> {
        let src: Vec<&str> = self.names_with_prefix(src_prefix).collect();
        let dst: Vec<&str> = self.names_with_prefix(dst_prefix).collect();
        if src.len() != dst.len() {
            return Err(NnError::Shape(format!(
                "`{src_prefix}` has {} arrays but `{dst_prefix}` has {}",
                src.len(),
                dst.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src.len());
        for s in src {
            let suffix = &s[src_prefix.len()..];
            let d = format!("{dst_prefix}{suffix}");
            let dv = self.get(&d)?;
            let sv = &self.entries[s];
            if dv.value.shape() != sv.value.shape() {
                return Err(NnError::ParamShape {
                    name: d,
                    expected: sv.value.shape().to_vec(),
                    got: dv.value.shape().to_vec(),
                });
            }
            pairs.push((s.to_string(), d));
        }
        Ok(pairs)
    }

    /// Little-endian bytes of every array whose name starts with `prefix`,
    /// name-prefixed, in name order. Suitable for hashing.
    pub fn digest_bytes(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for name in self.names_with_prefix(prefix) {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            for &v in self.entries[name].value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("online.a.w", Tensor::full(&[2], 1.0), true);
        s.insert("online.b.w", Tensor::full(&[3], 2.0), true);
        s.insert("target.a.w", Tensor::zeros(&[2]), false);
        s.insert("target.b.w", Tensor::zeros(&[3]), false);
        s.insert("other", Tensor::zeros(&[1]), true);
        s
    }

    #[test]
    fn prefix_iteration_is_exact() {
        let s = store();
        let names: Vec<_> = s.names_with_prefix("online.").collect();
        assert_eq!(names, vec!["online.a.w", "online.b.w"]);
        assert_eq!(s.names_with_prefix("nothing").count(), 0);
    }

    #[test]
    fn copy_prefix_aligns_by_suffix() {
        let mut s = store();
        s.copy_prefix("online.", "target.").unwrap();
        assert_eq!(s.value("target.b.w").unwrap().data(), &[2.0; 3]);
        assert!(!s.get("target.b.w").unwrap().trainable);
    }

    #[test]
    fn misaligned_prefixes_error() {
        let mut s = store();
        s.insert("target.c.w", Tensor::zeros(&[1]), false);
        assert!(s.aligned_pairs("online.", "target.").is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = store();
        assert!(s.set("other", Tensor::zeros(&[2])).is_err());
        assert!(s.set("missing", Tensor::zeros(&[1])).is_err());
    }
}
