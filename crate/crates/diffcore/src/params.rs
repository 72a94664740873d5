use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Error, Result};
use crate::{Gradients, Scalar, Tape, Tensor, Var};

/// Named collection of trainable tensors. Paths are dot-separated
/// (`det.va.u`); iteration order is the lexicographic path order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(path.into(), t)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Binding { vars }
    }

    /// Gradient for every bound parameter; unreachable ones get zeros.
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients<T>) -> ModelParams<T> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let g = binding
                    .vars
                    .get(k)
                    .map(|&var| grads.get_or_zeros(var, v.shape()))
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect();
        ModelParams { tensors }
    }

    /// Writes one line per tensor: `path shape base64(f32 little-endian data)`.
    /// The shape is written as comma-separated extents.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        for (path, t) in &self.tensors {
            let shape = t
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for x in t.data() {
                bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
            writeln!(w, "{path} {shape} {}", STANDARD.encode(&bytes))?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: impl BufRead) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (ix, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = ix + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Checkpoint { line: lineno, msg };
            let mut parts = line.split(' ');
            let (Some(path), Some(shape), Some(payload), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected `path shape data`".into()));
            };
            let shape = shape
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("bad shape: {e}")))?;
            let bytes = STANDARD
                .decode(payload)
                .map_err(|e| bad(format!("bad base64: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(bad("payload is not a whole number of f32 values".into()));
            }
            let data: Vec<T> = bytes
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?;
            if tensors.insert(path.to_string(), t).is_some() {
                return Err(bad(format!("duplicate path `{path}`")));
            }
        }
        Ok(Self { tensors })
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.vars.contains_key(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams<f32> {
        let mut p = ModelParams::new();
        p.insert("a.w", Tensor::from_vec(&[2, 2], vec![1.5, -2.0, 3.25, f32::MIN_POSITIVE]));
        p.insert("a.b", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = ModelParams::<f32>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
        let mut buf2 = Vec::new();
        q.write_checkpoint(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn checkpoint_line_layout() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("a.b 3 "));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let err = ModelParams::<f32>::read_checkpoint(&b"a.w 2,2 !!!\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { line: 1, .. }));
        let err = ModelParams::<f32>::read_checkpoint(&b"a.w 3 AAAAAA==\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { line: 1, .. }));
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let p = sample().cast::<f64>();
        let mut tape = Tape::new();
        let binding = p.bind(&mut tape);
        let b = binding.get("a.b").unwrap();
        let loss = tape.sum_all(b).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = p.collect_grads(&binding, &grads);
        assert_eq!(g.get("a.w").unwrap().data(), &[0.0; 4]);
        assert_eq!(g.get("a.b").unwrap().data(), &[1.0; 3]);
    }
}
