//! Named, ordered weight storage and checkpoint files.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use mvinpaint_tensor::{io, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Normal(0, std) initialisation.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut impl Rng) -> usize {
        let n = Normal::new(0.0f32, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| n.sample(rng));
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> usize {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Writes `weights.mvt` (concatenated MVT1 records) and `weights.idx`
    /// (one `name offset d0,d1,..` line per tensor) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut index = String::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            index.push_str(&format!("{name} {} {}\n", blob.len(), dims.join(",")));
            io::write_tensor(&mut blob, t)?;
        }
        fs::File::create(dir.join("weights.mvt"))?.write_all(&blob)?;
        fs::write(dir.join("weights.idx"), index)?;
        Ok(())
    }

    /// Loads weights saved by [`ParamStore::save`] into a store with the same
    /// names and shapes; any disagreement is a handshake error.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let index = fs::read_to_string(dir.join("weights.idx"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("weights.idx").display())))?;
        let mut blob = Vec::new();
        fs::File::open(dir.join("weights.mvt"))?.read_to_end(&mut blob)?;
        let entries: Vec<&str> = index.lines().filter(|l| !l.trim().is_empty()).collect();
        if entries.len() != self.len() {
            return Err(Error::Handshake(format!("checkpoint has {} tensors, model expects {}", entries.len(), self.len())));
        }
        for (i, line) in entries.iter().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, offset, dims] = parts[..] else {
                return Err(Error::Data(format!("malformed index line {line:?}")));
            };
            if name != self.names[i] {
                return Err(Error::Handshake(format!("tensor {i} is {name}, model expects {}", self.names[i])));
            }
            let offset: usize = offset.parse().map_err(|_| Error::Data(format!("bad offset in {line:?}")))?;
            let t = io::read_tensor(&mut blob.get(offset..).ok_or_else(|| Error::Data(format!("offset past end in {line:?}")))?)?;
            let want: Vec<String> = self.tensors[i].shape().iter().map(|d| d.to_string()).collect();
            if dims != want.join(",") || t.shape() != self.tensors[i].shape() {
                return Err(Error::Handshake(format!(
                    "{name}: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.add_normal("a", &[3, 4], 0.1, &mut rng);
        p.add_const("b", &[4], 0.5);
        p
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = store(1);
        p.save(dir.path()).unwrap();
        let mut q = store(2);
        assert_ne!(p, q);
        q.load_into(dir.path()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn shape_mismatch_is_a_handshake_error() {
        let dir = tempfile::tempdir().unwrap();
        store(1).save(dir.path()).unwrap();
        let mut q = ParamStore::new();
        q.add_const("a", &[4, 3], 0.0);
        q.add_const("b", &[4], 0.0);
        assert!(matches!(q.load_into(dir.path()), Err(Error::Handshake(_))));
    }
}
