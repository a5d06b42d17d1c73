//! Named learnable parameters.
//!
//! A [`ParamStore`] owns every weight in the model as a named tensor.
//! Forward passes run on a fresh tape per step: [`ParamStore::mount`]
//! registers each parameter as a leaf and returns a [`Bound`] map from
//! [`ParamId`] to tape handle. After `backward`, gradients are read back
//! out of the tape by the optimizer.

use crate::gmic::{read_exact_or, read_u32, write_u32, FormatError};
use crate::real::Real;
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

const PARAMS_MAGIC: &[u8; 4] = b"GMWT";
const PARAMS_VERSION: u32 = 1;

/// Index of a parameter in its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore<F: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a tensor as a learnable parameter. Names must be unique;
    /// the convention is `group.subgroup.name`.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Group prefix of a parameter: everything before the last dot.
    pub fn group(&self, id: ParamId) -> &str {
        let name = self.name(id);
        match name.rfind('.') {
            Some(i) => &name[..i],
            None => name,
        }
    }

    /// Distinct group prefixes in registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for id in self.ids() {
            let g = self.group(id).to_string();
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    /// Registers every parameter on a fresh tape.
    pub fn mount(&self, tape: &mut Tape<F>) -> Bound {
        let vals = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { vals }
    }

    /// Reads one parameter's gradient back from the tape after backward.
    pub fn grad_of<'t>(&self, tape: &'t Tape<F>, bound: &Bound, id: ParamId) -> Option<&'t [F]> {
        tape.grad(bound.vals[id.0])
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let file = File::create(path).map_err(FormatError::from)?;
        let mut w = BufWriter::new(file);
        w.write_all(PARAMS_MAGIC)?;
        write_u32(&mut w, PARAMS_VERSION)?;
        write_u32(&mut w, self.tensors.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.shape.len() as u32)?;
            for &dim in &t.shape {
                write_u32(&mut w, dim as u32)?;
            }
            for &v in &t.data {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads values into an already-registered store. Names, order, and
    /// shapes must match exactly, so the model config used for loading
    /// must equal the one used for saving.
    pub fn load(&mut self, path: &Path) -> Result<(), FormatError> {
        let file = File::open(path).map_err(FormatError::from)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact_or(&mut r, &mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(FormatError::BadMagic { got: magic });
        }
        let version = read_u32(&mut r)?;
        if version != PARAMS_VERSION {
            return Err(FormatError::VersionMismatch {
                expected: PARAMS_VERSION,
                got: version,
            });
        }
        let count = read_u32(&mut r)? as usize;
        if count != self.tensors.len() {
            return Err(FormatError::Structure {
                detail: format!("file has {count} parameters, store has {}", self.tensors.len()),
            });
        }
        for i in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(FormatError::DimOverflow {
                    detail: format!("parameter name length {name_len}"),
                });
            }
            let mut name_bytes = vec![0u8; name_len];
            read_exact_or(&mut r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| FormatError::Structure {
                detail: "parameter name is not UTF-8".into(),
            })?;
            if name != self.names[i] {
                return Err(FormatError::Structure {
                    detail: format!("parameter {i} is {name}, expected {}", self.names[i]),
                });
            }
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 4 {
                return Err(FormatError::DimOverflow {
                    detail: format!("parameter rank {ndim}"),
                });
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            if shape != self.tensors[i].shape {
                return Err(FormatError::Structure {
                    detail: format!(
                        "parameter {name} has shape {shape:?}, expected {:?}",
                        self.tensors[i].shape
                    ),
                });
            }
            let numel: usize = shape.iter().product();
            let mut buf = [0u8; 8];
            for j in 0..numel {
                read_exact_or(&mut r, &mut buf)?;
                self.tensors[i].data[j] = F::from_f64(f64::from_le_bytes(buf));
            }
        }
        Ok(())
    }
}

/// Tape handles of mounted parameters, aligned with store order.
pub struct Bound {
    vals: Vec<Val>,
}

impl Bound {
    pub fn val(&self, id: ParamId) -> Val {
        self.vals[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_strip_the_last_component() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("gia.v_from_s.wq", Tensor::zeros(vec![2, 2]));
        let _b = store.register("gia.v_from_s.wk", Tensor::zeros(vec![2, 2]));
        let _c = store.register("head.wc", Tensor::zeros(vec![2, 2]));
        assert_eq!(store.group(a), "gia.v_from_s");
        assert_eq!(store.groups(), vec!["gia.v_from_s".to_string(), "head".to_string()]);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("gmic_param_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.gmwt");

        let mut store = ParamStore::<f64>::new();
        store.register("a.w", Tensor::new(vec![2, 2], vec![1.5, -2.25, 0.125, 3.0]).unwrap());
        store.register("a.b", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        store.save(&path).unwrap();

        let mut other = ParamStore::<f64>::new();
        let w = other.register("a.w", Tensor::zeros(vec![2, 2]));
        let b = other.register("a.b", Tensor::zeros(vec![2]));
        other.load(&path).unwrap();
        assert_eq!(other.tensor(w).data, vec![1.5, -2.25, 0.125, 3.0]);
        assert_eq!(other.tensor(b).data, vec![0.5, -0.5]);
    }

    #[test]
    fn load_rejects_shape_drift() {
        let dir = std::env::temp_dir().join("gmic_param_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.gmwt");

        let mut store = ParamStore::<f64>::new();
        store.register("a.w", Tensor::zeros(vec![2, 2]));
        store.save(&path).unwrap();

        let mut other = ParamStore::<f64>::new();
        other.register("a.w", Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            other.load(&path),
            Err(FormatError::Structure { .. })
        ));
    }
}
