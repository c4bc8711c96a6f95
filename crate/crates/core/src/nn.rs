//! Named parameter storage, per-pass tape sessions and the basic layers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{relative_error, NormMode, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Sum of scalar counts over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    record_grads: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            record_grads: true,
        }
    }

    /// Parameters enter the tape as constants; nothing is differentiable.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            record_grads: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.record_grads {
            self.tape.param(id.0, t)
        } else {
            self.tape.constant(t.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients per parameter after `backward`; unused parameters get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for (id, g) in self.tape.param_grads() {
            for (o, v) in out[id].iter_mut().zip(g) {
                *o += v;
            }
        }
        out
    }
}

/// Seeded Gaussian initializer.
pub struct Init {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn default_normal(&mut self, shape: &[usize]) -> Result<Tensor> {
        let std = self.std;
        self.normal(shape, std)
    }
}

/// `y = x·W + b` over the last axis; `W` is stored `in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::scaled(store, init, name, d_in, d_out, 1.0)
    }

    /// Weights drawn with the initializer's std multiplied by `gain`.
    pub fn scaled(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Result<Self> {
        let std = init.std * gain;
        let weight = store.add(format!("{name}.weight"), init.normal(&[d_in, d_out], std)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            d_in,
            d_out,
        })
    }

    /// `y = x·W`; used where a bias cannot change the result.
    pub fn unbiased(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.default_normal(&[d_in, d_out])?)?;
        Ok(Self {
            weight,
            bias: None,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.d_in {
            return Err(TensorError::Dimension(format!(
                "linear expects last extent {}, got {shape:?}",
                self.d_in
            )));
        }
        let rows = s.tape.value(x).len() / self.d_in;
        let flat = s.tape.reshape(x, &[rows, self.d_in])?;
        let w = s.param(self.weight);
        let mut y = s.tape.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = s.param(b);
            y = s.tape.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.d_out;
        s.tape.reshape(y, &out_shape)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.bias.map_or(0, |_| self.d_out)
    }
}

/// Normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub mode: NormMode,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, mode: NormMode) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
        Ok(Self { gain, bias, mode })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.layer_norm(x, g, b, self.mode)
    }
}

/// Worst finite-difference disagreement over (a sample of) parameter coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
}

/// Compares tape gradients of the scalar `loss` with central differences,
/// checking at most `per_param` coordinates of every parameter tensor
/// (chosen with a seeded generator when a tensor is larger).
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    loss: F,
    step: f64,
    per_param: usize,
    seed: u64,
) -> Result<ParamGradReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store);
        let out = loss(&mut s)?;
        s.tape.backward(out)?;
        s.grads()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(store);
        let out = loss(&mut s)?;
        let v = s.tape.value(out).item()?;
        if !v.is_finite() {
            return Err(TensorError::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ParamGradReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let err = relative_error(analytic[id.0][i], numeric);
            report.coordinates_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.worst_analytic = analytic[id.0][i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
