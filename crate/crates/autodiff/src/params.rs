//! Named parameter storage with per-parameter freeze flags.

use ndarray::Array2;
use std::collections::BTreeMap;

/// A single named parameter.
#[derive(Clone)]
pub struct Param {
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// A parameter bound onto a tape: frozen parameters bind as constants, so
/// their gradients are structurally zero and optimizers never see them.
#[derive(Clone, Copy)]
pub struct Binding {
    pub tx: crate::Tx,
    pub trainable: bool,
}

/// Ordered map from parameter name to value. Iteration order is the lexical
/// order of names, which keeps optimizer updates and checkpoints
/// reproducible.
#[derive(Default, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a trainable parameter. Panics on duplicate names: every
    /// parameter is registered exactly once at construction.
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let prev = self.map.insert(
            name.to_string(),
            Param {
                value,
                trainable: true,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        &mut self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
            .trainable
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    /// Returns how many parameters were affected.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = false;
                n += 1;
            }
        }
        n
    }

    /// Mark every parameter whose name starts with `prefix` as trainable.
    pub fn unfreeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = true;
                n += 1;
            }
        }
        n
    }

    /// Bind a parameter onto a tape. Trainable parameters become
    /// differentiable leaves; frozen ones become constants.
    pub fn bind(&self, tape: &mut crate::Tape, name: &str) -> Binding {
        let p = self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"));
        let tx = if p.trainable {
            tape.leaf(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        Binding {
            tx,
            trainable: p.trainable,
        }
    }

    /// Names in lexical order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }
}

/// Parameters bound onto one tape, keyed by name. Collects per-name
/// gradients after the backward pass.
#[derive(Default)]
pub struct Bindings {
    map: BTreeMap<String, Binding>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind `name` from the store onto the tape and remember the handle.
    /// Idempotent per tape: a repeat bind returns the existing node, so every
    /// use of a parameter shares one leaf and its gradients accumulate.
    pub fn bind(&mut self, store: &ParamStore, tape: &mut crate::Tape, name: &str) -> crate::Tx {
        if let Some(b) = self.map.get(name) {
            return b.tx;
        }
        let b = store.bind(tape, name);
        self.map.insert(name.to_string(), b);
        b.tx
    }

    pub fn tx(&self, name: &str) -> crate::Tx {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {name}"))
            .tx
    }

    /// Gradients of all trainable bound parameters that received any,
    /// keyed by name.
    pub fn collect_grads(
        &self,
        tape: &crate::Tape,
        grads: &crate::Grads,
    ) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, b) in &self.map {
            if b.trainable && grads.has(b.tx) {
                out.insert(name.clone(), grads.of(b.tx, tape));
            }
        }
        out
    }
}

/// `acc += delta`, entry-wise per name.
pub fn accumulate_grads(
    acc: &mut BTreeMap<String, Array2<f64>>,
    delta: BTreeMap<String, Array2<f64>>,
) {
    for (name, d) in delta {
        match acc.get_mut(&name) {
            Some(a) => *a += &d,
            None => {
                acc.insert(name, d);
            }
        }
    }
}

/// Multiply every gradient by `c` in place.
pub fn scale_grads(grads: &mut BTreeMap<String, Array2<f64>>, c: f64) {
    for g in grads.values_mut() {
        g.mapv_inplace(|e| e * c);
    }
}

/// Rescale the whole gradient map so its global Euclidean norm does not
/// exceed `max_norm`; gradients already inside the ball are untouched.
/// Returns the pre-clip global norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
    let total: f64 = grads
        .values()
        .map(|g| g.iter().map(|e| e * e).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        scale_grads(grads, max_norm / norm);
    }
    norm
}

/// Uniform init on `[-limit, limit)`.
pub fn uniform_init<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Glorot/Xavier uniform init: `limit = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform_init(rng, rows, cols, limit)
}
