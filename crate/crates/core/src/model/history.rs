use crate::error::{Error, Result};

/// Cached keys and values of one layer, row-major `[positions, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvLayer {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

/// Per-layer key/value tensors over a run of positions. Serves both as the
/// history itself and as an additive perturbation of it.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensors {
    width: usize,
    positions: usize,
    layers: Vec<KvLayer>,
}

/// A perturbation has exactly the shape of the history it is added to.
pub type Perturbation = KvTensors;

impl KvTensors {
    pub fn zeros(layers: usize, positions: usize, width: usize) -> Self {
        let layer = KvLayer {
            keys: vec![0.0; positions * width],
            values: vec![0.0; positions * width],
        };
        Self {
            width,
            positions,
            layers: vec![layer; layers],
        }
    }

    pub fn from_layers(width: usize, positions: usize, layers: Vec<KvLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.keys.len() != positions * width || l.values.len() != positions * width {
                return Err(Error::Shape(format!(
                    "layer {i}: expected {} values per tensor",
                    positions * width
                )));
            }
        }
        Ok(Self {
            width,
            positions,
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layers.len(), self.positions, self.width)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[KvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KvLayer] {
        &mut self.layers
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.positions == other.positions && self.layers.len() == other.layers.len()
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "({} layers, {} positions, width {}) vs ({} layers, {} positions, width {})",
                self.layers.len(),
                self.positions,
                self.width,
                other.layers.len(),
                other.positions,
                other.width
            )))
        }
    }

    /// All tensors, keys then values per layer.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.keys.as_slice(), l.values.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.keys, &mut l.values])
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().flat_map(|t| t.iter().copied())
    }

    pub fn num_elements(&self) -> usize {
        2 * self.layers.len() * self.positions * self.width
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|x| x == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Zeroes every position before `start`.
    pub fn clear_before(&mut self, start: usize) {
        let cut = start.min(self.positions) * self.width;
        for t in self.tensors_mut() {
            t[..cut].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Rescales each tensor to unit L2 norm; all-zero tensors stay zero.
    pub fn normalize_per_tensor(&mut self) {
        for t in self.tensors_mut() {
            let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                t.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    /// Appends one position per layer.
    pub(crate) fn push_rows(&mut self, rows: &[(&[f64], &[f64])]) {
        debug_assert_eq!(rows.len(), self.layers.len());
        for (layer, (k, v)) in self.layers.iter_mut().zip(rows) {
            layer.keys.extend_from_slice(k);
            layer.values.extend_from_slice(v);
        }
        self.positions += 1;
    }
}

/// The model's cached per-layer state summarizing consumed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryState {
    kv: KvTensors,
}

impl HistoryState {
    pub fn new(kv: KvTensors) -> Self {
        Self { kv }
    }

    pub fn empty(layers: usize, width: usize) -> Self {
        Self {
            kv: KvTensors::zeros(layers, 0, width),
        }
    }

    /// Number of consumed tokens.
    pub fn len(&self) -> usize {
        self.kv.positions
    }

    pub fn is_empty(&self) -> bool {
        self.kv.positions == 0
    }

    pub fn kv(&self) -> &KvTensors {
        &self.kv
    }

    pub fn into_kv(self) -> KvTensors {
        self.kv
    }

    /// A zero perturbation of matching shape.
    pub fn zero_perturbation(&self) -> Perturbation {
        self.kv.zeros_like()
    }

    /// `H + delta`.
    pub fn perturbed(&self, delta: &Perturbation) -> Result<HistoryState> {
        let mut kv = self.kv.clone();
        kv.axpy(1.0, delta)?;
        Ok(HistoryState { kv })
    }
}
