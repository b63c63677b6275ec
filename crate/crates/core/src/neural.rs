//! Dense ReLU networks with hand-written reverse mode.
//!
//! Samples are stored column-wise, so a batch of `B` inputs is an
//! `n_in x B` matrix. The flat parameter layout is, layer by layer, the
//! weight matrix in row-major order followed by the bias.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_f64s, read_magic, read_usize, write_f64s, write_magic, write_u64};
use crate::error::check_len;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"OIFMLP1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub n_in: usize,
    /// Number of hidden layers; zero gives a single affine map.
    pub n_hidden_layers: usize,
    pub hidden_width: usize,
    pub n_out: usize,
}

impl MlpSpec {
    pub fn new(n_in: usize, n_hidden_layers: usize, hidden_width: usize, n_out: usize) -> Result<Self> {
        if n_in == 0 || n_out == 0 || (n_hidden_layers > 0 && hidden_width == 0) {
            return Err(Error::InvalidArgument(format!(
                "network widths must be positive (n_in={n_in}, hidden={hidden_width}, n_out={n_out})"
            )));
        }
        Ok(Self {
            n_in,
            n_hidden_layers,
            hidden_width,
            n_out,
        })
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.n_hidden_layers + 1);
        let mut prev = self.n_in;
        for _ in 0..self.n_hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.n_out));
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    generation: u64,
}

/// Activations recorded by [`Mlp::forward_cached`]: the input of every layer
/// and the ReLU masks of the hidden ones.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<DMatrix<f64>>,
    masks: Vec<DMatrix<f64>>,
}

/// Primal and tangent activations recorded by [`Mlp::forward_dual`].
#[derive(Debug, Clone)]
pub struct DualCache {
    primal: ForwardCache,
    tangents: Vec<DMatrix<f64>>,
}

fn relu_mask(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                w: DMatrix::zeros(o, i),
                b: DVector::zeros(o),
            })
            .collect();
        Self {
            spec,
            layers,
            generation: 0,
        }
    }

    /// Kaiming-uniform weights, bound `sqrt(6 / fan_in)` (the rectifier gain
    /// `sqrt(2)` times `sqrt(3 / fan_in)`); biases uniform on
    /// `+-1/sqrt(fan_in)`.
    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(spec);
        for layer in &mut net.layers {
            let fan_in = layer.w.ncols() as f64;
            let wb = (6.0 / fan_in).sqrt();
            let bb = 1.0 / fan_in.sqrt();
            for r in 0..layer.w.nrows() {
                for c in 0..layer.w.ncols() {
                    layer.w[(r, c)] = rng.random_range(-wb..=wb);
                }
            }
            for v in layer.b.iter_mut() {
                *v = rng.random_range(-bb..=bb);
            }
        }
        net
    }

    pub fn from_params(spec: MlpSpec, params: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(spec);
        net.set_params(params)?;
        net.generation = 0;
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Bumped on every parameter update; caches from older generations are
    /// rejected.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            for r in 0..layer.w.nrows() {
                out.extend(layer.w.row(r).iter());
            }
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("network parameters", self.n_params(), params.len())?;
        let mut p = 0;
        for layer in &mut self.layers {
            let (o, i) = layer.w.shape();
            for r in 0..o {
                for c in 0..i {
                    layer.w[(r, c)] = params[p];
                    p += 1;
                }
            }
            for v in layer.b.iter_mut() {
                *v = params[p];
                p += 1;
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Weight matrix and bias of layer `l` (test and construction helper).
    pub fn layer(&self, l: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.layers[l].w, &self.layers[l].b)
    }

    pub fn set_layer(&mut self, l: usize, w: DMatrix<f64>, b: DVector<f64>) -> Result<()> {
        let layer = &mut self.layers[l];
        check_len("layer rows", layer.w.nrows(), w.nrows())?;
        check_len("layer cols", layer.w.ncols(), w.ncols())?;
        check_len("layer bias", layer.b.len(), b.len())?;
        layer.w = w;
        layer.b = b;
        self.generation += 1;
        Ok(())
    }

    fn affine(layer: &Layer, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &layer.w * a;
        for mut col in z.column_iter_mut() {
            col += &layer.b;
        }
        z
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("network input", self.spec.n_in, input.nrows())?;
        let n = self.layers.len();
        let mut a = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &a);
            if l + 1 < n {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_vec(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward(&DMatrix::from_column_slice(input.len(), 1, input.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    pub fn forward_cached(&self, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        check_len("network input", self.spec.n_in, input.nrows())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n - 1);
        let mut a = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &a);
            inputs.push(a);
            if l + 1 < n {
                let m = relu_mask(&z);
                z.component_mul_assign(&m);
                masks.push(m);
            }
            a = z;
        }
        Ok((
            a,
            ForwardCache {
                generation: self.generation,
                inputs,
                masks,
            },
        ))
    }

    /// Smallest `|pre-activation|` over all hidden units and samples
    /// (infinite without hidden layers). Finite differences are only
    /// meaningful when this is comfortably positive.
    pub fn kink_margin(&self, input: &DMatrix<f64>) -> Result<f64> {
        check_len("network input", self.spec.n_in, input.nrows())?;
        let mut margin = f64::INFINITY;
        let mut a = input.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            let z = Self::affine(layer, &a);
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.map(|v| v.max(0.0));
        }
        Ok(margin)
    }

    fn check_cache(&self, generation: u64, batch: usize, adjoint: &DMatrix<f64>) -> Result<()> {
        if generation != self.generation {
            return Err(Error::StaleCache);
        }
        check_len("output adjoint rows", self.spec.n_out, adjoint.nrows())?;
        check_len("output adjoint batch", batch, adjoint.ncols())
    }

    /// Reverse sweep for `<adjoint, output>` summed over the batch. Adds the
    /// parameter gradient into `grad` (if given) and returns the input
    /// adjoint.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        adjoint: &DMatrix<f64>,
        mut grad: Option<&mut [f64]>,
    ) -> Result<DMatrix<f64>> {
        self.check_cache(cache.generation, cache.inputs[0].ncols(), adjoint)?;
        if let Some(g) = grad.as_deref() {
            check_len("parameter gradient", self.n_params(), g.len())?;
        }
        let offsets = self.offsets();
        let mut delta = adjoint.clone();
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                delta.component_mul_assign(&cache.masks[l]);
            }
            let layer = &self.layers[l];
            if let Some(g) = grad.as_deref_mut() {
                accumulate(g, offsets[l], &(&delta * cache.inputs[l].transpose()), &delta);
            }
            delta = layer.w.tr_mul(&delta);
        }
        Ok(delta)
    }

    pub fn grad_params(&self, cache: &ForwardCache, adjoint: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.n_params()];
        self.backward(cache, adjoint, Some(&mut g))?;
        Ok(g)
    }

    pub fn grad_input(&self, cache: &ForwardCache, adjoint: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.backward(cache, adjoint, None)
    }

    /// Forward mode alongside the primal pass: returns the output and its
    /// directional derivative along `tangent`.
    pub fn forward_dual(
        &self,
        input: &DMatrix<f64>,
        tangent: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DualCache)> {
        check_len("tangent rows", input.nrows(), tangent.nrows())?;
        check_len("tangent batch", input.ncols(), tangent.ncols())?;
        let (out, primal) = self.forward_cached(input)?;
        let n = self.layers.len();
        let mut tangents = Vec::with_capacity(n);
        let mut t = tangent.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut zt = &layer.w * &t;
            tangents.push(t);
            if l + 1 < n {
                zt.component_mul_assign(&primal.masks[l]);
            }
            t = zt;
        }
        Ok((out, t, DualCache { primal, tangents }))
    }

    /// Reverse sweep through the dual pass for
    /// `<adj_out, output> + <adj_tangent, output tangent>`. The ReLU masks
    /// are piecewise constant, so they carry no derivative of their own.
    /// Returns the adjoints of the input and of the input tangent.
    pub fn backward_dual(
        &self,
        cache: &DualCache,
        adj_out: &DMatrix<f64>,
        adj_tangent: &DMatrix<f64>,
        grad: &mut [f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let batch = cache.primal.inputs[0].ncols();
        self.check_cache(cache.primal.generation, batch, adj_out)?;
        self.check_cache(cache.primal.generation, batch, adj_tangent)?;
        check_len("parameter gradient", self.n_params(), grad.len())?;
        let offsets = self.offsets();
        let mut d = adj_out.clone();
        let mut dt = adj_tangent.clone();
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                d.component_mul_assign(&cache.primal.masks[l]);
                dt.component_mul_assign(&cache.primal.masks[l]);
            }
            let gw = &d * cache.primal.inputs[l].transpose() + &dt * cache.tangents[l].transpose();
            accumulate(grad, offsets[l], &gw, &d);
            let w = &self.layers[l].w;
            d = w.tr_mul(&d);
            dt = w.tr_mul(&dt);
        }
        Ok((d, dt))
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut p = 0;
        for layer in &self.layers {
            out.push(p);
            p += layer.w.len() + layer.b.len();
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_magic(w, MAGIC)?;
        for v in [
            self.spec.n_in,
            self.spec.n_hidden_layers,
            self.spec.hidden_width,
            self.spec.n_out,
        ] {
            write_u64(w, v as u64)?;
        }
        write_f64s(w, &self.params())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, MAGIC)?;
        let n_in = read_usize(r)?;
        let n_h = read_usize(r)?;
        let width = read_usize(r)?;
        let n_out = read_usize(r)?;
        let spec = MlpSpec::new(n_in, n_h, width, n_out)?;
        let params = read_f64s(r, spec.n_params())?;
        Self::from_params(spec, &params)
    }
}

/// Adds a layer's weight gradient (row-major) and the batch sum of `delta`
/// (bias gradient) into the flat gradient at `offset`.
fn accumulate(grad: &mut [f64], offset: usize, gw: &DMatrix<f64>, delta: &DMatrix<f64>) {
    let (o, i) = gw.shape();
    let mut p = offset;
    for r in 0..o {
        for c in 0..i {
            grad[p] += gw[(r, c)];
            p += 1;
        }
    }
    for r in 0..o {
        grad[p] += delta.row(r).sum();
        p += 1;
    }
}
