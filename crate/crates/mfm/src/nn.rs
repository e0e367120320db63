//! Parameter registry, initialization, and convolution layer wrappers.
//!
//! All learnable tensors live in a [`ParamStore`]; layers hold [`ParamId`]
//! handles. Per forward pass the store is bound onto a tape once, which
//! makes "every parameter is optimized exactly once" a structural property.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::tensor::{Conv3dSpec, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Ordered, uniquely named set of learnable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name '{name}'"
        );
        self.entries.push(ParamEntry { name: name.to_string(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn set_zero(&mut self, id: ParamId) {
        self.entries[id.0].value.fill(F::zero());
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<F>)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every parameter on a tape, in declaration order.
    pub fn bind(&self, tape: &Tape<F>) -> Binding {
        Binding { vars: self.entries.iter().map(|e| tape.input(e.value.clone())).collect() }
    }
}

/// Tape handles for one bound pass over the store.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fan-in-scaled normal init: std = sqrt(2 / fan_in). Draws are taken in
/// f64 so f32 and f64 instantiations of the same seed agree up to rounding.
pub fn he_normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        F::c(rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
    })
}

/// Negative slope shared by every activation in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv3dSpec,
}

impl Conv3dLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        spec: Conv3dSpec,
    ) -> Self {
        let [kd, kh, kw] = spec.kernel;
        let fan_in = cin * kd * kh * kw;
        let w = store.add(&format!("{name}.weight"), he_normal(rng, &[cout, cin, kd, kh, kw], fan_in));
        let b = store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Conv3dLayer { w, b, spec }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, x: Var) -> Var {
        tape.conv3d(x, bind.var(self.w), bind.var(self.b), self.spec)
    }
}

/// 2D convolution as a depth-1 3D convolution over `(B, C, H, W)` tensors.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv3dSpec,
}

impl Conv2dLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let spec = Conv3dSpec { kernel: [1, kernel, kernel], stride: [1, stride, stride], pad: [0, pad, pad] };
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            &format!("{name}.weight"),
            he_normal(rng, &[cout, cin, 1, kernel, kernel], fan_in),
        );
        let b = store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2dLayer { w, b, spec }
    }

    pub fn forward<F: Scalar>(&self, tape: &Tape<F>, bind: &Binding, x: Var) -> Var {
        let sh = tape.shape(x);
        assert_eq!(sh.len(), 4, "conv2d expects (B, C, H, W)");
        let x5 = tape.reshape(x, &[sh[0], sh[1], 1, sh[2], sh[3]]);
        let y5 = tape.conv3d(x5, bind.var(self.w), bind.var(self.b), self.spec);
        let ysh = tape.shape(y5);
        tape.reshape(y5, &[ysh[0], ysh[1], ysh[3], ysh[4]])
    }
}
