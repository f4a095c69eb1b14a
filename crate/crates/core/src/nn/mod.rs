//! Minimal neural-network machinery: scalar abstraction, named parameter
//! storage, layer kernels with explicit reverse-mode gradients, the
//! encoder-decoder backbone and the dose/timestep embedding.

pub mod checkpoint;
pub mod embedding;
pub mod layers;
pub mod optim;
pub mod unet;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::Range;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

pub use embedding::{dose_time_features, sinusoidal_features, DoseEncoding};
pub use unet::{Backbone, BackboneConfig, EmbeddingMode, ForwardCache};

/// Floating-point types the network can run in.
///
/// Training and sampling use `f32`; gradient checks run in `f64`.
pub trait Scalar: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` for strided row/column-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                rsc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, 1);
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Location of one named array inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: ParamRef,
    /// Fan-in used by the initializer; 0 marks a bias (initialized to zero).
    pub fan_in: usize,
}

/// Named parameter arrays backed by one contiguous vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry>,
    values: Vec<S>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamRef {
        let len = shape.iter().product();
        let slot = ParamRef {
            offset: self.values.len(),
            len,
        };
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            slot,
            fan_in,
        });
        self.values.resize(self.values.len() + len, S::zero());
        slot
    }

    /// Centered uniform weights scaled by fan-in, zero biases.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        for e in &self.entries {
            let vals = &mut self.values[e.slot.range()];
            if e.fan_in == 0 {
                vals.iter_mut().for_each(|v| *v = S::zero());
            } else {
                let bound = 1.0 / (e.fan_in as f64).sqrt();
                for v in vals.iter_mut() {
                    *v = S::lit(rng.random_range(-bound..bound));
                }
            }
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn get(&self, slot: ParamRef) -> &[S] {
        &self.values[slot.range()]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<S> {
        vec![S::zero(); self.values.len()]
    }

    /// Copies the values into another scalar type with the same layout.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self.entries.clone(),
            values: self.values.iter().map(|v| T::lit(v.to_f64().unwrap())).collect(),
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
