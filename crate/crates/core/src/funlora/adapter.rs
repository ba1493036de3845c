use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FunLoraError, Result};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Family of functions applied to the rank-1 factors.
///
/// `VanillaAdd` and `VanillaMul` both produce the plain outer product; the
/// way it is merged with the base weight is carried by [`Combine`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FunctionalKind {
    VanillaAdd,
    VanillaMul,
    #[serde(rename = "rshift")]
    RShift {
        p: usize,
    },
    Pow {
        p: usize,
        trainable: bool,
    },
    Cos {
        p: usize,
        trainable: bool,
    },
}

impl FunctionalKind {
    /// Number of functional terms; 0 for vanilla kinds.
    pub fn p(&self) -> usize {
        match *self {
            Self::VanillaAdd | Self::VanillaMul => 0,
            Self::RShift { p } | Self::Pow { p, .. } | Self::Cos { p, .. } => p,
        }
    }

    pub fn is_functional(&self) -> bool {
        self.p() > 0
    }

    /// Whether the kind carries frequencies or exponents.
    pub fn has_hyper(&self) -> bool {
        matches!(self, Self::Pow { .. } | Self::Cos { .. })
    }

    pub fn trainable_hyper(&self) -> bool {
        matches!(self, Self::Pow { trainable: true, .. } | Self::Cos { trainable: true, .. })
    }

    /// `f_i` evaluated on an entry of value 0 is 0 for every term.
    pub fn vanishes_at_zero(&self) -> bool {
        !matches!(self, Self::Cos { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.p() == 0 && !matches!(self, Self::VanillaAdd | Self::VanillaMul) {
            return Err(FunLoraError::Invalid("functional kinds need p >= 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match *self {
            Self::VanillaAdd => "vanilla_add".into(),
            Self::VanillaMul => "vanilla_mul".into(),
            Self::RShift { p } => format!("rshift{p}"),
            Self::Pow { p, trainable } => format!("pow{p}{}", if trainable { "_t" } else { "" }),
            Self::Cos { p, trainable } => format!("cos{p}{}", if trainable { "_t" } else { "" }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `W0 + F`
    Add,
    /// `W0 ⊙ F`
    Mul,
    /// `W0 ⊙ (1 + F)`
    MulAdd,
}

/// Nearest-neighbour upsampling of a reduced `F` back to the layer shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expand {
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
}

/// How new adapters are created.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: FunctionalKind,
    pub combine: Combine,
    pub calibrate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Ponderations, one per functional term.
    pub alphas: Vec<f64>,
    /// Frequencies (cos) or exponents (pow), one per term.
    pub hyper: Vec<f64>,
    pub kind: FunctionalKind,
    pub combine: Combine,
    pub class_label: u32,
    #[serde(default)]
    pub expand: Option<Expand>,
}

/// Result of [`init_adapter`]. `identity_at_init` tells whether the
/// effective weight starts out equal to the base weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Initialized {
    pub adapter: Adapter,
    pub identity_at_init: bool,
}

/// Recorded handles for one adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub alphas: Option<Var>,
    pub hyper: Option<Var>,
    trainable_hyper: bool,
}

impl AdapterVars {
    /// Trainable handles in the order of [`Adapter::trainable_mut`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = vec![self.a, self.b];
        v.extend(self.alphas);
        if self.trainable_hyper {
            v.extend(self.hyper);
        }
        v
    }
}

const CALIBRATION_FLOOR: f64 = 1e-6;

/// Creates an adapter for a `rows × cols` update.
///
/// Multiplicative adapters start from all-ones factors. With `calibrate`,
/// the ponderations are rescaled uniformly so `F` starts as the all-ones
/// matrix; when the divisor is too small to do that safely the ponderations
/// stay at one and `identity_at_init` is false. Additive conventions draw
/// `A` from `N(0, 1/rows)` and zero `B`.
pub fn init_adapter<R: Rng + ?Sized>(
    spec: &AdapterSpec,
    rows: usize,
    cols: usize,
    label: u32,
    rng: &mut R,
) -> Result<Initialized> {
    spec.kind.validate()?;
    if rows == 0 || cols == 0 {
        return Err(FunLoraError::Invalid(format!("adapter dims must be positive, got {rows}x{cols}")));
    }
    let p = spec.kind.p();
    let hyper: Vec<f64> = if spec.kind.has_hyper() { (1..=p).map(|i| i as f64).collect() } else { Vec::new() };
    let mut alphas = vec![1.0; p];
    let (a, b, identity) = match spec.combine {
        Combine::Mul => {
            let mut identity = true;
            if spec.kind.is_functional() {
                let c = calibration_divisor(spec.kind, &hyper);
                if spec.calibrate && c.abs() >= CALIBRATION_FLOOR {
                    alphas = vec![1.0 / c; p];
                } else {
                    identity = (c - 1.0).abs() < 1e-15;
                }
            }
            (vec![1.0; rows], vec![1.0; cols], identity)
        }
        Combine::Add | Combine::MulAdd => {
            let scale = 1.0 / (rows as f64).sqrt();
            let a = (0..rows)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect::<Vec<f64>>();
            (a, vec![0.0; cols], spec.kind.vanishes_at_zero())
        }
    };
    let adapter =
        Adapter { a, b, alphas, hyper, kind: spec.kind, combine: spec.combine, class_label: label, expand: None };
    Ok(Initialized { adapter, identity_at_init: identity })
}

// (1/p) Σ f_i evaluated on an entry equal to 1.
fn calibration_divisor(kind: FunctionalKind, hyper: &[f64]) -> f64 {
    match kind {
        FunctionalKind::Cos { p, .. } => hyper.iter().map(|w| w.cos()).sum::<f64>() / p as f64,
        _ => 1.0,
    }
}

/// Right circular shift: `out[j] = m[(j - i) mod len]`.
pub fn rshift(m: &[f64], i: usize) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(FunLoraError::Invalid("rshift of an empty vector".into()));
    }
    let n = m.len();
    let s = i % n;
    Ok((0..n).map(|j| m[(j + n - s) % n]).collect())
}

/// Outer product of the two shifted factors.
pub fn f_rshift(a: &[f64], b: &[f64], i: usize) -> Result<Tensor> {
    let (ra, rb) = (rshift(a, i)?, rshift(b, i)?);
    let data = ra.iter().flat_map(|x| rb.iter().map(move |y| x * y)).collect();
    Ok(Tensor::matrix(a.len(), b.len(), data)?)
}

impl Adapter {
    /// Shape of the update this adapter produces.
    pub fn output_dims(&self) -> (usize, usize) {
        match self.expand {
            Some(e) => (e.rows, e.cols),
            None => (self.a.len(), self.b.len()),
        }
    }

    /// With `p` at or above the smaller side, the rank bound `p` says nothing.
    pub fn rank_claim_void(&self) -> bool {
        let p = self.kind.p();
        p > 0 && p >= self.a.len().min(self.b.len())
    }

    pub fn check(&self) -> Result<()> {
        self.kind.validate()?;
        let p = self.kind.p();
        let hyper_len = if self.kind.has_hyper() { p } else { 0 };
        if self.a.is_empty() || self.b.is_empty() || self.alphas.len() != p || self.hyper.len() != hyper_len {
            return Err(FunLoraError::Invalid(format!(
                "adapter for class {} has inconsistent field lengths",
                self.class_label
            )));
        }
        Ok(())
    }

    pub fn trainable_len(&self) -> usize {
        let hyper = if self.kind.trainable_hyper() { self.hyper.len() } else { 0 };
        self.a.len() + self.b.len() + self.alphas.len() + hyper
    }

    /// Trainable fields in a fixed order: A, B, α, then hyper if trainable.
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let trainable_hyper = self.kind.trainable_hyper();
        let mut v = vec![&mut self.a, &mut self.b];
        if self.kind.is_functional() {
            v.push(&mut self.alphas);
        }
        if trainable_hyper {
            v.push(&mut self.hyper);
        }
        v
    }

    /// Records the adapter's fields on `tape`, as parameters when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<AdapterVars> {
        self.check()?;
        let leaf = |tape: &mut Tape, t: Tensor, learn: bool| if learn { tape.param(t) } else { tape.constant(t) };
        let a = leaf(tape, Tensor::matrix(self.a.len(), 1, self.a.clone())?, trainable);
        let b = leaf(tape, Tensor::matrix(1, self.b.len(), self.b.clone())?, trainable);
        let alphas = self.kind.is_functional().then(|| leaf(tape, Tensor::vector(self.alphas.clone()), trainable));
        let trainable_hyper = trainable && self.kind.trainable_hyper();
        let hyper = self.kind.has_hyper().then(|| leaf(tape, Tensor::vector(self.hyper.clone()), trainable_hyper));
        Ok(AdapterVars { a, b, alphas, hyper, trainable_hyper })
    }

    /// Builds `F` on `tape` from previously registered handles.
    pub fn functional_on_tape(&self, tape: &mut Tape, v: &AdapterVars) -> Result<Var> {
        let outer = tape.matmul(v.a, v.b)?;
        let p = self.kind.p();
        let f = if p == 0 {
            outer
        } else {
            let alphas = v.alphas.ok_or_else(|| FunLoraError::Invalid("missing ponderations".into()))?;
            let mut acc: Option<Var> = None;
            for i in 0..p {
                let term = match self.kind {
                    FunctionalKind::RShift { .. } => {
                        let ra = tape.roll(v.a, i + 1)?;
                        let rb = tape.roll(v.b, i + 1)?;
                        tape.matmul(ra, rb)?
                    }
                    FunctionalKind::Pow { trainable: false, .. } => tape.pow_by(outer, self.hyper[i])?,
                    FunctionalKind::Pow { trainable: true, .. } => {
                        let e = tape.select(hyper_var(v)?, i)?;
                        let s = tape.sign(outer)?;
                        let m = tape.abs(outer)?;
                        let pw = tape.pow_var(m, e)?;
                        tape.mul(s, pw)?
                    }
                    FunctionalKind::Cos { trainable: false, .. } => {
                        let arg = tape.scale(outer, self.hyper[i])?;
                        tape.cos(arg)?
                    }
                    FunctionalKind::Cos { trainable: true, .. } => {
                        let w = tape.select(hyper_var(v)?, i)?;
                        let arg = tape.mul(w, outer)?;
                        tape.cos(arg)?
                    }
                    FunctionalKind::VanillaAdd | FunctionalKind::VanillaMul => unreachable!(),
                };
                let w = tape.select(alphas, i)?;
                let weighted = tape.mul(w, term)?;
                acc = Some(match acc {
                    Some(s) => tape.add(s, weighted)?,
                    None => weighted,
                });
            }
            let sum = acc.expect("p >= 1");
            tape.scale(sum, 1.0 / p as f64)?
        };
        match self.expand {
            Some(e) if e.k > 1 || (e.rows, e.cols) != (self.a.len(), self.b.len()) => {
                Ok(tape.repeat_expand(f, e.k, e.rows, e.cols)?)
            }
            _ => Ok(f),
        }
    }

    /// `F` as a plain matrix.
    pub fn matrix(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.register(&mut tape, false)?;
        let f = self.functional_on_tape(&mut tape, &v)?;
        Ok(tape.value(f)?.clone())
    }
}

fn hyper_var(v: &AdapterVars) -> Result<Var> {
    v.hyper.ok_or_else(|| FunLoraError::Invalid("missing hyperparameters".into()))
}

/// Merges a base weight with an update matrix.
pub fn combine(w0: &Tensor, f: &Tensor, op: Combine) -> Result<Tensor> {
    let out = match op {
        Combine::Add => w0.zip_map(f, |w, x| w + x),
        Combine::Mul => w0.zip_map(f, |w, x| w * x),
        Combine::MulAdd => w0.zip_map(f, |w, x| w * (1.0 + x)),
    };
    Ok(out?)
}

pub fn combine_on_tape(tape: &mut Tape, w0: Var, f: Var, op: Combine) -> Result<Var> {
    Ok(match op {
        Combine::Add => tape.add(w0, f)?,
        Combine::Mul => tape.mul(w0, f)?,
        Combine::MulAdd => {
            let g = tape.offset(f, 1.0)?;
            tape.mul(w0, g)?
        }
    })
}

/// Scales each `s×s` kernel `(o, i)` of a convolution weight by `f[o, i]`.
pub fn conv_modulate(w0: &Tensor, f: &Tensor) -> Result<Tensor> {
    if w0.rank() != 4 || f.rank() != 2 || w0.shape()[..2] != f.shape()[..] {
        return Err(TensorError::ShapeMismatch {
            op: "conv_modulate",
            left: w0.shape().to_vec(),
            right: f.shape().to_vec(),
        }
        .into());
    }
    let block = w0.shape()[2] * w0.shape()[3];
    let mut data = w0.data().to_vec();
    for (chunk, &s) in data.chunks_mut(block).zip(f.data()) {
        chunk.iter_mut().for_each(|x| *x *= s);
    }
    Ok(Tensor::new(w0.shape().to_vec(), data)?)
}

pub fn conv_modulate_on_tape(tape: &mut Tape, w0: Var, f: Var) -> Result<Var> {
    Ok(tape.scale_blocks(w0, f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    fn mul_spec(kind: FunctionalKind) -> AdapterSpec {
        AdapterSpec { kind, combine: Combine::Mul, calibrate: true }
    }

    fn adapter(kind: FunctionalKind, a: Vec<f64>, b: Vec<f64>, alphas: Vec<f64>, hyper: Vec<f64>) -> Adapter {
        Adapter { a, b, alphas, hyper, kind, combine: Combine::Mul, class_label: 0, expand: None }
    }

    #[test]
    fn rshift_examples() {
        assert_eq!(rshift(&[1., 2., 3.], 1).unwrap(), vec![3., 1., 2.]);
        assert_eq!(rshift(&[1., 2., 3.], 3).unwrap(), vec![1., 2., 3.]);
        assert!(rshift(&[], 1).is_err());
    }

    #[test]
    fn f_rshift_examples() {
        let f = f_rshift(&[1., 2.], &[3., 4.], 1).unwrap();
        assert_eq!(f.data(), &[8., 6., 4., 3.]);
        let f = f_rshift(&[1., 2.], &[3., 4.], 0).unwrap();
        assert_eq!(f.data(), &[3., 4., 6., 8.]);
        let f = f_rshift(&[1.; 3], &[1.; 4], 2).unwrap();
        assert!(f.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn functional_matrix_examples() {
        let v = adapter(FunctionalKind::VanillaMul, vec![1.; 3], vec![1.; 3], vec![], vec![]);
        assert!(v.matrix().unwrap().data().iter().all(|&x| x == 1.0));

        let p = adapter(
            FunctionalKind::Pow { p: 2, trainable: false },
            vec![1., 2.],
            vec![1., 1.],
            vec![1., 1.],
            vec![1., 2.],
        );
        assert_eq!(p.matrix().unwrap().data(), &[1., 1., 3., 3.]);

        let c = adapter(
            FunctionalKind::Cos { p: 1, trainable: false },
            vec![1.; 2],
            vec![1.; 2],
            vec![1.],
            vec![std::f64::consts::PI],
        );
        assert!(c.matrix().unwrap().data().iter().all(|&x| x == -1.0));
    }

    #[test]
    fn rshift_matrix_sums_shifted_outer_products() {
        let a = vec![1., 2., 3.];
        let b = vec![4., 5., 6.];
        let ad = adapter(FunctionalKind::RShift { p: 2 }, a.clone(), b.clone(), vec![2., 3.], vec![]);
        let f = ad.matrix().unwrap();
        let f1 = f_rshift(&a, &b, 1).unwrap();
        let f2 = f_rshift(&a, &b, 2).unwrap();
        for j in 0..9 {
            let want = 0.5 * (2.0 * f1.data()[j] + 3.0 * f2.data()[j]);
            assert!((f.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cos_calibration_value() {
        let mut rng = rng_for(0, Stream::Init, 0);
        let init = init_adapter(&mul_spec(FunctionalKind::Cos { p: 10, trainable: true }), 4, 4, 0, &mut rng).unwrap();
        let sum: f64 = (1..=10).map(|j| (j as f64).cos()).sum();
        assert!((sum + 1.4174).abs() < 1e-4);
        assert!((init.adapter.alphas[0] - (-7.055)).abs() < 1e-3);
        assert!(init.identity_at_init);
        let f = init.adapter.matrix().unwrap();
        assert!(f.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uncalibrated_cos_is_not_identity() {
        let mut rng = rng_for(0, Stream::Init, 0);
        let spec = AdapterSpec { calibrate: false, ..mul_spec(FunctionalKind::Cos { p: 10, trainable: false }) };
        let init = init_adapter(&spec, 4, 4, 0, &mut rng).unwrap();
        assert!(!init.identity_at_init);
        assert_eq!(init.adapter.alphas, vec![1.0; 10]);
    }

    #[test]
    fn additive_init_zeroes_b() {
        let mut rng = rng_for(0, Stream::Init, 0);
        for kind in
            [FunctionalKind::VanillaAdd, FunctionalKind::RShift { p: 3 }, FunctionalKind::Pow { p: 3, trainable: true }]
        {
            let spec = AdapterSpec { kind, combine: Combine::Add, calibrate: false };
            let init = init_adapter(&spec, 5, 4, 0, &mut rng).unwrap();
            assert!(init.identity_at_init);
            assert!(init.adapter.b.iter().all(|&x| x == 0.0));
            assert!(init.adapter.matrix().unwrap().data().iter().all(|&x| x == 0.0));
        }
        // cos(0) = 1, so an additive cosine adapter starts at mean(α) everywhere
        let spec = AdapterSpec {
            kind: FunctionalKind::Cos { p: 3, trainable: false },
            combine: Combine::Add,
            calibrate: false,
        };
        let init = init_adapter(&spec, 5, 4, 0, &mut rng).unwrap();
        assert!(!init.identity_at_init);
        assert!(init.adapter.matrix().unwrap().data().iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn combine_examples() {
        let w0 = Tensor::matrix(2, 2, vec![1., -2., 3., 4.]).unwrap();
        assert_eq!(combine(&w0, &Tensor::ones(&[2, 2]), Combine::Mul).unwrap(), w0);
        assert_eq!(combine(&w0, &Tensor::zeros(&[2, 2]), Combine::MulAdd).unwrap(), w0);
        let neg = w0.map(|x| -x);
        assert!(combine(&w0, &neg, Combine::Add).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(combine(&w0, &Tensor::ones(&[2, 3]), Combine::Add).is_err());
    }

    #[test]
    fn conv_modulate_examples() {
        let w0 = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|i| i as f64).collect()).unwrap();
        assert_eq!(conv_modulate(&w0, &Tensor::ones(&[2, 2])).unwrap(), w0);
        let f = Tensor::matrix(2, 2, vec![2., 1., 1., 1.]).unwrap();
        let out = conv_modulate(&w0, &f).unwrap();
        for (j, (&o, &w)) in out.data().iter().zip(w0.data()).enumerate() {
            assert_eq!(o, if j < 9 { 2.0 * w } else { w });
        }
        assert!(conv_modulate(&w0, &Tensor::ones(&[2, 3])).is_err());
    }

    #[test]
    fn trainable_order_matches_vars() {
        let mut rng = rng_for(0, Stream::Init, 0);
        for kind in [
            FunctionalKind::VanillaMul,
            FunctionalKind::Pow { p: 2, trainable: false },
            FunctionalKind::Cos { p: 2, trainable: true },
        ] {
            let mut ad = init_adapter(&mul_spec(kind), 3, 2, 0, &mut rng).unwrap().adapter;
            let mut tape = Tape::new();
            let vars = ad.register(&mut tape, true).unwrap();
            let handles = vars.trainable();
            let lens: Vec<usize> = handles.iter().map(|&v| tape.value(v).unwrap().numel()).collect();
            let fields: Vec<usize> = ad.trainable_mut().iter().map(|f| f.len()).collect();
            assert_eq!(lens, fields);
            assert_eq!(lens.iter().sum::<usize>(), ad.trainable_len());
        }
    }
}
