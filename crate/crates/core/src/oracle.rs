//! Naive reference evaluation of operator graphs.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::graph::{OpKind, OperatorGraph};
use crate::scalar::{Dtype, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{len} elements do not fill shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("no value for input `{0}`")]
    MissingInput(String),
    #[error(transparent)]
    Graph(#[from] crate::error::GraphError),
}

/// Dense row-major tensor holding values already rounded to `dtype`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefTensor<T: Scalar> {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> RefTensor<T> {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<T>) -> Result<Self, OracleError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(OracleError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(RefTensor { dtype, shape, data })
    }

    /// Quantizes `values` to `dtype`.
    pub fn from_f64(dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Result<Self, OracleError> {
        let data = values
            .iter()
            .map(|&v| T::from_f64_lossy(dtype.quantize(v)))
            .collect();
        Self::new(dtype, shape, data)
    }

    /// Uniform(-1, 1) samples, quantized. Integer and boolean tensors get
    /// small integers and 0/1 respectively.
    pub fn random(dtype: Dtype, shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| match dtype {
                Dtype::I32 => rng.gen_range(-8i32..=8) as f64,
                Dtype::Bool => rng.gen_range(0..=1) as f64,
                _ => rng.gen_range(-1.0..1.0),
            })
            .collect();
        Self::from_f64(dtype, shape, &values).expect("length matches shape")
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(shapes: &[&[usize]]) -> Result<Vec<usize>, OracleError> {
    let rank = shapes.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = vec![1; rank];
    for s in shapes {
        for (k, &d) in s.iter().enumerate() {
            let o = &mut out[rank - s.len() + k];
            if *o == 1 {
                *o = d;
            } else if d != 1 && d != *o {
                return Err(OracleError::ShapeMismatch {
                    expected: out.clone(),
                    actual: s.to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Reads operand `t` at the broadcast output index `idx`.
fn at<T: Scalar>(t: &RefTensor<T>, out_shape: &[usize], idx: &[usize]) -> T {
    let st = strides(&t.shape);
    let off = out_shape.len() - t.shape.len();
    let mut flat = 0;
    for (k, &d) in t.shape.iter().enumerate() {
        if d != 1 {
            flat += idx[off + k] * st[k];
        }
    }
    t.data[flat]
}

fn elementwise<T: Scalar>(
    args: &[&RefTensor<T>],
    dtype: Dtype,
    f: impl Fn(&[T]) -> T,
) -> Result<RefTensor<T>, OracleError> {
    let shapes: Vec<&[usize]> = args.iter().map(|t| t.shape.as_slice()).collect();
    let shape = broadcast_shape(&shapes)?;
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut vals = vec![T::zero(); args.len()];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        for (v, t) in vals.iter_mut().zip(args) {
            *v = at(t, &shape, &idx);
        }
        data.push(T::from_f64_lossy(dtype.quantize(f(&vals).as_f64())));
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    RefTensor::new(dtype, shape, data)
}

fn bool_val<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

fn apply<T: Scalar>(
    kind: &OpKind,
    args: &[&RefTensor<T>],
    out_dtype: Dtype,
) -> Result<RefTensor<T>, OracleError> {
    let unary = |f: fn(T) -> T| elementwise(args, out_dtype, move |v| f(v[0]));
    let binary = |f: fn(T, T) -> T| elementwise(args, out_dtype, move |v| f(v[0], v[1]));
    match kind {
        OpKind::Add => binary(|a, b| a + b),
        OpKind::Sub => binary(|a, b| a - b),
        OpKind::Mul => binary(|a, b| a * b),
        OpKind::Div => binary(|a, b| a / b),
        OpKind::Min => binary(|a, b| a.min(b)),
        OpKind::Max => binary(|a, b| a.max(b)),
        OpKind::Pow => binary(|a, b| a.powf(b)),
        OpKind::Sqrt => unary(|a| a.sqrt()),
        OpKind::Abs => unary(|a| a.abs()),
        OpKind::Log => unary(|a| a.ln()),
        OpKind::Exp => unary(|a| a.exp()),
        OpKind::Round => unary(|a| a.round()),
        OpKind::Floor => unary(|a| a.floor()),
        OpKind::IsFinite => unary(|a| bool_val(a.is_finite())),
        OpKind::Copy | OpKind::Cast(_) => unary(|a| a),
        OpKind::Adds(s) => {
            let s = T::from_f64_lossy(*s);
            elementwise(args, out_dtype, move |v| v[0] + s)
        }
        OpKind::Muls(s) => {
            let s = T::from_f64_lossy(*s);
            elementwise(args, out_dtype, move |v| v[0] * s)
        }
        OpKind::Cmp(c) => {
            let c = *c;
            elementwise(args, out_dtype, move |v| {
                bool_val(c.apply(v[0].as_f64(), v[1].as_f64()))
            })
        }
        OpKind::Select => elementwise(
            args,
            out_dtype,
            |v| if v[0] != T::zero() { v[1] } else { v[2] },
        ),
        OpKind::Broadcast(size) => {
            let x = args[0];
            let w = size.as_const().expect("concrete graph");
            let mut shape = x.shape.clone();
            *shape.last_mut().expect("rank >= 1") = w;
            let data = x
                .data
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, w))
                .collect();
            RefTensor::new(out_dtype, shape, data)
        }
        OpKind::Sum | OpKind::ReduceMax | OpKind::ReduceMin => {
            let x = args[0];
            let w = *x.shape.last().expect("rank >= 1");
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = 1;
            let data = x
                .data
                .chunks(w)
                .map(|row| {
                    let r = row[1..].iter().fold(row[0], |acc, &v| match kind {
                        OpKind::Sum => acc + v,
                        OpKind::ReduceMax => acc.max(v),
                        _ => acc.min(v),
                    });
                    T::from_f64_lossy(out_dtype.quantize(r.as_f64()))
                })
                .collect();
            RefTensor::new(out_dtype, shape, data)
        }
        OpKind::Matmul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if b.shape[0] != k {
                return Err(OracleError::ShapeMismatch {
                    expected: vec![k, n],
                    actual: b.shape.clone(),
                });
            }
            let mut data = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc = acc + a.data[i * k + p] * b.data[p * n + j];
                    }
                    data[i * n + j] = T::from_f64_lossy(out_dtype.quantize(acc.as_f64()));
                }
            }
            RefTensor::new(out_dtype, vec![m, n], data)
        }
    }
}

/// Evaluates every op of `g` in order. Returns inputs and produced tensors by
/// name. Symbolic shapes must be bound in `g.symbols`.
pub fn ref_execute<T: Scalar>(
    g: &OperatorGraph,
    inputs: &HashMap<String, RefTensor<T>>,
) -> Result<HashMap<String, RefTensor<T>>, OracleError> {
    let g = g.concretize()?;
    let mut env: HashMap<String, RefTensor<T>> = HashMap::new();
    for t in g.inputs() {
        let meta = g.tensor(t);
        let v = inputs
            .get(&meta.name)
            .ok_or_else(|| OracleError::MissingInput(meta.name.clone()))?;
        let shape = meta.concrete_shape()?;
        if v.shape != shape {
            return Err(OracleError::ShapeMismatch {
                expected: shape,
                actual: v.shape.clone(),
            });
        }
        env.insert(meta.name.clone(), v.clone());
    }
    for op in &g.ops {
        let args: Vec<&RefTensor<T>> = op
            .inputs
            .iter()
            .map(|&t| {
                let name = &g.tensor(t).name;
                env.get(name)
                    .ok_or_else(|| OracleError::MissingInput(name.clone()))
            })
            .collect::<Result<_, _>>()?;
        let out = g.tensor(op.output);
        let value = apply(&op.kind, &args, out.dtype)?;
        let shape = out.concrete_shape()?;
        if value.shape != shape {
            return Err(OracleError::ShapeMismatch {
                expected: shape,
                actual: value.shape,
            });
        }
        env.insert(out.name.clone(), value);
    }
    Ok(env)
}

/// Tolerance `|a - e| <= abs + rel * |e|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub const EXACT: Tolerance = Tolerance { rel: 0.0, abs: 0.0 };

    pub const fn relative(rel: f64) -> Tolerance {
        Tolerance { rel, abs: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub max_abs_error: f64,
    pub first_mismatch: Option<usize>,
    pub mismatches: usize,
    pub pass: bool,
}

fn matches(a: f64, e: f64, tol: Tolerance) -> bool {
    if a.is_nan() || e.is_nan() {
        return a.is_nan() && e.is_nan();
    }
    if a.is_infinite() || e.is_infinite() {
        return a == e;
    }
    (a - e).abs() <= tol.abs + tol.rel * e.abs()
}

pub fn compare_slices(actual: &[f64], expected: &[f64], tol: Tolerance) -> CompareReport {
    let mut report = CompareReport {
        max_abs_error: 0.0,
        first_mismatch: None,
        mismatches: 0,
        pass: actual.len() == expected.len(),
    };
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        if a.is_finite() && e.is_finite() {
            report.max_abs_error = report.max_abs_error.max((a - e).abs());
        }
        if !matches(a, e, tol) {
            report.mismatches += 1;
            report.first_mismatch.get_or_insert(i);
            report.pass = false;
        }
    }
    report
}

pub fn compare<T: Scalar>(
    actual: &RefTensor<T>,
    expected: &RefTensor<T>,
    tol: Tolerance,
) -> Result<CompareReport, OracleError> {
    if actual.shape != expected.shape {
        return Err(OracleError::ShapeMismatch {
            expected: expected.shape.clone(),
            actual: actual.shape.clone(),
        });
    }
    Ok(compare_slices(&actual.to_f64(), &expected.to_f64(), tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{decompose, dims, Compound, GraphBuilder};

    type T64 = RefTensor<f64>;

    fn t(shape: &[usize], v: &[f64]) -> T64 {
        T64::from_f64(Dtype::F32, shape.to_vec(), v).unwrap()
    }

    #[test]
    fn add_and_matmul() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", Dtype::F32, dims(&[2, 2])).unwrap();
        let y = b.input("y", Dtype::F32, dims(&[2, 2])).unwrap();
        b.op_named(OpKind::Add, &[x, y], "s").unwrap();
        b.op_named(OpKind::Matmul, &[x, y], "p").unwrap();
        let g = b.build();
        let inputs = HashMap::from([
            ("x".to_string(), t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])),
            ("y".to_string(), t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])),
        ]);
        let out = ref_execute(&g, &inputs).unwrap();
        assert_eq!(out["s"].to_f64(), [6.0, 8.0, 10.0, 12.0]);
        assert_eq!(out["p"].to_f64(), [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn layernorm_example() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", Dtype::F32, dims(&[1, 1, 4])).unwrap();
        let y = decompose(&mut b, Compound::LayerNorm { eps: 1e-5 }, &[x], "y").unwrap();
        b.output(y);
        let g = b.build();
        let out = ref_execute(
            &g,
            &HashMap::from([("x".to_string(), t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]))]),
        )
        .unwrap();
        let expect = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, e) in out["y"].to_f64().iter().zip(expect) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn broadcasting_follows_trailing_alignment() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", Dtype::F32, dims(&[1, 3])).unwrap();
        let y = b.input("y", Dtype::F32, dims(&[2, 3])).unwrap();
        b.op_named(OpKind::Sub, &[y, x], "d").unwrap();
        let g = b.build();
        let out = ref_execute(
            &g,
            &HashMap::from([
                ("x".to_string(), t(&[1, 3], &[1.0, 2.0, 3.0])),
                ("y".to_string(), t(&[2, 3], &[1.0, 1.0, 1.0, 5.0, 5.0, 5.0])),
            ]),
        )
        .unwrap();
        assert_eq!(out["d"].to_f64(), [0.0, -1.0, -2.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn missing_input_is_an_error() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", Dtype::F32, dims(&[2])).unwrap();
        b.op(OpKind::Sqrt, &[x]).unwrap();
        let err = ref_execute::<f64>(&b.build(), &HashMap::new()).unwrap_err();
        assert_eq!(err, OracleError::MissingInput("x".into()));
    }

    #[test]
    fn compare_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let r = compare(&a, &a, Tolerance::EXACT).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_abs_error, 0.0);
        let r = compare_slices(&[1.0], &[1.001], Tolerance::relative(1e-3));
        assert!(r.pass);
        let r = compare_slices(&[f64::NAN], &[0.0], Tolerance::relative(1e-3));
        assert_eq!((r.pass, r.first_mismatch), (false, Some(0)));
        assert!(compare_slices(&[f64::NAN], &[f64::NAN], Tolerance::EXACT).pass);
        assert!(
            !compare_slices(
                &[f64::INFINITY],
                &[f64::NEG_INFINITY],
                Tolerance::relative(1.0)
            )
            .pass
        );
        assert!(compare(&a, &t(&[1, 2], &[1.0, 2.0]), Tolerance::EXACT).is_err());
    }

    #[test]
    fn f32_and_f64_backends_agree_on_f16_graphs() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", Dtype::F16, dims(&[8])).unwrap();
        let e = b.op(OpKind::Exp, &[x]).unwrap();
        b.op_named(OpKind::Mul, &[e, x], "y").unwrap();
        let g = b.build();
        let v = [0.1, -0.5, 0.25, 0.9, -1.0, 0.0, 0.3, 0.7];
        let r64 = ref_execute(
            &g,
            &HashMap::from([(
                "x".into(),
                RefTensor::<f64>::from_f64(Dtype::F16, vec![8], &v).unwrap(),
            )]),
        )
        .unwrap();
        let r32 = ref_execute(
            &g,
            &HashMap::from([(
                "x".into(),
                RefTensor::<f32>::from_f64(Dtype::F16, vec![8], &v).unwrap(),
            )]),
        )
        .unwrap();
        let rep = compare_slices(
            &r32["y"].to_f64(),
            &r64["y"].to_f64(),
            Tolerance::relative(1e-3),
        );
        assert!(rep.pass, "{rep:?}");
    }
}
