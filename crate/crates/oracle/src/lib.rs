//! Slow reference implementations with explicit loops and f64 accumulation.
//!
//! Nothing here shares code with the fast path. Loop order is fixed, so every
//! result is bit-stable across runs.

use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("unknown oracle op `{0}`")]
    UnknownOp(String),
    #[error("op `{op}` expects {expected}")]
    BadArguments { op: &'static str, expected: &'static str },
    #[error("loss is not deterministic: {first} then {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
}

/// Dense NCHW array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array4 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Array4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array size");
        Self { shape, data }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpId {
    Conv,
    DilatedConv,
    Se,
    Cap,
    Pmp,
    SigmoidGate,
    Softmax,
    Ce,
}

impl FromStr for OpId {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, OracleError> {
        Ok(match s {
            "conv" => OpId::Conv,
            "dilated_conv" => OpId::DilatedConv,
            "se" => OpId::Se,
            "cap" => OpId::Cap,
            "pmp" => OpId::Pmp,
            "sigmoid_gate" => OpId::SigmoidGate,
            "softmax" => OpId::Softmax,
            "ce" => OpId::Ce,
            other => return Err(OracleError::UnknownOp(other.to_string())),
        })
    }
}

/// Scalar settings for [`ref_forward`].
#[derive(Clone, Debug, Default)]
pub struct OpConfig {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    /// Class index per pixel for `ce`, `[n, h, w]` row-major.
    pub labels: Vec<usize>,
}

/// Dispatch by name.
///
/// | op | inputs | params |
/// |----|--------|--------|
/// | `conv`, `dilated_conv` | `x` | `w`, optional `b` as `[1, cout, 1, 1]` |
/// | `se` | `x` | `w1`, `b1`, `w2`, `b2` |
/// | `cap` | `x` | none |
/// | `pmp` | child maps | none |
/// | `sigmoid_gate` | `x` | `w` as `[1, c, 1, 1]`, `b` as `[1, 1, 1, 1]` |
/// | `softmax` | logits | none |
/// | `ce` | logits | none, labels in `config` |
pub fn ref_forward(op_id: &str, inputs: &[Array4], params: &[Array4], config: &OpConfig) -> Result<Array4, OracleError> {
    let op = OpId::from_str(op_id)?;
    let first = |expected| inputs.first().ok_or(OracleError::BadArguments { op: name(op), expected });
    match op {
        OpId::Conv | OpId::DilatedConv => {
            let x = first("one input")?;
            let w = params.first().ok_or(OracleError::BadArguments { op: name(op), expected: "a weight" })?;
            let b = params.get(1).map(|b| b.data.as_slice());
            let dil = if op == OpId::Conv { config.dilation.max(1) } else { config.dilation };
            Ok(conv2d(x, w, b, config.stride.max(1), config.pad, dil))
        }
        OpId::Se => {
            let x = first("one input")?;
            let [w1, b1, w2, b2] = params else {
                return Err(OracleError::BadArguments { op: "se", expected: "w1, b1, w2, b2" });
            };
            Ok(se(x, w1, &b1.data, w2, &b2.data))
        }
        OpId::Cap => Ok(cap(first("one input")?)),
        OpId::Pmp => {
            if inputs.is_empty() {
                return Err(OracleError::BadArguments { op: "pmp", expected: "at least one map" });
            }
            Ok(pmp(inputs))
        }
        OpId::SigmoidGate => {
            let x = first("one input")?;
            let [w, b] = params else {
                return Err(OracleError::BadArguments { op: "sigmoid_gate", expected: "w, b" });
            };
            let g = sigmoid_gate(x, &w.data, b.data[0]);
            Ok(Array4::new([g.len(), 1, 1, 1], g))
        }
        OpId::Softmax => Ok(softmax(first("one input")?)),
        OpId::Ce => {
            let x = first("one input")?;
            Ok(Array4::new([1, 1, 1, 1], vec![cross_entropy(x, &config.labels)]))
        }
    }
}

fn name(op: OpId) -> &'static str {
    match op {
        OpId::Conv => "conv",
        OpId::DilatedConv => "dilated_conv",
        OpId::Se => "se",
        OpId::Cap => "cap",
        OpId::Pmp => "pmp",
        OpId::SigmoidGate => "sigmoid_gate",
        OpId::Softmax => "softmax",
        OpId::Ce => "ce",
    }
}

/// Direct convolution. Output side `(L + 2·pad − dilation·(k − 1) − 1) / stride + 1`.
pub fn conv2d(x: &Array4, w: &Array4, b: Option<&[f64]>, stride: usize, pad: usize, dilation: usize) -> Array4 {
    let [n, cin, h, wd] = x.shape;
    let [cout, wcin, kh, kw] = w.shape;
    assert_eq!(cin, wcin, "input channels");
    let oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = Array4::zeros([n, cout, oh, ow]);
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(s, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(s, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Spatial mean per channel, `[n, c, 1, 1]`.
pub fn cap(x: &Array4) -> Array4 {
    let [n, c, h, w] = x.shape;
    let mut out = Array4::zeros([n, c, 1, 1]);
    for s in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += x.at(s, ch, y, xx);
                }
            }
            out.set(s, ch, 0, 0, acc / (h * w) as f64);
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Squeeze-excitation with 1×1 weights `w1: [mid, c]`, `w2: [c, mid]`.
pub fn se(x: &Array4, w1: &Array4, b1: &[f64], w2: &Array4, b2: &[f64]) -> Array4 {
    let [n, c, h, w] = x.shape;
    let mid = w1.shape[0];
    let pooled = cap(x);
    let mut out = x.clone();
    for s in 0..n {
        let mut hidden = vec![0.0; mid];
        for (m, hm) in hidden.iter_mut().enumerate() {
            let mut acc = b1[m];
            for ch in 0..c {
                acc += w1.at(m, ch, 0, 0) * pooled.at(s, ch, 0, 0);
            }
            *hm = acc.max(0.0);
        }
        for ch in 0..c {
            let mut acc = b2[ch];
            for (m, hm) in hidden.iter().enumerate() {
                acc += w2.at(ch, m, 0, 0) * hm;
            }
            let scale = sigmoid(acc);
            for y in 0..h {
                for xx in 0..w {
                    out.set(s, ch, y, xx, x.at(s, ch, y, xx) * scale);
                }
            }
        }
    }
    out
}

/// Per-pixel maximum over single-channel maps.
pub fn pmp(maps: &[Array4]) -> Array4 {
    let mut out = maps[0].clone();
    for m in &maps[1..] {
        assert_eq!(m.shape, out.shape, "pmp shapes");
        for i in 0..out.data.len() {
            if m.data[i] > out.data[i] {
                out.data[i] = m.data[i];
            }
        }
    }
    out
}

/// `sigmoid(w · cap(x) + b)` per sample.
pub fn sigmoid_gate(x: &Array4, w: &[f64], b: f64) -> Vec<f64> {
    let [n, c, _, _] = x.shape;
    let pooled = cap(x);
    (0..n)
        .map(|s| {
            let mut acc = b;
            for ch in 0..c {
                acc += w[ch] * pooled.at(s, ch, 0, 0);
            }
            sigmoid(acc)
        })
        .collect()
}

/// Softmax over the channel axis.
pub fn softmax(x: &Array4) -> Array4 {
    let [n, c, h, w] = x.shape;
    let mut out = Array4::zeros(x.shape);
    for s in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut z = 0.0;
                for ch in 0..c {
                    z += x.at(s, ch, y, xx).exp();
                }
                for ch in 0..c {
                    out.set(s, ch, y, xx, x.at(s, ch, y, xx).exp() / z);
                }
            }
        }
    }
    out
}

/// Mean over pixels of `−log softmax(x)[label]`.
pub fn cross_entropy(x: &Array4, labels: &[usize]) -> f64 {
    let [n, _, h, w] = x.shape;
    let p = softmax(x);
    let mut acc = 0.0;
    for s in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let k = labels[(s * h + y) * w + xx];
                acc -= p.at(s, k, y, xx).ln();
            }
        }
    }
    acc / (n * h * w) as f64
}

/// Comparison of a fast result against the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub op: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative error with the denominator floored at `floor`, so values near zero
/// are judged on an absolute scale.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare two arrays element-wise.
pub fn compare(op: &str, fast: &[f64], oracle: &[f64], tolerance: f64, floor: f64) -> OracleReport {
    let mut max_abs: f64 = if fast.len() == oracle.len() { 0.0 } else { f64::INFINITY };
    let mut max_rel: f64 = max_abs;
    for (&a, &b) in fast.iter().zip(oracle) {
        max_abs = max_abs.max((a - b).abs());
        max_rel = max_rel.max(rel_err(a, b, floor));
    }
    if fast.iter().chain(oracle).any(|v| !v.is_finite()) {
        max_rel = f64::INFINITY;
    }
    OracleReport { op: op.to_string(), max_abs, max_rel, tolerance, pass: max_rel <= tolerance }
}

/// Central differences at the selected coordinates of `point`, compared with
/// `analytic`. The loss is evaluated twice at `point` first to confirm determinism.
pub fn finite_diff_check(
    op: &str,
    loss: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    tolerance: f64,
    floor: f64,
) -> Result<OracleReport, OracleError> {
    let first = loss(point);
    let second = loss(point);
    if first.to_bits() != second.to_bits() {
        return Err(OracleError::NonDeterministicLoss { first, second });
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    let mut exact = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let up = loss(&x);
        x[i] = orig - eps;
        let down = loss(&x);
        x[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
        exact.push(analytic[i]);
    }
    Ok(compare(op, &exact, &numeric, tolerance, floor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_named_error() {
        let err = ref_forward("maxout", &[], &[], &OpConfig::default()).unwrap_err();
        assert_eq!(err, OracleError::UnknownOp("maxout".into()));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Array4::new([1, 1, 3, 3], (0..9).map(f64::from).collect());
        let mut w = Array4::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let cfg = OpConfig { stride: 1, pad: 1, dilation: 1, labels: vec![] };
        assert_eq!(ref_forward("conv", std::slice::from_ref(&x), &[w], &cfg).unwrap(), x);
    }

    #[test]
    fn pmp_two_children() {
        let a = Array4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Array4::new([1, 1, 2, 2], vec![4.0, 3.0, 2.0, 1.0]);
        assert_eq!(pmp(&[a, b]).data, vec![4.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let coeff = [1.5, -2.0, 0.25];
        let mut loss = |x: &[f64]| x.iter().zip(coeff).map(|(v, c)| c * v * v).sum::<f64>();
        let point = [0.3, -1.2, 2.0];
        let grad: Vec<f64> = point.iter().zip(coeff).map(|(v, c)| 2.0 * c * v).collect();
        let r = finite_diff_check("quadratic", &mut loss, &point, &grad, &[0, 1, 2], 1e-3, 1e-10, 1e-12).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn nondeterministic_loss_is_reported() {
        let mut calls = 0.0;
        let mut loss = |_: &[f64]| {
            calls += 1.0;
            calls
        };
        let err = finite_diff_check("x", &mut loss, &[0.0], &[0.0], &[0], 1e-3, 1e-4, 1e-8).unwrap_err();
        assert!(matches!(err, OracleError::NonDeterministicLoss { .. }));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let x = Array4::zeros([1, 7, 2, 2]);
        let ce = cross_entropy(&x, &[0, 3, 6, 2]);
        assert!((ce - 7f64.ln()).abs() < 1e-12);
    }
}
