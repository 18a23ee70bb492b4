//! Compression codecs for tensors crossing the slow link: half-precision,
//! symmetric int8, low-rank truncation, and their nested compositions.

pub mod wire;

use std::fmt;
use std::str::FromStr;

use half::f16;
use thiserror::Error;

use crate::matrix::{self, Mat, MatrixError};
use crate::Matrix;
pub use wire::{CompressedPayload, HEADER_LEN, MAGIC, VERSION};

/// Largest magnitude encodable in half precision.
const FP16_MAX: f64 = 65504.0;

/// Errors from codec validation, encoding, and decoding.
#[derive(Debug, Error)]
pub enum CodecError {
    /// Composition or parameter rejected at validation time.
    #[error("invalid codec method: {0}")]
    InvalidMethod(String),
    /// Input magnitude outside the representable half-precision range.
    #[error("value {value} at {stream}[{index}] exceeds the half-precision range (|x| < {FP16_MAX})")]
    Fp16Overflow { stream: &'static str, index: usize, value: f64 },
    /// Structurally broken payload bytes.
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("payload checksum mismatch: header says {expected:#010x}, body hashes to {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("unsupported payload version {0}")]
    UnsupportedVersion(u8),
    #[error("bad payload magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown method id {0:#04x}")]
    UnknownMethodId(u8),
    /// Failure in the low-rank stage.
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    /// Schedule string that does not parse.
    #[error("cannot parse method name {0:?}")]
    BadMethodName(String),
}

/// A compression method: a primitive stage or a nested composition
/// (outer applied to the output of inner). Compositions deeper than two
/// stages are rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum CodecMethod {
    /// Pass-through; bit-exact roundtrip.
    Identity,
    /// IEEE 754 half precision, round-to-nearest-even.
    Fp16,
    /// Symmetric per-tensor int8: `scale = max|x| / 127`.
    Int8,
    /// Rank truncation keeping a `keep_fraction` of `min(rows, cols)`.
    Svd { keep_fraction: f64 },
    /// `outer(inner(x))`.
    Nested(Box<CodecMethod>, Box<CodecMethod>),
}

/// Quantizer stage of a canonicalized method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    None,
    Fp16,
    Int8,
}

impl Quantizer {
    /// Accounted bytes per stored element (identity charged at the 32-bit
    /// dense wire convention).
    pub fn accounted_width(self) -> u64 {
        match self {
            Quantizer::None => 4,
            Quantizer::Fp16 => 2,
            Quantizer::Int8 => 1,
        }
    }
}

/// Canonical two-stage view of a valid method: an optional low-rank stage
/// (innermost) followed by an optional quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalMethod {
    pub quantizer: Quantizer,
    pub keep_fraction: Option<f64>,
}

impl CanonicalMethod {
    pub fn method_id(&self) -> u8 {
        use wire::method_id::*;
        match (self.quantizer, self.keep_fraction.is_some()) {
            (Quantizer::None, false) => IDENTITY,
            (Quantizer::Fp16, false) => FP16,
            (Quantizer::Int8, false) => INT8,
            (Quantizer::None, true) => SVD,
            (Quantizer::Fp16, true) => FP16_SVD,
            (Quantizer::Int8, true) => INT8_SVD,
        }
    }

    /// Canonical view for a wire method id (tokens and unknown ids rejected).
    pub fn from_method_id(id: u8) -> Result<Self, CodecError> {
        use wire::method_id::*;
        let (quantizer, low_rank) = match id {
            IDENTITY => (Quantizer::None, false),
            FP16 => (Quantizer::Fp16, false),
            INT8 => (Quantizer::Int8, false),
            SVD => (Quantizer::None, true),
            FP16_SVD => (Quantizer::Fp16, true),
            INT8_SVD => (Quantizer::Int8, true),
            other => return Err(CodecError::UnknownMethodId(other)),
        };
        // The keep fraction is not recoverable from the id alone; decoding
        // reads the explicit rank from the header instead.
        Ok(Self { quantizer, keep_fraction: if low_rank { Some(f64::NAN) } else { None } })
    }

    /// Expected bytes of the accounted data for shape `m x n` and the rank
    /// this method selects, relative to the 32-bit dense baseline.
    pub fn nominal_ratio(&self, m: usize, n: usize) -> f64 {
        let width_ratio = self.quantizer.accounted_width() as f64 / 4.0;
        match self.keep_fraction {
            None => width_ratio,
            Some(rho) => width_ratio * matrix::compression_ratio(m, n, rank_for(rho, m, n)),
        }
    }
}

/// Rank selected by a keep fraction: `max(1, round(rho * min(m, n)))`.
pub fn rank_for(rho: f64, m: usize, n: usize) -> usize {
    let k = m.min(n);
    ((rho * k as f64).round() as usize).max(1).min(k)
}

impl CodecMethod {
    /// Convenience constructor for the common quantize-over-low-rank nesting.
    pub fn fp16_svd(keep_fraction: f64) -> Self {
        CodecMethod::Nested(
            Box::new(CodecMethod::Fp16),
            Box::new(CodecMethod::Svd { keep_fraction }),
        )
    }

    pub fn int8_svd(keep_fraction: f64) -> Self {
        CodecMethod::Nested(
            Box::new(CodecMethod::Int8),
            Box::new(CodecMethod::Svd { keep_fraction }),
        )
    }

    /// Validates the method and reduces it to its canonical two-stage form.
    ///
    /// Rules: at most two stages; the low-rank stage must be innermost; at
    /// most one quantizer; keep fractions must lie in `(0, 1]`.
    pub fn canonical(&self) -> Result<CanonicalMethod, CodecError> {
        match self {
            CodecMethod::Identity => {
                Ok(CanonicalMethod { quantizer: Quantizer::None, keep_fraction: None })
            }
            CodecMethod::Fp16 => {
                Ok(CanonicalMethod { quantizer: Quantizer::Fp16, keep_fraction: None })
            }
            CodecMethod::Int8 => {
                Ok(CanonicalMethod { quantizer: Quantizer::Int8, keep_fraction: None })
            }
            CodecMethod::Svd { keep_fraction } => {
                validate_fraction(*keep_fraction)?;
                Ok(CanonicalMethod { quantizer: Quantizer::None, keep_fraction: Some(*keep_fraction) })
            }
            CodecMethod::Nested(outer, inner) => {
                if matches!(**outer, CodecMethod::Nested(..))
                    || matches!(**inner, CodecMethod::Nested(..))
                {
                    return Err(CodecError::InvalidMethod(
                        "compositions deeper than two stages are not supported".into(),
                    ));
                }
                if matches!(**outer, CodecMethod::Svd { .. }) {
                    return Err(CodecError::InvalidMethod(
                        "the low-rank stage must be the innermost stage".into(),
                    ));
                }
                let co = outer.canonical()?;
                let ci = inner.canonical()?;
                if co.quantizer != Quantizer::None && ci.quantizer != Quantizer::None {
                    return Err(CodecError::InvalidMethod(
                        "at most one quantizer stage is allowed".into(),
                    ));
                }
                let quantizer = if co.quantizer != Quantizer::None {
                    co.quantizer
                } else {
                    ci.quantizer
                };
                Ok(CanonicalMethod { quantizer, keep_fraction: ci.keep_fraction })
            }
        }
    }

    /// True when encode/decode reproduces the input bit for bit.
    pub fn is_lossless(&self) -> bool {
        matches!(self.canonical(), Ok(CanonicalMethod { quantizer: Quantizer::None, keep_fraction: None }))
    }
}

fn validate_fraction(rho: f64) -> Result<(), CodecError> {
    if !(rho.is_finite() && rho > 0.0 && rho <= 1.0) {
        return Err(CodecError::InvalidMethod(format!(
            "keep fraction must lie in (0, 1], got {rho}"
        )));
    }
    Ok(())
}

fn format_fraction(rho: f64) -> String {
    format!("{rho}")
}

impl fmt::Display for CodecMethod {
    /// Canonical printable name, e.g. `FP16(SVD(0.6))`; the identity prints
    /// as `baseline`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.canonical() {
            Ok(c) => {
                let inner = c.keep_fraction.map(|rho| format!("SVD({})", format_fraction(rho)));
                match (c.quantizer, inner) {
                    (Quantizer::None, None) => write!(f, "baseline"),
                    (Quantizer::None, Some(s)) => write!(f, "{s}"),
                    (Quantizer::Fp16, None) => write!(f, "FP16"),
                    (Quantizer::Fp16, Some(s)) => write!(f, "FP16({s})"),
                    (Quantizer::Int8, None) => write!(f, "INT8"),
                    (Quantizer::Int8, Some(s)) => write!(f, "INT8({s})"),
                }
            }
            Err(_) => write!(f, "<invalid>"),
        }
    }
}

impl FromStr for CodecMethod {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, CodecError> {
        let t = s.trim();
        let lower = t.to_ascii_lowercase();
        if lower == "baseline" || lower == "identity" {
            return Ok(CodecMethod::Identity);
        }
        // NAME or NAME(inner).
        let (name, arg) = match t.find('(') {
            None => (lower.as_str(), None),
            Some(open) => {
                if !t.ends_with(')') {
                    return Err(CodecError::BadMethodName(s.into()));
                }
                (&lower[..open], Some(&t[open + 1..t.len() - 1]))
            }
        };
        match (name, arg) {
            ("fp16", None) => Ok(CodecMethod::Fp16),
            ("int8", None) => Ok(CodecMethod::Int8),
            ("svd", Some(a)) => {
                let rho: f64 =
                    a.trim().parse().map_err(|_| CodecError::BadMethodName(s.into()))?;
                validate_fraction(rho)?;
                Ok(CodecMethod::Svd { keep_fraction: rho })
            }
            ("fp16", Some(a)) => Ok(CodecMethod::Nested(
                Box::new(CodecMethod::Fp16),
                Box::new(a.parse()?),
            )),
            ("int8", Some(a)) => Ok(CodecMethod::Nested(
                Box::new(CodecMethod::Int8),
                Box::new(a.parse()?),
            )),
            _ => Err(CodecError::BadMethodName(s.into())),
        }
    }
}

/// Tensor direction across the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Per-direction method choice with a delayed-compression start step.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecSchedule {
    pub forward: CodecMethod,
    pub backward: CodecMethod,
    /// Steps before this one use the identity in both directions.
    pub start_step: u64,
}

impl CodecSchedule {
    pub fn new(forward: CodecMethod, backward: CodecMethod, start_step: u64) -> Self {
        Self { forward, backward, start_step }
    }

    pub fn baseline() -> Self {
        Self::new(CodecMethod::Identity, CodecMethod::Identity, 0)
    }

    /// Method in effect for `step` and `direction`: identity before the
    /// start step, the configured method from the start step on.
    pub fn select_method(&self, step: u64, direction: Direction) -> CodecMethod {
        if step < self.start_step {
            return CodecMethod::Identity;
        }
        match direction {
            Direction::Forward => self.forward.clone(),
            Direction::Backward => self.backward.clone(),
        }
    }

    /// Printable label: `forward+backward`, or `baseline` when both
    /// directions are the identity.
    pub fn label(&self) -> String {
        if self.forward == CodecMethod::Identity && self.backward == CodecMethod::Identity {
            return "baseline".into();
        }
        format!("{}+{}", self.forward, self.backward)
    }

    /// Parses `forward+backward` labels; a single non-baseline name applies
    /// to both directions.
    pub fn parse_label(label: &str, start_step: u64) -> Result<Self, CodecError> {
        let parts: Vec<&str> = label.split('+').collect();
        match parts.as_slice() {
            [one] => {
                let m: CodecMethod = one.parse()?;
                Ok(Self::new(m.clone(), m, start_step))
            }
            [fwd, bwd] => Ok(Self::new(fwd.parse()?, bwd.parse()?, start_step)),
            _ => Err(CodecError::BadMethodName(label.into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// Encodes a matrix for the wire under `method`, stamping `step`.
pub fn encode(x: &Matrix, method: &CodecMethod, step: u64) -> Result<CompressedPayload, CodecError> {
    let canon = method.canonical()?;
    let m = x.rows();
    let n = x.cols();

    // Innermost stage: optional low-rank truncation into factor streams.
    let (rank, streams): (u32, Vec<(&'static str, Vec<f64>)>) = match canon.keep_fraction {
        Some(rho) => {
            let r = rank_for(rho, m, n);
            let factors = matrix::svd(x)?;
            let t = matrix::truncate(&factors, r)?;
            (
                r as u32,
                vec![
                    ("u", t.u.as_slice().to_vec()),
                    ("sigma", t.sigma.clone()),
                    ("v", t.v.as_slice().to_vec()),
                ],
            )
        }
        None => (0, vec![("dense", x.as_slice().to_vec())]),
    };

    // Outermost stage: quantize each stream into the body.
    let mut body = Vec::new();
    for (stream_name, values) in &streams {
        match canon.quantizer {
            Quantizer::None => {
                for v in values {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
            Quantizer::Fp16 => {
                for (i, &v) in values.iter().enumerate() {
                    if !(v.abs() < FP16_MAX) {
                        return Err(CodecError::Fp16Overflow {
                            stream: stream_name,
                            index: i,
                            value: v,
                        });
                    }
                    body.extend_from_slice(&f16::from_f64(v).to_bits().to_le_bytes());
                }
            }
            Quantizer::Int8 => {
                let (scale, quants) = int8_quantize(values);
                body.extend_from_slice(&scale.to_le_bytes());
                body.extend(quants.iter().map(|&q| q as u8));
            }
        }
    }

    Ok(CompressedPayload::new(canon.method_id(), m as u32, n as u32, rank, step, body))
}

/// Symmetric per-tensor int8 quantization. All-zero input keeps scale 1.
fn int8_quantize(values: &[f64]) -> (f64, Vec<i8>) {
    let amax = values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
    let quants = values
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (scale, quants)
}

/// Half-precision encode: `encode` with [`CodecMethod::Fp16`].
pub fn encode_fp16(x: &Matrix, step: u64) -> Result<CompressedPayload, CodecError> {
    encode(x, &CodecMethod::Fp16, step)
}

/// Int8 encode: `encode` with [`CodecMethod::Int8`].
pub fn encode_int8(x: &Matrix, step: u64) -> Result<CompressedPayload, CodecError> {
    encode(x, &CodecMethod::Int8, step)
}

/// Low-rank encode: `encode` with [`CodecMethod::Svd`]. The selected rank is
/// recorded in the payload header.
pub fn encode_svd(x: &Matrix, keep_fraction: f64, step: u64) -> Result<CompressedPayload, CodecError> {
    encode(x, &CodecMethod::Svd { keep_fraction }, step)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Decodes a payload back into a dense matrix, verifying the checksum and
/// the exact body length for the declared method and shape.
pub fn decode(payload: &CompressedPayload) -> Result<Matrix, CodecError> {
    let actual = crc32fast::hash(&payload.body);
    if actual != payload.crc {
        return Err(CodecError::ChecksumMismatch { expected: payload.crc, actual });
    }
    let canon = CanonicalMethod::from_method_id(payload.method_id)?;
    let m = payload.rows as usize;
    let n = payload.cols as usize;
    let r = payload.rank as usize;
    if m == 0 || n == 0 {
        return Err(CodecError::Malformed(format!("degenerate payload shape {m}x{n}")));
    }
    let has_rank = canon.keep_fraction.is_some();
    if has_rank && (r == 0 || r > m.min(n)) {
        return Err(CodecError::Malformed(format!(
            "rank {r} out of range for a {m}x{n} low-rank payload"
        )));
    }
    if !has_rank && r != 0 {
        return Err(CodecError::Malformed(format!(
            "dense method carries nonzero rank {r}"
        )));
    }

    let stream_lens: Vec<usize> = if has_rank { vec![m * r, r, r * n] } else { vec![m * n] };
    let expected_body: usize = stream_lens
        .iter()
        .map(|&len| match canon.quantizer {
            Quantizer::None => 8 * len,
            Quantizer::Fp16 => 2 * len,
            Quantizer::Int8 => 8 + len,
        })
        .sum();
    if payload.body.len() != expected_body {
        return Err(CodecError::Malformed(format!(
            "body is {} bytes but the method and shape require {expected_body}",
            payload.body.len()
        )));
    }

    let mut cursor = 0usize;
    let mut streams: Vec<Vec<f64>> = Vec::with_capacity(stream_lens.len());
    for &len in &stream_lens {
        let mut vals = Vec::with_capacity(len);
        match canon.quantizer {
            Quantizer::None => {
                for _ in 0..len {
                    let bits: [u8; 8] = payload.body[cursor..cursor + 8].try_into().unwrap();
                    vals.push(f64::from_le_bytes(bits));
                    cursor += 8;
                }
            }
            Quantizer::Fp16 => {
                for _ in 0..len {
                    let bits: [u8; 2] = payload.body[cursor..cursor + 2].try_into().unwrap();
                    vals.push(f16::from_bits(u16::from_le_bytes(bits)).to_f64());
                    cursor += 2;
                }
            }
            Quantizer::Int8 => {
                let bits: [u8; 8] = payload.body[cursor..cursor + 8].try_into().unwrap();
                let scale = f64::from_le_bytes(bits);
                if !scale.is_finite() || scale <= 0.0 {
                    return Err(CodecError::Malformed(format!("bad int8 scale {scale}")));
                }
                cursor += 8;
                for _ in 0..len {
                    vals.push(payload.body[cursor] as i8 as f64 * scale);
                    cursor += 1;
                }
            }
        }
        streams.push(vals);
    }

    if has_rank {
        let u = Mat::from_vec(m, r, streams[0].clone())?;
        let sigma = &streams[1];
        let v = Mat::from_vec(n, r, streams[2].clone())?;
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            for t in 0..r {
                let us = u.get(i, t) * sigma[t];
                let orow = out.row_mut(i);
                for j in 0..n {
                    orow[j] += us * v.get(j, t);
                }
            }
        }
        Ok(out)
    } else {
        Ok(Matrix::from_vec(m, n, streams.pop().unwrap())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_matrix(m: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.gen_range(-4.0..4.0))
    }

    #[test]
    fn names_round_trip_through_the_parser() {
        let cases = [
            (CodecMethod::Identity, "baseline"),
            (CodecMethod::Fp16, "FP16"),
            (CodecMethod::Int8, "INT8"),
            (CodecMethod::Svd { keep_fraction: 0.6 }, "SVD(0.6)"),
            (CodecMethod::fp16_svd(0.6), "FP16(SVD(0.6))"),
            (CodecMethod::int8_svd(0.25), "INT8(SVD(0.25))"),
        ];
        for (method, want) in cases {
            assert_eq!(method.to_string(), want);
            let parsed: CodecMethod = want.parse().unwrap();
            assert_eq!(parsed.canonical().unwrap(), method.canonical().unwrap());
        }
        assert!("svd".parse::<CodecMethod>().is_err());
        assert!("fp32".parse::<CodecMethod>().is_err());
        assert!("svd(0)".parse::<CodecMethod>().is_err());
        assert!("svd(1.5)".parse::<CodecMethod>().is_err());
    }

    #[test]
    fn invalid_compositions_are_rejected() {
        let too_deep = CodecMethod::Nested(
            Box::new(CodecMethod::Fp16),
            Box::new(CodecMethod::Nested(
                Box::new(CodecMethod::Int8),
                Box::new(CodecMethod::Svd { keep_fraction: 0.5 }),
            )),
        );
        assert!(matches!(too_deep.canonical(), Err(CodecError::InvalidMethod(_))));

        let svd_outer = CodecMethod::Nested(
            Box::new(CodecMethod::Svd { keep_fraction: 0.5 }),
            Box::new(CodecMethod::Fp16),
        );
        assert!(matches!(svd_outer.canonical(), Err(CodecError::InvalidMethod(_))));

        let two_quant = CodecMethod::Nested(Box::new(CodecMethod::Fp16), Box::new(CodecMethod::Int8));
        assert!(matches!(two_quant.canonical(), Err(CodecError::InvalidMethod(_))));

        let bad_rho = CodecMethod::Svd { keep_fraction: 0.0 };
        assert!(matches!(bad_rho.canonical(), Err(CodecError::InvalidMethod(_))));
    }

    #[test]
    fn identity_nests_collapse() {
        let m = CodecMethod::Nested(
            Box::new(CodecMethod::Identity),
            Box::new(CodecMethod::Svd { keep_fraction: 0.5 }),
        );
        assert_eq!(m.canonical().unwrap().method_id(), wire::method_id::SVD);
        let m = CodecMethod::Nested(Box::new(CodecMethod::Fp16), Box::new(CodecMethod::Identity));
        assert_eq!(m.canonical().unwrap().method_id(), wire::method_id::FP16);
    }

    #[test]
    fn identity_roundtrip_is_bit_exact() {
        let x = rand_matrix(7, 5, 1);
        let p = encode(&x, &CodecMethod::Identity, 3).unwrap();
        assert_eq!(p.step, 3);
        let y = decode(&p).unwrap();
        assert_eq!(x.as_slice(), y.as_slice());
        // Actual wire carries f64; accounting charges the 32-bit convention.
        assert_eq!(p.body_len(), 8 * 35);
        assert_eq!(p.data_bytes(), 4 * 35);
        assert_eq!(p.measured_ratio(), 1.0);
    }

    #[test]
    fn fp16_known_values() {
        // 0.5 is exactly representable in half precision.
        let x = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let y = decode(&encode_fp16(&x, 0).unwrap()).unwrap();
        assert_eq!(y.get(0, 0), 0.5);

        // 1/3 is not; round-to-nearest keeps the relative error within 2^-11.
        let x = Matrix::from_vec(1, 1, vec![1.0 / 3.0]).unwrap();
        let y = decode(&encode_fp16(&x, 0).unwrap()).unwrap();
        let err = (y.get(0, 0) - 1.0 / 3.0).abs();
        assert!(err <= (1.0 / 3.0) * 2f64.powi(-11), "err {err}");
        assert!(err > 0.0);
    }

    #[test]
    fn fp16_payload_size_and_ratio() {
        let x = rand_matrix(100, 100, 2);
        let p = encode_fp16(&x, 0).unwrap();
        assert_eq!(p.body_len(), 20_000);
        assert_eq!(p.data_bytes(), 20_000);
        assert_eq!(p.measured_ratio(), 0.5);
    }

    #[test]
    fn fp16_overflow_is_reported_with_location() {
        let x = Matrix::from_vec(1, 2, vec![1.0, 70000.0]).unwrap();
        match encode_fp16(&x, 0) {
            Err(CodecError::Fp16Overflow { stream: "dense", index: 1, value }) => {
                assert_eq!(value, 70000.0)
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn fp16_roundtrip_is_idempotent() {
        let x = rand_matrix(9, 4, 3);
        let once = decode(&encode_fp16(&x, 0).unwrap()).unwrap();
        let twice = decode(&encode_fp16(&once, 0).unwrap()).unwrap();
        assert_eq!(once.as_slice(), twice.as_slice());
    }

    #[test]
    fn int8_known_values() {
        // All zeros: scale stays 1, roundtrip exact.
        let x = Matrix::zeros(3, 3);
        let p = encode_int8(&x, 0).unwrap();
        let scale = f64::from_le_bytes(p.body[0..8].try_into().unwrap());
        assert_eq!(scale, 1.0);
        assert_eq!(decode(&p).unwrap().as_slice(), x.as_slice());

        // [-1, 1]: scale 1/127 and the extremes land on exact grid points.
        let x = Matrix::from_vec(1, 2, vec![-1.0, 1.0]).unwrap();
        let y = decode(&encode_int8(&x, 0).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn int8_error_bounded_by_half_scale() {
        let x = rand_matrix(50, 50, 4);
        let p = encode_int8(&x, 0).unwrap();
        let scale = f64::from_le_bytes(p.body[0..8].try_into().unwrap());
        assert_eq!(scale, x.max_abs() / 127.0);
        let y = decode(&p).unwrap();
        let worst = x.sub(&y).max_abs();
        assert!(worst <= scale / 2.0 + 1e-15, "worst {worst} vs scale/2 {}", scale / 2.0);
        assert_eq!(p.body_len(), 8 + 2500);
        assert_eq!(p.data_bytes(), 2500);
        assert_eq!(p.measured_ratio(), 0.25);
    }

    #[test]
    fn svd_full_rank_roundtrip_is_nearly_lossless() {
        let x = rand_matrix(8, 6, 5);
        let p = encode_svd(&x, 1.0, 0).unwrap();
        assert_eq!(p.rank, 6);
        let y = decode(&p).unwrap();
        let err = x.sub(&y).frobenius_norm();
        assert!(err <= 1e-8 * x.frobenius_norm(), "err {err}");
    }

    #[test]
    fn svd_rank_selection_and_sizes() {
        // 512 x 48 at keep fraction 0.6 selects rank round(28.8) = 29.
        assert_eq!(rank_for(0.6, 512, 48), 29);
        assert_eq!(rank_for(1.0, 100, 50), 50);
        assert_eq!(rank_for(0.01, 100, 50), 1);

        let x = rand_matrix(20, 10, 6);
        let p = encode_svd(&x, 0.5, 0).unwrap();
        assert_eq!(p.rank, 5);
        // Factor streams: (20*5 + 5 + 5*10) f64 values.
        assert_eq!(p.body_len(), 8 * 155);
        assert_eq!(p.data_bytes(), 4 * 155);
        assert_eq!(p.measured_ratio(), matrix::compression_ratio(20, 10, 5));
    }

    #[test]
    fn svd_truncation_error_matches_tail_energy() {
        let x = rand_matrix(12, 8, 7);
        let f = matrix::svd(&x).unwrap();
        let p = encode_svd(&x, 0.5, 0).unwrap();
        let y = decode(&p).unwrap();
        let err = x.sub(&y).frobenius_norm();
        let tail: f64 = f.sigma[4..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-8 * (1.0 + x.frobenius_norm()), "err {err} tail {tail}");
    }

    #[test]
    fn nested_fp16_svd_combines_both_stages() {
        let x = rand_matrix(40, 10, 8);
        let method = CodecMethod::fp16_svd(0.5);
        let p = encode(&x, &method, 11).unwrap();
        assert_eq!(p.method_id, wire::method_id::FP16_SVD);
        assert_eq!(p.rank, 5);
        let elems = 40 * 5 + 5 + 5 * 10;
        assert_eq!(p.body_len(), 2 * elems);
        assert_eq!(p.data_bytes(), 2 * elems as u64);
        let y = decode(&p).unwrap();
        // Half-precision noise on top of the truncation tail.
        let f = matrix::svd(&x).unwrap();
        let tail: f64 = f.sigma[5..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let err = x.sub(&y).frobenius_norm();
        assert!(err <= tail + 0.01 * x.frobenius_norm(), "err {err} tail {tail}");
    }

    #[test]
    fn nominal_ratio_matches_measured_for_matrix_methods() {
        let x = rand_matrix(64, 32, 9);
        for method in [
            CodecMethod::Identity,
            CodecMethod::Fp16,
            CodecMethod::Int8,
            CodecMethod::Svd { keep_fraction: 0.4 },
            CodecMethod::fp16_svd(0.4),
            CodecMethod::int8_svd(0.4),
        ] {
            let canon = method.canonical().unwrap();
            let p = encode(&x, &method, 0).unwrap();
            assert_eq!(p.measured_ratio(), canon.nominal_ratio(64, 32), "{method}");
        }
    }

    #[test]
    fn schedule_gates_on_start_step() {
        let sched = CodecSchedule::new(CodecMethod::Fp16, CodecMethod::Int8, 2000);
        assert_eq!(sched.select_method(0, Direction::Forward), CodecMethod::Identity);
        assert_eq!(sched.select_method(1999, Direction::Backward), CodecMethod::Identity);
        assert_eq!(sched.select_method(2000, Direction::Forward), CodecMethod::Fp16);
        assert_eq!(sched.select_method(2000, Direction::Backward), CodecMethod::Int8);
        assert_eq!(sched.select_method(u64::MAX, Direction::Forward), CodecMethod::Fp16);
        assert_eq!(sched.label(), "FP16+INT8");
        assert_eq!(CodecSchedule::baseline().label(), "baseline");
    }

    #[test]
    fn schedule_labels_parse() {
        let s = CodecSchedule::parse_label("FP16(SVD(0.6))+INT8", 100).unwrap();
        assert_eq!(s.forward, CodecMethod::fp16_svd(0.6));
        assert_eq!(s.backward, CodecMethod::Int8);
        assert_eq!(s.start_step, 100);
        assert_eq!(s.label(), "FP16(SVD(0.6))+INT8");

        let b = CodecSchedule::parse_label("baseline", 0).unwrap();
        assert_eq!(b, CodecSchedule::baseline());

        let same = CodecSchedule::parse_label("FP16", 0).unwrap();
        assert_eq!(same.forward, CodecMethod::Fp16);
        assert_eq!(same.backward, CodecMethod::Fp16);
    }

    #[test]
    fn decode_rejects_mismatched_bodies() {
        let x = rand_matrix(4, 4, 10);
        let mut p = encode_fp16(&x, 0).unwrap();
        p.body.pop();
        p.crc = crc32fast::hash(&p.body);
        assert!(matches!(decode(&p), Err(CodecError::Malformed(_))));

        let mut p = encode_fp16(&x, 0).unwrap();
        p.body[0] ^= 0x55;
        assert!(matches!(decode(&p), Err(CodecError::ChecksumMismatch { .. })));

        let mut p = encode_fp16(&x, 0).unwrap();
        p.method_id = 0x77;
        p.crc = crc32fast::hash(&p.body);
        assert!(matches!(decode(&p), Err(CodecError::UnknownMethodId(0x77))));
    }

    #[test]
    fn decoded_non_finite_values_are_rejected() {
        let x = Matrix::zeros(1, 1);
        let mut p = encode(&x, &CodecMethod::Identity, 0).unwrap();
        p.body = f64::INFINITY.to_le_bytes().to_vec();
        p.crc = crc32fast::hash(&p.body);
        assert!(matches!(decode(&p), Err(CodecError::Matrix(MatrixError::NonFinite { .. }))));
    }
}
