//! Fixed-width real formatting shared by every report writer.
//!
//! All reals leave the process with 17 significant digits in scientific
//! notation, so identical runs produce byte-identical files.

use std::io;

use serde::Serialize;

/// Formats a real with 17 significant digits. Non-finite values become
/// `inf`, `-inf` or `nan`.
pub fn real17(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// `serde_json` formatter writing every float through [`real17`]; non-finite
/// values are written as `null`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Real17Formatter;

impl serde_json::ser::Formatter for Real17Formatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(real17(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` to JSON with 17-digit reals.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> crate::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Real17Formatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Hex SHA-256 of a byte string; used to stamp reports with their input.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
