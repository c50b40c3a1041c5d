//! Shared text-format plumbing: shortest-roundtrip float formatting, SHA-256
//! digests, and the header conventions common to the on-disk artifacts.

use sha2::{Digest, Sha256};

/// Full-precision scientific notation. Rust's `{:e}` prints the shortest
/// decimal that parses back to the identical f64, so files round-trip
/// bitwise.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

pub(crate) fn parse_f64(field: &str) -> Result<f64, String> {
    let value = field
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("bad float {field:?}: {e}"))?;
    // Artifacts never contain non-finite values; a NaN or infinity in a file
    // is corruption, not data.
    if !value.is_finite() {
        return Err(format!("non-finite value {field:?}"));
    }
    Ok(value)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Short provenance digest: first 16 hex characters of SHA-256.
pub(crate) fn short_digest(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..16].to_string()
}

/// Splits a `# <name> v<version>; k=v; k=v` header line.
pub(crate) fn parse_header(
    line: &str,
    expect_name: &str,
) -> Result<(u32, Vec<(String, String)>), String> {
    let rest = line
        .strip_prefix('#')
        .ok_or_else(|| format!("expected `# {expect_name} v1` header, got {line:?}"))?
        .trim();
    let mut parts = rest.split(';').map(str::trim);
    let tag = parts.next().unwrap_or_default();
    let (name, version) = tag
        .rsplit_once(" v")
        .ok_or_else(|| format!("malformed header tag {tag:?}"))?;
    if name != expect_name {
        return Err(format!("expected a {expect_name} file, found {name:?}"));
    }
    let version: u32 = version
        .parse()
        .map_err(|_| format!("bad version {version:?}"))?;
    let mut meta = Vec::new();
    for kv in parts {
        if kv.is_empty() {
            continue;
        }
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("malformed header field {kv:?}"))?;
        meta.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok((version, meta))
}

/// Looks up a required header field.
pub(crate) fn meta_get<'a>(meta: &'a [(String, String)], key: &str) -> Result<&'a str, String> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| format!("header is missing `{key}`"))
}
